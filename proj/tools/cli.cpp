#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <optional>
#include <ostream>

#include "flowsynth/config.hpp"
#include "flowsynth/error.hpp"
#include "flowsynth/kernels.hpp"
#include "flowsynth/pipeline.hpp"

namespace flowsynth::cli {

namespace {

namespace fs = std::filesystem;

constexpr int kUsage = 2;
constexpr int kFailure = 1;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// FLOWSYNTH_THREADS=N caps OpenMP workers; unset keeps the hardware default.
void apply_thread_env() {
  const char* env = std::getenv("FLOWSYNTH_THREADS");
  if (env == nullptr || *env == '\0') return;
  const std::string_view s(env);
  int n = 0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), n);
  if (ec != std::errc() || end != s.data() + s.size() || n < 1) {
    throw UsageError("FLOWSYNTH_THREADS must be a positive integer, got '" + std::string(s) + "'");
  }
  kernels::set_thread_count(n);
}

// "f", "a", "f:0.3": tracer and the severity fed to the demographic token.
std::pair<Modality, double> parse_context_id(const std::string& text) {
  const auto colon = text.find(':');
  const Modality m = parse_modality(text.substr(0, colon));
  if (colon == std::string::npos) return {m, 0.5};
  const std::string rest = text.substr(colon + 1);
  double s = 0.0;
  const auto [end, ec] = std::from_chars(rest.data(), rest.data() + rest.size(), s);
  if (ec != std::errc() || end != rest.data() + rest.size() || !(s >= 0.0 && s <= 1.0)) {
    throw Error(Errc::bad_argument, "context id severity must be a number in [0, 1], got '" + rest + "'");
  }
  return {m, s};
}

std::string formats_text() {
  return "VOL1\tversion 1\tscalar volume: magic, u32 nx ny nz, u8 value_domain, f32 voxels (x fastest)\n"
         "LBL1\tversion 1\tlabel map: magic, u32 nx ny nz, u8 0, u16 labels, u16 name count, (u16 id, u16 len, bytes)\n"
         "CKPT1\tversion 1\tcheckpoint: magic, u32 count, (u32 name len, name, u32 rank, u32 dims, f32 values)\n";
}

std::string version_text() {
  std::string s = "flowsynth " FLOWSYNTH_VERSION "\n";
  s += "build " FLOWSYNTH_BUILD_TYPE ", compiler " __VERSION__;
#ifdef _OPENMP
  s += ", OpenMP " + std::to_string(_OPENMP);
#endif
  s += "\nformats VOL1 LBL1 CKPT1 version 1\n";
  return s;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Rectified-flow volume translation pipeline on synthetic phantoms", "flowsynth"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  std::string config_path, out_dir, dims, ckpt, out_path, input, context_id, manifest, labels, info_topic;
  std::optional<std::size_t> n;
  std::optional<std::uint64_t> seed;
  std::size_t steps = 1;
  bool stop_before_distill = false;

  auto* gen = app.add_subcommand("gen-data", "generate phantom pairs, label map and manifest");
  gen->add_option("--config", config_path, "config file")->check(CLI::ExistingFile);
  gen->add_option("--n", n, "number of subjects (overrides n_samples)");
  gen->add_option("--dims", dims, "grid NXxNYxNZ (overrides dims)");
  gen->add_option("--seed", seed, "root seed (overrides seed)");
  gen->add_option("--out-dir", out_dir, "output root (overrides out_dir)");

  auto* align = app.add_subcommand("align", "fit the modality adapters");
  align->add_option("--config", config_path, "config file")->required()->check(CLI::ExistingFile);

  auto* train = app.add_subcommand("train", "train the velocity network (distillation included)");
  train->add_option("--config", config_path, "config file")->required()->check(CLI::ExistingFile);
  train->add_option("--out", out_path, "checkpoint path (default <out_dir>/train/model.ckpt)");
  train->add_flag("--stop-before-distill", stop_before_distill, "stop at distill_start_epoch");

  auto* distill = app.add_subcommand("distill", "resume a checkpoint and run the remaining epochs");
  distill->add_option("--config", config_path, "config file")->required()->check(CLI::ExistingFile);
  distill->add_option("--ckpt", ckpt, "input checkpoint")->required()->check(CLI::ExistingFile);
  distill->add_option("--out", out_path, "output checkpoint (default: overwrite --ckpt)");

  auto* sample = app.add_subcommand("sample", "translate one volume with a trained checkpoint");
  sample->add_option("--ckpt", ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
  sample->add_option("--input", input, "source VOL1 volume")->required()->check(CLI::ExistingFile);
  sample->add_option("--context-id", context_id, "tracer f|a, optionally ':severity'")->required();
  sample->add_option("--steps", steps, "Euler steps (1 = one-step)")->check(CLI::PositiveNumber);
  sample->add_option("--out", out_path, "output VOL1 volume")->required();

  auto* eval = app.add_subcommand("eval", "image metrics of the sampled volumes");
  eval->add_option("--config", config_path, "config file")->required()->check(CLI::ExistingFile);

  auto* stats = app.add_subcommand("stats", "regional uptake statistics and FDR report");
  stats->add_option("--config", config_path, "config file")->required()->check(CLI::ExistingFile);
  stats->add_option("--manifest", manifest, "cohort TSV (default <out_dir>/sample/cohort.tsv)")->check(CLI::ExistingFile);
  stats->add_option("--labels", labels, "LBL1 label map (default <out_dir>/data/labels.lbl)")->check(CLI::ExistingFile);

  auto* run = app.add_subcommand("run", "all stages: gen-data, align, train, sample, eval, stats");
  run->add_option("--config", config_path, "config file")->required()->check(CLI::ExistingFile);

  auto* info = app.add_subcommand("info", "print file formats or the config schema");
  info->add_option("topic", info_topic, "formats | schema")->required()->check(CLI::IsMember({"formats", "schema"}));

  auto* version = app.add_subcommand("version", "print version and build metadata");

  if (!args.empty() && !args[0].empty() && args[0][0] != '-') {
    const auto subs = app.get_subcommands([](const CLI::App*) { return true; });
    const bool known = std::any_of(subs.begin(), subs.end(), [&](const CLI::App* s) { return s->get_name() == args[0]; });
    if (!known) {
      err << "flowsynth: unknown subcommand '" << args[0] << "'\n" << app.help();
      return kUsage;
    }
  }

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : kUsage;
  }

  try {
    apply_thread_env();
    auto load = [&](config::Values overrides = {}) {
      auto values = config_path.empty() ? config::Values{} : config::parse_file(config_path);
      for (auto& [k, v] : overrides) values[k] = v;
      return config::resolve(values);
    };

    if (*version) {
      out << version_text();
    } else if (*info) {
      out << (info_topic == "formats" ? formats_text() : config::schema_text());
    } else if (*gen) {
      config::Values o;
      if (n) o["n_samples"] = std::to_string(*n);
      if (!dims.empty()) o["dims"] = dims;
      if (seed) o["seed"] = std::to_string(*seed);
      if (!out_dir.empty()) o["out_dir"] = out_dir;
      pipeline::gen_data(load(o), out);
    } else if (*align) {
      pipeline::align(load(), out);
    } else if (*train) {
      pipeline::train(load(), stop_before_distill,
                      out_path.empty() ? std::nullopt : std::optional<fs::path>(out_path), out);
    } else if (*distill) {
      pipeline::distill(load(), ckpt, out_path.empty() ? fs::path(ckpt) : fs::path(out_path), out);
    } else if (*sample) {
      const auto [m, severity] = parse_context_id(context_id);
      const auto result = pipeline::sample_volume(ckpt, read_volume(input), m, severity, steps);
      if (const auto parent = fs::path(out_path).parent_path(); !parent.empty()) fs::create_directories(parent);
      write_volume(out_path, result);
      out << "sample: wrote " << out_path << "\n";
    } else if (*eval) {
      pipeline::evaluate(load(), out);
    } else if (*stats) {
      const auto cfg = load();
      const pipeline::StageDirs d{cfg.out_dir};
      pipeline::stats(cfg, manifest.empty() ? d.sample() / "cohort.tsv" : fs::path(manifest),
                      labels.empty() ? d.data() / "labels.lbl" : fs::path(labels), out);
    } else if (*run) {
      pipeline::run(load(), out);
    }
  } catch (const UsageError& e) {
    err << "flowsynth: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "flowsynth: error: " << e.what() << "\n";
    return kFailure;
  }
  return 0;
}

}  // namespace flowsynth::cli
