#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "doctest.h"
#include "flowsynth/checkpoint.hpp"
#include "flowsynth/config.hpp"
#include "flowsynth/error.hpp"
#include "flowsynth/kernels.hpp"
#include "flowsynth/pipeline.hpp"

using namespace flowsynth;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = 0;
  std::string out;
  std::string err;
};

Result invoke(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("flowsynth_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Small enough that a full run takes about a second.
fs::path write_config(const fs::path& dir, const fs::path& out_dir, const std::string& extra = "") {
  const auto path = dir / "run.cfg";
  std::ofstream(path) << "# tiny end-to-end run\n"
                      << "out_dir = " << out_dir.string() << "\n"
                      << "seed = 11\ndims = 8\nn_samples = 10\nn_test = 4\nn_regions = 4\n"
                      << "base_channels = 4\nembed_dim = 8\ntime_embed_dim = 4\n"
                      << "epochs = 6\ndistill_start_epoch = 4\nteacher_steps = 4\nsample_steps = 4\n"
                      << "align_steps = 50\nlr = 0.002\n"
                      << extra;
  return path;
}

const std::vector<std::string> kStages{"data", "align", "train", "sample", "eval", "stats"};

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  const auto unknown = invoke({"frobnicate"});
  CHECK(unknown.code == 2);
  CHECK(unknown.err.find("unknown subcommand 'frobnicate'") != std::string::npos);
  CHECK(unknown.err.find("Usage:") != std::string::npos);
  CHECK(invoke({}).code == 2);
  CHECK(invoke({"train"}).code == 2);  // --config is required
  CHECK(invoke({"info", "colours"}).code == 2);
  CHECK(invoke({"--help"}).code == 0);
}

TEST_CASE("version and info") {
  const auto v = invoke({"version"});
  CHECK(v.code == 0);
  CHECK(v.out.rfind("flowsynth ", 0) == 0);

  const auto f = invoke({"info", "formats"});
  CHECK(f.code == 0);
  for (const std::string tag : {"VOL1\tversion 1", "LBL1\tversion 1", "CKPT1\tversion 1"}) {
    CHECK(f.out.find(tag) != std::string::npos);
  }

  const auto s = invoke({"info", "schema"});
  CHECK(s.code == 0);
  const auto values = config::parse_text(s.out);
  CHECK(values.size() == config::schema().size());
  const auto cfg = config::resolve(values);
  for (const auto& key : config::schema()) {
    if (key.default_value) CHECK(cfg.resolved.at(key.key) == *key.default_value);
  }
}

TEST_CASE("config parsing is strict") {
  auto fails_with = [](const std::string& text, const std::string& fragment) {
    try {
      config::resolve(config::parse_text(text));
    } catch (const Error& e) {
      CHECK(e.code() == Errc::bad_config);
      const bool named = std::string(e.what()).find(fragment) != std::string::npos;
      CHECK_MESSAGE(named, e.what());
      return;
    }
    FAIL("no error for: " << text);
  };
  fails_with("seed = 1\n", "missing required key 'out_dir'");
  fails_with("out_dir = x\nlearning_rate = 1\n", "unknown key 'learning_rate'");
  fails_with("out_dir = x\nseed = 1\nseed = 2\n", "duplicate key 'seed'");
  fails_with("out_dir = x\nseed\n", "line 2");
  fails_with("out_dir = x\nepochs = ten\n", "key 'epochs'");
  fails_with("out_dir = x\nlr = 1e-3x\n", "key 'lr'");
  fails_with("out_dir = x\nmask = partial\n", "key 'mask'");
  fails_with("out_dir = x\nstats_tracer = z\n", "key 'stats_tracer'");
  fails_with("out_dir = x\ndims = 8x8\n", "key 'dims'");
  fails_with("out_dir = x\nn_samples = 4\nn_test = 4\n", "key 'n_test'");
  fails_with("out_dir = x\nepochs = 5\ndistill_start_epoch = 6\n", "distill_start_epoch");

  const auto ok = config::resolve(config::parse_text("  out_dir = x  # trailing comment\n\n# note\nlr=0.5\n"));
  CHECK(ok.flow.adam.lr == 0.5);
  CHECK(ok.out_dir == "x");
  CHECK(ok.net.attn_levels == std::set<std::string>{"mid", "dec"});
  // The resolved text is itself a complete config.
  CHECK(config::to_text(config::resolve(config::parse_text(config::to_text(ok)))) == config::to_text(ok));
}

TEST_CASE("gen-data flags override the config") {
  const auto dir = fresh_dir("gen");
  const auto r = invoke({"gen-data", "--n", "10", "--dims", "8x8x10", "--seed", "3", "--out-dir", (dir / "o").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(invoke({"gen-data", "--n", "12", "--out-dir", (dir / "p").string()}).code == 0);
  const auto rows = pipeline::read_manifest(dir / "o" / "data" / "manifest.tsv");
  REQUIRE(rows.size() == 10);
  CHECK(rows[1].split == "train");
  CHECK(rows[9].split == "test");
  CHECK(read_volume(rows[2].source).dims() == Dims{8, 8, 10});
  CHECK(slurp(dir / "o" / "data" / "manifest.tsv").rfind("id\tsplit\tseverity\tdelta_f\tdelta_a\tsource\ttarget_f\ttarget_a\n", 0) == 0);
  const auto resolved = config::parse_file(dir / "o" / "data" / "config.resolved");
  CHECK(resolved.at("seed") == "3");
  CHECK(resolved.at("n_samples") == "10");
  // n_test defaults to 8, too many for 4 subjects.
  const auto bad = invoke({"gen-data", "--n", "4", "--out-dir", (dir / "q").string()});
  CHECK(bad.code == 1);
  CHECK(bad.err.find("n_test") != std::string::npos);
}

TEST_CASE("full run: outputs, determinism and thread independence") {
  const auto dir = fresh_dir("run");
  const auto a = write_config(dir, dir / "a");
  REQUIRE_MESSAGE(invoke({"run", "--config", a.string()}).code == 0, invoke({"run", "--config", a.string()}).err);
  for (const auto& s : kStages) CHECK(fs::exists(dir / "a" / s / "config.resolved"));
  for (const auto* f : {"train/model.ckpt", "train/history.tsv", "sample/cohort.tsv", "eval/metrics.tsv",
                        "eval/summary.tsv", "stats/report.tsv", "stats/summary.tsv", "stats/violin.tsv"}) {
    CHECK_MESSAGE(fs::exists(dir / "a" / f), f);
  }
  CHECK(slurp(dir / "a" / "train" / "history.tsv").rfind("epoch\tloss_total\tloss_f\tloss_a\tphase\n", 0) == 0);

  fs::create_directories(dir / "b");
  const auto b = write_config(dir / "b", dir / "b");
  setenv("FLOWSYNTH_THREADS", "3", 1);
  const auto rb = invoke({"run", "--config", b.string()});
  unsetenv("FLOWSYNTH_THREADS");
  kernels::set_thread_count(0);
  REQUIRE(rb.code == 0);
  for (const auto* f : {"train/model.ckpt", "stats/report.tsv", "eval/metrics.tsv", "sample/vol/s0007_a_1.vol"}) {
    CHECK_MESSAGE(slurp(dir / "a" / f) == slurp(dir / "b" / f), f);
  }
}

TEST_CASE("stop before distillation, then distill, equals a full train") {
  const auto dir = fresh_dir("distill");
  const auto cfg = write_config(dir, dir);
  REQUIRE(invoke({"gen-data", "--config", cfg.string()}).code == 0);
  REQUIRE(invoke({"align", "--config", cfg.string()}).code == 0);
  REQUIRE(invoke({"train", "--config", cfg.string()}).code == 0);
  const auto full = slurp(dir / "train" / "model.ckpt");

  const auto partial = (dir / "partial" / "model.ckpt").string();
  REQUIRE(invoke({"train", "--config", cfg.string(), "--stop-before-distill", "--out", partial}).code == 0);
  CHECK(read_checkpoint(partial).scalar("state.epoch") == 4.0);
  CHECK(slurp(partial) != full);
  const auto resumed = (dir / "resumed" / "model.ckpt").string();
  REQUIRE(invoke({"distill", "--config", cfg.string(), "--ckpt", partial, "--out", resumed}).code == 0);
  CHECK(slurp(resumed) == full);
  CHECK(fs::exists(dir / "resumed" / "config.resolved"));
}

TEST_CASE("stages read only their declared inputs") {
  const auto dir = fresh_dir("fixtures");
  const auto ref_cfg = write_config(dir, dir / "ref");
  REQUIRE(invoke({"run", "--config", ref_cfg.string()}).code == 0);

  // Each stage runs in a directory holding only the outputs it declares as inputs.
  const std::vector<std::pair<std::string, std::vector<std::string>>> stages{
      {"align", {}}, {"train", {"data", "align"}}, {"sample", {"data", "train"}},
      {"eval", {"data", "sample"}}, {"stats", {"data", "sample"}}};
  const std::map<std::string, std::string> outputs{{"align", "align/adapters.ckpt"}, {"train", "train/model.ckpt"},
                                                   {"sample", "sample/cohort.tsv"}, {"eval", "eval/metrics.tsv"},
                                                   {"stats", "stats/report.tsv"}};
  for (const auto& [stage, inputs] : stages) {
    const auto root = dir / ("only_" + stage);
    fs::create_directories(root);
    for (const auto& in : inputs) fs::copy(dir / "ref" / in, root / in, fs::copy_options::recursive);
    const auto cfg = write_config(root, root);
    // `sample` on the command line is the single-volume sampler; call the stage directly.
    if (stage == "sample") {
      std::ostringstream log;
      CHECK_NOTHROW(pipeline::sample(config::load(cfg), log));
    } else {
      const auto r = invoke({stage, "--config", cfg.string()});
      CHECK_MESSAGE(r.code == 0, stage << ": " << r.err);
    }
    CHECK_MESSAGE(slurp(root / outputs.at(stage)) == slurp(dir / "ref" / outputs.at(stage)), stage);
  }
}

TEST_CASE("sample subcommand matches the pipeline samples") {
  const auto dir = fresh_dir("sample");
  const auto cfg = write_config(dir, dir);
  REQUIRE(invoke({"run", "--config", cfg.string()}).code == 0);
  const auto rows = pipeline::read_manifest(dir / "data" / "manifest.tsv");
  const auto& subject = rows.back();
  std::ostringstream sev;
  sev.precision(17);
  sev << subject.severity;
  const auto out = (dir / "one.vol").string();
  for (const auto& [steps, tag] : {std::pair{"1", "_1"}, std::pair{"4", "_4"}}) {
    const auto r = invoke({"sample", "--ckpt", (dir / "train" / "model.ckpt").string(), "--input",
                        subject.source.string(), "--context-id", "a:" + sev.str(), "--steps", steps, "--out", out});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(slurp(out) == slurp(dir / "sample" / "vol" / (subject.id + "_a" + tag + ".vol")));
  }
  CHECK(invoke({"sample", "--ckpt", (dir / "train" / "model.ckpt").string(), "--input", subject.source.string(),
             "--context-id", "x", "--out", out})
            .code == 1);
}

TEST_CASE("failures name the stage and exit nonzero") {
  const auto dir = fresh_dir("fail");
  const auto cfg = write_config(dir, dir, "ref_region = 99\n");
  const auto r = invoke({"run", "--config", cfg.string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("stage 'stats' failed") != std::string::npos);
  CHECK(r.err.find("EmptyRegion") != std::string::npos);
  // Earlier stages keep their outputs.
  CHECK(fs::exists(dir / "eval" / "metrics.tsv"));

  const auto bad_cfg = dir / "bad.cfg";
  std::ofstream(bad_cfg) << "out_dir = x\nbogus_key = 1\n";
  const auto b = invoke({"align", "--config", bad_cfg.string()});
  CHECK(b.code == 1);
  CHECK(b.err.find("unknown key 'bogus_key'") != std::string::npos);

  setenv("FLOWSYNTH_THREADS", "many", 1);
  CHECK(invoke({"version"}).code == 2);
  unsetenv("FLOWSYNTH_THREADS");
}
