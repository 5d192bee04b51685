#include "flowsynth/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <memory>
#include <ostream>
#include <sstream>

#include "flowsynth/checkpoint.hpp"
#include "flowsynth/error.hpp"
#include "flowsynth/evalstat.hpp"
#include "flowsynth/rectflow.hpp"
#include "flowsynth/rng.hpp"
#include "flowsynth/synthdata.hpp"
#include "parallel.hpp"

namespace flowsynth::pipeline {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kLabelsStream = 7;

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_num(const std::string& s, const fs::path& file) {
  double v = 0.0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) {
    throw Error(Errc::bad_header, file.string() + ": bad number '" + s + "'");
  }
  return v;
}

void write_text(const fs::path& file, const std::string& text) {
  fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary);
  out << text;
  if (!out) throw Error(Errc::io_failure, "cannot write " + file.string());
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string item;
  while (std::getline(ss, item, '\t')) out.push_back(item);
  if (!line.empty() && line.back() == '\t') out.emplace_back();
  return out;
}

// Rows of a TSV file whose first line must equal `header`.
std::vector<std::vector<std::string>> read_tsv(const fs::path& file, const std::vector<std::string>& header) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error(Errc::io_failure, "cannot open " + file.string());
  std::string line;
  if (!std::getline(in, line) || split_tabs(line) != header) {
    throw Error(Errc::bad_header, file.string() + ": unexpected header");
  }
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split_tabs(line);
    if (cells.size() != header.size()) {
      throw Error(Errc::bad_header, file.string() + ": row has " + std::to_string(cells.size()) + " fields, expected " +
                                        std::to_string(header.size()));
    }
    rows.push_back(std::move(cells));
  }
  return rows;
}

std::string tsv_line(const std::vector<std::string>& cells) {
  std::string out;
  for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "\t" : "") + cells[i];
  return out + "\n";
}

std::string rel_path(const fs::path& p, const fs::path& base) { return p.lexically_relative(base).generic_string(); }

fs::path absolute_from(const std::string& cell, const fs::path& base) {
  const fs::path p(cell);
  return p.is_absolute() ? p : (base / p).lexically_normal();
}

const std::vector<std::string> kManifestHeader{"id", "split", "severity", "delta_f", "delta_a", "source", "target_f", "target_a"};
const std::vector<std::string> kCohortHeader{"id", "group", "real", "synth"};
const std::vector<std::string> kSamplesHeader{"id", "tracer", "steps", "path"};

synth::SamplePair load_pair(const ManifestRow& row) {
  synth::SamplePair p;
  p.severity = row.severity;
  p.delta_f = row.delta_f;
  p.delta_a = row.delta_a;
  p.source = read_volume(row.source);
  if (row.target_f) p.target_f = read_volume(*row.target_f);
  if (row.target_a) p.target_a = read_volume(*row.target_a);
  return p;
}

// Embedding provider plus adapters, rebuilt from a checkpoint.
struct Conditioning {
  std::unique_ptr<adapters::SyntheticEmbeddingProvider> provider;
  flow::ContextFactory factory;
};

Conditioning conditioning_from(const Checkpoint& ck) {
  const auto a = flow::get_adapters(ck);
  Conditioning c;
  c.provider = std::make_unique<adapters::SyntheticEmbeddingProvider>(a.provider_seed, a.dim);
  c.factory = {c.provider.get(), a.f, a.a};
  return c;
}

std::vector<ManifestRow> split_rows(const std::vector<ManifestRow>& rows, const std::string& split) {
  std::vector<ManifestRow> out;
  for (const auto& r : rows) {
    if (r.split == split) out.push_back(r);
  }
  return out;
}

std::vector<flow::ConditionedSample> conditioned_training_set(const config::RunConfig& cfg, const Conditioning& cond) {
  const auto rows = split_rows(read_manifest(StageDirs{cfg.out_dir}.data() / "manifest.tsv"), "train");
  if (rows.empty()) throw Error(Errc::empty_batch, "manifest has no training rows");
  std::vector<flow::ConditionedSample> data(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) data[i] = cond.factory.condition(load_pair(rows[i]));
  return data;
}

std::string history_tsv(const std::vector<flow::HistoryRow>& rows) {
  std::string out = "epoch\tloss_total\tloss_f\tloss_a\tphase\n";
  for (const auto& r : rows) {
    out += tsv_line({std::to_string(r.epoch), num(r.total), num(r.f), num(r.a), flow::to_string(r.phase)});
  }
  return out;
}

// Runs epochs up to `target`, logging about ten progress lines, then writes
// the checkpoint (net config, adapters, state) and its history next to it.
void train_and_save(const config::RunConfig& cfg, const net::VelocityNet& net, flow::Trainer& trainer,
                    flow::TrainState& state, std::size_t target, const flow::AlignedAdapters& adapters,
                    const fs::path& out, std::ostream& log) {
  const std::size_t every = std::max<std::size_t>(1, target / 10);
  while (state.epoch < target) {
    trainer.run_epoch(state);
    const auto& h = state.history.back();
    if (state.epoch % every == 0 || state.epoch == target) {
      log << "  epoch " << h.epoch << " " << flow::to_string(h.phase) << " loss " << num(h.total) << "\n";
    }
  }
  Checkpoint ck;
  flow::put_net_config(ck, net.config());
  flow::put_adapters(ck, adapters);
  flow::put_state(ck, state);
  fs::create_directories(out.parent_path());
  write_checkpoint(out, ck);
  write_text(out.parent_path() / "history.tsv", history_tsv(state.history));
  config::write_resolved(out.parent_path(), cfg);
}

fs::path sample_path(const StageDirs& d, const std::string& id, Modality m, std::size_t steps) {
  return d.sample() / "vol" / (id + "_" + to_string(m) + "_" + std::to_string(steps) + ".vol");
}

}  // namespace

void write_manifest(const fs::path& file, const std::vector<ManifestRow>& rows) {
  const fs::path base = file.parent_path();
  std::string out = tsv_line(kManifestHeader);
  auto opt = [&](const std::optional<fs::path>& p) { return p ? rel_path(*p, base) : std::string("-"); };
  for (const auto& r : rows) {
    out += tsv_line({r.id, r.split, num(r.severity), r.delta_f ? "1" : "0", r.delta_a ? "1" : "0",
                     rel_path(r.source, base), opt(r.target_f), opt(r.target_a)});
  }
  write_text(file, out);
}

std::vector<ManifestRow> read_manifest(const fs::path& file) {
  const fs::path base = file.parent_path();
  std::vector<ManifestRow> out;
  for (const auto& c : read_tsv(file, kManifestHeader)) {
    ManifestRow r;
    r.id = c[0];
    r.split = c[1];
    r.severity = parse_num(c[2], file);
    r.delta_f = c[3] == "1";
    r.delta_a = c[4] == "1";
    r.source = absolute_from(c[5], base);
    if (c[6] != "-") r.target_f = absolute_from(c[6], base);
    if (c[7] != "-") r.target_a = absolute_from(c[7], base);
    out.push_back(std::move(r));
  }
  return out;
}

void write_cohort(const fs::path& file, const std::vector<CohortRow>& rows) {
  const fs::path base = file.parent_path();
  std::string out = tsv_line(kCohortHeader);
  for (const auto& r : rows) out += tsv_line({r.id, r.group, rel_path(r.real, base), rel_path(r.synth, base)});
  write_text(file, out);
}

std::vector<CohortRow> read_cohort(const fs::path& file) {
  const fs::path base = file.parent_path();
  std::vector<CohortRow> out;
  for (const auto& c : read_tsv(file, kCohortHeader)) {
    out.push_back({c[0], c[1], absolute_from(c[2], base), absolute_from(c[3], base)});
  }
  return out;
}

void gen_data(const config::RunConfig& cfg, std::ostream& log) {
  const StageDirs d{cfg.out_dir};
  const std::size_t n_train = cfg.n_samples - cfg.n_test;
  const auto severity = synth::uniform_severity(derive_seed(cfg.seed, severity_stream), cfg.severity_lo, cfg.severity_hi);
  const auto train_mask =
      cfg.mask == "random" ? synth::random_mask(derive_seed(cfg.seed, mask_stream)) : synth::full_mask();
  // Held-out subjects always carry both targets: they are evaluation ground truth.
  const synth::MaskSampler mask = [&](std::size_t i) { return i < n_train ? train_mask(i) : std::pair{true, true}; };
  const auto pairs = synth::generate_dataset({cfg.n_samples, derive_seed(cfg.seed, data_stream), cfg.dims, cfg.n_blobs},
                                             severity, mask);

  fs::create_directories(d.data() / "vol");
  std::vector<ManifestRow> rows(pairs.size());
  detail::parallel_for(pairs.size(), [&](std::size_t i) {
    char id[16];
    std::snprintf(id, sizeof id, "s%04zu", i);
    auto& r = rows[i];
    r.id = id;
    r.split = i < n_train ? "train" : "test";
    r.severity = pairs[i].severity;
    r.delta_f = pairs[i].delta_f;
    r.delta_a = pairs[i].delta_a;
    r.source = d.data() / "vol" / (r.id + "_src.vol");
    write_volume(r.source, pairs[i].source);
    if (pairs[i].target_f) write_volume(*(r.target_f = d.data() / "vol" / (r.id + "_f.vol")), *pairs[i].target_f);
    if (pairs[i].target_a) write_volume(*(r.target_a = d.data() / "vol" / (r.id + "_a.vol")), *pairs[i].target_a);
  });
  write_manifest(d.data() / "manifest.tsv", rows);
  write_labelmap(d.data() / "labels.lbl",
                 synth::generate_labelmap({derive_seed(cfg.seed, kLabelsStream), cfg.dims, cfg.n_blobs}, cfg.n_regions));
  config::write_resolved(d.data(), cfg);
  log << "gen-data: " << pairs.size() << " subjects (" << n_train << " train, " << cfg.n_test << " test) in "
      << d.data().string() << "\n";
}

void align(const config::RunConfig& cfg, std::ostream& log) {
  const StageDirs d{cfg.out_dir};
  const std::uint64_t provider_seed = derive_seed(cfg.seed, provider_stream);
  const adapters::SyntheticEmbeddingProvider provider(provider_seed, cfg.net.context_dim);
  const auto res = adapters::align_adapters(provider.text(Modality::f), provider.text(Modality::a),
                                            provider.image_mean(Modality::f), provider.image_mean(Modality::a), cfg.align);
  Checkpoint ck;
  flow::put_adapters(ck, {provider_seed, cfg.net.context_dim, res.f, res.a});
  fs::create_directories(d.align());
  write_checkpoint(d.align() / "adapters.ckpt", ck);

  std::string hist = "step\tloss\n";
  for (std::size_t i = 0; i < res.history.size(); ++i) hist += std::to_string(i) + "\t" + num(res.history[i]) + "\n";
  write_text(d.align() / "history.tsv", hist);
  write_text(d.align() / "summary.tsv", "key\tvalue\nterm_f\t" + num(res.term_f) + "\nterm_a\t" + num(res.term_a) +
                                            "\ncross_sim\t" + num(res.cross_sim) + "\nconstraint_residual\t" +
                                            num(res.constraint_residual) + "\nconstraint_warning\t" +
                                            (res.constraint_warning ? "1" : "0") + "\n");
  config::write_resolved(d.align(), cfg);
  log << "align: term_f " << num(res.term_f) << " term_a " << num(res.term_a) << " cross_sim " << num(res.cross_sim)
      << "\n";
  if (res.constraint_warning) {
    log << "align: warning: constraint residual " << num(res.constraint_residual) << " exceeds 1e-3\n";
  }
}

void train(const config::RunConfig& cfg, bool stop_before_distill, const std::optional<fs::path>& out,
           std::ostream& log) {
  const StageDirs d{cfg.out_dir};
  const auto adapters_ck = read_checkpoint(d.align() / "adapters.ckpt");
  const auto aligned = flow::get_adapters(adapters_ck);
  if (aligned.dim != cfg.net.context_dim) {
    throw Error(Errc::dim_mismatch, "adapters have dim " + std::to_string(aligned.dim) + ", embed_dim is " +
                                        std::to_string(cfg.net.context_dim));
  }
  const auto cond = conditioning_from(adapters_ck);
  const net::VelocityNet net(cfg.net);
  auto fc = cfg.flow;
  fc.seed = derive_seed(cfg.seed, train_stream);
  flow::Trainer trainer(net, fc, conditioned_training_set(cfg, cond));
  auto state = trainer.init(derive_seed(cfg.seed, param_stream));
  const std::size_t target = stop_before_distill ? fc.distill_start_epoch : fc.epochs;
  log << "train: " << trainer.dataset().size() << " subjects, " << net.param_count() << " parameters, epochs 0.."
      << target << "\n";
  train_and_save(cfg, net, trainer, state, target, aligned, out.value_or(d.train() / "model.ckpt"), log);
}

void distill(const config::RunConfig& cfg, const fs::path& ckpt, const fs::path& out, std::ostream& log) {
  const auto ck = read_checkpoint(ckpt);
  const net::VelocityNet net(flow::get_net_config(ck));
  const auto cond = conditioning_from(ck);
  auto fc = cfg.flow;
  fc.seed = derive_seed(cfg.seed, train_stream);
  flow::Trainer trainer(net, fc, conditioned_training_set(cfg, cond));
  auto state = flow::get_state(ck);
  if (state.epoch > fc.epochs) {
    throw Error(Errc::bad_config, "checkpoint is at epoch " + std::to_string(state.epoch) + ", beyond epochs = " +
                                      std::to_string(fc.epochs));
  }
  log << "distill: resuming at epoch " << state.epoch << ", running to " << fc.epochs << "\n";
  train_and_save(cfg, net, trainer, state, fc.epochs, flow::get_adapters(ck), out, log);
}

void sample(const config::RunConfig& cfg, std::ostream& log) {
  const StageDirs d{cfg.out_dir};
  const auto ck = read_checkpoint(d.train() / "model.ckpt");
  const net::VelocityNet net(flow::get_net_config(ck));
  const auto params = flow::get_state(ck).params;
  const auto cond = conditioning_from(ck);
  auto rows = split_rows(read_manifest(d.data() / "manifest.tsv"), "test");
  if (rows.size() < 4) throw Error(Errc::bad_argument, "sampling needs at least 4 test subjects");

  const std::array<std::size_t, 2> steps{1, cfg.sample_steps};
  fs::create_directories(d.sample() / "vol");
  detail::parallel_for(rows.size(), [&](std::size_t i) {
    const auto x0 = read_volume(rows[i].source);
    for (const Modality m : {Modality::f, Modality::a}) {
      const auto ctx = cond.factory.make(m, rows[i].severity);
      for (const std::size_t n : steps) write_volume(sample_path(d, rows[i].id, m, n), flow::sample_euler(net, params, x0, ctx, n));
    }
  });

  std::string listing = tsv_line(kSamplesHeader);
  for (const auto& r : rows) {
    for (const Modality m : {Modality::f, Modality::a}) {
      for (const std::size_t n : steps) {
        listing += tsv_line({r.id, to_string(m), std::to_string(n), rel_path(sample_path(d, r.id, m, n), d.sample())});
      }
    }
  }
  write_text(d.sample() / "samples.tsv", listing);

  // Group A: the lower half by severity, group B: the upper half.
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.severity < b.severity; });
  std::vector<CohortRow> cohort;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const auto& real = cfg.stats_tracer == Modality::f ? r.target_f : r.target_a;
    if (!real) throw Error(Errc::bad_argument, "test subject " + r.id + " has no target for the stats tracer");
    cohort.push_back({r.id, i < rows.size() / 2 ? "A" : "B", *real, sample_path(d, r.id, cfg.stats_tracer, 1)});
  }
  write_cohort(d.sample() / "cohort.tsv", cohort);
  config::write_resolved(d.sample(), cfg);
  log << "sample: " << rows.size() << " subjects x 2 tracers x steps {1, " << cfg.sample_steps << "}\n";
}

void evaluate(const config::RunConfig& cfg, std::ostream& log) {
  const StageDirs d{cfg.out_dir};
  std::map<std::string, ManifestRow> subjects;
  for (auto& r : read_manifest(d.data() / "manifest.tsv")) subjects.emplace(r.id, std::move(r));
  const auto listing = read_tsv(d.sample() / "samples.tsv", kSamplesHeader);

  std::vector<eval::MetricSet> metrics(listing.size());
  detail::parallel_for(listing.size(), [&](std::size_t i) {
    const auto& row = listing[i];
    const auto it = subjects.find(row[0]);
    if (it == subjects.end()) throw Error(Errc::bad_argument, "sample of unknown subject " + row[0]);
    const auto& target = parse_modality(row[1]) == Modality::f ? it->second.target_f : it->second.target_a;
    if (!target) throw Error(Errc::bad_argument, "subject " + row[0] + " has no " + row[1] + " target");
    metrics[i] = eval::metrics(read_volume(absolute_from(row[3], d.sample())), read_volume(*target));
  });

  std::string out = "id\ttracer\tsteps\tssim\tpsnr\tmse\tmae\n";
  std::map<std::pair<std::string, std::size_t>, std::vector<eval::MetricSet>> groups;
  for (std::size_t i = 0; i < listing.size(); ++i) {
    const auto& m = metrics[i];
    out += tsv_line({listing[i][0], listing[i][1], listing[i][2], num(m.ssim), num(m.psnr), num(m.mse), num(m.mae)});
    groups[{listing[i][1], std::stoul(listing[i][2])}].push_back(m);
  }
  std::string summary = "tracer\tsteps\tn\tssim\tpsnr\tmse\tmae\n";
  for (const auto& [key, ms] : groups) {
    eval::MetricSet mean;
    for (const auto& m : ms) mean.ssim += m.ssim, mean.psnr += m.psnr, mean.mse += m.mse, mean.mae += m.mae;
    const double n = static_cast<double>(ms.size());
    summary += tsv_line({key.first, std::to_string(key.second), std::to_string(ms.size()), num(mean.ssim / n),
                         num(mean.psnr / n), num(mean.mse / n), num(mean.mae / n)});
    log << "eval: tracer " << key.first << " steps " << key.second << " mean psnr " << num(mean.psnr / n) << " ssim "
        << num(mean.ssim / n) << "\n";
  }
  write_text(d.eval() / "metrics.tsv", out);
  write_text(d.eval() / "summary.tsv", summary);
  config::write_resolved(d.eval(), cfg);
}

void stats(const config::RunConfig& cfg, const fs::path& cohort_manifest, const fs::path& labels_path,
           std::ostream& log) {
  const StageDirs d{cfg.out_dir};
  const auto rows = read_cohort(cohort_manifest);
  const auto labels = read_labelmap(labels_path);
  eval::CohortInput in;
  in.real.resize(rows.size());
  in.synth.resize(rows.size());
  detail::parallel_for(rows.size(), [&](std::size_t i) {
    in.real[i] = read_volume(rows[i].real);
    in.synth[i] = read_volume(rows[i].synth);
  });
  for (const auto& r : rows) in.groups.push_back(r.group);
  const auto report = eval::group_report(in, labels, cfg.ref_region, cfg.alpha);

  std::string violin = "region_id\tregion_name\tsubject\tgroup\tcohort\tvalue\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (const auto& [cohort, vol] : {std::pair{"real", &in.real[i]}, std::pair{"synth", &in.synth[i]}}) {
      for (const auto& [region, value] : eval::roi_uptake(*vol, labels, cfg.ref_region)) {
        const auto name = labels.region_names.count(region) ? labels.region_names.at(region) : "label_" + std::to_string(region);
        violin += tsv_line({std::to_string(region), name, rows[i].id, rows[i].group, cohort, num(value)});
      }
    }
  }
  write_text(d.stats() / "report.tsv", eval::report_tsv(report));
  write_text(d.stats() / "summary.tsv", eval::summary_tsv(report.summary));
  write_text(d.stats() / "violin.tsv", violin);
  config::write_resolved(d.stats(), cfg);
  log << "stats: " << report.summary.regions << " regions, paired significant " << report.summary.paired_significant
      << ", concordance " << num(report.summary.concordance) << "\n";
}

void run(const config::RunConfig& cfg, std::ostream& log) {
  const StageDirs d{cfg.out_dir};
  auto stage = [&](const std::string& name, auto&& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      throw StageError(name, e.what());
    }
  };
  stage("gen-data", [&] { gen_data(cfg, log); });
  stage("align", [&] { align(cfg, log); });
  stage("train", [&] { train(cfg, false, std::nullopt, log); });
  stage("sample", [&] { sample(cfg, log); });
  stage("eval", [&] { evaluate(cfg, log); });
  stage("stats", [&] { stats(cfg, d.sample() / "cohort.tsv", d.data() / "labels.lbl", log); });
}

Volume3D sample_volume(const fs::path& ckpt, const Volume3D& input, Modality m, double severity, std::size_t steps) {
  if (steps == 0) throw Error(Errc::bad_argument, "steps must be >= 1");
  const auto ck = read_checkpoint(ckpt);
  const net::VelocityNet net(flow::get_net_config(ck));
  const auto params = flow::get_state(ck).params;
  const auto cond = conditioning_from(ck);
  return flow::sample_euler(net, params, input, cond.factory.make(m, severity), steps);
}

}  // namespace flowsynth::pipeline
