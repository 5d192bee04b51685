#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowsynth/config.hpp"

// Pipeline stages. Each stage reads only the files of earlier stages named
// below, writes into <out_dir>/<stage>/ and leaves a config.resolved there.
//
//   data/   manifest.tsv, labels.lbl, vol/*.vol
//   align/  adapters.ckpt, history.tsv, summary.tsv
//   train/  model.ckpt, history.tsv                 (data/, align/)
//   sample/ samples.tsv, cohort.tsv, vol/*.vol      (data/, train/)
//   eval/   metrics.tsv, summary.tsv                (data/, sample/)
//   stats/  report.tsv, summary.tsv, violin.tsv     (sample/cohort.tsv, data/labels.lbl)
namespace flowsynth::pipeline {

struct StageDirs {
  std::filesystem::path root;

  std::filesystem::path data() const { return root / "data"; }
  std::filesystem::path align() const { return root / "align"; }
  std::filesystem::path train() const { return root / "train"; }
  std::filesystem::path sample() const { return root / "sample"; }
  std::filesystem::path eval() const { return root / "eval"; }
  std::filesystem::path stats() const { return root / "stats"; }
};

// Stage seeds: derive_seed(cfg.seed, stream).
enum Stream : std::uint64_t { data_stream = 1, severity_stream, mask_stream, provider_stream, train_stream, param_stream };

struct ManifestRow {
  std::string id;
  std::string split;  // "train" or "test"
  double severity = 0.0;
  bool delta_f = false;
  bool delta_a = false;
  std::filesystem::path source;
  std::optional<std::filesystem::path> target_f;
  std::optional<std::filesystem::path> target_a;
};

// Paths are stored relative to the manifest's directory and returned absolute.
void write_manifest(const std::filesystem::path& file, const std::vector<ManifestRow>& rows);
std::vector<ManifestRow> read_manifest(const std::filesystem::path& file);

struct CohortRow {
  std::string id;
  std::string group;
  std::filesystem::path real;
  std::filesystem::path synth;
};
void write_cohort(const std::filesystem::path& file, const std::vector<CohortRow>& rows);
std::vector<CohortRow> read_cohort(const std::filesystem::path& file);

void gen_data(const config::RunConfig& cfg, std::ostream& log);
void align(const config::RunConfig& cfg, std::ostream& log);
// Trains from scratch to `epochs`, or to distill_start_epoch when stopping
// before distillation. Writes `out` (default train/model.ckpt).
void train(const config::RunConfig& cfg, bool stop_before_distill, const std::optional<std::filesystem::path>& out,
           std::ostream& log);
// Resumes a checkpoint and runs the remaining epochs (distillation included).
void distill(const config::RunConfig& cfg, const std::filesystem::path& ckpt, const std::filesystem::path& out,
             std::ostream& log);
// One-step and sample_steps-step outputs for both tracers of every test subject.
void sample(const config::RunConfig& cfg, std::ostream& log);
void evaluate(const config::RunConfig& cfg, std::ostream& log);
void stats(const config::RunConfig& cfg, const std::filesystem::path& cohort_manifest,
           const std::filesystem::path& labels, std::ostream& log);
// All stages in order. Throws StageError on the first failure.
void run(const config::RunConfig& cfg, std::ostream& log);

struct StageError : std::runtime_error {
  StageError(const std::string& stage, const std::string& cause)
      : std::runtime_error("stage '" + stage + "' failed: " + cause), stage(stage) {}
  std::string stage;
};

// Standalone sampling from a self-contained model checkpoint.
Volume3D sample_volume(const std::filesystem::path& ckpt, const Volume3D& input, Modality m, double severity,
                       std::size_t steps);

}  // namespace flowsynth::pipeline
