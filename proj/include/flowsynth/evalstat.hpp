#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "flowsynth/volume.hpp"

// Image-quality metrics, regional uptake ratios, t-tests and BH-FDR.
namespace flowsynth::eval {

struct MetricSet {
  double ssim = 0.0;
  double psnr = 0.0;  // +inf when mse == 0
  double mse = 0.0;
  double mae = 0.0;
};

// All metrics throw DimMismatch when the grids differ.
double mse(const Volume3D& a, const Volume3D& b);
double mae(const Volume3D& a, const Volume3D& b);
double psnr(const Volume3D& a, const Volume3D& b, double max_val = 1.0);
double psnr_from_mse(double mse, double max_val = 1.0);

struct SsimOptions {
  std::size_t window = 7;
  double k1 = 0.01;
  double k2 = 0.03;
  double range = 1.0;
};

// Mean local SSIM over every fully contained window position, population
// (1/N) moments. Throws TooSmall when an axis is shorter than the window.
double ssim(const Volume3D& a, const Volume3D& b, const SsimOptions& opts = {});

MetricSet metrics(const Volume3D& a, const Volume3D& b);

// Per-label voxel sums and counts for every nonzero label present in the map.
struct RegionSum {
  double sum = 0.0;
  std::size_t count = 0;
};
std::map<std::uint16_t, RegionSum> region_sums(const Volume3D& v, const LabelMap3D& labels);

// mean(v over r) / mean(v over ref_region) for every nonzero label r present.
// Throws EmptyRegion when ref_region has no voxels, ZeroReference when its
// mean is zero.
std::map<std::uint16_t, double> roi_uptake(const Volume3D& v, const LabelMap3D& labels,
                                           std::uint16_t ref_region);

// Regularized incomplete beta I_x(a, b), continued fraction (modified Lentz).
double incomplete_beta(double a, double b, double x);
// Two-sided p = P(|T| >= |t|) for Student t with df degrees of freedom.
double student_t_two_sided(double t, double df);

struct TTest {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
};

// Paired test on x - y, df = n - 1. Throws DegenerateVariance when the
// differences are all equal (up to rounding of the subtraction).
TTest paired_ttest(std::span<const double> x, std::span<const double> y);
// Welch test with Welch-Satterthwaite df. Throws DegenerateVariance when both
// samples are constant.
TTest welch_ttest(std::span<const double> x, std::span<const double> y);

struct FdrResult {
  std::vector<double> adjusted;
  std::vector<bool> reject;
};

// Benjamini-Hochberg step-up. Throws BadP for p outside [0, 1], BadArgument
// for alpha outside (0, 1).
FdrResult bh_fdr(std::span<const double> p, double alpha);

struct ReportRow {
  std::string analysis;  // "paired", "welch_real" or "welch_synth"
  std::string group;     // group name, or "A-vs-B"
  std::uint16_t region_id = 0;
  std::string region_name;
  std::size_t n = 0;
  double mean_a = 0.0;  // paired: real, welch: first group
  double mean_b = 0.0;  // paired: synth, welch: second group
  std::string test;     // "paired" or "welch"
  TTest stat;
  double p_adj = 1.0;
  bool significant = false;
  std::string note;  // "degenerate_variance" when the test was undefined
};

struct ReportSummary {
  std::size_t regions = 0;
  std::size_t paired_significant = 0;
  std::size_t welch_real_significant = 0;
  std::size_t welch_synth_significant = 0;
  // Fraction of regions where the real and synth Welch analyses agree on
  // significance. 1 when there is only one group.
  double concordance = 1.0;
};

struct GroupReport {
  std::vector<ReportRow> rows;
  ReportSummary summary;
};

struct CohortInput {
  std::vector<Volume3D> real;
  std::vector<Volume3D> synth;  // matched to real by index
  std::vector<std::string> groups;  // one or two distinct names
};

// Uptake ratios to ref_region per subject, then paired real-vs-synth tests per
// group and region, and Welch tests between the two groups on real and on
// synth. BH-FDR is applied across regions within each (analysis, group)
// family. The reference region is not reported (its ratio is always 1).
GroupReport group_report(const CohortInput& cohort, const LabelMap3D& labels, std::uint16_t ref_region,
                         double alpha = 0.05);

// Stable column order of the report TSV.
const std::vector<std::string>& report_columns();
std::string report_tsv(const GroupReport& report);
std::string summary_tsv(const ReportSummary& summary);

}  // namespace flowsynth::eval
