#include "flowsynth/evalstat.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "flowsynth/error.hpp"
#include "flowsynth/kernels.hpp"
#include "parallel.hpp"

namespace flowsynth::eval {

namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();
constexpr double kTiny = 1e-300;
constexpr int kMaxIterations = 100000;

void require_same_dims(const Volume3D& a, const Volume3D& b) {
  if (!(a.dims() == b.dims())) {
    throw Error(Errc::dim_mismatch, "volume dims " + to_string(a.dims()) + " and " + to_string(b.dims()));
  }
}

// Continued fraction for I_x(a, b), modified Lentz.
double beta_cf(double a, double b, double x) {
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIterations; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) return h;
  }
  throw Error(Errc::non_finite, "incomplete beta continued fraction did not converge");
}

// I_x(a, b) with y = 1 - x supplied separately so callers can keep its precision.
double ibeta(double a, double b, double x, double y) {
  if (x <= 0.0) return 0.0;
  if (y <= 0.0) return 1.0;
  const double front =
      std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log(y));
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_cf(a, b, x) / a;
  return 1.0 - front * beta_cf(b, a, y) / b;
}

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Unbiased variance, two-pass.
double variance_of(std::span<const double> v, double mean) {
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return ss / static_cast<double>(v.size() - 1);
}

double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::fabs(x));
  return m;
}

// A spread this small is indistinguishable from rounding of the inputs.
bool negligible_spread(double variance, double scale) {
  return std::sqrt(std::max(variance, 0.0)) <= 16.0 * kEps * scale;
}

std::string fmt(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

double mse(const Volume3D& a, const Volume3D& b) {
  require_same_dims(a, b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a.voxels()[i]) - b.voxels()[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

double mae(const Volume3D& a, const Volume3D& b) {
  require_same_dims(a, b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::fabs(double(a.voxels()[i]) - b.voxels()[i]);
  return s / static_cast<double>(a.size());
}

double psnr_from_mse(double m, double max_val) {
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(max_val * max_val / m);
}

double psnr(const Volume3D& a, const Volume3D& b, double max_val) { return psnr_from_mse(mse(a, b), max_val); }

double ssim(const Volume3D& a, const Volume3D& b, const SsimOptions& opts) {
  require_same_dims(a, b);
  const Dims d = a.dims();
  const std::size_t w = opts.window;
  if (w == 0 || d.nx < w || d.ny < w || d.nz < w) {
    throw Error(Errc::too_small, "volume " + to_string(d) + " is smaller than the " + std::to_string(w) +
                                     "^3 SSIM window");
  }
  const auto ua = a.to_doubles();
  const auto ub = b.to_doubles();
  const double c1 = (opts.k1 * opts.range) * (opts.k1 * opts.range);
  const double c2 = (opts.k2 * opts.range) * (opts.k2 * opts.range);
  std::vector<double> local((d.nx - w + 1) * (d.ny - w + 1) * (d.nz - w + 1));
  kernels::omp::ssim_map(d.nx, d.ny, d.nz, w, ua, ub, c1, c2, local);
  double s = 0.0;
  for (double v : local) s += v;
  return std::clamp(s / static_cast<double>(local.size()), -1.0, 1.0);
}

MetricSet metrics(const Volume3D& a, const Volume3D& b) {
  MetricSet m;
  m.mse = mse(a, b);
  m.mae = mae(a, b);
  m.psnr = psnr_from_mse(m.mse);
  m.ssim = ssim(a, b);
  return m;
}

std::map<std::uint16_t, RegionSum> region_sums(const Volume3D& v, const LabelMap3D& labels) {
  if (!(v.dims() == labels.dims)) {
    throw Error(Errc::dim_mismatch, "volume " + to_string(v.dims()) + " vs label map " + to_string(labels.dims));
  }
  std::map<std::uint16_t, RegionSum> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto l = labels.labels[i];
    if (l == 0) continue;
    auto& r = out[l];
    r.sum += v.voxels()[i];
    ++r.count;
  }
  return out;
}

std::map<std::uint16_t, double> roi_uptake(const Volume3D& v, const LabelMap3D& labels,
                                           std::uint16_t ref_region) {
  const auto sums = region_sums(v, labels);
  const auto ref = sums.find(ref_region);
  if (ref_region == 0 || ref == sums.end()) {
    throw Error(Errc::empty_region, "reference region " + std::to_string(ref_region) + " has no voxels");
  }
  const double ref_mean = ref->second.sum / static_cast<double>(ref->second.count);
  if (ref_mean == 0.0) {
    throw Error(Errc::zero_reference, "reference region " + std::to_string(ref_region) + " has zero mean");
  }
  std::map<std::uint16_t, double> out;
  for (const auto& [label, r] : sums) out[label] = (r.sum / static_cast<double>(r.count)) / ref_mean;
  return out;
}

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0 && b > 0.0)) throw Error(Errc::bad_argument, "incomplete beta needs a, b > 0");
  if (!(x >= 0.0 && x <= 1.0)) throw Error(Errc::bad_argument, "incomplete beta needs x in [0, 1]");
  return ibeta(a, b, x, 1.0 - x);
}

double student_t_two_sided(double t, double df) {
  if (!(df > 0.0)) throw Error(Errc::bad_argument, "degrees of freedom must be positive");
  if (std::isinf(t)) return 0.0;
  const double t2 = t * t;
  return std::min(1.0, ibeta(0.5 * df, 0.5, df / (df + t2), t2 / (df + t2)));
}

TTest paired_ttest(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error(Errc::bad_argument, "paired samples differ in length");
  if (x.size() < 2) throw Error(Errc::bad_argument, "paired test needs n >= 2");
  std::vector<double> d(x.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = x[i] - y[i];
  const double n = static_cast<double>(d.size());
  const double m = mean_of(d);
  const double var = variance_of(d, m);
  if (var == 0.0 || negligible_spread(var, std::max(max_abs(x), max_abs(y)))) {
    throw Error(Errc::degenerate_variance, "paired differences have zero variance");
  }
  TTest r;
  r.t = m / std::sqrt(var / n);
  r.df = n - 1.0;
  r.p = student_t_two_sided(r.t, r.df);
  return r;
}

TTest welch_ttest(std::span<const double> x, std::span<const double> y) {
  if (x.size() < 2 || y.size() < 2) throw Error(Errc::bad_argument, "Welch test needs >= 2 values per group");
  const double nx = static_cast<double>(x.size()), ny = static_cast<double>(y.size());
  const double mx = mean_of(x), my = mean_of(y);
  const double vx = variance_of(x, mx), vy = variance_of(y, my);
  const bool flat_x = vx == 0.0 || negligible_spread(vx, max_abs(x));
  const bool flat_y = vy == 0.0 || negligible_spread(vy, max_abs(y));
  if (flat_x && flat_y) throw Error(Errc::degenerate_variance, "both groups have zero variance");
  const double sx = vx / nx, sy = vy / ny;
  const double se2 = sx + sy;
  TTest r;
  r.t = (mx - my) / std::sqrt(se2);
  r.df = se2 * se2 / (sx * sx / (nx - 1.0) + sy * sy / (ny - 1.0));
  r.p = student_t_two_sided(r.t, r.df);
  return r;
}

FdrResult bh_fdr(std::span<const double> p, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw Error(Errc::bad_argument, "alpha must lie in (0, 1)");
  for (double v : p) {
    if (!(v >= 0.0 && v <= 1.0)) throw Error(Errc::bad_p, "p-value " + fmt(v) + " outside [0, 1]");
  }
  const std::size_t m = p.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });

  FdrResult r;
  r.adjusted.assign(m, 1.0);
  r.reject.assign(m, false);
  double running = 1.0;
  for (std::size_t k = m; k-- > 0;) {
    const double scaled = static_cast<double>(m) / static_cast<double>(k + 1) * p[order[k]];
    running = std::min(running, scaled);
    r.adjusted[order[k]] = std::min(running, 1.0);
  }
  for (std::size_t i = 0; i < m; ++i) r.reject[i] = r.adjusted[i] <= alpha;
  return r;
}

GroupReport group_report(const CohortInput& cohort, const LabelMap3D& labels, std::uint16_t ref_region,
                         double alpha) {
  const std::size_t n = cohort.real.size();
  if (cohort.synth.size() != n || cohort.groups.size() != n) {
    throw Error(Errc::bad_argument, "real, synth and group lists differ in length");
  }
  if (n == 0) throw Error(Errc::bad_argument, "empty cohort");

  std::vector<std::string> group_names;
  for (const auto& g : std::set<std::string>(cohort.groups.begin(), cohort.groups.end())) group_names.push_back(g);
  if (group_names.size() > 2) throw Error(Errc::bad_argument, "group_report supports at most two groups");

  std::vector<std::map<std::uint16_t, double>> real(n), synth(n);
  detail::parallel_for(n, [&](std::size_t i) {
    real[i] = roi_uptake(cohort.real[i], labels, ref_region);
    synth[i] = roi_uptake(cohort.synth[i], labels, ref_region);
  });
  std::vector<std::uint16_t> regions;
  for (const auto& [label, _] : real.front()) {
    if (label != ref_region) regions.push_back(label);
  }
  auto values = [&](const std::vector<std::map<std::uint16_t, double>>& src, const std::string& group,
                    std::uint16_t region) {
    std::vector<double> out;
    for (std::size_t i = 0; i < n; ++i) {
      if (cohort.groups[i] != group) continue;
      const auto it = src[i].find(region);
      out.push_back(it == src[i].end() ? 0.0 : it->second);
    }
    return out;
  };
  auto region_name = [&](std::uint16_t r) {
    const auto it = labels.region_names.find(r);
    return it == labels.region_names.end() ? "label_" + std::to_string(r) : it->second;
  };

  GroupReport report;
  report.summary.regions = regions.size();

  // Runs one family: one test per region, then BH across the family.
  auto family = [&](const std::string& analysis, const std::string& group_label, auto&& make_row) {
    const std::size_t first = report.rows.size();
    for (const auto r : regions) {
      ReportRow row;
      row.analysis = analysis;
      row.group = group_label;
      row.region_id = r;
      row.region_name = region_name(r);
      make_row(r, row);
      report.rows.push_back(std::move(row));
    }
    std::vector<double> p;
    for (std::size_t i = first; i < report.rows.size(); ++i) p.push_back(report.rows[i].stat.p);
    const auto fdr = bh_fdr(p, alpha);
    std::size_t hits = 0;
    for (std::size_t i = first; i < report.rows.size(); ++i) {
      report.rows[i].p_adj = fdr.adjusted[i - first];
      report.rows[i].significant = fdr.reject[i - first];
      hits += fdr.reject[i - first];
    }
    return hits;
  };
  auto run_test = [](ReportRow& row, auto&& test, double df_if_degenerate) {
    try {
      row.stat = test();
    } catch (const Error& e) {
      if (e.code() != Errc::degenerate_variance) throw;
      row.stat = {0.0, df_if_degenerate, 1.0};
      row.note = "degenerate_variance";
    }
  };

  for (const auto& g : group_names) {
    report.summary.paired_significant += family("paired", g, [&](std::uint16_t r, ReportRow& row) {
      const auto x = values(real, g, r);
      const auto y = values(synth, g, r);
      row.n = x.size();
      row.mean_a = mean_of(x);
      row.mean_b = mean_of(y);
      row.test = "paired";
      run_test(row, [&] { return paired_ttest(x, y); }, static_cast<double>(x.size()) - 1.0);
    });
  }

  if (group_names.size() == 2) {
    const std::string label = group_names[0] + "-vs-" + group_names[1];
    auto welch_family = [&](const std::string& analysis, const std::vector<std::map<std::uint16_t, double>>& src) {
      return family(analysis, label, [&](std::uint16_t r, ReportRow& row) {
        const auto x = values(src, group_names[0], r);
        const auto y = values(src, group_names[1], r);
        row.n = x.size() + y.size();
        row.mean_a = mean_of(x);
        row.mean_b = mean_of(y);
        row.test = "welch";
        run_test(row, [&] { return welch_ttest(x, y); }, static_cast<double>(row.n) - 2.0);
      });
    };
    const std::size_t first_real = report.rows.size();
    report.summary.welch_real_significant = welch_family("welch_real", real);
    const std::size_t first_synth = report.rows.size();
    report.summary.welch_synth_significant = welch_family("welch_synth", synth);
    std::size_t agree = 0;
    for (std::size_t k = 0; k < regions.size(); ++k) {
      agree += report.rows[first_real + k].significant == report.rows[first_synth + k].significant;
    }
    report.summary.concordance =
        regions.empty() ? 1.0 : static_cast<double>(agree) / static_cast<double>(regions.size());
  }
  return report;
}

const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> cols{"analysis", "group", "region_id", "region_name", "n",
                                             "mean_a",   "mean_b", "test",     "t",           "df",
                                             "p",        "p_adj", "significant", "note"};
  return cols;
}

std::string report_tsv(const GroupReport& report) {
  std::ostringstream os;
  const auto& cols = report_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) os << (i ? "\t" : "") << cols[i];
  os << '\n';
  for (const auto& r : report.rows) {
    os << r.analysis << '\t' << r.group << '\t' << r.region_id << '\t' << r.region_name << '\t' << r.n << '\t'
       << fmt(r.mean_a) << '\t' << fmt(r.mean_b) << '\t' << r.test << '\t' << fmt(r.stat.t) << '\t'
       << fmt(r.stat.df) << '\t' << fmt(r.stat.p) << '\t' << fmt(r.p_adj) << '\t' << (r.significant ? 1 : 0)
       << '\t' << (r.note.empty() ? "-" : r.note) << '\n';
  }
  return os.str();
}

std::string summary_tsv(const ReportSummary& s) {
  std::ostringstream os;
  os << "key\tvalue\n"
     << "regions\t" << s.regions << '\n'
     << "paired_significant\t" << s.paired_significant << '\n'
     << "welch_real_significant\t" << s.welch_real_significant << '\n'
     << "welch_synth_significant\t" << s.welch_synth_significant << '\n'
     << "concordance\t" << fmt(s.concordance) << '\n';
  return os.str();
}

}  // namespace flowsynth::eval
