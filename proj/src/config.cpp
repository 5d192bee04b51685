#include "flowsynth/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "flowsynth/error.hpp"

namespace flowsynth::config {

namespace {

[[noreturn]] void bad(const std::string& msg) { throw Error(Errc::bad_config, msg); }

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

bool valid_key(std::string_view k) {
  if (k.empty()) return false;
  for (char c : k) {
    if (!((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_')) return false;
  }
  return true;
}

const KeySpec* find_key(std::string_view key) {
  for (const auto& k : schema()) {
    if (k.key == key) return &k;
  }
  return nullptr;
}

// Typed accessors over the resolved map; every error names the key.
class Reader {
 public:
  explicit Reader(const Values& v) : v_(v) {}

  const std::string& str(const std::string& key) const { return v_.at(key); }

  std::uint64_t u64(const std::string& key) const {
    const auto& s = str(key);
    std::uint64_t out = 0;
    const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc() || end != s.data() + s.size()) bad("key '" + key + "': expected a non-negative integer, got '" + s + "'");
    return out;
  }

  std::size_t count(const std::string& key, std::size_t lo) const {
    const auto v = u64(key);
    if (v < lo) bad("key '" + key + "': must be >= " + std::to_string(lo));
    return static_cast<std::size_t>(v);
  }

  double real(const std::string& key) const {
    const auto& s = str(key);
    double out = 0.0;
    const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc() || end != s.data() + s.size() || !std::isfinite(out)) {
      bad("key '" + key + "': expected a number, got '" + s + "'");
    }
    return out;
  }

  double real_in(const std::string& key, double lo, double hi) const {
    const double v = real(key);
    if (!(v >= lo && v <= hi)) bad("key '" + key + "': must lie in [" + str_of(lo) + ", " + str_of(hi) + "]");
    return v;
  }

 private:
  static std::string str_of(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
  }
  const Values& v_;
};

std::set<std::string> parse_list(const std::string& key, const std::string& text) {
  std::set<std::string> out;
  if (text == "none") return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto t = std::string(trim(item));
    if (t.empty()) bad("key '" + key + "': empty list item in '" + text + "'");
    out.insert(t);
  }
  return out;
}

}  // namespace

const std::vector<KeySpec>& schema() {
  static const std::vector<KeySpec> keys{
      {"out_dir", std::nullopt, "output root; stages write to named subdirectories"},
      {"seed", "0", "root seed, split per stage"},
      {"dims", "16x16x16", "phantom grid NXxNYxNZ (or N for a cube)"},
      {"n_samples", "32", "generated subjects, including the test split"},
      {"n_test", "8", "last n_test subjects are held out for sampling, eval and stats"},
      {"n_blobs", "6", "Gaussian blobs per phantom"},
      {"n_regions", "8", "label map regions"},
      {"severity_lo", "0", "lower bound of the uniform severity draw"},
      {"severity_hi", "1", "upper bound of the uniform severity draw"},
      {"mask", "full", "tracer availability in the training split: full or random"},
      {"levels", "3", "U-Net resolutions"},
      {"base_channels", "8", "channels at full resolution"},
      {"time_embed_dim", "16", "sinusoidal time features (even)"},
      {"embed_dim", "64", "context token dimension"},
      {"attn_levels", "mid,dec", "blocks with cross-attention (enc0.., mid, dec0.., enc, dec, or none)"},
      {"lambda_f", "1", "weight of the f tracer loss"},
      {"lambda_a", "1", "weight of the a tracer loss"},
      {"lr", "0.001", "Adam learning rate"},
      {"adam_beta1", "0.9", "Adam beta1"},
      {"adam_beta2", "0.999", "Adam beta2"},
      {"adam_eps", "1e-08", "Adam epsilon"},
      {"epochs", "300", "total epochs, distillation included"},
      {"distill_start_epoch", "250", "first distillation epoch"},
      {"teacher_steps", "50", "Euler steps of the distillation teacher"},
      {"batch_size", "4", "samples per optimizer step"},
      {"tau", "0.5", "adapter cross-modality similarity floor"},
      {"mu", "10", "adapter constraint penalty weight"},
      {"align_steps", "500", "adapter descent steps"},
      {"align_lr", "0.05", "adapter descent step size"},
      {"sample_steps", "50", "Euler steps of the multi-step samples"},
      {"alpha", "0.05", "FDR level"},
      {"ref_region", "1", "label id of the uptake reference region"},
      {"stats_tracer", "a", "tracer compared in the group report: f or a"},
  };
  return keys;
}

Values parse_text(std::string_view text) {
  Values out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(line_no);
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) bad(where + ": expected 'key = value'");
    const auto key = std::string(trim(line.substr(0, eq)));
    const auto value = std::string(trim(line.substr(eq + 1)));
    if (!valid_key(key)) bad(where + ": invalid key '" + key + "'");
    if (find_key(key) == nullptr) bad(where + ": unknown key '" + key + "'");
    if (value.empty()) bad(where + ": empty value for key '" + key + "'");
    if (!out.emplace(key, value).second) bad(where + ": duplicate key '" + key + "'");
  }
  return out;
}

Values parse_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io_failure, "cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_text(ss.str());
}

RunConfig resolve(const Values& given) {
  Values all;
  for (const auto& [k, v] : given) {
    if (find_key(k) == nullptr) bad("unknown key '" + k + "'");
  }
  for (const auto& spec : schema()) {
    if (const auto it = given.find(spec.key); it != given.end()) {
      all[spec.key] = it->second;
    } else if (spec.default_value) {
      all[spec.key] = *spec.default_value;
    } else {
      bad("missing required key '" + spec.key + "'");
    }
  }

  const Reader r(all);
  RunConfig c;
  c.resolved = all;
  c.out_dir = r.str("out_dir");
  c.seed = r.u64("seed");
  try {
    c.dims = parse_dims(r.str("dims"));
  } catch (const Error&) {
    bad("key 'dims': cannot parse '" + r.str("dims") + "'");
  }
  c.n_samples = r.count("n_samples", 1);
  c.n_test = r.count("n_test", 4);
  if (c.n_test >= c.n_samples) bad("key 'n_test': must be smaller than n_samples");
  c.n_blobs = r.count("n_blobs", 1);
  c.n_regions = r.count("n_regions", 2);
  c.severity_lo = r.real_in("severity_lo", 0.0, 1.0);
  c.severity_hi = r.real_in("severity_hi", 0.0, 1.0);
  if (c.severity_lo > c.severity_hi) bad("key 'severity_hi': must be >= severity_lo");
  c.mask = r.str("mask");
  if (c.mask != "full" && c.mask != "random") bad("key 'mask': expected 'full' or 'random'");

  c.net.levels = r.count("levels", 2);
  c.net.base_channels = r.count("base_channels", 1);
  c.net.time_embed_dim = r.count("time_embed_dim", 2);
  c.net.context_dim = r.count("embed_dim", 1);
  c.net.attn_levels = parse_list("attn_levels", r.str("attn_levels"));
  try {
    c.net.validate();
  } catch (const Error& e) {
    bad(std::string("network keys: ") + e.what());
  }

  c.flow.lambda_f = r.real("lambda_f");
  c.flow.lambda_a = r.real("lambda_a");
  c.flow.adam.lr = r.real("lr");
  c.flow.adam.beta1 = r.real_in("adam_beta1", 0.0, 1.0);
  c.flow.adam.beta2 = r.real_in("adam_beta2", 0.0, 1.0);
  c.flow.adam.eps = r.real("adam_eps");
  c.flow.epochs = r.count("epochs", 1);
  c.flow.distill_start_epoch = r.count("distill_start_epoch", 0);
  c.flow.teacher_steps = r.count("teacher_steps", 1);
  c.flow.batch_size = r.count("batch_size", 1);
  c.flow.validate();

  c.align.tau = r.real_in("tau", -1.0, 1.0);
  c.align.mu = r.real("mu");
  if (c.align.mu < 0.0) bad("key 'mu': must be >= 0");
  c.align.steps = r.count("align_steps", 0);
  c.align.lr = r.real("align_lr");

  c.sample_steps = r.count("sample_steps", 1);
  c.alpha = r.real("alpha");
  if (!(c.alpha > 0.0 && c.alpha < 1.0)) bad("key 'alpha': must lie in (0, 1)");
  const auto ref = r.count("ref_region", 1);
  if (ref > 0xFFFF) bad("key 'ref_region': must be <= 65535");
  c.ref_region = static_cast<std::uint16_t>(ref);
  try {
    c.stats_tracer = parse_modality(r.str("stats_tracer"));
  } catch (const Error&) {
    bad("key 'stats_tracer': expected 'f' or 'a'");
  }
  return c;
}

RunConfig load(const std::filesystem::path& path, const Values& overrides) {
  auto values = parse_file(path);
  for (const auto& [k, v] : overrides) values[k] = v;
  return resolve(values);
}

std::string to_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& spec : schema()) out += spec.key + " = " + cfg.resolved.at(spec.key) + "\n";
  return out;
}

void write_resolved(const std::filesystem::path& dir, const RunConfig& cfg) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "config.resolved", std::ios::binary);
  out << to_text(cfg);
  if (!out) throw Error(Errc::io_failure, "cannot write " + (dir / "config.resolved").string());
}

std::string schema_text() {
  std::string out;
  for (const auto& spec : schema()) {
    out += "# " + spec.help + (spec.default_value ? "" : " (required)") + "\n";
    out += spec.key + " = " + spec.default_value.value_or("out") + "\n";
  }
  return out;
}

}  // namespace flowsynth::config
