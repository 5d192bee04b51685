#include "flowsynth/velocitynet.hpp"

#include <cmath>
#include <numbers>

#include "flowsynth/error.hpp"
#include "flowsynth/rng.hpp"

namespace flowsynth::net {

namespace {

using diff::Tensor;

std::string level_name(std::size_t level, std::size_t levels, bool decoder) {
  if (level + 1 == levels) return "mid";
  return (decoder ? "dec" : "enc") + std::to_string(level);
}

Tensor relu_ln(const diff::ParamStore& ps, const std::string& name, const Tensor& x) {
  return diff::relu(diff::layer_norm(x, ps.get(name + ".g"), ps.get(name + ".b")));
}

std::vector<double> normal_values(SplitMix64& rng, std::size_t n, double stddev) {
  std::vector<double> v(n);
  for (double& x : v) x = stddev * rng.normal();
  return v;
}

}  // namespace

bool NetConfig::has_attention(const std::string& block) const {
  return attn_levels.count(block) || (block != "mid" && attn_levels.count(block.substr(0, 3)));
}

void NetConfig::validate() const {
  auto bad = [](const std::string& msg) { throw Error(Errc::bad_argument, "net config: " + msg); };
  if (levels < 2 || levels > 6) bad("levels must lie in [2, 6]");
  if (base_channels == 0) bad("base_channels must be >= 1");
  if (context_dim < 2) bad("context_dim must be >= 2");
  if (time_embed_dim == 0 || time_embed_dim % 2 != 0) bad("time_embed_dim must be even and >= 2");
  if (heads != 1) bad("only heads = 1 is supported");
  for (const auto& name : attn_levels) {
    bool known = name == "mid" || name == "enc" || name == "dec";
    for (std::size_t l = 0; l + 1 < levels; ++l) {
      known = known || name == "enc" + std::to_string(l) || name == "dec" + std::to_string(l);
    }
    if (!known) bad("unknown attention level '" + name + "'");
  }
}

std::vector<double> time_features(double t, std::size_t dim) {
  if (!(t >= 0.0 && t <= 1.0)) throw Error(Errc::out_of_range_t, "t must lie in [0, 1], got " + std::to_string(t));
  const std::size_t half = dim / 2;
  std::vector<double> out(dim);
  for (std::size_t k = 0; k < half; ++k) {
    const double w = std::numbers::pi * std::ldexp(1.0, static_cast<int>(k));
    out[k] = std::sin(w * t);
    out[half + k] = std::cos(w * t);
  }
  return out;
}

Tensor cross_attention(const Tensor& x, const Tensor& tokens, const Tensor& wq, const Tensor& wk,
                       const Tensor& wv) {
  const std::size_t c = x.dim(0);
  if (tokens.rank() != 2 || tokens.dim(0) != 2) {
    throw Error(Errc::dim_mismatch, "context must be [2, D], got " + diff::shape_string(tokens.shape()));
  }
  if (wk.dim(1) != tokens.dim(1)) {
    throw Error(Errc::dim_mismatch, "context dim " + std::to_string(tokens.dim(1)) + " but attention expects " +
                                        std::to_string(wk.dim(1)));
  }
  const auto flat = diff::reshape(x, {c, x.size() / c});
  const auto q = diff::matmul(wq, flat);
  const auto k = diff::matmul(wk, tokens, false, true);  // [C, 2]
  const auto v = diff::matmul(wv, tokens, false, true);  // [C, 2]
  const auto scores = diff::scale(diff::matmul(k, q, true, false), 1.0 / std::sqrt(static_cast<double>(c)));
  const auto attn = diff::softmax(scores, 0);  // [2, S]
  return diff::add(x, diff::reshape(diff::matmul(v, attn), x.shape()));
}

VelocityNet::VelocityNet(NetConfig config) : config_(std::move(config)) { config_.validate(); }

std::size_t VelocityNet::param_count() const {
  const std::size_t L = config_.levels, T = config_.time_embed_dim, D = config_.context_dim;
  auto conv = [](std::size_t ci, std::size_t co, std::size_t k) { return ci * co * k * k * k + co; };
  auto attn = [&](const std::string& name, std::size_t c) {
    return config_.has_attention(name) ? c * c + 2 * c * D : 0;
  };
  std::size_t n = 0;
  for (std::size_t l = 0; l < L; ++l) {
    const std::size_t c = config_.channels(l), cin = l == 0 ? 1 : config_.channels(l - 1);
    n += conv(cin, c, 3) + c * T + 2 * c + conv(c, c, 3) + 2 * c + attn(level_name(l, L, false), c);
  }
  for (std::size_t l = 0; l + 1 < L; ++l) {
    const std::size_t c = config_.channels(l);
    n += conv(config_.channels(l + 1), c, 2) + conv(2 * c, c, 3) + c * T + 2 * c + conv(c, c, 3) + 2 * c +
         attn(level_name(l, L, true), c);
  }
  return n + 2 * (config_.channels(0) + 1) + (uses_attention() ? 2 * D : 0);
}

bool VelocityNet::uses_attention() const {
  for (std::size_t l = 0; l < config_.levels; ++l) {
    if (config_.has_attention(level_name(l, config_.levels, false)) ||
        config_.has_attention(level_name(l, config_.levels, true))) {
      return true;
    }
  }
  return false;
}

diff::ParamStore VelocityNet::init_params(std::uint64_t seed) const {
  SplitMix64 rng(seed);
  diff::ParamStore ps;
  const std::size_t L = config_.levels, T = config_.time_embed_dim, D = config_.context_dim;
  auto conv = [&](const std::string& name, std::size_t ci, std::size_t co, std::size_t k, std::size_t fan_in) {
    const std::size_t n = ci * co * k * k * k;
    ps.add(name + ".w", {co, ci, k, k, k}, normal_values(rng, n, std::sqrt(2.0 / fan_in)));
    ps.add_zeros(name + ".b", {co});
  };
  auto ln = [&](const std::string& name, std::size_t c) {
    ps.add(name + ".g", {c}, std::vector<double>(c, 1.0));
    ps.add_zeros(name + ".b", {c});
  };
  auto level = [&](const std::string& name, std::size_t cin, std::size_t c) {
    conv(name + ".conv1", cin, c, 3, cin * 27);
    ps.add(name + ".time.w", {c, T}, normal_values(rng, c * T, std::sqrt(1.0 / T)));
    ln(name + ".ln1", c);
    conv(name + ".conv2", c, c, 3, c * 27);
    ln(name + ".ln2", c);
    if (config_.has_attention(name)) {
      ps.add(name + ".attn.q", {c, c}, normal_values(rng, c * c, std::sqrt(1.0 / c)));
      ps.add(name + ".attn.k", {c, D}, normal_values(rng, c * D, std::sqrt(1.0 / D)));
      ps.add(name + ".attn.v", {c, D}, normal_values(rng, c * D, std::sqrt(1.0 / D)));
    }
  };
  for (std::size_t l = 0; l < L; ++l) {
    level(level_name(l, L, false), l == 0 ? 1 : config_.channels(l - 1), config_.channels(l));
  }
  for (std::size_t l = L - 1; l-- > 0;) {
    const std::size_t c = config_.channels(l), cu = config_.channels(l + 1);
    const std::string name = level_name(l, L, true);
    // transposed conv weight is [Ci, Co, k, k, k]; every output sees one tap per input channel
    ps.add(name + ".up.w", {cu, c, 2, 2, 2}, normal_values(rng, cu * c * 8, std::sqrt(2.0 / cu)));
    ps.add_zeros(name + ".up.b", {c});
    level(name, 2 * c, c);
  }
  if (uses_attention()) ps.add("context.pos", {2, D}, normal_values(rng, 2 * D, std::sqrt(1.0 / D)));
  for (const char* head : {"head_f", "head_a"}) {
    ps.add_zeros(std::string(head) + ".w", {1, config_.channels(0), 1, 1, 1});
    ps.add_zeros(std::string(head) + ".b", {1});
  }
  return ps;
}

Tensor VelocityNet::block(const diff::ParamStore& ps, const std::string& name, const Tensor& x,
                          const Tensor& tokens, const Tensor& tfeat, std::size_t stride) const {
  const auto& tw = ps.get(name + ".time.w");
  const auto temb = diff::reshape(diff::matmul(tw, tfeat), {tw.dim(0)});
  auto h = diff::conv3d(x, ps.get(name + ".conv1.w"), diff::add(ps.get(name + ".conv1.b"), temb), stride, 1);
  h = relu_ln(ps, name + ".ln1", h);
  h = diff::conv3d(h, ps.get(name + ".conv2.w"), ps.get(name + ".conv2.b"), 1, 1);
  h = relu_ln(ps, name + ".ln2", h);
  if (config_.has_attention(name)) {
    h = cross_attention(h, tokens, ps.get(name + ".attn.q"), ps.get(name + ".attn.k"), ps.get(name + ".attn.v"));
  }
  return h;
}

void VelocityNet::check_dims(const Dims& d) const {
  const std::uint32_t m = 1u << (config_.levels - 1);
  if (!d.positive() || d.nx % m || d.ny % m || d.nz % m) {
    throw Error(Errc::dim_mismatch,
                "volume dims " + to_string(d) + " must be divisible by " + std::to_string(m) + " on every axis");
  }
}

HeadOutputs VelocityNet::forward(const diff::ParamStore& params, const Tensor& x, const Tensor& tokens, double t,
                                 bool want_f, bool want_a) const {
  if (x.rank() != 4 || x.dim(0) != 1) {
    throw Error(Errc::dim_mismatch, "input must be [1, nz, ny, nx], got " + diff::shape_string(x.shape()));
  }
  check_dims({static_cast<std::uint32_t>(x.dim(3)), static_cast<std::uint32_t>(x.dim(2)),
              static_cast<std::uint32_t>(x.dim(1))});
  if (tokens.rank() != 2 || tokens.dim(0) != 2 || tokens.dim(1) != config_.context_dim) {
    throw Error(Errc::dim_mismatch, "context must be [2, " + std::to_string(config_.context_dim) + "], got " +
                                        diff::shape_string(tokens.shape()));
  }
  const std::size_t L = config_.levels, T = config_.time_embed_dim;
  const auto tfeat = Tensor::from({T, 1}, time_features(t, T));
  // tokens are positional: without this the two-token softmax is order-blind
  const Tensor ctx = uses_attention() ? diff::add(tokens, params.get("context.pos")) : tokens;

  std::vector<Tensor> skips;
  Tensor h = x;
  for (std::size_t l = 0; l < L; ++l) {
    h = block(params, level_name(l, L, false), h, ctx, tfeat, l == 0 ? 1 : 2);
    skips.push_back(h);
  }
  for (std::size_t l = L - 1; l-- > 0;) {
    const std::string name = level_name(l, L, true);
    const auto up = diff::conv3d_transpose(h, params.get(name + ".up.w"), params.get(name + ".up.b"), 2, 0);
    h = block(params, name, diff::concat({up, skips[l]}, 0), ctx, tfeat, 1);
  }
  HeadOutputs out;
  if (want_f) out.v_f = diff::conv3d(h, params.get("head_f.w"), params.get("head_f.b"), 1, 0);
  if (want_a) out.v_a = diff::conv3d(h, params.get("head_a.w"), params.get("head_a.b"), 1, 0);
  return out;
}

Tensor VelocityNet::forward_head(const diff::ParamStore& params, const Tensor& x, const ConditionContext& ctx,
                                 double t) const {
  const bool f = ctx.modality == Modality::f;
  auto out = forward(params, x, ctx.tokens, t, f, !f);
  return f ? out.v_f : out.v_a;
}

std::pair<Volume3D, Volume3D> VelocityNet::forward(const diff::ParamStore& params, const Volume3D& x_t,
                                                   const ConditionContext& ctx, double t) const {
  diff::NoGradScope no_grad;
  const auto out = forward(params, to_tensor(x_t), ctx.tokens, t);
  return {to_volume(out.v_f, x_t.dims()), to_volume(out.v_a, x_t.dims())};
}

Tensor to_tensor(const Volume3D& v, bool requires_grad) {
  const auto& d = v.dims();
  return Tensor::from({1, d.nz, d.ny, d.nx}, v.to_doubles(), requires_grad);
}

Volume3D to_volume(const Tensor& t, Dims dims, ValueDomain domain) {
  if (t.size() != dims.count()) {
    throw Error(Errc::dim_mismatch, "tensor " + diff::shape_string(t.shape()) + " does not fit " + to_string(dims));
  }
  return Volume3D::from_doubles(dims, t.data(), domain);
}

}  // namespace flowsynth::net
