#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "flowsynth/adapters.hpp"
#include "flowsynth/params.hpp"
#include "flowsynth/volume.hpp"

// Conditional velocity field V(x_t, c, t): a small 3D encoder-decoder with
// skip connections, per-level time conditioning, two-token cross-attention
// and one 1x1x1 output head per tracer.
namespace flowsynth::net {

struct NetConfig {
  std::size_t levels = 3;  // resolutions, full grid included; >= 2
  std::size_t base_channels = 8;  // channels double per level
  std::size_t context_dim = 64;
  std::size_t time_embed_dim = 16;  // even
  std::size_t heads = 1;  // only single-head attention is implemented
  // Blocks with cross-attention: "enc0".."enc{L-2}", "mid", "dec0".."dec{L-2}";
  // a bare "enc" or "dec" selects every level on that side.
  std::set<std::string> attn_levels{"mid", "dec"};

  bool has_attention(const std::string& block) const;
  std::size_t channels(std::size_t level) const { return base_channels << level; }
  // Throws BadArgument describing the first invalid field.
  void validate() const;
};

// sin(w_k t) for k < T/2, then cos(w_k t); w_k = pi * 2^k.
std::vector<double> time_features(double t, std::size_t dim);

// x [C, ...spatial], tokens [2, D], wq [C, C], wk [C, D], wv [C, D].
// softmax over the two tokens at every site, residual add; same shape as x.
diff::Tensor cross_attention(const diff::Tensor& x, const diff::Tensor& tokens, const diff::Tensor& wq,
                             const diff::Tensor& wk, const diff::Tensor& wv);

struct HeadOutputs {
  diff::Tensor v_f;  // undefined when not requested
  diff::Tensor v_a;
};

class VelocityNet {
 public:
  explicit VelocityNet(NetConfig config);

  const NetConfig& config() const { return config_; }

  // Closed form: conv ci*co*k^3 + co, layer norm 2c, time projection c*T,
  // attention c^2 + 2*c*D, transposed conv ci*co*8 + co, head c0 + 1, plus a
  // 2*D token position table when any level attends.
  std::size_t param_count() const;
  bool uses_attention() const;

  // He-normal convolutions, unit layer-norm gains, zero output heads.
  diff::ParamStore init_params(std::uint64_t seed) const;

  // x [1, nz, ny, nx]; each spatial extent divisible by 2^(levels-1).
  HeadOutputs forward(const diff::ParamStore& params, const diff::Tensor& x, const diff::Tensor& tokens, double t,
                      bool want_f = true, bool want_a = true) const;
  diff::Tensor forward_head(const diff::ParamStore& params, const diff::Tensor& x, const ConditionContext& ctx,
                            double t) const;

  std::pair<Volume3D, Volume3D> forward(const diff::ParamStore& params, const Volume3D& x_t,
                                        const ConditionContext& ctx, double t) const;

  void check_dims(const Dims& d) const;

 private:
  diff::Tensor block(const diff::ParamStore& ps, const std::string& name, const diff::Tensor& x,
                     const diff::Tensor& tokens, const diff::Tensor& tfeat, std::size_t stride) const;

  NetConfig config_;
};

diff::Tensor to_tensor(const Volume3D& v, bool requires_grad = false);
Volume3D to_volume(const diff::Tensor& t, Dims dims, ValueDomain domain = ValueDomain::raw);

}  // namespace flowsynth::net
