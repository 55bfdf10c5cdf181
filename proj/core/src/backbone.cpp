#include "mimdit/backbone.hpp"

#include <algorithm>
#include <cmath>

#include "mimdit/errors.hpp"

namespace mimdit {

namespace {

constexpr std::uint64_t kInitStream = 0x696e6974;  // "init"

Tensor init_weight(std::size_t in, std::size_t out, Rng& rng) {
  return normal_tensor({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
}

Var modulate_dit_segment(Var h, Var scale_row, Var shift_row, std::size_t text_tokens,
                         std::size_t tokens) {
  auto parts = split(h, {text_tokens, tokens, tokens}, 0);
  Var dit = add(add(parts[1], mul(parts[1], scale_row)), shift_row);
  return concat({parts[0], dit, parts[2]}, 0);
}

}  // namespace

void ModelConfig::validate() const {
  mim.validate();
  if (patch == 0 || image_height % patch != 0 || image_width % patch != 0) {
    throw ConfigurationError("patch " + std::to_string(patch) + " must divide image " +
                             std::to_string(image_height) + "x" + std::to_string(image_width));
  }
  if (channels == 0) throw ConfigurationError("channels must be positive");
  if (text_tokens == 0) throw ConfigurationError("text_tokens must be positive");
  if (mlp_ratio == 0) throw ConfigurationError("mlp_ratio must be positive");
  if (mim.model_dim % 4 != 0) {
    throw ConfigurationError("model_dim must be divisible by 4 for the position table");
  }
  check_window(grid(), mim.window, swin_shift_for_use(1, mim.window));
}

Tensor image_to_latent(const Tensor& image, std::size_t patch) {
  if (image.rank() != 3 || patch == 0 || image.extent(1) % patch != 0 ||
      image.extent(2) % patch != 0) {
    throw DimensionError("image_to_latent: image " + shape_to_string(image.shape()) +
                         " not divisible into " + std::to_string(patch) + "-pixel patches");
  }
  const std::size_t c = image.extent(0), h = image.extent(1), w = image.extent(2);
  const std::size_t gh = h / patch, gw = w / patch, width = c * patch * patch;
  Tensor out({gh * gw, width});
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t py = 0; py < patch; ++py)
          for (std::size_t px = 0; px < patch; ++px) {
            const double v = image[(ch * h + gy * patch + py) * w + gx * patch + px];
            out.at(gy * gw + gx, (ch * patch + py) * patch + px) = 2.0 * v - 1.0;
          }
  return out;
}

Tensor latent_to_image(const Tensor& latent, std::size_t channels, std::size_t height,
                       std::size_t width, std::size_t patch) {
  const std::size_t gh = height / patch, gw = width / patch;
  if (latent.rank() != 2 || latent.extent(0) != gh * gw ||
      latent.extent(1) != channels * patch * patch) {
    throw DimensionError("latent_to_image: latent " + shape_to_string(latent.shape()) +
                         " does not match the image geometry");
  }
  Tensor out({channels, height, width});
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx)
      for (std::size_t ch = 0; ch < channels; ++ch)
        for (std::size_t py = 0; py < patch; ++py)
          for (std::size_t px = 0; px < patch; ++px) {
            const double v = latent.at(gy * gw + gx, (ch * patch + py) * patch + px);
            out[(ch * height + gy * patch + py) * width + gx * patch + px] =
                std::clamp(0.5 * (v + 1.0), 0.0, 1.0);
          }
  return out;
}

ZeroLinearParams ZeroLinearParams::init(std::size_t dim) {
  return {Tensor({dim, dim}), Tensor({dim})};
}

Var zero_linear(Var x, ZeroLinearParams& p) {
  Graph& g = *x.graph();
  if (x.shape().size() != 2 || x.shape()[1] != p.weight.extent(0)) {
    throw DimensionError("zero_linear: input " + shape_to_string(x.shape()) + " vs weight " +
                         shape_to_string(p.weight.shape()));
  }
  return linear(x, g.parameter(p.weight), g.parameter(p.bias));
}

Tensor sinusoidal_embedding(double t, std::size_t dim) {
  Tensor out({1, dim});
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq =
        std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    const double arg = 1000.0 * t * freq;
    out[i] = std::cos(arg);
    out[half + i] = std::sin(arg);
  }
  return out;
}

Tensor position_table(const Grid& grid, std::size_t dim) {
  if (dim % 4 != 0) throw DimensionError("position_table: width must be divisible by 4");
  const std::size_t bands = dim / 4;
  Tensor out({grid.size(), dim});
  for (std::size_t y = 0; y < grid.height; ++y) {
    for (std::size_t x = 0; x < grid.width; ++x) {
      const std::size_t row = y * grid.width + x;
      for (std::size_t i = 0; i < bands; ++i) {
        const double omega =
            1.0 / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(bands));
        out.at(row, i) = std::sin(static_cast<double>(y) * omega);
        out.at(row, bands + i) = std::cos(static_cast<double>(y) * omega);
        out.at(row, 2 * bands + i) = std::sin(static_cast<double>(x) * omega);
        out.at(row, 3 * bands + i) = std::cos(static_cast<double>(x) * omega);
      }
    }
  }
  return out;
}

Var time_embedding(Graph& g, double t, TimeEmbeddingParams& p) {
  Var s = g.constant(sinusoidal_embedding(t, p.w1.extent(0)));
  Var h = gelu(linear(s, g.parameter(p.w1), g.parameter(p.b1)));
  return linear(h, g.parameter(p.w2), g.parameter(p.b2));
}

DiTBlockParams DiTBlockParams::init(const ModelConfig& config, Rng& rng) {
  const std::size_t d = config.mim.model_dim;
  const std::size_t hidden = config.mlp_ratio * d;
  DiTBlockParams p;
  p.attention = ExpertParams::init(Mechanism::spatial, d, config.mim.heads, 1, rng);
  p.mlp_w1 = init_weight(d, hidden, rng);
  p.mlp_b1 = Tensor({hidden});
  p.mlp_w2 = init_weight(hidden, d, rng);
  p.mlp_b2 = Tensor({d});
  p.ln1_gain = Tensor({d}, 1.0);
  p.ln1_bias = Tensor({d});
  p.ln2_gain = Tensor({d}, 1.0);
  p.ln2_bias = Tensor({d});
  p.modulation_w = Tensor({d, 4 * d});
  p.modulation_b = Tensor({4 * d});
  p.zero_linear = ZeroLinearParams::init(d);
  return p;
}

void DiTBlockParams::for_each_parameter(const std::string& prefix, const ParameterVisitor& visit) {
  attention.for_each_parameter(prefix + "attn.", visit);
  visit(prefix + "mlp.w1", mlp_w1);
  visit(prefix + "mlp.b1", mlp_b1);
  visit(prefix + "mlp.w2", mlp_w2);
  visit(prefix + "mlp.b2", mlp_b2);
  visit(prefix + "ln1.gain", ln1_gain);
  visit(prefix + "ln1.bias", ln1_bias);
  visit(prefix + "ln2.gain", ln2_gain);
  visit(prefix + "ln2.bias", ln2_bias);
  visit(prefix + "modulation.w", modulation_w);
  visit(prefix + "modulation.b", modulation_b);
  visit(prefix + "zero_linear.weight", zero_linear.weight);
  visit(prefix + "zero_linear.bias", zero_linear.bias);
}

Var concat_segments(Var text, Var dit, Var cond) { return concat({text, dit, cond}, 0); }

LatentState split_segments(Var joint, std::size_t text_tokens, std::size_t tokens, double t) {
  if (joint.shape()[0] != text_tokens + 2 * tokens) {
    throw ContractError("joint sequence of " + std::to_string(joint.shape()[0]) +
                        " tokens does not match segment layout " + std::to_string(text_tokens) +
                        " + " + std::to_string(tokens) + " + " + std::to_string(tokens));
  }
  auto parts = split(joint, {text_tokens, tokens, tokens}, 0);
  return {parts[0], parts[1], parts[2], t};
}

LatentState mim_dit_block(const LatentState& state, std::size_t n, DiTBlockParams& params,
                          MiMModule* mim, const BlockContext& ctx) {
  Graph& g = *state.dit.graph();
  const std::size_t text_tokens = state.text.shape()[0];
  const std::size_t tokens = state.dit.shape()[0];
  const std::size_t d = state.dit.shape()[1];
  if (state.mim.shape()[0] != tokens || tokens != ctx.grid.size()) {
    throw ContractError("segment lengths drifted: dit " + std::to_string(tokens) + ", mim " +
                        std::to_string(state.mim.shape()[0]) + ", grid " +
                        std::to_string(ctx.grid.size()));
  }

  Var cond;
  if (ctx.mode == ConditioningMode::enabled) {
    if (mim == nullptr) throw ConfigurationError("conditioning enabled without a MiM module");
    Var source = n == 0 ? ctx.z_lq : state.mim;
    TokenSequence features = mim->forward({source, ctx.grid}, n, ctx.observer);
    cond = zero_linear(features.tokens, params.zero_linear);
  } else {
    cond = g.constant(Tensor({tokens, d}));
  }

  Var joint = concat_segments(state.text, state.dit, cond);
  Var mod = linear(ctx.time_embedding, g.parameter(params.modulation_w),
                   g.parameter(params.modulation_b));
  auto m = split(mod, {d, d, d, d}, 1);

  const Grid joint_grid{joint.shape()[0], 1};
  Var h = layernorm(joint, g.parameter(params.ln1_gain), g.parameter(params.ln1_bias));
  h = modulate_dit_segment(h, m[0], m[1], text_tokens, tokens);
  joint = add(joint, spatial_self_attention({h, joint_grid}, params.attention).tokens);

  h = layernorm(joint, g.parameter(params.ln2_gain), g.parameter(params.ln2_bias));
  h = modulate_dit_segment(h, m[2], m[3], text_tokens, tokens);
  Var hidden = gelu(linear(h, g.parameter(params.mlp_w1), g.parameter(params.mlp_b1)));
  joint = add(joint, linear(hidden, g.parameter(params.mlp_w2), g.parameter(params.mlp_b2)));

  return split_segments(joint, text_tokens, tokens, state.t);
}

MiMDiT MiMDiT::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t d = config.mim.model_dim;
  const std::size_t p = config.latent_dim();
  Rng rng = make_rng(seed, kInitStream);
  MiMDiT m;
  m.config_ = config;
  m.text_bank_ = normal_tensor({config.text_tokens, d}, 1.0, rng);
  m.embed_w_ = init_weight(p, d, rng);
  m.embed_b_ = Tensor({d});
  m.lq_embed_w_ = init_weight(p, d, rng);
  m.lq_embed_b_ = Tensor({d});
  m.time_.w1 = init_weight(d, d, rng);
  m.time_.b1 = Tensor({d});
  m.time_.w2 = init_weight(d, d, rng);
  m.time_.b2 = Tensor({d});
  for (std::size_t n = 0; n < config.mim.block_count; ++n) {
    m.blocks_.push_back(DiTBlockParams::init(config, rng));
  }
  for (std::size_t n = 0; n < config.mim.block_count; ++n) {
    m.mims_.push_back(MiMModule::init(config.mim, rng));
  }
  m.final_gain_ = Tensor({d}, 1.0);
  m.final_bias_ = Tensor({d});
  m.head_w_ = init_weight(d, p, rng);
  m.head_b_ = Tensor({p});
  m.positions_ = position_table(config.grid(), d);
  for (auto& [name, t] : m.parameters()) t->set_requires_grad(true);
  return m;
}

ParameterList MiMDiT::parameters() {
  ParameterList list;
  auto visit = [&list](const std::string& name, Tensor& t) { list.emplace_back(name, &t); };
  visit("text", text_bank_);
  visit("embed.w", embed_w_);
  visit("embed.b", embed_b_);
  visit("lq_embed.w", lq_embed_w_);
  visit("lq_embed.b", lq_embed_b_);
  visit("time.w1", time_.w1);
  visit("time.b1", time_.b1);
  visit("time.w2", time_.w2);
  visit("time.b2", time_.b2);
  for (std::size_t n = 0; n < blocks_.size(); ++n) {
    const std::string prefix = "block" + std::to_string(n) + ".";
    blocks_[n].for_each_parameter(prefix, visit);
    mims_[n].for_each_parameter(prefix + "mim.", visit);
  }
  visit("final.gain", final_gain_);
  visit("final.bias", final_bias_);
  visit("head.w", head_w_);
  visit("head.b", head_b_);
  return list;
}

std::size_t MiMDiT::parameter_count() { return mimdit::parameter_count(parameters()); }

Var MiMDiT::forward(Graph& g, const Tensor& z_lq, const Tensor& x_t, double t,
                    RoutingObserver* observer, ConditioningMode mode) {
  const Shape expected{config_.tokens(), config_.latent_dim()};
  if (z_lq.shape() != expected || x_t.shape() != expected) {
    throw DimensionError("backbone expects latents " + shape_to_string(expected) + ", got " +
                         shape_to_string(z_lq.shape()) + " and " + shape_to_string(x_t.shape()));
  }
  Var positions = g.constant(positions_);
  Var dit = add(linear(g.constant(x_t), g.parameter(embed_w_), g.parameter(embed_b_)), positions);
  Var lq = mode == ConditioningMode::enabled
               ? add(linear(g.constant(z_lq), g.parameter(lq_embed_w_), g.parameter(lq_embed_b_)),
                     positions)
               : g.constant(Tensor({config_.tokens(), config_.mim.model_dim}));

  LatentState state{g.parameter(text_bank_), dit, lq, t};
  if (!blocks_.empty()) {
    BlockContext ctx{time_embedding(g, t, time_), lq, config_.grid(), mode, observer};
    for (std::size_t n = 0; n < blocks_.size(); ++n) {
      state = mim_dit_block(state, n, blocks_[n],
                            mode == ConditioningMode::enabled ? &mims_[n] : nullptr, ctx);
    }
  }
  Var normed = layernorm(state.dit, g.parameter(final_gain_), g.parameter(final_bias_));
  return linear(normed, g.parameter(head_w_), g.parameter(head_b_));
}

Tensor MiMDiT::velocity(const Tensor& z_lq, const Tensor& x_t, double t, ConditioningMode mode) {
  Graph g(false);
  return forward(g, z_lq, x_t, t, nullptr, mode).value();
}

Var backbone_forward(Graph& g, MiMDiT& model, const Tensor& z_lq, const Tensor& x_t, double t,
                     RoutingObserver* observer) {
  return model.forward(g, z_lq, x_t, t, observer);
}

}  // namespace mimdit
