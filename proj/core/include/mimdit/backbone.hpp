#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mimdit/moe.hpp"

namespace mimdit {

/// Architecture record: the MiM hyperparameters plus the toy image geometry.
struct ModelConfig {
  MiMConfig mim;
  std::size_t image_height = 16;
  std::size_t image_width = 16;
  std::size_t channels = 1;
  std::size_t patch = 4;
  std::size_t text_tokens = 2;
  std::size_t mlp_ratio = 4;

  Grid grid() const { return {image_height / patch, image_width / patch}; }
  std::size_t tokens() const { return grid().size(); }
  /// Width of one latent token: channels * patch * patch.
  std::size_t latent_dim() const { return channels * patch * patch; }

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Image [C,H,W] in [0,1] to latent tokens [L, C*p*p] in [-1,1]: p x p patches
/// flattened channel-major, rows ordered over the patch grid.
Tensor image_to_latent(const Tensor& image, std::size_t patch);
/// Inverse of image_to_latent, clamped to [0,1].
Tensor latent_to_image(const Tensor& latent, std::size_t channels, std::size_t height,
                       std::size_t width, std::size_t patch);

/// Zero-initialized D x D affine map.
struct ZeroLinearParams {
  Tensor weight;  // [D, D]
  Tensor bias;    // [D]

  static ZeroLinearParams init(std::size_t dim);
};

Var zero_linear(Var x, ZeroLinearParams& p);

/// Sinusoidal embedding of t (scaled by 1000, max period 10000) of width `dim`.
Tensor sinusoidal_embedding(double t, std::size_t dim);
/// Fixed 2-D sine/cosine position table [grid.size(), dim]; dim divisible by 4.
Tensor position_table(const Grid& grid, std::size_t dim);

struct TimeEmbeddingParams {
  Tensor w1, b1, w2, b2;
};

Var time_embedding(Graph& g, double t, TimeEmbeddingParams& p);

struct DiTBlockParams {
  ExpertParams attention;  // joint self-attention over text + dit + cond tokens
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;
  /// time embedding -> [scale1, shift1, scale2, shift2], zero-initialized.
  Tensor modulation_w, modulation_b;
  ZeroLinearParams zero_linear;

  static DiTBlockParams init(const ModelConfig& config, Rng& rng);
  void for_each_parameter(const std::string& prefix, const ParameterVisitor& visit);
};

/// Token segments threaded through the blocks. Lengths stay fixed:
/// text_tokens, L, L.
struct LatentState {
  Var text;
  Var dit;
  Var mim;
  double t = 0.0;
};

enum class ConditioningMode {
  enabled,
  /// No MiM and no zero-linear; the conditioning segment is all zeros.
  disabled,
};

struct BlockContext {
  Var time_embedding;
  Var z_lq;
  Grid grid;
  ConditioningMode mode = ConditioningMode::enabled;
  RoutingObserver* observer = nullptr;
};

/// Concatenates the three segments along the token axis.
Var concat_segments(Var text, Var dit, Var cond);
/// Splits a concatenated sequence back by the fixed segment lengths.
LatentState split_segments(Var joint, std::size_t text_tokens, std::size_t tokens, double t);

/// One MiM-DiT block. The conditioning input is z_lq for n == 0 and the
/// previous block's conditioning segment otherwise; it passes through the MiM
/// module and the zero-linear before joining the joint attention.
LatentState mim_dit_block(const LatentState& state, std::size_t n, DiTBlockParams& params,
                          MiMModule* mim, const BlockContext& ctx);

class MiMDiT {
 public:
  static MiMDiT init(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }

  /// Parameters in a fixed order with hierarchical names.
  ParameterList parameters();
  std::size_t parameter_count();

  std::vector<DiTBlockParams>& blocks() noexcept { return blocks_; }
  std::vector<MiMModule>& mims() noexcept { return mims_; }

  /// Predicted velocity [L, latent_dim] for latent tokens x_t at time t,
  /// conditioned on the degraded latent z_lq.
  Var forward(Graph& g, const Tensor& z_lq, const Tensor& x_t, double t,
              RoutingObserver* observer = nullptr,
              ConditioningMode mode = ConditioningMode::enabled);

  /// Gradient-free forward.
  Tensor velocity(const Tensor& z_lq, const Tensor& x_t, double t,
                  ConditioningMode mode = ConditioningMode::enabled);

 private:
  ModelConfig config_;
  Tensor text_bank_;
  Tensor embed_w_, embed_b_;
  Tensor lq_embed_w_, lq_embed_b_;
  TimeEmbeddingParams time_;
  std::vector<DiTBlockParams> blocks_;
  std::vector<MiMModule> mims_;
  Tensor final_gain_, final_bias_;
  Tensor head_w_, head_b_;
  Tensor positions_;
};

/// Free-function form of MiMDiT::forward.
Var backbone_forward(Graph& g, MiMDiT& model, const Tensor& z_lq, const Tensor& x_t, double t,
                     RoutingObserver* observer = nullptr);

}  // namespace mimdit
