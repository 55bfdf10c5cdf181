#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "mimdit/backbone.hpp"
#include "mimdit/config.hpp"
#include "mimdit/degradation.hpp"
#include "mimdit/flow.hpp"

namespace mimdit {

/// PSNR reported when MSE < kMseFloor, i.e. 10 log10(1 / kMseFloor).
inline constexpr double kMseFloor = 1e-18;
inline constexpr double kPsnrCap = 180.0;

double mean_squared_error(const Tensor& a, const Tensor& b);
/// 10 log10(1 / mse) for [0,1] images, capped at kPsnrCap.
double psnr_from_mse(double mse);

struct LossPoint {
  std::size_t step = 0;
  /// Mean batch loss over the steps since the previous point.
  double loss = 0.0;
};

struct TrainResult {
  MiMDiT model;
  std::vector<LossPoint> curve;
  double initial_loss = 0.0;  // mean over the first log window
  double final_loss = 0.0;    // mean over the last log window
};

/// Adam minimization of the flow loss. Each step draws `batch_size` samples
/// uniformly from `data`, t ~ U[t_min, t_max] and z ~ N(0, 1) from the seed.
/// Throws NumericalError with the step index on a non-finite loss.
TrainResult train_model(const ExperimentConfig& config, const Dataset& data,
                        std::ostream* log = nullptr);

/// Initial sampler noise for image `index`; a pure function of (seed, index).
Tensor sampling_noise(std::uint64_t seed, std::size_t index, const ModelConfig& model);

/// Euler-samples a clean latent conditioned on `degraded` and decodes it.
Tensor restore_image(const VelocityField& field, const Tensor& degraded, const ModelConfig& model,
                     const SamplerConfig& sampler, const Tensor& noise);

struct KindMetrics {
  std::string label;
  std::size_t count = 0;
  double mse = 0.0;  // mean over samples
  double psnr = 0.0;
  double input_mse = 0.0;  // degraded vs clean
  double input_psnr = 0.0;
};

struct MetricsRecord {
  std::vector<KindMetrics> per_kind;  // first-seen label order
  KindMetrics overall;
  std::vector<LossPoint> loss_curve;
};

struct RestoreResult {
  std::vector<Tensor> restored;
  MetricsRecord metrics;
};

/// Restores every sample; metrics compare against the stored clean images.
RestoreResult restore_dataset(MiMDiT& model, const Dataset& data, const SamplerConfig& sampler,
                              std::uint64_t seed);

std::string format_metrics(const MetricsRecord& metrics);
std::string format_loss_curve(const std::vector<LossPoint>& curve);

struct RoutingReport {
  std::array<Mechanism, MiMConfig::group_count> mechanisms{};
  std::vector<std::string> labels;  // first-seen order
  std::vector<std::array<double, MiMConfig::group_count>> rows;
  std::vector<std::size_t> counts;
  bool all_blocks = false;
};

/// Mean dense gates per label from the first block (or averaged over all
/// blocks) at the first sampling step: t = 0, x_t = sampling_noise(seed, i).
/// Throws ContractError when a label is missing or empty.
RoutingReport route_report(MiMDiT& model, const std::vector<Tensor>& degraded,
                           const std::vector<std::string>& labels, std::uint64_t seed,
                           bool all_blocks, std::vector<RoutingTrace>* traces = nullptr);
RoutingReport route_report(MiMDiT& model, const Dataset& data, std::uint64_t seed,
                           bool all_blocks, std::vector<RoutingTrace>* traces = nullptr);

std::string format_routing_report(const RoutingReport& report);
/// Largest L1 distance between any two rows.
double max_pairwise_l1(const RoutingReport& report);

struct AblationRow {
  Variant variant = Variant::full;
  std::size_t parameters = 0;
  double final_loss = 0.0;
  double mse = 0.0;
  double psnr = 0.0;
};

/// Trains every variant from the same seed and data and evaluates each on the
/// same held-out set. `on_trained` sees each model before it is discarded.
std::vector<AblationRow> ablate(
    const ExperimentConfig& base, const std::vector<Variant>& variants, const Dataset& train,
    const Dataset& heldout, std::ostream* log = nullptr,
    const std::function<void(Variant, TrainResult&)>& on_trained = {});

std::string format_ablation_table(const std::vector<AblationRow>& rows);

void write_text(const std::string& path, const std::string& text);
/// [rank][extents][data] records back to back.
void write_tensor_list(const std::string& path, const std::vector<Tensor>& tensors);
std::vector<Tensor> read_tensor_list(const std::string& path);

}  // namespace mimdit
