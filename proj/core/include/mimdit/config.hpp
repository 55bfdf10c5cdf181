#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "mimdit/degradation.hpp"
#include "mimdit/flow.hpp"

namespace mimdit {

/// Ablation rows. Each tag rewrites one axis of the base model config.
enum class Variant {
  full,
  no_intra,
  spatial_only,
  channel_only,
  swin_only,
  se_only,
  sparse_inter_sparse_intra,
  sparse_inter_dense_intra,
};

std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view name);
std::vector<Variant> parse_variant_list(std::string_view names);
const std::vector<Variant>& all_variants();

/// `base` with the variant's routing or mechanism change applied.
ModelConfig apply_variant(const ModelConfig& base, Variant variant);

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t steps = 2000;
  std::size_t batch_size = 1;
  std::size_t log_every = 100;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Range of the uniformly sampled training time.
  double t_min = 0.0;
  double t_max = 1.0;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct DataConfig {
  std::string path = "train.mimp";
  std::size_t count = 256;
  /// Samples generated with a separate seed stream for evaluation.
  std::size_t heldout_count = 32;
  std::vector<DegradationKind> kinds{DegradationKind::blur, DegradationKind::haze,
                                     DegradationKind::lowlight};
  double severity_min = 0.2;
  double severity_max = 1.0;

  void validate() const;
  bool operator==(const DataConfig&) const = default;
};

struct ExperimentConfig {
  ModelConfig model;
  SamplerConfig sampler;
  TrainConfig train;
  DataConfig data;
  std::uint64_t seed = 0;
  Variant variant = Variant::full;

  /// Model config after applying `variant`.
  ModelConfig effective_model() const;
  /// Dataset options for the training set (stream 0) or held-out set.
  DatasetOptions dataset_options(bool heldout) const;

  void validate() const;
  bool operator==(const ExperimentConfig&) const = default;
};

/// Flat "section.key" -> value view in a fixed order.
using ConfigFields = std::vector<std::pair<std::string, std::string>>;

ConfigFields model_fields(const ModelConfig& model);
ConfigFields experiment_fields(const ExperimentConfig& config);

/// Section-header INI text; keys outside the schema raise ConfigurationError.
std::string format_config(const ExperimentConfig& config);
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::string& path);
void save_config(const std::string& path, const ExperimentConfig& config);

std::string format_model_config(const ModelConfig& model);
ModelConfig parse_model_config(std::string_view text);

/// Names of fields whose values differ, in schema order.
std::vector<std::string> differing_fields(const ConfigFields& a, const ConfigFields& b);

}  // namespace mimdit
