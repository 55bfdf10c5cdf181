#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "mimdit/tensor.hpp"

namespace mimdit {

enum class DegradationKind { blur, noise, haze, lowlight, rain };

std::string_view degradation_name(DegradationKind kind);
DegradationKind parse_degradation(std::string_view name);
std::vector<DegradationKind> parse_degradation_list(std::string_view names);

/// One synthetic corruption. `severity` in [0,1] maps to the kind-specific
/// parameters through from_severity(); at severity 0 every kind is the identity.
struct DegradationSpec {
  DegradationKind kind = DegradationKind::blur;
  double severity = 0.0;
  double blur_sigma = 0.0;        // [0, 3]
  std::size_t blur_radius = 0;    // kernel is (2r+1)^2, r <= 4
  double noise_sigma = 0.0;       // [0, 0.5]
  double transmission = 1.0;      // [0, 1]
  double airlight = 1.0;          // [0, 1]
  double gamma = 1.0;             // [0.2, 5]
  double gain = 1.0;              // (0, 1]
  std::size_t streak_count = 0;   // <= 64
  double streak_angle = 0.0;      // radians from vertical, |angle| <= pi/2
  std::uint64_t seed = 0;

  /// Derives the kind parameters from severity; the free parameters (airlight,
  /// streak angle) are drawn from `seed`.
  static DegradationSpec from_severity(DegradationKind kind, double severity, std::uint64_t seed);

  void validate() const;
  std::string to_text() const;
  static DegradationSpec from_text(std::string_view text);
  bool operator==(const DegradationSpec&) const = default;
};

/// Procedural test image: smooth gradient, rectangles and a sinusoidal texture,
/// rescaled to span exactly [0,1]. Extents must be >= 4.
Tensor synthesize_clean(std::uint64_t seed, std::size_t height, std::size_t width,
                        std::size_t channels);

/// Normalized (2r+1) x (2r+1) Gaussian; r = 0 or sigma = 0 gives the delta kernel.
Tensor gaussian_kernel(double sigma, std::size_t radius);

/// Applies the corruption to a [C,H,W] image; the result is clamped to [0,1].
Tensor apply_degradation(const Tensor& clean, const DegradationSpec& spec);

struct PairedSample {
  Tensor clean;
  Tensor degraded;
  DegradationSpec spec;
};

struct Dataset {
  std::vector<PairedSample> samples;
};

struct DatasetOptions {
  std::size_t count = 64;
  std::vector<DegradationKind> kinds{DegradationKind::blur};
  double severity_min = 0.2;
  double severity_max = 1.0;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Sample i uses kind kinds[i % kinds.size()] and its own (seed, i) stream, so
/// any subset can be regenerated independently.
PairedSample generate_sample(const DatasetOptions& options, std::size_t index);
Dataset generate_dataset(const DatasetOptions& options);

inline constexpr std::uint32_t kDatasetVersion = 1;

void write_dataset(const std::string& path, const Dataset& dataset);
Dataset read_dataset(const std::string& path);
/// generate_dataset + write_dataset.
Dataset build_dataset(const DatasetOptions& options, const std::string& path);

/// Plain-text portable graymap (C = 1) or pixmap (C = 3), maxval 255.
void write_netpbm(const std::string& path, const Tensor& image);

}  // namespace mimdit
