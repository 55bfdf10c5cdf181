#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace mimdit {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major array of doubles with an optional gradient slot.
///
/// Every extent is >= 1 and numel() == product(shape). The gradient slot is
/// absent until first requested and always has the same length as the data.
class Tensor {
 public:
  /// A single zero with shape [1].
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor identity(std::size_t n);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t extent(std::size_t axis) const;
  std::size_t numel() const noexcept { return data_.size(); }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double operator[](std::size_t i) const noexcept { return data_[i]; }
  double& operator[](std::size_t i) noexcept { return data_[i]; }

  // 2-D element access; requires rank 2.
  double at(std::size_t row, std::size_t col) const;
  double& at(std::size_t row, std::size_t col);

  /// Same data under a new shape with identical element count.
  Tensor reshaped(Shape shape) const;

  bool requires_grad() const noexcept { return requires_grad_; }
  void set_requires_grad(bool on) noexcept { requires_grad_ = on; }

  bool has_grad() const noexcept { return !grad_.empty(); }
  std::span<const double> grad() const noexcept { return grad_; }
  /// Allocates a zero gradient on first use.
  std::span<double> mutable_grad();
  void zero_grad();
  void clear_grad() noexcept { grad_.clear(); }

  bool operator==(const Tensor& other) const noexcept {
    return shape_ == other.shape_ && data_ == other.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
  std::vector<double> grad_;
  bool requires_grad_ = false;
};

// ---------------------------------------------------------------------------
// Eager kernels. The autograd layer wraps these; they are also usable
// directly on plain tensors.

Tensor matmul(const Tensor& a, const Tensor& b);
/// Rank-2 transpose.
Tensor transpose(const Tensor& a);

/// Elementwise binary ops. `b` broadcasts when its shape (ignoring leading
/// unit extents) is a trailing suffix of `a`'s shape, or when it has one element.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
bool broadcastable(const Shape& target, const Shape& operand);

Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

Tensor softmax(const Tensor& x, std::size_t axis);
/// Mean over one axis; the axis is removed (a rank-1 input yields shape [1]).
Tensor mean(const Tensor& x, std::size_t axis);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

inline constexpr double kLayerNormEpsilon = 1e-5;
/// Normalizes over the last axis, then applies gain and bias.
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias);

Tensor concat(std::span<const Tensor> parts, std::size_t axis);
std::vector<Tensor> split(const Tensor& x, std::span<const std::size_t> extents,
                          std::size_t axis);

/// Gathers rows (axis 0) in the given order; indices may repeat.
Tensor take_rows(const Tensor& x, std::span<const std::size_t> rows);

/// Depthwise 2-D convolution of a [C,H,W] image with one odd-sized [kh,kw]
/// kernel shared across channels. Borders replicate the edge pixel, output
/// keeps [C,H,W].
Tensor conv2d(const Tensor& image, const Tensor& kernel);

struct TopK {
  std::vector<std::size_t> indices;
  std::vector<double> values;
};

/// The k largest entries of a flat tensor in descending order. Equal values
/// are ordered by lowest index first.
TopK topk(const Tensor& x, std::size_t k);

double max_abs_difference(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& x) noexcept;

// ---------------------------------------------------------------------------
// Binary stream format: [rank u32][extents u32...][data f64...], little-endian.

void write_u32(std::ostream& out, std::uint32_t value);
std::uint32_t read_u32(std::istream& in);
void write_f64(std::ostream& out, double value);
double read_f64(std::istream& in);
void write_string(std::ostream& out, const std::string& text);
std::string read_string(std::istream& in);

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

}  // namespace mimdit
