#include "mimdit/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "mimdit/errors.hpp"

namespace mimdit {

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one extent");
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be >= 1, got " + shape_to_string(shape));
  }
}

// Splits a shape around `axis` into (outer, n, inner) strides.
struct AxisView {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_to_string(shape));
  }
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a rank-2 tensor, got " +
                         shape_to_string(t.shape()));
  }
}

template <typename F>
Tensor broadcast_binary(const Tensor& a, const Tensor& b, const char* op, F f) {
  if (!broadcastable(a.shape(), b.shape())) {
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_to_string(b.shape()) +
                         " onto " + shape_to_string(a.shape()));
  }
  Tensor out(a.shape());
  const auto n = a.numel();
  const auto m = b.numel();
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  if (m == n) {
    for (std::size_t i = 0; i < n; ++i) o[i] = f(x[i], y[i]);
  } else if (m == 1) {
    const double s = y[0];
    for (std::size_t i = 0; i < n; ++i) o[i] = f(x[i], s);
  } else {
    for (std::size_t i = 0; i < n; i += m) {
      for (std::size_t j = 0; j < m; ++j) o[i + j] = f(x[i + j], y[j]);
    }
  }
  return out;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor() : shape_{1}, data_(1, 0.0) {}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_to_string(shape_));
  }
}

Tensor Tensor::scalar(double value) { return Tensor({1}, std::vector<double>{value}); }

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

std::size_t Tensor::extent(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_to_string(shape_));
  }
  return shape_[axis];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  return data_[row * shape_[1] + col];
}

double& Tensor::at(std::size_t row, std::size_t col) { return data_[row * shape_[1] + col]; }

Tensor Tensor::reshaped(Shape shape) const {
  check_shape(shape);
  if (shape_numel(shape) != numel()) {
    throw DimensionError("cannot reshape " + shape_to_string(shape_) + " to " +
                         shape_to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

std::span<double> Tensor::mutable_grad() {
  if (grad_.empty()) grad_.assign(data_.size(), 0.0);
  return grad_;
}

void Tensor::zero_grad() {
  if (!grad_.empty()) std::fill(grad_.begin(), grad_.end(), 0.0);
}

bool broadcastable(const Shape& target, const Shape& operand) {
  if (shape_numel(operand) == 1) return true;
  std::size_t lead = 0;
  while (lead < operand.size() && operand[lead] == 1) ++lead;
  const std::size_t tail = operand.size() - lead;
  if (tail > target.size()) return false;
  return std::equal(operand.begin() + static_cast<std::ptrdiff_t>(lead), operand.end(),
                    target.end() - static_cast<std::ptrdiff_t>(tail));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()));
  }
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor out({m, n});
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  // Column blocks of 8 accumulate in registers; the sum over p keeps its order.
  constexpr std::size_t block = 8;
  const std::size_t n_blocked = n - n % block;
  for (std::size_t i = 0; i < m; ++i) {
    double* row = o.data() + i * n;
    const double* arow = x.data() + i * k;
    for (std::size_t j0 = 0; j0 < n_blocked; j0 += block) {
      double acc[block] = {};
      for (std::size_t p = 0; p < k; ++p) {
        const double s = arow[p];
        const double* brow = y.data() + p * n + j0;
        for (std::size_t j = 0; j < block; ++j) acc[j] += s * brow[j];
      }
      for (std::size_t j = 0; j < block; ++j) row[j0 + j] = acc[j];
    }
    for (std::size_t p = 0; p < k; ++p) {
      const double s = arow[p];
      const double* brow = y.data() + p * n;
      for (std::size_t j = n_blocked; j < n; ++j) row[j] += s * brow[j];
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t m = a.extent(0), n = a.extent(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return broadcast_binary(a, b, "add", [](double x, double y) { return x + y; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return broadcast_binary(a, b, "sub", [](double x, double y) { return x - y; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return broadcast_binary(a, b, "mul", [](double x, double y) { return x * y; });
}

Tensor scale(const Tensor& a, double factor) {
  Tensor out = a;
  out.clear_grad();
  out.set_requires_grad(false);
  for (auto& v : out.data()) v *= factor;
  return out;
}

Tensor gelu(const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.data();
  auto in = x.data();
  for (std::size_t i = 0; i < in.size(); ++i) {
    o[i] = 0.5 * in[i] * (1.0 + std::erf(in[i] * M_SQRT1_2));
  }
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.data();
  auto in = x.data();
  for (std::size_t i = 0; i < in.size(); ++i) {
    o[i] = in[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-in[i]))
                        : std::exp(in[i]) / (1.0 + std::exp(in[i]));
  }
  return out;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto v = axis_view(x.shape(), axis);
  Tensor out(x.shape());
  auto o = out.data();
  auto in = x.data();
  for (std::size_t a = 0; a < v.outer; ++a) {
    for (std::size_t c = 0; c < v.inner; ++c) {
      const std::size_t base = a * v.n * v.inner + c;
      double mx = in[base];
      for (std::size_t i = 1; i < v.n; ++i) mx = std::max(mx, in[base + i * v.inner]);
      double total = 0.0;
      for (std::size_t i = 0; i < v.n; ++i) {
        const double e = std::exp(in[base + i * v.inner] - mx);
        o[base + i * v.inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < v.n; ++i) o[base + i * v.inner] /= total;
    }
  }
  return out;
}

Tensor mean(const Tensor& x, std::size_t axis) {
  const auto v = axis_view(x.shape(), axis);
  Shape out_shape;
  for (std::size_t i = 0; i < x.rank(); ++i)
    if (i != axis) out_shape.push_back(x.shape()[i]);
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out(out_shape);
  auto o = out.data();
  auto in = x.data();
  const double inv = 1.0 / static_cast<double>(v.n);
  for (std::size_t a = 0; a < v.outer; ++a) {
    for (std::size_t c = 0; c < v.inner; ++c) {
      double total = 0.0;
      for (std::size_t i = 0; i < v.n; ++i) total += in[(a * v.n + i) * v.inner + c];
      o[a * v.inner + c] = total * inv;
    }
  }
  return out;
}

Tensor sum_all(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return Tensor::scalar(total);
}

Tensor mean_all(const Tensor& x) {
  return Tensor::scalar(sum_all(x)[0] / static_cast<double>(x.numel()));
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layernorm: last extent " + std::to_string(d) + " vs gain " +
                         shape_to_string(gain.shape()) + " and bias " +
                         shape_to_string(bias.shape()));
  }
  Tensor out(x.shape());
  const std::size_t rows = x.numel() / d;
  auto in = x.data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEpsilon);
    for (std::size_t j = 0; j < d; ++j) o[r * d + j] = (row[j] - mu) * inv * gain[j] + bias[j];
  }
  return out;
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts[0].shape();
  Shape out_shape = first;
  axis_view(first, axis);
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i)
      if (i != axis && s[i] != first[i]) ok = false;
    if (!ok) {
      throw DimensionError("concat: shape " + shape_to_string(s) + " incompatible with " +
                           shape_to_string(first) + " along axis " + std::to_string(axis));
    }
    out_shape[axis] += s[axis];
  }
  Tensor out(out_shape);
  const auto v = axis_view(out_shape, axis);
  auto o = out.data();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t chunk = p.shape()[axis] * v.inner;
    auto in = p.data();
    for (std::size_t a = 0; a < v.outer; ++a) {
      std::copy_n(in.data() + a * chunk, chunk, o.data() + a * v.n * v.inner + offset);
    }
    offset += chunk;
  }
  return out;
}

std::vector<Tensor> split(const Tensor& x, std::span<const std::size_t> extents,
                          std::size_t axis) {
  const auto v = axis_view(x.shape(), axis);
  const std::size_t total = std::accumulate(extents.begin(), extents.end(), std::size_t{0});
  if (total != v.n) {
    throw DimensionError("split: extents sum to " + std::to_string(total) + " but axis " +
                         std::to_string(axis) + " of " + shape_to_string(x.shape()) + " has " +
                         std::to_string(v.n));
  }
  std::vector<Tensor> parts;
  parts.reserve(extents.size());
  auto in = x.data();
  std::size_t offset = 0;
  for (auto e : extents) {
    Shape s = x.shape();
    s[axis] = e;
    Tensor part(s);
    auto o = part.data();
    const std::size_t chunk = e * v.inner;
    for (std::size_t a = 0; a < v.outer; ++a) {
      std::copy_n(in.data() + a * v.n * v.inner + offset, chunk, o.data() + a * chunk);
    }
    offset += chunk;
    parts.push_back(std::move(part));
  }
  return parts;
}

Tensor take_rows(const Tensor& x, std::span<const std::size_t> rows) {
  if (x.rank() < 1) throw DimensionError("take_rows: empty shape");
  const std::size_t n = x.extent(0);
  const std::size_t width = x.numel() / n;
  Shape s = x.shape();
  s[0] = rows.size();
  Tensor out(s);
  auto in = x.data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n) {
      throw DimensionError("take_rows: row " + std::to_string(rows[r]) + " out of range for " +
                           shape_to_string(x.shape()));
    }
    std::copy_n(in.data() + rows[r] * width, width, o.data() + r * width);
  }
  return out;
}

Tensor conv2d(const Tensor& image, const Tensor& kernel) {
  if (image.rank() != 3 || kernel.rank() != 2 || kernel.extent(0) % 2 == 0 ||
      kernel.extent(1) % 2 == 0) {
    throw DimensionError("conv2d: expected [C,H,W] image and odd [kh,kw] kernel, got " +
                         shape_to_string(image.shape()) + " and " +
                         shape_to_string(kernel.shape()));
  }
  const std::size_t c = image.extent(0), h = image.extent(1), w = image.extent(2);
  const auto kh = static_cast<std::ptrdiff_t>(kernel.extent(0));
  const auto kw = static_cast<std::ptrdiff_t>(kernel.extent(1));
  const std::ptrdiff_t ry = kh / 2, rx = kw / 2;
  const auto hi = static_cast<std::ptrdiff_t>(h), wi = static_cast<std::ptrdiff_t>(w);
  Tensor out(image.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::ptrdiff_t y = 0; y < hi; ++y) {
      for (std::ptrdiff_t x = 0; x < wi; ++x) {
        double acc = 0.0;
        for (std::ptrdiff_t dy = -ry; dy <= ry; ++dy) {
          const std::ptrdiff_t sy = std::clamp<std::ptrdiff_t>(y + dy, 0, hi - 1);
          for (std::ptrdiff_t dx = -rx; dx <= rx; ++dx) {
            const std::ptrdiff_t sx = std::clamp<std::ptrdiff_t>(x + dx, 0, wi - 1);
            acc += kernel[static_cast<std::size_t>((dy + ry) * kw + dx + rx)] *
                   image[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)];
          }
        }
        out[(ch * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(x)] = acc;
      }
    }
  }
  return out;
}

TopK topk(const Tensor& x, std::size_t k) {
  const std::size_t n = x.numel();
  if (k < 1 || k > n) {
    throw ParameterError("topk: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) +
                         "]");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  // stable_sort keeps lower indices first among equal values.
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return x[a] > x[b]; });
  TopK result;
  result.indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  for (auto i : result.indices) result.values.push_back(x[i]);
  return result;
}

double max_abs_difference(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_difference: " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

bool all_finite(const Tensor& x) noexcept {
  return std::all_of(x.data().begin(), x.data().end(), [](double v) { return std::isfinite(v); });
}

void write_u32(std::ostream& out, std::uint32_t value) {
  const char bytes[4] = {static_cast<char>(value & 0xffu), static_cast<char>((value >> 8) & 0xffu),
                         static_cast<char>((value >> 16) & 0xffu),
                         static_cast<char>((value >> 24) & 0xffu)};
  out.write(bytes, 4);
}

std::uint32_t read_u32(std::istream& in) {
  unsigned char bytes[4];
  if (!in.read(reinterpret_cast<char*>(bytes), 4)) {
    throw PersistenceError("<stream>", "unexpected end of stream reading u32");
  }
  return static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
         (static_cast<std::uint32_t>(bytes[2]) << 16) | (static_cast<std::uint32_t>(bytes[3]) << 24);
}

void write_f64(std::ostream& out, double value) {
  const auto bits = std::bit_cast<std::uint64_t>(value);
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xffu);
  out.write(bytes, 8);
}

double read_f64(std::istream& in) {
  unsigned char bytes[8];
  if (!in.read(reinterpret_cast<char*>(bytes), 8)) {
    throw PersistenceError("<stream>", "unexpected end of stream reading f64");
  }
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

void write_string(std::ostream& out, const std::string& text) {
  write_u32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

std::string read_string(std::istream& in) {
  const auto n = read_u32(in);
  std::string text(n, '\0');
  if (n && !in.read(text.data(), n)) {
    throw PersistenceError("<stream>", "unexpected end of stream reading string");
  }
  return text;
}

void write_tensor(std::ostream& out, const Tensor& t) {
  write_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) write_u32(out, static_cast<std::uint32_t>(e));
  for (double v : t.data()) write_f64(out, v);
}

Tensor read_tensor(std::istream& in) {
  const auto rank = read_u32(in);
  if (rank == 0 || rank > 8) throw PersistenceError("<stream>", "implausible tensor rank");
  Shape shape(rank);
  for (auto& e : shape) e = read_u32(in);
  const auto n = shape_numel(shape);
  std::vector<double> data(n);
  for (auto& v : data) v = read_f64(in);
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace mimdit
