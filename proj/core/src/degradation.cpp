#include "mimdit/degradation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "mimdit/errors.hpp"
#include "mimdit/random.hpp"
#include "mimdit/text.hpp"

namespace mimdit {

namespace {

constexpr std::uint64_t kSpecStream = 1;
constexpr std::uint64_t kNoiseStream = 2;
constexpr std::uint64_t kRainStream = 3;
constexpr std::uint64_t kCleanStream = 4;

constexpr char kDatasetMagic[4] = {'M', 'I', 'M', 'P'};

void require_range(const char* name, double value, double lo, double hi) {
  if (!(value >= lo && value <= hi)) {
    throw ParameterError(std::string(name) + " = " + format_double(value) + " outside [" +
                         format_double(lo) + ", " + format_double(hi) + "]");
  }
}

void require_image(const Tensor& image) {
  if (image.rank() != 3) {
    throw DimensionError("expected a [C,H,W] image, got " + shape_to_string(image.shape()));
  }
}

Tensor clamp01(Tensor t) {
  for (auto& v : t.data()) v = std::clamp(v, 0.0, 1.0);
  return t;
}

}  // namespace

std::string_view degradation_name(DegradationKind kind) {
  switch (kind) {
    case DegradationKind::blur: return "blur";
    case DegradationKind::noise: return "noise";
    case DegradationKind::haze: return "haze";
    case DegradationKind::lowlight: return "lowlight";
    case DegradationKind::rain: return "rain";
  }
  return "unknown";
}

DegradationKind parse_degradation(std::string_view name) {
  for (auto k : {DegradationKind::blur, DegradationKind::noise, DegradationKind::haze,
                 DegradationKind::lowlight, DegradationKind::rain}) {
    if (degradation_name(k) == name) return k;
  }
  throw ParameterError("unknown degradation kind '" + std::string(name) + "'");
}

std::vector<DegradationKind> parse_degradation_list(std::string_view names) {
  std::vector<DegradationKind> kinds;
  for (const auto& n : split_list(names, ',')) kinds.push_back(parse_degradation(n));
  return kinds;
}

DegradationSpec DegradationSpec::from_severity(DegradationKind kind, double severity,
                                               std::uint64_t seed) {
  require_range("severity", severity, 0.0, 1.0);
  DegradationSpec s;
  s.kind = kind;
  s.severity = severity;
  s.seed = seed;
  Rng rng = make_rng(seed, kSpecStream);
  switch (kind) {
    case DegradationKind::blur:
      s.blur_sigma = 1.5 * severity;
      s.blur_radius = std::min<std::size_t>(3, static_cast<std::size_t>(std::ceil(3.0 * s.blur_sigma)));
      break;
    case DegradationKind::noise:
      s.noise_sigma = 0.2 * severity;
      break;
    case DegradationKind::haze:
      s.transmission = 1.0 - 0.8 * severity;
      s.airlight = uniform(rng, 0.8, 1.0);
      break;
    case DegradationKind::lowlight:
      s.gamma = 1.0 + 1.5 * severity;
      s.gain = 1.0 - 0.7 * severity;
      break;
    case DegradationKind::rain:
      s.streak_count = static_cast<std::size_t>(std::lround(12.0 * severity));
      s.streak_angle = uniform(rng, -0.5, 0.5);
      break;
  }
  return s;
}

void DegradationSpec::validate() const {
  require_range("severity", severity, 0.0, 1.0);
  require_range("blur_sigma", blur_sigma, 0.0, 3.0);
  if (blur_radius > 4) throw ParameterError("blur_radius must be <= 4");
  require_range("noise_sigma", noise_sigma, 0.0, 0.5);
  require_range("transmission", transmission, 0.0, 1.0);
  require_range("airlight", airlight, 0.0, 1.0);
  require_range("gamma", gamma, 0.2, 5.0);
  if (!(gain > 0.0 && gain <= 1.0)) throw ParameterError("gain must lie in (0, 1]");
  if (streak_count > 64) throw ParameterError("streak_count must be <= 64");
  require_range("streak_angle", streak_angle, -std::numbers::pi / 2, std::numbers::pi / 2);
}

std::string DegradationSpec::to_text() const {
  std::ostringstream os;
  os << "kind=" << degradation_name(kind) << " severity=" << format_double(severity)
     << " blur_sigma=" << format_double(blur_sigma) << " blur_radius=" << blur_radius
     << " noise_sigma=" << format_double(noise_sigma)
     << " transmission=" << format_double(transmission)
     << " airlight=" << format_double(airlight) << " gamma=" << format_double(gamma)
     << " gain=" << format_double(gain) << " streak_count=" << streak_count
     << " streak_angle=" << format_double(streak_angle) << " seed=" << seed;
  return os.str();
}

DegradationSpec DegradationSpec::from_text(std::string_view text) {
  std::map<std::string, std::string> fields;
  for (const auto& token : split_list(text, ' ')) {
    const auto eq = token.find('=');
    if (eq == std::string::npos) throw ParameterError("bad degradation field '" + token + "'");
    fields[token.substr(0, eq)] = token.substr(eq + 1);
  }
  auto get = [&](const char* key) -> const std::string& {
    auto it = fields.find(key);
    if (it == fields.end()) throw ParameterError(std::string("degradation spec lacks ") + key);
    return it->second;
  };
  DegradationSpec s;
  s.kind = parse_degradation(get("kind"));
  s.severity = parse_double(get("severity"));
  s.blur_sigma = parse_double(get("blur_sigma"));
  s.blur_radius = parse_u64(get("blur_radius"));
  s.noise_sigma = parse_double(get("noise_sigma"));
  s.transmission = parse_double(get("transmission"));
  s.airlight = parse_double(get("airlight"));
  s.gamma = parse_double(get("gamma"));
  s.gain = parse_double(get("gain"));
  s.streak_count = parse_u64(get("streak_count"));
  s.streak_angle = parse_double(get("streak_angle"));
  s.seed = parse_u64(get("seed"));
  s.validate();
  return s;
}

Tensor synthesize_clean(std::uint64_t seed, std::size_t height, std::size_t width,
                        std::size_t channels) {
  if (height < 4 || width < 4 || channels < 1) {
    throw ParameterError("synthesize_clean needs extents >= 4, got " + std::to_string(height) +
                         "x" + std::to_string(width) + "x" + std::to_string(channels));
  }
  Rng rng = make_rng(seed, kCleanStream);
  const double h = static_cast<double>(height), w = static_cast<double>(width);
  Tensor img({channels, height, width});

  const double gx = uniform(rng, -1.0, 1.0), gy = uniform(rng, -1.0, 1.0);
  const double freq = uniform(rng, 0.5, 2.5), angle = uniform(rng, 0.0, std::numbers::pi);
  const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double amp = uniform(rng, 0.1, 0.4);
  struct Rect {
    double y0, x0, y1, x1, value;
  };
  std::vector<Rect> rects(1 + rng() % 3);
  for (auto& r : rects) {
    const double ry = uniform(rng, 0.0, h - 2.0), rx = uniform(rng, 0.0, w - 2.0);
    r = {ry, rx, ry + uniform(rng, 2.0, h / 2.0), rx + uniform(rng, 2.0, w / 2.0),
         uniform(rng, -1.0, 1.0)};
  }
  std::vector<double> tint(channels);
  for (auto& c : tint) c = uniform(rng, 0.8, 1.2);

  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        const double fy = static_cast<double>(y) / h, fx = static_cast<double>(x) / w;
        double v = gx * fx + gy * fy;
        const double u = fx * std::cos(angle) + fy * std::sin(angle);
        v += amp * std::sin(2.0 * std::numbers::pi * freq * u * 4.0 + phase);
        for (const auto& r : rects) {
          const double py = static_cast<double>(y), px = static_cast<double>(x);
          if (py >= r.y0 && py < r.y1 && px >= r.x0 && px < r.x1) v += r.value;
        }
        img[(c * height + y) * width + x] = v * tint[c];
      }
    }
  }
  const auto [lo, hi] = std::minmax_element(img.data().begin(), img.data().end());
  const double min = *lo, range = *hi - *lo;
  for (auto& v : img.data()) v = range > 0.0 ? (v - min) / range : 0.5;
  return img;
}

Tensor gaussian_kernel(double sigma, std::size_t radius) {
  const std::size_t size = 2 * radius + 1;
  Tensor k({size, size});
  if (sigma <= 0.0 || radius == 0) {
    k[(size * size) / 2] = 1.0;
    return k;
  }
  double total = 0.0;
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double dy = static_cast<double>(y) - static_cast<double>(radius);
      const double dx = static_cast<double>(x) - static_cast<double>(radius);
      const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      k.at(y, x) = v;
      total += v;
    }
  }
  for (auto& v : k.data()) v /= total;
  return k;
}

Tensor apply_degradation(const Tensor& clean, const DegradationSpec& spec) {
  require_image(clean);
  spec.validate();
  const std::size_t c = clean.extent(0), h = clean.extent(1), w = clean.extent(2);
  switch (spec.kind) {
    case DegradationKind::blur:
      return clamp01(conv2d(clean, gaussian_kernel(spec.blur_sigma, spec.blur_radius)));
    case DegradationKind::noise: {
      Tensor out = clean;
      if (spec.noise_sigma > 0.0) {
        Rng rng = make_rng(spec.seed, kNoiseStream);
        std::normal_distribution<double> dist(0.0, spec.noise_sigma);
        for (auto& v : out.data()) v += dist(rng);
      }
      return clamp01(std::move(out));
    }
    case DegradationKind::haze: {
      Tensor out(clean.shape());
      for (std::size_t i = 0; i < clean.numel(); ++i) {
        out[i] = clean[i] * spec.transmission + spec.airlight * (1.0 - spec.transmission);
      }
      return clamp01(std::move(out));
    }
    case DegradationKind::lowlight: {
      Tensor out(clean.shape());
      for (std::size_t i = 0; i < clean.numel(); ++i) {
        out[i] = spec.gain * std::pow(std::max(clean[i], 0.0), spec.gamma);
      }
      return clamp01(std::move(out));
    }
    case DegradationKind::rain: {
      Tensor out = clean;
      Rng rng = make_rng(spec.seed, kRainStream);
      const double dy = std::cos(spec.streak_angle), dx = std::sin(spec.streak_angle);
      for (std::size_t s = 0; s < spec.streak_count; ++s) {
        const double y0 = uniform(rng, 0.0, static_cast<double>(h));
        const double x0 = uniform(rng, 0.0, static_cast<double>(w));
        const int length = 4 + static_cast<int>(rng() % 5);
        const double brightness = uniform(rng, 0.3, 0.6);
        for (int step = 0; step < length; ++step) {
          const auto y = static_cast<long>(std::floor(y0 + dy * step));
          const auto x = static_cast<long>(std::floor(x0 + dx * step));
          if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(w)) continue;
          for (std::size_t ch = 0; ch < c; ++ch) {
            out[(ch * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(x)] +=
                brightness;
          }
        }
      }
      return clamp01(std::move(out));
    }
  }
  throw ParameterError("unknown degradation kind");
}

void DatasetOptions::validate() const {
  if (count < 1) throw ParameterError("dataset count must be >= 1");
  if (kinds.empty()) throw ParameterError("dataset needs at least one degradation kind");
  require_range("severity_min", severity_min, 0.0, 1.0);
  require_range("severity_max", severity_max, severity_min, 1.0);
}

PairedSample generate_sample(const DatasetOptions& options, std::size_t index) {
  Rng rng = make_rng(options.seed, index);
  const DegradationKind kind = options.kinds[index % options.kinds.size()];
  const double severity = options.severity_min == options.severity_max
                              ? options.severity_min
                              : uniform(rng, options.severity_min, options.severity_max);
  const std::uint64_t clean_seed = rng();
  const std::uint64_t spec_seed = rng();
  PairedSample s;
  s.clean = synthesize_clean(clean_seed, options.height, options.width, options.channels);
  s.spec = DegradationSpec::from_severity(kind, severity, spec_seed);
  s.degraded = apply_degradation(s.clean, s.spec);
  return s;
}

Dataset generate_dataset(const DatasetOptions& options) {
  options.validate();
  Dataset d;
  d.samples.reserve(options.count);
  for (std::size_t i = 0; i < options.count; ++i) d.samples.push_back(generate_sample(options, i));
  return d;
}

void write_dataset(const std::string& path, const Dataset& dataset) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw PersistenceError(path, "cannot open for writing");
  out.write(kDatasetMagic, 4);
  write_u32(out, kDatasetVersion);
  write_u32(out, static_cast<std::uint32_t>(dataset.samples.size()));
  for (const auto& s : dataset.samples) {
    write_string(out, s.spec.to_text());
    write_tensor(out, s.clean);
    write_tensor(out, s.degraded);
  }
  if (!out) throw PersistenceError(path, "write failed");
}

Dataset read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PersistenceError(path, "cannot open dataset");
  try {
    char magic[4];
    if (!in.read(magic, 4) || !std::equal(magic, magic + 4, kDatasetMagic)) {
      throw PersistenceError(path, "not a dataset file (bad magic)");
    }
    const auto version = read_u32(in);
    if (version != kDatasetVersion) {
      throw PersistenceError(path, "unsupported dataset version " + std::to_string(version));
    }
    const auto count = read_u32(in);
    Dataset d;
    d.samples.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
      PairedSample s;
      s.spec = DegradationSpec::from_text(read_string(in));
      s.clean = read_tensor(in);
      s.degraded = read_tensor(in);
      if (s.clean.shape() != s.degraded.shape()) {
        throw PersistenceError(path, "sample " + std::to_string(i) + " has mismatched shapes");
      }
      d.samples.push_back(std::move(s));
    }
    return d;
  } catch (const PersistenceError& e) {
    if (e.path() == path) throw;
    throw PersistenceError(path, e.what());
  }
}

Dataset build_dataset(const DatasetOptions& options, const std::string& path) {
  Dataset d = generate_dataset(options);
  write_dataset(path, d);
  return d;
}

void write_netpbm(const std::string& path, const Tensor& image) {
  require_image(image);
  const std::size_t c = image.extent(0), h = image.extent(1), w = image.extent(2);
  if (c != 1 && c != 3) throw DimensionError("netpbm export supports 1 or 3 channels");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw PersistenceError(path, "cannot open for writing");
  out << (c == 1 ? "P2" : "P3") << '\n' << w << ' ' << h << "\n255\n";
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double v = std::clamp(image[(ch * h + y) * w + x], 0.0, 1.0);
        out << std::lround(v * 255.0) << (x + 1 == w && ch + 1 == c ? "" : " ");
      }
    }
    out << '\n';
  }
  if (!out) throw PersistenceError(path, "write failed");
}

}  // namespace mimdit
