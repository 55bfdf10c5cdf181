#include "mimdit/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "mimdit/errors.hpp"
#include "mimdit/optim.hpp"
#include "mimdit/random.hpp"

namespace mimdit {

namespace {

constexpr std::uint64_t kTrainStream = 0x747261696eULL;
constexpr std::uint64_t kSamplingSalt = 0x73616d706c65ULL;

std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

struct LatentPair {
  Tensor clean;
  Tensor degraded;
};

std::vector<LatentPair> to_latents(const Dataset& data, const ModelConfig& model) {
  std::vector<LatentPair> out;
  out.reserve(data.samples.size());
  const Shape expected{model.channels, model.image_height, model.image_width};
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const auto& s = data.samples[i];
    if (s.clean.shape() != expected || s.degraded.shape() != expected) {
      throw ContractError("sample " + std::to_string(i) + " has shape " +
                          shape_to_string(s.clean.shape()) + ", model expects " +
                          shape_to_string(expected));
    }
    out.push_back({image_to_latent(s.clean, model.patch), image_to_latent(s.degraded, model.patch)});
  }
  return out;
}

KindMetrics finish(KindMetrics m) {
  if (m.count > 0) {
    m.mse /= static_cast<double>(m.count);
    m.input_mse /= static_cast<double>(m.count);
  }
  m.psnr = psnr_from_mse(m.mse);
  m.input_psnr = psnr_from_mse(m.input_mse);
  return m;
}

}  // namespace

double mean_squared_error(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mse of " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a[i] - b[i];
    total += d * d;
  }
  return total / static_cast<double>(a.numel());
}

double psnr_from_mse(double mse) {
  if (mse < kMseFloor) return kPsnrCap;
  return 10.0 * std::log10(1.0 / mse);
}

TrainResult train_model(const ExperimentConfig& config, const Dataset& data, std::ostream* log) {
  config.validate();
  const ModelConfig model_config = config.effective_model();
  if (data.samples.empty()) throw ContractError("training dataset is empty");
  const auto latents = to_latents(data, model_config);

  TrainResult result{MiMDiT::init(model_config, config.seed), {}, 0.0, 0.0};
  MiMDiT& model = result.model;
  const ParameterList params = model.parameters();
  Adam adam(params, {config.train.learning_rate, config.train.beta1, config.train.beta2,
                     config.train.epsilon});
  Rng rng = make_rng(config.seed, kTrainStream);
  std::uniform_int_distribution<std::size_t> pick(0, latents.size() - 1);
  const Shape latent_shape{model_config.tokens(), model_config.latent_dim()};
  const double balance = model_config.mim.balance_coefficient;
  const double batch = static_cast<double>(config.train.batch_size);

  double window_sum = 0.0;
  std::size_t window_count = 0;
  for (std::size_t step = 0; step < config.train.steps; ++step) {
    zero_gradients(params);
    Graph g;
    std::vector<std::vector<Var>> probabilities;
    RoutingObserver observer;
    observer.router_probabilities = &probabilities;
    Var loss;
    for (std::size_t b = 0; b < config.train.batch_size; ++b) {
      const auto& sample = latents[pick(rng)];
      const double t = uniform(rng, config.train.t_min, config.train.t_max);
      const Tensor z = normal_tensor(latent_shape, 1.0, rng);
      Var l = scale(flow_loss(g, model, sample.clean, sample.degraded, z, t,
                              balance > 0.0 ? &observer : nullptr),
                    1.0 / batch);
      loss = b == 0 ? l : add(loss, l);
    }
    const double flow_value = loss.value()[0];
    if (balance > 0.0) {
      if (auto penalty = balance_penalty(probabilities)) loss = add(loss, scale(*penalty, balance));
    }
    if (!std::isfinite(loss.value()[0])) throw NumericalError(step, "non-finite training loss");
    g.backward(loss);
    adam.step();

    window_sum += flow_value;
    ++window_count;
    const bool last = step + 1 == config.train.steps;
    if ((step + 1) % config.train.log_every == 0 || last) {
      const LossPoint point{step + 1, window_sum / static_cast<double>(window_count)};
      if (result.curve.empty()) result.initial_loss = point.loss;
      result.curve.push_back(point);
      if (log) *log << "step " << point.step << " loss " << fixed(point.loss) << '\n';
      window_sum = 0.0;
      window_count = 0;
    }
  }
  if (!result.curve.empty()) result.final_loss = result.curve.back().loss;
  return result;
}

Tensor sampling_noise(std::uint64_t seed, std::size_t index, const ModelConfig& model) {
  Rng rng = make_rng(seed ^ kSamplingSalt, index);
  return normal_tensor({model.tokens(), model.latent_dim()}, 1.0, rng);
}

Tensor restore_image(const VelocityField& field, const Tensor& degraded, const ModelConfig& model,
                     const SamplerConfig& sampler, const Tensor& noise) {
  const Tensor z_lq = image_to_latent(degraded, model.patch);
  const Tensor latent = euler_sample(field, z_lq, noise, sampler);
  return latent_to_image(latent, model.channels, model.image_height, model.image_width,
                         model.patch);
}

RestoreResult restore_dataset(MiMDiT& model, const Dataset& data, const SamplerConfig& sampler,
                              std::uint64_t seed) {
  const ModelConfig& config = model.config();
  to_latents(data, config);  // shape contract
  const VelocityField field = model_velocity(model);
  RestoreResult result;
  std::vector<KindMetrics> kinds;
  std::map<std::string, std::size_t> slot;
  result.metrics.overall.label = "all";
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const auto& s = data.samples[i];
    Tensor restored =
        restore_image(field, s.degraded, config, sampler, sampling_noise(seed, i, config));
    const std::string label(degradation_name(s.spec.kind));
    auto [it, inserted] = slot.emplace(label, kinds.size());
    if (inserted) kinds.push_back(KindMetrics{label});
    const double mse = mean_squared_error(restored, s.clean);
    const double input_mse = mean_squared_error(s.degraded, s.clean);
    for (KindMetrics* m : {&kinds[it->second], &result.metrics.overall}) {
      ++m->count;
      m->mse += mse;
      m->input_mse += input_mse;
    }
    result.restored.push_back(std::move(restored));
  }
  for (auto& k : kinds) result.metrics.per_kind.push_back(finish(k));
  result.metrics.overall = finish(result.metrics.overall);
  return result;
}

std::string format_metrics(const MetricsRecord& metrics) {
  std::ostringstream os;
  os << "label count mse psnr input_mse input_psnr\n";
  auto row = [&](const KindMetrics& m) {
    os << m.label << ' ' << m.count << ' ' << fixed(m.mse, 8) << ' ' << fixed(m.psnr, 4) << ' '
       << fixed(m.input_mse, 8) << ' ' << fixed(m.input_psnr, 4) << '\n';
  };
  for (const auto& m : metrics.per_kind) row(m);
  row(metrics.overall);
  return os.str();
}

std::string format_loss_curve(const std::vector<LossPoint>& curve) {
  std::ostringstream os;
  os << "step loss\n";
  for (const auto& p : curve) os << p.step << ' ' << fixed(p.loss, 8) << '\n';
  return os.str();
}

RoutingReport route_report(MiMDiT& model, const std::vector<Tensor>& degraded,
                           const std::vector<std::string>& labels, std::uint64_t seed,
                           bool all_blocks, std::vector<RoutingTrace>* traces) {
  if (labels.size() != degraded.size()) {
    throw ContractError("route report needs one label per image: " +
                        std::to_string(labels.size()) + " labels for " +
                        std::to_string(degraded.size()) + " images");
  }
  const ModelConfig& config = model.config();
  RoutingReport report;
  report.mechanisms = config.mim.mechanisms;
  report.all_blocks = all_blocks;
  std::map<std::string, std::size_t> slot;
  for (std::size_t i = 0; i < degraded.size(); ++i) {
    if (labels[i].empty()) {
      throw ContractError("sample " + std::to_string(i) + " carries no degradation label");
    }
    std::vector<RoutingTrace> local;
    RoutingObserver observer;
    observer.traces = &local;
    observer.label = labels[i];
    Graph g(false);
    model.forward(g, image_to_latent(degraded[i], config.patch), sampling_noise(seed, i, config),
                  0.0, &observer);
    auto [it, inserted] = slot.emplace(labels[i], report.labels.size());
    if (inserted) {
      report.labels.push_back(labels[i]);
      report.rows.push_back({});
      report.counts.push_back(0);
    }
    auto& row = report.rows[it->second];
    std::size_t used = 0;
    for (const auto& trace : local) {
      if (!all_blocks && trace.block != 0) continue;
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += trace.dense[j];
      ++used;
    }
    if (used == 0) throw ContractError("model produced no routing traces");
    ++report.counts[it->second];
    if (traces) traces->insert(traces->end(), local.begin(), local.end());
  }
  // Per-sample traces are averaged over blocks first, then over samples.
  for (std::size_t r = 0; r < report.rows.size(); ++r) {
    const double per_sample = all_blocks ? static_cast<double>(config.mim.block_count) : 1.0;
    for (auto& v : report.rows[r]) v /= per_sample * static_cast<double>(report.counts[r]);
  }
  return report;
}

RoutingReport route_report(MiMDiT& model, const Dataset& data, std::uint64_t seed,
                           bool all_blocks, std::vector<RoutingTrace>* traces) {
  std::vector<Tensor> degraded;
  std::vector<std::string> labels;
  for (const auto& s : data.samples) {
    degraded.push_back(s.degraded);
    labels.emplace_back(degradation_name(s.spec.kind));
  }
  return route_report(model, degraded, labels, seed, all_blocks, traces);
}

std::string format_routing_report(const RoutingReport& report) {
  std::ostringstream os;
  os << "label";
  for (std::size_t j = 0; j < report.mechanisms.size(); ++j) {
    os << " g" << j + 1 << ':' << mechanism_name(report.mechanisms[j]);
  }
  os << " row_sum count\n";
  for (std::size_t r = 0; r < report.rows.size(); ++r) {
    os << report.labels[r];
    double sum = 0.0;
    for (double v : report.rows[r]) {
      os << ' ' << fixed(v, 4);
      sum += v;
    }
    os << ' ' << fixed(sum, 4) << ' ' << report.counts[r] << '\n';
  }
  return os.str();
}

double max_pairwise_l1(const RoutingReport& report) {
  double best = 0.0;
  for (std::size_t a = 0; a < report.rows.size(); ++a) {
    for (std::size_t b = a + 1; b < report.rows.size(); ++b) {
      double d = 0.0;
      for (std::size_t j = 0; j < report.rows[a].size(); ++j) {
        d += std::abs(report.rows[a][j] - report.rows[b][j]);
      }
      best = std::max(best, d);
    }
  }
  return best;
}

std::vector<AblationRow> ablate(const ExperimentConfig& base, const std::vector<Variant>& variants,
                                const Dataset& train, const Dataset& heldout, std::ostream* log,
                                const std::function<void(Variant, TrainResult&)>& on_trained) {
  std::vector<AblationRow> rows;
  for (Variant v : variants) {
    ExperimentConfig config = base;
    config.variant = v;
    if (log) *log << "variant " << variant_name(v) << '\n';
    TrainResult trained = train_model(config, train, log);
    const RestoreResult eval = restore_dataset(trained.model, heldout, config.sampler, config.seed);
    rows.push_back({v, trained.model.parameter_count(), trained.final_loss,
                    eval.metrics.overall.mse, eval.metrics.overall.psnr});
    if (on_trained) on_trained(v, trained);
  }
  return rows;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "variant params final_loss mse psnr\n";
  for (const auto& r : rows) {
    os << variant_name(r.variant) << ' ' << r.parameters << ' ' << fixed(r.final_loss, 8) << ' '
       << fixed(r.mse, 8) << ' ' << fixed(r.psnr, 4) << '\n';
  }
  return os.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw PersistenceError(path, "cannot open for writing");
  out << text;
  if (!out) throw PersistenceError(path, "write failed");
}

void write_tensor_list(const std::string& path, const std::vector<Tensor>& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw PersistenceError(path, "cannot open for writing");
  write_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) write_tensor(out, t);
  if (!out) throw PersistenceError(path, "write failed");
}

std::vector<Tensor> read_tensor_list(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PersistenceError(path, "cannot open tensor list");
  try {
    const auto count = read_u32(in);
    std::vector<Tensor> out;
    for (std::uint32_t i = 0; i < count; ++i) out.push_back(read_tensor(in));
    return out;
  } catch (const PersistenceError& e) {
    if (e.path() == path) throw;
    throw PersistenceError(path, e.what());
  }
}

}  // namespace mimdit
