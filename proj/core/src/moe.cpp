#include "mimdit/moe.hpp"

#include <cmath>
#include <sstream>

#include "mimdit/errors.hpp"
#include "mimdit/text.hpp"

namespace mimdit {

namespace {

Var pooled(const TokenSequence& x) {
  const std::size_t d = x.dim();
  return reshape(mean(x.tokens, 0), {1, d});
}

Var router_logits(const TokenSequence& x, Tensor& weight, Tensor& bias) {
  if (weight.rank() != 2 || weight.extent(0) != x.dim()) {
    throw DimensionError("router projection " + shape_to_string(weight.shape()) +
                         " does not accept width " + std::to_string(x.dim()));
  }
  Graph& g = *x.tokens.graph();
  Var logits = linear(pooled(x), g.parameter(weight), g.parameter(bias));
  return reshape(logits, {weight.extent(1)});
}

}  // namespace

std::string_view inter_routing_name(InterRouting r) {
  return r == InterRouting::dense ? "dense" : "sparse_top1";
}

std::string_view intra_routing_name(IntraRouting r) {
  switch (r) {
    case IntraRouting::sparse: return "sparse";
    case IntraRouting::single: return "single";
    case IntraRouting::dense_uniform: return "dense_uniform";
  }
  return "unknown";
}

InterRouting parse_inter_routing(std::string_view name) {
  if (name == "dense") return InterRouting::dense;
  if (name == "sparse_top1") return InterRouting::sparse_top1;
  throw ConfigurationError("unknown inter routing '" + std::string(name) + "'");
}

IntraRouting parse_intra_routing(std::string_view name) {
  for (auto r : {IntraRouting::sparse, IntraRouting::single, IntraRouting::dense_uniform}) {
    if (intra_routing_name(r) == name) return r;
  }
  throw ConfigurationError("unknown intra routing '" + std::string(name) + "'");
}

void MiMConfig::validate() const {
  if (model_dim == 0) throw ConfigurationError("model_dim must be positive");
  if (sub_expert_count == 0) throw ConfigurationError("sub_expert_count must be positive");
  if (intra == IntraRouting::single && sub_expert_count != 1) {
    throw ConfigurationError("single-expert groups require sub_expert_count = 1");
  }
  if (top_k < 1 || top_k > sub_expert_count) {
    throw ParameterError("top_k " + std::to_string(top_k) + " outside [1, " +
                         std::to_string(sub_expert_count) + "]");
  }
  if (heads == 0 || model_dim % heads != 0) {
    throw ConfigurationError("heads " + std::to_string(heads) + " must divide model_dim " +
                             std::to_string(model_dim));
  }
  if (se_reduction == 0 || model_dim % se_reduction != 0) {
    throw ConfigurationError("se_reduction " + std::to_string(se_reduction) +
                             " must divide model_dim " + std::to_string(model_dim));
  }
  if (window == 0) throw ConfigurationError("window must be positive");
  if (balance_coefficient < 0.0) throw ConfigurationError("balance_coefficient must be >= 0");
}

DenseRouter DenseRouter::init(std::size_t dim, std::size_t experts) {
  return {Tensor({dim, experts}), Tensor({experts})};
}

SparseRouter SparseRouter::init(std::size_t dim, std::size_t experts, Rng& rng) {
  return {normal_tensor({dim, experts}, 0.1 / std::sqrt(static_cast<double>(dim)), rng),
          Tensor({experts})};
}

std::string format_trace(const RoutingTrace& trace) {
  std::ostringstream os;
  os << trace.label;
  for (double g : trace.dense) os << ", " << format_double(g);
  os << ",";
  for (std::size_t i = 0; i < trace.groups.size(); ++i) {
    for (auto j : trace.groups[i].indices) os << ' ' << i << ':' << j;
  }
  return os.str();
}

RoutingTrace parse_trace(std::string_view line) {
  const auto fields = split_list(line, ',');
  if (fields.size() < 5) throw ContractError("routing trace needs at least 5 fields");
  RoutingTrace t;
  t.label = fields[0];
  for (std::size_t i = 0; i < 4; ++i) t.dense[i] = parse_double(fields[i + 1]);
  if (fields.size() > 5) {
    for (const auto& pair : split_list(fields[5], ' ')) {
      const auto colon = pair.find(':');
      if (colon == std::string::npos) throw ContractError("bad group:subexpert pair " + pair);
      const auto group = parse_u64(std::string_view(pair).substr(0, colon));
      const auto expert = parse_u64(std::string_view(pair).substr(colon + 1));
      if (group >= t.groups.size()) throw ContractError("group index out of range in trace");
      t.groups[group].indices.push_back(expert);
    }
  }
  return t;
}

Var moe_layer(Var x, std::span<const ExpertFn> experts, Var gates) {
  if (gates.value().numel() != experts.size()) {
    throw ConfigurationError("moe_layer: " + std::to_string(gates.value().numel()) +
                             " gates for " + std::to_string(experts.size()) + " experts");
  }
  for (double g : gates.value().data()) {
    if (g < 0.0) throw ConfigurationError("moe_layer: gates must be nonnegative");
  }
  Var total;
  for (std::size_t i = 0; i < experts.size(); ++i) {
    const std::size_t idx = i;
    Var gate = gather(gates, std::span<const std::size_t>(&idx, 1));
    Var term = mul(experts[i](x), gate);
    total = i == 0 ? term : add(total, term);
  }
  return total;
}

Var dense_route(const TokenSequence& x, DenseRouter& router) {
  return softmax(router_logits(x, router.weight, router.bias), 0);
}

SparseRoute sparse_route(const TokenSequence& x, SparseRouter& router, std::size_t k) {
  const std::size_t n = router.weight.rank() == 2 ? router.weight.extent(1) : 0;
  if (k < 1 || k > n) {
    throw ParameterError("sparse_route: k=" + std::to_string(k) + " outside [1, " +
                         std::to_string(n) + "]");
  }
  SparseRoute route;
  route.probabilities = softmax(router_logits(x, router.weight, router.bias), 0);
  route.indices = topk(route.probabilities.value(), k).indices;
  route.gates = normalize_sum(gather(route.probabilities, route.indices));
  return route;
}

TokenSequence intra_moe_forward(const TokenSequence& x, ExpertGroup& group, std::size_t k,
                                IntraRouting mode, const ExpertContext& ctx,
                                GroupSelection* selection, Var* probabilities) {
  if (group.experts.empty()) throw ConfigurationError("expert group has no sub-experts");
  switch (mode) {
    case IntraRouting::single: {
      if (selection) *selection = {{0}, {1.0}};
      return apply_expert(x, group.experts.front(), ctx);
    }
    case IntraRouting::dense_uniform: {
      const double w = 1.0 / static_cast<double>(group.experts.size());
      Var total;
      for (std::size_t j = 0; j < group.experts.size(); ++j) {
        Var term = scale(apply_expert(x, group.experts[j], ctx).tokens, w);
        total = j == 0 ? term : add(total, term);
      }
      if (selection) {
        selection->indices.clear();
        selection->gates.assign(group.experts.size(), w);
        for (std::size_t j = 0; j < group.experts.size(); ++j) selection->indices.push_back(j);
      }
      return {total, x.grid};
    }
    case IntraRouting::sparse: {
      if (!group.router) throw ConfigurationError("sparse expert group has no router");
      if (group.router->weight.extent(1) != group.experts.size()) {
        throw ConfigurationError("router width does not match sub-expert count");
      }
      auto route = sparse_route(x, *group.router, k);
      if (probabilities) *probabilities = route.probabilities;
      if (selection) {
        selection->indices = route.indices;
        selection->gates.assign(route.gates.value().data().begin(),
                                route.gates.value().data().end());
      }
      Var total;
      for (std::size_t s = 0; s < route.indices.size(); ++s) {
        const std::size_t pos = s;
        Var gate = gather(route.gates, std::span<const std::size_t>(&pos, 1));
        Var term = mul(apply_expert(x, group.experts[route.indices[s]], ctx).tokens, gate);
        total = s == 0 ? term : add(total, term);
      }
      return {total, x.grid};
    }
  }
  throw ConfigurationError("unknown intra routing mode");
}

TokenSequence mim_fuse(const TokenSequence& x, Var gates, std::span<const GroupFn> groups,
                       bool residual) {
  std::vector<ExpertFn> experts;
  experts.reserve(groups.size());
  for (const auto& fn : groups) {
    experts.push_back([&fn, grid = x.grid](Var tokens) { return fn({tokens, grid}).tokens; });
  }
  Var fused = moe_layer(x.tokens, experts, gates);
  return {residual ? add(x.tokens, fused) : fused, x.grid};
}

MiMModule MiMModule::init(const MiMConfig& config, Rng& rng) {
  config.validate();
  MiMModule m;
  m.config_ = config;
  m.dense_ = DenseRouter::init(config.model_dim, MiMConfig::group_count);
  for (std::size_t i = 0; i < MiMConfig::group_count; ++i) {
    ExpertGroup& group = m.groups_[i];
    group.mechanism = config.mechanisms[i];
    for (std::size_t j = 0; j < config.sub_expert_count; ++j) {
      group.experts.push_back(ExpertParams::init(group.mechanism, config.model_dim, config.heads,
                                                 config.se_reduction, rng));
    }
    if (config.intra == IntraRouting::sparse) {
      group.router = SparseRouter::init(config.model_dim, config.sub_expert_count, rng);
    }
  }
  return m;
}

TokenSequence MiMModule::forward(const TokenSequence& x, std::size_t block_index,
                                 RoutingObserver* observer) {
  check_token_sequence(x, config_.model_dim);
  const ExpertContext ctx{config_.window, swin_shift_for_use(block_index, config_.window)};
  RoutingTrace trace;
  trace.block = block_index;
  const bool tracing = observer != nullptr && observer->traces != nullptr;
  const bool balancing = observer != nullptr && observer->router_probabilities != nullptr;
  if (observer) trace.label = observer->label;

  Var probs = dense_route(x, dense_);
  for (std::size_t i = 0; i < MiMConfig::group_count; ++i) trace.dense[i] = probs.value()[i];

  auto run_group = [&](std::size_t i) {
    Var router_probs;
    auto out = intra_moe_forward(x, groups_[i], config_.top_k, config_.intra, ctx,
                                 &trace.groups[i], balancing ? &router_probs : nullptr);
    if (balancing && router_probs.graph() != nullptr) {
      auto& store = *observer->router_probabilities;
      const std::size_t key = block_index * MiMConfig::group_count + i;
      if (store.size() <= key) store.resize(key + 1);
      store[key].push_back(router_probs);
    }
    return out;
  };

  TokenSequence out;
  if (config_.inter == InterRouting::dense) {
    std::vector<GroupFn> fns;
    for (std::size_t i = 0; i < MiMConfig::group_count; ++i) {
      fns.push_back([&run_group, i](const TokenSequence&) { return run_group(i); });
    }
    out = mim_fuse(x, probs, fns, config_.residual);
  } else {
    const std::size_t chosen = topk(probs.value(), 1).indices.front();
    Var gate = gather(probs, std::span<const std::size_t>(&chosen, 1));
    Var fused = mul(run_group(chosen).tokens, gate);
    out = {config_.residual ? add(x.tokens, fused) : fused, x.grid};
  }
  if (tracing) observer->traces->push_back(std::move(trace));
  return out;
}

void MiMModule::for_each_parameter(const std::string& prefix, const ParameterVisitor& visit) {
  visit(prefix + "router.weight", dense_.weight);
  visit(prefix + "router.bias", dense_.bias);
  for (std::size_t i = 0; i < MiMConfig::group_count; ++i) {
    const std::string gp = prefix + "group" + std::to_string(i) + ".";
    auto& group = groups_[i];
    if (group.router) {
      visit(gp + "router.weight", group.router->weight);
      visit(gp + "router.bias", group.router->bias);
    }
    for (std::size_t j = 0; j < group.experts.size(); ++j) {
      group.experts[j].for_each_parameter(gp + "expert" + std::to_string(j) + ".", visit);
    }
  }
}

TokenSequence mim_forward(const TokenSequence& x, MiMModule& module, std::size_t block_index,
                          RoutingObserver* observer) {
  return module.forward(x, block_index, observer);
}

std::optional<Var> balance_penalty(const std::vector<std::vector<Var>>& router_probabilities) {
  std::optional<Var> total;
  std::size_t routers = 0;
  for (const auto& samples : router_probabilities) {
    if (samples.empty()) continue;
    const std::size_t n = samples.front().value().numel();
    std::vector<Var> rows;
    rows.reserve(samples.size());
    for (const auto& p : samples) rows.push_back(reshape(p, {1, n}));
    Var importance = mean(concat(rows, 0), 0);
    Var term = scale(sum_all(mul(importance, importance)), static_cast<double>(n));
    total = total ? add(*total, term) : term;
    ++routers;
  }
  if (total && routers > 1) total = scale(*total, 1.0 / static_cast<double>(routers));
  return total;
}

}  // namespace mimdit
