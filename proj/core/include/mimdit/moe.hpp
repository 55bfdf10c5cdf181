#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mimdit/attention.hpp"

namespace mimdit {

/// How the outer level combines the four expert groups.
enum class InterRouting {
  dense,        // softmax fusion over all groups
  sparse_top1,  // only the highest-gated group runs
};

/// How each group combines its sub-experts.
enum class IntraRouting {
  sparse,         // softmax, top-k, renormalize
  single,         // one fixed expert, no router
  dense_uniform,  // every sub-expert with weight 1/N
};

std::string_view inter_routing_name(InterRouting r);
std::string_view intra_routing_name(IntraRouting r);
InterRouting parse_inter_routing(std::string_view name);
IntraRouting parse_intra_routing(std::string_view name);

struct MiMConfig {
  static constexpr std::size_t group_count = 4;

  std::size_t sub_expert_count = 4;
  std::size_t top_k = 2;
  std::size_t model_dim = 16;
  std::size_t block_count = 2;
  std::size_t window = 2;
  std::size_t heads = 1;
  std::size_t se_reduction = 4;
  std::array<Mechanism, group_count> mechanisms{Mechanism::spatial, Mechanism::channel,
                                                Mechanism::swin, Mechanism::se};
  InterRouting inter = InterRouting::dense;
  IntraRouting intra = IntraRouting::sparse;
  /// Adds the input back onto the fused group outputs.
  bool residual = true;
  /// Weight of the importance-balance penalty on sparse routers; 0 disables it.
  double balance_coefficient = 0.0;

  void validate() const;
  bool operator==(const MiMConfig&) const = default;
};

/// Linear D -> E map on mean-pooled tokens. Zero-initialized, so an untrained
/// router emits uniform gates.
struct DenseRouter {
  Tensor weight;  // [D, E]
  Tensor bias;    // [E]

  static DenseRouter init(std::size_t dim, std::size_t experts);
};

/// Linear D -> N map on mean-pooled tokens, small random init.
struct SparseRouter {
  Tensor weight;  // [D, N]
  Tensor bias;    // [N]

  static SparseRouter init(std::size_t dim, std::size_t experts, Rng& rng);
};

struct GroupSelection {
  std::vector<std::size_t> indices;
  std::vector<double> gates;
};

/// One sample's routing decisions at one MiM module.
struct RoutingTrace {
  std::string label;
  std::size_t block = 0;
  std::array<double, MiMConfig::group_count> dense{};
  std::array<GroupSelection, MiMConfig::group_count> groups;
};

/// `label, g1, g2, g3, g4, group:subexpert pairs` with space-separated pairs.
std::string format_trace(const RoutingTrace& trace);
RoutingTrace parse_trace(std::string_view line);

/// Collects routing traces and the sparse-router probability vectors needed by
/// the balance penalty. Traces are appended in forward-call order.
struct RoutingObserver {
  std::vector<RoutingTrace>* traces = nullptr;
  std::string label;
  /// Indexed by block * group_count + group.
  std::vector<std::vector<Var>>* router_probabilities = nullptr;
};

using ExpertFn = std::function<Var(Var)>;

/// sum_i gates_i * f_i(x), scalar gate per expert broadcast over all elements.
Var moe_layer(Var x, std::span<const ExpertFn> experts, Var gates);

/// softmax(projection(mean_L(x))): a point on the simplex of router outputs.
Var dense_route(const TokenSequence& x, DenseRouter& router);

struct SparseRoute {
  std::vector<std::size_t> indices;  // top-k, descending gate
  Var gates;                         // [k], renormalized to sum 1
  Var probabilities;                 // [N], full softmax
};

/// Softmax over N logits, top-k with lowest-index tie-break, renormalized.
SparseRoute sparse_route(const TokenSequence& x, SparseRouter& router, std::size_t k);

struct ExpertGroup {
  Mechanism mechanism = Mechanism::spatial;
  std::vector<ExpertParams> experts;
  std::optional<SparseRouter> router;  // present for IntraRouting::sparse
};

/// Output of one group; only the selected sub-experts are evaluated.
TokenSequence intra_moe_forward(const TokenSequence& x, ExpertGroup& group, std::size_t k,
                                IntraRouting mode, const ExpertContext& ctx,
                                GroupSelection* selection = nullptr,
                                Var* probabilities = nullptr);

using GroupFn = std::function<TokenSequence(const TokenSequence&)>;

/// sum_i gates_i * groups_i(x) (+ x when `residual`).
TokenSequence mim_fuse(const TokenSequence& x, Var gates, std::span<const GroupFn> groups,
                       bool residual);

/// Two-level mixture: four heterogeneous groups fused by a dense router, each
/// a sparse mixture of same-architecture sub-experts.
class MiMModule {
 public:
  static MiMModule init(const MiMConfig& config, Rng& rng);

  const MiMConfig& config() const noexcept { return config_; }
  DenseRouter& dense_router() noexcept { return dense_; }
  std::array<ExpertGroup, MiMConfig::group_count>& groups() noexcept { return groups_; }

  /// `block_index` drives the swin shift schedule and the trace record.
  TokenSequence forward(const TokenSequence& x, std::size_t block_index,
                        RoutingObserver* observer = nullptr);

  void for_each_parameter(const std::string& prefix, const ParameterVisitor& visit);

 private:
  MiMConfig config_;
  DenseRouter dense_;
  std::array<ExpertGroup, MiMConfig::group_count> groups_;
};

/// Free-function form of MiMModule::forward.
TokenSequence mim_forward(const TokenSequence& x, MiMModule& module, std::size_t block_index,
                          RoutingObserver* observer = nullptr);

/// N * sum_j (mean_b p_bj)^2 averaged over routers; equals 1 at perfect balance.
std::optional<Var> balance_penalty(const std::vector<std::vector<Var>>& router_probabilities);

}  // namespace mimdit
