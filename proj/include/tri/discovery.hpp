#pragma once

// Candidate-circuit discovery: integrated-gradient edge attribution, greedy
// faithfulness pruning, and environment-probe cue circuits.

#include "tri/world.hpp"

#include <compare>
#include <map>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace tri {

// Edge from a site in layer l to a unit in layer l+1. `to.layer` equal to
// hidden_layers()+1 addresses an output logit.
struct EdgeId {
  SiteId from;
  SiteId to;
  friend auto operator<=>(const EdgeId&, const EdgeId&) = default;
};

enum class BaselineKind { zero, mean };

// Per-layer reference activations ā used by attribution and pruning.
struct Baseline {
  BaselineKind kind = BaselineKind::zero;
  std::vector<std::vector<double>> layers; // sites[layer][unit]

  static Baseline zero(const LowLevelModel& model);
  static Baseline mean(const LowLevelModel& model, std::span<const std::vector<double>> context);
};

struct AttributionTable {
  std::map<EdgeId, double> scores;
  BaselineKind baseline = BaselineKind::zero;
  int steps = 0;
};

struct ScoredInput {
  std::vector<double> x;
  InputLabel label;
};

// All edges from layer `first_layer` onward, including the readout edges.
std::vector<EdgeId> all_edges(const LowLevelModel& model, int first_layer = 0);

// IG(e) = (a_u - ā_u) * mean_k w_vu * dM/dpre_v along the straight path from
// ā to a at the edge's source layer. The whole layer is interpolated jointly,
// so each cut satisfies completeness; midpoint steps are split where the text
// score changes branch.
AttributionTable eap_ig(const World& world, const ScoredInput& input, std::span<const EdgeId> edges,
                        const Baseline& baseline, int steps);

// Per-edge mean |IG| over a set of inputs.
AttributionTable mean_abs_attribution(const World& world, std::span<const ScoredInput> inputs,
                                      std::span<const EdgeId> edges, const Baseline& baseline, int steps);

// Score of the restricted model: removed edges transmit ā_u instead of a_u.
double restricted_score(const World& world, const ScoredInput& input, const std::set<EdgeId>& removed,
                        const Baseline& baseline);

// |M(f^C(x)) - M(f(x))| / (|M(f(x))| + eps_m)
double relative_deviation(double restricted, double full, double eps_m);

struct PruneResult {
  Circuit circuit;
  std::set<EdgeId> kept;
  double mean_deviation = 0.0;
  double worst_deviation = 0.0;
};

inline constexpr double kFaithfulnessBound = 0.1;
inline constexpr double kFaithfulnessEps = 1e-6;

// Removes edges in ascending |IG| (ties by EdgeId) while the mean relative
// deviation over `inputs` stays within keep_threshold.
PruneResult greedy_prune(const AttributionTable& table, const World& world, std::span<const ScoredInput> inputs,
                         const Baseline& baseline, double keep_threshold = kFaithfulnessBound,
                         double eps_m = kFaithfulnessEps);

struct DiscoveryOptions {
  int steps = 32;
  int first_layer = 1;
  BaselineKind baseline = BaselineKind::mean;
  double keep_threshold = kFaithfulnessBound;
  double eps_m = kFaithfulnessEps;
  double probe_ridge = 1e-3;
  double cue_floor = 1e-8;
};

struct EnvDiscovery {
  int env = 0;
  AttributionTable table;
  PruneResult pruned;
};

// Per-environment predicate circuits (dataset restricted to each environment).
std::vector<EnvDiscovery> discover_predicate_circuits(const World& world, std::span<const ScoredInput> dataset,
                                                      const DiscoveryOptions& opts = {});

struct CueDiscovery {
  Circuit circuit;
  std::map<SiteId, double> site_scores; // mean |IG| of the probe margin
  double mean_deviation = 0.0;
  double worst_deviation = 0.0;
};

// Fits a one-vs-rest linear environment probe per hidden layer, attributes
// the probe margin to sites, and prunes.
CueDiscovery discover_cue_circuit(const World& world, std::span<const ScoredInput> dataset,
                                  const DiscoveryOptions& opts = {});

void write_attribution_csv(std::ostream& os, const AttributionTable& table);

} // namespace tri
