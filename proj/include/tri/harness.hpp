#pragma once

// Scenario configuration and the discovery -> maps -> acceptance pipeline,
// with baselines, stress tests and the comparison table.

#include "tri/discovery.hpp"
#include "tri/reference_families.hpp"
#include "tri/triangulation.hpp"

#include "json.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace tri {

using Json = nlohmann::ordered_json;

inline constexpr int kScenarioSchemaVersion = 1;
inline constexpr const char* kLibraryVersion = "1.0.0";

struct ThresholdConfig {
  std::optional<double> tau_n, tau_s, epsilon, delta, eta;
  double alpha = 0.05;
};

struct FamilySpec {
  PredicateInstance z;
  std::vector<int> envs;
};

struct Scenario {
  std::string name = "scenario";
  WorldSpec world;
  // Empty: every (z_sem, z_g) anchored across all environments.
  std::vector<FamilySpec> families;
  ThresholdConfig thresholds;
  InterventionDistribution distribution;
  Ablation ablation = Ablation::mean;
  long long n_interventions = 900;
  double a0 = 1.0;
  double b0 = 1.0;
  double ci_level = 0.95;
  std::uint64_t master_seed = 1;
  int placebos = 100;
  double ridge = kDefaultRidge;
  DiscoveryOptions discovery;
  bool baseline_single_env = true;
  bool baseline_faithfulness = true;
  int baseline_env = 0;
  bool stress = false;
  ViolationKind stress_kind = ViolationKind::meaning_flip;

  void validate() const;
};

// Default micro-world: 6 semantic values, {m, f, incl, amb}, 3 environments,
// one hidden tanh layer of 24 units, planted sites drawn from the seed.
WorldSpec micro_world_spec(std::uint64_t seed, int predicate_sites = 3, int cue_sites = 2);
WorldSpec shortcut_world_spec(std::uint64_t seed, int home_env = 0);
WorldSpec bimodal_world_spec(std::uint64_t seed, int attributes = 3);
Scenario micro_scenario(std::uint64_t seed);

// Picks `per_layer` distinct planted units per hidden layer for each pathway.
void assign_planted_sites(WorldSpec& spec, int predicate_per_layer, int cue_per_layer, std::uint64_t seed);

Scenario scenario_from_json(const Json& j);
Json to_json(const Scenario& s);
Scenario load_scenario(const std::string& path);

std::vector<ReferenceFamily> build_families(const World& world, const Scenario& s);
Dataset dataset_from_families(const World& world, const std::vector<ReferenceFamily>& families);
std::vector<ScoredInput> scored_inputs(const Dataset& data);

struct AutoThresholds {
  Thresholds thresholds;
  double planted_effect = 0.0;
  double native_swap_distance = 0.0;
  double residual_q95 = 0.0;
};

// Thresholds from the planted mechanism: tau = E/2, epsilon = 0.1 E with E the
// median knockout effect; delta = native swap distance + residual q95.
AutoThresholds auto_thresholds(const World& world, const Dataset& data, const MechanismClass& planted,
                               const NullSource& null_source, const ThresholdConfig& cfg, double ridge);

struct SingleEnvResult {
  std::map<int, double> rate;
  std::map<int, bool> accept;
  int baseline_env = 0;
  bool accepted() const { return accept.count(baseline_env) && accept.at(baseline_env); }
};

// Knockout plus same-environment swap, scored within each environment alone.
SingleEnvResult baseline_single_env(const MechanismClass& mech, const EvaluationContext& ctx, const Thresholds& th,
                                    long long n_per_env, std::uint64_t master_seed, int baseline_env, Ablation ablation,
                                    int workers = 1);

struct FaithfulnessResult {
  double mean_deviation = 0.0;
  double worst_deviation = 0.0;
  bool accept = false;
};

// Complement of `circuit` mean-ablated; accepts when the mean relative
// deviation is within the faithfulness bound.
FaithfulnessResult baseline_faithfulness(const Circuit& circuit, const World& world, const Dataset& data,
                                         double bound = kFaithfulnessBound, double eps_m = kFaithfulnessEps);

struct RunOptions {
  int workers = 1;
  bool keep_records = true;
};

struct MechanismRun {
  MechanismClass mechanism;
  std::string kind; // planted-predicate | planted-cue | discovered | placebo
  TriangulationReport report;
  std::vector<InterventionRecord> records;
  std::optional<SingleEnvResult> single_env;
  std::optional<FaithfulnessResult> faithfulness;
};

struct PipelineResult {
  World world;
  std::vector<ReferenceFamily> families;
  Dataset dataset;
  std::vector<EnvDiscovery> discovery;
  CueDiscovery cue;
  AutoThresholds thresholds;
  CalibrationResult calibration;
  std::vector<MechanismRun> runs;
  Json manifest;
};

PipelineResult run_pipeline(const Scenario& s, const RunOptions& opts = {});

struct StressResult {
  bool clean_accept = false;
  bool stressed_accept = false;
  double clean_t_hat = 0.0;
  double stressed_t_hat = 0.0;
  double mean_quality = 1.0;
  TriangulationReport stressed;
  bool flipped() const { return clean_accept && !stressed_accept; }
};

// Corrupts one member per family, refits the planted mechanism's maps on the
// corrupted families and re-runs acceptance with the clean thresholds.
StressResult stress_test(const PipelineResult& clean, const Scenario& s, const RunOptions& opts = {});

// Method x mechanism-kind acceptance table; missing methods are null.
Json compare_acceptance(const Json& manifest);
std::string comparison_csv(const Json& table);

// Manifest hash over everything except wall-clock metadata.
std::uint64_t manifest_hash(const Json& manifest);
std::string hex64(std::uint64_t v);

} // namespace tri
