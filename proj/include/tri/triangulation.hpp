#pragma once

// Acceptance engine: similarity indicators, the intervention sampler, the
// Beta-Binomial score estimator with the per-environment gate, placebo
// calibration of eta, mechanism classes and the failure taxonomy.

#include "tri/beta.hpp"
#include "tri/interventions.hpp"
#include "tri/translation_maps.hpp"
#include "tri/world.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace tri {

enum class InterventionKind { knockout = 0, predicate_swap = 1, stability = 2, cue_only = 3 };
inline constexpr std::array<InterventionKind, 4> kAllKinds{InterventionKind::knockout, InterventionKind::predicate_swap,
                                                           InterventionKind::stability, InterventionKind::cue_only};
std::string to_string(InterventionKind k);
InterventionKind intervention_kind_from_string(const std::string& s);

struct Thresholds {
  double tau_n = 0.5;
  double tau_s = 0.5;
  double epsilon = 0.1;
  double delta = 1.0;
  double eta = 0.5;
  double alpha = 0.05;
  void validate() const;
};

int sim_necessity(double delta_ko_value, const Thresholds& th);
int sim_sufficiency(double delta_swap_value, int direction, double distortion, const Thresholds& th);
int sim_invariance(double delta_value, const Thresholds& th);

// One dataset row: the input actually fed to the model plus the label the
// reference family claims for it. They disagree only for corrupted members.
struct DatasetItem {
  std::vector<double> x;
  InputLabel claimed;
  int family = 0;
};

/// Dataset with cached clean traces and scores. Immutable once built.
class Dataset {
public:
  Dataset() = default;
  Dataset(const World& world, std::vector<DatasetItem> items);

  const std::vector<DatasetItem>& items() const noexcept { return items_; }
  const DatasetItem& item(std::size_t i) const { return items_.at(i); }
  const ActivationTrace& trace(std::size_t i) const { return traces_.at(i); }
  double clean_score(std::size_t i) const { return scores_.at(i); }
  std::size_t size() const noexcept { return items_.size(); }
  int num_environments() const noexcept { return num_envs_; }
  std::vector<std::vector<double>> inputs() const;

private:
  std::vector<DatasetItem> items_;
  std::vector<ActivationTrace> traces_;
  std::vector<double> scores_;
  int num_envs_ = 0;
};

struct InterventionDistribution {
  // Indexed by InterventionKind.
  std::array<double, 4> weights{0.25, 0.25, 0.25, 0.25};
  // When set, every base is drawn from this environment.
  std::optional<int> fixed_env;
  // Restrict swap sources to the base environment.
  bool same_env_sources = false;

  double weight(InterventionKind k) const { return weights[static_cast<int>(k)]; }
  InterventionDistribution normalized() const;
};

struct Intervention {
  InterventionKind kind = InterventionKind::knockout;
  std::uint64_t index = 0;
  std::uint64_t seed = 0;
  std::size_t base = 0;
  int base_env = 0;
  std::optional<std::size_t> source;
  int source_env = 0;
  Ablation ablation = Ablation::mean;
  int predicted_direction = 0;
};

struct MechanismClass {
  std::string label;
  std::map<int, Circuit> circuits;
  // Keyed by (target/base environment, source environment).
  std::map<std::pair<int, int>, TranslationMap> maps;
  std::map<int, Circuit> cue_circuits;

  const TranslationMap* map_for(int base_env, int source_env) const;
};

/// Eligible bases and sources per family and environment, precomputed from
/// the dataset's claimed labels.
class InterventionSampler {
public:
  InterventionSampler(const World& world, const Dataset& data, InterventionDistribution dist, Ablation ablation);

  Intervention sample(std::uint64_t master_seed, std::uint64_t index) const;

  const InterventionDistribution& distribution() const noexcept { return dist_; }
  // Environments that can receive bases (positive base-sampling weight).
  const std::vector<int>& base_envs() const noexcept { return base_envs_; }
  const std::vector<std::size_t>& bases(InterventionKind k, int env) const;
  const std::vector<std::size_t>& sources(InterventionKind k, std::size_t base) const;
  bool needs_source(InterventionKind k) const noexcept { return k != InterventionKind::knockout; }

private:
  const World* world_;
  const Dataset* data_;
  InterventionDistribution dist_;
  Ablation ablation_;
  std::vector<int> base_envs_;
  std::array<std::vector<std::vector<std::size_t>>, 4> bases_;   // [kind][env]
  std::array<std::vector<std::vector<std::size_t>>, 4> sources_; // [kind][base]
};

enum class FailureTag { none, lexicalization, agreement, cue_sensitivity, untagged };
std::string to_string(FailureTag t);

struct EvaluationContext {
  const World& world;
  const Dataset& data;
  const NullSource& null_source;
};

struct InterventionOutcome {
  int success = 0;
  double delta = 0.0;
  double distortion = 0.0;
  FailureTag tag = FailureTag::none;
};

InterventionOutcome evaluate_intervention(const Intervention& I, const MechanismClass& mech, const EvaluationContext& ctx,
                                          const Thresholds& th);

// Tags a failing intervention from its intervened logits.
FailureTag failure_diagnostics(std::span<const double> logits, const ScoreSpec& score,
                               const std::optional<InputLabel>& label, InterventionKind kind, double delta,
                               const Thresholds& th);

struct Tally {
  long long n = 0;
  long long k = 0;
  double rate() const noexcept { return n ? static_cast<double>(k) / static_cast<double>(n) : 0.0; }
};

struct EnvScore {
  long long n = 0;
  long long k = 0;
  double t_hat = 0.0;
  bool untested = false;
};

enum class Decision { accept, reject };
std::string to_string(Decision d);

struct TriangulationReport {
  std::string mechanism;
  long long n = 0;
  long long k = 0;
  double t_hat = 0.0;
  std::map<int, EnvScore> per_env;
  std::map<InterventionKind, Tally> per_family;
  // Knockout plus same-environment swap outcomes, per base environment.
  std::map<int, Tally> single_env;
  BetaPosterior posterior;
  std::pair<double, double> credible_interval{0.0, 1.0};
  double ci_level = 0.95;
  Decision decision = Decision::reject;
  double eta_used = 0.0;
  double min_env_score = 0.0;
  double gate_statistic = 0.0; // min(t_hat, min_e t_hat_e)
  std::map<std::string, long long> failure_taxonomy;
  std::string class_label;
};

struct InterventionRecord {
  Intervention intervention;
  InterventionOutcome outcome;
};

struct EstimateOptions {
  double a0 = 1.0;
  double b0 = 1.0;
  double ci_level = 0.95;
  int workers = 1;
  bool keep_records = false;
};

struct Estimate {
  TriangulationReport report;
  std::vector<InterventionRecord> records;
};

// Builds the report from outcomes (pure tally; shared by the estimator and
// replay/enumeration checks).
TriangulationReport tally_report(const std::string& mechanism, std::span<const InterventionRecord> records,
                                 const std::vector<int>& base_envs, const Thresholds& th, const EstimateOptions& opts);

Estimate estimate_score(const MechanismClass& mech, const EvaluationContext& ctx, const InterventionSampler& sampler,
                        long long n, const Thresholds& th, std::uint64_t master_seed, const EstimateOptions& opts = {});

std::string classify_mechanism(const TriangulationReport& report, double eta);

// Maps for every ordered pair of distinct environments, fitted on
// predicate-matched family pairs with a deterministic holdout split.
std::map<std::pair<int, int>, TranslationMap> fit_mechanism_maps(const World& world, const Dataset& data,
                                                                 const std::map<int, Circuit>& circuits,
                                                                 double ridge = kDefaultRidge);

// Family pairs (source env -> base env) for one ordered environment pair.
std::vector<ActivationPair> family_pairs(const Dataset& data, const std::map<int, Circuit>& circuits, int base_env,
                                         int source_env);

MechanismClass make_mechanism(const std::string& label, const World& world, const Dataset& data,
                              const std::map<int, Circuit>& circuits, const std::map<int, Circuit>& cue_circuits,
                              double ridge = kDefaultRidge);

std::map<int, Circuit> same_circuit_everywhere(const Circuit& c, int num_envs);

// Random circuits of `size` hidden sites; never a superset of any excluded circuit.
std::vector<Circuit> generate_placebos(const World& world, std::size_t size, int count,
                                       const std::vector<Circuit>& exclude, std::uint64_t seed);

struct CalibrationResult {
  double eta = 0.0;
  double raw_eta = 0.0;
  int accepted = 0;
  std::vector<double> statistics; // gate statistic per placebo
  std::vector<TriangulationReport> reports;
};

inline constexpr int kMinPlacebos = 20;
inline constexpr double kEtaMin = 0.05;
inline constexpr double kEtaMax = 0.99;

// eta from an upper order statistic of the placebo gate statistics, chosen
// so the placebo acceptance count is as close to alpha * N as possible.
double eta_from_statistics(std::vector<double> stats, double alpha, double* raw = nullptr);

CalibrationResult calibrate_eta(const std::vector<MechanismClass>& placebos, const EvaluationContext& ctx,
                                const InterventionSampler& sampler, long long n, const Thresholds& th,
                                std::uint64_t master_seed, const EstimateOptions& opts = {});

} // namespace tri
