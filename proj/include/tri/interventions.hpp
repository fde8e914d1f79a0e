#pragma once

// Intervention algebra: knockouts (zero / mean / resample null sources),
// interchange patching with optional translation, and the effect deltas.

#include "tri/translation_maps.hpp"
#include "tri/world.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tri {

enum class Ablation { zero, mean, resample };
Ablation ablation_from_string(const std::string& s);
std::string to_string(Ablation a);

/// Null-source distribution for knockouts. Mean and resample ablations are
/// defined relative to a context set of inputs whose clean traces are cached
/// here once.
class NullSource {
public:
  static NullSource zero();
  static NullSource mean(const LowLevelModel& model, std::span<const std::vector<double>> context);
  static NullSource resample(const LowLevelModel& model, std::span<const std::vector<double>> context);

  Ablation kind() const noexcept { return kind_; }
  std::size_t context_size() const noexcept { return traces_.size(); }
  // Replacement values for `circuit`; `seed` picks the resample draw.
  std::vector<double> values(const Circuit& circuit, std::uint64_t seed) const;
  const std::vector<std::vector<double>>& layer_means() const noexcept { return means_; }

private:
  Ablation kind_ = Ablation::zero;
  std::vector<ActivationTrace> traces_;
  std::vector<std::vector<double>> means_;
};

void check_circuit(const LowLevelModel& model, const Circuit& circuit);

ActivationTrace apply_knockout(const LowLevelModel& model, std::span<const double> x, const Circuit& circuit,
                               const NullSource& null_source, std::uint64_t seed = 0,
                               std::optional<InputLabel> label = {});

// Runs x_s, reads a_{C_s}(x_s), maps it when a map is given, and pins the
// result onto C_b during a forward pass on x_b.
ActivationTrace apply_patch(const LowLevelModel& model, std::span<const double> x_b, std::span<const double> x_s,
                            const Circuit& circuit_b, const Circuit& circuit_s, const TranslationMap* map = nullptr,
                            std::optional<InputLabel> base_label = {});

// Same, with the source activations already extracted (and mapped).
ActivationTrace patch_values(const LowLevelModel& model, std::span<const double> x_b, const Circuit& circuit_b,
                             std::span<const double> values, std::optional<InputLabel> base_label = {});

// Patched source values after the optional map, checked against circuit_b.
std::vector<double> patch_source_values(const LowLevelModel& model, std::span<const double> x_s,
                                        const Circuit& circuit_b, const Circuit& circuit_s, const TranslationMap* map);

struct LabeledInput {
  std::span<const double> x;
  InputLabel label;
};

// Delta_KO = M(f(x)) - M(f^KO(x)).
double delta_ko(const World& world, const LabeledInput& in, const Circuit& circuit, const NullSource& null_source,
                std::uint64_t seed = 0);

// Delta_swap = M(patched base) - M(clean base).
double delta_swap(const World& world, const LabeledInput& base, const LabeledInput& source, const Circuit& circuit_b,
                  const Circuit& circuit_s, const TranslationMap* map = nullptr);

// Cue-only falsifier: Delta_swap targeting the cue circuit.
double delta_cue(const World& world, const LabeledInput& base, const LabeledInput& source, const Circuit& cue_circuit,
                 const TranslationMap* map = nullptr);

// ||T a_source - a_base||_2 (identity when map is null).
double on_manifold_distance(const TranslationMap* map, std::span<const double> a_source, std::span<const double> a_base);

} // namespace tri
