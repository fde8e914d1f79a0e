#pragma once

// Synthetic low-level causal models with planted predicate and cue pathways.
//
// Input layout (one-hot blocks):
//   [ semantic (num_semantic) | predicate value (|domain|) | nuisance (nuisance_dim) ]
// The first two blocks are the predicate coordinates; the nuisance block
// carries C = g_C(E) as a one-hot of the environment. In bimodal worlds the
// predicate coordinates are the "image" channel and the nuisance block is the
// "text" channel.
//
// Site layers: 0 is the input encoding, 1..H are hidden layers. The readout
// (logits) is a linear function of layer H only.

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace tri {

struct SiteId {
  int layer = 0;
  int unit = 0;
  friend auto operator<=>(const SiteId&, const SiteId&) = default;
};

enum class Activation { identity, tanh, relu };
enum class Modality { text_only, bimodal };

struct PredicateInstance {
  int z_sem = 0;
  int z_g = 0; // index into WorldSpec::predicate_domain
  friend auto operator<=>(const PredicateInstance&, const PredicateInstance&) = default;
};

struct InputLabel {
  PredicateInstance z;
  int env = 0;
};

struct WorldSpec {
  int num_environments = 3;
  std::vector<std::string> predicate_domain{"m", "f", "incl", "amb"};
  int num_semantic = 6;
  int nuisance_dim = 3;
  int input_dim = 0; // 0: derived from the blocks
  std::vector<int> layer_widths{24}; // hidden layers only
  Activation activation = Activation::tanh;
  std::set<SiteId> planted_predicate_sites;
  std::set<SiteId> planted_cue_sites;
  std::map<std::string, std::vector<int>> output_groups;
  int output_dim = 0; // 0: one past the largest grouped index
  Modality modality = Modality::text_only;
  std::uint64_t seed = 0;

  double planted_weight = 2.0;
  double bias_scale = 0.5;
  // When set, cue sites also read the predicate and are wired into the score,
  // but only carry signal in this environment (a single-environment shortcut).
  std::optional<int> shortcut_env;
};

struct InputLayout {
  int semantic_offset = 0;
  int predicate_offset = 0;
  int nuisance_offset = 0;
  int dim = 0;
  int predicate_block_end() const noexcept { return nuisance_offset; }
};

/// Feedforward network. widths[0] is the input, widths.back() the logits.
struct LowLevelModel {
  std::vector<int> widths;
  // weights[l] maps layer l to layer l+1; row-major widths[l+1] x widths[l].
  std::vector<std::vector<double>> weights;
  std::vector<std::vector<double>> biases;
  Activation activation = Activation::tanh;

  int hidden_layers() const noexcept { return static_cast<int>(widths.size()) - 2; }
  int site_layers() const noexcept { return static_cast<int>(widths.size()) - 1; }
  int input_dim() const noexcept { return widths.front(); }
  int output_dim() const noexcept { return widths.back(); }
  double weight(int from_layer, int to_unit, int from_unit) const {
    return weights[from_layer][static_cast<std::size_t>(to_unit) * widths[from_layer] + from_unit];
  }
  bool valid(SiteId s) const noexcept {
    return s.layer >= 0 && s.layer < site_layers() && s.unit >= 0 && s.unit < widths[s.layer];
  }
};

struct ScoreSpec {
  Modality modality = Modality::text_only;
  std::map<std::string, std::vector<int>> groups;
  std::vector<std::string> predicate_domain;
};

struct ActivationTrace {
  std::vector<std::vector<double>> sites; // sites[layer][unit], layers 0..H
  std::vector<double> logits;
  std::optional<InputLabel> label;

  double at(SiteId s) const { return sites[s.layer][s.unit]; }
};

struct SitePin {
  SiteId site;
  double value;
};

struct Circuit {
  std::vector<SiteId> sites; // sorted, unique
  std::string label;

  Circuit() = default;
  Circuit(std::vector<SiteId> s, std::string l);
  bool empty() const noexcept { return sites.empty(); }
  std::size_t size() const noexcept { return sites.size(); }
  bool contains(SiteId s) const;
  friend bool operator==(const Circuit& a, const Circuit& b) { return a.sites == b.sites; }
};

struct World {
  WorldSpec spec;
  InputLayout layout;
  LowLevelModel model;
  ScoreSpec score;

  int num_environments() const noexcept { return spec.num_environments; }
  int domain_size() const noexcept { return static_cast<int>(spec.predicate_domain.size()); }
};

// Construction and encoding.
void validate(const WorldSpec& spec);
World build_world(const WorldSpec& spec);
std::vector<double> encode_input(const PredicateInstance& z, int env, const World& world);

struct BimodalChannels {
  std::vector<double> image;
  std::vector<double> text;
};
BimodalChannels encode_channels(const PredicateInstance& z, int env, const World& world);

// Forward pass. Pinned sites keep their pinned value for the rest of the pass
// (do-operator); everything downstream is recomputed.
ActivationTrace forward(const LowLevelModel& model, std::span<const double> x,
                        std::span<const SitePin> pins = {}, std::optional<InputLabel> label = {});

// Forward starting from a complete activation vector at `layer`.
ActivationTrace forward_from(const LowLevelModel& model, int layer, std::span<const double> activation,
                             std::optional<InputLabel> label = {});

double activate(Activation kind, double pre) noexcept;
double activate_derivative(Activation kind, double pre, double post) noexcept;

// Reverse-mode pass: given dM/dlogits, returns dM/d(activation) for every site
// layer in [from_layer, H]. Entries for earlier layers are left empty.
std::vector<std::vector<double>> backprop(const LowLevelModel& model, const ActivationTrace& trace,
                                          std::span<const double> dscore_dlogits, int from_layer = 0);

// Task score: text-only worlds use the inclusive-vs-binary log-odds, bimodal
// worlds the log-probability of the correct attribute's token set.
double task_score(const ActivationTrace& trace, const ScoreSpec& spec);
double score_from_logits(std::span<const double> logits, const ScoreSpec& spec,
                         const std::optional<InputLabel>& label);
std::vector<double> score_gradient(std::span<const double> logits, const ScoreSpec& spec,
                                   const std::optional<InputLabel>& label);

double log_sum_exp(std::span<const double> logits, std::span<const int> indices);

struct GroundTruth {
  Circuit predicate;
  Circuit cue;
};
GroundTruth ground_truth(const World& world);

// Abstract-model predictions.
//   text-only: inclusive level +1, binary (m, f) -1, anything else 0.
//   bimodal:   swapping the attribute always lowers the correct-attribute score.
int predicate_level(const World& world, int z_g);
int predicted_direction(const World& world, int base_g, int source_g);
bool is_knockout_target(const World& world, int z_g);

std::vector<double> site_values(const ActivationTrace& trace, const Circuit& circuit);

std::string to_string(Activation a);
std::string to_string(Modality m);
Activation activation_from_string(const std::string& s);
Modality modality_from_string(const std::string& s);

} // namespace tri
