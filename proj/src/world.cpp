#include "tri/world.hpp"

#include "tri/error.hpp"
#include "tri/kernels.hpp"
#include "tri/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace tri {

namespace {

const std::vector<std::string> kTextRoles{"incl", "m", "f"};

std::string site_str(SiteId s) {
  return "(" + std::to_string(s.layer) + "," + std::to_string(s.unit) + ")";
}

InputLayout layout_for(const WorldSpec& spec) {
  InputLayout l;
  l.semantic_offset = 0;
  l.predicate_offset = spec.num_semantic;
  l.nuisance_offset = spec.num_semantic + static_cast<int>(spec.predicate_domain.size());
  l.dim = l.nuisance_offset + spec.nuisance_dim;
  return l;
}

int derived_output_dim(const WorldSpec& spec) {
  int hi = 0;
  for (const auto& [_, idx] : spec.output_groups)
    for (int i : idx) hi = std::max(hi, i + 1);
  return std::max(hi, spec.output_dim);
}

// Sites of one pathway, grouped by hidden layer (index 1..H).
std::vector<std::vector<int>> by_layer(const std::set<SiteId>& sites, int hidden) {
  std::vector<std::vector<int>> out(hidden + 1);
  for (const auto& s : sites) out[s.layer].push_back(s.unit);
  for (auto& v : out) std::sort(v.begin(), v.end());
  return out;
}

void check_pathway(const std::set<SiteId>& sites, int hidden, const char* what) {
  if (sites.empty()) return;
  auto layers = by_layer(sites, hidden);
  for (int l = 1; l <= hidden; ++l)
    if (layers[l].empty())
      throw SpecError(std::string(what) + " must occupy every hidden layer 1.." + std::to_string(hidden) +
                      " so the planted pathway reaches the readout (layer " + std::to_string(l) + " is empty)");
}

// Label of the output group a predicate value maps to, or empty when the value
// is neutral (text-only "amb").
std::string role_of_value(const WorldSpec& spec, int g) {
  const auto& label = spec.predicate_domain[g];
  if (spec.modality == Modality::bimodal) return label;
  if (std::find(kTextRoles.begin(), kTextRoles.end(), label) != kTextRoles.end()) return label;
  return {};
}

std::vector<std::string> role_cycle(const WorldSpec& spec) {
  if (spec.modality == Modality::bimodal) return spec.predicate_domain;
  return kTextRoles;
}

} // namespace

Circuit::Circuit(std::vector<SiteId> s, std::string l) : sites(std::move(s)), label(std::move(l)) {
  std::sort(sites.begin(), sites.end());
  sites.erase(std::unique(sites.begin(), sites.end()), sites.end());
}

bool Circuit::contains(SiteId s) const { return std::binary_search(sites.begin(), sites.end(), s); }

void validate(const WorldSpec& spec) {
  if (spec.num_environments < 2) throw SpecError("num_environments must be >= 2");
  if (spec.predicate_domain.size() < 2) throw SpecError("predicate_domain needs at least two values");
  {
    std::set<std::string> uniq(spec.predicate_domain.begin(), spec.predicate_domain.end());
    if (uniq.size() != spec.predicate_domain.size()) throw SpecError("predicate_domain values must be distinct");
  }
  if (spec.num_semantic < 1) throw SpecError("num_semantic must be >= 1");
  if (spec.nuisance_dim < spec.num_environments)
    throw SpecError("nuisance_dim must be >= num_environments (one-hot environment block)");
  const auto layout = layout_for(spec);
  if (spec.input_dim != 0 && spec.input_dim != layout.dim)
    throw SpecError("input_dim " + std::to_string(spec.input_dim) + " does not match the block layout (" +
                    std::to_string(layout.dim) + ")");
  if (spec.layer_widths.empty()) throw SpecError("layer_widths must name at least one hidden layer");
  for (int w : spec.layer_widths)
    if (w <= 0) throw SpecError("zero-width layer in layer_widths");
  const int hidden = static_cast<int>(spec.layer_widths.size());

  auto check_site = [&](SiteId s, const char* what) {
    if (s.layer < 1 || s.layer > hidden)
      throw SpecError(std::string(what) + " site " + site_str(s) + " must lie in a hidden layer");
    if (s.unit < 0 || s.unit >= spec.layer_widths[s.layer - 1])
      throw SpecError(std::string(what) + " site " + site_str(s) + " references a unit outside layer_widths");
  };
  for (auto s : spec.planted_predicate_sites) check_site(s, "planted_predicate_sites");
  for (auto s : spec.planted_cue_sites) check_site(s, "planted_cue_sites");
  for (auto s : spec.planted_predicate_sites)
    if (spec.planted_cue_sites.count(s))
      throw SpecError("planted_predicate_sites and planted_cue_sites must be disjoint (both contain " + site_str(s) + ")");
  check_pathway(spec.planted_predicate_sites, hidden, "planted_predicate_sites");
  check_pathway(spec.planted_cue_sites, hidden, "planted_cue_sites");

  if (spec.output_groups.empty()) throw SpecError("output_groups must be nonempty");
  std::set<int> seen;
  for (const auto& [label, idx] : spec.output_groups) {
    if (idx.empty()) throw SpecError("output group '" + label + "' is empty");
    for (int i : idx) {
      if (i < 0) throw SpecError("output group '" + label + "' has a negative index");
      if (!seen.insert(i).second) throw SpecError("output_groups must be pairwise disjoint (index " + std::to_string(i) + ")");
    }
  }
  if (spec.modality == Modality::text_only) {
    for (const auto& r : kTextRoles)
      if (!spec.output_groups.count(r))
        throw SpecError("text-only worlds need output groups 'incl', 'm' and 'f' (missing '" + r + "')");
  } else {
    for (const auto& v : spec.predicate_domain)
      if (!spec.output_groups.count(v))
        throw SpecError("bimodal worlds need one output group per attribute (missing '" + v + "')");
  }
  if (spec.shortcut_env && (*spec.shortcut_env < 0 || *spec.shortcut_env >= spec.num_environments))
    throw SpecError("shortcut_env out of range");
  if (!(spec.planted_weight > 0.0) || !std::isfinite(spec.planted_weight)) throw SpecError("planted_weight must be positive");
  if (!(spec.bias_scale >= 0.0)) throw SpecError("bias_scale must be nonnegative");
}

World build_world(const WorldSpec& spec) {
  validate(spec);
  World world;
  world.spec = spec;
  world.layout = layout_for(spec);
  world.spec.input_dim = world.layout.dim;
  world.spec.output_dim = derived_output_dim(spec);
  world.score = ScoreSpec{spec.modality, spec.output_groups, spec.predicate_domain};

  const int hidden = static_cast<int>(spec.layer_widths.size());
  auto& m = world.model;
  m.activation = spec.activation;
  m.widths.push_back(world.layout.dim);
  for (int w : spec.layer_widths) m.widths.push_back(w);
  m.widths.push_back(world.spec.output_dim);
  for (std::size_t l = 0; l + 1 < m.widths.size(); ++l) {
    m.weights.emplace_back(static_cast<std::size_t>(m.widths[l + 1]) * m.widths[l], 0.0);
    m.biases.emplace_back(m.widths[l + 1], 0.0);
  }

  const double w = spec.planted_weight;
  const auto pred = by_layer(spec.planted_predicate_sites, hidden);
  const auto cue = by_layer(spec.planted_cue_sites, hidden);
  const bool shortcut = spec.shortcut_env.has_value();
  const auto roles = role_cycle(spec);
  const int K = spec.num_environments;
  int code_bits = 1;
  while ((1 << code_bits) < K + 1) ++code_bits;

  Rng rng(derive_seed(spec.seed, 0x776f726c64ULL));
  auto set_w = [&](int from_layer, int to, int from, double v) {
    m.weights[from_layer][static_cast<std::size_t>(to) * m.widths[from_layer] + from] = v;
  };

  // role[l][k]: output-group label carried by the k-th planted unit of layer l.
  std::vector<std::vector<std::string>> pred_role(hidden + 1), cue_role(hidden + 1);
  // cue_src[l][k]: env-code bit of the k-th cue unit.
  std::vector<std::vector<int>> cue_bit(hidden + 1);

  for (int l = 1; l <= hidden; ++l) {
    const int width = m.widths[l];
    const int prev = m.widths[l - 1];
    std::set<int> planted_here(pred[l].begin(), pred[l].end());
    planted_here.insert(cue[l].begin(), cue[l].end());
    std::vector<int> free_prev;
    if (l >= 2) {
      std::set<int> planted_prev(pred[l - 1].begin(), pred[l - 1].end());
      planted_prev.insert(cue[l - 1].begin(), cue[l - 1].end());
      for (int u = 0; u < prev; ++u)
        if (!planted_prev.count(u)) free_prev.push_back(u);
    }
    for (std::size_t k = 0; k < pred[l].size(); ++k)
      pred_role[l].push_back(l == 1 ? roles[k % roles.size()] : pred_role[l - 1][k % pred[l - 1].size()]);
    for (std::size_t k = 0; k < cue[l].size(); ++k) {
      cue_role[l].push_back(l == 1 ? roles[k % roles.size()] : cue_role[l - 1][k % cue[l - 1].size()]);
      cue_bit[l].push_back(l == 1 ? static_cast<int>(k % code_bits) : cue_bit[l - 1][k % cue[l - 1].size()]);
    }

    for (int u = 0; u < width; ++u) {
      if (planted_here.count(u)) continue;
      // free unit
      if (l == 1) {
        for (int s = 0; s < spec.num_semantic; ++s) set_w(0, u, world.layout.semantic_offset + s, uniform_real(rng, -1.0, 1.0));
      } else if (!free_prev.empty()) {
        const double scale = 1.0 / std::sqrt(static_cast<double>(free_prev.size()));
        for (int f : free_prev) set_w(l - 1, u, f, scale * uniform_real(rng, -1.0, 1.0));
      }
      m.biases[l - 1][u] = spec.bias_scale * uniform_real(rng, -1.0, 1.0);
    }

    auto predicate_inputs = [&](int unit, const std::string& role) {
      for (int g = 0; g < static_cast<int>(spec.predicate_domain.size()); ++g) {
        const auto value_role = role_of_value(spec, g);
        double v = 0.0;
        if (!value_role.empty()) v = (value_role == role) ? w : -w;
        set_w(0, unit, world.layout.predicate_offset + g, v);
      }
      for (int s = 0; s < spec.num_semantic; ++s)
        set_w(0, unit, world.layout.semantic_offset + s, 0.1 * uniform_real(rng, -1.0, 1.0));
    };

    for (std::size_t k = 0; k < pred[l].size(); ++k) {
      const int u = pred[l][k];
      if (l == 1) predicate_inputs(u, pred_role[l][k]);
      else set_w(l - 1, u, pred[l - 1][k % pred[l - 1].size()], w);
    }
    for (std::size_t k = 0; k < cue[l].size(); ++k) {
      const int u = cue[l][k];
      if (l >= 2) {
        set_w(l - 1, u, cue[l - 1][k % cue[l - 1].size()], w);
        continue;
      }
      if (shortcut) {
        predicate_inputs(u, cue_role[l][k]);
        for (int e = 0; e < K; ++e)
          set_w(0, u, world.layout.nuisance_offset + e, e == *spec.shortcut_env ? 0.0 : -3.0 * w);
      } else {
        for (int s = 0; s < spec.num_semantic; ++s)
          set_w(0, u, world.layout.semantic_offset + s, 0.1 * uniform_real(rng, -1.0, 1.0));
        for (int e = 0; e < K; ++e) {
          const int code = ((e + 1) >> cue_bit[l][k]) & 1;
          set_w(0, u, world.layout.nuisance_offset + e, code ? w : -w);
        }
      }
    }
  }

  // Readout from layer H.
  {
    const int H = hidden;
    const int out = m.widths[H + 1];
    std::set<int> planted_last(pred[H].begin(), pred[H].end());
    planted_last.insert(cue[H].begin(), cue[H].end());
    std::vector<int> free_last;
    for (int u = 0; u < m.widths[H]; ++u)
      if (!planted_last.count(u)) free_last.push_back(u);
    const double scale = free_last.empty() ? 0.0 : 1.0 / std::sqrt(static_cast<double>(free_last.size()));
    for (int o = 0; o < out; ++o) {
      for (int f : free_last) set_w(H, o, f, scale * uniform_real(rng, -1.0, 1.0));
      m.biases[H][o] = spec.bias_scale * uniform_real(rng, -1.0, 1.0);
    }
    auto wire = [&](int unit, const std::string& role) {
      for (int o : spec.output_groups.at(role)) set_w(H, o, unit, w);
    };
    for (std::size_t k = 0; k < pred[H].size(); ++k) wire(pred[H][k], pred_role[H][k]);
    if (shortcut)
      for (std::size_t k = 0; k < cue[H].size(); ++k) wire(cue[H][k], cue_role[H][k]);
  }
  return world;
}

std::vector<double> encode_input(const PredicateInstance& z, int env, const World& world) {
  if (env < 0 || env >= world.num_environments())
    throw DomainError("environment " + std::to_string(env) + " out of range");
  if (z.z_sem < 0 || z.z_sem >= world.spec.num_semantic)
    throw DomainError("z_sem " + std::to_string(z.z_sem) + " out of range");
  if (z.z_g < 0 || z.z_g >= world.domain_size()) throw DomainError("z_g " + std::to_string(z.z_g) + " out of range");
  std::vector<double> x(world.layout.dim, 0.0);
  x[world.layout.semantic_offset + z.z_sem] = 1.0;
  x[world.layout.predicate_offset + z.z_g] = 1.0;
  x[world.layout.nuisance_offset + env] = 1.0;
  return x;
}

BimodalChannels encode_channels(const PredicateInstance& z, int env, const World& world) {
  const auto x = encode_input(z, env, world);
  const auto split = x.begin() + world.layout.predicate_block_end();
  return {std::vector<double>(x.begin(), split), std::vector<double>(split, x.end())};
}

double activate(Activation kind, double pre) noexcept {
  switch (kind) {
  case Activation::identity:
    return pre;
  case Activation::tanh:
    return std::tanh(pre);
  case Activation::relu:
    return pre > 0.0 ? pre : 0.0;
  }
  return pre;
}

double activate_derivative(Activation kind, double pre, double post) noexcept {
  switch (kind) {
  case Activation::identity:
    return 1.0;
  case Activation::tanh:
    return 1.0 - post * post;
  case Activation::relu:
    return pre > 0.0 ? 1.0 : 0.0;
  }
  return 1.0;
}

namespace {

void apply_pins(std::vector<double>& layer_values, int layer, std::span<const SitePin> pins) {
  for (const auto& p : pins)
    if (p.site.layer == layer) layer_values[p.site.unit] = p.value;
}

ActivationTrace run_from(const LowLevelModel& model, int layer, std::vector<double> start,
                         std::span<const SitePin> pins, std::optional<InputLabel> label) {
  const auto& k = kernels::active();
  ActivationTrace t;
  t.label = std::move(label);
  const int H = model.hidden_layers();
  t.sites.resize(H + 1);
  apply_pins(start, layer, pins);
  t.sites[layer] = std::move(start);
  for (int l = layer; l <= H; ++l) {
    std::vector<double> pre(model.widths[l + 1]);
    k.gemv(model.weights[l].data(), model.widths[l + 1], model.widths[l], t.sites[l].data(),
           model.biases[l].data(), pre.data());
    if (l == H) {
      t.logits = std::move(pre);
    } else {
      for (auto& v : pre) v = activate(model.activation, v);
      apply_pins(pre, l + 1, pins);
      t.sites[l + 1] = std::move(pre);
    }
  }
  return t;
}

} // namespace

ActivationTrace forward(const LowLevelModel& model, std::span<const double> x, std::span<const SitePin> pins,
                        std::optional<InputLabel> label) {
  if (static_cast<int>(x.size()) != model.input_dim())
    throw DomainError("input has length " + std::to_string(x.size()) + ", model expects " +
                      std::to_string(model.input_dim()));
  for (const auto& p : pins)
    if (!model.valid(p.site)) throw DomainError("pinned site is not valid for this model");
  return run_from(model, 0, std::vector<double>(x.begin(), x.end()), pins, std::move(label));
}

ActivationTrace forward_from(const LowLevelModel& model, int layer, std::span<const double> activation,
                             std::optional<InputLabel> label) {
  if (layer < 0 || layer >= model.site_layers()) throw DomainError("forward_from: layer out of range");
  if (static_cast<int>(activation.size()) != model.widths[layer]) throw DomainError("forward_from: width mismatch");
  auto t = run_from(model, layer, std::vector<double>(activation.begin(), activation.end()), {}, std::move(label));
  return t;
}

std::vector<std::vector<double>> backprop(const LowLevelModel& model, const ActivationTrace& trace,
                                          std::span<const double> dscore_dlogits, int from_layer) {
  const auto& k = kernels::active();
  const int H = model.hidden_layers();
  std::vector<std::vector<double>> grads(H + 1);
  // gradient w.r.t. the pre-activations of layer l+1
  std::vector<double> delta(dscore_dlogits.begin(), dscore_dlogits.end());
  for (int l = H; l >= from_layer; --l) {
    std::vector<double> g(model.widths[l]);
    k.gemv_t(model.weights[l].data(), model.widths[l + 1], model.widths[l], delta.data(), g.data());
    grads[l] = g;
    if (l == from_layer) break;
    // to pre-activation of layer l
    const auto& post = trace.sites[l];
    std::vector<double> pre(model.widths[l]);
    if (model.activation == Activation::relu) {
      // relu derivative depends only on the sign of the pre-activation, which
      // matches the sign of the post value (0 for inactive units).
      for (int u = 0; u < model.widths[l]; ++u) pre[u] = g[u] * (post[u] > 0.0 ? 1.0 : 0.0);
    } else {
      for (int u = 0; u < model.widths[l]; ++u) pre[u] = g[u] * activate_derivative(model.activation, 0.0, post[u]);
    }
    delta = std::move(pre);
  }
  return grads;
}

double log_sum_exp(std::span<const double> logits, std::span<const int> indices) {
  double hi = -std::numeric_limits<double>::infinity();
  for (int i : indices) hi = std::max(hi, logits[i]);
  if (!std::isfinite(hi)) return hi;
  double s = 0.0;
  for (int i : indices) s += std::exp(logits[i] - hi);
  return hi + std::log(s);
}

namespace {

const std::vector<int>& group_or_throw(const ScoreSpec& spec, const std::string& label) {
  auto it = spec.groups.find(label);
  if (it == spec.groups.end() || it->second.empty())
    throw ScoringError("Lexicalization failure", "output group '" + label + "' is empty");
  return it->second;
}

std::vector<int> all_indices(std::size_t n) {
  std::vector<int> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

const std::string& correct_attribute(const ScoreSpec& spec, const std::optional<InputLabel>& label) {
  if (!label) throw DomainError("bimodal task score needs the input's predicate label");
  if (label->z.z_g < 0 || label->z.z_g >= static_cast<int>(spec.predicate_domain.size()))
    throw DomainError("label z_g out of range");
  return spec.predicate_domain[label->z.z_g];
}

} // namespace

double score_from_logits(std::span<const double> logits, const ScoreSpec& spec,
                         const std::optional<InputLabel>& label) {
  for (double v : logits)
    if (!std::isfinite(v)) throw DomainError("non-finite logit");
  if (spec.modality == Modality::text_only) {
    const double li = log_sum_exp(logits, group_or_throw(spec, "incl"));
    const double lm = log_sum_exp(logits, group_or_throw(spec, "m"));
    const double lf = log_sum_exp(logits, group_or_throw(spec, "f"));
    return li - std::max(lm, lf);
  }
  const auto& target = group_or_throw(spec, correct_attribute(spec, label));
  const auto all = all_indices(logits.size());
  return log_sum_exp(logits, target) - log_sum_exp(logits, all);
}

double task_score(const ActivationTrace& trace, const ScoreSpec& spec) {
  return score_from_logits(trace.logits, spec, trace.label);
}

std::vector<double> score_gradient(std::span<const double> logits, const ScoreSpec& spec,
                                   const std::optional<InputLabel>& label) {
  std::vector<double> g(logits.size(), 0.0);
  auto add_softmax = [&](const std::vector<int>& idx, double sign) {
    const double lse = log_sum_exp(logits, idx);
    for (int i : idx) g[i] += sign * std::exp(logits[i] - lse);
  };
  if (spec.modality == Modality::text_only) {
    const auto& gi = group_or_throw(spec, "incl");
    const auto& gm = group_or_throw(spec, "m");
    const auto& gf = group_or_throw(spec, "f");
    add_softmax(gi, 1.0);
    add_softmax(log_sum_exp(logits, gm) >= log_sum_exp(logits, gf) ? gm : gf, -1.0);
    return g;
  }
  add_softmax(group_or_throw(spec, correct_attribute(spec, label)), 1.0);
  add_softmax(all_indices(logits.size()), -1.0);
  return g;
}

GroundTruth ground_truth(const World& world) {
  return {Circuit({world.spec.planted_predicate_sites.begin(), world.spec.planted_predicate_sites.end()}, "planted-predicate"),
          Circuit({world.spec.planted_cue_sites.begin(), world.spec.planted_cue_sites.end()}, "planted-cue")};
}

int predicate_level(const World& world, int z_g) {
  if (world.spec.modality == Modality::bimodal) return 0;
  const auto& v = world.spec.predicate_domain.at(z_g);
  if (v == "incl") return 1;
  if (v == "m" || v == "f") return -1;
  return 0;
}

int predicted_direction(const World& world, int base_g, int source_g) {
  if (base_g == source_g) return 0;
  if (world.spec.modality == Modality::bimodal) return -1;
  const int d = predicate_level(world, source_g) - predicate_level(world, base_g);
  return (d > 0) - (d < 0);
}

bool is_knockout_target(const World& world, int z_g) {
  if (world.spec.modality == Modality::bimodal) return true;
  int top = -2;
  for (int g = 0; g < world.domain_size(); ++g) top = std::max(top, predicate_level(world, g));
  return predicate_level(world, z_g) == top;
}

std::vector<double> site_values(const ActivationTrace& trace, const Circuit& circuit) {
  std::vector<double> v;
  v.reserve(circuit.size());
  for (auto s : circuit.sites) v.push_back(trace.at(s));
  return v;
}

std::string to_string(Activation a) {
  switch (a) {
  case Activation::identity:
    return "identity";
  case Activation::tanh:
    return "tanh";
  case Activation::relu:
    return "relu";
  }
  return "?";
}

std::string to_string(Modality m) { return m == Modality::text_only ? "text-only" : "bimodal"; }

Activation activation_from_string(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  throw ConfigError("unknown activation_kind '" + s + "'");
}

Modality modality_from_string(const std::string& s) {
  if (s == "text-only") return Modality::text_only;
  if (s == "bimodal") return Modality::bimodal;
  throw ConfigError("unknown modality '" + s + "'");
}

} // namespace tri
