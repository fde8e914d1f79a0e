#include "tri/interventions.hpp"

#include "tri/error.hpp"
#include "tri/rng.hpp"

#include <cmath>

namespace tri {

Ablation ablation_from_string(const std::string& s) {
  if (s == "zero") return Ablation::zero;
  if (s == "mean") return Ablation::mean;
  if (s == "resample") return Ablation::resample;
  throw DomainError("unknown ablation '" + s + "'");
}

std::string to_string(Ablation a) {
  switch (a) {
  case Ablation::zero:
    return "zero";
  case Ablation::mean:
    return "mean";
  case Ablation::resample:
    return "resample";
  }
  return "?";
}

NullSource NullSource::zero() { return NullSource{}; }

NullSource NullSource::mean(const LowLevelModel& model, std::span<const std::vector<double>> context) {
  if (context.empty()) throw DomainError("mean ablation needs a nonempty context set");
  NullSource ns;
  ns.kind_ = Ablation::mean;
  ns.means_.resize(model.site_layers());
  for (int l = 0; l < model.site_layers(); ++l) ns.means_[l].assign(model.widths[l], 0.0);
  for (const auto& x : context) {
    auto t = forward(model, x);
    for (int l = 0; l < model.site_layers(); ++l)
      for (int u = 0; u < model.widths[l]; ++u) ns.means_[l][u] += t.sites[l][u];
  }
  for (auto& layer : ns.means_)
    for (auto& v : layer) v /= static_cast<double>(context.size());
  return ns;
}

NullSource NullSource::resample(const LowLevelModel& model, std::span<const std::vector<double>> context) {
  if (context.empty()) throw DomainError("resample ablation needs a nonempty context set");
  NullSource ns;
  ns.kind_ = Ablation::resample;
  for (const auto& x : context) ns.traces_.push_back(forward(model, x));
  return ns;
}

std::vector<double> NullSource::values(const Circuit& circuit, std::uint64_t seed) const {
  std::vector<double> v(circuit.size(), 0.0);
  switch (kind_) {
  case Ablation::zero:
    break;
  case Ablation::mean:
    for (std::size_t i = 0; i < circuit.size(); ++i) v[i] = means_[circuit.sites[i].layer][circuit.sites[i].unit];
    break;
  case Ablation::resample: {
    Rng rng(derive_seed(seed, 0x72657361ULL));
    const auto& t = traces_[uniform_index(rng, traces_.size())];
    for (std::size_t i = 0; i < circuit.size(); ++i) v[i] = t.at(circuit.sites[i]);
    break;
  }
  }
  return v;
}

void check_circuit(const LowLevelModel& model, const Circuit& circuit) {
  for (auto s : circuit.sites)
    if (!model.valid(s))
      throw DomainError("circuit '" + circuit.label + "' has site (" + std::to_string(s.layer) + "," +
                        std::to_string(s.unit) + ") outside the model");
}

namespace {

std::vector<SitePin> make_pins(const Circuit& c, std::span<const double> values) {
  std::vector<SitePin> pins;
  pins.reserve(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) pins.push_back({c.sites[i], values[i]});
  return pins;
}

} // namespace

ActivationTrace apply_knockout(const LowLevelModel& model, std::span<const double> x, const Circuit& circuit,
                               const NullSource& null_source, std::uint64_t seed, std::optional<InputLabel> label) {
  check_circuit(model, circuit);
  const auto values = null_source.values(circuit, seed);
  const auto pins = make_pins(circuit, values);
  return forward(model, x, pins, std::move(label));
}

std::vector<double> patch_source_values(const LowLevelModel& model, std::span<const double> x_s,
                                        const Circuit& circuit_b, const Circuit& circuit_s, const TranslationMap* map) {
  check_circuit(model, circuit_b);
  check_circuit(model, circuit_s);
  const auto src = forward(model, x_s);
  auto values = site_values(src, circuit_s);
  if (map) {
    if (map->cols != static_cast<int>(circuit_s.size()) || map->rows != static_cast<int>(circuit_b.size()))
      throw TypeIncompatibleError("translation map shape does not match the source/base circuits");
    values = map->apply(values);
  } else if (circuit_s.size() != circuit_b.size()) {
    throw TypeIncompatibleError("source circuit has " + std::to_string(circuit_s.size()) + " sites, base circuit " +
                                std::to_string(circuit_b.size()) + "; a translation map is required");
  }
  return values;
}

ActivationTrace patch_values(const LowLevelModel& model, std::span<const double> x_b, const Circuit& circuit_b,
                             std::span<const double> values, std::optional<InputLabel> base_label) {
  if (values.size() != circuit_b.size()) throw TypeIncompatibleError("patch values do not match the base circuit");
  const auto pins = make_pins(circuit_b, values);
  return forward(model, x_b, pins, std::move(base_label));
}

ActivationTrace apply_patch(const LowLevelModel& model, std::span<const double> x_b, std::span<const double> x_s,
                            const Circuit& circuit_b, const Circuit& circuit_s, const TranslationMap* map,
                            std::optional<InputLabel> base_label) {
  const auto values = patch_source_values(model, x_s, circuit_b, circuit_s, map);
  return patch_values(model, x_b, circuit_b, values, std::move(base_label));
}

double delta_ko(const World& world, const LabeledInput& in, const Circuit& circuit, const NullSource& null_source,
                std::uint64_t seed) {
  const double clean = task_score(forward(world.model, in.x, {}, in.label), world.score);
  const double ko = task_score(apply_knockout(world.model, in.x, circuit, null_source, seed, in.label), world.score);
  return clean - ko;
}

double delta_swap(const World& world, const LabeledInput& base, const LabeledInput& source, const Circuit& circuit_b,
                  const Circuit& circuit_s, const TranslationMap* map) {
  const double clean = task_score(forward(world.model, base.x, {}, base.label), world.score);
  const double patched =
      task_score(apply_patch(world.model, base.x, source.x, circuit_b, circuit_s, map, base.label), world.score);
  return patched - clean;
}

double delta_cue(const World& world, const LabeledInput& base, const LabeledInput& source, const Circuit& cue_circuit,
                 const TranslationMap* map) {
  return delta_swap(world, base, source, cue_circuit, cue_circuit, map);
}

double on_manifold_distance(const TranslationMap* map, std::span<const double> a_source, std::span<const double> a_base) {
  std::vector<double> mapped;
  if (map) {
    mapped = map->apply(a_source);
  } else {
    mapped.assign(a_source.begin(), a_source.end());
  }
  if (mapped.size() != a_base.size()) throw DomainError("on_manifold_distance: dimension mismatch");
  double ss = 0.0;
  for (std::size_t i = 0; i < mapped.size(); ++i) ss += (mapped[i] - a_base[i]) * (mapped[i] - a_base[i]);
  return std::sqrt(ss);
}

} // namespace tri
