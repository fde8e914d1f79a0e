#include "tri/error.hpp"
#include "tri/harness.hpp"
#include "tri/rng.hpp"
#include "tri/serialize.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

namespace tri {

void assign_planted_sites(WorldSpec& spec, int predicate_per_layer, int cue_per_layer, std::uint64_t seed) {
  spec.planted_predicate_sites.clear();
  spec.planted_cue_sites.clear();
  for (std::size_t i = 0; i < spec.layer_widths.size(); ++i) {
    const int layer = static_cast<int>(i) + 1;
    const int width = spec.layer_widths[i];
    if (predicate_per_layer + cue_per_layer > width)
      throw SpecError("layer " + std::to_string(layer) + " is too narrow for the requested planted sites");
    std::vector<int> units(width);
    std::iota(units.begin(), units.end(), 0);
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(layer)));
    for (int j = 0; j < predicate_per_layer + cue_per_layer; ++j)
      std::swap(units[j], units[j + uniform_index(rng, width - j)]);
    for (int j = 0; j < predicate_per_layer; ++j) spec.planted_predicate_sites.insert({layer, units[j]});
    for (int j = 0; j < cue_per_layer; ++j) spec.planted_cue_sites.insert({layer, units[predicate_per_layer + j]});
  }
}

WorldSpec micro_world_spec(std::uint64_t seed, int predicate_sites, int cue_sites) {
  WorldSpec s;
  s.num_environments = 3;
  s.predicate_domain = {"m", "f", "incl", "amb"};
  s.num_semantic = 6;
  s.nuisance_dim = 3;
  s.layer_widths = {24};
  s.activation = Activation::tanh;
  s.output_groups = {{"incl", {0, 1}}, {"m", {2, 3}}, {"f", {4, 5}}};
  s.output_dim = 8;
  s.modality = Modality::text_only;
  s.seed = seed;
  assign_planted_sites(s, predicate_sites, cue_sites, derive_seed(seed, 0x73697465ULL));
  return s;
}

WorldSpec shortcut_world_spec(std::uint64_t seed, int home_env) {
  auto s = micro_world_spec(seed);
  s.shortcut_env = home_env;
  return s;
}

WorldSpec bimodal_world_spec(std::uint64_t seed, int attributes) {
  WorldSpec s;
  s.num_environments = 3;
  s.predicate_domain.clear();
  s.output_groups.clear();
  for (int a = 0; a < attributes; ++a) {
    const std::string name = "attr" + std::to_string(a);
    s.predicate_domain.push_back(name);
    s.output_groups[name] = {2 * a, 2 * a + 1};
  }
  s.num_semantic = 6;
  s.nuisance_dim = 3;
  s.layer_widths = {24};
  s.output_dim = 2 * attributes + 2;
  s.modality = Modality::bimodal;
  s.seed = seed;
  assign_planted_sites(s, attributes, 2, derive_seed(seed, 0x73697465ULL));
  return s;
}

Scenario micro_scenario(std::uint64_t seed) {
  Scenario s;
  s.name = "micro-" + std::to_string(seed);
  s.world = micro_world_spec(seed);
  s.master_seed = derive_seed(seed, 0x6d6173ULL);
  return s;
}

void Scenario::validate() const {
  try {
    tri::validate(world);
  } catch (const SpecError& e) {
    throw ConfigError(std::string("world: ") + e.what());
  }
  if (n_interventions < 1) throw ConfigError("n_interventions must be >= 1");
  if (!(a0 > 0.0) || !(b0 > 0.0)) throw ConfigError("prior parameters must be positive");
  if (!(ci_level > 0.0 && ci_level < 1.0)) throw ConfigError("ci_level must lie in (0, 1)");
  if (!(thresholds.alpha > 0.0 && thresholds.alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
  if (thresholds.eta && !(*thresholds.eta > 0.0 && *thresholds.eta < 1.0)) throw ConfigError("eta must lie in (0, 1)");
  if (!thresholds.eta && placebos < kMinPlacebos)
    throw ConfigError("placebos must be >= " + std::to_string(kMinPlacebos) + " when eta is calibrated");
  if (!(ridge >= 0.0)) throw ConfigError("ridge must be nonnegative");
  if (discovery.steps < 1) throw ConfigError("discovery.steps must be >= 1");
  if (baseline_env < 0 || baseline_env >= world.num_environments) throw ConfigError("baseline_env out of range");
  (void)distribution.normalized();
  if (world.planted_predicate_sites.empty() &&
      !(thresholds.tau_n && thresholds.tau_s && thresholds.epsilon && thresholds.delta))
    throw ConfigError("worlds without a planted predicate pathway need explicit tau_N, tau_S, epsilon and delta");

  std::set<int> envs;
  std::set<int> values;
  const int G = static_cast<int>(world.predicate_domain.size());
  if (families.empty()) {
    for (int e = 0; e < world.num_environments; ++e) envs.insert(e);
    for (int g = 0; g < G; ++g) values.insert(g);
  }
  for (const auto& f : families) {
    if (f.z.z_sem < 0 || f.z.z_sem >= world.num_semantic) throw ConfigError("family z_sem out of range");
    if (f.z.z_g < 0 || f.z.z_g >= G) throw ConfigError("family z_g out of range");
    std::set<int> fe(f.envs.begin(), f.envs.end());
    if (fe.size() < 2) throw ConfigError("every reference family must span >= 2 environments");
    for (int e : f.envs) {
      if (e < 0 || e >= world.num_environments) throw ConfigError("family environment out of range");
      envs.insert(e);
    }
    values.insert(f.z.z_g);
  }
  if (static_cast<int>(envs.size()) != world.num_environments)
    throw ConfigError("the dataset must span every declared environment");
  // Every predicate value needs a swap sibling: some other value with a
  // predicted direction.
  WorldSpec probe = world;
  World tmp;
  tmp.spec = probe;
  for (int g : values) {
    bool ok = false;
    for (int h = 0; h < G && !ok; ++h) ok = predicted_direction(tmp, g, h) != 0;
    if (!ok) throw ConfigError("predicate value '" + world.predicate_domain[g] + "' has no swap sibling");
  }
}

namespace {

const std::set<std::string> kScenarioKeys{"schema_version", "name",       "world",     "families",  "thresholds",
                                          "distribution",   "ablation",   "n_interventions", "prior", "ci_level",
                                          "master_seed",    "placebos",   "ridge",     "discovery", "baselines",
                                          "stress"};

WorldSpec preset_spec(const std::string& name, std::uint64_t seed, const Json& w) {
  if (name == "micro") return micro_world_spec(seed);
  if (name == "shortcut") return shortcut_world_spec(seed, w.value("shortcut_env", 0));
  if (name == "bimodal") return bimodal_world_spec(seed, w.value("attributes", 3));
  throw ConfigError("unknown world preset '" + name + "'");
}

WorldSpec world_from_config(const Json& w) {
  if (!w.is_object()) throw ConfigError("'world' must be an object");
  Json merged;
  if (w.contains("preset")) {
    merged = to_json(preset_spec(w.at("preset").get<std::string>(), w.value("seed", std::uint64_t{0}), w));
    // Planted sites follow the preset unless listed explicitly.
    for (const auto& [k, v] : w.items())
      if (k != "preset" && k != "attributes" && k != "auto_sites") merged[k] = v;
  } else {
    merged = w;
    merged.erase("auto_sites");
  }
  WorldSpec spec = world_spec_from_json(merged);
  if (w.contains("auto_sites")) {
    const auto& a = w.at("auto_sites");
    assign_planted_sites(spec, a.value("predicate_per_layer", 3), a.value("cue_per_layer", 2),
                         derive_seed(spec.seed, 0x73697465ULL));
  }
  return spec;
}

double num(const Json& j, const char* key) {
  if (!j.at(key).is_number()) throw ConfigError(std::string("'") + key + "' must be a number");
  return j.at(key).get<double>();
}

} // namespace

Scenario scenario_from_json(const Json& j) {
  try {
    if (!j.is_object()) throw ConfigError("scenario must be a JSON object");
    for (const auto& [k, _] : j.items())
      if (!kScenarioKeys.count(k)) throw ConfigError("unknown scenario key '" + k + "'");
    if (j.value("schema_version", 0) != kScenarioSchemaVersion)
      throw ConfigError("unsupported scenario schema_version (expected " + std::to_string(kScenarioSchemaVersion) + ")");
    Scenario s;
    s.name = j.value("name", s.name);
    if (!j.contains("world")) throw ConfigError("scenario is missing 'world'");
    s.world = world_from_config(j.at("world"));
    if (j.contains("families"))
      for (const auto& f : j.at("families")) {
        FamilySpec fs;
        fs.z.z_sem = f.at("z_sem").get<int>();
        const auto& g = f.at("z_g");
        if (g.is_string()) {
          auto it = std::find(s.world.predicate_domain.begin(), s.world.predicate_domain.end(), g.get<std::string>());
          if (it == s.world.predicate_domain.end()) throw ConfigError("family z_g '" + g.get<std::string>() + "' is not in the predicate domain");
          fs.z.z_g = static_cast<int>(it - s.world.predicate_domain.begin());
        } else {
          fs.z.z_g = g.get<int>();
        }
        fs.envs = f.at("envs").get<std::vector<int>>();
        s.families.push_back(std::move(fs));
      }
    if (j.contains("thresholds")) {
      const auto& t = j.at("thresholds");
      auto opt = [&](const char* key, std::optional<double>& out) {
        if (t.contains(key) && !(t.at(key).is_string() && t.at(key).get<std::string>() == "auto")) out = num(t, key);
      };
      opt("tau_N", s.thresholds.tau_n);
      opt("tau_S", s.thresholds.tau_s);
      opt("epsilon", s.thresholds.epsilon);
      opt("delta", s.thresholds.delta);
      opt("eta", s.thresholds.eta);
      if (t.contains("alpha")) s.thresholds.alpha = num(t, "alpha");
    }
    if (j.contains("distribution")) {
      const auto& d = j.at("distribution");
      for (const auto& [k, v] : d.items()) {
        const auto kind = intervention_kind_from_string(k);
        if (!v.is_number()) throw ConfigError("distribution weight for '" + k + "' must be a number");
        s.distribution.weights[static_cast<int>(kind)] = v.get<double>();
      }
    }
    if (j.contains("ablation")) s.ablation = ablation_from_string(j.at("ablation").get<std::string>());
    s.n_interventions = j.value("n_interventions", s.n_interventions);
    if (j.contains("prior")) {
      const auto& p = j.at("prior");
      if (p.is_string()) {
        const auto name = p.get<std::string>();
        if (name == "uniform") s.a0 = s.b0 = 1.0;
        else if (name == "jeffreys") s.a0 = s.b0 = 0.5;
        else throw ConfigError("unknown prior '" + name + "'");
      } else {
        s.a0 = num(p, "a0");
        s.b0 = num(p, "b0");
      }
    }
    s.ci_level = j.value("ci_level", s.ci_level);
    s.master_seed = j.value("master_seed", s.master_seed);
    s.placebos = j.value("placebos", s.placebos);
    s.ridge = j.value("ridge", s.ridge);
    if (j.contains("discovery")) {
      const auto& d = j.at("discovery");
      s.discovery.steps = d.value("steps", s.discovery.steps);
      s.discovery.first_layer = d.value("first_layer", s.discovery.first_layer);
      if (d.contains("baseline")) {
        const auto b = d.at("baseline").get<std::string>();
        if (b == "zero") s.discovery.baseline = BaselineKind::zero;
        else if (b == "mean") s.discovery.baseline = BaselineKind::mean;
        else throw ConfigError("unknown discovery baseline '" + b + "'");
      }
      s.discovery.keep_threshold = d.value("keep_threshold", s.discovery.keep_threshold);
      s.discovery.probe_ridge = d.value("probe_ridge", s.discovery.probe_ridge);
    }
    if (j.contains("baselines")) {
      const auto& b = j.at("baselines");
      s.baseline_single_env = b.value("single_env", s.baseline_single_env);
      s.baseline_faithfulness = b.value("faithfulness", s.baseline_faithfulness);
      s.baseline_env = b.value("baseline_env", s.baseline_env);
    }
    if (j.contains("stress")) {
      const auto& st = j.at("stress");
      s.stress = st.value("enabled", s.stress);
      if (st.contains("kind")) s.stress_kind = violation_kind_from_string(st.at("kind").get<std::string>());
    }
    s.validate();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("scenario: ") + e.what());
  } catch (const DomainError& e) {
    throw ConfigError(std::string("scenario: ") + e.what());
  } catch (const SpecError& e) {
    throw ConfigError(std::string("scenario: ") + e.what());
  }
}

Json to_json(const Scenario& s) {
  Json fam = Json::array();
  for (const auto& f : s.families) fam.push_back({{"z_sem", f.z.z_sem}, {"z_g", f.z.z_g}, {"envs", f.envs}});
  Json th = Json::object();
  auto put = [&](const char* k, const std::optional<double>& v) { th[k] = v ? Json(*v) : Json("auto"); };
  put("tau_N", s.thresholds.tau_n);
  put("tau_S", s.thresholds.tau_s);
  put("epsilon", s.thresholds.epsilon);
  put("delta", s.thresholds.delta);
  put("eta", s.thresholds.eta);
  th["alpha"] = s.thresholds.alpha;
  Json dist = Json::object();
  for (auto k : kAllKinds) dist[to_string(k)] = s.distribution.weight(k);
  Json j = {{"schema_version", kScenarioSchemaVersion},
            {"name", s.name},
            {"world", to_json(s.world)},
            {"families", fam},
            {"thresholds", th},
            {"distribution", dist},
            {"ablation", to_string(s.ablation)},
            {"n_interventions", s.n_interventions},
            {"prior", {{"a0", s.a0}, {"b0", s.b0}}},
            {"ci_level", s.ci_level},
            {"master_seed", s.master_seed},
            {"placebos", s.placebos},
            {"ridge", s.ridge},
            {"discovery",
             {{"steps", s.discovery.steps},
              {"first_layer", s.discovery.first_layer},
              {"baseline", s.discovery.baseline == BaselineKind::mean ? "mean" : "zero"},
              {"keep_threshold", s.discovery.keep_threshold},
              {"probe_ridge", s.discovery.probe_ridge}}},
            {"baselines",
             {{"single_env", s.baseline_single_env},
              {"faithfulness", s.baseline_faithfulness},
              {"baseline_env", s.baseline_env}}},
            {"stress", {{"enabled", s.stress}, {"kind", to_string(s.stress_kind)}}}};
  return j;
}

Scenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open scenario file '" + path + "'");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("scenario file '" + path + "' is not valid JSON: " + e.what());
  }
  return scenario_from_json(j);
}

} // namespace tri
