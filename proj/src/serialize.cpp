#include "tri/serialize.hpp"

#include "tri/error.hpp"

#include <iomanip>

namespace tri {

Json to_json(const SiteId& s) { return Json::array({s.layer, s.unit}); }

Json to_json(const Circuit& c) {
  Json sites = Json::array();
  for (auto s : c.sites) sites.push_back(to_json(s));
  return {{"label", c.label}, {"sites", sites}};
}

namespace {

SiteId site_from_json(const Json& j) {
  if (!j.is_array() || j.size() != 2) throw ConfigError("a site must be a [layer, unit] pair");
  return {j.at(0).get<int>(), j.at(1).get<int>()};
}

std::set<SiteId> site_set(const Json& j) {
  std::set<SiteId> out;
  for (const auto& s : j) out.insert(site_from_json(s));
  return out;
}

} // namespace

Circuit circuit_from_json(const Json& j) {
  std::vector<SiteId> sites;
  for (const auto& s : j.at("sites")) sites.push_back(site_from_json(s));
  return Circuit(std::move(sites), j.value("label", std::string{}));
}

Json to_json(const WorldSpec& spec) {
  Json pred = Json::array(), cue = Json::array();
  for (auto s : spec.planted_predicate_sites) pred.push_back(to_json(s));
  for (auto s : spec.planted_cue_sites) cue.push_back(to_json(s));
  Json groups = Json::object();
  for (const auto& [k, v] : spec.output_groups) groups[k] = v;
  Json j = {{"num_environments", spec.num_environments},
            {"predicate_domain", spec.predicate_domain},
            {"num_semantic", spec.num_semantic},
            {"nuisance_dim", spec.nuisance_dim},
            {"input_dim", spec.input_dim},
            {"layer_widths", spec.layer_widths},
            {"activation", to_string(spec.activation)},
            {"planted_predicate_sites", pred},
            {"planted_cue_sites", cue},
            {"output_groups", groups},
            {"output_dim", spec.output_dim},
            {"modality", to_string(spec.modality)},
            {"seed", spec.seed},
            {"planted_weight", spec.planted_weight},
            {"bias_scale", spec.bias_scale}};
  j["shortcut_env"] = spec.shortcut_env ? Json(*spec.shortcut_env) : Json(nullptr);
  return j;
}

WorldSpec world_spec_from_json(const Json& j) {
  try {
    WorldSpec s;
    s.num_environments = j.value("num_environments", s.num_environments);
    if (j.contains("predicate_domain")) s.predicate_domain = j.at("predicate_domain").get<std::vector<std::string>>();
    s.num_semantic = j.value("num_semantic", s.num_semantic);
    s.nuisance_dim = j.value("nuisance_dim", s.nuisance_dim);
    s.input_dim = j.value("input_dim", s.input_dim);
    if (j.contains("layer_widths")) s.layer_widths = j.at("layer_widths").get<std::vector<int>>();
    if (j.contains("activation")) s.activation = activation_from_string(j.at("activation").get<std::string>());
    if (j.contains("planted_predicate_sites")) s.planted_predicate_sites = site_set(j.at("planted_predicate_sites"));
    if (j.contains("planted_cue_sites")) s.planted_cue_sites = site_set(j.at("planted_cue_sites"));
    if (j.contains("output_groups"))
      for (const auto& [k, v] : j.at("output_groups").items()) s.output_groups[k] = v.get<std::vector<int>>();
    s.output_dim = j.value("output_dim", s.output_dim);
    if (j.contains("modality")) s.modality = modality_from_string(j.at("modality").get<std::string>());
    s.seed = j.value("seed", s.seed);
    s.planted_weight = j.value("planted_weight", s.planted_weight);
    s.bias_scale = j.value("bias_scale", s.bias_scale);
    if (j.contains("shortcut_env") && !j.at("shortcut_env").is_null()) s.shortcut_env = j.at("shortcut_env").get<int>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("world spec: ") + e.what());
  }
}

Json world_snapshot(const World& world) {
  Json layers = Json::array();
  for (std::size_t l = 0; l < world.model.weights.size(); ++l)
    layers.push_back({{"rows", world.model.widths[l + 1]},
                      {"cols", world.model.widths[l]},
                      {"weights", world.model.weights[l]},
                      {"bias", world.model.biases[l]}});
  return {{"snapshot_version", kWorldSnapshotVersion},
          {"spec", to_json(world.spec)},
          {"widths", world.model.widths},
          {"activation", to_string(world.model.activation)},
          {"layers", layers}};
}

World world_from_snapshot(const Json& j) {
  if (j.value("snapshot_version", 0) != kWorldSnapshotVersion) throw ConfigError("unsupported world snapshot version");
  World w = build_world(world_spec_from_json(j.at("spec")));
  const auto widths = j.at("widths").get<std::vector<int>>();
  if (widths != w.model.widths) throw ConfigError("snapshot widths disagree with its spec");
  const auto& layers = j.at("layers");
  for (std::size_t l = 0; l < layers.size() && l < w.model.weights.size(); ++l) {
    w.model.weights[l] = layers[l].at("weights").get<std::vector<double>>();
    w.model.biases[l] = layers[l].at("bias").get<std::vector<double>>();
  }
  return w;
}

Json to_json(const TranslationMap& m) {
  return {{"source_env", m.source_env}, {"target_env", m.target_env}, {"rows", m.rows},
          {"cols", m.cols},             {"matrix", m.matrix},         {"bias", m.bias},
          {"train_error", m.train_error}, {"holdout_error", m.holdout_error},
          {"fit_pairs", m.fit_pair_hashes.size()}};
}

Json to_json(const ReferenceFamily& f) {
  Json members = Json::array();
  for (const auto& m : f.members) members.push_back({{"env", m.env}, {"hash", m.hash()}});
  return {{"anchor", {{"z_sem", f.anchor.z_sem}, {"z_g", f.anchor.z_g}}}, {"quality", f.quality}, {"members", members}};
}

Json to_json(const Thresholds& t) {
  return {{"tau_N", t.tau_n}, {"tau_S", t.tau_s}, {"epsilon", t.epsilon},
          {"delta", t.delta}, {"eta", t.eta},     {"alpha", t.alpha}};
}

Json to_json(const TriangulationReport& r) {
  Json per_env = Json::object();
  for (const auto& [e, s] : r.per_env)
    per_env[std::to_string(e)] = {{"n", s.n}, {"k", s.k}, {"t_hat", s.t_hat}, {"untested", s.untested}};
  Json per_family = Json::object();
  for (const auto& [k, t] : r.per_family) per_family[to_string(k)] = {{"n", t.n}, {"k", t.k}};
  Json single = Json::object();
  for (const auto& [e, t] : r.single_env) single[std::to_string(e)] = {{"n", t.n}, {"k", t.k}};
  Json tax = Json::object();
  for (const auto& [k, v] : r.failure_taxonomy) tax[k] = v;
  return {{"schema_version", kReportSchemaVersion},
          {"mechanism", r.mechanism},
          {"n", r.n},
          {"k", r.k},
          {"t_hat", r.t_hat},
          {"per_env", per_env},
          {"per_family", per_family},
          {"single_env", single},
          {"posterior", {{"a", r.posterior.a}, {"b", r.posterior.b}, {"mean", r.posterior.mean()}}},
          {"credible_interval", {{"level", r.ci_level}, {"low", r.credible_interval.first}, {"high", r.credible_interval.second}}},
          {"decision", to_string(r.decision)},
          {"eta_used", r.eta_used},
          {"min_env_score", r.min_env_score},
          {"gate_statistic", r.gate_statistic},
          {"failure_taxonomy", tax},
          {"class_label", r.class_label}};
}

Json to_json(const InterventionRecord& rec) {
  const auto& I = rec.intervention;
  Json j = {{"index", I.index},
            {"kind", to_string(I.kind)},
            {"seed", I.seed},
            {"base", I.base},
            {"base_env", I.base_env}};
  j["source"] = I.source ? Json(*I.source) : Json(nullptr);
  j["source_env"] = I.source_env;
  j["direction"] = I.predicted_direction;
  j["success"] = rec.outcome.success;
  j["delta"] = rec.outcome.delta;
  j["distortion"] = rec.outcome.distortion;
  j["tag"] = to_string(rec.outcome.tag);
  return j;
}

void write_report_csv_header(std::ostream& os) {
  os << "mechanism,n,k,t_hat,min_env_score,posterior_a,posterior_b,ci_low,ci_high,decision,eta_used,class_label\n";
}

void write_report_csv_row(std::ostream& os, const TriangulationReport& r) {
  os << std::setprecision(17) << r.mechanism << ',' << r.n << ',' << r.k << ',' << r.t_hat << ',' << r.min_env_score
     << ',' << r.posterior.a << ',' << r.posterior.b << ',' << r.credible_interval.first << ','
     << r.credible_interval.second << ',' << to_string(r.decision) << ',' << r.eta_used << ',' << r.class_label << '\n';
}

} // namespace tri
