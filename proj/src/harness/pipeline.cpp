#include "tri/error.hpp"
#include "tri/harness.hpp"
#include "tri/kernels.hpp"
#include "tri/rng.hpp"
#include "tri/serialize.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace tri {

std::vector<ReferenceFamily> build_families(const World& world, const Scenario& s) {
  std::vector<ReferenceFamily> out;
  if (s.families.empty()) {
    std::vector<int> envs(world.num_environments());
    for (int e = 0; e < world.num_environments(); ++e) envs[e] = e;
    for (int zs = 0; zs < world.spec.num_semantic; ++zs)
      for (int g = 0; g < world.domain_size(); ++g) out.push_back(build_reference_family({zs, g}, envs, world));
  } else {
    for (const auto& f : s.families) out.push_back(build_reference_family(f.z, f.envs, world));
  }
  return out;
}

Dataset dataset_from_families(const World& world, const std::vector<ReferenceFamily>& families) {
  std::vector<DatasetItem> items;
  for (std::size_t f = 0; f < families.size(); ++f)
    for (const auto& m : families[f].members)
      items.push_back({m.input, InputLabel{families[f].anchor, m.env}, static_cast<int>(f)});
  return Dataset(world, std::move(items));
}

std::vector<ScoredInput> scored_inputs(const Dataset& data) {
  std::vector<ScoredInput> v;
  v.reserve(data.size());
  for (const auto& it : data.items()) v.push_back({it.x, it.claimed});
  return v;
}

namespace {

double quantile_nearest_rank(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
  return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace

AutoThresholds auto_thresholds(const World& world, const Dataset& data, const MechanismClass& planted,
                               const NullSource& null_source, const ThresholdConfig& cfg, double ridge) {
  AutoThresholds out;
  Thresholds& t = out.thresholds;
  t.alpha = cfg.alpha;
  t.eta = cfg.eta.value_or(0.5);

  const bool need_effect = !(cfg.tau_n && cfg.tau_s && cfg.epsilon);
  if (need_effect) {
    std::vector<double> ko;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto& it = data.item(i);
      if (!is_knockout_target(world, it.claimed.z.z_g)) continue;
      const auto& c = planted.circuits.at(it.claimed.env);
      const auto tr = apply_knockout(world.model, it.x, c, null_source, derive_seed(0, i), it.claimed);
      ko.push_back(data.clean_score(i) - task_score(tr, world.score));
    }
    if (ko.empty()) throw DegenerateWorldError("no knockout targets in the dataset");
    out.planted_effect = median(ko);
    if (!(out.planted_effect > 0.0))
      throw DegenerateWorldError("planted knockout effect is not positive; thresholds cannot be derived");
  }
  t.tau_n = cfg.tau_n.value_or(0.5 * out.planted_effect);
  t.tau_s = cfg.tau_s.value_or(0.5 * out.planted_effect);
  t.epsilon = cfg.epsilon.value_or(0.1 * out.planted_effect);

  if (cfg.delta) {
    t.delta = *cfg.delta;
  } else {
    // Swaps move the circuit by design; the veto should only catch patches
    // that leave the range of native activations plus map error.
    for (std::size_t b = 0; b < data.size(); ++b)
      for (std::size_t s = 0; s < data.size(); ++s) {
        const auto& lb = data.item(b).claimed;
        const auto& ls = data.item(s).claimed;
        if (lb.env != ls.env || lb.z.z_sem != ls.z.z_sem || predicted_direction(world, lb.z.z_g, ls.z.z_g) == 0)
          continue;
        const auto& c = planted.circuits.at(lb.env);
        out.native_swap_distance = std::max(
            out.native_swap_distance,
            on_manifold_distance(nullptr, site_values(data.trace(s), c), site_values(data.trace(b), c)));
      }
    std::vector<double> residuals;
    for (const auto& [key, map] : planted.maps) {
      const auto pairs = family_pairs(data, planted.circuits, key.first, key.second);
      const auto split = split_fit_holdout(pairs);
      for (const auto& p : split.second) residuals.push_back(residual_norm(map, p));
    }
    (void)ridge;
    out.residual_q95 = quantile_nearest_rank(residuals, 0.95);
    t.delta = out.native_swap_distance + out.residual_q95;
    if (!(t.delta > 0.0)) t.delta = 1e-9;
  }
  return out;
}

SingleEnvResult baseline_single_env(const MechanismClass& mech, const EvaluationContext& ctx, const Thresholds& th,
                                    long long n_per_env, std::uint64_t master_seed, int baseline_env, Ablation ablation,
                                    int workers) {
  SingleEnvResult r;
  r.baseline_env = baseline_env;
  for (int e = 0; e < ctx.world.num_environments(); ++e) {
    InterventionDistribution d;
    d.weights = {0.5, 0.5, 0.0, 0.0};
    d.fixed_env = e;
    d.same_env_sources = true;
    InterventionSampler sampler(ctx.world, ctx.data, d, ablation);
    EstimateOptions o;
    o.workers = workers;
    const auto est = estimate_score(mech, ctx, sampler, n_per_env, th, derive_seed(master_seed, 0x53450000ULL + e), o);
    r.rate[e] = est.report.t_hat;
    r.accept[e] = est.report.t_hat >= th.eta;
  }
  return r;
}

FaithfulnessResult baseline_faithfulness(const Circuit& circuit, const World& world, const Dataset& data, double bound,
                                         double eps_m) {
  FaithfulnessResult r;
  if (data.size() == 0) throw DomainError("faithfulness baseline needs a nonempty dataset");
  const NullSource mean = NullSource::mean(world.model, data.inputs());
  std::vector<SiteId> complement;
  for (int l = 1; l <= world.model.hidden_layers(); ++l)
    for (int u = 0; u < world.model.widths[l]; ++u)
      if (!circuit.contains({l, u})) complement.push_back({l, u});
  const Circuit comp(complement, "complement");
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& it = data.item(i);
    double restricted = data.clean_score(i);
    if (!comp.empty()) restricted = task_score(apply_knockout(world.model, it.x, comp, mean, 0, it.claimed), world.score);
    const double dev = relative_deviation(restricted, data.clean_score(i), eps_m);
    r.mean_deviation += dev;
    r.worst_deviation = std::max(r.worst_deviation, dev);
  }
  r.mean_deviation /= static_cast<double>(data.size());
  r.accept = r.mean_deviation <= bound;
  return r;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t manifest_hash(const Json& manifest) {
  Json copy = manifest;
  copy.erase("runtime");
  copy.erase("manifest_hash");
  Fnv1a h;
  h.update(copy.dump());
  return h.digest();
}

namespace {

template <class F>
auto stage(const char* name, std::uint64_t seed, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, seed, e.what());
  }
}

std::uint64_t world_hash(const World& w) {
  Fnv1a h;
  for (std::size_t l = 0; l < w.model.weights.size(); ++l) {
    h.update(std::span<const double>(w.model.weights[l]));
    h.update(std::span<const double>(w.model.biases[l]));
  }
  return h.digest();
}

Json mechanism_json(const MechanismRun& run) {
  Json circuits = Json::object();
  for (const auto& [e, c] : run.mechanism.circuits) circuits[std::to_string(e)] = to_json(c);
  Json cues = Json::object();
  for (const auto& [e, c] : run.mechanism.cue_circuits) cues[std::to_string(e)] = to_json(c);
  Json maps = Json::array();
  for (const auto& [_, m] : run.mechanism.maps) maps.push_back(to_json(m));
  Json j = {{"label", run.mechanism.label}, {"kind", run.kind}, {"circuits", circuits},
            {"cue_circuits", cues},         {"maps", maps},     {"report", to_json(run.report)}};
  if (run.single_env) {
    Json se = Json::object();
    for (const auto& [e, rate] : run.single_env->rate)
      se[std::to_string(e)] = {{"rate", rate}, {"accept", run.single_env->accept.at(e)}};
    j["single_env"] = {{"baseline_env", run.single_env->baseline_env},
                       {"accept", run.single_env->accepted()},
                       {"per_env", se}};
  } else {
    j["single_env"] = nullptr;
  }
  if (run.faithfulness)
    j["faithfulness"] = {{"mean_deviation", run.faithfulness->mean_deviation},
                         {"worst_deviation", run.faithfulness->worst_deviation},
                         {"accept", run.faithfulness->accept}};
  else
    j["faithfulness"] = nullptr;
  return j;
}

} // namespace

PipelineResult run_pipeline(const Scenario& s, const RunOptions& opts) {
  s.validate();
  const auto started = std::chrono::steady_clock::now();
  const std::uint64_t seed = s.master_seed;
  PipelineResult r;

  r.world = stage("world", seed, [&] { return build_world(s.world); });
  stage("families", seed, [&] {
    r.families = build_families(r.world, s);
    r.dataset = dataset_from_families(r.world, r.families);
    return 0;
  });
  const auto inputs = r.dataset.inputs();
  const NullSource null_source = stage("null-source", seed, [&] {
    switch (s.ablation) {
    case Ablation::zero:
      return NullSource::zero();
    case Ablation::mean:
      return NullSource::mean(r.world.model, inputs);
    case Ablation::resample:
      break;
    }
    return NullSource::resample(r.world.model, inputs);
  });
  const EvaluationContext ctx{r.world, r.dataset, null_source};
  const int K = r.world.num_environments();

  stage("discovery", seed, [&] {
    const auto scored = scored_inputs(r.dataset);
    r.discovery = discover_predicate_circuits(r.world, scored, s.discovery);
    r.cue = discover_cue_circuit(r.world, scored, s.discovery);
    return 0;
  });

  const auto gt = ground_truth(r.world);
  const auto cue_controls = same_circuit_everywhere(r.cue.circuit, K);
  std::vector<MechanismRun> runs;
  stage("maps", seed, [&] {
    if (!gt.predicate.empty()) {
      MechanismRun m;
      m.kind = "planted-predicate";
      m.mechanism = make_mechanism("planted-predicate", r.world, r.dataset, same_circuit_everywhere(gt.predicate, K),
                                   cue_controls, s.ridge);
      runs.push_back(std::move(m));
    }
    if (!gt.cue.empty()) {
      MechanismRun m;
      m.kind = "planted-cue";
      m.mechanism = make_mechanism("planted-cue", r.world, r.dataset, same_circuit_everywhere(gt.cue, K), cue_controls,
                                   s.ridge);
      runs.push_back(std::move(m));
    }
    std::map<int, Circuit> disc;
    bool any_empty = false;
    for (const auto& d : r.discovery) {
      disc[d.env] = d.pruned.circuit;
      any_empty = any_empty || d.pruned.circuit.empty();
    }
    if (!any_empty) {
      MechanismRun m;
      m.kind = "discovered";
      m.mechanism = make_mechanism("discovered", r.world, r.dataset, disc, cue_controls, s.ridge);
      runs.push_back(std::move(m));
    }
    return 0;
  });

  stage("thresholds", seed, [&] {
    if (!gt.predicate.empty()) {
      r.thresholds = auto_thresholds(r.world, r.dataset, runs.front().mechanism, null_source, s.thresholds, s.ridge);
    } else {
      r.thresholds.thresholds = {*s.thresholds.tau_n, *s.thresholds.tau_s, *s.thresholds.epsilon, *s.thresholds.delta,
                                 s.thresholds.eta.value_or(0.5), s.thresholds.alpha};
    }
    return 0;
  });
  Thresholds th = r.thresholds.thresholds;

  const InterventionSampler sampler = stage("sampler", seed, [&] {
    return InterventionSampler(r.world, r.dataset, s.distribution, s.ablation);
  });
  EstimateOptions eo;
  eo.a0 = s.a0;
  eo.b0 = s.b0;
  eo.ci_level = s.ci_level;
  eo.workers = opts.workers;

  std::vector<MechanismRun> placebo_runs;
  stage("calibration", seed, [&] {
    if (s.thresholds.eta) return 0;
    std::vector<Circuit> exclude{gt.predicate, gt.cue, r.cue.circuit};
    for (const auto& d : r.discovery) exclude.push_back(d.pruned.circuit);
    const std::size_t size = gt.predicate.empty() ? std::max<std::size_t>(1, r.discovery.front().pruned.circuit.size())
                                                  : gt.predicate.size();
    const auto circuits = generate_placebos(r.world, size, s.placebos, exclude, derive_seed(seed, 0x706c6163ULL));
    std::vector<MechanismClass> placebos;
    for (const auto& c : circuits)
      placebos.push_back(make_mechanism(c.label, r.world, r.dataset, same_circuit_everywhere(c, K), cue_controls, s.ridge));
    r.calibration = calibrate_eta(placebos, ctx, sampler, s.n_interventions, th, seed, eo);
    th.eta = r.calibration.eta;
    for (std::size_t i = 0; i < placebos.size(); ++i) {
      MechanismRun m;
      m.kind = "placebo";
      m.mechanism = std::move(placebos[i]);
      m.report = r.calibration.reports[i];
      placebo_runs.push_back(std::move(m));
    }
    return 0;
  });
  r.thresholds.thresholds.eta = th.eta;

  stage("acceptance", seed, [&] {
    EstimateOptions o = eo;
    o.keep_records = opts.keep_records;
    for (auto& m : runs) {
      auto est = estimate_score(m.mechanism, ctx, sampler, s.n_interventions, th, seed, o);
      m.report = std::move(est.report);
      m.records = std::move(est.records);
    }
    return 0;
  });

  stage("baselines", seed, [&] {
    const long long n_env = std::max<long long>(1, s.n_interventions / K);
    auto add = [&](MechanismRun& m) {
      if (s.baseline_single_env)
        m.single_env = baseline_single_env(m.mechanism, ctx, th, n_env, seed, s.baseline_env, s.ablation, opts.workers);
      if (s.baseline_faithfulness)
        m.faithfulness = baseline_faithfulness(m.mechanism.circuits.at(s.baseline_env), r.world, r.dataset);
    };
    for (auto& m : runs) add(m);
    for (auto& m : placebo_runs) add(m);
    return 0;
  });

  // Manifest.
  Json m;
  m["manifest_version"] = 1;
  m["library_version"] = kLibraryVersion;
  m["module_versions"] = {{"scm-world", 1},    {"reference-families", 1}, {"interventions", 1},
                          {"translation-maps", 1}, {"discovery", 1},      {"triangulation", 1},
                          {"harness", 1}};
  const Json scenario_json = to_json(s);
  {
    Fnv1a h;
    h.update(scenario_json.dump());
    m["scenario_hash"] = hex64(h.digest());
  }
  m["scenario"] = scenario_json;
  m["world_hash"] = hex64(world_hash(r.world));
  Json fams = Json::array();
  for (const auto& f : r.families) fams.push_back(to_json(f));
  m["families"] = fams;
  Json disc = Json::array();
  for (const auto& d : r.discovery)
    disc.push_back({{"env", d.env},
                    {"circuit", to_json(d.pruned.circuit)},
                    {"kept_edges", d.pruned.kept.size()},
                    {"mean_deviation", d.pruned.mean_deviation},
                    {"worst_deviation", d.pruned.worst_deviation}});
  m["discovery"] = {{"predicate", disc},
                    {"cue", {{"circuit", to_json(r.cue.circuit)},
                             {"mean_deviation", r.cue.mean_deviation},
                             {"worst_deviation", r.cue.worst_deviation}}}};
  m["thresholds"] = to_json(th);
  m["threshold_sources"] = {{"planted_effect", r.thresholds.planted_effect},
                            {"native_swap_distance", r.thresholds.native_swap_distance},
                            {"residual_q95", r.thresholds.residual_q95}};
  if (s.thresholds.eta) {
    m["calibration"] = nullptr;
  } else {
    m["calibration"] = {{"eta", r.calibration.eta},
                        {"raw_eta", r.calibration.raw_eta},
                        {"alpha", th.alpha},
                        {"placebos", r.calibration.statistics.size()},
                        {"accepted", r.calibration.accepted},
                        {"statistics", r.calibration.statistics}};
  }
  Json mechs = Json::array();
  Json records = Json::object();
  for (const auto& run : runs) {
    mechs.push_back(mechanism_json(run));
    Json recs = Json::array();
    for (const auto& rec : run.records) recs.push_back(to_json(rec));
    records[run.mechanism.label] = recs;
  }
  Json placebo_summary = Json::array();
  for (const auto& run : placebo_runs) {
    Json pj = {{"label", run.mechanism.label},
               {"circuit", to_json(run.mechanism.circuits.at(0))},
               {"gate_statistic", run.report.gate_statistic},
               {"t_hat", run.report.t_hat},
               {"decision", to_string(run.report.decision)}};
    pj["single_env_accept"] = run.single_env ? Json(run.single_env->accepted()) : Json(nullptr);
    pj["faithfulness_accept"] = run.faithfulness ? Json(run.faithfulness->accept) : Json(nullptr);
    placebo_summary.push_back(pj);
  }
  m["mechanisms"] = mechs;
  m["placebos"] = placebo_summary;
  m["interventions"] = records;
  m["comparison"] = compare_acceptance(m);
  const auto elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  m["runtime"] = {{"workers", opts.workers}, {"kernel", std::string(kernels::name(kernels::active().isa))}, {"wall_clock_seconds", elapsed}};
  m["manifest_hash"] = hex64(manifest_hash(m));

  r.runs = std::move(runs);
  for (auto& p : placebo_runs) r.runs.push_back(std::move(p));
  r.manifest = std::move(m);
  return r;
}

StressResult stress_test(const PipelineResult& clean, const Scenario& s, const RunOptions& opts) {
  StressResult out;
  const MechanismRun* planted = nullptr;
  for (const auto& run : clean.runs)
    if (run.kind == "planted-predicate") planted = &run;
  if (!planted) throw StageError("stress-test", s.master_seed, "no planted predicate mechanism to stress");
  out.clean_accept = planted->report.decision == Decision::accept;
  out.clean_t_hat = planted->report.t_hat;

  return stage("stress-test", s.master_seed, [&] {
    const auto& world = clean.world;
    std::vector<ReferenceFamily> corrupted;
    double q = 0.0;
    for (std::size_t f = 0; f < clean.families.size(); ++f) {
      corrupted.push_back(inject_violation(clean.families[f], s.stress_kind, derive_seed(s.master_seed, 0x5700000ULL + f), world));
      q += corrupted.back().quality;
    }
    out.mean_quality = q / static_cast<double>(corrupted.size());
    const Dataset data = dataset_from_families(world, corrupted);
    const auto inputs = data.inputs();
    const NullSource ns = s.ablation == Ablation::zero   ? NullSource::zero()
                          : s.ablation == Ablation::mean ? NullSource::mean(world.model, inputs)
                                                         : NullSource::resample(world.model, inputs);
    const EvaluationContext ctx{world, data, ns};
    const auto mech = make_mechanism(planted->mechanism.label, world, data, planted->mechanism.circuits,
                                     planted->mechanism.cue_circuits, s.ridge);
    const InterventionSampler sampler(world, data, s.distribution, s.ablation);
    EstimateOptions eo;
    eo.a0 = s.a0;
    eo.b0 = s.b0;
    eo.ci_level = s.ci_level;
    eo.workers = opts.workers;
    Thresholds th = clean.thresholds.thresholds;
    auto est = estimate_score(mech, ctx, sampler, s.n_interventions, th, s.master_seed, eo);
    out.stressed = std::move(est.report);
    out.stressed_accept = out.stressed.decision == Decision::accept;
    out.stressed_t_hat = out.stressed.t_hat;
    return out;
  });
}

Json compare_acceptance(const Json& manifest) {
  const std::vector<std::string> methods{"triangulation", "single_env", "faithfulness", "causal_mediation",
                                         "causal_scrubbing"};
  const std::vector<std::string> kinds{"planted-predicate", "planted-cue", "placebo", "discovered"};
  struct Acc {
    long accepted = 0;
    long total = 0;
  };
  std::map<std::string, std::map<std::string, Acc>> acc;
  auto note = [&](const std::string& kind, const std::string& method, const Json& v) {
    if (v.is_null()) return;
    auto& a = acc[kind][method];
    ++a.total;
    a.accepted += v.get<bool>() ? 1 : 0;
  };
  if (manifest.contains("mechanisms"))
    for (const auto& m : manifest.at("mechanisms")) {
      const auto kind = m.at("kind").get<std::string>();
      note(kind, "triangulation", Json(m.at("report").at("decision") == "accept"));
      note(kind, "single_env", m.at("single_env").is_null() ? Json(nullptr) : m.at("single_env").at("accept"));
      note(kind, "faithfulness", m.at("faithfulness").is_null() ? Json(nullptr) : m.at("faithfulness").at("accept"));
    }
  if (manifest.contains("placebos"))
    for (const auto& p : manifest.at("placebos")) {
      note("placebo", "triangulation", Json(p.at("decision") == "accept"));
      note("placebo", "single_env", p.at("single_env_accept"));
      note("placebo", "faithfulness", p.at("faithfulness_accept"));
    }
  Json rows = Json::array();
  for (const auto& kind : kinds) {
    if (!acc.count(kind)) continue;
    Json row = {{"mechanism_kind", kind}};
    for (const auto& method : methods) {
      auto it = acc[kind].find(method);
      row[method] = (it == acc[kind].end() || it->second.total == 0)
                        ? Json(nullptr)
                        : Json(static_cast<double>(it->second.accepted) / static_cast<double>(it->second.total));
    }
    rows.push_back(row);
  }
  Json summary = Json::object();
  for (const auto& method : methods) {
    auto rate = [&](const std::string& kind) -> Json {
      auto k = acc.find(kind);
      if (k == acc.end()) return nullptr;
      auto it = k->second.find(method);
      if (it == k->second.end() || it->second.total == 0) return nullptr;
      return static_cast<double>(it->second.accepted) / static_cast<double>(it->second.total);
    };
    // Ground truth: only the planted predicate pathway is a genuine mechanism.
    Json fp = nullptr;
    long fa = 0, ft = 0;
    for (const auto& kind : {"planted-cue", "placebo"}) {
      auto k = acc.find(kind);
      if (k == acc.end()) continue;
      auto it = k->second.find(method);
      if (it == k->second.end()) continue;
      fa += it->second.accepted;
      ft += it->second.total;
    }
    if (ft > 0) fp = static_cast<double>(fa) / static_cast<double>(ft);
    summary[method] = {{"true_positive_rate", rate("planted-predicate")}, {"false_positive_rate", fp}};
  }
  return {{"methods", methods}, {"rows", rows}, {"summary", summary}};
}

std::string comparison_csv(const Json& table) {
  std::ostringstream os;
  os << "mechanism_kind";
  for (const auto& m : table.at("methods")) os << ',' << m.get<std::string>();
  os << '\n';
  for (const auto& row : table.at("rows")) {
    os << row.at("mechanism_kind").get<std::string>();
    for (const auto& m : table.at("methods")) {
      const auto& v = row.at(m.get<std::string>());
      os << ',';
      if (v.is_null()) os << "absent";
      else os << v.get<double>();
    }
    os << '\n';
  }
  return os.str();
}

} // namespace tri
