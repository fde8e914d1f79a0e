#include "tri/triangulation.hpp"

#include "tri/error.hpp"
#include "tri/rng.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <numeric>
#include <thread>

namespace tri {

std::string to_string(InterventionKind k) {
  switch (k) {
  case InterventionKind::knockout:
    return "knockout";
  case InterventionKind::predicate_swap:
    return "predicate_swap";
  case InterventionKind::stability:
    return "stability";
  case InterventionKind::cue_only:
    return "cue_only";
  }
  return "?";
}

InterventionKind intervention_kind_from_string(const std::string& s) {
  for (auto k : kAllKinds)
    if (to_string(k) == s) return k;
  throw DomainError("unknown intervention family '" + s + "'");
}

std::string to_string(FailureTag t) {
  switch (t) {
  case FailureTag::none:
    return "none";
  case FailureTag::lexicalization:
    return "Lexicalization failure";
  case FailureTag::agreement:
    return "Agreement failure";
  case FailureTag::cue_sensitivity:
    return "Cue sensitivity";
  case FailureTag::untagged:
    return "untagged";
  }
  return "?";
}

std::string to_string(Decision d) { return d == Decision::accept ? "accept" : "reject"; }

void Thresholds::validate() const {
  auto finite = [](double v) { return std::isfinite(v); };
  if (!finite(tau_n) || !(tau_n > 0.0)) throw ConfigError("tau_N must be finite and > 0");
  if (!finite(tau_s) || !(tau_s > 0.0)) throw ConfigError("tau_S must be finite and > 0");
  if (!finite(epsilon) || !(epsilon >= 0.0)) throw ConfigError("epsilon must be finite and >= 0");
  if (!finite(delta) || !(delta > 0.0)) throw ConfigError("delta must be finite and > 0");
  if (!(eta > 0.0 && eta < 1.0)) throw ConfigError("eta must lie strictly inside (0, 1)");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie strictly inside (0, 1)");
}

int sim_necessity(double delta_ko_value, const Thresholds& th) { return delta_ko_value >= th.tau_n ? 1 : 0; }

int sim_sufficiency(double delta_swap_value, int direction, double distortion, const Thresholds& th) {
  return (direction * delta_swap_value >= th.tau_s && distortion <= th.delta) ? 1 : 0;
}

int sim_invariance(double delta_value, const Thresholds& th) { return std::abs(delta_value) <= th.epsilon ? 1 : 0; }

Dataset::Dataset(const World& world, std::vector<DatasetItem> items) : items_(std::move(items)) {
  num_envs_ = world.num_environments();
  traces_.reserve(items_.size());
  scores_.reserve(items_.size());
  for (const auto& it : items_) {
    if (it.claimed.env < 0 || it.claimed.env >= num_envs_) throw DomainError("dataset item environment out of range");
    traces_.push_back(forward(world.model, it.x, {}, it.claimed));
    scores_.push_back(task_score(traces_.back(), world.score));
  }
}

std::vector<std::vector<double>> Dataset::inputs() const {
  std::vector<std::vector<double>> v;
  v.reserve(items_.size());
  for (const auto& it : items_) v.push_back(it.x);
  return v;
}

InterventionDistribution InterventionDistribution::normalized() const {
  double sum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("intervention weights must be finite and nonnegative");
    sum += w;
  }
  if (!(sum > 0.0)) throw ConfigError("intervention weights sum to zero");
  InterventionDistribution d = *this;
  for (auto& w : d.weights) w /= sum;
  return d;
}

const TranslationMap* MechanismClass::map_for(int base_env, int source_env) const {
  if (base_env == source_env) return nullptr;
  auto it = maps.find({base_env, source_env});
  return it == maps.end() ? nullptr : &it->second;
}

InterventionSampler::InterventionSampler(const World& world, const Dataset& data, InterventionDistribution dist,
                                         Ablation ablation)
    : world_(&world), data_(&data), dist_(dist.normalized()), ablation_(ablation) {
  const int K = world.num_environments();
  if (dist_.fixed_env) {
    if (*dist_.fixed_env < 0 || *dist_.fixed_env >= K) throw ConfigError("fixed base environment out of range");
    base_envs_ = {*dist_.fixed_env};
  } else {
    base_envs_.resize(K);
    std::iota(base_envs_.begin(), base_envs_.end(), 0);
  }
  const auto& items = data.items();
  for (auto kind : kAllKinds) {
    const int ki = static_cast<int>(kind);
    bases_[ki].assign(K, {});
    sources_[ki].assign(items.size(), {});
  }
  for (std::size_t b = 0; b < items.size(); ++b) {
    const auto& lb = items[b].claimed;
    for (std::size_t s = 0; s < items.size(); ++s) {
      const auto& ls = items[s].claimed;
      if (ls.z.z_sem == lb.z.z_sem && predicted_direction(world, lb.z.z_g, ls.z.z_g) != 0 &&
          (!dist_.same_env_sources || ls.env == lb.env))
        sources_[static_cast<int>(InterventionKind::predicate_swap)][b].push_back(s);
      if (items[s].family == items[b].family && ls.env != lb.env) {
        sources_[static_cast<int>(InterventionKind::stability)][b].push_back(s);
        sources_[static_cast<int>(InterventionKind::cue_only)][b].push_back(s);
      }
    }
    if (is_knockout_target(world, lb.z.z_g)) bases_[static_cast<int>(InterventionKind::knockout)][lb.env].push_back(b);
    for (auto kind : {InterventionKind::predicate_swap, InterventionKind::stability, InterventionKind::cue_only})
      if (!sources_[static_cast<int>(kind)][b].empty()) bases_[static_cast<int>(kind)][lb.env].push_back(b);
  }
  for (auto kind : kAllKinds) {
    if (dist_.weight(kind) <= 0.0) continue;
    for (int e : base_envs_)
      if (bases_[static_cast<int>(kind)][e].empty())
        throw SamplingError("intervention family '" + to_string(kind) + "' has no eligible base in environment " +
                            std::to_string(e));
  }
}

const std::vector<std::size_t>& InterventionSampler::bases(InterventionKind k, int env) const {
  return bases_[static_cast<int>(k)].at(env);
}

const std::vector<std::size_t>& InterventionSampler::sources(InterventionKind k, std::size_t base) const {
  return sources_[static_cast<int>(k)].at(base);
}

Intervention InterventionSampler::sample(std::uint64_t master_seed, std::uint64_t index) const {
  Rng rng(derive_seed(master_seed, index));
  Intervention I;
  I.index = index;
  I.ablation = ablation_;
  const double u = uniform_unit(rng);
  double cum = 0.0;
  I.kind = InterventionKind::knockout;
  bool chosen = false;
  InterventionKind last_positive = InterventionKind::knockout;
  for (auto k : kAllKinds) {
    if (dist_.weight(k) <= 0.0) continue;
    last_positive = k;
    cum += dist_.weight(k);
    if (u < cum) {
      I.kind = k;
      chosen = true;
      break;
    }
  }
  if (!chosen) I.kind = last_positive;

  I.base_env = base_envs_[uniform_index(rng, base_envs_.size())];
  const auto& pool = bases(I.kind, I.base_env);
  if (pool.empty())
    throw SamplingError("intervention family '" + to_string(I.kind) + "' has no eligible base in environment " +
                        std::to_string(I.base_env));
  I.base = pool[uniform_index(rng, pool.size())];
  if (needs_source(I.kind)) {
    const auto& src = sources(I.kind, I.base);
    if (src.empty()) throw SamplingError("intervention family '" + to_string(I.kind) + "' has no eligible source");
    I.source = src[uniform_index(rng, src.size())];
    I.source_env = data_->item(*I.source).claimed.env;
  } else {
    I.source_env = I.base_env;
  }
  if (I.kind == InterventionKind::predicate_swap)
    I.predicted_direction =
        predicted_direction(*world_, data_->item(I.base).claimed.z.z_g, data_->item(*I.source).claimed.z.z_g);
  I.seed = rng();
  return I;
}

FailureTag failure_diagnostics(std::span<const double> logits, const ScoreSpec& score,
                               const std::optional<InputLabel>& label, InterventionKind kind, double delta,
                               const Thresholds& th) {
  auto empty_group = [&](const std::string& g) {
    auto it = score.groups.find(g);
    return it == score.groups.end() || it->second.empty();
  };
  if (score.modality == Modality::text_only) {
    if (empty_group("incl")) return FailureTag::lexicalization;
  } else if (label && label->z.z_g >= 0 && label->z.z_g < static_cast<int>(score.predicate_domain.size())) {
    if (empty_group(score.predicate_domain[label->z.z_g])) return FailureTag::lexicalization;
  }
  if (score.modality == Modality::text_only && !logits.empty()) {
    double m = 0.0;
    try {
      m = score_from_logits(logits, score, label);
    } catch (const ScoringError&) {
      return FailureTag::lexicalization;
    }
    const auto top = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    bool gendered = false;
    for (const char* g : {"m", "f"}) {
      auto it = score.groups.find(g);
      if (it != score.groups.end() && std::find(it->second.begin(), it->second.end(), top) != it->second.end())
        gendered = true;
    }
    if (m > 0.0 && gendered) return FailureTag::agreement;
  }
  if ((kind == InterventionKind::stability || kind == InterventionKind::cue_only) && std::abs(delta) > th.epsilon)
    return FailureTag::cue_sensitivity;
  return FailureTag::untagged;
}

namespace {

const Circuit& circuit_at(const std::map<int, Circuit>& m, int env, const char* what) {
  auto it = m.find(env);
  if (it == m.end()) throw DomainError(std::string("mechanism has no ") + what + " for environment " + std::to_string(env));
  return it->second;
}

} // namespace

InterventionOutcome evaluate_intervention(const Intervention& I, const MechanismClass& mech, const EvaluationContext& ctx,
                                          const Thresholds& th) {
  const auto& world = ctx.world;
  const auto& base = ctx.data.item(I.base);
  const double clean = ctx.data.clean_score(I.base);
  InterventionOutcome out;
  std::vector<double> logits;
  try {
    if (I.kind == InterventionKind::knockout) {
      const auto& c = circuit_at(mech.circuits, I.base_env, "circuit");
      const auto t = apply_knockout(world.model, base.x, c, ctx.null_source, I.seed, base.claimed);
      out.delta = clean - task_score(t, world.score);
      out.success = sim_necessity(out.delta, th);
      logits = t.logits;
    } else {
      if (!I.source) throw DomainError("patch intervention without a source");
      const bool cue = I.kind == InterventionKind::cue_only;
      const auto& cb = circuit_at(cue ? mech.cue_circuits : mech.circuits, I.base_env, cue ? "cue circuit" : "circuit");
      const auto& cs = circuit_at(cue ? mech.cue_circuits : mech.circuits, I.source_env, cue ? "cue circuit" : "circuit");
      const TranslationMap* map = cue ? nullptr : mech.map_for(I.base_env, I.source_env);
      if (!cue && I.base_env != I.source_env && !map && cb.size() != cs.size())
        throw TypeIncompatibleError("no translation map for environments " + std::to_string(I.source_env) + " -> " +
                                    std::to_string(I.base_env));
      const auto a_s = site_values(ctx.data.trace(*I.source), cs);
      const auto a_b = site_values(ctx.data.trace(I.base), cb);
      std::vector<double> values;
      if (map) {
        if (map->cols != static_cast<int>(cs.size()) || map->rows != static_cast<int>(cb.size()))
          throw TypeIncompatibleError("translation map shape does not match the mechanism circuits");
        values = map->apply(a_s);
      } else {
        if (cs.size() != cb.size())
          throw TypeIncompatibleError("source and base circuits differ in dimension and no map is available");
        values = a_s;
      }
      const auto t = patch_values(world.model, base.x, cb, values, base.claimed);
      out.delta = task_score(t, world.score) - clean;
      logits = t.logits;
      if (I.kind == InterventionKind::predicate_swap) {
        out.distortion = on_manifold_distance(map, a_s, a_b);
        out.success = sim_sufficiency(out.delta, I.predicted_direction, out.distortion, th);
      } else {
        out.success = sim_invariance(out.delta, th);
      }
    }
  } catch (const ScoringError&) {
    out.success = 0;
    out.tag = FailureTag::lexicalization;
    return out;
  }
  if (!out.success) out.tag = failure_diagnostics(logits, world.score, base.claimed, I.kind, out.delta, th);
  return out;
}

std::string classify_mechanism(const TriangulationReport& report, double eta) {
  if (report.decision == Decision::accept) return "visual/predicate";
  for (const auto& [_, t] : report.single_env)
    if (t.n > 0 && t.rate() >= eta) return "linguistic/cue";
  return "spurious";
}

namespace {

void apply_decision(TriangulationReport& r, double eta) {
  r.eta_used = eta;
  double min_env = std::numeric_limits<double>::infinity();
  bool untested = false;
  for (const auto& [_, s] : r.per_env) {
    if (s.untested) untested = true;
    min_env = std::min(min_env, s.untested ? 0.0 : s.t_hat);
  }
  if (r.per_env.empty()) min_env = 0.0;
  r.min_env_score = min_env;
  r.gate_statistic = std::min(r.t_hat, min_env);
  r.decision = (!untested && r.n > 0 && r.t_hat >= eta && min_env >= eta) ? Decision::accept : Decision::reject;
  r.class_label = classify_mechanism(r, eta);
}

} // namespace

TriangulationReport tally_report(const std::string& mechanism, std::span<const InterventionRecord> records,
                                 const std::vector<int>& base_envs, const Thresholds& th, const EstimateOptions& opts) {
  TriangulationReport r;
  r.mechanism = mechanism;
  for (int e : base_envs) r.per_env[e] = EnvScore{};
  for (auto k : kAllKinds) r.per_family[k] = Tally{};
  for (const auto& rec : records) {
    const auto& I = rec.intervention;
    const int s = rec.outcome.success;
    ++r.n;
    r.k += s;
    auto& pe = r.per_env[I.base_env];
    ++pe.n;
    pe.k += s;
    auto& pf = r.per_family[I.kind];
    ++pf.n;
    pf.k += s;
    if (I.kind == InterventionKind::knockout ||
        (I.kind == InterventionKind::predicate_swap && I.source_env == I.base_env)) {
      auto& se = r.single_env[I.base_env];
      ++se.n;
      se.k += s;
    }
    if (!s) ++r.failure_taxonomy[to_string(rec.outcome.tag)];
  }
  r.t_hat = r.n ? static_cast<double>(r.k) / static_cast<double>(r.n) : 0.0;
  for (auto& [_, pe] : r.per_env) {
    pe.untested = pe.n == 0;
    pe.t_hat = pe.n ? static_cast<double>(pe.k) / static_cast<double>(pe.n) : 0.0;
  }
  r.posterior = beta_posterior(r.k, r.n, opts.a0, opts.b0);
  r.ci_level = opts.ci_level;
  r.credible_interval = credible_interval(r.posterior, opts.ci_level);
  apply_decision(r, th.eta);
  return r;
}

Estimate estimate_score(const MechanismClass& mech, const EvaluationContext& ctx, const InterventionSampler& sampler,
                        long long n, const Thresholds& th, std::uint64_t master_seed, const EstimateOptions& opts) {
  if (n < 1) throw DomainError("estimate_score: n must be >= 1");
  th.validate();
  std::vector<InterventionRecord> records(static_cast<std::size_t>(n));
  const int workers = static_cast<int>(std::clamp<long long>(opts.workers, 1, n));
  auto run = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      records[i].intervention = sampler.sample(master_seed, i);
      records[i].outcome = evaluate_intervention(records[i].intervention, mech, ctx, th);
    }
  };
  if (workers == 1) {
    run(0, records.size());
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    const std::size_t chunk = (records.size() + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
      const std::size_t lo = std::min(records.size(), w * chunk);
      const std::size_t hi = std::min(records.size(), lo + chunk);
      pool.emplace_back([&, w, lo, hi] {
        try {
          run(lo, hi);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  Estimate est;
  est.report = tally_report(mech.label, records, sampler.base_envs(), th, opts);
  if (opts.keep_records) est.records = std::move(records);
  return est;
}

std::vector<ActivationPair> family_pairs(const Dataset& data, const std::map<int, Circuit>& circuits, int base_env,
                                         int source_env) {
  const auto& cb = circuit_at(circuits, base_env, "circuit");
  const auto& cs = circuit_at(circuits, source_env, "circuit");
  std::map<int, std::vector<std::size_t>> src, dst;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& it = data.item(i);
    if (it.claimed.env == source_env) src[it.family].push_back(i);
    if (it.claimed.env == base_env) dst[it.family].push_back(i);
  }
  std::vector<ActivationPair> pairs;
  for (const auto& [fam, si] : src) {
    auto d = dst.find(fam);
    if (d == dst.end()) continue;
    for (auto i : si)
      for (auto j : d->second) pairs.push_back({site_values(data.trace(i), cs), site_values(data.trace(j), cb)});
  }
  return pairs;
}

std::map<std::pair<int, int>, TranslationMap> fit_mechanism_maps(const World& world, const Dataset& data,
                                                                 const std::map<int, Circuit>& circuits, double ridge) {
  std::map<std::pair<int, int>, TranslationMap> maps;
  const int K = world.num_environments();
  for (int b = 0; b < K; ++b)
    for (int s = 0; s < K; ++s) {
      if (b == s) continue;
      if (circuit_at(circuits, b, "circuit").empty() || circuit_at(circuits, s, "circuit").empty()) continue;
      auto pairs = family_pairs(data, circuits, b, s);
      if (pairs.size() < 2)
        throw FitError("too few predicate-matched pairs to fit the map " + std::to_string(s) + " -> " + std::to_string(b));
      auto m = fit_with_holdout(pairs, ridge);
      m.source_env = s;
      m.target_env = b;
      maps.emplace(std::make_pair(b, s), std::move(m));
    }
  return maps;
}

std::map<int, Circuit> same_circuit_everywhere(const Circuit& c, int num_envs) {
  std::map<int, Circuit> m;
  for (int e = 0; e < num_envs; ++e) m[e] = c;
  return m;
}

MechanismClass make_mechanism(const std::string& label, const World& world, const Dataset& data,
                              const std::map<int, Circuit>& circuits, const std::map<int, Circuit>& cue_circuits,
                              double ridge) {
  MechanismClass m;
  m.label = label;
  for (int e = 0; e < world.num_environments(); ++e) {
    const auto& c = circuit_at(circuits, e, "circuit");
    check_circuit(world.model, c);
    check_circuit(world.model, circuit_at(cue_circuits, e, "cue circuit"));
    m.circuits[e] = c;
    m.cue_circuits[e] = cue_circuits.at(e);
  }
  m.maps = fit_mechanism_maps(world, data, m.circuits, ridge);
  return m;
}

std::vector<Circuit> generate_placebos(const World& world, std::size_t size, int count, const std::vector<Circuit>& exclude,
                                       std::uint64_t seed) {
  std::vector<SiteId> pool;
  for (int l = 1; l <= world.model.hidden_layers(); ++l)
    for (int u = 0; u < world.model.widths[l]; ++u) pool.push_back({l, u});
  if (size == 0 || size > pool.size()) throw CalibrationError("placebo size must be in [1, number of hidden sites]");
  std::vector<Circuit> out;
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    bool ok = false;
    for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
      auto p = pool;
      for (std::size_t j = 0; j < size; ++j) std::swap(p[j], p[j + uniform_index(rng, p.size() - j)]);
      Circuit c(std::vector<SiteId>(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(size)),
                "placebo-" + std::to_string(i));
      ok = true;
      for (const auto& ex : exclude) {
        if (ex.empty()) continue;
        if (std::includes(c.sites.begin(), c.sites.end(), ex.sites.begin(), ex.sites.end())) ok = false;
      }
      if (ok) out.push_back(std::move(c));
    }
    if (!ok) throw CalibrationError("could not draw a placebo that avoids the candidate circuits");
  }
  return out;
}

double eta_from_statistics(std::vector<double> stats, double alpha, double* raw) {
  if (stats.empty()) throw CalibrationError("no placebo statistics");
  std::sort(stats.begin(), stats.end(), std::greater<>());
  const double target = alpha * static_cast<double>(stats.size());
  // Candidate thresholds: just above the maximum (count 0), then every
  // distinct value (count = number of statistics >= value).
  double best_eta = std::nextafter(stats.front(), std::numeric_limits<double>::infinity());
  double best_gap = target;
  long best_count = 0;
  for (std::size_t i = 0; i < stats.size(); ++i) {
    if (i + 1 < stats.size() && stats[i + 1] == stats[i]) continue;
    const long count = static_cast<long>(i + 1);
    const double gap = std::abs(static_cast<double>(count) - target);
    const bool better = gap < best_gap - 1e-12 ||
                        (std::abs(gap - best_gap) <= 1e-12 && count <= target && best_count > target);
    if (better) {
      best_gap = gap;
      best_eta = stats[i];
      best_count = count;
    }
  }
  if (raw) *raw = best_eta;
  return std::clamp(best_eta, kEtaMin, kEtaMax);
}

CalibrationResult calibrate_eta(const std::vector<MechanismClass>& placebos, const EvaluationContext& ctx,
                                const InterventionSampler& sampler, long long n, const Thresholds& th,
                                std::uint64_t master_seed, const EstimateOptions& opts) {
  if (static_cast<int>(placebos.size()) < kMinPlacebos)
    throw CalibrationError("calibration needs at least " + std::to_string(kMinPlacebos) + " placebo circuits, got " +
                           std::to_string(placebos.size()));
  CalibrationResult res;
  EstimateOptions o = opts;
  o.keep_records = false;
  for (std::size_t i = 0; i < placebos.size(); ++i) {
    // Independent draws per placebo; shared draws would tie placebos whose
    // circuits respond identically.
    auto est = estimate_score(placebos[i], ctx, sampler, n, th, derive_seed(master_seed, 0x706c6163ULL + i), o);
    res.statistics.push_back(est.report.gate_statistic);
    res.reports.push_back(std::move(est.report));
  }
  res.eta = eta_from_statistics(res.statistics, th.alpha, &res.raw_eta);
  for (auto& r : res.reports) {
    apply_decision(r, res.eta);
    if (r.decision == Decision::accept) ++res.accepted;
  }
  return res;
}

} // namespace tri
