// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails.

#include "oracles.hpp"

#include "tri/beta.hpp"
#include "tri/discovery.hpp"
#include "tri/harness.hpp"
#include "tri/kernels.hpp"
#include "tri/rng.hpp"

#include <cfloat>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

using namespace tri;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void criterion(int id, const char* title, double budget_s, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool in_budget = dt <= budget_s;
  const bool ok = o.pass && in_budget;
  if (!ok) ++failures;
  std::printf("%s criterion %d: %s (%.2f s, budget %.0f s) %s%s\n", ok ? "PASS" : "FAIL", id, title, dt, budget_s,
              o.detail.c_str(), in_budget ? "" : " [over budget]");
  std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// ---------------------------------------------------------------------------
// Shared pipeline runs

constexpr int kWorlds = 20;

const std::vector<PipelineResult>& planted_runs() {
  static const std::vector<PipelineResult> runs = [] {
    std::vector<PipelineResult> v;
    for (int seed = 1; seed <= kWorlds; ++seed) v.push_back(run_pipeline(micro_scenario(seed)));
    return v;
  }();
  return runs;
}

const MechanismRun& run_of(const PipelineResult& r, const std::string& kind) {
  for (const auto& run : r.runs)
    if (run.kind == kind) return run;
  throw std::runtime_error("pipeline produced no '" + kind + "' run");
}

// Gate decision recomputed from the raw intervention records.
bool gate_from_records(const std::vector<InterventionRecord>& recs, int K, double eta) {
  std::vector<long> n(K, 0), k(K, 0);
  long N = 0, S = 0;
  for (const auto& r : recs) {
    ++n[r.intervention.base_env];
    k[r.intervention.base_env] += r.outcome.success;
    ++N;
    S += r.outcome.success;
  }
  if (N == 0 || double(S) / N < eta) return false;
  for (int e = 0; e < K; ++e)
    if (n[e] == 0 || double(k[e]) / n[e] < eta) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Exhaustive enumeration of every intervention with its sampling probability,
// evaluated with the reference forward pass.

struct Enumerator {
  const World& world;
  const Dataset& data;
  std::vector<std::vector<std::vector<double>>> traces; // per item, oracle layers (logits last)
  std::vector<double> clean;
  std::vector<std::vector<double>> means;

  Enumerator(const World& w, const Dataset& d) : world(w), data(d) {
    const int H = w.model.hidden_layers();
    means.resize(H + 1);
    for (int l = 0; l <= H; ++l) means[l].assign(w.model.widths[l], 0.0);
    for (const auto& it : d.items()) {
      traces.push_back(oracle::forward(w.model, it.x));
      clean.push_back(score(traces.back().back()));
      for (int l = 0; l <= H; ++l)
        for (int u = 0; u < w.model.widths[l]; ++u) means[l][u] += traces.back()[l][u] / double(d.size());
    }
  }

  double score(const std::vector<double>& logits) const {
    const auto& g = world.spec.output_groups;
    return oracle::text_score(logits, g.at("incl"), g.at("m"), g.at("f"));
  }

  int level(int g) const {
    const auto& v = world.spec.predicate_domain[g];
    return v == "incl" ? 1 : (v == "m" || v == "f") ? -1 : 0;
  }

  double pinned_score(std::size_t base, const Circuit& c, const std::vector<double>& values) const {
    std::vector<oracle::Pin> pins;
    for (std::size_t i = 0; i < c.size(); ++i) pins.push_back({c.sites[i].layer, c.sites[i].unit, values[i]});
    return score(oracle::forward(world.model, data.item(base).x, pins).back());
  }

  std::vector<double> read(std::size_t item, const Circuit& c) const {
    std::vector<double> v;
    for (auto s : c.sites) v.push_back(traces[item][s.layer][s.unit]);
    return v;
  }

  int success(InterventionKind kind, std::size_t b, std::size_t s, const MechanismClass& m, const Thresholds& th) const {
    const auto& lb = data.item(b).claimed;
    if (kind == InterventionKind::knockout) {
      const auto& c = m.circuits.at(lb.env);
      std::vector<double> v;
      for (auto site : c.sites) v.push_back(means[site.layer][site.unit]);
      return clean[b] - pinned_score(b, c, v) >= th.tau_n;
    }
    const auto& ls = data.item(s).claimed;
    const bool cue = kind == InterventionKind::cue_only;
    const auto& cb = cue ? m.cue_circuits.at(lb.env) : m.circuits.at(lb.env);
    const auto& cs = cue ? m.cue_circuits.at(ls.env) : m.circuits.at(ls.env);
    auto values = read(s, cs);
    if (!cue && lb.env != ls.env) {
      const auto& map = m.maps.at({lb.env, ls.env});
      std::vector<double> out(map.rows);
      for (int r = 0; r < map.rows; ++r) {
        long double acc = map.bias[r];
        for (int c = 0; c < map.cols; ++c) acc += map.matrix[std::size_t(r) * map.cols + c] * values[c];
        out[r] = double(acc);
      }
      values = out;
    }
    const double delta = pinned_score(b, cb, values) - clean[b];
    if (kind == InterventionKind::predicate_swap) {
      const auto ab = read(b, cb);
      double ss = 0;
      for (std::size_t i = 0; i < ab.size(); ++i) ss += (values[i] - ab[i]) * (values[i] - ab[i]);
      const int d = level(ls.z.z_g) - level(lb.z.z_g);
      const int dir = (d > 0) - (d < 0);
      return dir * delta >= th.tau_s && std::sqrt(ss) <= th.delta;
    }
    return std::abs(delta) <= th.epsilon;
  }

  // Exact acceptance probability under uniform base environments and
  // uniform bases and sources within each eligibility set.
  double probability(const MechanismClass& m, const Thresholds& th, const InterventionDistribution& dist) const {
    const auto w = dist.normalized();
    const int K = world.num_environments();
    double total = 0;
    for (auto kind : kAllKinds) {
      if (w.weight(kind) <= 0) continue;
      double per_kind = 0;
      for (int e = 0; e < K; ++e) {
        std::vector<std::size_t> bases;
        std::map<std::size_t, std::vector<std::size_t>> sources;
        for (std::size_t b = 0; b < data.size(); ++b) {
          const auto& lb = data.item(b).claimed;
          if (lb.env != e) continue;
          if (kind == InterventionKind::knockout) {
            if (world.spec.predicate_domain[lb.z.z_g] == "incl") bases.push_back(b);
            continue;
          }
          std::vector<std::size_t> src;
          for (std::size_t s = 0; s < data.size(); ++s) {
            const auto& ls = data.item(s).claimed;
            if (kind == InterventionKind::predicate_swap) {
              if (ls.z.z_sem == lb.z.z_sem && level(ls.z.z_g) != level(lb.z.z_g)) src.push_back(s);
            } else if (data.item(s).family == data.item(b).family && ls.env != lb.env) {
              src.push_back(s);
            }
          }
          if (!src.empty()) {
            bases.push_back(b);
            sources[b] = src;
          }
        }
        double per_env = 0;
        for (auto b : bases) {
          if (kind == InterventionKind::knockout) {
            per_env += success(kind, b, b, m, th);
            continue;
          }
          double acc = 0;
          for (auto s : sources[b]) acc += success(kind, b, s, m, th);
          per_env += acc / double(sources[b].size());
        }
        per_kind += per_env / double(bases.size());
      }
      total += w.weight(kind) * per_kind / K;
    }
    return total;
  }
};

// Restricted forward pass for the faithfulness re-check.
double restricted(const World& world, const ScoredInput& in, const std::set<EdgeId>& kept, int first_layer,
                  const Baseline& base) {
  const auto& m = world.model;
  std::vector<double> a = in.x;
  for (int l = 0; l <= m.hidden_layers(); ++l) {
    std::vector<double> next(m.widths[l + 1]);
    for (int v = 0; v < m.widths[l + 1]; ++v) {
      long double s = m.biases[l][v];
      for (int u = 0; u < m.widths[l]; ++u) {
        const bool on = l < first_layer || kept.count(EdgeId{{l, u}, {l + 1, v}});
        s += m.weight(l, v, u) * (on ? a[u] : base.layers[l][u]);
      }
      next[v] = double(s);
    }
    if (l < m.hidden_layers())
      for (auto& t : next) t = oracle::act(m.activation, t);
    a = next;
  }
  const auto& g = world.spec.output_groups;
  return oracle::text_score(a, g.at("incl"), g.at("m"), g.at("f"));
}

std::vector<ScoredInput> full_factorial(const World& w) {
  std::vector<ScoredInput> out;
  for (int e = 0; e < w.num_environments(); ++e)
    for (int s = 0; s < w.spec.num_semantic; ++s)
      for (int g = 0; g < w.domain_size(); ++g) out.push_back({encode_input({s, g}, e, w), InputLabel{{s, g}, e}});
  return out;
}

} // namespace

int main() {
  std::printf("kernel: %s\n", std::string(kernels::name(kernels::active().isa)).c_str());

  criterion(1, "posterior arithmetic on the k <= n <= 50 grid", 1, [] {
    long checked = 0, bad = 0;
    for (double a0 : {0.5, 1.0, 2.0, 3.7})
      for (double b0 : {0.5, 1.0, 2.0, 3.7})
        for (int n = 0; n <= 50; ++n)
          for (int k = 0; k <= n; ++k) {
            const auto p = beta_posterior(k, n, a0, b0);
            const bool ok = p.a == a0 + k && p.b == b0 + (n - k) && std::abs(p.mean() - (a0 + k) / (a0 + b0 + n)) <= 4 * DBL_EPSILON * p.mean();
            bad += !ok;
            ++checked;
          }
    return Outcome{bad == 0, std::to_string(checked) + " cells, " + std::to_string(bad) + " mismatches"};
  });

  criterion(2, "Beta quantiles vs closed forms and numerical integration", 5, [] {
    double worst_closed = 0, worst_general = 0;
    for (int i = 1; i < 200; ++i) {
      const double p = i / 200.0;
      worst_closed = std::max(worst_closed, std::abs(beta_quantile(1, 1, p) - p));
      worst_closed = std::max(worst_closed, std::abs(beta_quantile(2, 1, p) - std::sqrt(p)));
    }
    for (double a : {0.5, 1.0, 2.0, 8.0})
      for (double b : {0.5, 1.0, 2.0, 8.0})
        for (double p : {0.025, 0.25, 0.5, 0.75, 0.975})
          worst_general = std::max(worst_general, std::abs(beta_quantile(a, b, p) - oracle::beta_quantile_oracle(a, b, p)));
    return Outcome{worst_closed <= 1e-10 && worst_general <= 1e-8,
                   fmt("closed-form max err %.2e", worst_closed) + fmt(", oracle max err %.2e", worst_general)};
  });

  criterion(3, "95% credible-interval coverage, 2000 trials, n = 200", 30, [] {
    Rng rng(20240601);
    std::string detail;
    bool ok = true;
    for (double theta : {0.3, 0.7, 0.9}) {
      int covered = 0;
      for (int t = 0; t < 2000; ++t) {
        int k = 0;
        for (int i = 0; i < 200; ++i) k += uniform_unit(rng) < theta;
        const auto [lo, hi] = credible_interval(beta_posterior(k, 200, 1, 1), 0.95);
        covered += lo <= theta && theta <= hi;
      }
      const double f = covered / 2000.0;
      ok = ok && std::abs(f - 0.95) <= 0.02;
      detail += fmt("theta=%.1f:", theta) + fmt("%.4f ", f);
    }
    return Outcome{ok, detail};
  });

  criterion(4, "attribution completeness, linear exactness, gradient check", 30, [] {
    double worst_complete = 0, worst_linear = 0, worst_grad = 0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const auto world = build_world(micro_world_spec(seed));
      const auto data = full_factorial(world);
      std::vector<std::vector<double>> ctx;
      for (const auto& d : data) ctx.push_back(d.x);
      const auto edges = all_edges(world.model, 0);
      for (const auto& base : {Baseline::zero(world.model), Baseline::mean(world.model, ctx)})
        for (std::size_t i = 0; i < data.size(); i += 3) {
          const auto t = eap_ig(world, data[i], edges, base, 64);
          const double full = task_score(forward(world.model, data[i].x), world.score);
          for (int l = 0; l <= world.model.hidden_layers(); ++l) {
            double sum = 0;
            for (const auto& [e, v] : t.scores)
              if (e.from.layer == l) sum += v;
            const double gap = full - score_from_logits(forward_from(world.model, l, base.layers[l]).logits, world.score, std::nullopt);
            worst_complete = std::max(worst_complete, std::abs(sum - gap));
          }
        }
      // gradients
      for (std::size_t i = 0; i < data.size(); i += 5) {
        const auto tr = forward(world.model, data[i].x);
        const auto grads = backprop(world.model, tr, score_gradient(tr.logits, world.score, std::nullopt), 0);
        for (int l = 0; l <= world.model.hidden_layers(); ++l)
          for (int u = 0; u < world.model.widths[l]; ++u) {
            auto hi = tr.sites[l], lo = tr.sites[l];
            hi[u] += 1e-5;
            lo[u] -= 1e-5;
            const double fd = (score_from_logits(forward_from(world.model, l, hi).logits, world.score, std::nullopt) -
                               score_from_logits(forward_from(world.model, l, lo).logits, world.score, std::nullopt)) / 2e-5;
            worst_grad = std::max(worst_grad, std::abs(grads[l][u] - fd) / std::max(std::abs(fd), 1e-3));
          }
      }
      // identity activations, singleton output groups, no biases
      auto spec = micro_world_spec(seed);
      spec.activation = Activation::identity;
      spec.output_groups = {{"incl", {0}}, {"m", {1}}, {"f", {2}}};
      spec.output_dim = 3;
      spec.bias_scale = 0.0;
      const auto lin = build_world(spec);
      const auto zero = Baseline::zero(lin.model);
      const auto lin_data = full_factorial(lin);
      for (std::size_t i = 0; i < lin_data.size(); i += 4) {
        const auto one = eap_ig(lin, lin_data[i], all_edges(lin.model, 0), zero, 1);
        const auto many = eap_ig(lin, lin_data[i], all_edges(lin.model, 0), zero, 256);
        for (const auto& [e, v] : one.scores) worst_linear = std::max(worst_linear, std::abs(v - many.scores.at(e)));
        double sum = 0;
        for (const auto& [e, v] : one.scores)
          if (e.from.layer == 0) sum += v;
        const double gap = task_score(forward(lin.model, lin_data[i].x), lin.score) -
                           score_from_logits(forward(lin.model, std::vector<double>(lin_data[i].x.size(), 0.0)).logits, lin.score, std::nullopt);
        worst_linear = std::max(worst_linear, std::abs(sum - gap));
      }
    }
    return Outcome{worst_complete <= 1e-3 && worst_linear <= 1e-12 && worst_grad <= 1e-6,
                   fmt("completeness %.2e", worst_complete) + fmt(", linear %.2e", worst_linear) +
                       fmt(", gradient rel %.2e", worst_grad)};
  });

  criterion(5, "pruned circuits re-verify the faithfulness bound", 10, [] {
    double worst = 0;
    int circuits = 0;
    for (std::uint64_t seed = 1; seed <= 6; ++seed) {
      const auto world = build_world(seed % 2 ? micro_world_spec(seed) : shortcut_world_spec(seed, 1));
      const auto data = full_factorial(world);
      DiscoveryOptions opts;
      for (const auto& d : discover_predicate_circuits(world, data, opts)) {
        std::vector<std::vector<double>> ctx;
        std::vector<ScoredInput> items;
        for (const auto& in : data)
          if (in.label.env == d.env) {
            ctx.push_back(in.x);
            items.push_back(in);
          }
        const auto base = Baseline::mean(world.model, ctx);
        double mean = 0;
        for (const auto& in : items) {
          const double full = task_score(forward(world.model, in.x), world.score);
          mean += std::abs(restricted(world, in, d.pruned.kept, opts.first_layer, base) - full) / (std::abs(full) + 1e-6);
        }
        worst = std::max(worst, mean / double(items.size()));
        ++circuits;
      }
    }
    return Outcome{worst <= 0.1, std::to_string(circuits) + fmt(" circuits, worst mean deviation %.4f", worst)};
  });

  criterion(6, "planted mechanisms on 20 micro-worlds, scores vs exhaustive enumeration", 300, [] {
    const auto& runs = planted_runs();
    int accepted = 0, rejected_cue = 0;
    for (const auto& r : runs) {
      const double eta = r.thresholds.thresholds.eta;
      const int K = r.world.num_environments();
      accepted += gate_from_records(run_of(r, "planted-predicate").records, K, eta);
      rejected_cue += !gate_from_records(run_of(r, "planted-cue").records, K, eta);
    }
    // Estimator mean over repeated seeds against the enumerated probability.
    double worst_gap = 0;
    std::string gaps;
    for (int w = 0; w < 3; ++w) {
      const auto& r = runs[w];
      const auto s = micro_scenario(w + 1);
      const NullSource ns = NullSource::mean(r.world.model, r.dataset.inputs());
      const EvaluationContext ctx{r.world, r.dataset, ns};
      const InterventionSampler sampler(r.world, r.dataset, s.distribution, s.ablation);
      const Enumerator en(r.world, r.dataset);
      for (const char* kind : {"planted-predicate", "planted-cue", "placebo"}) {
        const auto& mech = run_of(r, kind).mechanism;
        const double truth = en.probability(mech, r.thresholds.thresholds, s.distribution);
        double mean = 0;
        const int reps = 40;
        for (int rep = 0; rep < reps; ++rep)
          mean += estimate_score(mech, ctx, sampler, s.n_interventions, r.thresholds.thresholds, derive_seed(99, rep)).report.t_hat;
        mean /= reps;
        worst_gap = std::max(worst_gap, std::abs(mean - truth));
        gaps += fmt(" %.3f", truth) + fmt("/%.3f", mean);
      }
    }
    const bool ok = accepted >= 19 && rejected_cue >= 19 && worst_gap <= 0.01;
    return Outcome{ok, "planted accepted " + std::to_string(accepted) + "/20, cue rejected " + std::to_string(rejected_cue) +
                           "/20, enumeration vs estimator (truth/mean):" + gaps + fmt(", worst gap %.4f", worst_gap)};
  });

  criterion(7, "placebo acceptance at the calibrated eta", 120, [] {
    const auto& runs = planted_runs();
    int in_band = 0;
    long acc = 0, total = 0;
    long held_acc = 0, held_total = 0;
    for (std::size_t w = 0; w < runs.size(); ++w) {
      const auto& r = runs[w];
      const double eta = r.thresholds.thresholds.eta;
      long a = 0, n = 0;
      for (const auto& run : r.runs)
        if (run.kind == "placebo") {
          bool ok = run.report.t_hat >= eta;
          for (const auto& [_, e] : run.report.per_env) ok = ok && !e.untested && e.t_hat >= eta;
          a += ok;
          ++n;
        }
      in_band += n == 100 && std::abs(double(a) / n - 0.05) <= 0.02;
      acc += a;
      total += n;
      // Fresh placebo circuits, not used to pick eta.
      if (w < 5) {
        const auto s = micro_scenario(w + 1);
        const NullSource ns = NullSource::mean(r.world.model, r.dataset.inputs());
        const EvaluationContext ctx{r.world, r.dataset, ns};
        const InterventionSampler sampler(r.world, r.dataset, s.distribution, s.ablation);
        const auto gt = ground_truth(r.world);
        std::vector<Circuit> exclude{gt.predicate, gt.cue, r.cue.circuit};
        for (const auto& d : r.discovery) exclude.push_back(d.pruned.circuit);
        const int K = r.world.num_environments();
        const auto cue = same_circuit_everywhere(r.cue.circuit, K);
        const auto fresh = generate_placebos(r.world, gt.predicate.size(), 100, exclude, derive_seed(777, w));
        for (std::size_t i = 0; i < fresh.size(); ++i) {
          const auto mech = make_mechanism(fresh[i].label, r.world, r.dataset, same_circuit_everywhere(fresh[i], K), cue);
          const auto est = estimate_score(mech, ctx, sampler, s.n_interventions, r.thresholds.thresholds, derive_seed(778, i));
          held_acc += est.report.decision == Decision::accept;
          ++held_total;
        }
      }
    }
    return Outcome{in_band == int(runs.size()),
                   std::to_string(in_band) + "/" + std::to_string(runs.size()) + " worlds within 0.05 +/- 0.02, pooled rate " +
                       fmt("%.3f", double(acc) / total) + fmt(", fresh placebos (5 worlds) %.3f", double(held_acc) / held_total)};
  });

  criterion(8, "single-env accepts the shortcut cue while triangulation rejects it", 120, [] {
    int separated = 0, se_accepts = 0, tri_rejects = 0;
    for (int seed = 1; seed <= kWorlds; ++seed) {
      auto s = micro_scenario(seed);
      s.world = shortcut_world_spec(seed, (seed - 1) % 3);
      s.baseline_env = (seed - 1) % 3;
      const auto r = run_pipeline(s);
      const auto& cue = run_of(r, "planted-cue");
      const bool se = cue.single_env && cue.single_env->accepted();
      const bool rej = !gate_from_records(cue.records, r.world.num_environments(), r.thresholds.thresholds.eta);
      se_accepts += se;
      tri_rejects += rej;
      separated += se && rej;
    }
    return Outcome{separated >= 18, std::to_string(separated) + "/20 separated (single-env accepts " + std::to_string(se_accepts) +
                                        ", triangulation rejects " + std::to_string(tri_rejects) + ")"};
  });

  criterion(9, "reference-family violations flip the planted mechanism", 120, [] {
    int flipped = 0, clean = 0;
    const auto& runs = planted_runs();
    for (std::size_t w = 0; w < runs.size(); ++w) {
      const auto st = stress_test(runs[w], micro_scenario(int(w) + 1));
      clean += st.clean_accept;
      flipped += st.flipped();
    }
    return Outcome{flipped >= 18, std::to_string(flipped) + "/20 flipped (" + std::to_string(clean) + " accepted before corruption)"};
  });

  criterion(10, "manifest hash identical for 1 and 8 workers", 180, [] {
    int same = 0;
    std::string detail;
    for (int seed = 1; seed <= 5; ++seed) {
      RunOptions one, eight;
      eight.workers = 8;
      auto s = micro_scenario(seed);
      s.stress = true;
      const auto a = run_pipeline(s, one);
      const auto b = run_pipeline(s, eight);
      const auto ha = a.manifest.at("manifest_hash").get<std::string>();
      const auto hb = b.manifest.at("manifest_hash").get<std::string>();
      same += ha == hb && ha == hex64(manifest_hash(b.manifest));
      detail += " " + ha.substr(0, 8);
    }
    return Outcome{same == 5, std::to_string(same) + "/5 identical;" + detail};
  });

  std::printf("%s: %d criteria failed\n", failures ? "FAILED" : "OK", failures);
  return failures ? 1 : 0;
}
