#include "tri/discovery.hpp"

#include "tri/error.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>

namespace tri {

namespace {

std::vector<double> pre_activation_delta(const LowLevelModel& model, const ActivationTrace& t,
                                         const std::vector<std::vector<double>>& grads, int layer) {
  // dM/dpre for units of `layer` (a hidden layer).
  const auto& post = t.sites[layer];
  std::vector<double> d(post.size());
  for (std::size_t v = 0; v < post.size(); ++v) {
    const double deriv = model.activation == Activation::relu ? (post[v] > 0.0 ? 1.0 : 0.0)
                                                              : activate_derivative(model.activation, 0.0, post[v]);
    d[v] = grads[layer][v] * deriv;
  }
  return d;
}

ActivationTrace clean_trace(const World& world, const ScoredInput& in) { return forward(world.model, in.x, {}, in.label); }

// Which binary group leads the text score (0 for bimodal scores, which are smooth).
int score_branch(std::span<const double> logits, const ScoreSpec& spec) {
  if (spec.modality != Modality::text_only) return 0;
  const auto m = spec.groups.find("m");
  const auto f = spec.groups.find("f");
  if (m == spec.groups.end() || f == spec.groups.end()) return 0;
  return log_sum_exp(logits, m->second) >= log_sum_exp(logits, f->second) ? 1 : 0;
}

} // namespace

Baseline Baseline::zero(const LowLevelModel& model) {
  Baseline b;
  b.kind = BaselineKind::zero;
  for (int l = 0; l < model.site_layers(); ++l) b.layers.emplace_back(model.widths[l], 0.0);
  return b;
}

Baseline Baseline::mean(const LowLevelModel& model, std::span<const std::vector<double>> context) {
  if (context.empty()) throw DomainError("mean baseline needs a nonempty context set");
  Baseline b = zero(model);
  b.kind = BaselineKind::mean;
  for (const auto& x : context) {
    const auto t = forward(model, x);
    for (int l = 0; l < model.site_layers(); ++l)
      for (int u = 0; u < model.widths[l]; ++u) b.layers[l][u] += t.sites[l][u];
  }
  for (auto& layer : b.layers)
    for (auto& v : layer) v /= static_cast<double>(context.size());
  return b;
}

std::vector<EdgeId> all_edges(const LowLevelModel& model, int first_layer) {
  std::vector<EdgeId> edges;
  for (int l = std::max(0, first_layer); l < model.site_layers(); ++l)
    for (int u = 0; u < model.widths[l]; ++u)
      for (int v = 0; v < model.widths[l + 1]; ++v) edges.push_back({{l, u}, {l + 1, v}});
  return edges;
}

AttributionTable eap_ig(const World& world, const ScoredInput& input, std::span<const EdgeId> edges,
                        const Baseline& baseline, int steps) {
  if (steps < 1) throw DomainError("eap_ig: steps must be >= 1");
  const auto& model = world.model;
  const int H = model.hidden_layers();
  for (const auto& e : edges)
    if (!model.valid(e.from) || e.to.layer != e.from.layer + 1 || e.to.unit < 0 || e.to.unit >= model.widths[e.to.layer])
      throw DomainError("eap_ig: invalid edge");

  AttributionTable table;
  table.baseline = baseline.kind;
  table.steps = steps;
  const auto clean = clean_trace(world, input);

  std::map<int, std::vector<const EdgeId*>> by_layer;
  for (const auto& e : edges) by_layer[e.from.layer].push_back(&e);

  for (const auto& [l, cut] : by_layer) {
    const auto& a = clean.sites[l];
    const auto& abar = baseline.layers[l];
    // Accumulated dM/dpre of layer l+1 (or dM/dlogits when l == H).
    std::vector<double> acc(model.widths[l + 1], 0.0);
    std::vector<double> a_alpha(a.size());
    auto at = [&](double alpha) {
      for (std::size_t u = 0; u < a.size(); ++u) a_alpha[u] = abar[u] + alpha * (a[u] - abar[u]);
      return forward_from(model, l, a_alpha, input.label);
    };
    // Adds weight * dM/dpre at the given point of the path.
    auto accumulate = [&](double alpha, double weight) {
      const auto t = at(alpha);
      const auto g = score_gradient(t.logits, world.score, input.label);
      if (l == H) {
        for (std::size_t v = 0; v < g.size(); ++v) acc[v] += weight * g[v];
      } else {
        const auto grads = backprop(model, t, g, l + 1);
        const auto d = pre_activation_delta(model, t, grads, l + 1);
        for (std::size_t v = 0; v < d.size(); ++v) acc[v] += weight * d[v];
      }
    };
    // The text score has a kink where the leading binary group changes; a
    // step that straddles it is split there so the midpoint rule stays
    // second order.
    auto branch = [&](double alpha) { return score_branch(at(alpha).logits, world.score); };
    int left = branch(0.0);
    for (int k = 0; k < steps; ++k) {
      const double lo = static_cast<double>(k) / steps;
      const double hi = static_cast<double>(k + 1) / steps;
      const int right = branch(hi);
      if (right == left) {
        accumulate((k + 0.5) / steps, 1.0);
      } else {
        double x0 = lo, x1 = hi;
        for (int it = 0; it < 60 && x1 - x0 > 1e-15; ++it) {
          const double mid = 0.5 * (x0 + x1);
          (branch(mid) == left ? x0 : x1) = mid;
        }
        const double cut_at = 0.5 * (x0 + x1);
        accumulate(0.5 * (lo + cut_at), (cut_at - lo) * steps);
        accumulate(0.5 * (cut_at + hi), (hi - cut_at) * steps);
      }
      left = right;
    }
    for (const EdgeId* e : cut) {
      const double w = model.weight(l, e->to.unit, e->from.unit);
      table.scores[*e] = (a[e->from.unit] - abar[e->from.unit]) * w * acc[e->to.unit] / steps;
    }
  }
  return table;
}

AttributionTable mean_abs_attribution(const World& world, std::span<const ScoredInput> inputs,
                                      std::span<const EdgeId> edges, const Baseline& baseline, int steps) {
  if (inputs.empty()) throw DomainError("mean_abs_attribution: no inputs");
  AttributionTable out;
  out.baseline = baseline.kind;
  out.steps = steps;
  for (const auto& e : edges) out.scores[e] = 0.0;
  for (const auto& in : inputs) {
    const auto t = eap_ig(world, in, edges, baseline, steps);
    for (const auto& [e, v] : t.scores) out.scores[e] += std::abs(v);
  }
  for (auto& [_, v] : out.scores) v /= static_cast<double>(inputs.size());
  return out;
}

double restricted_score(const World& world, const ScoredInput& input, const std::set<EdgeId>& removed,
                        const Baseline& baseline) {
  const auto& model = world.model;
  const int H = model.hidden_layers();
  std::vector<double> a(input.x.begin(), input.x.end());
  if (static_cast<int>(a.size()) != model.input_dim()) throw DomainError("restricted_score: input dimension mismatch");
  auto it = removed.begin();
  std::vector<double> logits;
  for (int l = 0; l <= H; ++l) {
    const int rows = model.widths[l + 1];
    const int cols = model.widths[l];
    std::vector<double> pre(rows);
    for (int v = 0; v < rows; ++v) {
      double s = model.biases[l][v];
      const double* w = model.weights[l].data() + static_cast<std::size_t>(v) * cols;
      for (int u = 0; u < cols; ++u) s += w[u] * a[u];
      pre[v] = s;
    }
    while (it != removed.end() && it->from.layer < l) ++it;
    for (; it != removed.end() && it->from.layer == l; ++it) {
      const int u = it->from.unit;
      pre[it->to.unit] -= model.weight(l, it->to.unit, u) * (a[u] - baseline.layers[l][u]);
    }
    if (l == H) {
      logits = std::move(pre);
    } else {
      for (auto& p : pre) p = activate(model.activation, p);
      a = std::move(pre);
    }
  }
  return score_from_logits(logits, world.score, input.label);
}

double relative_deviation(double restricted, double full, double eps_m) {
  return std::abs(restricted - full) / (std::abs(full) + eps_m);
}

namespace {

struct Deviation {
  double mean = 0.0;
  double worst = 0.0;
};

Deviation deviation_over(const World& world, std::span<const ScoredInput> inputs, std::span<const double> full,
                         const std::set<EdgeId>& removed, const Baseline& baseline, double eps_m) {
  Deviation d;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const double r = relative_deviation(restricted_score(world, inputs[i], removed, baseline), full[i], eps_m);
    d.mean += r;
    d.worst = std::max(d.worst, r);
  }
  d.mean /= static_cast<double>(inputs.size());
  return d;
}

Circuit sites_of(const std::set<EdgeId>& kept, int hidden, const std::string& label) {
  std::vector<SiteId> sites;
  for (const auto& e : kept) {
    sites.push_back(e.from);
    if (e.to.layer <= hidden) sites.push_back(e.to);
  }
  return Circuit(std::move(sites), label);
}

} // namespace

PruneResult greedy_prune(const AttributionTable& table, const World& world, std::span<const ScoredInput> inputs,
                         const Baseline& baseline, double keep_threshold, double eps_m) {
  if (inputs.empty()) throw DomainError("greedy_prune: no inputs");
  std::vector<double> full;
  full.reserve(inputs.size());
  for (const auto& in : inputs) full.push_back(task_score(clean_trace(world, in), world.score));

  std::set<EdgeId> removed;
  Deviation dev = deviation_over(world, inputs, full, removed, baseline, eps_m);
  if (dev.mean > keep_threshold) throw DegenerateWorldError("full graph already violates the faithfulness bound");

  std::vector<std::pair<double, EdgeId>> order;
  for (const auto& [e, v] : table.scores) {
    if (!std::isfinite(v)) throw NumericalError("non-finite attribution");
    order.emplace_back(std::abs(v), e);
  }
  std::sort(order.begin(), order.end());

  for (const auto& [_, e] : order) {
    removed.insert(e);
    const auto next = deviation_over(world, inputs, full, removed, baseline, eps_m);
    if (!(next.mean <= keep_threshold)) {
      removed.erase(e);
      break;
    }
    dev = next;
  }

  PruneResult r;
  for (const auto& [e, _] : table.scores)
    if (!removed.count(e)) r.kept.insert(e);
  r.circuit = sites_of(r.kept, world.model.hidden_layers(), "discovered");
  r.mean_deviation = dev.mean;
  r.worst_deviation = dev.worst;
  return r;
}

std::vector<EnvDiscovery> discover_predicate_circuits(const World& world, std::span<const ScoredInput> dataset,
                                                      const DiscoveryOptions& opts) {
  std::vector<EnvDiscovery> out;
  const auto edges = all_edges(world.model, opts.first_layer);
  for (int e = 0; e < world.num_environments(); ++e) {
    std::vector<ScoredInput> items;
    std::vector<std::vector<double>> context;
    for (const auto& in : dataset)
      if (in.label.env == e) {
        items.push_back(in);
        context.push_back(in.x);
      }
    if (items.empty()) throw DomainError("discovery: environment " + std::to_string(e) + " has no dataset items");
    const Baseline base =
        opts.baseline == BaselineKind::mean ? Baseline::mean(world.model, context) : Baseline::zero(world.model);
    EnvDiscovery d;
    d.env = e;
    d.table = mean_abs_attribution(world, items, edges, base, opts.steps);
    d.pruned = greedy_prune(d.table, world, items, base, opts.keep_threshold, opts.eps_m);
    d.pruned.circuit.label = "discovered-predicate/e" + std::to_string(e);
    out.push_back(std::move(d));
  }
  return out;
}

namespace {

struct Probe {
  Eigen::MatrixXd beta; // width x K
  Eigen::VectorXd mean_x;
  Eigen::VectorXd mean_y;
};

Probe fit_probe(const std::vector<std::vector<double>>& feats, const std::vector<int>& env, int K, double ridge) {
  const int n = static_cast<int>(feats.size());
  const int d = static_cast<int>(feats.front().size());
  Eigen::MatrixXd X(n, d);
  Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(n, K);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) X(i, j) = feats[i][j];
    Y(i, env[i]) = 1.0;
  }
  Probe p;
  p.mean_x = X.colwise().mean();
  p.mean_y = Y.colwise().mean();
  X.rowwise() -= p.mean_x.transpose();
  Y.rowwise() -= p.mean_y.transpose();
  Eigen::MatrixXd A = X.transpose() * X;
  A.diagonal().array() += ridge;
  p.beta = A.llt().solve(X.transpose() * Y);
  return p;
}

double probe_margin(const Probe& p, std::span<const double> a, int env) {
  const int K = static_cast<int>(p.mean_y.size());
  Eigen::VectorXd s = p.mean_y;
  for (int j = 0; j < static_cast<int>(a.size()); ++j)
    for (int k = 0; k < K; ++k) s(k) += (a[j] - p.mean_x(j)) * p.beta(j, k);
  double other = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < K; ++k)
    if (k != env) other = std::max(other, s(k));
  return s(env) - other;
}

int runner_up(const Probe& p, std::span<const double> a, int env) {
  const int K = static_cast<int>(p.mean_y.size());
  int best = -1;
  double hi = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < K; ++k) {
    if (k == env) continue;
    double s = p.mean_y(k);
    for (int j = 0; j < static_cast<int>(a.size()); ++j) s += (a[j] - p.mean_x(j)) * p.beta(j, k);
    if (s > hi) {
      hi = s;
      best = k;
    }
  }
  return best;
}

} // namespace

CueDiscovery discover_cue_circuit(const World& world, std::span<const ScoredInput> dataset, const DiscoveryOptions& opts) {
  std::set<int> envs;
  for (const auto& in : dataset) envs.insert(in.label.env);
  if (envs.size() < 2) throw DomainError("cue discovery needs a dataset spanning at least two environments");

  const auto& model = world.model;
  const int K = world.num_environments();
  std::vector<ActivationTrace> traces;
  std::vector<int> env;
  for (const auto& in : dataset) {
    traces.push_back(clean_trace(world, in));
    env.push_back(in.label.env);
  }
  const std::size_t n = traces.size();

  CueDiscovery out;
  std::vector<SiteId> kept_sites;
  double dev_sum = 0.0;
  int dev_layers = 0;
  for (int l = 1; l <= model.hidden_layers(); ++l) {
    std::vector<std::vector<double>> feats;
    for (const auto& t : traces) feats.push_back(t.sites[l]);
    const Probe probe = fit_probe(feats, env, K, opts.probe_ridge);
    const int w = model.widths[l];
    std::vector<double> abar(w, 0.0);
    for (const auto& f : feats)
      for (int u = 0; u < w; ++u) abar[u] += f[u] / static_cast<double>(n);

    std::vector<double> score(w, 0.0);
    std::vector<double> a_alpha(w);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& a = feats[i];
      std::vector<double> acc(w, 0.0);
      for (int k = 0; k < opts.steps; ++k) {
        const double alpha = (k + 0.5) / opts.steps;
        for (int u = 0; u < w; ++u) a_alpha[u] = abar[u] + alpha * (a[u] - abar[u]);
        const int r = runner_up(probe, a_alpha, env[i]);
        for (int u = 0; u < w; ++u) acc[u] += probe.beta(u, env[i]) - probe.beta(u, r);
      }
      for (int u = 0; u < w; ++u) score[u] += std::abs((a[u] - abar[u]) * acc[u] / opts.steps);
    }
    for (auto& s : score) s /= static_cast<double>(n);
    for (int u = 0; u < w; ++u) out.site_scores[{l, u}] = score[u];
    if (*std::max_element(score.begin(), score.end()) < opts.cue_floor) continue;

    std::vector<double> full(n);
    for (std::size_t i = 0; i < n; ++i) full[i] = probe_margin(probe, feats[i], env[i]);
    auto deviation = [&](const std::vector<bool>& removed, double* worst) {
      double mean = 0.0;
      std::vector<double> a;
      for (std::size_t i = 0; i < n; ++i) {
        a = feats[i];
        for (int u = 0; u < w; ++u)
          if (removed[u]) a[u] = abar[u];
        const double r = relative_deviation(probe_margin(probe, a, env[i]), full[i], opts.eps_m);
        mean += r;
        if (worst) *worst = std::max(*worst, r);
      }
      return mean / static_cast<double>(n);
    };

    std::vector<int> order(w);
    for (int u = 0; u < w; ++u) order[u] = u;
    std::stable_sort(order.begin(), order.end(), [&](int x, int y) { return score[x] < score[y]; });
    std::vector<bool> removed(w, false);
    for (int u : order) {
      removed[u] = true;
      if (!(deviation(removed, nullptr) <= opts.keep_threshold)) {
        removed[u] = false;
        break;
      }
    }
    double worst = 0.0;
    dev_sum += deviation(removed, &worst);
    ++dev_layers;
    out.worst_deviation = std::max(out.worst_deviation, worst);
    for (int u = 0; u < w; ++u)
      if (!removed[u]) kept_sites.push_back({l, u});
  }
  out.mean_deviation = dev_layers ? dev_sum / dev_layers : 0.0;
  out.circuit = Circuit(std::move(kept_sites), "discovered-cue");
  return out;
}

void write_attribution_csv(std::ostream& os, const AttributionTable& table) {
  os << "from_layer,from_unit,to_layer,to_unit,attribution\n";
  os << std::setprecision(17);
  for (const auto& [e, v] : table.scores)
    os << e.from.layer << ',' << e.from.unit << ',' << e.to.layer << ',' << e.to.unit << ',' << v << '\n';
}

} // namespace tri
