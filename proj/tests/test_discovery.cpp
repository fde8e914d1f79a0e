#include "doctest.h"
#include "oracles.hpp"

#include "tri/discovery.hpp"
#include "tri/error.hpp"
#include "tri/harness.hpp"
#include "tri/rng.hpp"

#include <cmath>
#include <sstream>

using namespace tri;

namespace {

std::vector<ScoredInput> micro_dataset(const World& world) {
  std::vector<ScoredInput> out;
  for (int e = 0; e < world.num_environments(); ++e)
    for (int s = 0; s < world.spec.num_semantic; ++s)
      for (int g = 0; g < world.domain_size(); ++g) out.push_back({encode_input({s, g}, e, world), InputLabel{{s, g}, e}});
  return out;
}

World linear_world(std::uint64_t seed) {
  auto spec = micro_world_spec(seed);
  spec.activation = Activation::identity;
  spec.output_groups = {{"incl", {0}}, {"m", {1}}, {"f", {2}}};
  spec.output_dim = 3;
  spec.bias_scale = 0.0;
  return build_world(spec);
}

double cut_sum(const AttributionTable& t, int layer) {
  double s = 0;
  for (const auto& [e, v] : t.scores)
    if (e.from.layer == layer) s += v;
  return s;
}

double score_at(const World& w, const ScoredInput& in) { return task_score(forward(w.model, in.x, {}, in.label), w.score); }

// Restricted forward pass written out independently: an edge that is not
// kept transmits the baseline value of its source unit.
double oracle_restricted(const World& world, const ScoredInput& in, const std::set<EdgeId>& kept, int first_layer,
                         const Baseline& base) {
  const auto& m = world.model;
  std::vector<double> a = in.x;
  for (int l = 0; l <= m.hidden_layers(); ++l) {
    std::vector<double> next(m.widths[l + 1]);
    for (int v = 0; v < m.widths[l + 1]; ++v) {
      long double s = m.biases[l][v];
      for (int u = 0; u < m.widths[l]; ++u) {
        const bool edge_kept = l < first_layer || kept.count(EdgeId{{l, u}, {l + 1, v}});
        s += m.weight(l, v, u) * (edge_kept ? a[u] : base.layers[l][u]);
      }
      next[v] = static_cast<double>(s);
    }
    if (l < m.hidden_layers())
      for (auto& t : next) t = oracle::act(m.activation, t);
    a = next;
  }
  return score_from_logits(a, world.score, in.label);
}

} // namespace

TEST_CASE("edge enumeration") {
  const auto world = build_world(micro_world_spec(1));
  const auto all = all_edges(world.model, 0);
  CHECK(all.size() == static_cast<std::size_t>(world.layout.dim * 24 + 24 * 8));
  CHECK(all_edges(world.model, 1).size() == 24u * 8u);
}

TEST_CASE("attribution is exact on linear worlds") {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto world = linear_world(seed);
    const auto edges = all_edges(world.model, 0);
    const auto base = Baseline::zero(world.model);
    for (const auto& in : micro_dataset(world)) {
      if (in.label.env != 0 || in.label.z.z_sem > 1) continue;
      const auto one = eap_ig(world, in, edges, base, 1);
      const auto many = eap_ig(world, in, edges, base, 1024);
      for (const auto& [e, v] : one.scores) CHECK(std::abs(v - many.scores.at(e)) <= 1e-12);
      const double gap = score_at(world, in) - score_from_logits(forward(world.model, std::vector<double>(in.x.size(), 0.0)).logits, world.score, in.label);
      CHECK(std::abs(cut_sum(one, 0) - gap) <= 1e-12);
    }
  }
}

TEST_CASE("completeness on tanh worlds at 64 steps") {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto world = build_world(micro_world_spec(seed));
    const auto data = micro_dataset(world);
    std::vector<std::vector<double>> ctx;
    for (const auto& d : data) ctx.push_back(d.x);
    for (const auto& base : {Baseline::zero(world.model), Baseline::mean(world.model, ctx)}) {
      const auto edges = all_edges(world.model, 0);
      for (std::size_t i = 0; i < data.size(); i += 7) {
        const auto t = eap_ig(world, data[i], edges, base, 64);
        for (int l = 0; l <= world.model.hidden_layers(); ++l) {
          const double gap = score_at(world, data[i]) -
                             score_from_logits(forward_from(world.model, l, base.layers[l]).logits, world.score, data[i].label);
          CHECK(std::abs(cut_sum(t, l) - gap) < 1e-3);
        }
      }
    }
  }
}

TEST_CASE("backprop matches central finite differences") {
  auto spec = micro_world_spec(5);
  spec.layer_widths = {12, 10};
  assign_planted_sites(spec, 3, 2, 5);
  const auto world = build_world(spec);
  const auto data = micro_dataset(world);
  for (std::size_t i = 0; i < data.size(); i += 11) {
    const auto t = forward(world.model, data[i].x);
    const auto g = score_gradient(t.logits, world.score, data[i].label);
    const auto grads = backprop(world.model, t, g, 0);
    for (int l = 0; l <= world.model.hidden_layers(); ++l)
      for (int u = 0; u < world.model.widths[l]; ++u) {
        auto hi = t.sites[l], lo = t.sites[l];
        hi[u] += 1e-5;
        lo[u] -= 1e-5;
        const double fd = (score_from_logits(forward_from(world.model, l, hi).logits, world.score, std::nullopt) -
                           score_from_logits(forward_from(world.model, l, lo).logits, world.score, std::nullopt)) / 2e-5;
        CHECK(std::abs(grads[l][u] - fd) <= 1e-6 * std::max(std::abs(fd), 1e-3));
      }
  }
}

TEST_CASE("a single carrying path is recovered exactly") {
  World world;
  world.score.groups = {{"incl", {0}}, {"m", {1}}, {"f", {2}}};
  auto& m = world.model;
  m.widths = {2, 2, 3};
  m.activation = Activation::identity;
  m.weights = {{1, 0, 0, 0}, {2, 0, 0, 0, 0, 0}};
  m.biases = {{0, 0}, {0, 0, 0}};
  const std::vector<ScoredInput> inputs{{{1.0, 0.7}, InputLabel{}}, {{2.0, -0.3}, InputLabel{}}};
  const auto base = Baseline::zero(m);
  const auto edges = all_edges(m, 0);
  const auto table = mean_abs_attribution(world, inputs, edges, base, 8);
  const auto r = greedy_prune(table, world, inputs, base);
  CHECK(r.circuit == Circuit({{0, 0}, {1, 0}}, ""));
  CHECK(r.kept.size() == 2);
  CHECK(r.mean_deviation == 0.0);
}

TEST_CASE("pruned circuits re-verify the faithfulness bound") {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto world = build_world(micro_world_spec(seed));
    const auto data = micro_dataset(world);
    DiscoveryOptions opts;
    opts.steps = 16;
    const auto found = discover_predicate_circuits(world, data, opts);
    REQUIRE(found.size() == 3);
    for (const auto& d : found) {
      std::vector<std::vector<double>> ctx;
      std::vector<ScoredInput> env_items;
      for (const auto& in : data)
        if (in.label.env == d.env) {
          ctx.push_back(in.x);
          env_items.push_back(in);
        }
      const auto base = Baseline::mean(world.model, ctx);
      double mean = 0;
      for (const auto& in : env_items) {
        const double full = score_at(world, in);
        mean += std::abs(oracle_restricted(world, in, d.pruned.kept, opts.first_layer, base) - full) / (std::abs(full) + 1e-6);
      }
      mean /= static_cast<double>(env_items.size());
      CHECK(mean <= 0.1);
      CHECK(mean == doctest::Approx(d.pruned.mean_deviation).epsilon(1e-9));
      CHECK_FALSE(d.pruned.circuit.empty());
    }
  }
}

TEST_CASE("an infinite tolerance prunes everything") {
  const auto world = build_world(micro_world_spec(2));
  const auto data = micro_dataset(world);
  const auto base = Baseline::zero(world.model);
  const auto edges = all_edges(world.model, 1);
  const auto table = mean_abs_attribution(world, std::span(data).subspan(0, 8), edges, base, 4);
  const auto r = greedy_prune(table, world, std::span(data).subspan(0, 8), base, std::numeric_limits<double>::infinity());
  CHECK(r.circuit.empty());
  CHECK(r.kept.empty());
}

TEST_CASE("an unfaithful full graph is degenerate") {
  const auto world = build_world(micro_world_spec(2));
  const auto data = micro_dataset(world);
  const auto base = Baseline::zero(world.model);
  const auto table = mean_abs_attribution(world, std::span(data).subspan(0, 4), all_edges(world.model, 1), base, 2);
  CHECK_THROWS_AS(greedy_prune(table, world, std::span(data).subspan(0, 4), base, -1.0), DegenerateWorldError);
}

TEST_CASE("cue discovery finds the planted cue and stays off the predicate path") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto world = build_world(micro_world_spec(seed));
    const auto gt = ground_truth(world);
    const auto data = micro_dataset(world);
    DiscoveryOptions opts;
    opts.steps = 16;
    const auto cue = discover_cue_circuit(world, data, opts);
    for (auto s : gt.cue.sites) CHECK(cue.circuit.contains(s));
    for (const auto& d : discover_predicate_circuits(world, data, opts))
      for (auto s : cue.circuit.sites) CHECK_FALSE(d.pruned.circuit.contains(s));
  }
}

TEST_CASE("worlds without an environment cue yield an empty cue circuit") {
  const auto world = build_world(micro_world_spec(4, 3, 0));
  const auto cue = discover_cue_circuit(world, micro_dataset(world));
  CHECK(cue.circuit.empty());
}

TEST_CASE("cue discovery needs two environments") {
  const auto world = build_world(micro_world_spec(4));
  auto data = micro_dataset(world);
  std::erase_if(data, [](const ScoredInput& s) { return s.label.env != 0; });
  CHECK_THROWS_AS(discover_cue_circuit(world, data), DomainError);
}

TEST_CASE("attribution csv") {
  AttributionTable t;
  t.scores[{{1, 2}, {2, 0}}] = 0.5;
  std::ostringstream os;
  write_attribution_csv(os, t);
  CHECK(os.str() == "from_layer,from_unit,to_layer,to_unit,attribution\n1,2,2,0,0.5\n");
}
