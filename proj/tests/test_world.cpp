#include "doctest.h"
#include "oracles.hpp"

#include "tri/error.hpp"
#include "tri/harness.hpp"
#include "tri/rng.hpp"
#include "tri/world.hpp"

#include <cmath>

using namespace tri;

namespace {

LowLevelModel random_model(std::vector<int> widths, Activation act, std::uint64_t seed) {
  Rng rng(seed);
  LowLevelModel m;
  m.widths = std::move(widths);
  m.activation = act;
  for (std::size_t l = 0; l + 1 < m.widths.size(); ++l) {
    std::vector<double> w(static_cast<std::size_t>(m.widths[l + 1]) * m.widths[l]);
    for (auto& v : w) v = uniform_real(rng, -1.0, 1.0);
    std::vector<double> b(m.widths[l + 1]);
    for (auto& v : b) v = uniform_real(rng, -0.5, 0.5);
    m.weights.push_back(std::move(w));
    m.biases.push_back(std::move(b));
  }
  return m;
}

std::vector<double> random_input(int n, Rng& rng) {
  std::vector<double> x(n);
  for (auto& v : x) v = uniform_real(rng, -1.0, 1.0);
  return x;
}

} // namespace

TEST_CASE("encoder: flipping z_g only touches predicate coordinates") {
  const auto world = build_world(micro_world_spec(3));
  const auto& L = world.layout;
  for (int e = 0; e < 3; ++e)
    for (int s = 0; s < 6; ++s) {
      const auto a = encode_input({s, 0}, e, world);
      const auto b = encode_input({s, 2}, e, world);
      for (int i = 0; i < L.dim; ++i) {
        const bool pred = i >= L.predicate_offset && i < L.nuisance_offset;
        if (!pred) CHECK(a[i] == b[i]);
      }
      CHECK(a != b);
    }
  CHECK_THROWS_AS(encode_input({0, 9}, 0, world), DomainError);
  CHECK_THROWS_AS(encode_input({0, 0}, 3, world), DomainError);
}

TEST_CASE("forward matches an independent straight-line recursion") {
  Rng rng(11);
  for (auto act : {Activation::tanh, Activation::relu, Activation::identity}) {
    const auto m = random_model({7, 9, 6, 5, 4}, act, 100 + static_cast<int>(act));
    for (int trial = 0; trial < 20; ++trial) {
      const auto x = random_input(7, rng);
      const auto want = oracle::forward(m, x);
      const auto got = forward(m, x);
      for (int l = 0; l <= m.hidden_layers(); ++l)
        for (std::size_t u = 0; u < got.sites[l].size(); ++u) CHECK(got.sites[l][u] == doctest::Approx(want[l][u]).epsilon(1e-12));
      for (std::size_t o = 0; o < got.logits.size(); ++o) CHECK(got.logits[o] == doctest::Approx(want.back()[o]).epsilon(1e-12));
    }
  }
}

TEST_CASE("pinned sites hold their value and downstream is recomputed") {
  Rng rng(5);
  const auto m = random_model({5, 6, 6, 3}, Activation::tanh, 77);
  const auto x = random_input(5, rng);
  const SitePin pins[] = {{{1, 2}, 0.75}, {{2, 0}, -0.3}};
  const auto got = forward(m, x, pins);
  const auto want = oracle::forward(m, x, {{1, 2, 0.75}, {2, 0, -0.3}});
  CHECK(got.at({1, 2}) == 0.75);
  CHECK(got.at({2, 0}) == -0.3);
  for (std::size_t o = 0; o < 3; ++o) CHECK(got.logits[o] == doctest::Approx(want.back()[o]).epsilon(1e-12));
  const SitePin bad[] = {{{3, 0}, 1.0}};
  CHECK_THROWS_AS(forward(m, x, bad), DomainError);
}

TEST_CASE("identity layer and zero input") {
  LowLevelModel m;
  m.widths = {3, 3, 3};
  m.activation = Activation::identity;
  m.weights = {{1, 0, 0, 0, 1, 0, 0, 0, 1}, {2, 0, 0, 0, 2, 0, 0, 0, 2}};
  m.biases = {{0, 0, 0}, {0, 0, 0}};
  const std::vector<double> x{1.0, -2.0, 0.5};
  const auto t = forward(m, x);
  CHECK(t.sites[1] == x);
  CHECK(t.logits == std::vector<double>{2.0, -4.0, 1.0});
  m.biases[1] = {0.1, 0.2, 0.3};
  const auto z = forward(m, std::vector<double>{0, 0, 0});
  CHECK(z.logits == m.biases[1]);
  CHECK_THROWS_AS(forward(m, std::vector<double>{1, 2}), DomainError);
}

TEST_CASE("forward_from agrees with a full pass") {
  const auto world = build_world(micro_world_spec(4));
  const auto x = encode_input({1, 2}, 1, world);
  const auto full = forward(world.model, x);
  const auto tail = forward_from(world.model, 1, full.sites[1]);
  CHECK(tail.logits == full.logits);
}

TEST_CASE("text score matches direct summation") {
  ScoreSpec spec;
  spec.groups = {{"incl", {0, 1, 6}}, {"m", {2, 3}}, {"f", {4, 5}}};
  Rng rng(8);
  for (int t = 0; t < 50; ++t) {
    auto logits = random_input(8, rng);
    for (auto& v : logits) v *= 5;
    const double want = oracle::text_score(logits, {0, 1, 6}, {2, 3}, {4, 5});
    CHECK(score_from_logits(logits, spec, std::nullopt) == doctest::Approx(want).epsilon(1e-12));
  }
  // Equal logits: log(3) - log(2).
  CHECK(score_from_logits(std::vector<double>(8, 0.0), spec, std::nullopt) == doctest::Approx(std::log(1.5)));
  // Large logits must not overflow.
  std::vector<double> big(8, 800.0);
  CHECK(std::isfinite(score_from_logits(big, spec, std::nullopt)));
}

TEST_CASE("missing output group is a lexicalization failure") {
  ScoreSpec spec;
  spec.groups = {{"incl", {0}}, {"m", {}}, {"f", {1}}};
  try {
    score_from_logits(std::vector<double>{0, 0}, spec, std::nullopt);
    FAIL("expected ScoringError");
  } catch (const ScoringError& e) {
    CHECK(e.category() == "Lexicalization failure");
  }
}

TEST_CASE("bimodal score is the log-probability of the correct attribute") {
  const auto world = build_world(bimodal_world_spec(2, 3));
  const auto x = encode_input({0, 1}, 0, world);
  const auto t = forward(world.model, x, {}, InputLabel{{0, 1}, 0});
  long double all = 0, tgt = 0;
  for (std::size_t i = 0; i < t.logits.size(); ++i) all += std::exp(static_cast<long double>(t.logits[i]));
  for (int i : world.spec.output_groups.at("attr1")) tgt += std::exp(static_cast<long double>(t.logits[i]));
  CHECK(task_score(t, world.score) == doctest::Approx(static_cast<double>(std::log(tgt / all))).epsilon(1e-12));
  CHECK(task_score(t, world.score) < 0.0);
  const auto unlabeled = forward(world.model, x);
  CHECK_THROWS_AS(task_score(unlabeled, world.score), DomainError);
  const auto channels = encode_channels({0, 1}, 0, world);
  CHECK(channels.image.size() + channels.text.size() == x.size());
}

TEST_CASE("score gradient matches finite differences") {
  const auto world = build_world(micro_world_spec(9));
  Rng rng(3);
  auto logits = random_input(world.model.output_dim(), rng);
  const auto g = score_gradient(logits, world.score, std::nullopt);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    auto hi = logits, lo = logits;
    hi[i] += 1e-6;
    lo[i] -= 1e-6;
    const double fd = (score_from_logits(hi, world.score, std::nullopt) - score_from_logits(lo, world.score, std::nullopt)) / 2e-6;
    CHECK(g[i] == doctest::Approx(fd).epsilon(1e-6));
  }
}

TEST_CASE("knocking out the planted predicate pathway removes z_g from the score") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto world = build_world(micro_world_spec(seed));
    const auto gt = ground_truth(world);
    std::vector<SitePin> pins;
    for (auto s : gt.predicate.sites) pins.push_back({s, 0.0});
    for (int e = 0; e < 3; ++e)
      for (int sem = 0; sem < 6; ++sem) {
        const double ref = task_score(forward(world.model, encode_input({sem, 0}, e, world), pins), world.score);
        for (int g = 1; g < world.domain_size(); ++g)
          CHECK(task_score(forward(world.model, encode_input({sem, g}, e, world), pins), world.score) ==
                doctest::Approx(ref).epsilon(1e-12));
      }
  }
}

TEST_CASE("planted predicate pathway orders the clean scores") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto world = build_world(micro_world_spec(seed));
    for (int e = 0; e < 3; ++e)
      for (int sem = 0; sem < 6; ++sem) {
        auto score = [&](int g) { return task_score(forward(world.model, encode_input({sem, g}, e, world)), world.score); };
        CHECK(score(2) > score(0)); // incl above m
        CHECK(score(2) > score(1));
        for (int b = 0; b < 4; ++b)
          for (int s = 0; s < 4; ++s) {
            const int dir = predicted_direction(world, b, s);
            if (dir != 0) CHECK((score(s) - score(b)) * dir > 0);
          }
      }
  }
}

TEST_CASE("cue sites carry no score signal outside shortcut worlds") {
  const auto world = build_world(micro_world_spec(6));
  const auto gt = ground_truth(world);
  const auto x = encode_input({2, 2}, 1, world);
  std::vector<SitePin> pins;
  for (auto s : gt.cue.sites) pins.push_back({s, 0.9});
  CHECK(forward(world.model, x, pins).logits == forward(world.model, x).logits);
}

TEST_CASE("world construction is deterministic in the seed") {
  const auto a = build_world(micro_world_spec(12));
  const auto b = build_world(micro_world_spec(12));
  const auto c = build_world(micro_world_spec(13));
  CHECK(a.model.weights == b.model.weights);
  CHECK(a.model.biases == b.model.biases);
  CHECK(a.model.weights != c.model.weights);
}

TEST_CASE("spec validation names the violated invariant") {
  auto base = micro_world_spec(1);
  auto expect = [](WorldSpec s, const char* needle) {
    try {
      validate(s);
      FAIL("expected SpecError");
    } catch (const SpecError& e) {
      CHECK(std::string(e.what()).find(needle) != std::string::npos);
    }
  };
  {
    auto s = base;
    s.num_environments = 1;
    expect(s, "num_environments");
  }
  {
    auto s = base;
    s.layer_widths = {24, 0};
    expect(s, "zero-width");
  }
  {
    auto s = base;
    s.planted_predicate_sites.insert({1, 40});
    expect(s, "outside layer_widths");
  }
  {
    auto s = base;
    s.planted_cue_sites.insert(*s.planted_predicate_sites.begin());
    expect(s, "disjoint");
  }
  {
    auto s = base;
    s.output_groups["m"] = {0};
    expect(s, "pairwise disjoint");
  }
  {
    auto s = base;
    s.output_groups.erase("f");
    expect(s, "'f'");
  }
  {
    auto s = base;
    s.input_dim = 5;
    expect(s, "input_dim");
  }
  {
    auto s = base;
    s.layer_widths = {24, 24};
    expect(s, "every hidden layer");
  }
}

TEST_CASE("deeper worlds keep the planted pathway effective") {
  auto spec = micro_world_spec(2);
  spec.layer_widths = {16, 16};
  assign_planted_sites(spec, 3, 2, 99);
  const auto world = build_world(spec);
  const auto gt = ground_truth(world);
  CHECK(gt.predicate.size() == 6);
  CHECK(gt.cue.size() == 4);
  auto score = [&](int g) { return task_score(forward(world.model, encode_input({0, g}, 0, world)), world.score); };
  CHECK(score(2) > score(0));
}

TEST_CASE("abstract model predictions") {
  const auto world = build_world(micro_world_spec(1));
  CHECK(predicted_direction(world, 0, 2) == 1);  // m -> incl
  CHECK(predicted_direction(world, 2, 1) == -1); // incl -> f
  CHECK(predicted_direction(world, 0, 1) == 0);
  CHECK(predicted_direction(world, 3, 2) == 1);
  CHECK(is_knockout_target(world, 2));
  CHECK_FALSE(is_knockout_target(world, 0));
}
