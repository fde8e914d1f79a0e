#include "tri/reference_families.hpp"

#include "tri/error.hpp"
#include "tri/rng.hpp"

#include <algorithm>
#include <set>

namespace tri {

std::uint64_t FamilyMember::hash() const {
  Fnv1a h;
  h.update(std::span<const double>(input));
  h.update_u64(static_cast<std::uint64_t>(env));
  return h.digest();
}

ViolationKind violation_kind_from_string(const std::string& s) {
  if (s == "entity-swap") return ViolationKind::entity_swap;
  if (s == "meaning-flip") return ViolationKind::meaning_flip;
  throw DomainError("unknown violation kind '" + s + "'");
}

std::string to_string(ViolationKind k) { return k == ViolationKind::entity_swap ? "entity-swap" : "meaning-flip"; }

ReferenceFamily build_reference_family(const PredicateInstance& z, const std::vector<int>& envs, const World& world) {
  if (envs.empty()) throw DomainError("reference family needs at least one environment");
  std::set<int> distinct(envs.begin(), envs.end());
  if (distinct.size() < 2) throw DomainError("reference family must span >= 2 environments (invariance is untestable otherwise)");
  ReferenceFamily fam;
  fam.anchor = z;
  for (int e : envs) fam.members.push_back({encode_input(z, e, world), e});
  fam.quality = family_quality(fam, world);
  return fam;
}

int predicate_checker(std::span<const double> x, std::span<const double> x_prime, const World& world) {
  const auto n = static_cast<std::size_t>(world.layout.dim);
  if (x.size() != n || x_prime.size() != n) throw DomainError("predicate_checker: dimension mismatch");
  const auto end = static_cast<std::size_t>(world.layout.predicate_block_end());
  return std::equal(x.begin(), x.begin() + end, x_prime.begin()) ? 1 : 0;
}

double family_quality(const ReferenceFamily& family, const World& world) {
  if (family.members.empty()) throw DomainError("family_quality: empty family");
  const auto anchor = encode_input(family.anchor, family.members.front().env, world);
  int pass = 0;
  for (const auto& m : family.members) pass += predicate_checker(anchor, m.input, world);
  return static_cast<double>(pass) / static_cast<double>(family.members.size());
}

ReferenceFamily inject_violation(const ReferenceFamily& family, ViolationKind kind, std::uint64_t rng_seed,
                                 const World& world) {
  if (family.members.size() < 2) throw DomainError("inject_violation needs a family with >= 2 members");
  Rng rng(derive_seed(rng_seed, 0x76696f6cULL));
  ReferenceFamily out = family;
  auto& victim = out.members[uniform_index(rng, out.members.size())].input;
  const auto& L = world.layout;
  if (kind == ViolationKind::entity_swap) {
    if (world.spec.num_semantic < 2) throw DomainError("entity-swap needs >= 2 semantic values");
    const int shift = 1 + static_cast<int>(uniform_index(rng, world.spec.num_semantic - 1));
    std::rotate(victim.begin() + L.semantic_offset, victim.begin() + L.semantic_offset + (world.spec.num_semantic - shift),
                victim.begin() + L.semantic_offset + world.spec.num_semantic);
  } else {
    const int g = family.anchor.z_g;
    // A meaning flip must change what the task asks for, so prefer values the
    // abstract model scores differently; fall back to any other value.
    std::vector<int> candidates;
    for (int h = 0; h < world.domain_size(); ++h)
      if (h != g && predicted_direction(world, g, h) != 0) candidates.push_back(h);
    if (candidates.empty())
      for (int h = 0; h < world.domain_size(); ++h)
        if (h != g) candidates.push_back(h);
    const int h = candidates[uniform_index(rng, candidates.size())];
    std::fill(victim.begin() + L.predicate_offset, victim.begin() + L.nuisance_offset, 0.0);
    victim[L.predicate_offset + h] = 1.0;
  }
  out.quality = family_quality(out, world);
  return out;
}

SwapSibling build_swap_sibling(const PredicateInstance& z, int g_new, const World& world) {
  if (g_new < 0 || g_new >= world.domain_size()) throw DomainError("g_new out of range");
  if (g_new == z.z_g) throw DomainError("swap sibling must change the predicate value");
  const int dir = predicted_direction(world, z.z_g, g_new);
  if (dir == 0)
    throw DomainError("no predicted direction between '" + world.spec.predicate_domain[z.z_g] + "' and '" +
                      world.spec.predicate_domain[g_new] + "'");
  return {z, PredicateInstance{z.z_sem, g_new}, dir};
}

} // namespace tri
