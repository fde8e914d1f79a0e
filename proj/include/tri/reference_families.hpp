#pragma once

// Predicate-preserving reference families, predicate-swap siblings and the
// synthetic predicate checker.

#include "tri/world.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace tri {

struct FamilyMember {
  std::vector<double> input;
  int env = 0;
  std::uint64_t hash() const;
};

struct ReferenceFamily {
  PredicateInstance anchor;
  std::vector<FamilyMember> members;
  double quality = 1.0;
};

struct SwapSibling {
  PredicateInstance base;
  PredicateInstance swapped;
  int predicted_direction = 0; // s(pi(swapped), pi(base))
};

enum class ViolationKind { entity_swap, meaning_flip };
ViolationKind violation_kind_from_string(const std::string& s);
std::string to_string(ViolationKind k);

ReferenceFamily build_reference_family(const PredicateInstance& z, const std::vector<int>& envs, const World& world);

// c_pi: 1 iff the predicate coordinate blocks are equal. Exact in synthetic worlds.
int predicate_checker(std::span<const double> x, std::span<const double> x_prime, const World& world);

// Fraction of members whose predicate block matches the anchor's encoding.
double family_quality(const ReferenceFamily& family, const World& world);

ReferenceFamily inject_violation(const ReferenceFamily& family, ViolationKind kind, std::uint64_t rng_seed,
                                 const World& world);

SwapSibling build_swap_sibling(const PredicateInstance& z, int g_new, const World& world);

} // namespace tri
