#pragma once

// Affine maps T_{target<-source} aligning circuit activations across
// environments, fitted by ridge least squares.

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace tri {

struct ActivationPair {
  std::vector<double> source;
  std::vector<double> target;
  std::uint64_t hash() const;
};

struct TranslationMap {
  int source_env = 0;
  int target_env = 0;
  int rows = 0; // target dimension
  int cols = 0; // source dimension
  std::vector<double> matrix; // row-major rows x cols
  std::vector<double> bias;
  double train_error = 0.0;
  double holdout_error = 0.0;
  std::vector<std::uint64_t> fit_pair_hashes;

  std::vector<double> apply(std::span<const double> a) const;
  static TranslationMap identity(int dim, int source_env, int target_env);
};

inline constexpr double kDefaultRidge = 1e-6;

// Minimizes sum ||W a_s + b - a_t||^2 + ridge ||W||_F^2 (bias unpenalized).
TranslationMap fit_map(std::span<const ActivationPair> pairs, double ridge = kDefaultRidge);

// Per-coordinate RMS residual on held-out pairs. Throws LeakageError when any
// pair was used to fit the map.
double holdout_error(const TranslationMap& map, std::span<const ActivationPair> pairs);

// Residual norm ||T a_s - a_t|| for one pair.
double residual_norm(const TranslationMap& map, const ActivationPair& pair);

// Deterministic 80/20 split on the pair content hash. Guarantees a nonempty
// holdout when there are at least two pairs.
std::pair<std::vector<ActivationPair>, std::vector<ActivationPair>> split_fit_holdout(std::span<const ActivationPair> pairs);

// fit_map on the fit split, holdout_error on the rest.
TranslationMap fit_with_holdout(std::span<const ActivationPair> pairs, double ridge = kDefaultRidge);

} // namespace tri
