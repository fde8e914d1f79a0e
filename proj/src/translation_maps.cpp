#include "tri/translation_maps.hpp"

#include "tri/error.hpp"
#include "tri/kernels.hpp"
#include "tri/rng.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <set>

namespace tri {

std::uint64_t ActivationPair::hash() const {
  Fnv1a h;
  h.update(std::span<const double>(source));
  h.update_u64(0x7c);
  h.update(std::span<const double>(target));
  return h.digest();
}

std::vector<double> TranslationMap::apply(std::span<const double> a) const {
  if (static_cast<int>(a.size()) != cols) throw DomainError("translation map applied to a vector of the wrong dimension");
  std::vector<double> out(rows);
  kernels::active().gemv(matrix.data(), rows, cols, a.data(), bias.data(), out.data());
  return out;
}

TranslationMap TranslationMap::identity(int dim, int source_env, int target_env) {
  TranslationMap m;
  m.source_env = source_env;
  m.target_env = target_env;
  m.rows = m.cols = dim;
  m.matrix.assign(static_cast<std::size_t>(dim) * dim, 0.0);
  for (int i = 0; i < dim; ++i) m.matrix[static_cast<std::size_t>(i) * dim + i] = 1.0;
  m.bias.assign(dim, 0.0);
  return m;
}

namespace {

double rms(const TranslationMap& map, std::span<const ActivationPair> pairs) {
  if (pairs.empty() || map.rows == 0) return 0.0;
  double ss = 0.0;
  for (const auto& p : pairs) {
    const auto r = map.apply(p.source);
    for (int i = 0; i < map.rows; ++i) ss += (r[i] - p.target[i]) * (r[i] - p.target[i]);
  }
  return std::sqrt(ss / (static_cast<double>(pairs.size()) * map.rows));
}

} // namespace

TranslationMap fit_map(std::span<const ActivationPair> pairs, double ridge) {
  if (!(ridge >= 0.0)) throw FitError("ridge must be nonnegative");
  if (pairs.empty()) throw FitError("fit_map needs at least one pair");
  const int ds = static_cast<int>(pairs.front().source.size());
  const int dt = static_cast<int>(pairs.front().target.size());
  for (const auto& p : pairs)
    if (static_cast<int>(p.source.size()) != ds || static_cast<int>(p.target.size()) != dt)
      throw FitError("fit_map: inconsistent pair dimensions");
  const auto n = static_cast<Eigen::Index>(pairs.size());
  if (ridge == 0.0 && n < ds + 1)
    throw FitError("underdetermined affine fit (" + std::to_string(n) + " pairs for source dimension " +
                   std::to_string(ds) + "); use ridge > 0");

  Eigen::MatrixXd S(n, ds), T(n, dt);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int j = 0; j < ds; ++j) S(i, j) = pairs[i].source[j];
    for (int j = 0; j < dt; ++j) T(i, j) = pairs[i].target[j];
  }
  const Eigen::RowVectorXd ms = S.colwise().mean();
  const Eigen::RowVectorXd mt = T.colwise().mean();
  S.rowwise() -= ms;
  T.rowwise() -= mt;

  TranslationMap map;
  map.rows = dt;
  map.cols = ds;
  Eigen::MatrixXd W(dt, ds);
  if (ds > 0) {
    Eigen::MatrixXd gram = S.transpose() * S;
    gram.diagonal().array() += ridge;
    Eigen::LLT<Eigen::MatrixXd> llt(gram);
    // Centered Gram matrix is only PSD; a numerically singular one means the
    // sources do not span an affine subspace of full dimension.
    const double scale = std::max(1.0, gram.diagonal().maxCoeff());
    bool singular = llt.info() != Eigen::Success;
    if (!singular) {
      const auto& L = llt.matrixL();
      for (int i = 0; i < ds; ++i)
        if (L(i, i) * L(i, i) <= 1e-13 * scale) singular = true;
    }
    if (singular) throw FitError("normal equations are singular; use ridge > 0");
    W = llt.solve(S.transpose() * T).transpose();
  } else {
    W.setZero();
  }
  const Eigen::VectorXd b = mt.transpose() - W * ms.transpose();

  map.matrix.resize(static_cast<std::size_t>(dt) * ds);
  for (int r = 0; r < dt; ++r)
    for (int c = 0; c < ds; ++c) map.matrix[static_cast<std::size_t>(r) * ds + c] = W(r, c);
  map.bias.assign(b.data(), b.data() + dt);
  for (const auto& p : pairs) map.fit_pair_hashes.push_back(p.hash());
  std::sort(map.fit_pair_hashes.begin(), map.fit_pair_hashes.end());
  map.train_error = rms(map, pairs);
  return map;
}

double holdout_error(const TranslationMap& map, std::span<const ActivationPair> pairs) {
  for (const auto& p : pairs)
    if (std::binary_search(map.fit_pair_hashes.begin(), map.fit_pair_hashes.end(), p.hash()))
      throw LeakageError("holdout pair was used to fit the translation map");
  for (const auto& p : pairs)
    if (static_cast<int>(p.source.size()) != map.cols || static_cast<int>(p.target.size()) != map.rows)
      throw DomainError("holdout pair dimension mismatch");
  return rms(map, pairs);
}

double residual_norm(const TranslationMap& map, const ActivationPair& pair) {
  const auto r = map.apply(pair.source);
  double ss = 0.0;
  for (int i = 0; i < map.rows; ++i) ss += (r[i] - pair.target[i]) * (r[i] - pair.target[i]);
  return std::sqrt(ss);
}

std::pair<std::vector<ActivationPair>, std::vector<ActivationPair>> split_fit_holdout(std::span<const ActivationPair> pairs) {
  std::vector<ActivationPair> fit, hold;
  std::size_t min_idx = 0;
  std::uint64_t min_h = ~0ULL;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto h = pairs[i].hash();
    // duplicate pairs always land on the same side of the split
    if (mix64(h) % 5 == 0) hold.push_back(pairs[i]);
    else fit.push_back(pairs[i]);
    if (mix64(h) < min_h) {
      min_h = mix64(h);
      min_idx = i;
    }
  }
  if (hold.empty() && pairs.size() >= 2) {
    const auto h = pairs[min_idx].hash();
    std::vector<ActivationPair> keep;
    for (auto& p : fit) {
      if (p.hash() == h) hold.push_back(std::move(p));
      else keep.push_back(std::move(p));
    }
    fit = std::move(keep);
  }
  return {std::move(fit), std::move(hold)};
}

TranslationMap fit_with_holdout(std::span<const ActivationPair> pairs, double ridge) {
  auto [fit, hold] = split_fit_holdout(pairs);
  if (fit.empty()) throw FitError("no pairs left to fit after the holdout split");
  auto map = fit_map(fit, ridge);
  map.holdout_error = hold.empty() ? 0.0 : holdout_error(map, hold);
  return map;
}

} // namespace tri
