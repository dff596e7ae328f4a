#pragma once

// Instance-level inlier precision/recall and pair-level registration recall.

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "sgm/errors.hpp"
#include "sgm/geometry.hpp"

namespace sgm {

using IndexPair = std::pair<std::size_t, std::size_t>;

struct Fraction {
  double value = 0.0;
  std::size_t hits = 0;
  std::size_t total = 0;
  bool defined = true;
};

inline bool is_inlier(const Point3& ox, const Point3& oy, const RigidTransform& gt, double beta) {
  return (gt.apply(ox) - oy).norm() < beta;
}

// Share of predicted pairs whose source centroid lands within beta of its
// target under the ground truth. An empty prediction yields 0, flagged undefined.
inline Fraction inlier_precision(std::span<const Point3> cx, std::span<const Point3> cy,
                                 std::span<const IndexPair> predicted, const RigidTransform& gt, double beta) {
  if (!(beta > 0.0)) throw ValidationError("inlier_precision: beta must be > 0");
  Fraction f;
  f.total = predicted.size();
  for (const auto& [i, j] : predicted) f.hits += is_inlier(cx[i], cy[j], gt, beta) ? 1 : 0;
  if (f.total == 0) {
    f.defined = false;
    return f;
  }
  f.value = static_cast<double>(f.hits) / static_cast<double>(f.total);
  return f;
}

// Share of ground-truth pairs that were predicted and pass the beta test.
// Undefined (excluded from aggregates) when there are no ground-truth pairs.
inline Fraction inlier_recall(std::span<const Point3> cx, std::span<const Point3> cy,
                              std::span<const IndexPair> ground_truth, std::span<const IndexPair> predicted,
                              const RigidTransform& gt, double beta) {
  if (!(beta > 0.0)) throw ValidationError("inlier_recall: beta must be > 0");
  Fraction f;
  f.total = ground_truth.size();
  for (const auto& g : ground_truth) {
    bool found = false;
    for (const auto& p : predicted) found = found || p == g;
    if (found && is_inlier(cx[g.first], cy[g.second], gt, beta)) ++f.hits;
  }
  if (f.total == 0) {
    f.defined = false;
    return f;
  }
  f.value = static_cast<double>(f.hits) / static_cast<double>(f.total);
  return f;
}

struct PairError {
  double rre = 0.0;  // degrees
  double rte = 0.0;  // meters
  bool skipped = false;
};

inline constexpr double kDefaultRreThreshold = 5.0;  // degrees
inline constexpr double kDefaultRteThreshold = 2.0;  // meters

// Fraction of non-skipped pairs with RRE < t_rre and RTE < t_rte.
inline Fraction registration_recall(std::span<const PairError> pairs, double t_rre = kDefaultRreThreshold,
                                    double t_rte = kDefaultRteThreshold) {
  Fraction f;
  for (const auto& p : pairs) {
    if (p.skipped) continue;
    ++f.total;
    if (p.rre < t_rre && p.rte < t_rte) ++f.hits;
  }
  if (f.total == 0) {
    f.defined = false;
    return f;
  }
  f.value = static_cast<double>(f.hits) / static_cast<double>(f.total);
  return f;
}

}  // namespace sgm
