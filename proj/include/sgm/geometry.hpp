#pragma once

// Rigid-body geometry for point cloud registration: transforms, exact
// nearest-neighbour search, farthest point sampling, Kabsch alignment, ICP,
// and rotation/translation error metrics.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <numeric>
#include <queue>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "sgm/errors.hpp"

namespace sgm {

using Point3 = Eigen::Vector3d;

inline bool is_finite(const Point3& p) {
  return std::isfinite(p.x()) && std::isfinite(p.y()) && std::isfinite(p.z());
}

// Written out explicitly so every call site rounds identically; exact
// tie-breaking in the spatial index depends on it.
inline double squared_distance(const Point3& a, const Point3& b) {
  const double dx = a.x() - b.x();
  const double dy = a.y() - b.y();
  const double dz = a.z() - b.z();
  return dx * dx + dy * dy + dz * dz;
}

struct PointCloud {
  std::vector<Point3> points;
  // Empty when the source carried no intensity channel.
  std::vector<double> intensity;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  bool has_intensity() const { return !intensity.empty(); }
};

inline void validate_points(std::span<const Point3> points, const char* what) {
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!is_finite(points[i])) {
      throw ValidationError(std::string(what) + ": non-finite point at index " + std::to_string(i));
    }
  }
}

// ---------------------------------------------------------------------------
// Rotations

inline Eigen::Matrix3d rotation_x(double radians) {
  return Eigen::AngleAxisd(radians, Eigen::Vector3d::UnitX()).toRotationMatrix();
}
inline Eigen::Matrix3d rotation_y(double radians) {
  return Eigen::AngleAxisd(radians, Eigen::Vector3d::UnitY()).toRotationMatrix();
}
inline Eigen::Matrix3d rotation_z(double radians) {
  return Eigen::AngleAxisd(radians, Eigen::Vector3d::UnitZ()).toRotationMatrix();
}

inline constexpr double deg2rad(double deg) { return deg * std::numbers::pi / 180.0; }
inline constexpr double rad2deg(double rad) { return rad * 180.0 / std::numbers::pi; }

inline bool is_rotation(const Eigen::Matrix3d& r, double tol = 1e-9) {
  if (!r.allFinite()) return false;
  const Eigen::Matrix3d gram = r.transpose() * r;
  if ((gram - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > tol) return false;
  return std::abs(r.determinant() - 1.0) <= tol;
}

// Closest rotation in the Frobenius sense.
inline Eigen::Matrix3d project_to_rotation(const Eigen::Matrix3d& m) {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d u = svd.matrixU();
  const Eigen::Matrix3d v = svd.matrixV();
  if ((u * v.transpose()).determinant() < 0.0) u.col(2) *= -1.0;
  return u * v.transpose();
}

struct RigidTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static RigidTransform identity() { return {}; }

  Point3 apply(const Point3& p) const { return rotation * p + translation; }

  // (*this) ∘ first: applies `first`, then `*this`.
  RigidTransform compose(const RigidTransform& first) const {
    return {rotation * first.rotation, rotation * first.translation + translation};
  }

  RigidTransform inverse() const {
    const Eigen::Matrix3d rt = rotation.transpose();
    return {rt, -(rt * translation)};
  }

  Eigen::Matrix4d matrix() const {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m.topLeftCorner<3, 3>() = rotation;
    m.topRightCorner<3, 1>() = translation;
    return m;
  }

  bool is_valid(double tol = 1e-9) const { return is_rotation(rotation, tol) && translation.allFinite(); }

  void validate() const {
    if (!is_valid()) throw ValidationError("invalid rigid transform: rotation is not orthonormal with det +1");
  }
};

inline RigidTransform operator*(const RigidTransform& second, const RigidTransform& first) {
  return second.compose(first);
}

inline PointCloud apply_transform(const RigidTransform& t, const PointCloud& c) {
  t.validate();
  validate_points(c.points, "apply_transform");
  PointCloud out;
  out.points.reserve(c.size());
  for (const auto& p : c.points) out.points.push_back(t.apply(p));
  out.intensity = c.intensity;
  return out;
}

// ---------------------------------------------------------------------------
// Nearest-neighbour search. Results are ordered by (distance, index) so the
// tree and the brute-force path agree exactly, ties included.

using Neighbor = std::pair<double, std::size_t>;  // squared distance, index

inline std::vector<std::size_t> knn(std::span<const Point3> points, const Point3& query, std::size_t k) {
  if (points.empty()) throw ValidationError("knn: empty point set");
  if (k == 0) throw ValidationError("knn: k must be >= 1");
  std::vector<Neighbor> all;
  all.reserve(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) all.emplace_back(squared_distance(points[i], query), i);
  const std::size_t n = std::min(k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n), all.end());
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = all[i].second;
  return out;
}

class KdTree {
 public:
  KdTree() = default;

  explicit KdTree(std::span<const Point3> points) : points_(points.begin(), points.end()) {
    index_.resize(points_.size());
    for (std::size_t i = 0; i < index_.size(); ++i) index_[i] = i;
    if (!points_.empty()) build(0, points_.size());
  }

  std::size_t size() const { return points_.size(); }
  const std::vector<Point3>& points() const { return points_; }

  std::vector<std::size_t> knn(const Point3& query, std::size_t k) const {
    if (points_.empty()) throw ValidationError("knn: empty point set");
    if (k == 0) throw ValidationError("knn: k must be >= 1");
    std::priority_queue<Neighbor> heap;  // top = current worst
    search_knn(0, query, std::min(k, points_.size()), heap);
    std::vector<std::size_t> out(heap.size());
    for (std::size_t i = out.size(); i-- > 0;) {
      out[i] = heap.top().second;
      heap.pop();
    }
    return out;
  }

  Neighbor nearest(const Point3& query) const {
    if (points_.empty()) throw ValidationError("nearest: empty point set");
    std::priority_queue<Neighbor> heap;
    search_knn(0, query, 1, heap);
    return heap.top();
  }

  // All indices with squared distance <= radius^2, ascending by index.
  std::vector<std::size_t> radius_search(const Point3& query, double radius) const {
    std::vector<std::size_t> out;
    if (!points_.empty()) search_radius(0, query, radius * radius, out);
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  static constexpr std::size_t kLeafSize = 8;

  struct Node {
    std::size_t begin = 0, end = 0;
    int axis = -1;  // -1 for leaves
    double split = 0.0;
    std::size_t left = 0, right = 0;
  };

  std::size_t build(std::size_t begin, std::size_t end) {
    const std::size_t id = nodes_.size();
    nodes_.push_back({begin, end});
    if (end - begin <= kLeafSize) return id;

    Eigen::Vector3d lo = points_[index_[begin]], hi = lo;
    for (std::size_t i = begin; i < end; ++i) {
      lo = lo.cwiseMin(points_[index_[i]]);
      hi = hi.cwiseMax(points_[index_[i]]);
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    if (hi[axis] - lo[axis] <= 0.0) return id;  // all coincident

    const std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(index_.begin() + static_cast<std::ptrdiff_t>(begin),
                     index_.begin() + static_cast<std::ptrdiff_t>(mid),
                     index_.begin() + static_cast<std::ptrdiff_t>(end),
                     [&](std::size_t a, std::size_t b) { return points_[a][axis] < points_[b][axis]; });
    const double split = points_[index_[mid]][axis];
    const std::size_t left = build(begin, mid);
    const std::size_t right = build(mid, end);
    nodes_[id].axis = axis;
    nodes_[id].split = split;
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
  }

  void search_knn(std::size_t id, const Point3& q, std::size_t k, std::priority_queue<Neighbor>& heap) const {
    const Node& node = nodes_[id];
    if (node.axis < 0) {
      for (std::size_t i = node.begin; i < node.end; ++i) {
        const Neighbor cand{squared_distance(points_[index_[i]], q), index_[i]};
        if (heap.size() < k) {
          heap.push(cand);
        } else if (cand < heap.top()) {
          heap.pop();
          heap.push(cand);
        }
      }
      return;
    }
    // Left subtree holds coordinates <= split, right holds >= split.
    const double diff = q[node.axis] - node.split;
    const std::size_t near = diff <= 0.0 ? node.left : node.right;
    const std::size_t far = diff <= 0.0 ? node.right : node.left;
    search_knn(near, q, k, heap);
    // Equality still descends: an equidistant point with a smaller index may live there.
    if (heap.size() < k || diff * diff <= heap.top().first) search_knn(far, q, k, heap);
  }

  void search_radius(std::size_t id, const Point3& q, double r2, std::vector<std::size_t>& out) const {
    const Node& node = nodes_[id];
    if (node.axis < 0) {
      for (std::size_t i = node.begin; i < node.end; ++i) {
        if (squared_distance(points_[index_[i]], q) <= r2) out.push_back(index_[i]);
      }
      return;
    }
    const double diff = q[node.axis] - node.split;
    if (diff <= 0.0 || diff * diff <= r2) search_radius(node.left, q, r2, out);
    if (diff >= 0.0 || diff * diff <= r2) search_radius(node.right, q, r2, out);
  }

  std::vector<Point3> points_;
  std::vector<std::size_t> index_;
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Farthest point sampling, seeded at index 0. Fewer than K points: every point
// in sampling order, then index 0 repeated up to length K.

inline std::vector<std::size_t> fps(std::span<const Point3> points, std::size_t count) {
  if (points.empty()) throw ValidationError("fps: empty point set");
  if (count == 0) throw ValidationError("fps: K must be >= 1");
  const std::size_t n = points.size();
  const std::size_t take = std::min(count, n);
  std::vector<std::size_t> out;
  out.reserve(count);
  std::vector<double> min_d2(n, std::numeric_limits<double>::infinity());
  std::size_t current = 0;
  for (std::size_t s = 0; s < take; ++s) {
    out.push_back(current);
    min_d2[current] = -1.0;
    std::size_t best = n;
    double best_d2 = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (min_d2[i] < 0.0) continue;
      min_d2[i] = std::min(min_d2[i], squared_distance(points[i], points[current]));
      if (min_d2[i] > best_d2) {  // strict: ties keep the smaller index
        best_d2 = min_d2[i];
        best = i;
      }
    }
    if (best == n) break;
    current = best;
  }
  while (out.size() < count) out.push_back(0);
  return out;
}

// ---------------------------------------------------------------------------
// Kabsch / SVD alignment: argmin over (R, t) of sum ||R src_i + t - dst_i||^2.

inline RigidTransform kabsch_svd(std::span<const Point3> src, std::span<const Point3> dst) {
  if (src.size() != dst.size()) throw ValidationError("kabsch_svd: src and dst sizes differ");
  if (src.size() < 3) throw ValidationError("insufficient correspondences");
  validate_points(src, "kabsch_svd src");
  validate_points(dst, "kabsch_svd dst");

  Eigen::Vector3d cs = Eigen::Vector3d::Zero(), cd = Eigen::Vector3d::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    cs += src[i];
    cd += dst[i];
  }
  cs /= static_cast<double>(src.size());
  cd /= static_cast<double>(dst.size());

  Eigen::Matrix3d h = Eigen::Matrix3d::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) h += (src[i] - cs) * (dst[i] - cd).transpose();

  Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d sv = svd.singularValues();
  if (!(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0]) throw ValidationError("degenerate configuration");

  const Eigen::Matrix3d u = svd.matrixU();
  Eigen::Matrix3d v = svd.matrixV();
  if ((v * u.transpose()).determinant() < 0.0) v.col(2) *= -1.0;

  RigidTransform t;
  t.rotation = v * u.transpose();
  t.translation = cd - t.rotation * cs;
  return t;
}

// Kabsch with greedy outlier trimming: refit without the worst pair while its
// residual exceeds max_residual and more than 3 pairs remain. max_residual <= 0
// gives the single least-squares fit. `kept` receives the surviving indices.
inline RigidTransform trimmed_kabsch(std::span<const Point3> src, std::span<const Point3> dst, double max_residual,
                                     std::vector<std::size_t>* kept = nullptr) {
  std::vector<std::size_t> idx(src.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::vector<Point3> a(src.begin(), src.end()), b(dst.begin(), dst.end());
  RigidTransform t = kabsch_svd(a, b);
  while (max_residual > 0.0 && a.size() > 3) {
    std::size_t worst = 0;
    double worst_d = -1.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = (t.apply(a[i]) - b[i]).norm();
      if (d > worst_d) {
        worst_d = d;
        worst = i;
      }
    }
    if (worst_d <= max_residual) break;
    const auto at = static_cast<std::ptrdiff_t>(worst);
    a.erase(a.begin() + at);
    b.erase(b.begin() + at);
    idx.erase(idx.begin() + at);
    t = kabsch_svd(a, b);
  }
  if (kept) *kept = std::move(idx);
  return t;
}

// ---------------------------------------------------------------------------
// ICP. The tracked objective is the truncated RMS sqrt(mean_i min(d_i^2, dmax^2))
// over all source points, which every alignment step can only lower.

struct IcpOptions {
  std::size_t max_iters = 50;
  double convergence_eps = 1e-6;
  double max_correspondence_distance = 2.0;
};

struct IcpResult {
  RigidTransform transform;
  bool converged = false;
  std::size_t iterations = 0;
  std::vector<double> rms_history;  // entry 0 is the objective at init
};

inline double truncated_rms(std::span<const Point3> src, const KdTree& dst_tree, const RigidTransform& t,
                            double max_distance) {
  const double cap = max_distance * max_distance;
  double acc = 0.0;
  for (const auto& p : src) acc += std::min(dst_tree.nearest(t.apply(p)).first, cap);
  return std::sqrt(acc / static_cast<double>(src.size()));
}

inline IcpResult icp_refine(const PointCloud& src, const PointCloud& dst, const RigidTransform& init,
                            const IcpOptions& opt = {}) {
  if (src.empty() || dst.empty()) throw ValidationError("icp_refine: empty point cloud");
  init.validate();
  validate_points(src.points, "icp_refine src");
  validate_points(dst.points, "icp_refine dst");

  const KdTree tree(dst.points);
  const double cap = opt.max_correspondence_distance * opt.max_correspondence_distance;

  IcpResult res;
  res.transform = init;

  std::vector<Point3> moved(src.size());
  std::vector<Point3> a, b;
  auto evaluate = [&](const RigidTransform& t) {
    a.clear();
    b.clear();
    double acc = 0.0;
    for (std::size_t i = 0; i < src.size(); ++i) {
      moved[i] = t.apply(src.points[i]);
      const auto [d2, j] = tree.nearest(moved[i]);
      acc += std::min(d2, cap);
      if (d2 <= cap) {
        a.push_back(moved[i]);
        b.push_back(dst.points[j]);
      }
    }
    return std::sqrt(acc / static_cast<double>(src.size()));
  };

  double rms = evaluate(res.transform);
  res.rms_history.push_back(rms);
  for (std::size_t it = 1; it <= opt.max_iters; ++it) {
    res.iterations = it;
    RigidTransform step;
    try {
      step = kabsch_svd(a, b);
    } catch (const ValidationError&) {
      break;  // too few or degenerate inliers: keep best so far
    }
    const RigidTransform candidate = step * res.transform;
    const double next = evaluate(candidate);
    if (next > rms) {
      // Rounding-level increase at the optimum; the current pose is the best.
      res.converged = true;
      break;
    }
    const double change = rms - next;
    res.transform = candidate;
    rms = next;
    res.rms_history.push_back(rms);
    if (change < opt.convergence_eps) {
      res.converged = true;
      break;
    }
  }
  if (!is_rotation(res.transform.rotation, 1e-12)) res.transform.rotation = project_to_rotation(res.transform.rotation);
  return res;
}

// ---------------------------------------------------------------------------
// Error metrics. Euler angles use the intrinsic X-Y'-Z'' convention,
// R = Rx(a) * Ry(b) * Rz(c), with b in [-90°, 90°].

struct EulerXYZ {
  double x = 0.0, y = 0.0, z = 0.0;  // radians
};

inline EulerXYZ euler_xyz(const Eigen::Matrix3d& r) {
  EulerXYZ e;
  const double sb = std::clamp(r(0, 2), -1.0, 1.0);
  e.y = std::asin(sb);
  if (std::abs(sb) < 1.0 - 1e-12) {
    e.x = std::atan2(-r(1, 2), r(2, 2));
    e.z = std::atan2(-r(0, 1), r(0, 0));
  } else {
    // Gimbal lock: only x ± z is determined; put it all on x.
    e.z = 0.0;
    e.x = std::atan2(r(2, 1), r(1, 1));
  }
  return e;
}

// Relative rotation error in degrees: sum of |Euler angles| of r_g^-1 * r.
inline double rre(const Eigen::Matrix3d& r, const Eigen::Matrix3d& r_g) {
  if (!is_rotation(r, 1e-6) || !is_rotation(r_g, 1e-6)) throw ValidationError("rre: invalid rotation matrix");
  const EulerXYZ e = euler_xyz(r_g.transpose() * r);
  return rad2deg(std::abs(e.x) + std::abs(e.y) + std::abs(e.z));
}

// Relative translation error in meters.
inline double rte(const Eigen::Vector3d& t, const Eigen::Vector3d& t_g) {
  if (!t.allFinite() || !t_g.allFinite()) throw ValidationError("rte: non-finite translation");
  return (t_g - t).norm();
}

}  // namespace sgm
