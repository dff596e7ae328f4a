#pragma once

// Ground-truth correspondence labelling, the matching loss, a synthetic
// scene-pair generator and the momentum-SGD training loop.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sgm/errors.hpp"
#include "sgm/geometry.hpp"
#include "sgm/graph.hpp"
#include "sgm/instances.hpp"
#include "sgm/matching.hpp"
#include "sgm/metrics.hpp"
#include "sgm/nets.hpp"
#include "sgm/optim.hpp"
#include "sgm/tensor.hpp"

namespace sgm {

// ---------------------------------------------------------------------------
// Ground-truth correspondences

struct GroundTruthPairs {
  std::vector<IndexPair> pairs;
  std::vector<std::size_t> unmatched_x, unmatched_y;
};

// (i, j) is a ground-truth pair iff both share a category, each is the
// other's nearest same-category instance once X is mapped by `gt`, and the
// gap is below beta.
inline GroundTruthPairs label_gt_correspondences(std::span<const SemanticInstance> x,
                                                 std::span<const SemanticInstance> y, const RigidTransform& gt,
                                                 double beta) {
  if (!(beta > 0.0)) throw ValidationError("label_gt_correspondences: beta must be > 0");
  const std::size_t m = x.size(), n = y.size();
  std::vector<Point3> moved(m);
  for (std::size_t i = 0; i < m; ++i) moved[i] = gt.apply(x[i].centroid);
  constexpr auto none = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> best_y(m, none), best_x(n, none);
  for (std::size_t i = 0; i < m; ++i) {
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (x[i].category_index != y[j].category_index) continue;
      const double d = squared_distance(moved[i], y[j].centroid);
      if (d < bd) {
        bd = d;
        best_y[i] = j;
      }
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < m; ++i) {
      if (x[i].category_index != y[j].category_index) continue;
      const double d = squared_distance(moved[i], y[j].centroid);
      if (d < bd) {
        bd = d;
        best_x[j] = i;
      }
    }
  }
  GroundTruthPairs out;
  std::vector<bool> hit_y(n, false);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = best_y[i];
    if (j != none && best_x[j] == i && std::sqrt(squared_distance(moved[i], y[j].centroid)) < beta) {
      out.pairs.emplace_back(i, j);
      hit_y[j] = true;
    } else {
      out.unmatched_x.push_back(i);
    }
  }
  for (std::size_t j = 0; j < n; ++j)
    if (!hit_y[j]) out.unmatched_y.push_back(j);
  return out;
}

// ---------------------------------------------------------------------------
// Loss

struct LossOptions {
  // Also penalise -log of the dustbin cell for ground-truth-unmatched instances.
  bool dustbin_term = false;
};

struct LossResult {
  Tensor value;        // scalar
  bool empty = false;  // no ground-truth pairs: zero loss, no gradient
};

// L = -sum over ground-truth (i, j) of log P_ij on the trimmed assignment.
inline LossResult matching_loss(const SoftAssignment& p, const GroundTruthPairs& gt, const LossOptions& opt = {}) {
  const Tensor& log_p = p.log_augmented;
  const std::size_t rows = log_p.dim(0), cols = log_p.dim(1);
  std::vector<std::size_t> flat;
  for (const auto& [i, j] : gt.pairs) {
    if (i + 1 >= rows || j + 1 >= cols) throw ValidationError("matching_loss: correspondence index out of range");
    flat.push_back(i * cols + j);
  }
  if (opt.dustbin_term) {
    for (auto i : gt.unmatched_x) flat.push_back(i * cols + (cols - 1));
    for (auto j : gt.unmatched_y) flat.push_back((rows - 1) * cols + j);
  }
  if (flat.empty()) return {Tensor::scalar(0.0), true};
  const Tensor picked = gather_rows(reshape(log_p, {rows * cols}), flat);
  return {scale(sum_all(picked), -1.0), false};
}

// ---------------------------------------------------------------------------
// Synthetic scenes

struct SceneGenConfig {
  std::size_t min_instances = 15;
  std::size_t max_instances = 35;
  std::vector<double> category_weights;  // empty: uniform
  std::size_t min_points = 60;
  std::size_t max_points = 200;
  double point_noise = 0.01;      // sigma, meters
  double centroid_jitter = 0.2;   // sigma of a per-instance shift in Y, meters
  double dropout = 0.2;           // per instance, per side
  double max_rotation_deg = 180;  // about z
  double max_tilt_deg = 0;        // about x and y
  double max_translation = 10;    // meters, in the ground plane
  double scene_half_extent = 30;  // meters
  std::uint64_t seed = 1;

  void validate() const {
    if (min_instances < 1 || max_instances < min_instances) throw ValidationError("scene generator: bad instance range");
    if (min_points < 1 || max_points < min_points) throw ValidationError("scene generator: bad point range");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("scene generator: dropout must lie in [0, 1)");
    if (point_noise < 0 || centroid_jitter < 0 || max_rotation_deg < 0 || max_tilt_deg < 0 || max_translation < 0 ||
        !(scene_half_extent > 0)) {
      throw ValidationError("scene generator: negative range");
    }
    if (!category_weights.empty()) {
      double total = 0.0;
      for (double w : category_weights) {
        if (w < 0.0) throw ValidationError("scene generator: negative category weight");
        total += w;
      }
      if (!(total > 0.0)) throw ValidationError("scene generator: category weights sum to zero");
    }
  }
};

// Object half-extents (length, width, height) per default category index.
inline Eigen::Vector3d default_half_extents(std::size_t category) {
  static const std::array<Eigen::Vector3d, 12> table{
      Eigen::Vector3d(2.2, 0.9, 0.75),   // car
      Eigen::Vector3d(0.9, 0.3, 0.55),   // bicycle
      Eigen::Vector3d(1.1, 0.4, 0.65),   // motorcycle
      Eigen::Vector3d(4.0, 1.25, 1.6),   // truck
      Eigen::Vector3d(3.0, 1.1, 1.3),    // other-vehicle
      Eigen::Vector3d(5.0, 4.0, 3.5),    // building
      Eigen::Vector3d(4.0, 0.15, 0.7),   // fence
      Eigen::Vector3d(1.8, 1.8, 1.6),    // vegetation
      Eigen::Vector3d(0.2, 0.2, 1.3),    // trunk
      Eigen::Vector3d(3.0, 3.0, 0.15),   // terrain
      Eigen::Vector3d(0.12, 0.12, 3.0),  // pole
      Eigen::Vector3d(0.45, 0.08, 1.4),  // traffic-sign
  };
  return table[category % table.size()];
}

struct PlantedInstance {
  std::size_t category_index = 0;
  std::uint32_t raw_label = 0;
  Point3 mean_x = Point3::Zero();  // mean of the planted points in X's frame
  Point3 mean_y = Point3::Zero();  // same instance in Y's frame, jitter and noise included
  bool in_x = true, in_y = true;
};

struct GeneratedPair {
  SemanticPointCloud x, y;
  RigidTransform gt;  // maps X coordinates into Y
  std::vector<PlantedInstance> planted;
  std::uint64_t seed = 0;
};

namespace detail {

// Random-growth blob: every new point lies within 0.7 * radius of an earlier
// one, so the set is a single radius-connected component by construction.
inline std::vector<Point3> grow_blob(std::mt19937_64& rng, const Point3& center, const Eigen::Vector3d& half,
                                     double yaw, double radius, std::size_t count) {
  const double step = 0.4 * radius;
  std::uniform_real_distribution<double> off(-step, step);
  std::vector<Point3> local{Point3::Zero()};
  while (local.size() < count) {
    std::uniform_int_distribution<std::size_t> pick(0, local.size() - 1);
    const Point3 cand = local[pick(rng)] + Point3(off(rng), off(rng), off(rng));
    if ((cand.cwiseAbs() - half).maxCoeff() <= 0.0) local.push_back(cand);
  }
  const Eigen::Matrix3d r = rotation_z(yaw);
  for (auto& p : local) p = center + r * p;
  return local;
}

}  // namespace detail

inline GeneratedPair generate_scene_pair(std::mt19937_64& rng, const SceneGenConfig& cfg,
                                         const CategoryConfig& categories) {
  cfg.validate();
  categories.validate();
  const std::size_t c = categories.num_categories();
  std::vector<double> weights = cfg.category_weights.empty() ? std::vector<double>(c, 1.0) : cfg.category_weights;
  if (weights.size() != c) throw ValidationError("scene generator: category weights do not match category count");

  GeneratedPair out;
  std::uniform_int_distribution<std::size_t> count_dist(cfg.min_instances, cfg.max_instances);
  std::discrete_distribution<std::size_t> cat_dist(weights.begin(), weights.end());
  std::uniform_int_distribution<std::size_t> npts(cfg.min_points, cfg.max_points);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  double max_radius = 0.0;
  for (const auto& spec : categories.categories) max_radius = std::max(max_radius, spec.cluster_radius);

  // Placement: footprints (xy half-diagonals) kept apart by the largest
  // clustering radius plus a margin, so no two instances can ever merge.
  const std::size_t count = count_dist(rng);
  struct Slot {
    std::size_t cat;
    Point3 center;
    double footprint;
    double yaw;
  };
  std::vector<Slot> slots;
  double extent = cfg.scene_half_extent;
  while (slots.size() < count) {
    const std::size_t cat = cat_dist(rng);
    const Eigen::Vector3d half = default_half_extents(cat);
    const double footprint = std::hypot(half.x(), half.y());
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      const Point3 center((2 * unit(rng) - 1) * extent, (2 * unit(rng) - 1) * extent, half.z());
      bool ok = true;
      for (const auto& s : slots) {
        const double gap = std::hypot(center.x() - s.center.x(), center.y() - s.center.y());
        ok = ok && gap > footprint + s.footprint + max_radius + 0.5;
      }
      if (ok) {
        slots.push_back({cat, center, footprint, 2 * std::numbers::pi * unit(rng)});
        placed = true;
      }
    }
    if (!placed) extent *= 1.1;
  }

  // Ground-truth motion X -> Y.
  const double yaw = deg2rad(cfg.max_rotation_deg) * (2 * unit(rng) - 1);
  const double tilt_x = deg2rad(cfg.max_tilt_deg) * (2 * unit(rng) - 1);
  const double tilt_y = deg2rad(cfg.max_tilt_deg) * (2 * unit(rng) - 1);
  const double t_dir = 2 * std::numbers::pi * unit(rng);
  const double t_len = cfg.max_translation * unit(rng);
  out.gt.rotation = rotation_z(yaw) * rotation_y(tilt_y) * rotation_x(tilt_x);
  out.gt.translation = Eigen::Vector3d(t_len * std::cos(t_dir), t_len * std::sin(t_dir), 0.0);

  struct Blob {
    std::vector<Point3> px, py;
  };
  std::vector<Blob> blobs(slots.size());
  for (std::size_t k = 0; k < slots.size(); ++k) {
    const auto& s = slots[k];
    const CategorySpec* spec = nullptr;
    for (const auto& cs : categories.categories)
      if (cs.index == s.cat) spec = &cs;
    PlantedInstance rec;
    rec.category_index = s.cat;
    rec.raw_label = spec->raw_labels.empty() ? 0 : spec->raw_labels.front();
    blobs[k].px = detail::grow_blob(rng, s.center, default_half_extents(s.cat), s.yaw, spec->cluster_radius, npts(rng));
    const Point3 jitter(gauss(rng) * cfg.centroid_jitter, gauss(rng) * cfg.centroid_jitter,
                        gauss(rng) * cfg.centroid_jitter);
    for (const auto& p : blobs[k].px) {
      const Point3 noise(gauss(rng) * cfg.point_noise, gauss(rng) * cfg.point_noise, gauss(rng) * cfg.point_noise);
      blobs[k].py.push_back(out.gt.apply(p) + jitter + noise);
    }
    rec.mean_x = Point3::Zero();
    for (const auto& p : blobs[k].px) rec.mean_x += p;
    rec.mean_x /= static_cast<double>(blobs[k].px.size());
    rec.mean_y = Point3::Zero();
    for (const auto& p : blobs[k].py) rec.mean_y += p;
    rec.mean_y /= static_cast<double>(blobs[k].py.size());
    rec.in_x = unit(rng) >= cfg.dropout;
    rec.in_y = unit(rng) >= cfg.dropout;
    out.planted.push_back(rec);
  }

  std::vector<std::size_t> order_y(slots.size());
  std::iota(order_y.begin(), order_y.end(), std::size_t{0});
  std::shuffle(order_y.begin(), order_y.end(), rng);

  for (std::size_t k = 0; k < slots.size(); ++k) {
    if (!out.planted[k].in_x) continue;
    for (const auto& p : blobs[k].px) {
      out.x.cloud.points.push_back(p);
      out.x.labels.push_back(out.planted[k].raw_label);
    }
  }
  for (std::size_t k : order_y) {
    if (!out.planted[k].in_y) continue;
    for (const auto& p : blobs[k].py) {
      out.y.cloud.points.push_back(p);
      out.y.labels.push_back(out.planted[k].raw_label);
    }
  }
  return out;
}

// Independent streams per purpose so that train, validation and test sets
// never share scenes for a given base seed.
enum class SceneStream : std::uint64_t { train = 1, validation = 2, test = 3 };

inline std::uint64_t scene_seed(std::uint64_t base, SceneStream stream, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  std::uint32_t w[2];
  seq.generate(w, w + 2);
  return static_cast<std::uint64_t>(w[0]) << 32 | w[1];
}

inline std::vector<GeneratedPair> generate_scene_pairs(const SceneGenConfig& cfg, const CategoryConfig& categories,
                                                       SceneStream stream, std::size_t count) {
  std::vector<GeneratedPair> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    const std::uint64_t seed = scene_seed(cfg.seed, stream, k);
    std::mt19937_64 rng(seed);
    out.push_back(generate_scene_pair(rng, cfg, categories));
    out.back().seed = seed;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prepared training / evaluation pairs

struct ScenePair {
  std::vector<SemanticInstance> instances_x, instances_y;
  InstanceGraph graph_x, graph_y;
  RigidTransform gt;
  GroundTruthPairs gt_pairs;
  std::uint64_t seed = 0;
  // Network inputs; built once, reused across epochs.
  std::optional<SceneTensors> tensors_x, tensors_y;

  std::vector<Point3> centroids_x() const {
    std::vector<Point3> c;
    for (const auto& i : instances_x) c.push_back(i.centroid);
    return c;
  }
  std::vector<Point3> centroids_y() const {
    std::vector<Point3> c;
    for (const auto& i : instances_y) c.push_back(i.centroid);
    return c;
  }
  bool usable() const { return tensors_x.has_value() && tensors_y.has_value(); }
};

struct PairPrepOptions {
  std::size_t graph_k = 10;
  double beta = 1.0;
};

inline ScenePair prepare_pair(const SemanticPointCloud& x, const SemanticPointCloud& y, const RigidTransform& gt,
                              const CategoryConfig& categories, const ModelConfig& model_cfg,
                              const PairPrepOptions& opt = {}) {
  ScenePair p;
  p.gt = gt;
  p.instances_x = extract_instances(x, categories, model_cfg.shape_points);
  p.instances_y = extract_instances(y, categories, model_cfg.shape_points);
  p.gt_pairs = label_gt_correspondences(p.instances_x, p.instances_y, gt, opt.beta);
  if (!p.instances_x.empty() && !p.instances_y.empty()) {
    p.graph_x = build_graph(p.instances_x, opt.graph_k);
    p.graph_y = build_graph(p.instances_y, opt.graph_k);
    p.tensors_x = make_scene_tensors(p.instances_x, p.graph_x, model_cfg);
    p.tensors_y = make_scene_tensors(p.instances_y, p.graph_y, model_cfg);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Forward pass from scene tensors to the soft assignment

struct MatchForward {
  FeaturePair features;
  Tensor affinity;   // [M, N]
  Tensor augmented;  // [M+1, N+1] before Sinkhorn
  SoftAssignment assignment;
};

inline MatchForward forward_match(const Model& model, const SceneTensors& x, const SceneTensors& y,
                                  const SinkhornOptions& sk = {}) {
  MatchForward f;
  f.features = extract_features(model, x, y);
  f.affinity = affinity(f.features.x.fused, f.features.y.fused, model.affinity_weight());
  f.augmented = augment_dustbins(f.affinity, model.dustbin());
  f.assignment = sinkhorn(f.augmented, sk);
  return f;
}

inline std::vector<IndexPair> as_index_pairs(const CorrespondenceSet& c) {
  std::vector<IndexPair> out;
  for (const auto& p : c.pairs) out.emplace_back(p.i, p.j);
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t batch_size = 32;
  double learning_rate = 1e-4;
  double lr_decay = 0.98;  // per epoch
  double momentum = 0.9;
  std::size_t epochs = 50;
  double threshold = 0.7;  // T
  std::size_t shape_points = 128;
  std::size_t graph_k = 10;
  double beta = 1.0;  // meters
  std::uint64_t seed = 7;
  SinkhornOptions sinkhorn;
  LossOptions loss;

  void validate() const {
    if (batch_size < 1 || epochs < 1 || shape_points < 1 || graph_k < 1) {
      throw ValidationError("train config: sizes must be positive");
    }
    if (learning_rate < 0 || !(lr_decay > 0) || momentum < 0 || !(beta > 0)) {
      throw ValidationError("train config: invalid optimiser settings");
    }
    if (!(threshold > 0.0 && threshold < 1.0)) throw ValidationError("train config: T must lie in (0, 1)");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double val_ip = 0.0;
  double val_ir = 0.0;
  double learning_rate = 0.0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, std::uint64_t pair_seed)
      : std::runtime_error(what), pair_seed_(pair_seed) {}
  std::uint64_t pair_seed() const { return pair_seed_; }

 private:
  std::uint64_t pair_seed_;
};

struct ValidationScores {
  double ip = 0.0, ir = 0.0;
  std::size_t ip_count = 0, ir_count = 0;
};

inline ValidationScores validate_matching(const Model& model, std::span<const ScenePair> pairs, const TrainConfig& cfg) {
  NoGradGuard guard;
  ValidationScores s;
  for (const auto& p : pairs) {
    if (!p.usable()) continue;
    const auto f = forward_match(model, *p.tensors_x, *p.tensors_y, cfg.sinkhorn);
    const auto phi = as_index_pairs(hard_assign(f.assignment.trimmed(), cfg.threshold));
    const auto cx = p.centroids_x();
    const auto cy = p.centroids_y();
    const auto ip = inlier_precision(cx, cy, phi, p.gt, cfg.beta);
    const auto ir = inlier_recall(cx, cy, p.gt_pairs.pairs, phi, p.gt, cfg.beta);
    s.ip += ip.value;  // empty prediction counts as 0
    ++s.ip_count;
    if (ir.defined) {
      s.ir += ir.value;
      ++s.ir_count;
    }
  }
  if (s.ip_count) s.ip /= static_cast<double>(s.ip_count);
  if (s.ir_count) s.ir /= static_cast<double>(s.ir_count);
  return s;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

// Mini-batch momentum SGD on the matching loss. The batch gradient is the
// mean over the batch's pairs; pairs without instances or ground-truth
// pairs contribute nothing. Deterministic for a fixed seed.
inline std::vector<EpochRecord> train(Model& model, std::span<const ScenePair> train_pairs,
                                      std::span<const ScenePair> val_pairs, const TrainConfig& cfg,
                                      const EpochCallback& on_epoch = {}) {
  cfg.validate();
  std::vector<EpochRecord> history;
  auto& params = model.parameters().params();
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train_pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  double lr = cfg.learning_rate;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_total = 0.0;
    std::size_t loss_count = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      model.parameters().zero_grad();
      const double inv = 1.0 / static_cast<double>(stop - start);
      for (std::size_t b = start; b < stop; ++b) {
        const ScenePair& p = train_pairs[order[b]];
        if (!p.usable()) continue;
        const auto f = forward_match(model, *p.tensors_x, *p.tensors_y, cfg.sinkhorn);
        const auto l = matching_loss(f.assignment, p.gt_pairs, cfg.loss);
        if (l.empty) continue;
        const double v = l.value.item();
        if (!std::isfinite(v)) {
          throw TrainingDiverged("non-finite loss at epoch " + std::to_string(epoch), p.seed);
        }
        loss_total += v;
        ++loss_count;
        backward(scale(l.value, inv));
      }
      momentum_step(params, lr, cfg.momentum);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.learning_rate = lr;
    rec.mean_loss = loss_count ? loss_total / static_cast<double>(loss_count) : 0.0;
    if (!val_pairs.empty()) {
      const auto v = validate_matching(model, val_pairs, cfg);
      rec.val_ip = v.ip;
      rec.val_ir = v.ir;
    }
    history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    lr *= cfg.lr_decay;
  }
  return history;
}

}  // namespace sgm
