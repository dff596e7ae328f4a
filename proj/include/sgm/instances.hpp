#pragma once

// Semantic instance extraction: per-category Euclidean clustering of a
// labelled cloud, summarised per cluster by centroid, one-hot category and
// K farthest-point-sampled shape points.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "sgm/errors.hpp"
#include "sgm/geometry.hpp"

namespace sgm {

struct SemanticPointCloud {
  PointCloud cloud;
  std::vector<std::uint32_t> labels;  // raw category id per point

  std::size_t size() const { return cloud.size(); }

  void validate() const {
    if (labels.size() != cloud.points.size()) {
      throw ValidationError("semantic cloud: " + std::to_string(labels.size()) + " labels for " +
                            std::to_string(cloud.points.size()) + " points");
    }
  }
};

struct CategorySpec {
  std::string name;
  std::size_t index = 0;  // position in the one-hot vector
  double cluster_radius = 1.0;
  std::size_t min_points = 30;
  std::vector<std::uint32_t> raw_labels;
};

// Raw-label -> retained-category mapping. Raw ids listed in `ignored` are
// known but dropped silently; anything else unmapped counts as unknown.
struct CategoryConfig {
  std::vector<CategorySpec> categories;
  std::set<std::uint32_t> ignored;

  std::size_t num_categories() const { return categories.size(); }

  void validate() const {
    std::vector<bool> seen(categories.size(), false);
    std::set<std::uint32_t> raw;
    for (const auto& c : categories) {
      if (c.index >= categories.size() || seen[c.index]) {
        throw ValidationError("category config: indices must form a bijection onto [0, C); offending category " +
                              c.name);
      }
      seen[c.index] = true;
      if (!(c.cluster_radius > 0.0)) throw ValidationError("category config: radius must be > 0 for " + c.name);
      if (c.min_points < 1) throw ValidationError("category config: min_points must be >= 1 for " + c.name);
      for (auto r : c.raw_labels) {
        if (!raw.insert(r).second) throw ValidationError("category config: raw label mapped twice: " + std::to_string(r));
      }
    }
  }

  // Index into `categories` for a raw label, or -1 when not retained.
  long find_raw(std::uint32_t raw) const {
    for (std::size_t i = 0; i < categories.size(); ++i) {
      const auto& rl = categories[i].raw_labels;
      if (std::find(rl.begin(), rl.end(), raw) != rl.end()) return static_cast<long>(i);
    }
    return -1;
  }
};

// Twelve retained classes keyed by SemanticKITTI raw ids (moving variants
// folded into their static class). Radii: 0.5 m small objects, 1.0 m
// vehicles, 2.0 m large structures.
inline CategoryConfig default_category_config() {
  CategoryConfig cfg;
  const auto add = [&](std::string name, double radius, std::vector<std::uint32_t> raw) {
    CategorySpec c;
    c.name = std::move(name);
    c.index = cfg.categories.size();
    c.cluster_radius = radius;
    c.min_points = 30;
    c.raw_labels = std::move(raw);
    cfg.categories.push_back(std::move(c));
  };
  add("car", 1.0, {10, 252});
  add("bicycle", 1.0, {11});
  add("motorcycle", 1.0, {15});
  add("truck", 1.0, {18, 258});
  add("other-vehicle", 1.0, {13, 20, 257, 259});
  add("building", 2.0, {50});
  add("fence", 2.0, {51});
  add("vegetation", 2.0, {70});
  add("trunk", 0.5, {71});
  add("terrain", 2.0, {72});
  add("pole", 0.5, {80});
  add("traffic-sign", 0.5, {81});
  // unlabeled, outlier, people, ground classes, lane markings, misc.
  cfg.ignored = {0, 1, 16, 30, 31, 32, 40, 44, 48, 49, 52, 60, 99, 253, 254, 255, 256};
  return cfg;
}

struct SemanticInstance {
  std::size_t id = 0;
  std::size_t category_index = 0;
  Point3 centroid = Point3::Zero();
  std::vector<double> one_hot;
  std::vector<Point3> shape_points;  // exactly K, scene coordinates
  std::size_t point_count = 0;
};

struct ExtractionDiagnostics {
  std::size_t unknown_label_points = 0;
  std::set<std::uint32_t> unknown_labels;
  std::size_t ignored_points = 0;
  std::size_t discarded_clusters = 0;
};

// ---------------------------------------------------------------------------

class DisjointSets {
 public:
  explicit DisjointSets(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), std::size_t{0}); }

  std::size_t find(std::size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }

  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (a < b) std::swap(a, b);
    parent_[a] = b;  // root is always the smallest member
  }

 private:
  std::vector<std::size_t> parent_;
};

// Connected components of the radius graph (edge iff distance <= radius).
// Components smaller than min_points are dropped. Clusters are ordered by
// their smallest index; indices inside a cluster are ascending.
inline std::vector<std::vector<std::size_t>> euclidean_cluster(std::span<const Point3> points, double radius,
                                                               std::size_t min_points) {
  if (!(radius > 0.0)) throw ValidationError("euclidean_cluster: radius must be > 0");
  std::vector<std::vector<std::size_t>> out;
  if (points.empty()) return out;
  const KdTree tree(points);
  DisjointSets sets(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (std::size_t j : tree.radius_search(points[i], radius)) {
      if (j > i) sets.unite(i, j);
    }
  }
  std::map<std::size_t, std::vector<std::size_t>> groups;  // keyed by smallest member
  for (std::size_t i = 0; i < points.size(); ++i) groups[sets.find(i)].push_back(i);
  for (auto& [root, members] : groups) {
    if (members.size() >= min_points) out.push_back(std::move(members));
  }
  return out;
}

inline std::vector<SemanticInstance> extract_instances(const SemanticPointCloud& spc, const CategoryConfig& cfg,
                                                       std::size_t shape_points,
                                                       ExtractionDiagnostics* diag = nullptr) {
  spc.validate();
  cfg.validate();
  if (shape_points < 1) throw ValidationError("extract_instances: K must be >= 1");
  validate_points(spc.cloud.points, "extract_instances");

  ExtractionDiagnostics local;
  ExtractionDiagnostics& d = diag ? *diag : local;

  // Bucket point indices by category index.
  std::vector<std::vector<std::size_t>> by_category(cfg.num_categories());
  std::map<std::uint32_t, long> lookup;
  for (std::size_t i = 0; i < spc.labels.size(); ++i) {
    const std::uint32_t raw = spc.labels[i];
    auto it = lookup.find(raw);
    if (it == lookup.end()) it = lookup.emplace(raw, cfg.find_raw(raw)).first;
    if (it->second >= 0) {
      by_category[cfg.categories[static_cast<std::size_t>(it->second)].index].push_back(i);
    } else if (cfg.ignored.count(raw)) {
      ++d.ignored_points;
    } else {
      ++d.unknown_label_points;
      d.unknown_labels.insert(raw);
    }
  }

  std::vector<SemanticInstance> out;
  for (std::size_t ci = 0; ci < cfg.num_categories(); ++ci) {
    const auto& members = by_category[ci];
    if (members.empty()) continue;
    const CategorySpec* spec = nullptr;
    for (const auto& c : cfg.categories)
      if (c.index == ci) spec = &c;

    std::vector<Point3> pts;
    pts.reserve(members.size());
    for (auto i : members) pts.push_back(spc.cloud.points[i]);

    const auto all = euclidean_cluster(pts, spec->cluster_radius, 1);
    for (const auto& cluster : all) {
      if (cluster.size() < spec->min_points) {
        ++d.discarded_clusters;
        continue;
      }
      SemanticInstance inst;
      inst.id = out.size();
      inst.category_index = ci;
      inst.one_hot.assign(cfg.num_categories(), 0.0);
      inst.one_hot[ci] = 1.0;
      inst.point_count = cluster.size();

      std::vector<Point3> cp;
      cp.reserve(cluster.size());
      Point3 acc = Point3::Zero();
      for (auto j : cluster) {
        cp.push_back(pts[j]);
        acc += pts[j];
      }
      inst.centroid = acc / static_cast<double>(cluster.size());
      for (auto j : fps(cp, shape_points)) inst.shape_points.push_back(cp[j]);
      out.push_back(std::move(inst));
    }
  }
  return out;
}

}  // namespace sgm
