#pragma once

#include <cstddef>
#include <ostream>
#include <span>
#include <vector>

#include "sgm/errors.hpp"
#include "sgm/geometry.hpp"
#include "sgm/instances.hpp"

namespace sgm {

// Directed k-nearest-neighbour graph over instance centroids of one scene.
struct InstanceGraph {
  std::size_t node_count = 0;
  std::vector<std::vector<std::size_t>> neighbors;  // ascending distance, ties by index

  // Set when the scene has a single instance and every neighbourhood is empty.
  bool degenerate() const { return node_count == 1; }
};

inline InstanceGraph build_graph(std::span<const Point3> centroids, std::size_t k) {
  if (k < 1) throw ValidationError("build_graph: k must be >= 1");
  if (centroids.empty()) throw ValidationError("build_graph: no instances");
  validate_points(centroids, "build_graph");
  InstanceGraph g;
  g.node_count = centroids.size();
  g.neighbors.resize(g.node_count);
  if (g.node_count == 1) return g;
  const KdTree tree(centroids);
  const std::size_t want = std::min(k, g.node_count - 1);
  for (std::size_t i = 0; i < g.node_count; ++i) {
    // Self is always the first hit at distance 0 unless a duplicate centroid
    // with a smaller index exists; drop it wherever it lands.
    for (std::size_t j : tree.knn(centroids[i], want + 1)) {
      if (j != i && g.neighbors[i].size() < want) g.neighbors[i].push_back(j);
    }
  }
  return g;
}

inline InstanceGraph build_graph(std::span<const SemanticInstance> instances, std::size_t k) {
  std::vector<Point3> c;
  c.reserve(instances.size());
  for (const auto& inst : instances) c.push_back(inst.centroid);
  return build_graph(c, k);
}

// One "i j" line per directed edge.
inline void write_edge_list(std::ostream& os, const InstanceGraph& g) {
  for (std::size_t i = 0; i < g.node_count; ++i)
    for (std::size_t j : g.neighbors[i]) os << i << ' ' << j << '\n';
}

}  // namespace sgm
