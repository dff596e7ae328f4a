#include <algorithm>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "sgm/graph.hpp"
#include "sgm/instances.hpp"
#include "test_util.hpp"

using namespace sgm;

namespace {

// All-pairs union-find, no spatial index.
std::vector<std::vector<std::size_t>> naive_clusters(const std::vector<Point3>& p, double r, std::size_t min_pts) {
  const std::size_t n = p.size();
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  std::function<std::size_t(std::size_t)> root = [&](std::size_t x) { return parent[x] == x ? x : root(parent[x]); };
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if ((p[i] - p[j]).squaredNorm() <= r * r) {
        const auto a = root(i), b = root(j);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
      }
  std::map<std::size_t, std::vector<std::size_t>> g;
  for (std::size_t i = 0; i < n; ++i) g[root(i)].push_back(i);
  std::vector<std::vector<std::size_t>> out;
  for (auto& [k, v] : g)
    if (v.size() >= min_pts) out.push_back(v);
  return out;
}

SemanticPointCloud blob_cloud(std::mt19937_64& rng, const std::vector<std::pair<Point3, std::uint32_t>>& blobs,
                              std::size_t per_blob) {
  std::normal_distribution<double> n(0.0, 0.1);
  SemanticPointCloud c;
  for (const auto& [center, label] : blobs)
    for (std::size_t i = 0; i < per_blob; ++i) {
      c.cloud.points.push_back(center + Point3(n(rng), n(rng), n(rng)));
      c.labels.push_back(label);
    }
  return c;
}

}  // namespace

TEST(Cluster, MatchesNaiveUnionFind) {
  std::mt19937_64 rng(31);
  for (int t = 0; t < 20; ++t) {
    const auto pts = test::random_points(rng, 300, 6.0);
    for (double r : {0.5, 1.0, 1.7}) {
      for (std::size_t mp : {1u, 3u}) EXPECT_EQ(euclidean_cluster(pts, r, mp), naive_clusters(pts, r, mp));
    }
  }
}

TEST(Cluster, BoundaryDistanceIsConnected) {
  std::vector<Point3> p{{0, 0, 0}, {1, 0, 0}, {2.5, 0, 0}};
  const auto c = euclidean_cluster(p, 1.0, 1);
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c[0], (std::vector<std::size_t>{0, 1}));
  EXPECT_THROW(euclidean_cluster(p, 0.0, 1), ValidationError);
}

TEST(Extract, InstancesPerCategory) {
  std::mt19937_64 rng(37);
  // Two cars far apart, one pole, one person (ignored), one unknown label.
  const auto cloud = blob_cloud(rng, {{{0, 0, 0}, 10}, {{20, 0, 0}, 10}, {{0, 20, 0}, 80}, {{5, 5, 0}, 30},
                                      {{-9, -9, 0}, 12345}},
                                40);
  ExtractionDiagnostics diag;
  const auto inst = extract_instances(cloud, default_category_config(), 16, &diag);
  ASSERT_EQ(inst.size(), 3u);
  EXPECT_EQ(inst[0].category_index, 0u);  // car
  EXPECT_EQ(inst[1].category_index, 0u);
  EXPECT_EQ(inst[2].category_index, 10u);  // pole
  EXPECT_EQ(diag.ignored_points, 40u);
  EXPECT_EQ(diag.unknown_label_points, 40u);
  for (const auto& i : inst) {
    EXPECT_EQ(i.shape_points.size(), 16u);
    EXPECT_EQ(std::accumulate(i.one_hot.begin(), i.one_hot.end(), 0.0), 1.0);
    EXPECT_EQ(i.point_count, 40u);
  }
  EXPECT_LT((inst[1].centroid - Point3(20, 0, 0)).norm(), 0.1);
}

TEST(Extract, SmallClustersDropped) {
  std::mt19937_64 rng(41);
  const auto cloud = blob_cloud(rng, {{{0, 0, 0}, 10}}, 10);
  ExtractionDiagnostics diag;
  EXPECT_TRUE(extract_instances(cloud, default_category_config(), 8, &diag).empty());
  EXPECT_EQ(diag.discarded_clusters, 1u);
}

TEST(Extract, LabelCountMismatchThrows) {
  SemanticPointCloud c;
  c.cloud.points = {Point3::Zero()};
  EXPECT_THROW(extract_instances(c, default_category_config(), 4), ValidationError);
}

TEST(CategoryConfig, RejectsBadTables) {
  auto cfg = default_category_config();
  cfg.categories[1].index = 0;
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg = default_category_config();
  cfg.categories[2].raw_labels.push_back(10);
  EXPECT_THROW(cfg.validate(), ValidationError);
}

TEST(Graph, MatchesBruteForceKnn) {
  std::mt19937_64 rng(43);
  for (std::size_t n : {1u, 2u, 5u, 11u, 40u}) {
    const auto pts = test::random_points(rng, n, 20.0);
    const auto g = build_graph(pts, 10);
    ASSERT_EQ(g.node_count, n);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<std::size_t> others;
      for (std::size_t j = 0; j < n; ++j)
        if (j != i) others.push_back(j);
      std::sort(others.begin(), others.end(), [&](std::size_t a, std::size_t b) {
        const double da = (pts[a] - pts[i]).squaredNorm(), db = (pts[b] - pts[i]).squaredNorm();
        return da != db ? da < db : a < b;
      });
      others.resize(std::min<std::size_t>(10, others.size()));
      EXPECT_EQ(g.neighbors[i], others);
    }
  }
  EXPECT_TRUE(build_graph(std::vector<Point3>{Point3::Zero()}, 10).degenerate());
  EXPECT_THROW(build_graph(std::vector<Point3>{}, 10), ValidationError);
}
