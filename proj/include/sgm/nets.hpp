#pragma once

// Learned instance descriptors: EdgeConv graph networks over centroids and
// one-hot categories, a T-Net + per-point MLP + max-pool shape encoder,
// single-head self/cross attention per feature kind, and concatenation into
// one fused descriptor per instance.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sgm/errors.hpp"
#include "sgm/graph.hpp"
#include "sgm/instances.hpp"
#include "sgm/optim.hpp"
#include "sgm/tensor.hpp"

namespace sgm {

struct ModelConfig {
  std::size_t num_categories = 12;
  std::size_t shape_points = 128;  // K
  std::vector<std::size_t> gcn_dims{64, 64, 128};
  std::vector<std::size_t> tnet_dims{32, 32};
  std::vector<std::size_t> shape_dims{64, 128, 128};
  // Centroids enter the spatial network relative to the scene mean, in units of this length.
  double spatial_scale = 10.0;
  // Average instead of sum over each neighbourhood.
  bool gcn_mean = true;
  // Attention variants: logits divided by sqrt(d); input added to the output.
  bool attention_scaled = true;
  bool attention_residual = true;
  std::uint64_t seed = 1;

  std::size_t feature_dim() const { return gcn_dims.back(); }
  std::size_t fused_dim() const { return 3 * feature_dim(); }

  void validate() const {
    if (gcn_dims.empty() || shape_dims.empty() || tnet_dims.empty()) throw ValidationError("model: empty layer list");
    if (shape_dims.back() != gcn_dims.back()) {
      throw ValidationError("model: shape encoder and graph networks must share the output dimension");
    }
    if (num_categories < 1 || shape_points < 1) throw ValidationError("model: invalid category count or K");
    if (!(spatial_scale > 0.0)) throw ValidationError("model: spatial_scale must be > 0");
  }
};

// ---------------------------------------------------------------------------
// EdgeConv stack

struct GcnStack {
  std::size_t input_dim = 0;
  bool mean = false;
  std::vector<Tensor> weight;  // [2 * in, out]
  std::vector<Tensor> bias;    // [out]

  static GcnStack create(ParameterStore& store, const std::string& prefix, std::size_t input_dim,
                         std::span<const std::size_t> dims, std::mt19937_64& rng) {
    GcnStack g;
    g.input_dim = input_dim;
    std::size_t in = input_dim;
    for (std::size_t l = 0; l < dims.size(); ++l) {
      const std::string base = prefix + ".layer" + std::to_string(l);
      g.weight.push_back(store.add_uniform(base + ".weight", {2 * in, dims[l]}, 2 * in, rng));
      g.bias.push_back(store.add_uniform(base + ".bias", {dims[l]}, 2 * in, rng));
      in = dims[l];
    }
    return g;
  }
};

// Edge endpoints in node-major order; an empty neighbourhood becomes {i}.
struct EdgeIndex {
  std::vector<std::size_t> src, dst;
  std::size_t per_node = 0;
};

inline EdgeIndex edge_index(const InstanceGraph& graph) {
  EdgeIndex e;
  if (graph.node_count == 0) return e;
  e.per_node = std::max<std::size_t>(graph.neighbors.at(0).size(), 1);
  for (std::size_t i = 0; i < graph.node_count; ++i) {
    const auto& nb = graph.neighbors[i];
    const std::size_t count = std::max<std::size_t>(nb.size(), 1);
    if (count != e.per_node) throw ValidationError("gcn: every node needs the same neighbour count");
    for (std::size_t t = 0; t < count; ++t) {
      e.src.push_back(i);
      e.dst.push_back(nb.empty() ? i : nb[t]);
    }
  }
  return e;
}

// out_i = sum_{j in N(i)} relu([f_i ; f_i - f_j] W + b), three times.
inline Tensor gcn_forward(const GcnStack& stack, const Tensor& features, const InstanceGraph& graph) {
  if (features.rank() != 2 || features.dim(1) != stack.input_dim || features.dim(0) != graph.node_count) {
    throw ShapeError("gcn_forward: expected [" + std::to_string(graph.node_count) + "," +
                     std::to_string(stack.input_dim) + "] features, got " + shape_str(features.shape()));
  }
  const EdgeIndex e = edge_index(graph);
  Tensor f = features;
  for (std::size_t l = 0; l < stack.weight.size(); ++l) {
    const Tensor fi = gather_rows(f, e.src);
    const Tensor fj = gather_rows(f, e.dst);
    const Tensor pair = concat({fi, sub(fi, fj)}, 1);
    const Tensor msg = relu(linear(pair, stack.weight[l], stack.bias[l]));
    const std::size_t out = stack.weight[l].dim(1);
    const Tensor grouped = reshape(msg, {graph.node_count, e.per_node, out});
    f = stack.mean ? mean(grouped, 1) : sum(grouped, 1);
  }
  return f;
}

// ---------------------------------------------------------------------------
// Shape encoder

struct ShapeEncoder {
  std::size_t points = 0;
  std::vector<Tensor> tnet_weight, tnet_bias;
  Tensor tnet_out_weight, tnet_out_bias;  // [hidden, 9], [9]; starts at H = I
  std::vector<Tensor> weight, bias, norm_scale, norm_shift;

  static ShapeEncoder create(ParameterStore& store, const ModelConfig& cfg, std::mt19937_64& rng) {
    ShapeEncoder s;
    s.points = cfg.shape_points;
    std::size_t in = 3;
    for (std::size_t l = 0; l < cfg.tnet_dims.size(); ++l) {
      const std::string base = "shape.tnet.layer" + std::to_string(l);
      s.tnet_weight.push_back(store.add_uniform(base + ".weight", {in, cfg.tnet_dims[l]}, in, rng));
      s.tnet_bias.push_back(store.add_uniform(base + ".bias", {cfg.tnet_dims[l]}, in, rng));
      in = cfg.tnet_dims[l];
    }
    s.tnet_out_weight = store.add_constant("shape.tnet.out.weight", {in, 9}, 0.0);
    s.tnet_out_bias = store.add("shape.tnet.out.bias", {9}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    in = 3;
    for (std::size_t l = 0; l < cfg.shape_dims.size(); ++l) {
      const std::string base = "shape.layer" + std::to_string(l);
      s.weight.push_back(store.add_uniform(base + ".weight", {in, cfg.shape_dims[l]}, in, rng));
      s.bias.push_back(store.add_uniform(base + ".bias", {cfg.shape_dims[l]}, in, rng));
      s.norm_scale.push_back(store.add_constant(base + ".norm.scale", {cfg.shape_dims[l]}, 1.0));
      s.norm_shift.push_back(store.add_constant(base + ".norm.shift", {cfg.shape_dims[l]}, 0.0));
      in = cfg.shape_dims[l];
    }
    return s;
  }
};

// Per-instance 3x3 alignment H from the T-Net, shape [M, 3, 3].
inline Tensor tnet_forward(const ShapeEncoder& enc, const Tensor& points) {
  Tensor x = points;
  for (std::size_t l = 0; l < enc.tnet_weight.size(); ++l) x = relu(linear(x, enc.tnet_weight[l], enc.tnet_bias[l]));
  const Tensor pooled = max_pool(x, 1);
  return reshape(linear(pooled, enc.tnet_out_weight, enc.tnet_out_bias), {points.dim(0), 3, 3});
}

// points: [M, K, 3] -> [M, D]
inline Tensor shape_encode(const ShapeEncoder& enc, const Tensor& points) {
  if (points.rank() != 3 || points.dim(1) != enc.points || points.dim(2) != 3) {
    throw ShapeError("shape_encode: expected [M," + std::to_string(enc.points) + ",3] points, got " +
                     shape_str(points.shape()));
  }
  // Lexicographic point order inside each instance: every reduction below then
  // sees the same sequence whatever order the points arrived in.
  const std::size_t m = points.dim(0), k = points.dim(1);
  const auto pv = points.data();
  std::vector<std::size_t> order(m * k);
  for (std::size_t i = 0; i < m; ++i) {
    const auto first = order.begin() + static_cast<std::ptrdiff_t>(i * k);
    std::iota(first, first + static_cast<std::ptrdiff_t>(k), i * k);
    std::stable_sort(first, first + static_cast<std::ptrdiff_t>(k), [&](std::size_t a, std::size_t b) {
      return std::lexicographical_compare(pv.begin() + static_cast<std::ptrdiff_t>(3 * a),
                                          pv.begin() + static_cast<std::ptrdiff_t>(3 * a + 3),
                                          pv.begin() + static_cast<std::ptrdiff_t>(3 * b),
                                          pv.begin() + static_cast<std::ptrdiff_t>(3 * b + 3));
    });
  }
  const Tensor sorted = reshape(gather_rows(reshape(points, {m * k, 3}), order), {m, k, 3});
  const Tensor h = tnet_forward(enc, sorted);
  Tensor x = matmul(sorted, transpose(h));  // p~^T = H p^T
  for (std::size_t l = 0; l < enc.weight.size(); ++l) {
    x = relu(feature_normalize(linear(x, enc.weight[l], enc.bias[l]), 1, enc.norm_scale[l], enc.norm_shift[l]));
  }
  return max_pool(x, 1);
}

// ---------------------------------------------------------------------------
// Attention

struct AttentionBlock {
  Tensor wq, bq, wk, bk, wv, bv;  // weights [d, d], biases [d]
  bool scaled = false, residual = false;

  static AttentionBlock create(ParameterStore& store, const std::string& prefix, std::size_t dim,
                               std::mt19937_64& rng) {
    AttentionBlock a;
    const auto w = [&](const char* which) { return store.add_uniform(prefix + "." + which + ".weight", {dim, dim}, dim, rng); };
    const auto b = [&](const char* which) { return store.add_uniform(prefix + "." + which + ".bias", {dim}, dim, rng); };
    a.wq = w("q");
    a.bq = b("q");
    a.wk = w("k");
    a.bk = b("k");
    a.wv = w("v");
    a.bv = b("v");
    return a;
  }
};

struct AttentionOutput {
  Tensor features;  // [M, d]
  Tensor weights;   // [M, N], rows sum to 1
};

// out_i = sum_j softmax_j(q_i . k_j) v_j with queries from `queries`,
// keys and values from `context`.
inline AttentionOutput attend(const AttentionBlock& block, const Tensor& queries, const Tensor& context) {
  const Tensor q = linear(queries, block.wq, block.bq);
  const Tensor k = linear(context, block.wk, block.bk);
  const Tensor v = linear(context, block.wv, block.bv);
  Tensor logits = matmul(q, transpose(k));
  if (block.scaled) logits = scale(logits, 1.0 / std::sqrt(static_cast<double>(q.dim(1))));
  const Tensor alpha = softmax(logits, 1);
  const Tensor out = matmul(alpha, v);
  return {block.residual ? add(queries, out) : out, alpha};
}

inline AttentionOutput self_attention(const AttentionBlock& block, const Tensor& feats) {
  return attend(block, feats, feats);
}

inline AttentionOutput cross_attention(const AttentionBlock& block, const Tensor& feats_x, const Tensor& feats_y) {
  return attend(block, feats_x, feats_y);
}

// ---------------------------------------------------------------------------
// Model

enum FeatureKind : std::size_t { kSpatial = 0, kSemantic = 1, kShape = 2 };
inline constexpr std::array<const char*, 3> kFeatureKindNames{"o", "s", "h"};

class Model {
 public:
  explicit Model(ModelConfig cfg = {}) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    gcn_spatial_ = GcnStack::create(store_, "gcn_spatial", 3, cfg_.gcn_dims, rng);
    gcn_semantic_ = GcnStack::create(store_, "gcn_semantic", cfg_.num_categories, cfg_.gcn_dims, rng);
    gcn_spatial_.mean = gcn_semantic_.mean = cfg_.gcn_mean;
    shape_ = ShapeEncoder::create(store_, cfg_, rng);
    for (std::size_t kind = 0; kind < 3; ++kind) {
      const std::string base = std::string("attn.") + kFeatureKindNames[kind];
      self_[kind] = AttentionBlock::create(store_, base + ".self", cfg_.feature_dim(), rng);
      cross_[kind] = AttentionBlock::create(store_, base + ".cross", cfg_.feature_dim(), rng);
      for (auto* b : {&self_[kind], &cross_[kind]}) {
        b->scaled = cfg_.attention_scaled;
        b->residual = cfg_.attention_residual;
      }
    }
    const std::size_t f = cfg_.fused_dim();
    // Zero start: raw features are large enough that a random W saturates the kernel.
    affinity_ = store_.add_constant("affinity.W", {f, f}, 0.0);
    dustbin_ = store_.add_constant("dustbin.z", {1}, 1.0);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }

  const GcnStack& gcn_spatial() const { return gcn_spatial_; }
  const GcnStack& gcn_semantic() const { return gcn_semantic_; }
  const ShapeEncoder& shape_encoder() const { return shape_; }
  const AttentionBlock& self_block(std::size_t kind) const { return self_.at(kind); }
  const AttentionBlock& cross_block(std::size_t kind) const { return cross_.at(kind); }
  const Tensor& affinity_weight() const { return affinity_; }
  const Tensor& dustbin() const { return dustbin_; }

 private:
  ModelConfig cfg_;
  ParameterStore store_;
  GcnStack gcn_spatial_, gcn_semantic_;
  ShapeEncoder shape_;
  std::array<AttentionBlock, 3> self_, cross_;
  Tensor affinity_, dustbin_;
};

// Network inputs for one scene.
struct SceneTensors {
  Tensor centroids;  // [M, 3], scene-mean-centred and scaled
  Tensor one_hot;    // [M, C]
  Tensor shape;      // [M, K, 3], relative to each instance centroid
  InstanceGraph graph;

  std::size_t size() const { return graph.node_count; }
};

inline SceneTensors make_scene_tensors(std::span<const SemanticInstance> instances, const InstanceGraph& graph,
                                       const ModelConfig& cfg) {
  const std::size_t m = instances.size();
  if (m == 0) throw ValidationError("scene has no instances");
  if (graph.node_count != m) throw ValidationError("graph node count does not match instance count");
  Point3 mean = Point3::Zero();
  for (const auto& inst : instances) mean += inst.centroid;
  mean /= static_cast<double>(m);

  std::vector<double> c, s, p;
  c.reserve(3 * m);
  s.reserve(cfg.num_categories * m);
  p.reserve(3 * cfg.shape_points * m);
  for (const auto& inst : instances) {
    if (inst.one_hot.size() != cfg.num_categories) throw ValidationError("instance one-hot has the wrong length");
    if (inst.shape_points.size() != cfg.shape_points) {
      throw ValidationError("instance has " + std::to_string(inst.shape_points.size()) + " shape points, model expects " +
                            std::to_string(cfg.shape_points));
    }
    const Point3 rel = (inst.centroid - mean) / cfg.spatial_scale;
    c.insert(c.end(), {rel.x(), rel.y(), rel.z()});
    s.insert(s.end(), inst.one_hot.begin(), inst.one_hot.end());
    for (const auto& q : inst.shape_points) {
      const Point3 d = q - inst.centroid;
      p.insert(p.end(), {d.x(), d.y(), d.z()});
    }
  }
  return {Tensor({m, 3}, std::move(c)), Tensor({m, cfg.num_categories}, std::move(s)),
          Tensor({m, cfg.shape_points, 3}, std::move(p)), graph};
}

struct InstanceFeatureSet {
  std::array<Tensor, 3> base;   // o^(3), s^(3), h
  std::array<Tensor, 3> self;   // after self-attention
  std::array<Tensor, 3> cross;  // after cross-attention
  std::array<Tensor, 3> self_weights, cross_weights;
  Tensor fused;  // [M, 3d] = concat(o, s, h) after cross-attention
};

struct FeaturePair {
  InstanceFeatureSet x, y;
};

inline std::array<Tensor, 3> base_features(const Model& model, const SceneTensors& scene) {
  return {gcn_forward(model.gcn_spatial(), scene.centroids, scene.graph),
          gcn_forward(model.gcn_semantic(), scene.one_hot, scene.graph),
          shape_encode(model.shape_encoder(), scene.shape)};
}

inline FeaturePair extract_features(const Model& model, const SceneTensors& sx, const SceneTensors& sy) {
  FeaturePair out;
  out.x.base = base_features(model, sx);
  out.y.base = base_features(model, sy);
  for (std::size_t kind = 0; kind < 3; ++kind) {
    const auto ax = self_attention(model.self_block(kind), out.x.base[kind]);
    const auto ay = self_attention(model.self_block(kind), out.y.base[kind]);
    out.x.self[kind] = ax.features;
    out.y.self[kind] = ay.features;
    out.x.self_weights[kind] = ax.weights;
    out.y.self_weights[kind] = ay.weights;
    const auto cx = cross_attention(model.cross_block(kind), ax.features, ay.features);
    const auto cy = cross_attention(model.cross_block(kind), ay.features, ax.features);
    out.x.cross[kind] = cx.features;
    out.y.cross[kind] = cy.features;
    out.x.cross_weights[kind] = cx.weights;
    out.y.cross_weights[kind] = cy.weights;
  }
  out.x.fused = concat({out.x.cross[0], out.x.cross[1], out.x.cross[2]}, 1);
  out.y.fused = concat({out.y.cross[0], out.y.cross[1], out.y.cross[2]}, 1);
  return out;
}

}  // namespace sgm
