// Acceptance run: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria (0 when everything passes).
//
//   acceptance            all criteria
//   acceptance 3 5        only criteria 3 and 5

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sgm/sgm.hpp"

using namespace sgm;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::vector<Point3> random_points(std::mt19937_64& rng, std::size_t n, double half) {
  std::uniform_real_distribution<double> d(-half, half);
  std::vector<Point3> p;
  for (std::size_t i = 0; i < n; ++i) p.emplace_back(d(rng), d(rng), d(rng));
  return p;
}

Eigen::Vector3d random_axis(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  return Eigen::Vector3d(n(rng), n(rng), n(rng)).normalized();
}

RigidTransform random_transform(std::mt19937_64& rng, double max_deg, double max_t) {
  std::uniform_real_distribution<double> ang(-deg2rad(max_deg), deg2rad(max_deg)), tr(-max_t, max_t);
  RigidTransform t;
  t.rotation = Eigen::AngleAxisd(ang(rng), random_axis(rng)).toRotationMatrix();
  t.translation = Eigen::Vector3d(tr(rng), tr(rng), tr(rng));
  return t;
}

Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = d(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

// ---------------------------------------------------------------------------

Outcome c1_kabsch() {
  std::mt19937_64 rng(101);
  std::vector<std::pair<std::vector<Point3>, std::vector<Point3>>> cases;
  std::vector<RigidTransform> gts;
  for (int t = 0; t < 100; ++t) {
    gts.push_back(random_transform(rng, 180.0, 20.0));
    auto src = random_points(rng, 100, 10.0);
    std::vector<Point3> dst;
    for (const auto& p : src) dst.push_back(gts.back().apply(p));
    cases.emplace_back(std::move(src), std::move(dst));
  }
  const auto t0 = Clock::now();
  double worst_r = 0.0, worst_t = 0.0;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto est = kabsch_svd(cases[i].first, cases[i].second);
    worst_r = std::max(worst_r, rre(est.rotation, gts[i].rotation));
    worst_t = std::max(worst_t, rte(est.translation, gts[i].translation));
  }
  const double secs = seconds_since(t0);
  return {worst_r < 1e-9 && worst_t < 1e-12 && secs < 1.0,
          fmt("max RRE %.3g deg, max RTE %.3g m, %.3f s", worst_r, worst_t, secs)};
}

Outcome c2_icp() {
  std::mt19937_64 rng(202);
  bool monotone = true;
  double worst_r = 0.0, worst_t = 0.0;
  for (int t = 0; t < 50; ++t) {
    PointCloud src;
    src.points = random_points(rng, 500, 10.0);
    const auto gt = random_transform(rng, 180.0, 10.0);
    const auto dst = apply_transform(gt, src);
    RigidTransform d;
    d.rotation = Eigen::AngleAxisd(deg2rad(2.0), random_axis(rng)).toRotationMatrix();
    d.translation = 0.2 * random_axis(rng);
    const auto res = icp_refine(src, dst, d * gt);
    for (std::size_t i = 1; i < res.rms_history.size(); ++i) monotone = monotone && res.rms_history[i] <= res.rms_history[i - 1];
    worst_r = std::max(worst_r, rre(res.transform.rotation, gt.rotation));
    worst_t = std::max(worst_t, rte(res.transform.translation, gt.translation));
  }
  return {monotone && worst_r < 0.01 && worst_t < 1e-3,
          fmt("RMS non-increasing: %s, max RRE %.3g deg, max RTE %.3g m", monotone ? "yes" : "no", worst_r, worst_t)};
}

Outcome c3_sinkhorn() {
  std::mt19937_64 rng(303);
  double worst_marg = 0.0, worst_shift = 0.0, min_entry = INFINITY;
  bool all_converged = true;
  std::size_t max_iters_used = 0, within_default = 0;
  const SinkhornOptions to_convergence{5000, 1e-6};
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + rng() % 20;
    std::uniform_real_distribution<double> d(-5.0, 5.0), s(-100.0, 100.0);
    std::vector<double> v(n * n);
    for (auto& x : v) x = d(rng);
    const Tensor a({n, n}, v);
    const auto p = sinkhorn(a, to_convergence);
    all_converged = all_converged && p.converged;
    max_iters_used = std::max(max_iters_used, p.iterations);
    within_default += p.iterations <= SinkhornOptions{}.max_iters ? 1 : 0;
    worst_marg = std::max(worst_marg, marginal_residual(p.augmented));
    const auto q = sinkhorn(add_constant(a, s(rng)), to_convergence);
    for (std::size_t e = 0; e < v.size(); ++e) {
      worst_shift = std::max(worst_shift, std::abs(q.augmented[e] - p.augmented[e]));
      min_entry = std::min(min_entry, p.augmented[e]);
    }
  }
  return {all_converged && worst_marg <= 1e-6 && worst_shift <= 1e-9 && min_entry > 0.0,
          fmt("max marginal error %.3g, max shift change %.3g, min entry %.3g; iterations <= %zu (%zu/200 within %zu)",
              worst_marg, worst_shift, min_entry, max_iters_used, within_default, SinkhornOptions{}.max_iters)};
}

Outcome c4_matching() {
  std::mt19937_64 rng(404);
  std::uniform_real_distribution<double> off(0.0, 1.0), boost(1.0, 1.5);
  const auto t0 = Clock::now();
  int agree = 0;
  for (int t = 0; t < 100; ++t) {
    std::vector<std::size_t> perm(8);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    Eigen::MatrixXd logits(8, 8);
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 8; ++j) logits(i, j) = off(rng);
    const double max_off = logits.maxCoeff();
    for (int i = 0; i < 8; ++i) logits(i, static_cast<int>(perm[static_cast<std::size_t>(i)])) = 5.0 * max_off * boost(rng);
    std::vector<double> v(81, 1.0);  // dustbin score 1, the model's initial value
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 8; ++j) v[static_cast<std::size_t>(i * 9 + j)] = logits(i, j);
    const auto p = sinkhorn(Tensor({9, 9}, v));
    const auto hard = hard_assign(p.trimmed(), 0.7);
    const auto oracle = hungarian_oracle(p.trimmed());
    bool same = hard.pairs.size() == 8;
    for (const auto& c : hard.pairs) same = same && oracle[c.i] == static_cast<long>(c.j);
    agree += same ? 1 : 0;
  }
  const double secs = seconds_since(t0);
  return {agree == 100 && secs < 5.0, fmt("%d/100 agree with the Hungarian oracle, %.3f s", agree, secs)};
}

// Scalar probe sum(w * f(x)) with fixed random w.
double fd(std::mt19937_64& rng, const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
  Tensor w;
  {
    NoGradGuard g;
    w = random_tensor(rng, f(x).shape()).detach();
  }
  return grad_check([&](const Tensor& in) { return sum_all(mul(f(in), w)); }, x);
}

std::vector<SemanticInstance> toy_instances(std::mt19937_64& rng, std::size_t m, std::size_t k, std::size_t c) {
  std::uniform_real_distribution<double> pos(-15.0, 15.0), u(-1.0, 1.0);
  std::vector<SemanticInstance> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    auto& s = out[i];
    s.id = i;
    s.category_index = rng() % c;
    s.one_hot.assign(c, 0.0);
    s.one_hot[s.category_index] = 1.0;
    s.centroid = Point3(pos(rng), pos(rng), 0.3 * u(rng));
    for (std::size_t p = 0; p < k; ++p) s.shape_points.push_back(s.centroid + Point3(u(rng), u(rng), u(rng)));
    s.point_count = k;
  }
  return out;
}

double end_to_end_fd(std::mt19937_64& rng, bool variant, std::size_t* checked) {
  ModelConfig cfg;
  cfg.gcn_mean = cfg.attention_scaled = cfg.attention_residual = variant;
  cfg.num_categories = 3;
  Model model(cfg);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  const double wscale = variant ? 1e-3 : 1e-7;
  for (auto& v : model.parameters().find("affinity.W")->tensor.mutable_data()) v = wscale * d(rng);
  const auto ix = toy_instances(rng, 4, cfg.shape_points, 3), iy = toy_instances(rng, 4, cfg.shape_points, 3);
  const auto sx = make_scene_tensors(ix, build_graph(ix, 10), cfg);
  const auto sy = make_scene_tensors(iy, build_graph(iy, 10), cfg);
  GroundTruthPairs gt;
  gt.pairs = {{0, 1}, {2, 3}, {3, 0}};
  gt.unmatched_x = {1};
  gt.unmatched_y = {2};
  const SinkhornOptions sk{20, 1e-12};
  const auto loss = [&] { return matching_loss(forward_match(model, sx, sy, sk).assignment, gt, {true}).value; };
  model.parameters().zero_grad();
  backward(loss());
  double worst = 0.0;
  NoGradGuard no_grad;
  for (auto& p : model.parameters().params()) {
    const auto analytic = p.tensor.grad_or_zero();
    auto data = p.tensor.mutable_data();
    const std::size_t stride = std::max<std::size_t>(1, data.size() / 6);
    for (std::size_t i = 0; i < data.size(); i += stride) {
      const double orig = data[i], h = 1e-6 * std::max(1.0, std::abs(orig));
      data[i] = orig + h;
      const double fp = loss().item();
      data[i] = orig - h;
      const double fm = loss().item();
      data[i] = orig;
      const double numeric = (fp - fm) / (2 * h);
      worst = std::max(worst, std::abs(numeric - analytic[i]) / std::max({1.0, std::abs(numeric), std::abs(analytic[i])}));
      ++*checked;
    }
  }
  return worst;
}

Outcome c5_gradients() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(505);
  double smooth = 0.0;
  const auto upd = [&](double e) { smooth = std::max(smooth, e); };
  const Tensor x = random_tensor(rng, {4, 5}), other = random_tensor(rng, {4, 5}).detach();
  const Tensor pos = random_tensor(rng, {4, 5}, 0.3, 2.0);
  upd(fd(rng, [&](const Tensor& t) { return add(t, other); }, x));
  upd(fd(rng, [&](const Tensor& t) { return sub(other, t); }, x));
  upd(fd(rng, [&](const Tensor& t) { return mul(t, other); }, x));
  upd(fd(rng, [&](const Tensor& t) { return scale(t, 1.7); }, x));
  upd(fd(rng, [&](const Tensor& t) { return add_constant(t, 0.3); }, x));
  upd(fd(rng, [&](const Tensor& t) { return exp(t); }, x));
  upd(fd(rng, [&](const Tensor& t) { return log(t); }, pos));
  Tensor kinkless = random_tensor(rng, {4, 5});
  for (auto& v : kinkless.mutable_data()) v += v > 0 ? 0.1 : -0.1;
  upd(fd(rng, [&](const Tensor& t) { return relu(t); }, kinkless));
  const Tensor b = random_tensor(rng, {5, 3});
  upd(fd(rng, [&](const Tensor& t) { return matmul(t, b.detach()); }, x));
  upd(fd(rng, [&](const Tensor& t) { return matmul(x.detach(), t); }, b));
  upd(fd(rng, [&](const Tensor& t) { return linear(t, b.detach(), Tensor({3}, {0.1, -0.2, 0.3})); }, x));
  upd(fd(rng, [&](const Tensor& t) { return transpose(t); }, x));
  upd(fd(rng, [&](const Tensor& t) { return reshape(t, {2, 10}); }, x));
  const std::vector<std::size_t> idx{3, 0, 0, 2};
  upd(fd(rng, [&](const Tensor& t) { return gather_rows(t, idx); }, x));
  upd(fd(rng, [&](const Tensor& t) { return concat({t, other}, 1); }, x));
  const Tensor cube = random_tensor(rng, {3, 4, 5});
  for (std::size_t axis = 0; axis < 3; ++axis) {
    upd(fd(rng, [&](const Tensor& t) { return sum(t, axis); }, cube));
    upd(fd(rng, [&](const Tensor& t) { return mean(t, axis); }, cube));
    upd(fd(rng, [&](const Tensor& t) { return max_pool(t, axis); }, cube));
  }
  for (std::size_t axis = 0; axis < 2; ++axis) {
    upd(fd(rng, [&](const Tensor& t) { return softmax(t, axis); }, x));
    upd(fd(rng, [&](const Tensor& t) { return log_softmax(t, axis); }, x));
    upd(fd(rng, [&](const Tensor& t) { return normalize_sum(t, axis); }, pos));
  }
  const Tensor g = random_tensor(rng, {5}, 0.5, 1.5), bias = random_tensor(rng, {5});
  upd(fd(rng, [&](const Tensor& t) { return feature_normalize(t, 1, g.detach(), bias.detach()); }, cube));
  upd(fd(rng, [&](const Tensor& t) { return feature_normalize(cube.detach(), 1, t, bias.detach()); }, g));
  upd(fd(rng, [&](const Tensor& t) { return feature_normalize(cube.detach(), 1, g.detach(), t); }, bias));
  const Tensor w = random_tensor(rng, {5, 5}), fy = random_tensor(rng, {3, 5}).detach();
  upd(fd(rng, [&](const Tensor& t) { return affinity(t, fy, w.detach()); }, x));
  upd(fd(rng, [&](const Tensor& t) { return affinity(x.detach(), fy, t); }, w));
  const Tensor z({1}, {0.5}, true);
  upd(fd(rng, [&](const Tensor& t) { return augment_dustbins(t, z.detach()); }, x));
  upd(fd(rng, [&](const Tensor& t) { return augment_dustbins(x.detach(), t); }, z));
  upd(fd(rng, [&](const Tensor& t) { return sinkhorn(t, {5, 1e-12}).augmented; }, x));
  upd(fd(rng, [&](const Tensor& t) { return sinkhorn(t, {5, 1e-12}).log_augmented; }, x));

  std::size_t checked = 0;
  const double e2e_variant = end_to_end_fd(rng, true, &checked);
  const double e2e_literal = end_to_end_fd(rng, false, &checked);
  const double secs = seconds_since(t0);
  return {smooth <= 1e-6 && e2e_variant <= 1e-4 && e2e_literal <= 1e-4 && secs < 60.0,
          fmt("primitives max rel err %.3g; end-to-end loss %.3g (default model), %.3g (literal variant) over %zu "
              "coordinates; %.1f s",
              smooth, e2e_variant, e2e_literal, checked, secs)};
}

Outcome c6_oracles() {
  std::mt19937_64 rng(606);
  bool knn_ok = true, cluster_ok = true;
  for (int t = 0; t < 20; ++t) {
    std::uniform_int_distribution<int> grid(-4, 4);
    std::vector<Point3> pts;
    for (int i = 0; i < 300; ++i) pts.emplace_back(grid(rng), grid(rng), grid(rng));
    const KdTree tree(pts);
    for (int q = 0; q < 20; ++q) {
      const Point3 query = pts[rng() % 300] + Point3(0.5 * (q % 2), 0, 0);
      std::vector<std::size_t> idx(300);
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        const double da = (pts[a] - query).squaredNorm(), db = (pts[b] - query).squaredNorm();
        return da != db ? da < db : a < b;
      });
      for (std::size_t k : {1u, 10u, 300u}) {
        const std::vector<std::size_t> want(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
        knn_ok = knn_ok && knn(pts, query, k) == want && tree.knn(query, k) == want;
      }
    }
    const auto cont = random_points(rng, 300, 6.0);
    for (double r : {0.6, 1.2}) {
      std::vector<std::size_t> parent(300);
      std::iota(parent.begin(), parent.end(), std::size_t{0});
      std::function<std::size_t(std::size_t)> root = [&](std::size_t a) { return parent[a] == a ? a : root(parent[a]); };
      for (std::size_t i = 0; i < 300; ++i)
        for (std::size_t j = i + 1; j < 300; ++j)
          if ((cont[i] - cont[j]).squaredNorm() <= r * r) {
            const auto a = root(i), b = root(j);
            if (a != b) parent[std::max(a, b)] = std::min(a, b);
          }
      std::map<std::size_t, std::vector<std::size_t>> groups;
      for (std::size_t i = 0; i < 300; ++i) groups[root(i)].push_back(i);
      std::vector<std::vector<std::size_t>> want;
      for (auto& [k, v] : groups)
        if (v.size() >= 2) want.push_back(v);
      cluster_ok = cluster_ok && euclidean_cluster(cont, r, 2) == want;
    }
  }
  std::vector<Point3> line;
  for (double x : {0.0, 1.0, 2.0, 3.0, 10.0}) line.emplace_back(x, 0.0, 0.0);
  const bool fps_ok = fps(line, 7) == std::vector<std::size_t>{0, 4, 3, 1, 2, 0, 0};
  return {knn_ok && cluster_ok && fps_ok, fmt("knn %s, clustering %s, collinear fps %s", knn_ok ? "exact" : "MISMATCH",
                                              cluster_ok ? "exact" : "MISMATCH", fps_ok ? "exact" : "MISMATCH")};
}

Outcome c7_metrics() {
  const std::vector<Point3> cx{{0, 0, 0}, {10, 0, 0}, {20, 0, 0}};
  const std::vector<Point3> cy{{0.5, 0, 0}, {10, 0.9, 0}, {25, 0, 0}};
  const auto id = RigidTransform::identity();
  const auto ip = inlier_precision(cx, cy, std::vector<IndexPair>{{0, 0}, {1, 1}, {2, 2}}, id, 1.0);
  const auto ir = inlier_recall(cx, cy, std::vector<IndexPair>{{0, 0}, {1, 1}, {2, 2}, {1, 2}},
                                std::vector<IndexPair>{{0, 0}, {2, 2}}, id, 1.0);
  const auto rr = registration_recall(std::vector<PairError>{{1.0, 0.5, false}, {7.0, 0.1, false}});
  const double e3 = rre(rotation_x(deg2rad(1.0)) * rotation_y(deg2rad(-0.5)) * rotation_z(deg2rad(1.5)),
                        Eigen::Matrix3d::Identity());
  const double t5 = rte(Eigen::Vector3d(1, 2, 3), Eigen::Vector3d(4, 6, 3));
  const bool ok = ip.value == 2.0 / 3.0 && ir.value == 0.25 && rr.value == 0.5 && std::abs(e3 - 3.0) < 1e-12 && t5 == 5.0;
  return {ok, fmt("IP %.6f (2/3), IR %.6f (1/4), RR %.3f (1/2), RRE %.12f (3), RTE %.3f (5)", ip.value, ir.value,
                  rr.value, e3, t5)};
}

// ---------------------------------------------------------------------------

constexpr std::size_t kE2eTrainPairs = 500;
constexpr std::size_t kE2eValPairs = 30;
constexpr std::size_t kE2eTestPairs = 100;
constexpr std::size_t kE2eEpochs = 14;
constexpr double kE2eLearningRate = 1e-3;

Outcome c8_end_to_end() {
  const auto cats = default_category_config();
  SceneGenConfig gen;  // 25 +- 10 instances, 0.2 m jitter, dropout 0.2, full-circle yaw, <= 10 m
  gen.seed = 2024;
  ModelConfig mc;
  TrainConfig tc;
  tc.learning_rate = kE2eLearningRate;
  tc.epochs = kE2eEpochs;
  const auto prepare = [&](SceneStream s, std::size_t n) {
    std::vector<ScenePair> out;
    for (const auto& g : generate_scene_pairs(gen, cats, s, n)) {
      out.push_back(prepare_pair(g.x, g.y, g.gt, cats, mc));
      out.back().seed = g.seed;
    }
    return out;
  };
  const auto train_set = prepare(SceneStream::train, kE2eTrainPairs);
  const auto val_set = prepare(SceneStream::validation, kE2eValPairs);
  std::vector<EvalInput> test;
  for (const auto& g : generate_scene_pairs(gen, cats, SceneStream::test, kE2eTestPairs))
    test.push_back({g.x, g.y, g.gt, std::to_string(g.seed)});

  Model model(mc);
  const auto t0 = Clock::now();
  train(model, train_set, val_set, tc, [&](const EpochRecord& r) {
    std::printf("  epoch %2zu  loss %8.4f  val IP %.3f  val IR %.3f  %6.0f s\n", r.epoch, r.mean_loss, r.val_ip,
                r.val_ir, seconds_since(t0));
    std::fflush(stdout);
  });
  const double train_secs = seconds_since(t0);
  const auto rep = evaluate(model, test, cats);
  EvalConfig plain;
  plain.registration.coarse_trim = 0.0;
  const auto rep_plain = evaluate(model, test, cats, plain);
  const bool ok = rep.rr.defined && rep.rr.value >= 0.90 && rep.rte.median <= 0.1 && rep.ip >= 0.85 &&
                  train_secs <= 1800.0 && kE2eEpochs <= 50;
  return {ok, fmt("RR %.3f (>= 0.90), median RTE %.4f m (<= 0.1), IP %.3f (>= 0.85), skipped %zu; %zu epochs, "
                  "training %.0f s (<= 1800); untrimmed coarse fit: RR %.3f, median RTE %.4f m",
                  rep.rr.value, rep.rte.median, rep.ip, rep.skipped, kE2eEpochs, train_secs, rep_plain.rr.value,
                  rep_plain.rte.median)};
}

Outcome c9_formats() {
  std::vector<std::string> bad;
  const std::vector<unsigned char> scan{0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x00, 0x40, 0x00, 0x00, 0x40,
                                        0x40, 0x00, 0x00, 0x00, 0x3F, 0x00, 0x00, 0x80, 0xBF, 0x00, 0x00,
                                        0x00, 0x00, 0x00, 0x00, 0x88, 0x40, 0x00, 0x00, 0x80, 0x3F};
  const auto c = parse_scan(scan);
  if (!(c.size() == 2 && c.points[0] == Point3(1, 2, 3) && c.points[1] == Point3(-1, 0, 4.25) &&
        c.intensity == std::vector<double>{0.5, 1.0} && encode_scan(c) == scan))
    bad.push_back("scan");
  const std::vector<unsigned char> labels{0x0A, 0, 0, 0, 0x28, 0, 0, 0, 0x0A, 0, 0x01, 0};
  if (parse_labels(labels, 3) != std::vector<std::uint32_t>{10, 40, 10}) bad.push_back("labels");
  std::istringstream poses("1 0 0 1 0 1 0 0 0 0 1 0\n0 -1 0 0 1 0 0 2 0 0 1 0\n");
  const auto p = parse_poses(poses);
  Eigen::Matrix3d rz;
  rz << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  const auto rel = relative_pose(p[0], p[1]);
  if (!(rel.rotation == rz && rel.translation == Eigen::Vector3d(-1, 2, 0))) bad.push_back("poses");

  Model m;
  const auto bytes = encode_checkpoint(named_tensors(m.parameters()));
  ModelConfig other_cfg;
  other_cfg.seed = 77;
  Model other(other_cfg);
  apply_checkpoint(other.parameters(), decode_checkpoint(bytes));
  if (other.parameters().snapshot() != m.parameters().snapshot() ||
      encode_checkpoint(named_tensors(other.parameters())) != bytes)
    bad.push_back("checkpoint round trip");
  auto corrupt = bytes;
  corrupt[corrupt.size() / 3] ^= 0x10;
  bool crc = false;
  try {
    decode_checkpoint(corrupt);
  } catch (const CrcError&) {
    crc = true;
  }
  if (!crc) bad.push_back("corruption not detected");

  // Two same-seed training runs.
  const auto cats = default_category_config();
  SceneGenConfig gen;
  gen.min_instances = 8;
  gen.max_instances = 12;
  gen.seed = 9;
  std::vector<ScenePair> set;
  for (const auto& g : generate_scene_pairs(gen, cats, SceneStream::train, 6)) {
    set.push_back(prepare_pair(g.x, g.y, g.gt, cats, ModelConfig{}));
    set.back().seed = g.seed;
  }
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 3;
  tc.learning_rate = 1e-3;
  std::vector<std::vector<unsigned char>> runs;
  for (int r = 0; r < 2; ++r) {
    Model model;
    train(model, set, {}, tc);
    runs.push_back(encode_checkpoint(named_tensors(model.parameters())));
  }
  if (runs[0] != runs[1]) bad.push_back("training not reproducible");
  std::string detail = bad.empty() ? "fixtures, checkpoint round trip, CRC detection, reproducible training" : "failed:";
  for (const auto& b : bad) detail += " " + b + ";";
  return {bad.empty(), detail};
}

Outcome c10_invariance() {
  std::mt19937_64 rng(1010);
  Model model;
  const auto& cfg = model.config();
  bool semantic = true, perm = true, fused = true;
  double worst_row = 0.0;
  for (int t = 0; t < 10; ++t) {
    auto ix = toy_instances(rng, 10 + rng() % 20, cfg.shape_points, cfg.num_categories);
    const auto iy = toy_instances(rng, 5 + rng() % 20, cfg.shape_points, cfg.num_categories);
    const auto sx = make_scene_tensors(ix, build_graph(ix, 10), cfg);
    const auto sy = make_scene_tensors(iy, build_graph(iy, 10), cfg);
    const auto f0 = gcn_forward(model.gcn_semantic(), sx.one_hot, sx.graph);
    auto moved = ix;
    const auto motion = random_transform(rng, 180.0, 40.0);
    for (auto& i : moved) {
      i.centroid = motion.apply(i.centroid);
      for (auto& p : i.shape_points) p = motion.apply(p);
    }
    const auto sm = make_scene_tensors(moved, build_graph(moved, 10), cfg);
    const auto f1 = gcn_forward(model.gcn_semantic(), sm.one_hot, sm.graph);
    semantic = semantic && std::equal(f0.data().begin(), f0.data().end(), f1.data().begin());

    const auto h0 = shape_encode(model.shape_encoder(), sx.shape);
    std::vector<double> shuffled(sx.shape.numel());
    const std::size_t k = cfg.shape_points;
    for (std::size_t i = 0; i < ix.size(); ++i) {
      std::vector<std::size_t> order(k);
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t q = 0; q < k; ++q)
        for (int c = 0; c < 3; ++c) shuffled[(i * k + q) * 3 + c] = sx.shape[(i * k + order[q]) * 3 + c];
    }
    const auto h1 = shape_encode(model.shape_encoder(), Tensor(sx.shape.shape(), shuffled));
    perm = perm && std::equal(h0.data().begin(), h0.data().end(), h1.data().begin());

    const auto f = extract_features(model, sx, sy);
    fused = fused && f.x.fused.shape() == Shape{ix.size(), 384} && f.y.fused.shape() == Shape{iy.size(), 384};
    for (const auto* set : {&f.x, &f.y})
      for (std::size_t kind = 0; kind < 3; ++kind)
        for (const auto* w : {&set->self_weights[kind], &set->cross_weights[kind]})
          for (std::size_t i = 0; i < w->dim(0); ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < w->dim(1); ++j) s += w->at(i, j);
            worst_row = std::max(worst_row, std::abs(s - 1.0));
          }
  }
  return {semantic && perm && fused && worst_row <= 1e-12,
          fmt("semantic GCN bit-identical: %s, shape encoding permutation-exact: %s, attention row error %.3g, "
              "fused dim 384: %s",
              semantic ? "yes" : "no", perm ? "yes" : "no", worst_row, fused ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"exact-recovery registration", c1_kabsch}, {"ICP property", c2_icp},
      {"Sinkhorn invariants", c3_sinkhorn},       {"matching oracle", c4_matching},
      {"gradient suite", c5_gradients},           {"clustering/knn/fps oracles", c6_oracles},
      {"metric oracles", c7_metrics},             {"end-to-end synthetic", c8_end_to_end},
      {"format round-trips", c9_formats},         {"invariance suite", c10_invariance},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(n)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::printf("%s criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", n, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failed;
}
