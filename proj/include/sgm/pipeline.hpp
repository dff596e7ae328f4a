#pragma once

// Coarse-to-fine registration of one scene pair and dataset-level evaluation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "sgm/geometry.hpp"
#include "sgm/graph.hpp"
#include "sgm/instances.hpp"
#include "sgm/matching.hpp"
#include "sgm/metrics.hpp"
#include "sgm/nets.hpp"
#include "sgm/training.hpp"

namespace sgm {

struct RegistrationConfig {
  std::size_t min_instances = 5;
  std::size_t min_correspondences = 3;
  std::size_t graph_k = 10;
  double threshold = 0.7;
  double coarse_trim = 1.0;  // m; 0 = plain least-squares fit over all matches
  SinkhornOptions sinkhorn;
  IcpOptions icp;
};

struct RegistrationDiagnostics {
  std::size_t instances_x = 0, instances_y = 0;
  std::size_t correspondences = 0;
  std::size_t coarse_inliers = 0;
  std::size_t sinkhorn_iterations = 0;
  bool icp_converged = false;
  std::size_t icp_iterations = 0;
  double coarse_rms = 0.0, fine_rms = 0.0;
  bool skipped = false;
  std::string reason;
};

struct RegistrationResult {
  std::optional<RigidTransform> coarse, fine;
  CorrespondenceSet correspondences;
  std::vector<Point3> centroids_x, centroids_y;
  RegistrationDiagnostics diagnostics;

  // Best available estimate: fine, else coarse, else identity.
  RigidTransform estimate() const { return fine ? *fine : coarse ? *coarse : RigidTransform::identity(); }
};

// Registration from prepared instances. The raw clouds are only used by ICP.
inline RegistrationResult register_instances(const Model& model, std::span<const SemanticInstance> ix,
                                             std::span<const SemanticInstance> iy, const PointCloud& raw_x,
                                             const PointCloud& raw_y, const RegistrationConfig& cfg) {
  RegistrationResult r;
  auto& d = r.diagnostics;
  d.instances_x = ix.size();
  d.instances_y = iy.size();
  for (const auto& i : ix) r.centroids_x.push_back(i.centroid);
  for (const auto& i : iy) r.centroids_y.push_back(i.centroid);
  if (ix.size() < cfg.min_instances || iy.size() < cfg.min_instances) {
    d.skipped = true;
    d.reason = "insufficient instances";
    return r;
  }
  try {
    NoGradGuard no_grad;
    const auto gx = build_graph(ix, cfg.graph_k);
    const auto gy = build_graph(iy, cfg.graph_k);
    const auto sx = make_scene_tensors(ix, gx, model.config());
    const auto sy = make_scene_tensors(iy, gy, model.config());
    const auto f = forward_match(model, sx, sy, cfg.sinkhorn);
    d.sinkhorn_iterations = f.assignment.iterations;
    r.correspondences = hard_assign(f.assignment.trimmed(), cfg.threshold);
    d.correspondences = r.correspondences.size();
    if (d.correspondences < cfg.min_correspondences) {
      d.skipped = true;
      d.reason = "insufficient correspondences";
      return r;
    }
    std::vector<Point3> src, dst;
    for (const auto& c : r.correspondences.pairs) {
      src.push_back(r.centroids_x[c.i]);
      dst.push_back(r.centroids_y[c.j]);
    }
    std::vector<std::size_t> kept;
    r.coarse = trimmed_kabsch(src, dst, cfg.coarse_trim, &kept);
    d.coarse_inliers = kept.size();
    const auto icp = icp_refine(raw_x, raw_y, *r.coarse, cfg.icp);
    r.fine = icp.transform;
    d.icp_converged = icp.converged;
    d.icp_iterations = icp.iterations;
    d.coarse_rms = icp.rms_history.front();
    d.fine_rms = icp.rms_history.back();
  } catch (const std::exception& e) {
    d.skipped = true;
    d.reason = e.what();
  }
  return r;
}

inline RegistrationResult register_pair(const Model& model, const SemanticPointCloud& x, const SemanticPointCloud& y,
                                        const CategoryConfig& categories, const RegistrationConfig& cfg = {}) {
  const auto ix = extract_instances(x, categories, model.config().shape_points);
  const auto iy = extract_instances(y, categories, model.config().shape_points);
  return register_instances(model, ix, iy, x.cloud, y.cloud, cfg);
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalInput {
  SemanticPointCloud x, y;
  RigidTransform gt;
  std::string name;
};

struct PairReport {
  std::string name;
  bool skipped = false;
  std::string reason;
  double rre = 0.0, rte = 0.0;       // fine (or best available) estimate
  double coarse_rre = 0.0, coarse_rte = 0.0;
  bool success = false;
  Fraction ip, ir;
  std::size_t correspondences = 0;
};

struct Stats {
  double mean = 0.0, stddev = 0.0, median = 0.0;
  std::size_t count = 0;
};

inline Stats summarize(std::vector<double> v) {
  Stats s;
  s.count = v.size();
  if (v.empty()) return s;
  std::sort(v.begin(), v.end());
  double acc = 0.0;
  for (double x : v) acc += x;
  s.mean = acc / static_cast<double>(v.size());
  double sq = 0.0;
  for (double x : v) sq += (x - s.mean) * (x - s.mean);
  s.stddev = std::sqrt(sq / static_cast<double>(v.size()));
  const std::size_t h = v.size() / 2;
  s.median = v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
  return s;
}

struct EvalReport {
  std::vector<PairReport> pairs;
  Stats rre, rte;
  Fraction rr;
  double ip = 0.0, ir = 0.0;  // means over non-skipped pairs (IR: where defined)
  bool ip_defined = false, ir_defined = false;
  std::size_t skipped = 0;
};

struct EvalConfig {
  RegistrationConfig registration;
  double beta = 1.0;
  double rre_threshold = kDefaultRreThreshold;
  double rte_threshold = kDefaultRteThreshold;
  std::size_t threads = 1;
};

inline PairReport evaluate_one(const Model& model, const EvalInput& in, const CategoryConfig& categories,
                               const EvalConfig& cfg) {
  PairReport p;
  p.name = in.name;
  try {
    const auto ix = extract_instances(in.x, categories, model.config().shape_points);
    const auto iy = extract_instances(in.y, categories, model.config().shape_points);
    const auto r = register_instances(model, ix, iy, in.x.cloud, in.y.cloud, cfg.registration);
    p.skipped = r.diagnostics.skipped;
    p.reason = r.diagnostics.reason;
    p.correspondences = r.diagnostics.correspondences;
    if (p.skipped) return p;
    std::vector<IndexPair> phi;
    for (const auto& c : r.correspondences.pairs) phi.emplace_back(c.i, c.j);
    const auto theta = label_gt_correspondences(ix, iy, in.gt, cfg.beta);
    p.ip = inlier_precision(r.centroids_x, r.centroids_y, phi, in.gt, cfg.beta);
    p.ir = inlier_recall(r.centroids_x, r.centroids_y, theta.pairs, phi, in.gt, cfg.beta);
    const RigidTransform est = r.estimate();
    p.rre = rre(est.rotation, in.gt.rotation);
    p.rte = rte(est.translation, in.gt.translation);
    p.coarse_rre = rre(r.coarse->rotation, in.gt.rotation);
    p.coarse_rte = rte(r.coarse->translation, in.gt.translation);
    p.success = p.rre < cfg.rre_threshold && p.rte < cfg.rte_threshold;
  } catch (const std::exception& e) {
    p.skipped = true;
    p.reason = e.what();
  }
  return p;
}

// Aggregates are symmetric functions of the per-pair reports, so the result
// does not depend on the thread count.
inline EvalReport aggregate(std::vector<PairReport> pairs, const EvalConfig& cfg) {
  EvalReport rep;
  rep.pairs = std::move(pairs);
  std::vector<double> rres, rtes;
  std::vector<PairError> errors;
  double ip = 0.0, ir = 0.0;
  std::size_t nip = 0, nir = 0;
  for (const auto& p : rep.pairs) {
    if (p.skipped) {
      ++rep.skipped;
      errors.push_back({0.0, 0.0, true});
      continue;
    }
    rres.push_back(p.rre);
    rtes.push_back(p.rte);
    errors.push_back({p.rre, p.rte, false});
    ip += p.ip.value;  // empty prediction counts as 0
    ++nip;
    if (p.ir.defined) {
      ir += p.ir.value;
      ++nir;
    }
  }
  rep.rre = summarize(rres);
  rep.rte = summarize(rtes);
  rep.rr = registration_recall(errors, cfg.rre_threshold, cfg.rte_threshold);
  rep.ip_defined = nip > 0;
  rep.ir_defined = nir > 0;
  rep.ip = nip ? ip / static_cast<double>(nip) : 0.0;
  rep.ir = nir ? ir / static_cast<double>(nir) : 0.0;
  return rep;
}

inline EvalReport evaluate(const Model& model, std::span<const EvalInput> data, const CategoryConfig& categories,
                           const EvalConfig& cfg = {}) {
  std::vector<PairReport> out(data.size());
  const std::size_t threads = std::max<std::size_t>(1, std::min(cfg.threads, data.size()));
  if (threads == 1) {
    for (std::size_t i = 0; i < data.size(); ++i) out[i] = evaluate_one(model, data[i], categories, cfg);
  } else {
    // Inference only: the model is read-shared, each worker records no graph.
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        for (std::size_t i = t; i < data.size(); i += threads) out[i] = evaluate_one(model, data[i], categories, cfg);
      });
    }
    for (auto& th : pool) th.join();
  }
  return aggregate(std::move(out), cfg);
}

// One line per pair: name skipped rre rte success ip ir |phi| reason
inline void write_pair_reports(std::ostream& os, const EvalReport& rep) {
  os.precision(10);
  for (const auto& p : rep.pairs) {
    os << p.name << ' ' << (p.skipped ? 1 : 0) << ' ' << p.rre << ' ' << p.rte << ' ' << (p.success ? 1 : 0) << ' '
       << p.ip.value << ' ' << (p.ir.defined ? std::to_string(p.ir.value) : std::string("nan")) << ' '
       << p.correspondences;
    if (p.skipped) os << " # " << p.reason;
    os << '\n';
  }
}

inline void write_summary(std::ostream& os, const EvalReport& rep) {
  os.precision(6);
  os << "pairs        " << rep.pairs.size() << '\n'
     << "skipped      " << rep.skipped << '\n'
     << "RR           " << (rep.rr.defined ? std::to_string(rep.rr.value) : std::string("undefined")) << '\n'
     << "RRE mean/std " << rep.rre.mean << " / " << rep.rre.stddev << " deg\n"
     << "RTE mean/std " << rep.rte.mean << " / " << rep.rte.stddev << " m\n"
     << "RTE median   " << rep.rte.median << " m\n"
     << "IP           " << (rep.ip_defined ? std::to_string(rep.ip) : std::string("undefined")) << '\n'
     << "IR           " << (rep.ir_defined ? std::to_string(rep.ir) : std::string("undefined")) << '\n';
}

}  // namespace sgm
