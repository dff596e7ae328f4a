#pragma once

// Optimal matching layer: bilinear affinity, dustbin augmentation, Sinkhorn
// normalisation and thresholded one-to-one assignment. Also an exact
// Hungarian solver used as an oracle for the soft assignment.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <ostream>
#include <vector>

#include <Eigen/Dense>

#include "sgm/errors.hpp"
#include "sgm/tensor.hpp"

namespace sgm {

// A_ij = F_X[i] . W . F_Y[j]
inline Tensor affinity(const Tensor& fx, const Tensor& fy, const Tensor& w) {
  if (fx.rank() != 2 || fy.rank() != 2 || w.rank() != 2 || fx.dim(1) != w.dim(0) || fy.dim(1) != w.dim(1)) {
    throw ShapeError("affinity: incompatible shapes " + shape_str(fx.shape()) + ", " + shape_str(w.shape()) + ", " +
                     shape_str(fy.shape()));
  }
  return matmul(matmul(fx, w), transpose(fy));
}

// [M, N] -> [M+1, N+1] with the extra row, column and corner all equal to z.
inline Tensor augment_dustbins(const Tensor& a, const Tensor& z) {
  if (a.rank() != 2) throw ShapeError("augment_dustbins: expected a matrix, got " + shape_str(a.shape()));
  if (z.numel() != 1) throw ShapeError("augment_dustbins: dustbin score must be a scalar");
  const std::size_t m = a.dim(0), n = a.dim(1);
  const double zv = z.data()[0];
  std::vector<double> v((m + 1) * (n + 1), zv);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) v[i * (n + 1) + j] = a.data()[i * n + j];
  return Tensor::make_result({m + 1, n + 1}, std::move(v), {a, z}, [m, n](detail::Node& self) {
    detail::Node& an = *self.parents[0];
    detail::Node& zn = *self.parents[1];
    double zg = 0.0;
    for (std::size_t i = 0; i <= m; ++i)
      for (std::size_t j = 0; j <= n; ++j) {
        const double g = self.grad[i * (n + 1) + j];
        if (i < m && j < n) {
          if (an.requires_grad) an.ensure_grad()[i * n + j] += g;
        } else {
          zg += g;
        }
      }
    if (zn.requires_grad) zn.ensure_grad()[0] += zg;
  });
}

struct SinkhornOptions {
  std::size_t max_iters = 100;
  double tol = 1e-6;
};

struct SoftAssignment {
  Tensor augmented;      // [M+1, N+1]
  Tensor log_augmented;  // elementwise log of `augmented`, kept finite where `augmented` underflows
  std::size_t iterations = 0;
  double residual = 0.0;  // max |row sum - 1| and |col sum - 1| after the last iteration
  bool converged = false;

  std::size_t rows() const { return augmented.dim(0) - 1; }
  std::size_t cols() const { return augmented.dim(1) - 1; }

  // The M x N block without dustbins.
  Eigen::MatrixXd trimmed() const {
    const std::size_t m = rows(), n = cols();
    Eigen::MatrixXd p(m, n);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) p(i, j) = augmented.data()[i * (n + 1) + j];
    return p;
  }
};

inline double marginal_residual(const Tensor& s) {
  const std::size_t r = s.dim(0), c = s.dim(1);
  std::vector<double> rs(r, 0.0), cs(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      rs[i] += s.data()[i * c + j];
      cs[j] += s.data()[i * c + j];
    }
  double worst = 0.0;
  for (double v : rs) worst = std::max(worst, std::abs(v - 1.0));
  for (double v : cs) worst = std::max(worst, std::abs(v - 1.0));
  return worst;
}

// S = exp(A - max A), then alternate row and column sum normalisation.
// Every row and column (dustbins included) targets unit mass, which is only
// reachable for square inputs; otherwise the loop stops at max_iters after a
// column step. Gradients flow through every iteration performed.
//
// The iterations run on log S: dividing a row by its sum is subtracting its
// log-sum-exp. Same values, but tiny entries keep a finite logarithm for the
// loss instead of rounding to zero.
inline SoftAssignment sinkhorn(const Tensor& augmented, const SinkhornOptions& opt = {}) {
  if (augmented.rank() != 2 || augmented.dim(0) < 1 || augmented.dim(1) < 1) {
    throw ShapeError("sinkhorn: expected a non-empty matrix, got " + shape_str(augmented.shape()));
  }
  if (opt.max_iters < 1 || !(opt.tol > 0.0)) throw ValidationError("sinkhorn: need max_iters >= 1 and tol > 0");
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : augmented.data()) {
    if (!std::isfinite(v)) throw ValidationError("sinkhorn: non-finite affinity");
    mx = std::max(mx, v);
  }
  SoftAssignment out;
  Tensor log_s = add_constant(augmented, -mx);
  std::vector<double> plain(augmented.numel());
  for (std::size_t it = 1; it <= opt.max_iters; ++it) {
    log_s = log_softmax(log_s, 1);
    log_s = log_softmax(log_s, 0);
    out.iterations = it;
    for (std::size_t e = 0; e < plain.size(); ++e) plain[e] = std::exp(log_s.data()[e]);
    out.residual = marginal_residual(Tensor(augmented.shape(), plain));
    if (out.residual <= opt.tol) {
      out.converged = true;
      break;
    }
  }
  out.log_augmented = log_s;
  out.augmented = exp(log_s);
  return out;
}

// ---------------------------------------------------------------------------

struct Correspondence {
  std::size_t i = 0, j = 0;
  double score = 0.0;
};

struct CorrespondenceSet {
  std::vector<Correspondence> pairs;
  std::vector<std::size_t> unmatched_x, unmatched_y;

  std::size_t size() const { return pairs.size(); }
};

// Accept (i, j) iff P_ij > T and j, i are the mutual row/column argmax
// (ties to the smaller index). The result is one-to-one.
inline CorrespondenceSet hard_assign(const Eigen::MatrixXd& p, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ValidationError("hard_assign: threshold must lie in (0, 1)");
  const auto m = static_cast<std::size_t>(p.rows()), n = static_cast<std::size_t>(p.cols());
  std::vector<std::size_t> row_arg(m, 0), col_arg(n, 0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 1; j < n; ++j)
      if (p(i, j) > p(i, row_arg[i])) row_arg[i] = j;
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 1; i < m; ++i)
      if (p(i, j) > p(col_arg[j], j)) col_arg[j] = i;

  CorrespondenceSet out;
  std::vector<bool> used_y(n, false);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = n ? row_arg[i] : 0;
    if (n && p(i, j) > threshold && col_arg[j] == i) {
      if (used_y[j]) throw ValidationError("hard_assign: one-to-one invariant violated");
      used_y[j] = true;
      out.pairs.push_back({i, j, p(i, j)});
    } else {
      out.unmatched_x.push_back(i);
    }
  }
  for (std::size_t j = 0; j < n; ++j)
    if (!used_y[j]) out.unmatched_y.push_back(j);
  return out;
}

// "i j score" lines, then the unmatched lists.
inline void write_correspondences(std::ostream& os, const CorrespondenceSet& c) {
  os.precision(17);
  for (const auto& p : c.pairs) os << p.i << ' ' << p.j << ' ' << p.score << '\n';
  os << "unmatched_x";
  for (auto i : c.unmatched_x) os << ' ' << i;
  os << "\nunmatched_y";
  for (auto j : c.unmatched_y) os << ' ' << j;
  os << '\n';
}

// Maximum-total-score one-to-one assignment (min(M, N) pairs) via the
// shortest-augmenting-path Hungarian method, O(n^2 m). Returns, per row, the
// assigned column or -1.
inline std::vector<long> hungarian_oracle(const Eigen::MatrixXd& score) {
  const bool flip = score.rows() > score.cols();
  const Eigen::MatrixXd s = flip ? Eigen::MatrixXd(score.transpose()) : score;
  const auto n = static_cast<std::size_t>(s.rows()), m = static_cast<std::size_t>(s.cols());
  if (!s.allFinite()) throw ValidationError("hungarian_oracle: non-finite score");
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based potentials; cost = -score.
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> match(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<bool> used(m + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = match[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = -s(static_cast<long>(i0 - 1), static_cast<long>(j - 1)) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<long> row_to_col(static_cast<std::size_t>(score.rows()), -1);
  for (std::size_t j = 1; j <= m; ++j) {
    if (match[j] == 0) continue;
    if (flip) {
      row_to_col[j - 1] = static_cast<long>(match[j] - 1);
    } else {
      row_to_col[match[j] - 1] = static_cast<long>(j - 1);
    }
  }
  return row_to_col;
}

}  // namespace sgm
