#include "specmerge/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <lapacke.h>

#include "specmerge/error.hpp"

namespace specmerge::spectral {

namespace {

std::string label(std::string_view name) {
  return name.empty() ? std::string("matrix") : "'" + std::string(name) + "'";
}

void require_finite(const matrix &a, std::string_view name) {
  if (!a.allFinite()) throw validation_error(label(name) + " has non-finite entries");
}

// Golub-Kahan bidiagonalization + implicit QR (LAPACK dgesvd). Eigen 3.4.0's
// BDCSVD is not used: it returns wrong factors for some rank-deficient inputs.
// `u` and `vt` stay empty when vectors are not requested.
struct lapack_result {
  vector sigma;
  matrix u;
  matrix vt;
};

lapack_result lapack_svd(const matrix &a, bool vectors, std::string_view name) {
  const auto m = static_cast<lapack_int>(a.rows());
  const auto n = static_cast<lapack_int>(a.cols());
  const lapack_int k = std::min(m, n);
  matrix work = a;  // dgesvd destroys its input
  lapack_result out;
  out.sigma.resize(k);
  if (vectors) {
    out.u.resize(m, k);
    out.vt.resize(k, n);
  }
  std::vector<double> superb(static_cast<std::size_t>(std::max<lapack_int>(k - 1, 1)));
  const char job = vectors ? 'S' : 'N';
  const lapack_int info =
      LAPACKE_dgesvd(LAPACK_COL_MAJOR, job, job, m, n, work.data(), m, out.sigma.data(),
                     vectors ? out.u.data() : nullptr, m, vectors ? out.vt.data() : nullptr, k, superb.data());
  if (info > 0) throw numerical_error("SVD of " + label(name) + " failed to converge");
  if (info < 0) throw numerical_error("SVD of " + label(name) + " rejected argument " + std::to_string(-info));
  return out;
}

}  // namespace

decomposition svd(const matrix &a, std::string_view name) {
  if (a.rows() == 0 || a.cols() == 0) throw argument_error("svd of an empty " + label(name));
  require_finite(a, name);

  auto r = lapack_svd(a, true, name);
  decomposition d;
  d.rows = a.rows();
  d.cols = a.cols();
  d.u = std::move(r.u);
  d.sigma = std::move(r.sigma);
  d.v = r.vt.transpose();
  if (!d.u.allFinite() || !d.v.allFinite() || !d.sigma.allFinite()) {
    throw numerical_error("SVD of " + label(name) + " produced non-finite factors");
  }

  for (Eigen::Index i = 0; i < d.size(); ++i) {
    Eigen::Index pivot = 0;
    double best = -1.0;
    for (Eigen::Index r = 0; r < d.u.rows(); ++r) {
      if (std::abs(d.u(r, i)) > best) {
        best = std::abs(d.u(r, i));
        pivot = r;
      }
    }
    if (d.u(pivot, i) < 0.0) {
      d.u.col(i) = -d.u.col(i);
      d.v.col(i) = -d.v.col(i);
    }
  }
  return d;
}

int numerical_rank(const vector &sigma) {
  if (sigma.size() == 0) return 0;
  const double cutoff = zero_sigma_ratio * sigma.maxCoeff();
  int r = 0;
  for (Eigen::Index i = 0; i < sigma.size(); ++i) {
    if (sigma[i] > cutoff) ++r;
  }
  return r;
}

int rank_keep(const vector &sigma, double eta) {
  if (!(eta > 0.0 && eta <= 100.0)) {
    throw argument_error("eta must lie in (0, 100], got " + std::to_string(eta));
  }
  if (sigma.size() == 0) throw argument_error("rank_keep on an empty spectrum");
  for (Eigen::Index i = 0; i < sigma.size(); ++i) {
    if (!(sigma[i] >= 0.0) || !std::isfinite(sigma[i])) {
      throw argument_error("singular values must be finite and non-negative");
    }
    if (i > 0 && sigma[i] > sigma[i - 1]) {
      throw argument_error("singular values must be sorted non-increasing");
    }
  }
  const int nonzero = numerical_rank(sigma);
  if (nonzero == 0) throw degenerate_input_error("rank_keep on an all-zero spectrum");
  if (eta == 100.0) return nonzero;

  double total = 0.0;
  for (int i = 0; i < nonzero; ++i) total += sigma[i];
  // cum / total >= eta / 100, cross-multiplied so that exact cases like
  // 4/10 vs 40% compare without division rounding.
  double cum = 0.0;
  for (int i = 0; i < nonzero; ++i) {
    cum += sigma[i];
    if (cum * 100.0 >= eta * total) return i + 1;
  }
  return nonzero;
}

vector rescale_singular_values(const vector &sigma, int r) {
  if (r < 1 || r > sigma.size()) {
    throw argument_error("kept rank " + std::to_string(r) + " outside [1, " +
                         std::to_string(sigma.size()) + "]");
  }
  double head = 0.0;
  double total = 0.0;
  for (Eigen::Index i = 0; i < sigma.size(); ++i) {
    total += sigma[i];
    if (i < r) head = total;
  }
  if (!(head > 0.0)) throw degenerate_input_error("kept singular values sum to zero");
  return sigma.head(r) * (total / head);
}

matrix truncate_reconstruct(const decomposition &d, int r, const vector &rescaled_sigma) {
  if (r < 1 || r > d.size()) {
    throw argument_error("truncation rank " + std::to_string(r) + " outside [1, " +
                         std::to_string(d.size()) + "]");
  }
  if (rescaled_sigma.size() != r) {
    throw argument_error("expected " + std::to_string(r) + " singular values, got " +
                         std::to_string(rescaled_sigma.size()));
  }
  return d.u.leftCols(r) * rescaled_sigma.asDiagonal() * d.v.leftCols(r).transpose();
}

double nuclear_norm(const matrix &a) {
  if (a.size() == 0) return 0.0;
  require_finite(a, {});
  return lapack_svd(a, false, {}).sigma.sum();
}

conflict_bound_report conflict_bound(const matrix &a, const matrix &b, const vector &coeffs,
                                     int trunc_rank) {
  if (a.cols() != b.cols()) {
    throw shape_error("conflict_bound needs equal column counts, got " + std::to_string(a.cols()) +
                         " and " + std::to_string(b.cols()));
  }
  const auto da = svd(a, "A");
  const auto db = svd(b, "B");

  conflict_bound_report rep;
  rep.rank_a = numerical_rank(da.sigma);
  rep.rank_b = numerical_rank(db.sigma);
  if (coeffs.size() != rep.rank_a) {
    throw argument_error("expected " + std::to_string(rep.rank_a) +
                         " coefficients (numerical rank of A), got " + std::to_string(coeffs.size()));
  }
  if (trunc_rank < 0 || trunc_rank > rep.rank_b) {
    throw argument_error("truncation rank " + std::to_string(trunc_rank) + " outside [0, " +
                         std::to_string(rep.rank_b) + "]");
  }
  rep.trunc_rank = trunc_rank;

  const vector x = da.v.leftCols(rep.rank_a) * coeffs;
  rep.lhs = (b * x).norm();

  for (int i = 0; i < rep.rank_b; ++i) {
    for (int j = 0; j < rep.rank_a; ++j) {
      rep.beta = std::max(rep.beta, std::abs(db.sigma[i] * coeffs[j]));
    }
  }
  const double root_ra = std::sqrt(static_cast<double>(rep.rank_a));
  rep.bound = rep.rank_b * rep.beta * root_ra;
  rep.bound_after_truncation = trunc_rank * rep.beta * root_ra;

  const vector proj = db.v.leftCols(trunc_rank).transpose() * x;
  rep.lhs_after_truncation =
      (db.u.leftCols(trunc_rank) * db.sigma.head(trunc_rank).cwiseProduct(proj)).norm();
  return rep;
}

}  // namespace specmerge::spectral
