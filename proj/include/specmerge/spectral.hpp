#pragma once

#include <string_view>

#include "specmerge/tensorstore.hpp"

namespace specmerge::spectral {

/// Singular values at or below this fraction of the largest are treated as
/// zero (numerical rank, full-mass rank selection).
inline constexpr double zero_sigma_ratio = 1e-12;

/// Thin SVD: u is m x k, v is n x k, k = min(m, n). Singular values are
/// non-increasing. Each singular pair is sign-normalized so that the
/// largest-magnitude entry of u_i is positive (first row wins ties).
struct decomposition {
  matrix u;
  vector sigma;
  matrix v;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;

  Eigen::Index size() const noexcept { return sigma.size(); }
};

/// `name` only labels error messages.
decomposition svd(const matrix &a, std::string_view name = {});

/// Number of singular values above zero_sigma_ratio * sigma_max.
int numerical_rank(const vector &sigma);

/// Smallest r whose leading singular values hold at least eta percent of the
/// total mass. eta in (0, 100]; eta = 100 yields the numerical rank.
/// Throws degenerate_input_error for an all-zero spectrum.
int rank_keep(const vector &sigma, double eta);

/// Leading r singular values scaled by sum(sigma) / sum(sigma[0:r]) so the
/// kept values carry the full nuclear norm.
vector rescale_singular_values(const vector &sigma, int r);

/// sum_{k<r} u_k * sigma'_k * v_k^T
matrix truncate_reconstruct(const decomposition &d, int r, const vector &rescaled_sigma);

/// Sum of singular values.
double nuclear_norm(const matrix &a);

/// Quantities of the merging-conflict bound ||Bx|| <= r_B * beta * sqrt(r_A)
/// for x = sum_j alpha_j v_j(A).
struct conflict_bound_report {
  int rank_a = 0;
  int rank_b = 0;
  int trunc_rank = 0;
  double beta = 0.0;                    // max_{i,j} |sigma_i(B) alpha_j|
  double lhs = 0.0;                     // ||B x||
  double bound = 0.0;                   // r_B * beta * sqrt(r_A)
  double bound_after_truncation = 0.0;  // r * beta * sqrt(r_A)
  double lhs_after_truncation = 0.0;    // ||B_r x|| with B_r the rank-r truncation
};

conflict_bound_report conflict_bound(const matrix &a, const matrix &b, const vector &coeffs,
                                     int trunc_rank);

}  // namespace specmerge::spectral
