#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "oracles.hpp"
#include "specmerge/error.hpp"
#include "specmerge/spectral.hpp"

using namespace specmerge;
namespace sp = specmerge::spectral;

namespace {

vector vec(std::initializer_list<double> xs) {
  vector v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v[i++] = x;
  return v;
}

matrix diag(std::initializer_list<double> xs) { return vec(xs).asDiagonal(); }

}  // namespace

TEST_CASE("svd of identity and diagonal matrices") {
  const auto id = sp::svd(matrix::Identity(3, 3));
  CHECK((id.sigma - vec({1, 1, 1})).cwiseAbs().maxCoeff() < 1e-15);

  const auto d = sp::svd(diag({4, 3, 2, 1}));
  CHECK((d.sigma - vec({4, 3, 2, 1})).cwiseAbs().maxCoeff() < 1e-14);
  // columns of u and v are signed unit vectors with the fixed positive sign
  CHECK((d.u.cwiseAbs() - matrix::Identity(4, 4)).cwiseAbs().maxCoeff() < 1e-14);
  CHECK((d.v.cwiseAbs() - matrix::Identity(4, 4)).cwiseAbs().maxCoeff() < 1e-14);
  CHECK((d.u - matrix::Identity(4, 4)).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("svd invariants on random 64x48 matrices against the Gram oracle") {
  oracle::rng rng(21);
  for (int trial = 0; trial < 10; ++trial) {
    const matrix a = rng.gaussian(64, 48);
    const auto d = sp::svd(a);
    REQUIRE(d.size() == 48);
    const matrix recon = d.u * d.sigma.asDiagonal() * d.v.transpose();
    CHECK((recon - a).norm() / a.norm() < 1e-12);
    CHECK((d.u.transpose() * d.u - matrix::Identity(48, 48)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((d.v.transpose() * d.v - matrix::Identity(48, 48)).cwiseAbs().maxCoeff() < 1e-12);
    for (Eigen::Index i = 1; i < d.sigma.size(); ++i) CHECK(d.sigma[i] <= d.sigma[i - 1]);
    const vector ref = oracle::gram_singular_values(a);
    for (Eigen::Index i = 0; i < ref.size(); ++i) CHECK(oracle::rel_diff(d.sigma[i], ref[i]) < 1e-8);
  }
}

TEST_CASE("svd handles wide, thin and rank-deficient inputs") {
  oracle::rng rng(22);
  const matrix wide = rng.gaussian(5, 17);
  const auto dw = sp::svd(wide);
  CHECK(dw.size() == 5);
  CHECK((dw.u * dw.sigma.asDiagonal() * dw.v.transpose() - wide).norm() < 1e-12 * wide.norm());

  const matrix low = rng.low_rank(30, 20, 3);
  CHECK(sp::numerical_rank(sp::svd(low).sigma) == 3);
  CHECK(sp::numerical_rank(sp::svd(matrix::Zero(4, 4)).sigma) == 0);
}

TEST_CASE("svd factors rank-deficient rescaled truncations correctly") {
  // wide low-rank matrices with clustered spectra; a divide-and-conquer
  // backend once returned a wrong factorization for exactly this shape
  oracle::rng rng(29);
  for (int trial = 0; trial < 30; ++trial) {
    const matrix a = rng.gaussian(35, 90);
    const auto d = sp::svd(a);
    const int r = rng.integer(1, 34);
    const matrix t = sp::truncate_reconstruct(d, r, sp::rescale_singular_values(d.sigma, r));
    const auto dt = sp::svd(t);
    CHECK((dt.u * dt.sigma.asDiagonal() * dt.v.transpose() - t).norm() < 1e-12 * t.norm());
    const vector ref = oracle::jacobi_singular_values(t);
    CHECK((dt.sigma - ref).cwiseAbs().maxCoeff() < 1e-12 * ref[0]);
    CHECK(oracle::rel_diff(sp::nuclear_norm(t), ref.sum()) < 1e-12);
  }
}

TEST_CASE("svd rejects non-finite input") {
  matrix a = matrix::Ones(3, 3);
  a(1, 1) = std::nan("");
  CHECK_THROWS_AS(sp::svd(a, "bad"), validation_error);
}

TEST_CASE("rank_keep hand cases") {
  const vector s = vec({4, 3, 2, 1});
  CHECK(sp::rank_keep(s, 40) == 1);
  CHECK(sp::rank_keep(s, 70) == 2);
  CHECK(sp::rank_keep(s, 100) == 4);
  CHECK(sp::rank_keep(s, 40.0001) == 2);
  CHECK(sp::rank_keep(s, 90) == 3);
  CHECK(sp::rank_keep(vec({5, 0, 0}), 100) == 1);
  CHECK(sp::rank_keep(vec({2, 2, 0}), 100) == 2);
}

TEST_CASE("rank_keep rejects invalid thresholds and spectra") {
  const vector s = vec({4, 3, 2, 1});
  CHECK_THROWS_AS(sp::rank_keep(s, 0), argument_error);
  CHECK_THROWS_AS(sp::rank_keep(s, -5), argument_error);
  CHECK_THROWS_AS(sp::rank_keep(s, 100.5), argument_error);
  CHECK_THROWS_AS(sp::rank_keep(vec({1, 2}), 50), argument_error);
  CHECK_THROWS_AS(sp::rank_keep(vec({0, 0}), 50), degenerate_input_error);
}

TEST_CASE("rank_keep agrees with the division-based oracle and is monotone in eta") {
  oracle::rng rng(23);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = rng.integer(1, 40);
    std::vector<double> s(static_cast<std::size_t>(n));
    for (auto &x : s) x = std::abs(rng.normal()) * std::exp(rng.normal());
    std::sort(s.begin(), s.end(), std::greater<>());
    const vector sv = Eigen::Map<const vector>(s.data(), n);
    int previous = 0;
    for (int eta = 1; eta <= 100; ++eta) {
      const int r = sp::rank_keep(sv, eta);
      CHECK(r >= previous);
      CHECK(r >= 1);
      CHECK(r <= n);
      // the oracle's 1e-15 slack can only move the answer down by one at an exact tie
      const int ref = oracle::rank_keep(s, eta);
      CHECK(std::abs(r - ref) <= 1);
      previous = r;
    }
  }
}

TEST_CASE("rescale_singular_values") {
  const vector s = vec({4, 3, 2, 1});
  const vector r2 = sp::rescale_singular_values(s, 2);
  REQUIRE(r2.size() == 2);
  CHECK(r2[0] == doctest::Approx(40.0 / 7.0).epsilon(1e-15));
  CHECK(r2[1] == doctest::Approx(30.0 / 7.0).epsilon(1e-15));
  CHECK(sp::rescale_singular_values(s, 4) == s);
  CHECK(sp::rescale_singular_values(vec({5, 0, 0}), 1) == vec({5}));
  CHECK_THROWS_AS(sp::rescale_singular_values(s, 0), argument_error);
  CHECK_THROWS_AS(sp::rescale_singular_values(s, 5), argument_error);
}

TEST_CASE("truncate_reconstruct") {
  SUBCASE("full rank with original sigma reproduces the input") {
    oracle::rng rng(24);
    const matrix a = rng.gaussian(12, 9);
    const auto d = sp::svd(a);
    CHECK((sp::truncate_reconstruct(d, d.size(), d.sigma) - a).norm() < 1e-12 * a.norm());
  }
  SUBCASE("rank one of diag(4,3) with rescale") {
    const auto d = sp::svd(diag({4, 3}));
    const matrix out = sp::truncate_reconstruct(d, 1, sp::rescale_singular_values(d.sigma, 1));
    const matrix expected = (matrix(2, 2) << 7, 0, 0, 0).finished();
    CHECK((out - expected).cwiseAbs().maxCoeff() < 1e-14);
  }
  SUBCASE("unrescaled truncation is the best rank-r approximation") {
    oracle::rng rng(25);
    const matrix a = rng.gaussian(20, 15);
    const auto d = sp::svd(a);
    for (int r = 1; r <= 15; ++r) {
      const matrix ar = sp::truncate_reconstruct(d, r, d.sigma.head(r));
      const double tail = d.sigma.tail(15 - r).squaredNorm();
      CHECK(std::abs((a - ar).squaredNorm() - tail) < 1e-10 * a.squaredNorm());
    }
  }
}

TEST_CASE("nuclear_norm") {
  CHECK(sp::nuclear_norm(diag({4, 3, 2, 1})) == doctest::Approx(10.0).epsilon(1e-15));
  CHECK(sp::nuclear_norm(matrix::Zero(3, 5)) == 0.0);
  oracle::rng rng(26);
  for (int trial = 0; trial < 5; ++trial) {
    const matrix a = rng.gaussian(32, 32);
    CHECK(oracle::rel_diff(sp::nuclear_norm(a), oracle::nuclear_norm(a)) < 1e-8);
  }
}

TEST_CASE("truncate plus rescale restores the nuclear norm at every rank") {
  oracle::rng rng(27);
  for (int trial = 0; trial < 20; ++trial) {
    const matrix a = rng.gaussian(rng.integer(2, 30), rng.integer(2, 30));
    const auto d = sp::svd(a);
    const double before = oracle::nuclear_norm(a);
    for (int r = 1; r <= d.size(); ++r) {
      const matrix out = sp::truncate_reconstruct(d, r, sp::rescale_singular_values(d.sigma, r));
      CHECK(oracle::rel_diff(oracle::jacobi_nuclear_norm(out), before) < 1e-9);
    }
  }
}

TEST_CASE("conflict bound hand cases") {
  SUBCASE("zero B") {
    const auto rep = sp::conflict_bound(matrix::Identity(2, 2), matrix::Zero(2, 2), vec({1, 0}), 0);
    CHECK(rep.rank_b == 0);
    CHECK(rep.lhs == 0.0);
    CHECK(rep.bound == 0.0);
  }
  SUBCASE("A = B = I, coefficients [1, 0]") {
    const auto rep = sp::conflict_bound(matrix::Identity(2, 2), matrix::Identity(2, 2), vec({1, 0}), 1);
    CHECK(rep.rank_a == 2);
    CHECK(rep.rank_b == 2);
    CHECK(rep.lhs == doctest::Approx(1.0));
    CHECK(rep.beta == doctest::Approx(1.0));
    CHECK(rep.bound == doctest::Approx(2.0 * std::sqrt(2.0)));
    CHECK(rep.bound_after_truncation == doctest::Approx(std::sqrt(2.0)));
    CHECK(rep.lhs <= rep.bound);
  }
  SUBCASE("argument validation") {
    CHECK_THROWS_AS(sp::conflict_bound(matrix::Identity(2, 2), matrix::Identity(2, 2), vec({1}), 1), argument_error);
    CHECK_THROWS_AS(sp::conflict_bound(matrix::Identity(2, 2), matrix::Identity(2, 2), vec({1, 0}), 3),
                    argument_error);
    CHECK_THROWS_AS(sp::conflict_bound(matrix::Identity(2, 2), matrix::Identity(3, 3), vec({1, 0}), 1),
                    shape_error);
  }
}

TEST_CASE("conflict bound holds on random low-rank instances") {
  oracle::rng rng(28);
  for (int trial = 0; trial < 100; ++trial) {
    const int ra = rng.integer(1, 16);
    const int rb = rng.integer(1, 16);
    const matrix a = rng.low_rank(16, 16, ra);
    const matrix b = rng.low_rank(16, 16, rb);
    const vector coeffs = rng.gaussian(ra, 1);
    const int r = rng.integer(0, rb);
    const auto rep = sp::conflict_bound(a, b, coeffs, r);
    REQUIRE(rep.rank_a == ra);
    REQUIRE(rep.rank_b == rb);
    CHECK(rep.lhs <= rep.bound * (1 + 1e-12));
    CHECK(rep.lhs_after_truncation <= rep.bound_after_truncation * (1 + 1e-12) + 1e-300);

    // independent evaluation of beta from the oracle spectrum
    const vector sb = oracle::gram_singular_values(b);
    const double beta = sb[0] * coeffs.cwiseAbs().maxCoeff();
    CHECK(oracle::rel_diff(rep.beta, beta) < 1e-8);
    const double reduction = rep.bound - rep.bound_after_truncation;
    CHECK(oracle::rel_diff(reduction, (rb - r) * beta * std::sqrt(double(ra)), 1e-300) < 1e-8);
  }
}
