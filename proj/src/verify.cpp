#include <algorithm>
#include <cmath>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "specmerge/error.hpp"
#include "specmerge/harness.hpp"
#include "specmerge/random.hpp"
#include "specmerge/spectral.hpp"

namespace specmerge::harness {

namespace {

class sampler {
 public:
  explicit sampler(std::uint64_t seed) : key_(random::mix64(seed)) {}

  double normal() { return random::normal(key_, counter_++); }
  double uniform() { return random::uniform(key_, counter_++); }
  Eigen::Index index(Eigen::Index lo, Eigen::Index hi) {
    return lo + static_cast<Eigen::Index>(uniform() * static_cast<double>(hi - lo + 1));
  }
  matrix gaussian(Eigen::Index rows, Eigen::Index cols) {
    matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal();
    return m;
  }
  /// Random matrix of the given rank (product of Gaussian factors).
  matrix low_rank(Eigen::Index rows, Eigen::Index cols, Eigen::Index rank) {
    if (rank == 0) return matrix::Zero(rows, cols);
    return gaussian(rows, rank) * gaussian(rank, cols);
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

double rel_diff(double a, double b, double floor = 0.0) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor, 1e-300});
}

/// Singular values from the eigenvalues of the Gram matrix in long double.
vector gram_singular_values(const matrix &a) {
  using ld_matrix = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
  const ld_matrix al = a.cast<long double>();
  const ld_matrix gram = a.rows() >= a.cols() ? ld_matrix(al.transpose() * al) : ld_matrix(al * al.transpose());
  Eigen::SelfAdjointEigenSolver<ld_matrix> eig(gram, Eigen::EigenvaluesOnly);
  vector s(gram.rows());
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    const long double lambda = eig.eigenvalues()[s.size() - 1 - i];
    s[i] = static_cast<double>(std::sqrt(std::max(lambda, 0.0L)));
  }
  return s;
}

template <class Fn>
check_result run_check(std::string name, Fn fn) {
  check_result r;
  r.name = std::move(name);
  try {
    r.detail = fn();
    r.passed = r.detail.empty();
    if (r.passed) r.detail = "ok";
  } catch (const std::exception &e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  return r;
}

}  // namespace

std::vector<check_result> run_property_suite(const verify_options &options) {
  const int trials = std::max(1, options.trials);
  std::vector<check_result> out;

  out.push_back(run_check("svd invariants", [&]() -> std::string {
    sampler rng(options.seed);
    for (int t = 0; t < trials; ++t) {
      const auto m = rng.index(1, 64), n = rng.index(1, 64);
      const matrix a = rng.gaussian(m, n);
      const auto d = spectral::svd(a);
      const auto k = std::min(m, n);
      const double smax = d.sigma[0];
      if (d.size() != k) return "thin size mismatch";
      for (Eigen::Index i = 0; i < k; ++i) {
        if (d.sigma[i] < 0 || (i > 0 && d.sigma[i] > d.sigma[i - 1])) return "singular values not sorted";
      }
      if ((d.u.transpose() * d.u - matrix::Identity(k, k)).norm() > 1e-10) return "U not orthonormal";
      if ((d.v.transpose() * d.v - matrix::Identity(k, k)).norm() > 1e-10) return "V not orthonormal";
      const matrix rec = d.u * d.sigma.asDiagonal() * d.v.transpose();
      if ((rec - a).cwiseAbs().maxCoeff() > 1e-8 * smax * std::sqrt(double(m * n))) return "reconstruction error";
    }
    return {};
  }));

  out.push_back(run_check("svd vs gram eigenvalues", [&]() -> std::string {
    sampler rng(options.seed + 1);
    for (int t = 0; t < trials; ++t) {
      const matrix a = rng.gaussian(rng.index(1, 96), rng.index(1, 96));
      const auto d = spectral::svd(a);
      const vector ref = gram_singular_values(a);
      for (Eigen::Index i = 0; i < ref.size(); ++i) {
        if (rel_diff(d.sigma[i], ref[i], 1e-12 * ref[0]) > 1e-8) return "singular value mismatch";
      }
    }
    return {};
  }));

  out.push_back(run_check("nuclear norm restoration", [&]() -> std::string {
    sampler rng(options.seed + 2);
    for (int t = 0; t < trials; ++t) {
      const auto m = rng.index(2, 48), n = rng.index(2, 48);
      const matrix a = rng.low_rank(m, n, rng.index(1, std::min(m, n)));
      const double before = spectral::nuclear_norm(a);
      for (double eta = 10; eta <= 100; eta += 10) {
        const auto layer = star_process_matrix(a, eta);
        if (rel_diff(layer.nuclear_after, before) > 1e-9) {
          std::ostringstream os;
          os << "eta " << eta << ": " << layer.nuclear_after << " vs " << before;
          return os.str();
        }
      }
    }
    return {};
  }));

  out.push_back(run_check("rank_keep cases and monotonicity", [&]() -> std::string {
    const vector sigma = (vector(4) << 4, 3, 2, 1).finished();
    if (spectral::rank_keep(sigma, 40) != 1 || spectral::rank_keep(sigma, 70) != 2 ||
        spectral::rank_keep(sigma, 100) != 4) {
      return "hand cases failed";
    }
    sampler rng(options.seed + 3);
    for (int t = 0; t < trials; ++t) {
      vector s(rng.index(1, 32));
      for (auto &v : s) v = std::abs(rng.normal()) + 1e-3;
      std::sort(s.begin(), s.end(), std::greater<>());
      int prev = 0;
      for (int eta = 1; eta <= 100; ++eta) {
        const int r = spectral::rank_keep(s, eta);
        if (r < prev) return "rank decreased as eta grew";
        prev = r;
      }
    }
    return {};
  }));

  out.push_back(run_check("conflict bound", [&]() -> std::string {
    sampler rng(options.seed + 4);
    for (int t = 0; t < trials; ++t) {
      const matrix a = rng.low_rank(16, 16, rng.index(1, 16));
      const matrix b = rng.low_rank(16, 16, rng.index(0, 16));
      const int ra = spectral::numerical_rank(spectral::svd(a).sigma);
      const int rb = spectral::numerical_rank(spectral::svd(b).sigma);
      vector coeffs(ra);
      for (auto &c : coeffs) c = rng.normal();
      for (int r = 0; r <= rb; ++r) {
        const auto rep = spectral::conflict_bound(a, b, coeffs, r);
        if (rep.lhs > rep.bound * (1 + 1e-12) + 1e-12) return "||Bx|| exceeds the bound";
        if (rep.lhs_after_truncation > rep.bound_after_truncation * (1 + 1e-12) + 1e-12) {
          return "truncated ||B_r x|| exceeds its bound";
        }
        const double gap = (rep.rank_b - r) * rep.beta * std::sqrt(double(rep.rank_a));
        if (rel_diff(rep.bound - rep.bound_after_truncation, gap, 1e-12 * rep.bound) > 1e-9) {
          return "bound reduction mismatch";
        }
      }
    }
    return {};
  }));

  out.push_back(run_check("star at eta=100 equals averaging", [&]() -> std::string {
    sampler rng(options.seed + 5);
    for (int t = 0; t < std::max(1, trials / 5); ++t) {
      std::vector<task_vector> tvs(static_cast<std::size_t>(rng.index(1, 4)));
      const auto m = rng.index(2, 24), n = rng.index(2, 24);
      for (auto &tv : tvs) {
        tv.weights.entries.emplace("w", tensor::from_matrix(rng.gaussian(m, n)));
        tv.weights.entries.emplace("bias", tensor::from_matrix(rng.gaussian(1, n)));
        tv.weights.entries.at("bias").shape = {n};
      }
      const auto star = star_merge(tvs, 100.0);
      const auto avg = simple_average(tvs);
      for (const auto &[name, s] : star.delta.weights.entries) {
        const auto &ref = avg.delta.weights.entries.at(name).values;
        const double scale = *std::max_element(ref.begin(), ref.end(), [](double x, double y) {
          return std::abs(x) < std::abs(y);
        });
        for (std::size_t i = 0; i < ref.size(); ++i) {
          if (rel_diff(s.values[i], ref[i], std::abs(scale)) > 1e-9) return "mismatch in '" + name + "'";
        }
      }
    }
    return {};
  }));

  out.push_back(run_check("dare reproducibility and drop rate", [&]() -> std::string {
    task_vector tv;
    tv.weights.entries.emplace("w", tensor::from_matrix(matrix::Constant(200, 500, 1.5)));
    const auto first = dare_sparsify(tv, 0.7, options.seed);
    const auto second = dare_sparsify(tv, 0.7, options.seed);
    if (first.weights.entries.at("w").values != second.weights.entries.at("w").values) return "not reproducible";
    const auto &v = first.weights.entries.at("w").values;
    const double zeros = static_cast<double>(std::count(v.begin(), v.end(), 0.0)) / static_cast<double>(v.size());
    if (std::abs(zeros - 0.7) > 0.01) return "drop fraction " + std::to_string(zeros);
    return {};
  }));

  out.push_back(run_check("ties survivor count", [&]() -> std::string {
    sampler rng(options.seed + 6);
    for (int t = 0; t < trials; ++t) {
      task_vector tv;
      tv.weights.entries.emplace("a", tensor::from_matrix(rng.gaussian(rng.index(1, 20), rng.index(1, 20))));
      tv.weights.entries.emplace("b", tensor::from_matrix(rng.gaussian(rng.index(1, 20), rng.index(1, 20))));
      const double k = 1 + 99 * rng.uniform();
      const auto mask = ties_keep_mask(tv, k);
      const auto kept = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
      if (kept != ties_keep_count(k, mask.size())) return "survivor count mismatch";
    }
    return {};
  }));

  return out;
}

}  // namespace specmerge::harness
