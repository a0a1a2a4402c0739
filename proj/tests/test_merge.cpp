#include <doctest.h>

#include <array>
#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "specmerge/error.hpp"
#include "specmerge/merge.hpp"
#include "specmerge/random.hpp"
#include "specmerge/spectral.hpp"

using namespace specmerge;

namespace {

double max_rel(const task_vector &a, const task_vector &b) {
  double worst = 0.0;
  for (const auto &[name, t] : a.weights.entries) {
    const auto &u = b.weights.entries.at(name);
    REQUIRE(t.shape == u.shape);
    double scale = 0.0;
    for (double x : t.values) scale = std::max(scale, std::abs(x));
    for (std::size_t i = 0; i < t.values.size(); ++i) {
      worst = std::max(worst, oracle::rel_diff(t.values[i], u.values[i], scale));
    }
  }
  return worst;
}

std::vector<task_vector> random_tasks(oracle::rng &rng, int count) {
  std::vector<task_vector> out;
  for (int i = 0; i < count; ++i) {
    out.push_back(oracle::make_task_vector({{"attn.weight", rng.gaussian(12, 9)},
                                            {"mlp.weight", rng.low_rank(7, 15, 3)},
                                            {"bias", rng.gaussian(1, 9)}},
                                           "t" + std::to_string(i)));
  }
  return out;
}

task_vector scalar_tv(std::vector<double> values) {
  matrix m(1, static_cast<Eigen::Index>(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i) m(0, static_cast<Eigen::Index>(i)) = values[i];
  return oracle::make_task_vector({{"bias", m}});
}

const std::vector<double> &values(const merge_result &r, const std::string &name = "bias") {
  return r.delta.weights.entries.at(name).values;
}

}  // namespace

TEST_CASE("method names") {
  CHECK(parse_method("star") == merge_method::star);
  CHECK(parse_method("average") == merge_method::simple_average);
  CHECK(parse_method("ta") == merge_method::task_arithmetic);
  CHECK(parse_method("ties") == merge_method::ties);
  for (const char *name : {"metagpt", "tall-masks", "emr", "MetaGPT"}) {
    try {
      parse_method(name);
      FAIL("expected rejection");
    } catch (const argument_error &e) {
      CHECK(std::string(e.what()).find("out of scope") != std::string::npos);
    }
  }
  CHECK_THROWS_AS(parse_method("nonsense"), argument_error);
}

TEST_CASE("config validation") {
  merge_config c;
  CHECK_NOTHROW(c.validate());
  c.eta = 0;
  CHECK_THROWS_AS(c.validate(), argument_error);
  c.eta = 101;
  CHECK_THROWS_AS(c.validate(), argument_error);
  c = {};
  c.method = merge_method::task_arithmetic;
  CHECK_THROWS_AS(c.validate(), argument_error);
  c.alpha = 0.5;
  CHECK_NOTHROW(c.validate());
  c.dare_p = 1.0;
  CHECK_THROWS_AS(c.validate(), argument_error);
  c.dare_p = -0.1;
  CHECK_THROWS_AS(c.validate(), argument_error);
  c = {};
  c.method = merge_method::ties;
  c.k_percent = 0;
  CHECK_THROWS_AS(c.validate(), argument_error);
}

TEST_CASE("star_process_matrix") {
  SUBCASE("diag(4,3,2,1) at eta 40 keeps rank 1 scaled to the full nuclear norm") {
    const matrix m = Eigen::Vector4d(4, 3, 2, 1).asDiagonal();
    const auto layer = star_process_matrix(m, 40);
    CHECK(layer.rank == 1);
    CHECK(layer.rescale_factor == doctest::Approx(2.5));
    CHECK(layer.processed(0, 0) == doctest::Approx(10.0).epsilon(1e-14));
    CHECK(std::abs(layer.processed.sum() - layer.processed(0, 0)) < 1e-13);
    CHECK(layer.nuclear_after == doctest::Approx(10.0).epsilon(1e-13));
  }
  SUBCASE("zero layer passes through") {
    const auto layer = star_process_matrix(matrix::Zero(3, 4), 40);
    CHECK(layer.rank == 0);
    CHECK(layer.processed.isZero(0.0));
    CHECK(layer.rescale_factor == 1.0);
  }
  SUBCASE("nuclear norm preserved across eta on random inputs") {
    oracle::rng rng(31);
    for (int trial = 0; trial < 10; ++trial) {
      const matrix m = rng.gaussian(rng.integer(2, 25), rng.integer(2, 25));
      const double before = oracle::nuclear_norm(m);
      for (double eta : {10.0, 40.0, 70.0, 100.0}) {
        const auto layer = star_process_matrix(m, eta);
        CHECK(oracle::rel_diff(oracle::jacobi_nuclear_norm(layer.processed), before) < 1e-9);
        CHECK(layer.rank == spectral::rank_keep(oracle::gram_singular_values(m), eta));
      }
    }
  }
}

TEST_CASE("STAR with one task at eta 100 is the identity") {
  oracle::rng rng(32);
  const auto tasks = random_tasks(rng, 1);
  CHECK(max_rel(star_merge(tasks, 100).delta, tasks[0]) < 1e-9);
}

TEST_CASE("STAR at eta 100 equals simple averaging") {
  oracle::rng rng(33);
  for (int count : {2, 3, 5}) {
    const auto tasks = random_tasks(rng, count);
    CHECK(max_rel(star_merge(tasks, 100).delta, simple_average(tasks).delta) < 1e-9);
  }
}

TEST_CASE("STAR hand composition: diag(4,3,2,1) with a zero task at eta 40") {
  const matrix d1 = Eigen::Vector4d(4, 3, 2, 1).asDiagonal();
  const std::vector<task_vector> tasks = {oracle::make_task_vector({{"w", d1}}, "a"),
                                          oracle::make_task_vector({{"w", matrix::Zero(4, 4)}}, "b")};
  const auto result = star_merge(tasks, 40);
  const matrix merged = result.delta.weights.entries.at("w").to_matrix();
  matrix expected = matrix::Zero(4, 4);
  expected(0, 0) = 5.0;
  CHECK((merged - expected).cwiseAbs().maxCoeff() < 1e-13);
  CHECK(result.per_layer_ranks.at("w") == std::vector<int>{1, 0});
  CHECK(result.diagnostics.at("w").rescale_factor[0] == doctest::Approx(2.5));
}

TEST_CASE("STAR leaves 1-D tensors to plain averaging and records per-task ranks") {
  oracle::rng rng(34);
  const auto tasks = random_tasks(rng, 3);
  const auto result = star_merge(tasks, 40);
  CHECK(values(result) == values(simple_average(tasks)));
  CHECK(result.per_layer_ranks.count("bias") == 0);
  REQUIRE(result.per_layer_ranks.at("mlp.weight").size() == 3);
  for (int r : result.per_layer_ranks.at("mlp.weight")) CHECK(r <= 3);
}

TEST_CASE("simple averaging") {
  oracle::rng rng(35);
  const auto tasks = random_tasks(rng, 1);
  const std::vector<task_vector> same = {tasks[0], tasks[0], tasks[0]};
  CHECK(max_rel(simple_average(same).delta, tasks[0]) < 1e-15);

  const std::vector<task_vector> pair = {scalar_tv({2.0, 1.5}), scalar_tv({4.0, -1.5})};
  CHECK(values(simple_average(pair)) == std::vector<double>{3.0, 0.0});

  CHECK_THROWS_AS(simple_average(std::span<const task_vector>{}), argument_error);
}

TEST_CASE("task arithmetic") {
  oracle::rng rng(36);
  const auto tasks = random_tasks(rng, 8);
  CHECK(max_rel(task_arithmetic(tasks, 0.125).delta, simple_average(tasks).delta) < 1e-12);
  const std::span<const task_vector> three(tasks.data(), 3);
  CHECK(max_rel(task_arithmetic(three, 1.0 / 3.0).delta, simple_average(three).delta) < 1e-12);
  for (const auto &[name, t] : task_arithmetic(tasks, 0.0).delta.weights.entries) {
    for (double v : t.values) CHECK(v == 0.0);
  }
}

TEST_CASE("TIES keep count") {
  CHECK(ties_keep_count(20, 10) == 2);
  CHECK(ties_keep_count(20, 11) == 3);
  CHECK(ties_keep_count(100, 7) == 7);
  CHECK(ties_keep_count(1, 50) == 1);
  // 0.07 * 100 is 7.000000000000001 in binary; the count must still be 7
  CHECK(ties_keep_count(7, 100) == 7);
  CHECK(ties_keep_count(0.5, 3) == 1);
}

TEST_CASE("TIES keep mask: global per task, ties broken by position") {
  const auto tv = oracle::make_task_vector({{"bias", (matrix(1, 4) << 1, -5, 3, 0).finished()},
                                            {"bias2", (matrix(1, 3) << 5, 2, -1).finished()}});
  // flat order is by tensor name then element: bias = [1,-5,3,0], bias2 = [5,2,-1]
  const auto mask = ties_keep_mask(tv, 30);  // ceil(0.3 * 7) = 3
  const std::vector<bool> expected = {false, true, true, false, true, false, false};
  CHECK(mask == expected);

  const auto flat = oracle::make_task_vector({{"bias", (matrix(1, 4) << 2, -2, 2, 1).finished()}});
  CHECK(ties_keep_mask(flat, 50) == std::vector<bool>{true, true, false, false});
}

TEST_CASE("TIES hand cases") {
  SUBCASE("+3 and -1 both surviving elect + and average only the +3") {
    const std::vector<task_vector> tasks = {scalar_tv({3.0}), scalar_tv({-1.0})};
    CHECK(values(ties_merge(tasks, 100)) == std::vector<double>{3.0});
  }
  SUBCASE("equal mass elects +") {
    const std::vector<task_vector> tasks = {scalar_tv({2.0}), scalar_tv({-2.0})};
    CHECK(values(ties_merge(tasks, 100)) == std::vector<double>{2.0});
  }
  SUBCASE("negative majority by mass") {
    const std::vector<task_vector> tasks = {scalar_tv({1.0}), scalar_tv({1.0}), scalar_tv({-3.0})};
    CHECK(values(ties_merge(tasks, 100)) == std::vector<double>{-3.0});
  }
  SUBCASE("element trimmed everywhere is zero") {
    const std::vector<task_vector> tasks = {scalar_tv({10.0, 0.1}), scalar_tv({9.0, -0.2})};
    CHECK(values(ties_merge(tasks, 50)) == std::vector<double>{9.5, 0.0});
  }
  SUBCASE("single task at K = 100 is the identity") {
    oracle::rng rng(37);
    const auto tasks = random_tasks(rng, 1);
    CHECK(max_rel(ties_merge(tasks, 100).delta, tasks[0]) == 0.0);
  }
}

TEST_CASE("TIES survivor count is exact per task") {
  oracle::rng rng(38);
  const auto tasks = random_tasks(rng, 4);
  const std::size_t n = tasks[0].weights.total_elements();
  for (double k : {1.0, 7.0, 20.0, 33.3, 100.0}) {
    for (const auto &tv : tasks) {
      const auto mask = ties_keep_mask(tv, k);
      CHECK(static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true)) ==
            static_cast<std::size_t>(std::ceil(k * static_cast<double>(n) / 100.0 - 1e-9)));
    }
  }
}

TEST_CASE("DARE") {
  oracle::rng rng(39);
  const auto tasks = random_tasks(rng, 1);
  const auto &tv = tasks[0];

  SUBCASE("p = 0 is the identity") {
    CHECK(max_rel(dare_sparsify(tv, 0.0, 5), tv) == 0.0);
  }
  SUBCASE("fixed seed is bit-reproducible, other seeds differ") {
    const auto a = dare_sparsify(tv, 0.5, 99);
    const auto b = dare_sparsify(tv, 0.5, 99);
    CHECK(max_rel(a, b) == 0.0);
    CHECK(max_rel(a, dare_sparsify(tv, 0.5, 100)) > 0.0);
  }
  SUBCASE("survivors are rescaled by 1/(1-p)") {
    const auto out = dare_sparsify(tv, 0.7, 3);
    for (const auto &[name, t] : out.weights.entries) {
      const auto &src = tv.weights.entries.at(name).values;
      for (std::size_t i = 0; i < t.values.size(); ++i) {
        if (t.values[i] != 0.0) CHECK(t.values[i] == doctest::Approx(src[i] / 0.3).epsilon(1e-15));
      }
    }
  }
  SUBCASE("zero fraction on a 100k tensor") {
    const auto big = oracle::make_task_vector({{"w", matrix::Ones(100, 1000)}});
    const auto out = dare_sparsify(big, 0.7, 1);
    const auto &v = out.weights.entries.at("w").values;
    const double frac = static_cast<double>(std::count(v.begin(), v.end(), 0.0)) / static_cast<double>(v.size());
    // 5 standard deviations of a Binomial(1e5, 0.7) fraction
    CHECK(std::abs(frac - 0.7) < 5 * std::sqrt(0.21 / 1e5));
  }
  SUBCASE("invalid p") {
    CHECK_THROWS_AS(dare_sparsify(tv, 1.0, 0), argument_error);
    CHECK_THROWS_AS(dare_sparsify(tv, -0.5, 0), argument_error);
  }
}

TEST_CASE("merge_task_vectors composes DARE with the chosen method") {
  oracle::rng rng(40);
  const auto tasks = random_tasks(rng, 3);
  merge_config c;
  c.method = merge_method::ties;
  c.k_percent = 20;
  c.dare_p = 0.2;
  c.seed = 17;
  std::vector<task_vector> sparsified;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    sparsified.push_back(dare_sparsify(tasks[i], 0.2, specmerge::random::bits(17, i)));
  }
  CHECK(max_rel(merge_task_vectors(tasks, c).delta, ties_merge(sparsified, 20).delta) == 0.0);
  CHECK(max_rel(merge_task_vectors(tasks, c).delta, merge_task_vectors(tasks, c).delta) == 0.0);
}

TEST_CASE("merges are invariant under input order") {
  oracle::rng rng(41);
  auto tasks = random_tasks(rng, 4);
  auto reversed = tasks;
  std::reverse(reversed.begin(), reversed.end());
  for (auto method : {merge_method::star, merge_method::simple_average, merge_method::ties}) {
    merge_config c;
    c.method = method;
    CHECK(max_rel(merge_task_vectors(tasks, c).delta, merge_task_vectors(reversed, c).delta) < 1e-12);
  }
}

TEST_CASE("merging copies of one model returns it") {
  oracle::rng rng(42);
  const auto one = random_tasks(rng, 1);
  const std::vector<task_vector> copies(4, one[0]);
  CHECK(max_rel(simple_average(copies).delta, one[0]) < 1e-12);
  CHECK(max_rel(task_arithmetic(copies, 0.25).delta, one[0]) < 1e-12);
  CHECK(max_rel(ties_merge(copies, 100).delta, one[0]) < 1e-12);
  CHECK(max_rel(star_merge(copies, 100).delta, one[0]) < 1e-9);
}

TEST_CASE("mismatched task vectors are rejected") {
  const std::vector<task_vector> tasks = {oracle::make_task_vector({{"w", matrix::Ones(2, 2)}}),
                                          oracle::make_task_vector({{"w", matrix::Ones(2, 3)}})};
  CHECK_THROWS_AS(star_merge(tasks, 40), shape_error);
  CHECK_THROWS_AS(simple_average(tasks), shape_error);
}

TEST_CASE("end-to-end merge of dense checkpoints") {
  oracle::rng rng(43);
  tensor_map pre;
  pre.model_id = "base";
  pre.entries.emplace("w", tensor::from_matrix(rng.gaussian(6, 5), dtype::f64));
  pre.entries.emplace("b", tensor{dtype::f64, {5}, std::vector<double>(5, 0.5)});
  std::vector<tensor_map> models;
  for (int i = 0; i < 3; ++i) {
    tensor_map ft = pre;
    ft.model_id = "ft" + std::to_string(i);
    ft.kind = role::finetuned;
    ft.entries.at("w") = tensor::from_matrix(pre.entries.at("w").to_matrix() + rng.gaussian(6, 5), dtype::f64);
    ft.entries.at("b").values[i] += 1.0;
    models.push_back(ft);
  }

  merge_config c;
  c.eta = 100;
  const auto out = merge(pre, models, c);
  CHECK(out.model.kind == role::merged);
  CHECK(out.model.metadata.at("merge_method") == "star");

  matrix mean = matrix::Zero(6, 5);
  for (const auto &m : models) mean += m.entries.at("w").to_matrix();
  mean /= 3.0;
  CHECK((out.model.entries.at("w").to_matrix() - mean).norm() < 1e-12 * mean.norm());
  for (int i = 0; i < 3; ++i) CHECK(out.model.entries.at("b").values[i] == doctest::Approx(0.5 + 1.0 / 3.0));

  const std::vector<tensor_map> single = {models[0]};
  const auto identity = merge(pre, single, c);
  CHECK((identity.model.entries.at("w").to_matrix() - models[0].entries.at("w").to_matrix()).norm() < 1e-12);

  CHECK_THROWS_AS(merge(pre, std::span<const tensor_map>{}, c), argument_error);
}

TEST_CASE("end-to-end merge of LoRA adapters") {
  tensor_map pre;
  pre.entries.emplace("q", tensor::from_matrix(matrix::Zero(3, 4), dtype::f32));
  pre.entries.emplace("norm", tensor{dtype::f32, {4}, {1, 1, 1, 1}});

  auto adapter = [](double scale) {
    lora_adapter a;
    a.model_id = "lora";
    lora_factor_pair p;
    p.target_name = "q";
    p.rank = 1;
    p.alpha = 2.0;
    p.b_factor = (matrix(3, 1) << 1, 0, 0).finished();
    p.a_factor = (matrix(1, 4) << scale, 0, 0, 0).finished();
    a.pairs.push_back(p);
    return a;
  };
  const std::vector<lora_adapter> adapters = {adapter(1.0), adapter(3.0)};
  merge_config c;
  c.method = merge_method::simple_average;
  const auto out = merge(pre, adapters, c);
  // deltas are 2*[[1,0..]] and 2*[[3,0..]]; mean top-left is 4
  CHECK(out.model.entries.at("q").values[0] == doctest::Approx(4.0));
  CHECK(out.model.entries.at("norm").values == std::vector<double>{1, 1, 1, 1});
  CHECK(out.model.entries.at("q").type == dtype::f32);

  auto other = adapter(1.0);
  other.pairs[0].target_name = "norm";
  const std::vector<lora_adapter> mixed = {adapter(1.0), other};
  CHECK_THROWS(merge(pre, mixed, c));
}
