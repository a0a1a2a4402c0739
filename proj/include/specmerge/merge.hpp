#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "specmerge/tensorstore.hpp"

namespace specmerge {

enum class merge_method { star, simple_average, task_arithmetic, ties };

/// CLI spelling: star, average, ta, ties.
std::string_view method_name(merge_method m) noexcept;

/// Accepts the CLI spellings (and the long names). Names of known but
/// unsupported methods get a dedicated out-of-scope message.
merge_method parse_method(std::string_view name);

struct merge_config {
  merge_method method = merge_method::star;
  double eta = 40.0;        // STAR mass threshold, percent
  double k_percent = 20.0;  // TIES trim, percent kept
  std::optional<double> alpha;   // task arithmetic scale; required for that method
  std::optional<double> dare_p;  // when set, DARE-sparsify every input before `method`
  std::uint64_t seed = 0;        // DARE

  /// Throws argument_error on out-of-range or missing parameters.
  void validate() const;
};

/// Per-task spectral bookkeeping for one 2-D layer.
struct layer_diagnostics {
  std::vector<double> nuclear_before;
  std::vector<double> nuclear_after;
  std::vector<double> rescale_factor;
};

struct merge_result {
  task_vector delta;
  /// STAR only: kept rank per task for every 2-D layer (0 for an all-zero layer).
  std::map<std::string, std::vector<int>> per_layer_ranks;
  merge_config config;
  /// STAR only.
  std::map<std::string, layer_diagnostics> diagnostics;
};

/// Spectral truncation + nuclear-norm rescale of one matrix.
struct star_layer {
  matrix processed;
  int rank = 0;
  double nuclear_before = 0.0;
  double nuclear_after = 0.0;
  double rescale_factor = 1.0;
};

/// An all-zero matrix passes through unchanged with rank 0.
star_layer star_process_matrix(const matrix &m, double eta, std::string_view name = {});

merge_result star_merge(std::span<const task_vector> task_vectors, double eta);
merge_result simple_average(std::span<const task_vector> task_vectors);
/// alpha * sum(delta_i); a scaled sum, not a mean.
merge_result task_arithmetic(std::span<const task_vector> task_vectors, double alpha);
merge_result ties_merge(std::span<const task_vector> task_vectors, double k_percent);

/// ceil(k_percent / 100 * n), with products that land within 1e-9 of an
/// integer snapped to it first (so 20% of 10 is 2, not 3).
std::size_t ties_keep_count(double k_percent, std::size_t n);

/// Flat keep-mask over the task vector (tensors in key order, row-major):
/// the ties_keep_count largest magnitudes, lower flat index first on ties.
std::vector<bool> ties_keep_mask(const task_vector &tv, double k_percent);

/// Drops each element with probability p and scales survivors by 1/(1-p).
/// The mask bit of element i in tensor t is a pure function of (seed, t, i).
task_vector dare_sparsify(const task_vector &delta, double p, std::uint64_t seed);

/// DARE preprocessing (if configured) followed by the configured method.
/// Task i is sparsified with a seed derived from (config.seed, i).
merge_result merge_task_vectors(std::span<const task_vector> task_vectors, const merge_config &config);

struct merge_output {
  tensor_map model;
  merge_result details;
};

merge_output merge(const tensor_map &pretrained, std::span<const tensor_map> finetuned,
                   const merge_config &config);
merge_output merge(const tensor_map &pretrained, std::span<const lora_adapter> adapters,
                   const merge_config &config);

}  // namespace specmerge
