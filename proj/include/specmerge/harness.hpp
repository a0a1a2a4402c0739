#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "specmerge/merge.hpp"
#include "specmerge/tensorstore.hpp"

namespace specmerge::harness {

// ---- metric arithmetic -----------------------------------------------------

enum class metric_kind { accuracy, f1, spearman };

struct task_score {
  std::string task_name;
  metric_kind kind = metric_kind::accuracy;
  double merged = 0.0;
  double finetuned = 0.0;
  double pretrained = 0.0;
};

/// Mean of merged/finetuned over tasks, as a percentage.
double normalized_average(std::span<const task_score> scores);

/// Mean of pretrained/finetuned over tasks, as a percentage.
double pretrained_baseline(std::span<const task_score> scores);

struct score_summary {
  double normalized_average = 0.0;
  double pretrained_baseline = 0.0;
  /// Merged model scores below the untouched pretrained model.
  bool merging_loses_purpose = false;
};

score_summary summarize_scores(std::span<const task_score> scores);

/// CSV with header task_name,metric_kind,merged,finetuned,pretrained.
std::vector<task_score> parse_scores_csv(std::istream &in);
std::vector<task_score> load_scores_csv(const std::filesystem::path &path);

// ---- synthetic task vectors ------------------------------------------------

struct synth_spec {
  int num_tasks = 8;
  Eigen::Index rows = 64;
  Eigen::Index cols = 64;
  int planted_rank = 4;
  double noise_sigma = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Name of the single 2-D layer in every synthetic task vector.
inline constexpr const char *synth_layer = "layer.weight";

struct synth_set {
  std::vector<task_vector> task_vectors;
  std::vector<matrix> planted;  // noise-free ground truth per task
};

/// Task i = (L_i R_i) / sqrt(planted_rank) + noise_sigma * N_i with L_i, R_i,
/// N_i standard Gaussian, all drawn from counters keyed by (seed, i).
synth_set generate_synth_task_vectors(const synth_spec &spec);

// ---- rank profiles ---------------------------------------------------------

struct rank_profile {
  std::vector<std::string> layer_names;
  std::vector<int> ranks;
  double eta = 40.0;
};

/// rank_keep for every 2-D layer in key order; all-zero layers report 0.
rank_profile compute_rank_profile(const task_vector &tv, double eta);
void write_rank_profile_csv(const rank_profile &profile, std::ostream &out);

// ---- experiments -----------------------------------------------------------

/// Short label such as "star(eta=40)" or "dare(p=0.2)+ties(k=20)".
std::string config_label(const merge_config &config);

struct recovery_row {
  std::string method;
  int num_models = 0;
  double value = 0.0;  // ||merged - mean(planted)||_F
};

/// For every method and every prefix size T' = 1..num_tasks, merges the first
/// T' synthetic task vectors and measures the Frobenius distance to the mean
/// of their planted matrices.
std::vector<recovery_row> recovery_experiment(const synth_spec &spec, std::span<const merge_config> methods);
void write_recovery_csv(std::span<const recovery_row> rows, std::ostream &out);

inline const std::vector<double> default_eta_grid = {10, 20, 30, 40, 50, 60, 70};

struct sweep_row {
  double eta = 0.0;
  double mean_rank = 0.0;
  int max_rank = 0;
  double mean_rescale_factor = 0.0;
  double delta_frobenius = 0.0;  // norm of the merged delta
};

/// STAR at every eta in `grid`; one row per eta.
std::vector<sweep_row> eta_sweep(std::span<const task_vector> task_vectors, std::span<const double> grid);
void write_sweep_csv(std::span<const sweep_row> rows, std::ostream &out);

// ---- property suite (cli verify) ---------------------------------------------

struct check_result {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct verify_options {
  std::uint64_t seed = 1;
  int trials = 50;
};

/// Randomized checks of the spectral and merge invariants.
std::vector<check_result> run_property_suite(const verify_options &options);

}  // namespace specmerge::harness
