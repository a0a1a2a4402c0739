#include "specmerge/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "specmerge/error.hpp"
#include "specmerge/random.hpp"
#include "specmerge/spectral.hpp"

namespace specmerge::harness {

namespace {

void check_score(const task_score &s) {
  const auto in_range = [](double v, double lo, double hi) { return std::isfinite(v) && v >= lo && v <= hi; };
  if (!in_range(s.finetuned, 0.0, 100.0) || s.finetuned == 0.0) {
    throw argument_error("fine-tuned score of '" + s.task_name + "' must lie in (0, 100]");
  }
  if (!in_range(s.merged, 0.0, 100.0)) {
    throw validation_error("merged score of '" + s.task_name + "' must lie in [0, 100]");
  }
  if (!in_range(s.pretrained, 0.0, 100.0)) {
    throw validation_error("pretrained score of '" + s.task_name + "' must lie in [0, 100]");
  }
}

template <class Ratio>
double mean_ratio(std::span<const task_score> scores, Ratio ratio) {
  if (scores.empty()) throw argument_error("no task scores");
  double sum = 0.0;
  for (const auto &s : scores) {
    check_score(s);
    sum += ratio(s);
  }
  return 100.0 * sum / static_cast<double>(scores.size());
}

std::string trim(std::string s) {
  const auto ws = " \t\r";
  s.erase(0, s.find_first_not_of(ws));
  s.erase(s.find_last_not_of(ws) + 1);
  return s;
}

double parse_double(const std::string &field, int line) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || ptr != field.data() + field.size()) {
    throw validation_error("scores line " + std::to_string(line) + ": '" + field + "' is not a number");
  }
  return v;
}

matrix gaussian(std::uint64_t key, Eigen::Index rows, Eigen::Index cols) {
  matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      m(r, c) = random::normal(key, static_cast<std::uint64_t>(r * cols + c));
    }
  }
  return m;
}

std::string number(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace

double normalized_average(std::span<const task_score> scores) {
  return mean_ratio(scores, [](const task_score &s) { return s.merged / s.finetuned; });
}

double pretrained_baseline(std::span<const task_score> scores) {
  return mean_ratio(scores, [](const task_score &s) { return s.pretrained / s.finetuned; });
}

score_summary summarize_scores(std::span<const task_score> scores) {
  score_summary out;
  out.normalized_average = normalized_average(scores);
  out.pretrained_baseline = pretrained_baseline(scores);
  out.merging_loses_purpose = out.normalized_average < out.pretrained_baseline;
  return out;
}

std::vector<task_score> parse_scores_csv(std::istream &in) {
  std::string line;
  int line_no = 0;
  std::vector<task_score> out;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, ',');) fields.push_back(trim(f));
    if (!header_seen) {
      const std::vector<std::string> expected = {"task_name", "metric_kind", "merged", "finetuned", "pretrained"};
      if (fields != expected) {
        throw validation_error("scores header must be task_name,metric_kind,merged,finetuned,pretrained");
      }
      header_seen = true;
      continue;
    }
    if (fields.size() != 5) {
      throw validation_error("scores line " + std::to_string(line_no) + " needs 5 fields");
    }
    task_score s;
    s.task_name = fields[0];
    if (fields[1] == "accuracy") {
      s.kind = metric_kind::accuracy;
    } else if (fields[1] == "f1") {
      s.kind = metric_kind::f1;
    } else if (fields[1] == "spearman") {
      s.kind = metric_kind::spearman;
    } else {
      throw validation_error("scores line " + std::to_string(line_no) + ": unknown metric_kind '" + fields[1] + "'");
    }
    s.merged = parse_double(fields[2], line_no);
    s.finetuned = parse_double(fields[3], line_no);
    s.pretrained = parse_double(fields[4], line_no);
    check_score(s);
    out.push_back(std::move(s));
  }
  if (!header_seen) throw validation_error("scores file is empty");
  return out;
}

std::vector<task_score> load_scores_csv(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open '" + path.string() + "' for reading");
  return parse_scores_csv(in);
}

void synth_spec::validate() const {
  if (num_tasks < 1) throw argument_error("synthetic spec needs at least one task");
  if (rows < 1 || cols < 1) throw argument_error("synthetic shape must be positive");
  if (planted_rank < 0 || planted_rank > std::min(rows, cols)) {
    throw argument_error("planted rank must lie in [0, min(rows, cols)]");
  }
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw argument_error("noise sigma must be >= 0");
}

synth_set generate_synth_task_vectors(const synth_spec &spec) {
  spec.validate();
  synth_set out;
  for (int i = 0; i < spec.num_tasks; ++i) {
    const std::string task = "task" + std::to_string(i);
    matrix planted = matrix::Zero(spec.rows, spec.cols);
    if (spec.planted_rank > 0) {
      const matrix left = gaussian(random::derive_key(spec.seed, task + "/left"), spec.rows, spec.planted_rank);
      const matrix right = gaussian(random::derive_key(spec.seed, task + "/right"), spec.planted_rank, spec.cols);
      planted = left * right / std::sqrt(static_cast<double>(spec.planted_rank));
    }
    matrix observed = planted;
    if (spec.noise_sigma > 0.0) {
      observed += spec.noise_sigma * gaussian(random::derive_key(spec.seed, task + "/noise"), spec.rows, spec.cols);
    }
    task_vector tv;
    tv.base_id = "synthetic-base";
    tv.weights.model_id = task;
    tv.weights.kind = role::delta;
    tv.weights.entries.emplace(synth_layer, tensor::from_matrix(observed));
    out.task_vectors.push_back(std::move(tv));
    out.planted.push_back(std::move(planted));
  }
  return out;
}

rank_profile compute_rank_profile(const task_vector &tv, double eta) {
  if (!(eta > 0.0 && eta <= 100.0)) throw argument_error("eta must lie in (0, 100]");
  rank_profile p;
  p.eta = eta;
  for (const auto &[name, t] : tv.weights.entries) {
    if (!t.is_matrix()) continue;
    const auto d = spectral::svd(t.to_matrix(), name);
    p.layer_names.push_back(name);
    p.ranks.push_back(spectral::numerical_rank(d.sigma) == 0 ? 0 : spectral::rank_keep(d.sigma, eta));
  }
  return p;
}

void write_rank_profile_csv(const rank_profile &profile, std::ostream &out) {
  out << "layer_name,rank\n";
  for (std::size_t i = 0; i < profile.ranks.size(); ++i) {
    out << profile.layer_names[i] << ',' << profile.ranks[i] << '\n';
  }
}

std::string config_label(const merge_config &config) {
  std::string label;
  if (config.dare_p) label = "dare(p=" + number(*config.dare_p) + ")+";
  switch (config.method) {
    case merge_method::star: label += "star(eta=" + number(config.eta) + ")"; break;
    case merge_method::simple_average: label += "average"; break;
    case merge_method::task_arithmetic: label += "ta(alpha=" + number(config.alpha.value_or(0.0)) + ")"; break;
    case merge_method::ties: label += "ties(k=" + number(config.k_percent) + ")"; break;
  }
  return label;
}

std::vector<recovery_row> recovery_experiment(const synth_spec &spec, std::span<const merge_config> methods) {
  for (const auto &m : methods) m.validate();
  const synth_set data = generate_synth_task_vectors(spec);
  std::vector<recovery_row> rows;
  for (const auto &config : methods) {
    for (int t = 1; t <= spec.num_tasks; ++t) {
      const std::span<const task_vector> prefix(data.task_vectors.data(), static_cast<std::size_t>(t));
      const auto res = merge_task_vectors(prefix, config);
      matrix target = matrix::Zero(spec.rows, spec.cols);
      for (int i = 0; i < t; ++i) target += data.planted[i];
      target /= static_cast<double>(t);
      const matrix merged = res.delta.weights.entries.at(synth_layer).to_matrix();
      rows.push_back({config_label(config), t, (merged - target).norm()});
    }
  }
  return rows;
}

void write_recovery_csv(std::span<const recovery_row> rows, std::ostream &out) {
  out << "method,num_models,value\n" << std::setprecision(17);
  for (const auto &r : rows) out << r.method << ',' << r.num_models << ',' << r.value << '\n';
}

std::vector<sweep_row> eta_sweep(std::span<const task_vector> tvs, std::span<const double> grid) {
  std::vector<sweep_row> rows;
  for (double eta : grid) {
    const auto res = star_merge(tvs, eta);
    sweep_row row;
    row.eta = eta;
    double rank_sum = 0.0, factor_sum = 0.0;
    std::size_t count = 0;
    for (const auto &[name, ranks] : res.per_layer_ranks) {
      const auto &factors = res.diagnostics.at(name).rescale_factor;
      for (std::size_t i = 0; i < ranks.size(); ++i) {
        rank_sum += ranks[i];
        factor_sum += factors[i];
        row.max_rank = std::max(row.max_rank, ranks[i]);
        ++count;
      }
    }
    if (count > 0) {
      row.mean_rank = rank_sum / static_cast<double>(count);
      row.mean_rescale_factor = factor_sum / static_cast<double>(count);
    }
    double sq = 0.0;
    for (const auto &[_, t] : res.delta.weights.entries) {
      for (double v : t.values) sq += v * v;
    }
    row.delta_frobenius = std::sqrt(sq);
    rows.push_back(row);
  }
  return rows;
}

void write_sweep_csv(std::span<const sweep_row> rows, std::ostream &out) {
  out << "eta,mean_rank,max_rank,mean_rescale_factor,delta_frobenius\n" << std::setprecision(17);
  for (const auto &r : rows) {
    out << r.eta << ',' << r.mean_rank << ',' << r.max_rank << ',' << r.mean_rescale_factor << ','
        << r.delta_frobenius << '\n';
  }
}

}  // namespace specmerge::harness
