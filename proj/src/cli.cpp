#include "specmerge/cli.hpp"

#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "specmerge/error.hpp"
#include "specmerge/harness.hpp"
#include "specmerge/merge.hpp"
#include "specmerge/tensorstore.hpp"

namespace specmerge::cli {

namespace {

using json = nlohmann::json;

struct merge_flags {
  std::string method = "star";
  double eta = 40.0;
  double k = 20.0;
  std::optional<double> alpha;
  std::optional<double> dare_p;
  std::uint64_t seed = 0;
  std::string pretrained;
  std::vector<std::string> models;
  bool lora = false;
  std::string out;
  std::string report;
  std::string scores;
  int trials = 50;
  harness::synth_spec synth;
  std::vector<std::string> methods;
};

void add_config_flags(CLI::App &cmd, merge_flags &f) {
  cmd.add_option("--eta", f.eta, "STAR singular-value mass to keep, percent")->capture_default_str();
  cmd.add_option("--k", f.k, "TIES percent of entries kept")->capture_default_str();
  cmd.add_option("--alpha", f.alpha, "task arithmetic scale");
  cmd.add_option("--dare-p", f.dare_p, "DARE drop probability applied before merging");
  cmd.add_option("--seed", f.seed, "seed for DARE / synthetic data")->capture_default_str();
}

void add_model_flags(CLI::App &cmd, merge_flags &f) {
  cmd.add_option("--pretrained", f.pretrained, "pretrained checkpoint");
  cmd.add_option("--model", f.models, "fine-tuned checkpoint (repeatable)");
  cmd.add_flag("--lora", f.lora, "interpret --model files as LoRA factor files");
}

void add_synth_flags(CLI::App &cmd, merge_flags &f) {
  cmd.add_option("--tasks", f.synth.num_tasks, "number of synthetic task vectors")->capture_default_str();
  cmd.add_option("--rows", f.synth.rows, "synthetic matrix rows")->capture_default_str();
  cmd.add_option("--cols", f.synth.cols, "synthetic matrix columns")->capture_default_str();
  cmd.add_option("--rank", f.synth.planted_rank, "planted rank")->capture_default_str();
  cmd.add_option("--noise", f.synth.noise_sigma, "noise standard deviation")->capture_default_str();
}

merge_config make_config(const merge_flags &f, const std::string &method) {
  merge_config c;
  c.method = parse_method(method);
  c.eta = f.eta;
  c.k_percent = f.k;
  c.alpha = f.alpha;
  c.dare_p = f.dare_p;
  c.seed = f.seed;
  c.validate();
  return c;
}

void require(bool cond, const std::string &message) {
  if (!cond) throw argument_error(message);
}

/// Writes to `path`, or to `fallback` when path is empty.
template <class Fn>
void emit(const std::string &path, std::ostream &fallback, Fn write) {
  if (path.empty()) {
    write(fallback);
    return;
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw io_error("cannot open '" + path + "' for writing");
  write(f);
  if (!f) throw io_error("write failure on '" + path + "'");
}

json config_json(const merge_config &c) {
  json j;
  j["method"] = method_name(c.method);
  j["eta"] = c.eta;
  j["k"] = c.k_percent;
  j["alpha"] = c.alpha ? json(*c.alpha) : json(nullptr);
  j["dare_p"] = c.dare_p ? json(*c.dare_p) : json(nullptr);
  j["seed"] = c.seed;
  return j;
}

/// Task vectors for every --model, against --pretrained when given.
std::vector<task_vector> load_task_vectors(const merge_flags &f, std::optional<tensor_map> &pretrained) {
  if (!f.pretrained.empty()) pretrained = load_checkpoint(f.pretrained);
  std::vector<task_vector> tvs;
  for (const auto &path : f.models) {
    if (f.lora) {
      const auto adapter = load_lora_adapter(path);
      if (pretrained) {
        tvs.push_back(lora_task_vector(adapter, *pretrained));
        continue;
      }
      task_vector tv;
      tv.weights.model_id = adapter.model_id;
      tv.weights.kind = role::delta;
      for (const auto &p : adapter.pairs) tv.weights.entries.emplace(p.target_name, tensor::from_matrix(materialize_lora(p)));
      tvs.push_back(std::move(tv));
      continue;
    }
    auto map = load_checkpoint(path);
    if (pretrained) {
      tvs.push_back(compute_task_vector(map, *pretrained));
    } else if (map.kind == role::delta) {
      task_vector tv;
      tv.weights = std::move(map);
      tvs.push_back(std::move(tv));
    } else {
      throw argument_error("'" + path + "' is not a delta file; pass --pretrained to form its task vector");
    }
  }
  return tvs;
}

int cmd_merge(const merge_flags &f, std::ostream &out) {
  const merge_config config = make_config(f, f.method);
  require(!f.pretrained.empty(), "merge needs --pretrained");
  require(!f.models.empty(), "merge needs at least one --model");
  require(!f.out.empty(), "merge needs --out");

  const tensor_map pretrained = load_checkpoint(f.pretrained);
  merge_output result;
  std::vector<std::string> ids;
  if (f.lora) {
    std::vector<lora_adapter> adapters;
    for (const auto &p : f.models) adapters.push_back(load_lora_adapter(p));
    for (const auto &a : adapters) ids.push_back(a.model_id);
    result = merge(pretrained, adapters, config);
  } else {
    std::vector<tensor_map> models;
    for (const auto &p : f.models) models.push_back(load_checkpoint(p));
    for (const auto &m : models) ids.push_back(m.model_id);
    result = merge(pretrained, models, config);
  }
  save_checkpoint(result.model, f.out);

  json diag;
  diag["config"] = config_json(config);
  diag["models"] = ids;
  diag["pretrained"] = pretrained.model_id;
  json layers = json::object();
  for (const auto &[name, ranks] : result.details.per_layer_ranks) {
    const auto &d = result.details.diagnostics.at(name);
    layers[name] = {{"ranks", ranks},
                    {"nuclear_before", d.nuclear_before},
                    {"nuclear_after", d.nuclear_after},
                    {"rescale_factor", d.rescale_factor}};
  }
  diag["layers"] = std::move(layers);
  if (!f.scores.empty()) {
    const auto scores = harness::load_scores_csv(f.scores);
    const auto s = harness::summarize_scores(scores);
    diag["scores"] = {{"normalized_average", s.normalized_average},
                      {"pretrained_baseline", s.pretrained_baseline},
                      {"merging_loses_purpose", s.merging_loses_purpose}};
  }
  const std::string report = f.report.empty() ? f.out + ".json" : f.report;
  emit(report, out, [&](std::ostream &os) { os << diag.dump(2) << '\n'; });
  return exit_ok;
}

int cmd_inspect(const merge_flags &f, std::ostream &out) {
  require(f.eta > 0.0 && f.eta <= 100.0, "eta must lie in (0, 100]");
  require(!f.models.empty() || !f.scores.empty(), "inspect needs --model or --scores");
  require(f.models.size() <= 1, "inspect takes a single --model");

  if (!f.scores.empty()) {
    const auto scores = harness::load_scores_csv(f.scores);
    const auto s = harness::summarize_scores(scores);
    const json j = {{"tasks", scores.size()},
                    {"normalized_average", s.normalized_average},
                    {"pretrained_baseline", s.pretrained_baseline},
                    {"merging_loses_purpose", s.merging_loses_purpose}};
    emit(f.report, out, [&](std::ostream &os) { os << j.dump(2) << '\n'; });
  }
  if (!f.models.empty()) {
    std::optional<tensor_map> pretrained;
    const auto tvs = load_task_vectors(f, pretrained);
    const auto profile = harness::compute_rank_profile(tvs.front(), f.eta);
    emit(f.out, out, [&](std::ostream &os) { harness::write_rank_profile_csv(profile, os); });
  }
  return exit_ok;
}

int cmd_sweep(const merge_flags &f, std::ostream &out) {
  std::vector<task_vector> tvs;
  if (f.models.empty()) {
    require(f.pretrained.empty(), "sweep with --pretrained needs at least one --model");
    auto spec = f.synth;
    spec.seed = f.seed;
    tvs = harness::generate_synth_task_vectors(spec).task_vectors;
  } else {
    std::optional<tensor_map> pretrained;
    tvs = load_task_vectors(f, pretrained);
  }
  const auto rows = harness::eta_sweep(tvs, harness::default_eta_grid);
  emit(f.report, out, [&](std::ostream &os) { harness::write_sweep_csv(rows, os); });
  return exit_ok;
}

int cmd_verify(const merge_flags &f, std::ostream &out) {
  require(f.trials >= 1, "trials must be positive");
  harness::verify_options opts;
  opts.seed = f.seed;
  opts.trials = f.trials;
  const auto results = harness::run_property_suite(opts);
  bool all = true;
  emit(f.report, out, [&](std::ostream &os) {
    for (const auto &r : results) {
      os << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << '\n';
      all = all && r.passed;
    }
  });
  return all ? exit_ok : exit_numerical;
}

int cmd_synth(const merge_flags &f, std::ostream &out) {
  std::vector<merge_config> configs;
  const std::vector<std::string> names = f.methods.empty() ? std::vector<std::string>{"star", "average"} : f.methods;
  for (const auto &m : names) configs.push_back(make_config(f, m));
  auto spec = f.synth;
  spec.seed = f.seed;
  spec.validate();
  const auto rows = harness::recovery_experiment(spec, configs);
  emit(f.report, out, [&](std::ostream &os) { harness::write_recovery_csv(rows, os); });
  return exit_ok;
}

}  // namespace

int run(int argc, const char *const *argv, std::ostream &out, std::ostream &err) {
  CLI::App app{"Data-free model merging with spectral truncation and rescaling", "specmerge"};
  app.require_subcommand(1);

  merge_flags f;

  auto *merge_cmd = app.add_subcommand("merge", "merge fine-tuned checkpoints into the pretrained model");
  merge_cmd->add_option("--method", f.method, "star | average | ta | ties")->capture_default_str();
  add_config_flags(*merge_cmd, f);
  add_model_flags(*merge_cmd, f);
  merge_cmd->add_option("--out", f.out, "merged checkpoint path");
  merge_cmd->add_option("--report", f.report, "diagnostics JSON path (default: <out>.json)");
  merge_cmd->add_option("--scores", f.scores, "per-task score CSV to summarize alongside the diagnostics");

  auto *inspect_cmd = app.add_subcommand("inspect", "per-layer rank profile of a task vector, or score summary");
  inspect_cmd->add_option("--eta", f.eta, "singular-value mass to keep, percent")->capture_default_str();
  add_model_flags(*inspect_cmd, f);
  inspect_cmd->add_option("--out", f.out, "rank profile CSV (default: stdout)");
  inspect_cmd->add_option("--scores", f.scores, "per-task score CSV");
  inspect_cmd->add_option("--report", f.report, "score summary JSON (default: stdout)");

  auto *sweep_cmd = app.add_subcommand("sweep", "STAR over the eta grid 10..70");
  add_model_flags(*sweep_cmd, f);
  add_synth_flags(*sweep_cmd, f);
  sweep_cmd->add_option("--seed", f.seed, "seed for synthetic inputs")->capture_default_str();
  sweep_cmd->add_option("--report", f.report, "sweep CSV (default: stdout)");

  auto *verify_cmd = app.add_subcommand("verify", "run the randomized property suite");
  verify_cmd->add_option("--seed", f.seed, "suite seed")->capture_default_str();
  verify_cmd->add_option("--trials", f.trials, "random instances per check")->capture_default_str();
  verify_cmd->add_option("--report", f.report, "result lines (default: stdout)");

  auto *synth_cmd = app.add_subcommand("synth", "recovery experiment on synthetic task vectors");
  synth_cmd->add_option("--method", f.methods, "method to compare (repeatable; default star and average)");
  add_config_flags(*synth_cmd, f);
  add_synth_flags(*synth_cmd, f);
  synth_cmd->add_option("--report", f.report, "decay-curve CSV (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? exit_ok : exit_validation;
  }

  try {
    if (merge_cmd->parsed()) return cmd_merge(f, out);
    if (inspect_cmd->parsed()) return cmd_inspect(f, out);
    if (sweep_cmd->parsed()) return cmd_sweep(f, out);
    if (verify_cmd->parsed()) return cmd_verify(f, out);
    if (synth_cmd->parsed()) return cmd_synth(f, out);
  } catch (const numerical_error &e) {
    err << "numerical error: " << e.what() << '\n';
    return exit_numerical;
  } catch (const error &e) {
    err << "error: " << e.what() << '\n';
    return exit_validation;
  } catch (const std::exception &e) {
    err << "error: " << e.what() << '\n';
    return exit_validation;
  }
  return exit_validation;
}

}  // namespace specmerge::cli
