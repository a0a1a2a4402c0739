#include "specmerge/merge.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "specmerge/error.hpp"
#include "specmerge/parallel.hpp"
#include "specmerge/random.hpp"
#include "specmerge/spectral.hpp"

namespace specmerge {

namespace {

void require_inputs(std::span<const task_vector> tvs) {
  if (tvs.empty()) throw argument_error("merging needs at least one task vector");
  for (std::size_t i = 1; i < tvs.size(); ++i) require_same_layout(tvs[0].weights, tvs[i].weights);
}

/// Output skeleton: same keys, shapes and dtypes as the first input, zeroed.
task_vector empty_delta(std::span<const task_vector> tvs) {
  task_vector out;
  out.base_id = tvs[0].base_id;
  out.weights.model_id = "merged";
  out.weights.kind = role::delta;
  for (const auto &[name, t] : tvs[0].weights.entries) out.weights.entries.emplace(name, tensor::zeros_like(t));
  return out;
}

/// scale * sum_i tvs[i], summed in input order.
task_vector scaled_sum(std::span<const task_vector> tvs, double scale, bool divide_by_count) {
  task_vector out = empty_delta(tvs);
  const double count = static_cast<double>(tvs.size());
  for (auto &[name, acc] : out.weights.entries) {
    for (const auto &tv : tvs) {
      const auto &src = tv.weights.entries.at(name).values;
      for (std::size_t i = 0; i < src.size(); ++i) acc.values[i] += src[i];
    }
    for (double &v : acc.values) v = divide_by_count ? v / count : v * scale;
  }
  return out;
}

bool is_all_zero(const matrix &m) { return (m.array() == 0.0).all(); }

}  // namespace

std::string_view method_name(merge_method m) noexcept {
  switch (m) {
    case merge_method::star: return "star";
    case merge_method::simple_average: return "average";
    case merge_method::task_arithmetic: return "ta";
    case merge_method::ties: return "ties";
  }
  return "star";
}

merge_method parse_method(std::string_view name) {
  if (name == "star") return merge_method::star;
  if (name == "average" || name == "simple_average") return merge_method::simple_average;
  if (name == "ta" || name == "task_arithmetic") return merge_method::task_arithmetic;
  if (name == "ties") return merge_method::ties;
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  for (std::string_view excluded : {"metagpt", "tall-masks", "tall_masks", "tallmasks", "tall", "emr",
                                    "emr-merging", "emr_merging", "emrmerging"}) {
    if (lower == excluded) {
      throw argument_error("method '" + std::string(name) +
                           "' is out of scope: MetaGPT, TALL-masks and EMR-Merging are not "
                           "implemented; supported methods are star, average, ta, ties");
    }
  }
  throw argument_error("unknown merge method '" + std::string(name) +
                       "'; supported methods are star, average, ta, ties");
}

void merge_config::validate() const {
  if (!(eta > 0.0 && eta <= 100.0)) throw argument_error("eta must lie in (0, 100]");
  if (!(k_percent > 0.0 && k_percent <= 100.0)) throw argument_error("k must lie in (0, 100]");
  if (dare_p && !(*dare_p >= 0.0 && *dare_p < 1.0)) throw argument_error("dare p must lie in [0, 1)");
  if (method == merge_method::task_arithmetic) {
    if (!alpha) throw argument_error("task arithmetic needs an explicit alpha");
    if (!std::isfinite(*alpha)) throw argument_error("alpha must be finite");
  }
}

star_layer star_process_matrix(const matrix &m, double eta, std::string_view name) {
  star_layer out;
  if (is_all_zero(m)) {
    out.processed = m;
    return out;
  }
  const auto d = spectral::svd(m, name);
  out.nuclear_before = d.sigma.sum();
  if (spectral::numerical_rank(d.sigma) == 0) {
    // Subnormal-scale input: treat like the zero matrix.
    out.processed = m;
    out.nuclear_after = out.nuclear_before;
    return out;
  }
  out.rank = spectral::rank_keep(d.sigma, eta);
  const vector rescaled = spectral::rescale_singular_values(d.sigma, out.rank);
  out.rescale_factor = rescaled[0] / d.sigma[0];
  out.processed = spectral::truncate_reconstruct(d, out.rank, rescaled);
  out.nuclear_after = spectral::nuclear_norm(out.processed);
  return out;
}

merge_result star_merge(std::span<const task_vector> tvs, double eta) {
  require_inputs(tvs);
  if (!(eta > 0.0 && eta <= 100.0)) throw argument_error("eta must lie in (0, 100]");

  const std::size_t t_count = tvs.size();
  std::vector<std::string> layers;
  for (const auto &[name, t] : tvs[0].weights.entries) {
    if (t.is_matrix()) layers.push_back(name);
  }

  // One work item per (layer, task); each writes its own slot.
  std::vector<star_layer> processed(layers.size() * t_count);
  parallel_for(processed.size(), [&](std::size_t item) {
    const auto &name = layers[item / t_count];
    const auto &src = tvs[item % t_count].weights.entries.at(name);
    processed[item] = star_process_matrix(src.to_matrix(), eta, name);
  });

  merge_result res;
  res.config.method = merge_method::star;
  res.config.eta = eta;
  res.delta = scaled_sum(tvs, 1.0, true);  // 1-D and higher-order tensors: plain mean

  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto &name = layers[l];
    matrix acc = matrix::Zero(processed[l * t_count].processed.rows(), processed[l * t_count].processed.cols());
    auto &ranks = res.per_layer_ranks[name];
    auto &diag = res.diagnostics[name];
    for (std::size_t i = 0; i < t_count; ++i) {
      const auto &p = processed[l * t_count + i];
      acc += p.processed;
      ranks.push_back(p.rank);
      diag.nuclear_before.push_back(p.nuclear_before);
      diag.nuclear_after.push_back(p.nuclear_after);
      diag.rescale_factor.push_back(p.rescale_factor);
    }
    acc /= static_cast<double>(t_count);
    auto &dst = res.delta.weights.entries.at(name);
    dst = tensor::from_matrix(acc, dst.type);
  }
  return res;
}

merge_result simple_average(std::span<const task_vector> tvs) {
  require_inputs(tvs);
  merge_result res;
  res.config.method = merge_method::simple_average;
  res.delta = scaled_sum(tvs, 1.0, true);
  return res;
}

merge_result task_arithmetic(std::span<const task_vector> tvs, double alpha) {
  require_inputs(tvs);
  if (!std::isfinite(alpha)) throw argument_error("alpha must be finite");
  merge_result res;
  res.config.method = merge_method::task_arithmetic;
  res.config.alpha = alpha;
  res.delta = scaled_sum(tvs, alpha, false);
  return res;
}

std::size_t ties_keep_count(double k_percent, std::size_t n) {
  if (!(k_percent > 0.0 && k_percent <= 100.0)) throw argument_error("k must lie in (0, 100]");
  const double x = k_percent * static_cast<double>(n) / 100.0;
  const double nearest = std::round(x);
  const double kept = std::abs(x - nearest) <= 1e-9 * std::max(1.0, x) ? nearest : std::ceil(x);
  return std::min(n, static_cast<std::size_t>(kept));
}

std::vector<bool> ties_keep_mask(const task_vector &tv, double k_percent) {
  std::vector<double> mag;
  mag.reserve(tv.weights.total_elements());
  for (const auto &[_, t] : tv.weights.entries) {
    for (double v : t.values) mag.push_back(std::abs(v));
  }
  const std::size_t n = mag.size();
  const std::size_t keep = ties_keep_count(k_percent, n);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto before = [&](std::size_t a, std::size_t b) {
    return mag[a] != mag[b] ? mag[a] > mag[b] : a < b;
  };
  if (keep < n) std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(), before);

  std::vector<bool> mask(n, false);
  for (std::size_t i = 0; i < keep; ++i) mask[order[i]] = true;
  return mask;
}

merge_result ties_merge(std::span<const task_vector> tvs, double k_percent) {
  require_inputs(tvs);
  std::vector<std::vector<bool>> masks(tvs.size());
  parallel_for(tvs.size(), [&](std::size_t i) { masks[i] = ties_keep_mask(tvs[i], k_percent); });

  merge_result res;
  res.config.method = merge_method::ties;
  res.config.k_percent = k_percent;
  res.delta = empty_delta(tvs);

  std::size_t base = 0;
  for (auto &[name, out] : res.delta.weights.entries) {
    for (std::size_t e = 0; e < out.values.size(); ++e) {
      double pos = 0.0, neg = 0.0;
      for (std::size_t i = 0; i < tvs.size(); ++i) {
        if (!masks[i][base + e]) continue;
        const double v = tvs[i].weights.entries.at(name).values[e];
        if (v > 0.0) pos += v;
        if (v < 0.0) neg -= v;
      }
      if (pos == 0.0 && neg == 0.0) continue;
      const bool positive = pos >= neg;  // exact tie elects +
      double sum = 0.0;
      std::size_t count = 0;
      for (std::size_t i = 0; i < tvs.size(); ++i) {
        if (!masks[i][base + e]) continue;
        const double v = tvs[i].weights.entries.at(name).values[e];
        if ((positive && v > 0.0) || (!positive && v < 0.0)) {
          sum += v;
          ++count;
        }
      }
      out.values[e] = sum / static_cast<double>(count);
    }
    base += out.values.size();
  }
  return res;
}

task_vector dare_sparsify(const task_vector &delta, double p, std::uint64_t seed) {
  if (!(p >= 0.0 && p < 1.0)) throw argument_error("DARE drop probability must lie in [0, 1)");
  task_vector out = delta;
  const double keep_scale = 1.0 - p;
  for (auto &[name, t] : out.weights.entries) {
    const std::uint64_t key = random::derive_key(seed, name);
    for (std::size_t i = 0; i < t.values.size(); ++i) {
      if (random::uniform(key, i) < p) {
        t.values[i] = 0.0;
      } else {
        t.values[i] /= keep_scale;
      }
    }
  }
  return out;
}

merge_result merge_task_vectors(std::span<const task_vector> tvs, const merge_config &config) {
  config.validate();
  std::vector<task_vector> sparsified;
  if (config.dare_p) {
    sparsified.resize(tvs.size());
    parallel_for(tvs.size(), [&](std::size_t i) {
      sparsified[i] = dare_sparsify(tvs[i], *config.dare_p, random::bits(config.seed, i));
    });
    tvs = sparsified;
  }

  merge_result res;
  switch (config.method) {
    case merge_method::star: res = star_merge(tvs, config.eta); break;
    case merge_method::simple_average: res = simple_average(tvs); break;
    case merge_method::task_arithmetic: res = task_arithmetic(tvs, *config.alpha); break;
    case merge_method::ties: res = ties_merge(tvs, config.k_percent); break;
  }
  res.config = config;
  return res;
}

namespace {

merge_output finish(const tensor_map &pretrained, std::vector<task_vector> tvs, const merge_config &config) {
  merge_output out;
  out.details = merge_task_vectors(tvs, config);
  out.model = apply_delta(pretrained, out.details.delta);
  out.model.model_id = "merged";
  out.model.metadata["merge_method"] = std::string(method_name(config.method));
  return out;
}

}  // namespace

merge_output merge(const tensor_map &pretrained, std::span<const tensor_map> finetuned,
                   const merge_config &config) {
  config.validate();
  if (finetuned.empty()) throw argument_error("merging needs at least one fine-tuned model");
  std::vector<task_vector> tvs;
  tvs.reserve(finetuned.size());
  for (const auto &ft : finetuned) tvs.push_back(compute_task_vector(ft, pretrained));
  return finish(pretrained, std::move(tvs), config);
}

merge_output merge(const tensor_map &pretrained, std::span<const lora_adapter> adapters,
                   const merge_config &config) {
  config.validate();
  if (adapters.empty()) throw argument_error("merging needs at least one LoRA adapter");
  std::vector<std::string> targets;
  for (const auto &p : adapters[0].pairs) targets.push_back(p.target_name);
  std::sort(targets.begin(), targets.end());
  std::vector<task_vector> tvs;
  tvs.reserve(adapters.size());
  for (const auto &a : adapters) {
    std::vector<std::string> mine;
    for (const auto &p : a.pairs) mine.push_back(p.target_name);
    std::sort(mine.begin(), mine.end());
    if (mine != targets) {
      throw shape_error("LoRA adapter '" + a.model_id + "' targets a different layer set than '" +
                        adapters[0].model_id + "'");
    }
    tvs.push_back(lora_task_vector(a, pretrained));
  }
  return finish(pretrained, std::move(tvs), config);
}

}  // namespace specmerge
