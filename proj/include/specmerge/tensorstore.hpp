#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace specmerge {

using matrix = Eigen::MatrixXd;
using vector = Eigen::VectorXd;

enum class dtype { f32, f64 };

std::size_t dtype_size(dtype t) noexcept;
std::string_view dtype_name(dtype t) noexcept;

/// Role of a collection in the merge pipeline. Stored in the header metadata.
enum class role { pretrained, finetuned, delta, merged };

std::string_view role_name(role r) noexcept;

/// Dense row-major tensor. Values are always held in fp64; `type` records the
/// storage dtype so that saving reproduces the original width.
struct tensor {
  dtype type = dtype::f64;
  std::vector<std::int64_t> shape;
  std::vector<double> values;

  std::size_t numel() const noexcept { return values.size(); }
  bool is_matrix() const noexcept { return shape.size() == 2; }

  /// Copy into a column-major Eigen matrix. Requires a 2-D tensor.
  matrix to_matrix() const;
  static tensor from_matrix(const matrix &m, dtype type = dtype::f64);
  static tensor zeros_like(const tensor &t);
};

/// Named collection of tensors for one model (or delta). Keys iterate in
/// lexicographic order, which fixes the flat element order used by TIES.
struct tensor_map {
  std::map<std::string, tensor> entries;
  std::string model_id;
  role kind = role::pretrained;
  /// Extra string metadata carried in the header (e.g. LoRA rank/alpha).
  std::map<std::string, std::string> metadata;

  std::size_t total_elements() const noexcept;
};

/// delta = finetuned - pretrained, with the ids of both ends.
struct task_vector {
  tensor_map weights;
  std::string base_id;
};

struct lora_factor_pair {
  matrix a_factor;  // rank x n
  matrix b_factor;  // m x rank
  int rank = 0;
  double alpha = 0.0;
  std::string target_name;
};

/// All factor pairs of one LoRA adapter file.
struct lora_adapter {
  std::string model_id;
  std::vector<lora_factor_pair> pairs;
};

// Interchange format: u64 LE header length, JSON header, raw LE data block.

std::vector<std::byte> serialize_checkpoint(const tensor_map &map);
tensor_map parse_checkpoint(std::span<const std::byte> bytes);

tensor_map load_checkpoint(const std::filesystem::path &path);
void save_checkpoint(const tensor_map &map, const std::filesystem::path &path);

/// Throws shape_error unless both maps have identical keys and shapes.
void require_same_layout(const tensor_map &lhs, const tensor_map &rhs);

task_vector compute_task_vector(const tensor_map &finetuned, const tensor_map &pretrained);
tensor_map apply_delta(const tensor_map &pretrained, const task_vector &delta);

/// (alpha / rank) * B * A
matrix materialize_lora(const lora_factor_pair &pair);

/// Factor tensors are stored as "<target>.lora_a" (rank x n) and
/// "<target>.lora_b" (m x rank); alpha comes from the "lora_alpha" metadata
/// key and, if present, "lora_rank" must agree with every pair.
lora_adapter lora_adapter_from_map(const tensor_map &map);
lora_adapter load_lora_adapter(const std::filesystem::path &path);

/// Dense task vector for an adapter. Pretrained layers without an adapter get
/// a zero delta so the result lines up with `pretrained`.
task_vector lora_task_vector(const lora_adapter &adapter, const tensor_map &pretrained);

}  // namespace specmerge
