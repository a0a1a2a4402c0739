#include "specmerge/tensorstore.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "specmerge/error.hpp"

namespace specmerge {

static_assert(std::endian::native == std::endian::little,
              "the interchange format is little-endian; big-endian hosts are not supported");

namespace {

using json = nlohmann::json;
using row_major = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr const char *metadata_key = "__metadata__";
constexpr const char *lora_a_suffix = ".lora_a";
constexpr const char *lora_b_suffix = ".lora_b";

std::string shape_string(const std::vector<std::int64_t> &shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::string join(const std::vector<std::string> &names) {
  std::string out;
  for (const auto &n : names) {
    if (!out.empty()) out += ", ";
    out += "'" + n + "'";
  }
  return out;
}

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

role parse_role(const std::string &s, std::uint64_t offset) {
  if (s == "pretrained") return role::pretrained;
  if (s == "finetuned") return role::finetuned;
  if (s == "delta") return role::delta;
  if (s == "merged") return role::merged;
  throw format_error("unknown role '" + s + "' in header metadata", offset);
}

std::uint64_t checked_numel(const std::vector<std::int64_t> &shape, const std::string &name,
                            std::uint64_t offset) {
  std::uint64_t n = 1;
  for (auto d : shape) {
    if (d < 1) throw format_error("tensor '" + name + "' has a dimension < 1", offset);
    if (n > std::numeric_limits<std::uint64_t>::max() / 16 / static_cast<std::uint64_t>(d)) {
      throw format_error("tensor '" + name + "' is too large", offset);
    }
    n *= static_cast<std::uint64_t>(d);
  }
  return n;
}

void check_finite(const tensor &t, const std::string &name) {
  for (std::size_t i = 0; i < t.values.size(); ++i) {
    const double v = t.values[i];
    bool ok = std::isfinite(v);
    if (ok && t.type == dtype::f32) ok = std::isfinite(static_cast<float>(v));
    if (!ok) {
      throw validation_error("tensor '" + name + "' has a non-finite element at flat index " +
                             std::to_string(i));
    }
  }
}

void check_tensor_shape(const tensor &t, const std::string &name) {
  if (t.shape.empty()) throw validation_error("tensor '" + name + "' has an empty shape");
  std::uint64_t n = 1;
  for (auto d : t.shape) {
    if (d < 1) throw validation_error("tensor '" + name + "' has a dimension < 1");
    n *= static_cast<std::uint64_t>(d);
  }
  if (n != t.values.size()) {
    throw validation_error("tensor '" + name + "' holds " + std::to_string(t.values.size()) +
                           " values but shape " + shape_string(t.shape) + " needs " +
                           std::to_string(n));
  }
}

std::uint64_t key_offset(const std::string &header, const std::string &key) {
  const auto pos = header.find(json(key).dump());
  return 8 + (pos == std::string::npos ? 0 : pos);
}

}  // namespace

std::size_t dtype_size(dtype t) noexcept { return t == dtype::f32 ? 4 : 8; }

std::string_view dtype_name(dtype t) noexcept { return t == dtype::f32 ? "F32" : "F64"; }

std::string_view role_name(role r) noexcept {
  switch (r) {
    case role::pretrained: return "pretrained";
    case role::finetuned: return "finetuned";
    case role::delta: return "delta";
    case role::merged: return "merged";
  }
  return "pretrained";
}

matrix tensor::to_matrix() const {
  if (!is_matrix()) throw shape_error("to_matrix on a tensor of shape " + shape_string(shape));
  return Eigen::Map<const row_major>(values.data(), shape[0], shape[1]);
}

tensor tensor::from_matrix(const matrix &m, dtype type) {
  tensor t;
  t.type = type;
  t.shape = {m.rows(), m.cols()};
  t.values.resize(static_cast<std::size_t>(m.size()));
  Eigen::Map<row_major>(t.values.data(), m.rows(), m.cols()) = m;
  return t;
}

tensor tensor::zeros_like(const tensor &t) {
  tensor z;
  z.type = t.type;
  z.shape = t.shape;
  z.values.assign(t.values.size(), 0.0);
  return z;
}

std::size_t tensor_map::total_elements() const noexcept {
  std::size_t n = 0;
  for (const auto &[_, t] : entries) n += t.numel();
  return n;
}

std::vector<std::byte> serialize_checkpoint(const tensor_map &map) {
  json header = json::object();
  json meta = json::object();
  for (const auto &[k, v] : map.metadata) meta[k] = v;
  meta["model_id"] = map.model_id;
  meta["role"] = std::string(role_name(map.kind));
  header[metadata_key] = std::move(meta);

  std::uint64_t offset = 0;
  for (const auto &[name, t] : map.entries) {
    if (name == metadata_key) throw validation_error("tensor name '__metadata__' is reserved");
    check_tensor_shape(t, name);
    check_finite(t, name);
    const std::uint64_t len = t.numel() * dtype_size(t.type);
    header[name] = {{"dtype", dtype_name(t.type)},
                    {"shape", t.shape},
                    {"data_offsets", {offset, offset + len}}};
    offset += len;
  }

  std::string text = header.dump();
  // Pad with spaces so the data block starts 8-byte aligned.
  text.append((8 - text.size() % 8) % 8, ' ');

  std::vector<std::byte> out(8 + text.size() + offset);
  const std::uint64_t n = text.size();
  std::memcpy(out.data(), &n, 8);
  std::memcpy(out.data() + 8, text.data(), text.size());

  std::byte *data = out.data() + 8 + text.size();
  for (const auto &[_, t] : map.entries) {
    if (t.type == dtype::f64) {
      std::memcpy(data, t.values.data(), t.numel() * 8);
      data += t.numel() * 8;
    } else {
      for (double v : t.values) {
        const float f = static_cast<float>(v);
        std::memcpy(data, &f, 4);
        data += 4;
      }
    }
  }
  return out;
}

tensor_map parse_checkpoint(std::span<const std::byte> bytes) {
  if (bytes.size() < 8) throw format_error("file is shorter than the 8-byte header length", 0);
  std::uint64_t n = 0;
  std::memcpy(&n, bytes.data(), 8);
  if (n > bytes.size() - 8) {
    throw format_error("header length " + std::to_string(n) + " exceeds the " +
                           std::to_string(bytes.size() - 8) + " bytes after the prefix",
                       0);
  }
  const std::string text(reinterpret_cast<const char *>(bytes.data()) + 8, n);

  json header;
  std::set<std::string> seen;
  std::string duplicate;
  const json::parser_callback_t unique_keys = [&](int depth, json::parse_event_t event, json &parsed) {
    if (depth == 1 && event == json::parse_event_t::key && !seen.insert(parsed.get<std::string>()).second) {
      duplicate = parsed.get<std::string>();
    }
    return true;
  };
  try {
    header = json::parse(text, unique_keys);
  } catch (const json::parse_error &e) {
    throw format_error(std::string("header is not valid JSON: ") + e.what(),
                       8 + (e.byte > 0 ? e.byte - 1 : 0));
  }
  if (!header.is_object()) throw format_error("header is not a JSON object", 8);
  if (!duplicate.empty()) {
    throw format_error("duplicate tensor name '" + duplicate + "'", key_offset(text, duplicate));
  }

  tensor_map map;
  struct pending {
    std::string name;
    std::uint64_t begin, end;
  };
  std::vector<pending> ranges;

  for (const auto &[name, info] : header.items()) {
    const std::uint64_t at = key_offset(text, name);
    if (name == metadata_key) {
      if (!info.is_object()) throw format_error("__metadata__ must be an object", at);
      for (const auto &[k, v] : info.items()) {
        if (!v.is_string()) throw format_error("metadata value for '" + k + "' is not a string", at);
        if (k == "model_id") {
          map.model_id = v.get<std::string>();
        } else if (k == "role") {
          map.kind = parse_role(v.get<std::string>(), at);
        } else {
          map.metadata[k] = v.get<std::string>();
        }
      }
      continue;
    }
    if (!info.is_object()) throw format_error("entry '" + name + "' is not an object", at);

    const auto dt = info.find("dtype");
    const auto sh = info.find("shape");
    const auto off = info.find("data_offsets");
    if (dt == info.end() || sh == info.end() || off == info.end()) {
      throw format_error("entry '" + name + "' needs dtype, shape and data_offsets", at);
    }
    tensor t;
    if (!dt->is_string()) throw format_error("dtype of '" + name + "' is not a string", at);
    if (*dt == "F32") {
      t.type = dtype::f32;
    } else if (*dt == "F64") {
      t.type = dtype::f64;
    } else {
      throw format_error("unsupported dtype " + dt->dump() + " for '" + name + "'", at);
    }
    if (!sh->is_array() || sh->empty()) {
      throw format_error("shape of '" + name + "' must be a non-empty array", at);
    }
    for (const auto &d : *sh) {
      if (!d.is_number_integer()) throw format_error("shape of '" + name + "' has a non-integer", at);
      t.shape.push_back(d.get<std::int64_t>());
    }
    if (!off->is_array() || off->size() != 2 || !(*off)[0].is_number_unsigned() ||
        !(*off)[1].is_number_unsigned()) {
      throw format_error("data_offsets of '" + name + "' must be two unsigned integers", at);
    }
    const auto begin = (*off)[0].get<std::uint64_t>();
    const auto end = (*off)[1].get<std::uint64_t>();
    const std::uint64_t numel = checked_numel(t.shape, name, at);
    if (end < begin || end - begin != numel * dtype_size(t.type)) {
      throw format_error("data_offsets of '" + name + "' span " + std::to_string(end - begin) +
                             " bytes, shape and dtype need " +
                             std::to_string(numel * dtype_size(t.type)),
                         at);
    }
    t.values.resize(numel);
    ranges.push_back({name, begin, end});
    map.entries.emplace(name, std::move(t));
  }

  std::sort(ranges.begin(), ranges.end(),
            [](const pending &a, const pending &b) { return a.begin < b.begin; });
  std::uint64_t cursor = 0;
  for (const auto &r : ranges) {
    if (r.begin != cursor) {
      throw format_error("data block of '" + r.name + "' is not contiguous with its predecessor",
                         key_offset(text, r.name));
    }
    cursor = r.end;
  }

  const std::uint64_t available = bytes.size() - 8 - n;
  if (available < cursor) {
    throw io_error("truncated data block: header declares " + std::to_string(cursor) +
                   " bytes but only " + std::to_string(available) + " are present");
  }
  if (available > cursor) {
    throw format_error(std::to_string(available - cursor) + " trailing bytes after the data block",
                       8 + n + cursor);
  }

  const std::byte *data = bytes.data() + 8 + n;
  for (const auto &r : ranges) {
    tensor &t = map.entries.at(r.name);
    const std::byte *p = data + r.begin;
    if (t.type == dtype::f64) {
      std::memcpy(t.values.data(), p, t.numel() * 8);
    } else {
      for (std::size_t i = 0; i < t.numel(); ++i) {
        float f;
        std::memcpy(&f, p + 4 * i, 4);
        t.values[i] = f;
      }
    }
    check_finite(t, r.name);
  }
  return map;
}

tensor_map load_checkpoint(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open '" + path.string() + "' for reading");
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw io_error("read failure on '" + path.string() + "'");
  return parse_checkpoint(std::as_bytes(std::span(raw)));
}

void save_checkpoint(const tensor_map &map, const std::filesystem::path &path) {
  const auto bytes = serialize_checkpoint(map);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw io_error("write failure on '" + path.string() + "'");
}

void require_same_layout(const tensor_map &lhs, const tensor_map &rhs) {
  std::vector<std::string> only_lhs, only_rhs;
  for (const auto &[k, _] : lhs.entries) {
    if (!rhs.entries.contains(k)) only_lhs.push_back(k);
  }
  for (const auto &[k, _] : rhs.entries) {
    if (!lhs.entries.contains(k)) only_rhs.push_back(k);
  }
  if (!only_lhs.empty() || !only_rhs.empty()) {
    std::string msg = "key sets differ";
    if (!only_lhs.empty()) msg += "; only in '" + lhs.model_id + "': " + join(only_lhs);
    if (!only_rhs.empty()) msg += "; only in '" + rhs.model_id + "': " + join(only_rhs);
    throw shape_error(msg);
  }
  for (const auto &[k, t] : lhs.entries) {
    const auto &other = rhs.entries.at(k);
    if (t.shape != other.shape) {
      throw shape_error("shape mismatch for '" + k + "': " + shape_string(t.shape) + " vs " +
                        shape_string(other.shape));
    }
  }
}

task_vector compute_task_vector(const tensor_map &finetuned, const tensor_map &pretrained) {
  require_same_layout(finetuned, pretrained);
  task_vector out;
  out.base_id = pretrained.model_id;
  out.weights.model_id = finetuned.model_id;
  out.weights.kind = role::delta;
  for (const auto &[name, ft] : finetuned.entries) {
    const auto &pre = pretrained.entries.at(name);
    tensor d = tensor::zeros_like(ft);
    for (std::size_t i = 0; i < d.values.size(); ++i) d.values[i] = ft.values[i] - pre.values[i];
    out.weights.entries.emplace(name, std::move(d));
  }
  return out;
}

tensor_map apply_delta(const tensor_map &pretrained, const task_vector &delta) {
  require_same_layout(pretrained, delta.weights);
  tensor_map out;
  out.model_id = delta.weights.model_id;
  out.kind = role::merged;
  for (const auto &[name, pre] : pretrained.entries) {
    const auto &d = delta.weights.entries.at(name);
    tensor t = tensor::zeros_like(pre);
    for (std::size_t i = 0; i < t.values.size(); ++i) t.values[i] = pre.values[i] + d.values[i];
    out.entries.emplace(name, std::move(t));
  }
  return out;
}

matrix materialize_lora(const lora_factor_pair &pair) {
  const auto &a = pair.a_factor;
  const auto &b = pair.b_factor;
  if (pair.rank < 1) throw argument_error("LoRA rank must be positive for '" + pair.target_name + "'");
  if (!(pair.alpha > 0.0) || !std::isfinite(pair.alpha)) {
    throw argument_error("LoRA alpha must be a positive finite scalar for '" + pair.target_name + "'");
  }
  if (a.rows() != pair.rank || b.cols() != pair.rank) {
    throw shape_error("LoRA factors for '" + pair.target_name + "' disagree with rank " +
                      std::to_string(pair.rank) + ": A is " + std::to_string(a.rows()) + "x" +
                      std::to_string(a.cols()) + ", B is " + std::to_string(b.rows()) + "x" +
                      std::to_string(b.cols()));
  }
  if (pair.rank > std::min(b.rows(), a.cols())) {
    throw shape_error("LoRA rank " + std::to_string(pair.rank) + " exceeds min(m, n) for '" +
                      pair.target_name + "'");
  }
  return (pair.alpha / pair.rank) * (b * a);
}

lora_adapter lora_adapter_from_map(const tensor_map &map) {
  const auto alpha_it = map.metadata.find("lora_alpha");
  if (alpha_it == map.metadata.end()) {
    throw validation_error("LoRA file '" + map.model_id + "' has no lora_alpha metadata");
  }
  const auto parse_number = [&](const std::string &key, const std::string &s) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
      throw validation_error("metadata '" + key + "' is not a number: '" + s + "'");
    }
    return v;
  };
  const double alpha = parse_number("lora_alpha", alpha_it->second);
  std::optional<int> declared_rank;
  if (const auto it = map.metadata.find("lora_rank"); it != map.metadata.end()) {
    declared_rank = static_cast<int>(parse_number("lora_rank", it->second));
  }

  lora_adapter adapter;
  adapter.model_id = map.model_id;
  for (const auto &[name, t] : map.entries) {
    if (ends_with(name, lora_b_suffix)) {
      const auto target = name.substr(0, name.size() - std::strlen(lora_b_suffix));
      if (!map.entries.contains(target + lora_a_suffix)) {
        throw validation_error("LoRA factor '" + name + "' has no matching A factor");
      }
      continue;
    }
    if (!ends_with(name, lora_a_suffix)) {
      throw validation_error("unexpected tensor '" + name + "' in LoRA file");
    }
    const auto target = name.substr(0, name.size() - std::strlen(lora_a_suffix));
    const auto b_it = map.entries.find(target + lora_b_suffix);
    if (b_it == map.entries.end()) {
      throw validation_error("LoRA factor '" + name + "' has no matching B factor");
    }
    if (!t.is_matrix() || !b_it->second.is_matrix()) {
      throw shape_error("LoRA factors for '" + target + "' must be 2-D");
    }
    lora_factor_pair pair;
    pair.a_factor = t.to_matrix();
    pair.b_factor = b_it->second.to_matrix();
    pair.rank = static_cast<int>(pair.a_factor.rows());
    pair.alpha = alpha;
    pair.target_name = target;
    if (declared_rank && *declared_rank != pair.rank) {
      throw shape_error("LoRA factor '" + name + "' has rank " + std::to_string(pair.rank) +
                        " but lora_rank metadata says " + std::to_string(*declared_rank));
    }
    adapter.pairs.push_back(std::move(pair));
  }
  return adapter;
}

lora_adapter load_lora_adapter(const std::filesystem::path &path) {
  return lora_adapter_from_map(load_checkpoint(path));
}

task_vector lora_task_vector(const lora_adapter &adapter, const tensor_map &pretrained) {
  std::map<std::string, const lora_factor_pair *> by_target;
  for (const auto &p : adapter.pairs) by_target[p.target_name] = &p;

  std::vector<std::string> unknown;
  for (const auto &[target, _] : by_target) {
    if (!pretrained.entries.contains(target)) unknown.push_back(target);
  }
  if (!unknown.empty()) {
    throw shape_error("LoRA adapter '" + adapter.model_id + "' targets layers missing from '" +
                      pretrained.model_id + "': " + join(unknown));
  }

  task_vector out;
  out.base_id = pretrained.model_id;
  out.weights.model_id = adapter.model_id;
  out.weights.kind = role::delta;
  for (const auto &[name, pre] : pretrained.entries) {
    const auto it = by_target.find(name);
    if (it == by_target.end()) {
      out.weights.entries.emplace(name, tensor::zeros_like(pre));
      continue;
    }
    const matrix delta = materialize_lora(*it->second);
    if (!pre.is_matrix() || delta.rows() != pre.shape[0] || delta.cols() != pre.shape[1]) {
      throw shape_error("LoRA delta for '" + name + "' is " + std::to_string(delta.rows()) + "x" +
                        std::to_string(delta.cols()) + " but the pretrained tensor has shape " +
                        shape_string(pre.shape));
    }
    out.weights.entries.emplace(name, tensor::from_matrix(delta, pre.type));
  }
  return out;
}

}  // namespace specmerge
