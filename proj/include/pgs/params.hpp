#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pgs/config.hpp"
#include "pgs/core.hpp"

namespace pgs {

// A named flat parameter array with its gradient accumulator.
struct Param {
  std::string name;
  std::vector<int> shape;
  std::vector<real> value;
  std::vector<real> grad;
  bool trainable = true;

  int64_t size() const { return static_cast<int64_t>(value.size()); }

  MatMap mat(int rows, int cols) {
    if (static_cast<int64_t>(rows) * cols != size())
      throw ShapeError(cat("param ", name, ": cannot view ", size(), " values as ", rows, "x", cols));
    return MatMap(value.data(), rows, cols);
  }
  ConstMatMap mat(int rows, int cols) const {
    if (static_cast<int64_t>(rows) * cols != size())
      throw ShapeError(cat("param ", name, ": cannot view ", size(), " values as ", rows, "x", cols));
    return ConstMatMap(value.data(), rows, cols);
  }
  MatMap grad_mat(int rows, int cols) {
    if (static_cast<int64_t>(rows) * cols != size())
      throw ShapeError(cat("param ", name, ": cannot view grad as ", rows, "x", cols));
    return MatMap(grad.data(), rows, cols);
  }
  VecMap vec() { return VecMap(value.data(), size()); }
  ConstVecMap vec() const { return ConstVecMap(value.data(), size()); }
  VecMap grad_vec() { return VecMap(grad.data(), size()); }
};

namespace detail {
inline int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("parameter shapes must be positive");
    n *= d;
  }
  return n;
}
}  // namespace detail

// Registry of all learnable arrays, keyed by hierarchical names such as
// "encoder.conv1.weight". Iteration order is lexicographic, which fixes the
// serialization layout and the optimizer update order.
class ParamStore {
 public:
  Param& add(const std::string& name, std::vector<int> shape, bool trainable = true) {
    if (params_.count(name)) throw ParamError(cat("duplicate parameter '", name, "'"));
    Param p;
    p.name = name;
    p.shape = std::move(shape);
    int64_t n = detail::shape_numel(p.shape);
    p.value.assign(static_cast<size_t>(n), 0.0);
    p.grad.assign(static_cast<size_t>(n), 0.0);
    p.trainable = trainable;
    auto [it, ok] = params_.emplace(name, std::move(p));
    (void)ok;
    return it->second;
  }

  bool has(const std::string& name) const { return params_.count(name) != 0; }

  Param& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ParamError(cat("unknown parameter '", name, "'"));
    return it->second;
  }
  const Param& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ParamError(cat("unknown parameter '", name, "'"));
    return it->second;
  }

  void zero_grad() {
    for (auto& [name, p] : params_) std::fill(p.grad.begin(), p.grad.end(), 0.0);
  }

  int64_t total_size() const {
    int64_t n = 0;
    for (const auto& [name, p] : params_) n += p.size();
    return n;
  }

  template <typename Fn>
  void for_each(Fn&& fn) {
    for (auto& [name, p] : params_) fn(p);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    for (const auto& [name, p] : params_) fn(p);
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [name, p] : params_) out.push_back(name);
    return out;
  }

 private:
  std::map<std::string, Param> params_;
};

// Adam with decoupled weight decay: the decay term scales the parameter
// directly by lr*wd and never enters the moment estimates.
class Adam {
 public:
  Adam(real lr, real weight_decay, real beta1 = 0.9, real beta2 = 0.999, real eps = 1e-8)
      : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamStore& store) {
    ++t_;
    const real bc1 = 1.0 - std::pow(beta1_, static_cast<real>(t_));
    const real bc2 = 1.0 - std::pow(beta2_, static_cast<real>(t_));
    store.for_each([&](Param& p) {
      if (!p.trainable) return;
      auto& m = m_[p.name];
      auto& v = v_[p.name];
      if (m.empty()) {
        m.assign(p.value.size(), 0.0);
        v.assign(p.value.size(), 0.0);
      }
      for (size_t i = 0; i < p.value.size(); ++i) {
        const real g = p.grad[i];
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
        const real mhat = m[i] / bc1;
        const real vhat = v[i] / bc2;
        p.value[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        p.value[i] -= lr_ * wd_ * p.value[i];
      }
    });
  }

  int64_t steps_taken() const { return t_; }

 private:
  real lr_, wd_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::map<std::string, std::vector<real>> m_, v_;
};

// ---------------------------------------------------------------------------
// Checkpoint container
//
//   bytes 0..7    magic "PGSARCH1"
//   bytes 8..15   uint64 little-endian header length L
//   bytes 16..    L bytes of JSON: {"version": "pgs-ckpt-v1",
//                                   "config": <key=value text>,
//                                   "arrays": [{"name","shape","offset","size"}...]}
//   then          raw little-endian float64 payload, offsets in doubles

inline constexpr char kCheckpointMagic[8] = {'P', 'G', 'S', 'A', 'R', 'C', 'H', '1'};
inline constexpr const char* kCheckpointVersion = "pgs-ckpt-v1";

namespace detail {
inline void put_u64_le(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline uint64_t get_u64_le(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (is.gcount() != 8) throw ParseError("checkpoint truncated in header length");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

// Doubles are written byte-for-byte; this code targets little-endian IEEE-754
// hosts, which covers every platform the build supports.
static_assert(sizeof(real) == 8, "checkpoint format assumes 8-byte real");
}  // namespace detail

inline void save_checkpoint(const std::string& path, const Config& cfg, const ParamStore& store) {
  nlohmann::json header;
  header["version"] = kCheckpointVersion;
  header["config"] = config_to_text(cfg);
  nlohmann::json arrays = nlohmann::json::array();
  int64_t offset = 0;
  store.for_each([&](const Param& p) {
    nlohmann::json a;
    a["name"] = p.name;
    a["shape"] = p.shape;
    a["offset"] = offset;
    a["size"] = p.size();
    arrays.push_back(a);
    offset += p.size();
  });
  header["arrays"] = arrays;
  const std::string header_str = header.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError(cat("cannot open '", path, "' for writing"));
  os.write(kCheckpointMagic, 8);
  detail::put_u64_le(os, header_str.size());
  os.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  store.for_each([&](const Param& p) {
    os.write(reinterpret_cast<const char*>(p.value.data()),
             static_cast<std::streamsize>(p.value.size() * sizeof(real)));
  });
  os.flush();
  if (!os) throw DataError(cat("write to '", path, "' failed"));
}

// Reads the header and returns the stored config without touching parameters.
inline Config peek_checkpoint_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError(cat("cannot open checkpoint '", path, "'"));
  char magic[8];
  is.read(magic, 8);
  if (is.gcount() != 8 || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw ParseError(cat("'", path, "' is not a PGSARCH1 checkpoint"));
  const uint64_t header_len = detail::get_u64_le(is);
  if (header_len > (1ull << 26)) throw ParseError("checkpoint header length is implausible");
  std::string header_str(header_len, '\0');
  is.read(header_str.data(), static_cast<std::streamsize>(header_len));
  if (static_cast<uint64_t>(is.gcount()) != header_len)
    throw ParseError("checkpoint truncated in JSON header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_str);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(cat("checkpoint header is not valid JSON: ", e.what()));
  }
  if (!header.contains("version") || header["version"] != kCheckpointVersion)
    throw IncompatibilityError(cat("unsupported checkpoint version in '", path, "'"));
  return config_from_text(header["config"].get<std::string>());
}

// Loads values into an already-constructed store whose arrays must match the
// directory exactly (same names, same shapes).
inline Config load_checkpoint(const std::string& path, ParamStore& store) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError(cat("cannot open checkpoint '", path, "'"));
  char magic[8];
  is.read(magic, 8);
  if (is.gcount() != 8 || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw ParseError(cat("'", path, "' is not a PGSARCH1 checkpoint"));
  const uint64_t header_len = detail::get_u64_le(is);
  if (header_len > (1ull << 26)) throw ParseError("checkpoint header length is implausible");
  std::string header_str(header_len, '\0');
  is.read(header_str.data(), static_cast<std::streamsize>(header_len));
  if (static_cast<uint64_t>(is.gcount()) != header_len)
    throw ParseError("checkpoint truncated in JSON header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_str);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(cat("checkpoint header is not valid JSON: ", e.what()));
  }
  if (!header.contains("version") || header["version"] != kCheckpointVersion)
    throw IncompatibilityError(cat("unsupported checkpoint version in '", path, "'"));
  const Config cfg = config_from_text(header["config"].get<std::string>());

  size_t directory_entries = 0;
  for (const auto& a : header["arrays"]) {
    const std::string name = a["name"].get<std::string>();
    const std::vector<int> shape = a["shape"].get<std::vector<int>>();
    const int64_t size = a["size"].get<int64_t>();
    if (!store.has(name))
      throw IncompatibilityError(cat("checkpoint array '", name, "' has no counterpart in this model"));
    Param& p = store.at(name);
    if (p.shape != shape) {
      std::string want = "[", got = "[";
      for (size_t i = 0; i < p.shape.size(); ++i) want += (i ? "," : "") + std::to_string(p.shape[i]);
      for (size_t i = 0; i < shape.size(); ++i) got += (i ? "," : "") + std::to_string(shape[i]);
      throw IncompatibilityError(
          cat("shape mismatch for '", name, "': model has ", want, "], checkpoint has ", got, "]"));
    }
    if (size != p.size()) throw IncompatibilityError(cat("size mismatch for '", name, "'"));
    is.read(reinterpret_cast<char*>(p.value.data()),
            static_cast<std::streamsize>(p.value.size() * sizeof(real)));
    if (static_cast<uint64_t>(is.gcount()) != p.value.size() * sizeof(real))
      throw ParseError(cat("checkpoint truncated in payload of '", name, "'"));
    ++directory_entries;
  }
  size_t model_params = 0;
  store.for_each([&](const Param&) { ++model_params; });
  if (directory_entries != model_params)
    throw IncompatibilityError(cat("checkpoint holds ", directory_entries,
                                   " arrays but the model expects ", model_params));
  return cfg;
}

}  // namespace pgs
