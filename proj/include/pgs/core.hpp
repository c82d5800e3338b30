#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace pgs {

using real = double;

// Node sets are row-major so each node feature is a contiguous row.
using NodeMatrix = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using NodeFeature = Eigen::VectorXd;

using MatMap = Eigen::Map<Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap = Eigen::Map<const Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

// ---------------------------------------------------------------------------
// Errors

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error { using Error::Error; };          // mismatched tensor/parameter shapes
struct ParamError : Error { using Error::Error; };          // invalid user-supplied value (k too large, ...)
struct ConfigError : Error { using Error::Error; };         // bad or missing configuration
struct DataError : Error { using Error::Error; };           // dataset / numeric-state problems
struct ParseError : Error { using Error::Error; };          // unreadable file contents
struct IncompatibilityError : Error { using Error::Error; };// checkpoint vs config/flags
struct ContractError : Error { using Error::Error; };       // caller broke a documented precondition

namespace detail {
inline void format_into(std::ostringstream&) {}
template <typename T, typename... Rest>
void format_into(std::ostringstream& os, T&& head, Rest&&... rest) {
  os << head;
  format_into(os, std::forward<Rest>(rest)...);
}
}  // namespace detail

template <typename... Args>
std::string cat(Args&&... args) {
  std::ostringstream os;
  detail::format_into(os, std::forward<Args>(args)...);
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor: dense (channels, height, width) array, x fastest, then y, then channel.

struct Tensor {
  int c = 0, h = 0, w = 0;
  std::vector<real> v;

  Tensor() = default;
  Tensor(int c_, int h_, int w_) : c(c_), h(h_), w(w_) {
    if (c_ < 1 || h_ < 1 || w_ < 1)
      throw ShapeError(cat("tensor dims must be positive, got (", c_, ",", h_, ",", w_, ")"));
    v.assign(static_cast<size_t>(c_) * h_ * w_, 0.0);
  }

  size_t size() const { return v.size(); }
  bool same_shape(const Tensor& o) const { return c == o.c && h == o.h && w == o.w; }
  std::string shape_str() const { return cat("(", c, ",", h, ",", w, ")"); }

  real& at(int ci, int y, int x) { return v[(static_cast<size_t>(ci) * h + y) * w + x]; }
  const real& at(int ci, int y, int x) const {
    return v[(static_cast<size_t>(ci) * h + y) * w + x];
  }

  Tensor& operator+=(const Tensor& o) {
    if (c != o.c || h != o.h || w != o.w)
      throw ShapeError(cat("tensor += shape mismatch: ", shape_str(), " vs ", o.shape_str()));
    for (size_t i = 0; i < v.size(); ++i) v[i] += o.v[i];
    return *this;
  }

  real* channel(int ci) { return v.data() + static_cast<size_t>(ci) * h * w; }
  const real* channel(int ci) const { return v.data() + static_cast<size_t>(ci) * h * w; }

  void fill(real x) { std::fill(v.begin(), v.end(), x); }

  bool all_finite() const {
    for (real x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }
};

inline Tensor zeros_like(const Tensor& t) { return Tensor(t.c, t.h, t.w); }

// ---------------------------------------------------------------------------
// Domain wrappers

// Activation grid produced by a named network layer.
struct FeatureMap {
  Tensor data;
  std::string layer_tag;
};

// RGB image, values in [0,1].
struct ImageTensor {
  Tensor data;

  void validate() const {
    if (data.c != 3) throw ShapeError(cat("image must have 3 channels, got ", data.c));
    for (real x : data.v)
      if (!std::isfinite(x) || x < 0.0 || x > 1.0)
        throw DataError("image entries must be finite and within [0,1]");
  }
};

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 raw output is portable; the distribution
// transforms below are hand-rolled because std::*_distribution is not.

struct Rng {
  std::mt19937_64 gen;

  explicit Rng(uint64_t seed = 1) : gen(seed) {}

  uint64_t next_u64() { return gen(); }

  // uniform in [0,1)
  real uniform() { return static_cast<real>(next_u64() >> 11) * 0x1.0p-53; }

  real uniform(real lo, real hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller, no caching (keeps state a single integer stream).
  real normal() {
    real u1 = uniform();
    real u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  real normal(real mean, real stddev) { return mean + stddev * normal(); }

  // uniform integer in [0, n)
  uint64_t uniform_int(uint64_t n) {
    return static_cast<uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  void fill_normal(real* dst, size_t n, real mean, real stddev) {
    for (size_t i = 0; i < n; ++i) dst[i] = normal(mean, stddev);
  }
};

inline real clamp01(real x) { return x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x); }

}  // namespace pgs
