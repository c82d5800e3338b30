#pragma once

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "pgs/pgs.hpp"

namespace pgstest {

using namespace pgs;

inline std::string make_temp_dir(const std::string& tag) {
  static std::atomic<int> counter{0};
  const auto p = std::filesystem::temp_directory_path() /
                 cat("pgs_", tag, "_", ::getpid(), "_", counter.fetch_add(1));
  std::filesystem::create_directories(p);
  return p.string();
}

inline Tensor random_tensor(int c, int h, int w, uint64_t seed, real lo = 0.0, real hi = 1.0) {
  Rng rng(seed);
  Tensor t(c, h, w);
  for (real& v : t.v) v = lo + (hi - lo) * rng.uniform();
  return t;
}

inline NodeMatrix random_matrix(Eigen::Index r, Eigen::Index c, uint64_t seed) {
  Rng rng(seed);
  NodeMatrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal();
  return m;
}

inline ImageTensor random_image(int h, int w, uint64_t seed) {
  ImageTensor img{random_tensor(3, h, w, seed)};
  img.validate();
  return img;
}

// Structured test image: gradients, a sinusoidal texture, and a few blocks,
// so losses and patch matches have something to bite on.
inline ImageTensor synth_image(int h, int w, uint64_t seed) {
  Rng rng(seed);
  Tensor t(3, h, w);
  for (int c = 0; c < 3; ++c) {
    const real ax = rng.uniform(), ay = rng.uniform();
    const real fx = 2.0 + 6.0 * rng.uniform(), fy = 2.0 + 6.0 * rng.uniform();
    const real ph = 6.28318 * rng.uniform(), amp = 0.15 + 0.2 * rng.uniform();
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const real u = static_cast<real>(x) / (w - 1), v = static_cast<real>(y) / (h - 1);
        real val = 0.3 + 0.4 * (ax * u + ay * v) + amp * std::sin(fx * u * 6.28318 + ph) *
                                                       std::cos(fy * v * 6.28318);
        t.at(c, y, x) = clamp01(val);
      }
  }
  for (int b = 0; b < 3; ++b) {
    const int bw = 2 + static_cast<int>(rng.uniform_int(std::max(1, w / 3)));
    const int bh = 2 + static_cast<int>(rng.uniform_int(std::max(1, h / 3)));
    const int ox = static_cast<int>(rng.uniform_int(std::max(1, w - bw)));
    const int oy = static_cast<int>(rng.uniform_int(std::max(1, h - bh)));
    const real shade = rng.uniform();
    for (int c = 0; c < 3; ++c)
      for (int y = oy; y < std::min(h, oy + bh); ++y)
        for (int x = ox; x < std::min(w, ox + bw); ++x)
          t.at(c, y, x) = clamp01(0.5 * t.at(c, y, x) + 0.5 * shade);
  }
  return ImageTensor{std::move(t)};
}

inline real image_l2(const ImageTensor& a, const ImageTensor& b) {
  real s = 0;
  for (size_t i = 0; i < a.data.v.size(); ++i) {
    const real d = a.data.v[i] - b.data.v[i];
    s += d * d;
  }
  return std::sqrt(s);
}

// Mixed absolute/relative gradient-check comparison.
inline bool grad_close(real analytic, real fd, real rel = 1e-3, real abs_tol = 1e-7) {
  return std::abs(analytic - fd) <= rel * std::max(std::abs(analytic), std::abs(fd)) + abs_tol;
}

template <typename F>
real fd_central(F&& f, real* slot, real h = 1e-5) {
  const real orig = *slot;
  *slot = orig + h;
  const real fp = f();
  *slot = orig - h;
  const real fm = f();
  *slot = orig;
  return (fp - fm) / (2 * h);
}

struct CaptureStream {
  std::ostream& os;
  std::ostringstream buf;
  std::streambuf* old;
  explicit CaptureStream(std::ostream& o) : os(o), old(o.rdbuf(buf.rdbuf())) {}
  ~CaptureStream() { os.rdbuf(old); }
  std::string str() const { return buf.str(); }
};

struct EnvVarGuard {
  std::string name;
  bool had = false;
  std::string prev;
  EnvVarGuard(const std::string& n, const char* value) : name(n) {
    if (const char* p = std::getenv(n.c_str())) {
      had = true;
      prev = p;
    }
    if (value)
      ::setenv(n.c_str(), value, 1);
    else
      ::unsetenv(n.c_str());
  }
  ~EnvVarGuard() {
    if (had)
      ::setenv(name.c_str(), prev.c_str(), 1);
    else
      ::unsetenv(name.c_str());
  }
};

inline Config tiny_config(uint64_t seed = 1, int tiny_channels = 16) {
  Config cfg;
  cfg.mode = "tiny";
  cfg.tiny_channels = tiny_channels;
  cfg.seed = seed;
  cfg.validate();
  return cfg;
}

}  // namespace pgstest
