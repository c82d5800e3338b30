#pragma once

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pgs/core.hpp"

namespace pgs {

enum class Metric { ncc, euclidean };

inline Metric metric_from_string(const std::string& s) {
  if (s == "ncc") return Metric::ncc;
  if (s == "euclidean") return Metric::euclidean;
  throw ParamError(cat("unknown metric '", s, "' (expected ncc or euclidean)"));
}

inline const char* to_string(Metric m) { return m == Metric::ncc ? "ncc" : "euclidean"; }

enum class Aggregator { gat, gcn, gin, sage, edgeconv };

inline Aggregator aggregator_from_string(const std::string& s) {
  if (s == "gat") return Aggregator::gat;
  if (s == "gcn") return Aggregator::gcn;
  if (s == "gin") return Aggregator::gin;
  if (s == "sage") return Aggregator::sage;
  if (s == "edgeconv") return Aggregator::edgeconv;
  throw ParamError(cat("unknown aggregator '", s, "' (expected gat|gcn|gin|sage|edgeconv)"));
}

inline const char* to_string(Aggregator a) {
  switch (a) {
    case Aggregator::gat: return "gat";
    case Aggregator::gcn: return "gcn";
    case Aggregator::gin: return "gin";
    case Aggregator::sage: return "sage";
    case Aggregator::edgeconv: return "edgeconv";
  }
  return "?";
}

// Pipeline configuration. Shape-determining fields (mode, tiny_channels,
// patch_side, heads, head_dim, aggregator, scales, predictor_hidden) are
// frozen into checkpoints; behavior fields may be overridden at inference.
struct Config {
  std::string mode = "tiny";        // {tiny, full}
  int tiny_channels = 32;           // feature width of the tiny encoder (divisible by 4)

  int patch_side = 5;               // p
  int stride = 1;                   // s
  int k = 5;                        // neighbors per content node
  Metric metric = Metric::ncc;

  Aggregator aggregator = Aggregator::gat;  // gnn.aggregator
  int heads = 4;                    // gnn.heads
  int head_dim = 32;
  real leaky_slope = 0.2;
  bool intra_enabled = true;        // gnn.intra_enabled

  bool deformable_enabled = true;   // deformable.enabled
  std::vector<int> scales = {3, 5, 7};  // deformable.scales
  int predictor_hidden = 32;

  bool refine_enabled = true;       // refine.enabled
  real lambda = 10.0;               // loss.lambda

  std::string weights_path;         // loss_network.weights_path (full mode)
  uint64_t seed = 1;

  int feature_channels() const { return mode == "full" ? 256 : tiny_channels; }
  int train_image_side() const { return mode == "full" ? 256 : 64; }

  void validate() const {
    if (mode != "tiny" && mode != "full")
      throw ConfigError(cat("mode must be tiny or full, got '", mode, "'"));
    if (tiny_channels < 4 || tiny_channels % 4 != 0)
      throw ConfigError(cat("tiny_channels must be a positive multiple of 4, got ", tiny_channels));
    if (patch_side < 1) throw ConfigError("patch_side must be >= 1");
    if (stride < 1) throw ConfigError("stride must be >= 1");
    if (k < 1) throw ConfigError("k must be >= 1");
    if (heads < 1) throw ConfigError("heads must be >= 1");
    if (head_dim < 1) throw ConfigError("head_dim must be >= 1");
    if (!(leaky_slope > 0.0 && leaky_slope < 1.0))
      throw ConfigError("leaky_slope must lie in (0,1)");
    if (scales.empty()) throw ConfigError("scale set must not be empty");
    for (int s : scales)
      if (s < 1 || s % 2 == 0)
        throw ConfigError(cat("scales must be odd positive integers, got ", s));
    if (predictor_hidden < 1) throw ConfigError("predictor_hidden must be >= 1");
    if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
  }
};

// Alg.-1 training loop knobs on top of the pipeline configuration.
struct TrainConfig {
  int iterations = 100;
  int batch_size = 8;
  real learning_rate = 1e-4;
  real weight_decay = 5e-5;
  Config net;

  void validate() const {
    if (iterations < 1) throw ConfigError("iterations must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (learning_rate <= 0.0) throw ConfigError("learning_rate must be > 0");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    net.validate();
  }
};

// ---------------------------------------------------------------------------
// key=value snapshot (stored inside checkpoints)

namespace detail {
inline std::string join_ints(const std::vector<int>& xs) {
  std::string out;
  for (size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(xs[i]);
  }
  return out;
}

inline std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  size_t pos = 0;
  while (pos < s.size()) {
    size_t next = s.find(',', pos);
    if (next == std::string::npos) next = s.size();
    out.push_back(std::stoi(s.substr(pos, next - pos)));
    pos = next + 1;
  }
  return out;
}
}  // namespace detail

inline std::string config_to_text(const Config& c) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "mode=" << c.mode << '\n'
     << "tiny_channels=" << c.tiny_channels << '\n'
     << "patch_side=" << c.patch_side << '\n'
     << "stride=" << c.stride << '\n'
     << "k=" << c.k << '\n'
     << "metric=" << to_string(c.metric) << '\n'
     << "aggregator=" << to_string(c.aggregator) << '\n'
     << "heads=" << c.heads << '\n'
     << "head_dim=" << c.head_dim << '\n'
     << "leaky_slope=" << c.leaky_slope << '\n'
     << "intra_enabled=" << (c.intra_enabled ? 1 : 0) << '\n'
     << "deformable_enabled=" << (c.deformable_enabled ? 1 : 0) << '\n'
     << "scales=" << detail::join_ints(c.scales) << '\n'
     << "predictor_hidden=" << c.predictor_hidden << '\n'
     << "refine_enabled=" << (c.refine_enabled ? 1 : 0) << '\n'
     << "lambda=" << c.lambda << '\n'
     << "weights_path=" << c.weights_path << '\n'
     << "seed=" << c.seed << '\n';
  return os.str();
}

inline Config config_from_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  size_t pos = 0;
  while (pos < text.size()) {
    size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    std::string line = text.substr(pos, eol - pos);
    pos = eol + 1;
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(cat("bad config line: '", line, "'"));
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw ParseError(cat("config snapshot missing key '", key, "'"));
    return it->second;
  };
  Config c;
  c.mode = get("mode");
  c.tiny_channels = std::stoi(get("tiny_channels"));
  c.patch_side = std::stoi(get("patch_side"));
  c.stride = std::stoi(get("stride"));
  c.k = std::stoi(get("k"));
  c.metric = metric_from_string(get("metric"));
  c.aggregator = aggregator_from_string(get("aggregator"));
  c.heads = std::stoi(get("heads"));
  c.head_dim = std::stoi(get("head_dim"));
  c.leaky_slope = std::stod(get("leaky_slope"));
  c.intra_enabled = get("intra_enabled") == "1";
  c.deformable_enabled = get("deformable_enabled") == "1";
  c.scales = detail::split_ints(get("scales"));
  c.predictor_hidden = std::stoi(get("predictor_hidden"));
  c.refine_enabled = get("refine_enabled") == "1";
  c.lambda = std::stod(get("lambda"));
  c.weights_path = get("weights_path");
  c.seed = std::stoull(get("seed"));
  c.validate();
  return c;
}

}  // namespace pgs
