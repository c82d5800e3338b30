#pragma once

#include <array>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pgs/config.hpp"
#include "pgs/core.hpp"
#include "pgs/nn.hpp"
#include "pgs/params.hpp"

namespace pgs {

// The tiny loss network is a fixed randomly-initialized conv stack; its seed
// is a constant so the "pretrained" network is identical across runs and
// training seeds.
inline constexpr uint64_t kTinyLossSeed = 0x7C57;

inline constexpr std::array<real, 3> kImagenetMean = {0.485, 0.456, 0.406};
inline constexpr std::array<real, 3> kImagenetStd = {0.229, 0.224, 0.225};

inline const std::array<const char*, 4> kLossTags = {"relu1_1", "relu2_1", "relu3_1", "relu4_1"};

// ---------------------------------------------------------------------------
// Architectures. relu3_1 sits at 1/4 spatial resolution in both modes.

inline NetDef make_lossnet_def(const Config& cfg) {
  NetDef net;
  if (cfg.mode == "full") {
    net = {conv_layer("lossnet.conv1_1", 3, 64),    relu_layer("relu1_1"),
           conv_layer("lossnet.conv1_2", 64, 64),   relu_layer(),
           maxpool_layer(),
           conv_layer("lossnet.conv2_1", 64, 128),  relu_layer("relu2_1"),
           conv_layer("lossnet.conv2_2", 128, 128), relu_layer(),
           maxpool_layer(),
           conv_layer("lossnet.conv3_1", 128, 256), relu_layer("relu3_1"),
           conv_layer("lossnet.conv3_2", 256, 256), relu_layer(),
           conv_layer("lossnet.conv3_3", 256, 256), relu_layer(),
           conv_layer("lossnet.conv3_4", 256, 256), relu_layer(),
           maxpool_layer(),
           conv_layer("lossnet.conv4_1", 256, 512), relu_layer("relu4_1")};
  } else {
    const int tc = cfg.tiny_channels;
    net = {conv_layer("lossnet.conv1_1", 3, tc / 4),       relu_layer("relu1_1"),
           maxpool_layer(),
           conv_layer("lossnet.conv2_1", tc / 4, tc / 2),  relu_layer("relu2_1"),
           maxpool_layer(),
           conv_layer("lossnet.conv3_1", tc / 2, tc),      relu_layer("relu3_1"),
           maxpool_layer(),
           conv_layer("lossnet.conv4_1", tc, 2 * tc),      relu_layer("relu4_1")};
  }
  return net;
}

inline NetDef make_encoder_def(const Config& cfg) {
  NetDef net;
  if (cfg.mode == "full") {
    net = {conv_layer("encoder.conv1_1", 3, 64),    relu_layer(),
           conv_layer("encoder.conv1_2", 64, 64),   relu_layer(),
           maxpool_layer(),
           conv_layer("encoder.conv2_1", 64, 128),  relu_layer(),
           conv_layer("encoder.conv2_2", 128, 128), relu_layer(),
           maxpool_layer(),
           conv_layer("encoder.conv3_1", 128, 256), relu_layer()};
  } else {
    const int tc = cfg.tiny_channels;
    net = {conv_layer("encoder.conv1_1", 3, tc / 4),      relu_layer(),
           maxpool_layer(),
           conv_layer("encoder.conv2_1", tc / 4, tc / 2), relu_layer(),
           maxpool_layer(),
           conv_layer("encoder.conv3_1", tc / 2, tc),     relu_layer()};
  }
  return net;
}

// Mirror of the encoder: per downsampling stage one bilinear 2x upsample then
// convolutions with ReLU; the last conv has no ReLU and the output is clamped.
inline NetDef make_decoder_def(const Config& cfg) {
  NetDef net;
  if (cfg.mode == "full") {
    net = {conv_layer("decoder.conv3_1", 256, 128), relu_layer(),
           upsample_layer(),
           conv_layer("decoder.conv2_2", 128, 128), relu_layer(),
           conv_layer("decoder.conv2_1", 128, 64),  relu_layer(),
           upsample_layer(),
           conv_layer("decoder.conv1_2", 64, 64),   relu_layer(),
           conv_layer("decoder.conv1_1", 64, 3),    clamp_layer()};
  } else {
    const int tc = cfg.tiny_channels;
    net = {conv_layer("decoder.conv3_1", tc, tc / 2),      relu_layer(),
           upsample_layer(),
           conv_layer("decoder.conv2_1", tc / 2, tc / 4),  relu_layer(),
           upsample_layer(),
           conv_layer("decoder.conv1_1", tc / 4, 3),       clamp_layer()};
  }
  return net;
}

// ---------------------------------------------------------------------------
// Pretrained weight archive for full mode:
//   "PGSVGGW1" | u64 header length | JSON {version, arrays} | f64 payload

inline constexpr char kVggMagic[8] = {'P', 'G', 'S', 'V', 'G', 'G', 'W', '1'};
inline constexpr const char* kVggVersion = "pgs-vgg-v1";

inline void load_vgg_weights(const std::string& path, ParamStore& store) {
  std::ifstream is(path, std::ios::binary);
  if (!is)
    throw ConfigError(cat("cannot open loss-network weights '", path,
                          "'; run tools/export_vgg_weights.py to create it, or use mode=tiny "
                          "which needs no weight file"));
  char magic[8];
  is.read(magic, 8);
  if (is.gcount() != 8 || std::memcmp(magic, kVggMagic, 8) != 0)
    throw ParseError(cat("'", path, "' is not a PGSVGGW1 weight archive"));
  const uint64_t header_len = detail::get_u64_le(is);
  if (header_len > (1ull << 26)) throw ParseError("weight archive header length is implausible");
  std::string header_str(header_len, '\0');
  is.read(header_str.data(), static_cast<std::streamsize>(header_len));
  if (static_cast<uint64_t>(is.gcount()) != header_len)
    throw ParseError("weight archive truncated in header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_str);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(cat("weight archive header is not valid JSON: ", e.what()));
  }
  if (!header.contains("version") || header["version"] != kVggVersion)
    throw IncompatibilityError(cat("unsupported weight archive version in '", path, "'"));
  for (const auto& a : header["arrays"]) {
    const std::string name = "lossnet." + a["name"].get<std::string>();
    const std::vector<int> shape = a["shape"].get<std::vector<int>>();
    int64_t count = 1;
    for (const int d : shape) count *= d;
    if (!store.has(name)) {  // archive may carry more layers than we use
      is.seekg(static_cast<std::streamoff>(count * sizeof(real)), std::ios::cur);
      continue;
    }
    Param& p = store.at(name);
    if (p.shape != shape)
      throw IncompatibilityError(cat("weight archive shape mismatch for '", name, "'"));
    is.read(reinterpret_cast<char*>(p.value.data()),
            static_cast<std::streamsize>(p.value.size() * sizeof(real)));
    if (static_cast<uint64_t>(is.gcount()) != p.value.size() * sizeof(real))
      throw ParseError(cat("weight archive truncated in '", name, "'"));
  }
}

// ---------------------------------------------------------------------------
// Parameter lifecycle.

inline void register_codec_params(ParamStore& store, const Config& cfg) {
  net_register_params(make_lossnet_def(cfg), store, /*trainable=*/false);
  net_register_params(make_encoder_def(cfg), store, /*trainable=*/true);
  net_register_params(make_decoder_def(cfg), store, /*trainable=*/true);
}

// Loss network first (fixed seed or pretrained file), encoder initialized
// from the loss network's matching layers, decoder freshly initialized from
// the model rng with the final bias lifted so outputs start mid-range.
inline void init_codec_params(ParamStore& store, const Config& cfg, Rng& model_rng) {
  const NetDef lossnet = make_lossnet_def(cfg);
  if (cfg.mode == "full") {
    if (cfg.weights_path.empty())
      throw ConfigError(
          "full mode needs loss_network.weights_path; use mode=tiny to run without downloads");
    load_vgg_weights(cfg.weights_path, store);
  } else {
    Rng fixed(kTinyLossSeed);
    net_init_he(lossnet, store, fixed);
  }
  for (const auto& l : make_encoder_def(cfg))
    if (l.kind == LayerDef::Kind::conv) {
      const std::string src = "lossnet." + l.param_name.substr(std::strlen("encoder."));
      store.at(l.param_name + ".weight").value = store.at(src + ".weight").value;
      store.at(l.param_name + ".bias").value = store.at(src + ".bias").value;
    }
  const NetDef dec = make_decoder_def(cfg);
  net_init_he(dec, store, model_rng);
  for (const auto& l : dec)
    if (l.kind == LayerDef::Kind::conv && l.out_c == 3) {
      auto& bias = store.at(l.param_name + ".bias").value;
      std::fill(bias.begin(), bias.end(), 0.5);
    }
}

// ---------------------------------------------------------------------------
// Input normalization (ImageNet statistics in full mode, identity in tiny).

inline Tensor normalize_for_net(const Tensor& img, const Config& cfg) {
  if (cfg.mode != "full") return img;
  Tensor out = img;
  for (int ci = 0; ci < 3; ++ci) {
    VecMap plane(out.channel(ci), out.h * out.w);
    plane = (plane.array() - kImagenetMean[ci]) / kImagenetStd[ci];
  }
  return out;
}

inline Tensor normalize_for_net_backward(const Tensor& g, const Config& cfg) {
  if (cfg.mode != "full") return g;
  Tensor out = g;
  for (int ci = 0; ci < 3; ++ci)
    VecMap(out.channel(ci), out.h * out.w) /= kImagenetStd[ci];
  return out;
}

// ---------------------------------------------------------------------------
// Encoding / decoding / loss features.

struct EncodeCache {
  NetCache net;
  int img_h = 0, img_w = 0;
};

inline FeatureMap encode(const ImageTensor& image, const ParamStore& store, const Config& cfg,
                         EncodeCache* cache) {
  image.validate();
  if (image.data.h < 16 || image.data.w < 16)
    throw DataError(cat("encode: input ", image.data.h, "x", image.data.w,
                        " is too small (need at least 16x16)"));
  if (image.data.h % 4 != 0 || image.data.w % 4 != 0)
    throw DataError(cat("encode: input dims must be multiples of 4, got ", image.data.h, "x",
                        image.data.w));
  const Tensor norm = normalize_for_net(image.data, cfg);
  Tensor out = net_forward(make_encoder_def(cfg), store, norm, cache ? &cache->net : nullptr,
                           nullptr);
  if (cache) {
    cache->img_h = image.data.h;
    cache->img_w = image.data.w;
  }
  return {std::move(out), "relu3_1"};
}

// Returns grad w.r.t. the raw [0,1] image when want_gin.
inline Tensor encode_backward(const EncodeCache& cache, const Tensor& gfeatures,
                              ParamStore& store, const Config& cfg, bool want_gin) {
  Tensor g = net_backward(make_encoder_def(cfg), store, cache.net, gfeatures, nullptr, want_gin);
  if (!want_gin) return g;
  return normalize_for_net_backward(g, cfg);
}

inline ImageTensor decode(const FeatureMap& features, const ParamStore& store, const Config& cfg,
                          NetCache* cache) {
  Tensor out = net_forward(make_decoder_def(cfg), store, features.data, cache, nullptr);
  ImageTensor img{std::move(out)};
  img.validate();
  return img;
}

inline Tensor decode_backward(const NetCache& cache, const Tensor& gimage, ParamStore& store,
                              const Config& cfg) {
  return net_backward(make_decoder_def(cfg), store, cache, gimage, nullptr, true);
}

struct LossFeatures {
  std::map<std::string, FeatureMap> per_layer;

  const FeatureMap& at(const std::string& tag) const {
    auto it = per_layer.find(tag);
    if (it == per_layer.end()) throw ContractError(cat("loss features missing tag ", tag));
    return it->second;
  }
};

struct LossNetCache {
  NetCache net;
};

inline LossFeatures extract_loss_features(const ImageTensor& image, const ParamStore& store,
                                          const Config& cfg, LossNetCache* cache) {
  image.validate();
  TapMap taps;
  net_forward(make_lossnet_def(cfg), store, normalize_for_net(image.data, cfg),
              cache ? &cache->net : nullptr, &taps);
  LossFeatures out;
  for (const char* tag : kLossTags) {
    auto it = taps.find(tag);
    if (it == taps.end()) throw ContractError(cat("loss network produced no ", tag));
    out.per_layer.emplace(tag, FeatureMap{std::move(it->second), tag});
  }
  return out;
}

// Backward from per-tag feature gradients to the raw image. Loss-network
// parameters are frozen; net_backward skips their gradient accumulation.
inline Tensor loss_features_backward(const LossNetCache& cache, const TapMap& tap_grads,
                                     ParamStore& store, const Config& cfg) {
  Tensor zero = zeros_like(cache.net.output);
  Tensor g = net_backward(make_lossnet_def(cfg), store, cache.net, zero, &tap_grads, true);
  return normalize_for_net_backward(g, cfg);
}

}  // namespace pgs
