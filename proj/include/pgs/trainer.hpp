#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "pgs/config.hpp"
#include "pgs/core.hpp"
#include "pgs/deformable_scale.hpp"
#include "pgs/feature_codec.hpp"
#include "pgs/global_refine.hpp"
#include "pgs/graph_builder.hpp"
#include "pgs/image_io.hpp"
#include "pgs/message_passing.hpp"
#include "pgs/objective.hpp"
#include "pgs/params.hpp"
#include "pgs/patch_ops.hpp"

namespace pgs {

namespace detail {
template <typename Fn>
auto with_stage(const char* name, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ShapeError& e) {
    throw ShapeError(cat(name, ": ", e.what()));
  } catch (const ParamError& e) {
    throw ParamError(cat(name, ": ", e.what()));
  } catch (const ConfigError& e) {
    throw ConfigError(cat(name, ": ", e.what()));
  } catch (const DataError& e) {
    throw DataError(cat(name, ": ", e.what()));
  } catch (const ParseError& e) {
    throw ParseError(cat(name, ": ", e.what()));
  } catch (const IncompatibilityError& e) {
    throw IncompatibilityError(cat(name, ": ", e.what()));
  } catch (const ContractError& e) {
    throw ContractError(cat(name, ": ", e.what()));
  }
}

// Re-renders each row (a flattened c x from x from patch) at side `to`.
inline NodeMatrix resize_node_matrix(const NodeMatrix& x, int c, int from, int to) {
  if (from == to) return x;
  NodeMatrix out(x.rows(), static_cast<Eigen::Index>(c) * to * to);
  Tensor tmp(c, from, from);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    std::memcpy(tmp.v.data(), x.data() + i * x.cols(), sizeof(real) * x.cols());
    const Tensor r = resize_bilinear(tmp, to, to);
    std::memcpy(out.data() + i * out.cols(), r.v.data(), sizeof(real) * out.cols());
  }
  return out;
}
}  // namespace detail

class Model {
 public:
  explicit Model(Config cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    register_codec_params(params_, cfg_);
    register_predictor_params(params_, cfg_.feature_channels(), cfg_);
    const int d_in = cfg_.feature_channels() * cfg_.patch_side * cfg_.patch_side;
    register_aggregator_params(params_, "gnn.inter", cfg_.aggregator, d_in, cfg_);
    register_aggregator_params(params_, "gnn.intra", cfg_.aggregator, d_in, cfg_);
  }

  // Loss network from its fixed seed or the pretrained file, encoder copied
  // from it, everything else from the model seed. Call once before training.
  void init() {
    Rng rng(cfg_.seed);
    init_codec_params(params_, cfg_, rng);
    init_predictor_params(params_, rng);
    init_aggregator_params(params_, "gnn.inter", cfg_.aggregator, rng);
    init_aggregator_params(params_, "gnn.intra", cfg_.aggregator, rng);
  }

  Config& config() { return cfg_; }
  const Config& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  struct ForwardOptions {
    bool soft_scales = false;  // training relaxation; inference uses argmax
    int render_patch = 0;      // 0 = native patch_side; other values re-render
                               // patches at that side around the trained size
  };

  struct PipelineCache {
    ForwardOptions opt;
    EncodeCache enc_c, enc_s;
    Tensor fc, fs;
    NodeMatrix xc;
    bool used_deformable = false;
    PredictorCache pred;
    MultiscaleCache ms;
    ScaleAssignment assign;
    NodeMatrix xs;
    KnnEdges inter, intra;
    bool used_intra = false;
    AggCache stage1, stage2;
    NodeMatrix y1, y2;
    Tensor fo;
    bool used_refine = false;
    AdainCache adain;
    Tensor fo_ref;
    NetCache dec;
  };

  ImageTensor forward(const ImageTensor& content, const ImageTensor& style) const {
    return forward(content, style, ForwardOptions{}, nullptr);
  }

  ImageTensor forward(const ImageTensor& content, const ImageTensor& style,
                      const ForwardOptions& opt, PipelineCache* cache = nullptr) const {
    using detail::with_stage;
    const Config& c = cfg_;
    const int p = c.patch_side, s = c.stride;
    const int pr = opt.render_patch > 0 ? opt.render_patch : p;
    PipelineCache local;
    PipelineCache& cc = cache ? *cache : local;
    cc.opt = opt;
    cc.opt.render_patch = pr;

    FeatureMap fc = with_stage("encode(content)", [&] {
      return encode(content, params_, c, cache ? &cc.enc_c : nullptr);
    });
    FeatureMap fs = with_stage("encode(style)", [&] {
      return encode(style, params_, c, cache ? &cc.enc_s : nullptr);
    });
    const int ch = fc.data.c;

    NodeMatrix xc = with_stage("extract_patches(content)", [&] {
      NodeMatrix raw = extract_node_matrix(fc.data, pr, s);
      return detail::resize_node_matrix(raw, ch, pr, p);
    });

    NodeMatrix xs;
    if (c.deformable_enabled) {
      cc.used_deformable = true;
      cc.assign = with_stage("predict_scales", [&] {
        return predict_scales(fc.data, fs.data, params_, c, cache ? &cc.pred : nullptr);
      });
      xs = with_stage("extract_multiscale_style_nodes", [&] {
        return extract_multiscale_style_nodes(fs.data, cc.assign, p, s, !opt.soft_scales,
                                              cache ? &cc.ms : nullptr);
      });
    } else {
      xs = with_stage("extract_patches(style)", [&] {
        return uniform_scale_assignment_nodes(fs.data, p, s);
      });
    }

    const int n_c = static_cast<int>(xc.rows());
    if (n_c < 2) throw ContractError("graph: need at least 2 content patches");
    KnnEdges inter = with_stage("graph(inter)", [&] {
      return knn_edges(xc, xs, c.k, c.metric, false);
    });
    KnnEdges intra;
    if (c.intra_enabled) {
      cc.used_intra = true;
      intra = with_stage("graph(intra)", [&] {
        return knn_edges(xc, xc, std::min(c.k, n_c - 1), c.metric, true);
      });
    }

    NodeMatrix y1 = with_stage("style_to_content_pass", [&] {
      return aggregator_pass(c.aggregator, xc, xs, inter, params_, "gnn.inter", c,
                             cache ? &cc.stage1 : nullptr);
    });
    NodeMatrix y2;
    if (c.intra_enabled) {
      y2 = with_stage("content_to_content_pass", [&] {
        return aggregator_pass(c.aggregator, y1, y1, intra, params_, "gnn.intra", c,
                               cache ? &cc.stage2 : nullptr);
      });
    } else {
      y2 = y1;
    }

    Tensor fo = with_stage("compose", [&] {
      const NodeMatrix rendered = detail::resize_node_matrix(y2, ch, p, pr);
      return compose_from_node_matrix(rendered, ch, fc.data.h, fc.data.w, pr, s);
    });

    Tensor fo_ref;
    if (c.refine_enabled) {
      cc.used_refine = true;
      fo_ref = with_stage("refine", [&] {
        return adain_forward(fo, fs.data, cache ? &cc.adain : nullptr);
      });
    } else {
      fo_ref = fo;
    }

    ImageTensor out = with_stage("decode", [&] {
      return decode(FeatureMap{fo_ref, "relu3_1"}, params_, c, cache ? &cc.dec : nullptr);
    });

    if (cache) {
      cc.fc = std::move(fc.data);
      cc.fs = std::move(fs.data);
      cc.xc = std::move(xc);
      cc.xs = std::move(xs);
      cc.inter = std::move(inter);
      cc.intra = std::move(intra);
      cc.y1 = std::move(y1);
      cc.y2 = std::move(y2);
      cc.fo = std::move(fo);
      cc.fo_ref = std::move(fo_ref);
    }
    return out;
  }

  // Accumulates parameter gradients for d(loss)/d(output image). The cache
  // must come from a forward run at the native patch side with soft scales
  // when the deformable module is on.
  void backward(const PipelineCache& cc, const Tensor& g_image) {
    const Config& c = cfg_;
    const int p = c.patch_side, s = c.stride;
    if (cc.opt.render_patch != p)
      throw ContractError("backward requires a native-patch forward cache");
    if (cc.used_deformable && !cc.opt.soft_scales)
      throw ContractError("backward requires soft scale selection");

    Tensor g_fo_ref = decode_backward(cc.dec, g_image, params_, c);

    Tensor g_fs = zeros_like(cc.fs);
    Tensor g_fc = zeros_like(cc.fc);
    Tensor g_fo;
    if (cc.used_refine) {
      g_fo = zeros_like(cc.fo);
      adain_backward(cc.fo, cc.fs, cc.adain, g_fo_ref, &g_fo, &g_fs);
    } else {
      g_fo = std::move(g_fo_ref);
    }

    NodeMatrix g_y2 = compose_from_node_matrix_backward(g_fo, p, s);

    NodeMatrix g_y1, g_xc, g_xs;
    g_xc.setZero(cc.xc.rows(), cc.xc.cols());
    g_xs.setZero(cc.xs.rows(), cc.xs.cols());
    if (cc.used_intra) {
      g_y1.setZero(cc.y1.rows(), cc.y1.cols());
      aggregator_pass_backward(c.aggregator, cc.y1, cc.y1, cc.intra, cc.stage2, g_y2, params_,
                               "gnn.intra", c, &g_y1, &g_y1);
    } else {
      g_y1 = std::move(g_y2);
    }
    aggregator_pass_backward(c.aggregator, cc.xc, cc.xs, cc.inter, cc.stage1, g_y1, params_,
                             "gnn.inter", c, &g_xc, &g_xs);

    if (cc.used_deformable) {
      NodeMatrix g_probs;
      extract_multiscale_backward(g_xs, cc.assign, cc.ms, &g_probs, &g_fs);
      predict_scales_backward(g_probs, cc.pred, params_, &g_fc, &g_fs);
    } else {
      g_fs += extract_node_matrix_backward(g_xs, cc.fs.c, cc.fs.h, cc.fs.w, p, s);
    }
    g_fc += extract_node_matrix_backward(g_xc, cc.fc.c, cc.fc.h, cc.fc.w, p, s);

    encode_backward(cc.enc_c, g_fc, params_, c, false);
    encode_backward(cc.enc_s, g_fs, params_, c, false);
  }

  void save(const std::string& path) const { save_checkpoint(path, cfg_, params_); }

  static Model load(const std::string& path) {
    Model m(peek_checkpoint_config(path));
    load_checkpoint(path, m.params_);
    return m;
  }

 private:
  Config cfg_;
  ParamStore params_;
};

// ---------------------------------------------------------------------------
// Dataset handling: shorter side scaled to the training side, center crop.

inline ImageTensor prepare_training_image(const ImageTensor& img, int side) {
  const int h = img.data.h, w = img.data.w;
  const int shorter = std::min(h, w);
  int nh = h, nw = w;
  if (shorter != side) {
    const real scale = static_cast<real>(side) / shorter;
    nh = std::max(side, static_cast<int>(std::lround(h * scale)));
    nw = std::max(side, static_cast<int>(std::lround(w * scale)));
  }
  Tensor resized = resize_bilinear(img.data, nh, nw);
  const int oy = (nh - side) / 2, ox = (nw - side) / 2;
  Tensor crop(3, side, side);
  for (int ci = 0; ci < 3; ++ci)
    for (int y = 0; y < side; ++y)
      std::memcpy(&crop.at(ci, y, 0), &resized.at(ci, oy + y, ox), sizeof(real) * side);
  for (real& v : crop.v) v = clamp01(v);
  ImageTensor out{std::move(crop)};
  out.validate();
  return out;
}

inline std::vector<std::string> list_image_files(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError(cat("'", dir, "' is not a directory"));
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") files.push_back(e.path().string());
  }
  std::sort(files.begin(), files.end());
  return files;
}

inline std::vector<ImageTensor> load_image_dir(const std::string& dir, int side) {
  std::vector<ImageTensor> out;
  for (const auto& f : list_image_files(dir)) out.push_back(prepare_training_image(read_image(f), side));
  if (out.empty()) throw DataError(cat("no decodable images in '", dir, "'"));
  return out;
}

// ---------------------------------------------------------------------------
// Training loop: per iteration, batch_size independent content/style draws,
// batch-mean gradients, one Adam step with decoupled weight decay.

struct TrainResult {
  std::vector<LossBreakdown> trace;  // per-iteration batch means
};

inline void dump_diagnostics(const std::string& path, const Model& model, int iteration,
                             const LossBreakdown& losses) {
  std::ofstream os(path);
  os << "iteration=" << iteration << '\n'
     << "content_loss=" << losses.content << '\n'
     << "style_loss=" << losses.style << '\n'
     << "total_loss=" << losses.total << '\n'
     << "--- config ---\n"
     << config_to_text(model.config()) << "--- parameter norms ---\n";
  model.params().for_each([&](const Param& p) {
    os << p.name << " |value|=" << ConstVecMap(p.value.data(), p.size()).norm()
       << " |grad|=" << ConstVecMap(p.grad.data(), p.size()).norm() << '\n';
  });
}

inline TrainResult train(Model& model, const std::vector<ImageTensor>& contents,
                         const std::vector<ImageTensor>& styles, const TrainConfig& tc,
                         std::ostream* csv, const std::string& diagnostics_path = "") {
  tc.validate();
  if (contents.empty()) throw DataError("content set is empty");
  if (styles.empty()) throw DataError("style set is empty");

  Adam opt(tc.learning_rate, tc.weight_decay);
  Rng draw(model.config().seed ^ 0x9E3779B97F4A7C15ull);
  TrainResult result;
  if (csv) *csv << "iteration,content_loss,style_loss,total\n";

  const Model::ForwardOptions fopt{/*soft_scales=*/true, /*render_patch=*/0};
  const real inv_b = 1.0 / tc.batch_size;
  for (int it = 1; it <= tc.iterations; ++it) {
    model.params().zero_grad();
    LossBreakdown mean;
    mean.lambda = tc.net.lambda;
    for (int b = 0; b < tc.batch_size; ++b) {
      const ImageTensor& ic = contents[draw.uniform_int(contents.size())];
      const ImageTensor& is = styles[draw.uniform_int(styles.size())];
      Model::PipelineCache cache;
      const ImageTensor io = model.forward(ic, is, fopt, &cache);
      ObjectiveCache obj;
      const LossBreakdown l =
          total_loss_forward(io, ic, is, tc.net.lambda, model.params(), model.config(), &obj);
      if (!std::isfinite(l.total)) {
        if (!diagnostics_path.empty()) dump_diagnostics(diagnostics_path, model, it, l);
        throw DataError(cat("non-finite loss at iteration ", it,
                            diagnostics_path.empty() ? "" : cat("; diagnostics at ",
                                                                diagnostics_path)));
      }
      const Tensor g_image = total_loss_backward(obj, model.params(), model.config());
      model.backward(cache, g_image);
      mean.content += l.content * inv_b;
      mean.style += l.style * inv_b;
      mean.total += l.total * inv_b;
    }
    model.params().for_each([&](Param& p) {
      if (p.trainable) VecMap(p.grad.data(), p.size()) *= inv_b;
    });
    opt.step(model.params());
    result.trace.push_back(mean);
    if (csv)
      *csv << it << ',' << mean.content << ',' << mean.style << ',' << mean.total << '\n';
  }
  return result;
}

}  // namespace pgs
