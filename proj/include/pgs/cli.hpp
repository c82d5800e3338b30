#pragma once

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pgs/config.hpp"
#include "pgs/core.hpp"
#include "pgs/graph_builder.hpp"
#include "pgs/image_io.hpp"
#include "pgs/trainer.hpp"

namespace pgs::cli {

namespace detail {

inline bool env_seed(uint64_t* out) {
  const char* s = std::getenv("PGS_SEED");
  if (!s || !*s) return false;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s, &end, 10);
  if (end == s || *end != '\0') throw ConfigError(cat("PGS_SEED is not an integer: '", s, "'"));
  *out = v;
  return true;
}

inline std::vector<int> parse_int_list(const std::string& text, const char* what) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      size_t pos = 0;
      const int v = std::stoi(item, &pos);
      if (pos != item.size()) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError(cat("bad ", what, " list: '", text, "'"));
    }
  }
  if (out.empty()) throw ConfigError(cat("empty ", what, " list"));
  return out;
}

// Inference inputs can be any decodable size; crop to the stride the encoder
// needs, keeping the center.
inline ImageTensor crop_to_multiple_of_4(const ImageTensor& img) {
  const int h = img.data.h - img.data.h % 4;
  const int w = img.data.w - img.data.w % 4;
  if (h == img.data.h && w == img.data.w) return img;
  const int oy = (img.data.h - h) / 2, ox = (img.data.w - w) / 2;
  Tensor t(img.data.c, h, w);
  for (int c = 0; c < img.data.c; ++c)
    for (int y = 0; y < h; ++y)
      std::memcpy(&t.at(c, y, 0), &img.data.at(c, oy + y, ox), sizeof(real) * w);
  return ImageTensor{std::move(t)};
}

inline ImageTensor noise_image(int side, Rng& rng) {
  ImageTensor img{Tensor(3, side, side)};
  for (real& v : img.data.v) v = rng.uniform();
  return img;
}

struct TrainArgs {
  std::string content_dir, style_dir, out_dir;
  TrainConfig tc;
  std::string mode = "tiny", metric = "ncc", aggregator = "gat", scales = "3,5,7";
  bool no_intra = false, no_deformable = false, no_refine = false;
};

struct StylizeArgs {
  std::string checkpoint, content, style, out, dump_graph;
  int k = 5, patch_size = 5;
  std::string metric, aggregator;
  bool no_intra = false, no_deformable = false, no_refine = false;
  bool k_set = false, patch_set = false;
};

struct BenchArgs {
  std::string checkpoint;
  std::string sizes = "256,384,512";
  int repeats = 3;
};

inline int do_train(TrainArgs& a) {
  namespace fs = std::filesystem;
  Config& cfg = a.tc.net;
  cfg.mode = a.mode;
  cfg.metric = metric_from_string(a.metric);
  cfg.aggregator = aggregator_from_string(a.aggregator);
  cfg.scales = parse_int_list(a.scales, "scale");
  if (a.no_intra) cfg.intra_enabled = false;
  if (a.no_deformable) cfg.deformable_enabled = false;
  if (a.no_refine) cfg.refine_enabled = false;
  env_seed(&cfg.seed);
  a.tc.validate();

  const auto contents = load_image_dir(a.content_dir, cfg.train_image_side());
  const auto styles = load_image_dir(a.style_dir, cfg.train_image_side());

  Model model(cfg);
  model.init();

  fs::create_directories(a.out_dir);
  const std::string ckpt = (fs::path(a.out_dir) / "model.pgs").string();
  const std::string csv_path = (fs::path(a.out_dir) / "loss.csv").string();
  const std::string diag = (fs::path(a.out_dir) / "diagnostics.txt").string();
  std::ofstream csv(csv_path);
  if (!csv) throw DataError(cat("cannot write '", csv_path, "'"));

  const TrainResult res = train(model, contents, styles, a.tc, &csv, diag);
  model.save(ckpt);
  std::cout << "trained " << a.tc.iterations << " iterations on " << contents.size()
            << " content / " << styles.size() << " style images\n"
            << "final loss " << res.trace.back().total << " (content "
            << res.trace.back().content << ", style " << res.trace.back().style << ")\n"
            << "wrote " << ckpt << " and " << csv_path << '\n';
  return 0;
}

inline int do_stylize(StylizeArgs& a) {
  Model model = Model::load(a.checkpoint);
  Config& cfg = model.config();
  if (!a.aggregator.empty() &&
      aggregator_from_string(a.aggregator) != cfg.aggregator)
    throw IncompatibilityError(cat("checkpoint holds ", to_string(cfg.aggregator),
                                   " weights; cannot run as ", a.aggregator));
  if (a.k_set) cfg.k = a.k;
  if (!a.metric.empty()) cfg.metric = metric_from_string(a.metric);
  if (a.no_intra) cfg.intra_enabled = false;
  if (a.no_deformable) cfg.deformable_enabled = false;
  if (a.no_refine) cfg.refine_enabled = false;
  env_seed(&cfg.seed);
  cfg.validate();

  const ImageTensor content = crop_to_multiple_of_4(read_image(a.content));
  const ImageTensor style = crop_to_multiple_of_4(read_image(a.style));

  Model::ForwardOptions opt;
  opt.soft_scales = false;
  if (a.patch_set && a.patch_size != cfg.patch_side) opt.render_patch = a.patch_size;

  Model::PipelineCache cache;
  const ImageTensor out = model.forward(content, style, opt, &cache);
  write_png(a.out, out);
  std::cout << "wrote " << a.out << '\n';

  if (!a.dump_graph.empty()) {
    HeteroStyleGraph g;
    g.content = cache.xc;
    g.style = cache.xs;
    g.inter = cache.inter;
    g.intra = cache.intra;
    g.k = cfg.k;
    std::ofstream gs(a.dump_graph);
    if (!gs) throw DataError(cat("cannot write '", a.dump_graph, "'"));
    gs << dump_graph(g);
    std::cout << "wrote " << a.dump_graph << '\n';
  }
  return 0;
}

inline int do_bench(BenchArgs& a) {
  Model model = Model::load(a.checkpoint);
  if (a.repeats < 1) throw ConfigError("--repeats must be >= 1");
  uint64_t seed = model.config().seed;
  env_seed(&seed);
  const std::vector<int> sizes = parse_int_list(a.sizes, "size");

  std::cout << "# size seconds_per_image\n";
  std::ostringstream rows;
  rows << std::fixed << std::setprecision(6);
  for (const int size : sizes) {
    if (size < 16 || size % 4 != 0)
      throw ConfigError(cat("bench size ", size, " must be >= 16 and divisible by 4"));
    Rng rng(seed ^ static_cast<uint64_t>(size));
    const ImageTensor content = noise_image(size, rng);
    const ImageTensor style = noise_image(size, rng);
    double total = 0.0;
    for (int r = 0; r < a.repeats; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      const ImageTensor out = model.forward(content, style);
      const auto t1 = std::chrono::steady_clock::now();
      total += std::chrono::duration<double>(t1 - t0).count();
      if (!out.data.all_finite()) throw DataError("bench produced non-finite output");
    }
    rows << size << ' ' << (total / a.repeats) << '\n';
  }
  std::cout << rows.str()
            << "note: reference timings for this pipeline on an A100 are "
               "0.094 / 0.198 / 0.464 s at 256 / 384 / 512.\n";
  return 0;
}

}  // namespace detail

inline int run(std::vector<std::string> args) {
  CLI::App app{"pgstyle: semi-parametric patch-graph style transfer"};
  app.require_subcommand(1);

  detail::TrainArgs ta;
  CLI::App* tr = app.add_subcommand("train", "train a model on image folders");
  tr->add_option("--content-dir", ta.content_dir, "directory of content images")->required();
  tr->add_option("--style-dir", ta.style_dir, "directory of style images")->required();
  tr->add_option("--out", ta.out_dir, "output directory for model.pgs and loss.csv")->required();
  tr->add_option("--iterations", ta.tc.iterations, "training iterations")->capture_default_str();
  tr->add_option("--batch-size", ta.tc.batch_size, "images per iteration")->capture_default_str();
  tr->add_option("--lr", ta.tc.learning_rate, "Adam learning rate")->capture_default_str();
  tr->add_option("--weight-decay", ta.tc.weight_decay, "decoupled weight decay")
      ->capture_default_str();
  tr->add_option("--lambda", ta.tc.net.lambda, "style loss weight")->capture_default_str();
  tr->add_option("--k", ta.tc.net.k, "neighbors per content node")->capture_default_str();
  tr->add_option("--patch-size", ta.tc.net.patch_side, "native patch side")
      ->capture_default_str();
  tr->add_option("--stride", ta.tc.net.stride, "patch stride")->capture_default_str();
  tr->add_option("--mode", ta.mode, "feature backbone: tiny or full")
      ->capture_default_str()
      ->check(CLI::IsMember({"tiny", "full"}));
  tr->add_option("--tiny-channels", ta.tc.net.tiny_channels, "tiny-mode relu3_1 channels")
      ->capture_default_str();
  tr->add_option("--vgg-weights", ta.tc.net.weights_path, "pretrained backbone archive");
  tr->add_option("--seed", ta.tc.net.seed, "model seed")->capture_default_str();
  tr->add_option("--metric", ta.metric, "patch similarity: ncc or euclidean")
      ->capture_default_str()
      ->check(CLI::IsMember({"ncc", "euclidean"}));
  tr->add_option("--aggregator", ta.aggregator, "message-passing aggregator")
      ->capture_default_str()
      ->check(CLI::IsMember({"gat", "gcn", "gin", "sage", "edgeconv"}));
  tr->add_option("--heads", ta.tc.net.heads, "attention heads")->capture_default_str();
  tr->add_option("--head-dim", ta.tc.net.head_dim, "attention head width")
      ->capture_default_str();
  tr->add_option("--scales", ta.scales, "candidate style patch scales")->capture_default_str();
  tr->add_option("--predictor-hidden", ta.tc.net.predictor_hidden, "scale predictor width")
      ->capture_default_str();
  tr->add_flag("--no-intra", ta.no_intra, "disable the content-content pass");
  tr->add_flag("--no-deformable", ta.no_deformable, "disable deformable style patches");
  tr->add_flag("--no-refine", ta.no_refine, "disable the global statistics refinement");

  detail::StylizeArgs sa;
  CLI::App* st = app.add_subcommand("stylize", "stylize one image with a trained model");
  st->add_option("--checkpoint", sa.checkpoint, "model checkpoint")->required();
  st->add_option("--content", sa.content, "content image (png or jpeg)")->required();
  st->add_option("--style", sa.style, "style image (png or jpeg)")->required();
  st->add_option("--out", sa.out, "output png path")->required();
  st->add_option("--k", sa.k, "neighbors per content node")->capture_default_str();
  st->add_option("--patch-size", sa.patch_size, "rendering patch side")->capture_default_str();
  st->add_option("--metric", sa.metric, "patch similarity: ncc or euclidean")
      ->check(CLI::IsMember({"ncc", "euclidean"}));
  st->add_option("--aggregator", sa.aggregator, "must match the checkpoint")
      ->check(CLI::IsMember({"gat", "gcn", "gin", "sage", "edgeconv"}));
  st->add_flag("--no-intra", sa.no_intra, "disable the content-content pass");
  st->add_flag("--no-deformable", sa.no_deformable, "disable deformable style patches");
  st->add_flag("--no-refine", sa.no_refine, "disable the global statistics refinement");
  st->add_option("--dump-graph", sa.dump_graph, "write the stylization graph edges here");

  detail::BenchArgs ba;
  CLI::App* be = app.add_subcommand("bench", "time the forward pass on noise images");
  be->add_option("--checkpoint", ba.checkpoint, "model checkpoint")->required();
  be->add_option("--sizes", ba.sizes, "comma-separated square image sizes")
      ->capture_default_str();
  be->add_option("--repeats", ba.repeats, "runs averaged per size")->capture_default_str();

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n'
              << "usage: pgstyle [train|stylize|bench] --help\n";
    return 2;
  }

  sa.k_set = st->count("--k") > 0;
  sa.patch_set = st->count("--patch-size") > 0;

  try {
    if (tr->parsed()) return detail::do_train(ta);
    if (st->parsed()) return detail::do_stylize(sa);
    if (be->parsed()) return detail::do_bench(ba);
    std::cerr << "error: no command given\n";
    return 2;
  } catch (const IncompatibilityError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}

inline int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(std::move(args));
}

}  // namespace pgs::cli
