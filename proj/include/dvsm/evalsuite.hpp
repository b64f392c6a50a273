#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dvsm/model.hpp"
#include "dvsm/scenes.hpp"
#include "dvsm/train.hpp"

namespace dvsm {

// ---------------------------------------------------------------------------
// PSNR over [0,1] images, capped at 99 dB for (near-)exact matches.

inline constexpr double kPsnrCap = 99.0;

template <class T>
double psnr(const Tensor<T>& pred, const Tensor<T>& gt, bool* capped = nullptr) {
  if (pred.shape() != gt.shape())
    throw std::invalid_argument("psnr: shape mismatch " + shape_str(pred.shape()) + " vs " +
                                shape_str(gt.shape()));
  double mse = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = double(pred.data()[i]) - double(gt.data()[i]);
    mse += d * d;
  }
  mse /= double(pred.size());
  const double raw = mse > 0 ? 10.0 * std::log10(1.0 / mse) : kPsnrCap;
  if (capped) *capped = raw >= kPsnrCap;
  return std::min(raw, kPsnrCap);
}

// ---------------------------------------------------------------------------
// SSIM on luma, 11x11 Gaussian window (sigma 1.5), valid windows only.

namespace detail {

inline std::vector<double> ssim_kernel() {
  std::vector<double> k(11);
  double sum = 0;
  for (int i = 0; i < 11; ++i) {
    const double d = double(i - 5);
    k[std::size_t(i)] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
    sum += k[std::size_t(i)];
  }
  for (auto& v : k) v /= sum;
  return k;
}

// Separable valid-mode blur: [h, w] -> [h - 10, w - 10].
inline std::vector<double> blur_valid(const std::vector<double>& img, std::size_t h,
                                      std::size_t w) {
  static const std::vector<double> k = ssim_kernel();
  const std::size_t wo = w - 10, ho = h - 10;
  std::vector<double> rows(h * wo), out(ho * wo);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < wo; ++x) {
      double acc = 0;
      for (std::size_t i = 0; i < 11; ++i) acc += k[i] * img[y * w + x + i];
      rows[y * wo + x] = acc;
    }
  for (std::size_t y = 0; y < ho; ++y)
    for (std::size_t x = 0; x < wo; ++x) {
      double acc = 0;
      for (std::size_t i = 0; i < 11; ++i) acc += k[i] * rows[(y + i) * wo + x];
      out[y * wo + x] = acc;
    }
  return out;
}

template <class T>
std::vector<double> luma(const Tensor<T>& img) {
  const std::size_t n = img.extent(1) * img.extent(2);
  std::vector<double> y(n);
  const T* r = img.data();
  const T* g = r + n;
  const T* b = g + n;
  for (std::size_t i = 0; i < n; ++i)
    y[i] = 0.299 * double(r[i]) + 0.587 * double(g[i]) + 0.114 * double(b[i]);
  return y;
}

}  // namespace detail

template <class T>
double ssim(const Tensor<T>& pred, const Tensor<T>& gt) {
  if (pred.shape() != gt.shape() || pred.rank() != 3 || pred.extent(0) != 3)
    throw std::invalid_argument("ssim: need matching [3,H,W] images");
  const std::size_t h = pred.extent(1), w = pred.extent(2);
  if (h < 11 || w < 11) throw std::invalid_argument("ssim: image smaller than the 11x11 window");
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  std::vector<double> x = detail::luma(pred), y = detail::luma(gt);
  std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mx = detail::blur_valid(x, h, w), my = detail::blur_valid(y, h, w);
  const auto mxx = detail::blur_valid(xx, h, w), myy = detail::blur_valid(yy, h, w);
  const auto mxy = detail::blur_valid(xy, h, w);
  double acc = 0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = mxx[i] - mx[i] * mx[i];
    const double vy = myy[i] - my[i] * my[i];
    const double cxy = mxy[i] - mx[i] * my[i];
    acc += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2)) /
           ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return acc / double(mx.size());
}

// ---------------------------------------------------------------------------
// Held-out evaluation: every 8th frame is a target, context views are picked
// by k-means over the remaining cameras.

struct FrameScore {
  std::size_t scene = 0, frame = 0;
  double psnr_db = 0, ssim_val = 0;
};

struct EvalReport {
  std::size_t resolution = 0, context_k = 0;
  std::vector<FrameScore> frames;
  double psnr_mean = 0, ssim_mean = 0;
  double recon_seconds = 0, render_fps = 0;
};

inline json eval_report_to_json(const EvalReport& r) {
  json frames = json::array();
  for (const auto& f : r.frames)
    frames.push_back(json{{"scene", f.scene},
                          {"frame", f.frame},
                          {"psnr", f.psnr_db},
                          {"ssim", f.ssim_val}});
  return json{{"resolution", r.resolution}, {"context_k", r.context_k},
              {"frames", frames},           {"psnr_mean", r.psnr_mean},
              {"ssim_mean", r.ssim_mean},   {"lpips", nullptr},
              {"recon_seconds", r.recon_seconds}, {"render_fps", r.render_fps}};
}

template <class T>
EvalReport eval_dataset(const WeightBundle<T>& w, std::type_identity_t<const PriorProvider<T>*> prior,
                        const std::string& data_root, std::size_t resolution,
                        std::size_t context_k, const std::string& dump_dir = "",
                        std::uint64_t seed = 42) {
  namespace fs = std::filesystem;
  const DatasetManifest manifest = load_manifest(data_root);
  if (!dump_dir.empty()) fs::create_directories(dump_dir);
  EvalReport report;
  report.resolution = resolution;
  report.context_k = context_k;
  double recon_total = 0, render_total = 0;
  std::size_t render_count = 0;
  for (auto sid : manifest.test_scenes) {
    const LoadedScene scene =
        load_scene(data_root + "/scene_" + std::to_string(sid), resolution);
    auto [ctx, targets] = eval_split(scene.cameras, context_k, seed);
    std::vector<Tensor<T>> ctx_images;
    std::vector<Camera> ctx_cams;
    for (auto i : ctx) {
      ctx_images.push_back(scene.images[i]);
      ctx_cams.push_back(scene.cameras[i]);
    }
    auto [ncams, tf] = normalize_poses(ctx_cams);
    const auto t0 = std::chrono::steady_clock::now();
    SceneKVCache<T> cache = reconstruct(ctx_images, ncams, w, tf, prior);
    recon_total += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    for (auto k : targets) {
      const Tensor<T>& gt = scene.images[k];
      const auto t1 = std::chrono::steady_clock::now();
      Tensor<T> predicted =
          render(cache, tf.apply(scene.cameras[k]), w, gt.extent(1), gt.extent(2));
      render_total +=
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count();
      ++render_count;
      FrameScore fsc;
      fsc.scene = sid;
      fsc.frame = k;
      fsc.psnr_db = psnr(predicted, gt);
      fsc.ssim_val = ssim(predicted, gt);
      report.frames.push_back(fsc);
      if (!dump_dir.empty())
        write_ppm(dump_dir + "/scene_" + std::to_string(sid) + "_frame_" + std::to_string(k) +
                      ".ppm",
                  predicted);
    }
  }
  if (report.frames.empty()) throw std::runtime_error("eval_dataset: nothing to evaluate");
  for (const auto& f : report.frames) {
    report.psnr_mean += f.psnr_db;
    report.ssim_mean += f.ssim_val;
  }
  report.psnr_mean /= double(report.frames.size());
  report.ssim_mean /= double(report.frames.size());
  report.recon_seconds = recon_total / double(manifest.test_scenes.size());
  report.render_fps = render_total > 0 ? double(render_count) / render_total : 0;
  return report;
}

// ---------------------------------------------------------------------------
// Feature alignment: cosine similarity between the attended features a context
// view receives during reconstruction and those the renderer produces when
// asked for the same camera. Requires p1 == p2 so the token grids coincide.

struct LayerAlignment {
  int layer = 0;
  double mean_cos = 0, std_cos = 0;
};

template <class T>
std::vector<LayerAlignment> feature_alignment(const WeightBundle<T>& w,
                                              std::type_identity_t<const PriorProvider<T>*> prior,
                                              const LoadedScene& scene, std::size_t context_k,
                                              std::size_t view_index, bool self_compare,
                                              std::uint64_t seed = 42,
                                              std::vector<Tensor<T>>* rend_features = nullptr) {
  if (w.cfg.p1 != w.cfg.p2)
    throw std::invalid_argument("feature_alignment: needs p1 == p2 for matching token grids");
  auto [ctx, targets] = eval_split(scene.cameras, context_k, seed);
  (void)targets;
  if (view_index >= ctx.size())
    throw std::invalid_argument("feature_alignment: view index out of range");
  std::vector<Tensor<T>> ctx_images;
  std::vector<Camera> ctx_cams;
  for (auto i : ctx) {
    ctx_images.push_back(scene.images[i]);
    ctx_cams.push_back(scene.cameras[i]);
  }
  auto [ncams, tf] = normalize_poses(ctx_cams);
  const Tensor<T>& view_img = scene.images[ctx[view_index]];

  std::vector<LayerAlignment> out;
  for (int layer = 0; layer < w.cfg.L; ++layer) {
    AttendedCapture<T> recon_cap;
    recon_cap.layer = layer;
    recon_cap.view = view_index;
    SceneKVCache<T> cache = reconstruct(ctx_images, ncams, w, tf, prior, &recon_cap);

    AttendedCapture<T> other_cap;
    other_cap.layer = layer;
    other_cap.view = view_index;
    if (self_compare) {
      SceneKVCache<T> again = reconstruct(ctx_images, ncams, w, tf, prior, &other_cap);
      if (cache_hash(again) != cache_hash(cache))
        throw std::runtime_error("feature_alignment: reconstruction is not deterministic");
    } else {
      render(cache, ncams[view_index], w, view_img.extent(1), view_img.extent(2), &other_cap);
    }

    const Tensor<T>& a = recon_cap.features;
    const Tensor<T>& b = other_cap.features;
    if (a.shape() != b.shape())
      throw std::runtime_error("feature_alignment: token grids differ, " + shape_str(a.shape()) +
                               " vs " + shape_str(b.shape()));
    const std::size_t tokens = a.extent(0), d = a.extent(1);
    double sum = 0, sumsq = 0;
    for (std::size_t t = 0; t < tokens; ++t) {
      const T* pa = a.data() + t * d;
      const T* pb = b.data() + t * d;
      double cosv;
      if (std::equal(pa, pa + d, pb)) {
        cosv = 1.0;  // identical vectors compare as exactly 1
      } else {
        double dot = 0, na = 0, nb = 0;
        for (std::size_t i = 0; i < d; ++i) {
          dot += double(pa[i]) * double(pb[i]);
          na += double(pa[i]) * double(pa[i]);
          nb += double(pb[i]) * double(pb[i]);
        }
        cosv = na > 0 && nb > 0 ? dot / (std::sqrt(na) * std::sqrt(nb)) : 0.0;
      }
      sum += cosv;
      sumsq += cosv * cosv;
    }
    LayerAlignment la;
    la.layer = layer;
    la.mean_cos = sum / double(tokens);
    la.std_cos = std::sqrt(std::max(0.0, sumsq / double(tokens) - la.mean_cos * la.mean_cos));
    out.push_back(la);
    if (rend_features) rend_features->push_back(b);
  }
  return out;
}

inline void write_alignment_csv(const std::string& path,
                                const std::vector<LayerAlignment>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("write_alignment_csv: cannot open " + path);
  f << "layer,mean_cos,std_cos\n";
  for (const auto& r : rows) {
    char line[128];
    std::snprintf(line, sizeof(line), "%d,%.10g,%.10g\n", r.layer, r.mean_cos, r.std_cos);
    f << line;
  }
}

// Project per-token features to their top three principal components and map
// them to RGB over the token grid.
template <class T>
void write_feature_pca_ppm(const std::string& path, const Tensor<T>& features, std::size_t gh,
                           std::size_t gw) {
  const std::size_t tokens = features.extent(0), d = features.extent(1);
  if (tokens != gh * gw) throw std::invalid_argument("write_feature_pca_ppm: grid mismatch");
  Eigen::MatrixXd x(tokens, d);
  for (std::size_t t = 0; t < tokens; ++t)
    for (std::size_t i = 0; i < d; ++i) x(long(t), long(i)) = double(features.data()[t * d + i]);
  x.rowwise() -= x.colwise().mean();
  Eigen::MatrixXd cov = x.transpose() * x / double(std::max<std::size_t>(tokens - 1, 1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  // Eigenvalues ascend; take the last three columns.
  Eigen::MatrixXd proj = x * es.eigenvectors().rightCols(3);
  Tensor<float> img(Shape{3, gh, gw});
  for (int c = 0; c < 3; ++c) {
    const auto col = proj.col(2 - c);
    const double lo = col.minCoeff(), hi = col.maxCoeff();
    const double span = hi - lo > 1e-12 ? hi - lo : 1.0;
    for (std::size_t t = 0; t < tokens; ++t)
      img.data()[std::size_t(c) * tokens + t] = float((col(long(t)) - lo) / span);
  }
  write_ppm(path, img);
}

// ---------------------------------------------------------------------------
// Ablation harness: twelve model variants built from one base configuration.

inline const std::vector<std::string>& ablation_variants() {
  static const std::vector<std::string> v{"a", "b", "c", "d", "e", "f",
                                          "g", "h", "i", "j", "k", "l"};
  return v;
}

inline ModelConfig variant_config(const ModelConfig& base, const std::string& variant) {
  ModelConfig c = base;
  c.decouple.clear();
  c.recon_cross_view = true;
  c.block_variant = "full";
  c.arch_variant = "kv_cache";
  c.prior = "none";
  c.prior_tunable = false;
  if (variant == "a") return c;
  if (variant == "b") c.decouple = {"input_proj"};
  else if (variant == "c") c.decouple = {"intra_attn"};
  else if (variant == "d") c.decouple = {"cross_qo"};
  else if (variant == "e") c.decouple = {"ffn"};
  else if (variant == "f") c.decouple = {"entire_decoder"};
  else if (variant == "g") c.recon_cross_view = false;
  else if (variant == "h") { c.recon_cross_view = false; c.decouple = {"entire_decoder"}; }
  else if (variant == "i") c.prior = "random_featurizer";
  else if (variant == "j") { c.prior = "random_featurizer"; c.prior_tunable = true; }
  else if (variant == "k") c.block_variant = "no_mid_ffn";
  else if (variant == "l") c.block_variant = "no_intra";
  else throw std::invalid_argument("variant_config: unknown variant \"" + variant + "\"");
  return c;
}

struct AblationRow {
  std::string variant;
  std::int64_t params = 0;
  bool evaluated = false;
  double psnr_db = 0, ssim_val = 0, recon_seconds = 0, render_fps = 0;
};

inline void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("write_ablation_csv: cannot open " + path);
  f << "variant,params,psnr,ssim,recon_seconds,render_fps\n";
  for (const auto& r : rows) {
    if (r.evaluated) {
      char line[192];
      std::snprintf(line, sizeof(line), "%s,%lld,%.10g,%.10g,%.10g,%.10g\n", r.variant.c_str(),
                    static_cast<long long>(r.params), r.psnr_db, r.ssim_val, r.recon_seconds,
                    r.render_fps);
      f << line;
    } else {
      f << r.variant << "," << r.params << ",,,,\n";
    }
  }
}

inline std::vector<AblationRow> ablate_dry(const ModelConfig& base) {
  std::vector<AblationRow> rows;
  for (const auto& v : ablation_variants()) {
    AblationRow r;
    r.variant = v;
    r.params = count_params(variant_config(base, v));
    rows.push_back(r);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Timing and memory probes.

inline long vm_hwm_kb() {
  std::ifstream f("/proc/self/status");
  std::string line;
  while (std::getline(f, line))
    if (line.rfind("VmHWM:", 0) == 0) return std::strtol(line.c_str() + 6, nullptr, 10);
  return -1;
}

inline double median5(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

struct BenchResult {
  std::size_t views = 0, resolution = 0;
  double recon_seconds = 0, render_fps = 0;
  long peak_rss_kb = 0;
};

template <class T>
BenchResult bench_model(const WeightBundle<T>& w, std::type_identity_t<const PriorProvider<T>*> prior,
                        const LoadedScene& scene, std::size_t views, std::size_t resolution,
                        int repeats = 5) {
  if (scene.images.size() < views + 1)
    throw std::invalid_argument("bench_model: scene too small for requested view count");
  std::vector<Tensor<T>> ctx_images(scene.images.begin(), scene.images.begin() + long(views));
  std::vector<Camera> ctx_cams(scene.cameras.begin(), scene.cameras.begin() + long(views));
  auto [ncams, tf] = normalize_poses(ctx_cams);
  const Camera target = tf.apply(scene.cameras[views]);

  std::vector<double> recon_times, render_times;
  SceneKVCache<T> cache;
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    cache = reconstruct(ctx_images, ncams, w, tf, prior);
    recon_times.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    render(cache, target, w, resolution, resolution);
    render_times.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  BenchResult b;
  b.views = views;
  b.resolution = resolution;
  b.recon_seconds = median5(recon_times);
  const double rt = median5(render_times);
  b.render_fps = rt > 0 ? 1.0 / rt : 0;
  b.peak_rss_kb = vm_hwm_kb();
  return b;
}

// Full ablation: train each variant from scratch, then score it on the test
// split. Row order and the variant list are fixed.
template <class T>
std::vector<AblationRow> ablate_full(const ModelConfig& base, const TrainConfig& tc,
                                     const std::string& data_root, const std::string& out_dir,
                                     std::size_t eval_resolution, std::size_t context_k) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  std::vector<AblationRow> rows;
  for (const auto& v : ablation_variants()) {
    const ModelConfig mc = variant_config(base, v);
    AblationRow r;
    r.variant = v;
    r.params = count_params(mc);
    const std::string vdir = out_dir + "/variant_" + v;
    TrainOutput t = run_training<T>(mc, tc, data_root, vdir);
    auto [w, step] = load_weights<T>(t.final_weights);
    (void)step;
    PriorProvider<T> prior;
    if (mc.prior != "none") prior = PriorProvider<T>::make(mc);
    const PriorProvider<T>* pp = mc.prior != "none" ? &prior : nullptr;
    EvalReport rep = eval_dataset(w, pp, data_root, eval_resolution, context_k);
    r.psnr_db = rep.psnr_mean;
    r.ssim_val = rep.ssim_mean;
    r.recon_seconds = rep.recon_seconds;
    r.render_fps = rep.render_fps;
    r.evaluated = true;
    rows.push_back(r);
  }
  return rows;
}

}  // namespace dvsm
