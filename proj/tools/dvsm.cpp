#include <Eigen/Core>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dvsm/config.hpp"
#include "dvsm/evalsuite.hpp"
#include "dvsm/gradcheck.hpp"
#include "dvsm/model.hpp"
#include "dvsm/scenes.hpp"
#include "dvsm/train.hpp"

namespace {

using namespace dvsm;
namespace fs = std::filesystem;

constexpr const char* kUsage = R"(usage: dvsm <command> [--config FILE] [--set key.path=value ...] [flags]

commands:
  gen-data            write the synthetic multi-view dataset described by the config
  train               optimize a model on the training split   [--resume STEP]
  render              render one frame from a checkpoint       --weights F --scene DIR
                                                               --frame K --resolution R
                                                               [--out F.ppm] [--context-k N]
  eval                score held-out frames of the test split  --weights F
  ablate              run the variant sweep                    [--dry]
  analyze-features    compare reconstruction and rendering features
                                                               --weights F --scene DIR
                                                               --resolution R [--view N]
                                                               [--self] [--pca]
  bench               time reconstruction and rendering        [--weights F] [--views 2,4,8]
                                                               [--resolution R]
  selftest            quick internal consistency check

Config values resolve as defaults < --config file < --set overrides; commands
that produce files record the result as config.resolved.json. DVSM_THREADS
caps the linear-algebra thread count when the build has threading enabled.
)";

struct Args {
  std::string config;
  std::vector<std::string> sets;
  std::map<std::string, std::string> values;
  std::set<std::string> switches;
};

Args parse_args(int argc, char** argv, int first, const std::set<std::string>& value_flags,
                const std::set<std::string>& switch_flags) {
  Args a;
  for (int i = first; i < argc; ++i) {
    const std::string arg = argv[i];
    auto need_value = [&](const std::string& flag) -> std::string {
      if (i + 1 >= argc) throw std::invalid_argument(flag + " needs a value");
      return argv[++i];
    };
    if (arg == "--config") {
      a.config = need_value(arg);
    } else if (arg == "--set") {
      a.sets.push_back(need_value(arg));
    } else if (value_flags.count(arg)) {
      a.values[arg] = need_value(arg);
    } else if (switch_flags.count(arg)) {
      a.switches.insert(arg);
    } else {
      throw std::invalid_argument("unknown flag \"" + arg + "\"");
    }
  }
  return a;
}

std::string required(const Args& a, const std::string& flag) {
  auto it = a.values.find(flag);
  if (it == a.values.end()) throw std::invalid_argument(flag + " is required");
  return it->second;
}

std::string value_or(const Args& a, const std::string& flag, const std::string& fallback) {
  auto it = a.values.find(flag);
  return it == a.values.end() ? fallback : it->second;
}

RunConfig load_config(const Args& a, json* resolved = nullptr) {
  return resolve_run_config(a.config, a.sets, resolved);
}

void write_resolved(const RunConfig& c, const json& resolved) {
  fs::create_directories(c.output_dir);
  write_text_file(c.output_dir + "/config.resolved.json", resolved.dump(2) + "\n");
}

int cmd_gen_data(int argc, char** argv) {
  Args a = parse_args(argc, argv, 2, {}, {});
  RunConfig c = load_config(a);
  std::vector<std::size_t> res(c.data.resolutions.begin(), c.data.resolutions.end());
  make_dataset(std::size_t(c.data.n_scenes), std::size_t(c.data.frames_per_scene), res, c.seed,
               c.data.root);
  std::cout << "wrote " << c.data.n_scenes << " scenes x " << c.data.frames_per_scene
            << " frames to " << c.data.root << "\n";
  return 0;
}

int cmd_train(int argc, char** argv) {
  Args a = parse_args(argc, argv, 2, {"--resume"}, {});
  json resolved;
  RunConfig c = load_config(a, &resolved);
  write_resolved(c, resolved);
  const std::uint64_t resume = std::stoull(value_or(a, "--resume", "0"));
  TrainOutput out = run_training<float>(c.model, c.train, c.data.root, c.output_dir, resume);
  std::cout << "trained " << out.steps << " steps, weights at " << out.final_weights << "\n";
  return 0;
}

int cmd_render(int argc, char** argv) {
  Args a = parse_args(argc, argv, 2,
                      {"--weights", "--scene", "--frame", "--resolution", "--out", "--context-k"},
                      {});
  auto [w, step] = load_weights<float>(required(a, "--weights"));
  (void)step;
  const std::size_t frame = std::stoul(required(a, "--frame"));
  const std::size_t resolution = std::stoul(required(a, "--resolution"));
  const std::size_t context_k = std::stoul(value_or(a, "--context-k", "4"));
  const std::string out = value_or(a, "--out", "render.ppm");
  const LoadedScene scene = load_scene(required(a, "--scene"), resolution);
  if (frame >= scene.cameras.size())
    throw std::invalid_argument("frame " + std::to_string(frame) + " out of range");

  // Context comes from frames that are neither eval targets nor the request.
  std::vector<std::size_t> pool;
  for (std::size_t k = 0; k < scene.cameras.size(); ++k)
    if (!target_eligible(k) && k != frame) pool.push_back(k);
  if (pool.size() < context_k) throw std::invalid_argument("not enough context frames");
  std::vector<Camera> pool_cams;
  for (auto i : pool) pool_cams.push_back(scene.cameras[i]);
  std::vector<Tensor<float>> ctx_images;
  std::vector<Camera> ctx_cams;
  for (auto i : kmeans_select_views(pool_cams, context_k, 42)) {
    ctx_images.push_back(scene.images[pool[i]]);
    ctx_cams.push_back(scene.cameras[pool[i]]);
  }
  auto [ncams, tf] = normalize_poses(ctx_cams);
  PriorProvider<float> prior;
  if (w.cfg.prior != "none") prior = PriorProvider<float>::make(w.cfg);
  SceneKVCache<float> cache = reconstruct(ctx_images, ncams, w,
                                          tf, w.cfg.prior != "none" ? &prior : nullptr);
  Tensor<float> img =
      render(cache, tf.apply(scene.cameras[frame]), w, resolution, resolution);
  write_ppm(out, img);
  std::cout << "rendered frame " << frame << " to " << out << "\n";
  return 0;
}

int cmd_eval(int argc, char** argv) {
  Args a = parse_args(argc, argv, 2, {"--weights"}, {});
  json resolved;
  RunConfig c = load_config(a, &resolved);
  write_resolved(c, resolved);
  auto [w, step] = load_weights<float>(required(a, "--weights"));
  (void)step;
  PriorProvider<float> prior;
  if (w.cfg.prior != "none") prior = PriorProvider<float>::make(w.cfg);
  const std::size_t res =
      c.eval.resolution > 0 ? std::size_t(c.eval.resolution) : std::size_t(native_resolution(c.data));
  EvalReport rep = eval_dataset(w, w.cfg.prior != "none" ? &prior : nullptr, c.data.root, res,
                                std::size_t(c.eval.context_k), c.output_dir + "/eval_frames");
  write_text_file(c.output_dir + "/eval_report.json", eval_report_to_json(rep).dump(2) + "\n");
  std::cout << "psnr " << rep.psnr_mean << " dB, ssim " << rep.ssim_mean << " over "
            << rep.frames.size() << " frames\n";
  return 0;
}

int cmd_ablate(int argc, char** argv) {
  Args a = parse_args(argc, argv, 2, {}, {"--dry"});
  json resolved;
  RunConfig c = load_config(a, &resolved);
  write_resolved(c, resolved);
  std::vector<AblationRow> rows;
  if (a.switches.count("--dry")) {
    rows = ablate_dry(c.model);
  } else {
    const std::size_t res = c.eval.resolution > 0 ? std::size_t(c.eval.resolution)
                                                  : std::size_t(native_resolution(c.data));
    rows = ablate_full<float>(c.model, c.train, c.data.root, c.output_dir, res,
                              std::size_t(c.eval.context_k));
  }
  const std::string path = c.output_dir + "/ablation.csv";
  write_ablation_csv(path, rows);
  for (const auto& r : rows) std::cout << r.variant << " " << r.params << "\n";
  std::cout << "wrote " << path << "\n";
  return 0;
}

int cmd_analyze_features(int argc, char** argv) {
  Args a = parse_args(argc, argv, 2, {"--weights", "--scene", "--resolution", "--view"},
                      {"--self", "--pca"});
  json resolved;
  RunConfig c = load_config(a, &resolved);
  write_resolved(c, resolved);
  auto [w, step] = load_weights<float>(required(a, "--weights"));
  (void)step;
  const std::size_t resolution = std::stoul(required(a, "--resolution"));
  const std::size_t view = std::stoul(value_or(a, "--view", "0"));
  const LoadedScene scene = load_scene(required(a, "--scene"), resolution);
  PriorProvider<float> prior;
  if (w.cfg.prior != "none") prior = PriorProvider<float>::make(w.cfg);
  std::vector<Tensor<float>> rend_features;
  auto rows = feature_alignment(w, w.cfg.prior != "none" ? &prior : nullptr, scene,
                                std::size_t(c.eval.context_k), view,
                                a.switches.count("--self") > 0, 42, &rend_features);
  const std::string path = c.output_dir + "/feature_alignment.csv";
  write_alignment_csv(path, rows);
  if (a.switches.count("--pca")) {
    auto [gh, gw] = receptive_grid(resolution, resolution, std::size_t(w.cfg.p2));
    for (std::size_t i = 0; i < rend_features.size(); ++i)
      write_feature_pca_ppm(c.output_dir + "/features_layer" + std::to_string(i) + ".ppm",
                            rend_features[i], gh, gw);
  }
  for (const auto& r : rows)
    std::cout << "layer " << r.layer << " cos " << r.mean_cos << " +- " << r.std_cos << "\n";
  std::cout << "wrote " << path << "\n";
  return 0;
}

int cmd_bench(int argc, char** argv) {
  Args a = parse_args(argc, argv, 2, {"--weights", "--views", "--resolution"}, {});
  RunConfig c = load_config(a);
  WeightBundle<float> w;
  if (a.values.count("--weights")) {
    w = load_weights<float>(a.values.at("--weights")).first;
  } else {
    w = init_weights<float>(c.model, c.seed);
  }
  PriorProvider<float> prior;
  if (w.cfg.prior != "none") prior = PriorProvider<float>::make(w.cfg);
  const std::size_t res = a.values.count("--resolution")
                              ? std::stoul(a.values.at("--resolution"))
                              : std::size_t(native_resolution(c.data));
  const DatasetManifest manifest = load_manifest(c.data.root);
  const LoadedScene scene =
      load_scene(c.data.root + "/scene_" + std::to_string(manifest.test_scenes.at(0)), res);

  std::vector<std::size_t> view_counts;
  std::string spec = value_or(a, "--views", "2,4,8");
  for (std::size_t start = 0; start < spec.size();) {
    const auto comma = spec.find(',', start);
    view_counts.push_back(std::stoul(spec.substr(start, comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  std::cout << "views,resolution,recon_seconds,render_fps,peak_rss_kb\n";
  for (auto v : view_counts) {
    BenchResult b = bench_model(w, w.cfg.prior != "none" ? &prior : nullptr, scene, v, res);
    std::cout << b.views << "," << b.resolution << "," << b.recon_seconds << "," << b.render_fps
              << "," << b.peak_rss_kb << "\n";
  }
  return 0;
}

int cmd_selftest(int, char**) {
  // Derivative of x^2 at 3.
  {
    Tensor<double> x = Tensor<double>::from({1}, {3.0});
    x.set_requires_grad(true);
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> y = sum_all(mul(x, x));
    tape.backward(y);
    if (std::abs(x.grad()[0] - 6.0) > 1e-12) throw std::runtime_error("selftest: autodiff");
  }
  // Cache path against its recompute twin on a tiny model.
  {
    ModelConfig mc;
    mc.D = 8;
    mc.L = 1;
    mc.heads = 2;
    mc.p1 = mc.p2 = 2;
    WeightBundle<float> w = init_weights<float>(mc, 7);
    SceneSpec spec = generate_scene(7);
    std::vector<Camera> cams = orbit_cameras(7, 3, 8);
    std::vector<Tensor<float>> images;
    for (const auto& cam : cams) images.push_back(render_ground_truth<float>(spec, cam, 8, 8));
    std::vector<Camera> ctx_cams{cams[0], cams[1]};
    std::vector<Tensor<float>> ctx_images{images[0], images[1]};
    auto [ncams, tf] = normalize_poses(ctx_cams);
    SceneKVCache<float> cache = reconstruct(ctx_images, ncams, w, tf);
    Tensor<float> a = render(cache, tf.apply(cams[2]), w, 8, 8);
    Tensor<float> b = render_recompute_oracle(ctx_images, ncams, tf.apply(cams[2]), w, 8, 8);
    for (std::size_t i = 0; i < a.size(); ++i)
      if (std::abs(a.data()[i] - b.data()[i]) > 1e-5f)
        throw std::runtime_error("selftest: cache mismatch");
  }
  // Metric fixed points.
  {
    Tensor<float> z(Shape{3, 16, 16});
    Tensor<float> o(Shape{3, 16, 16});
    for (std::size_t i = 0; i < o.size(); ++i) o.data()[i] = 1.0f;
    if (psnr(z, z) != 99.0) throw std::runtime_error("selftest: psnr cap");
    const double c1 = 1e-4;
    if (std::abs(ssim(z, o) - c1 / (1.0 + c1)) > 1e-12)
      throw std::runtime_error("selftest: ssim constant images");
  }
  std::cout << "selftest ok\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* threads = std::getenv("DVSM_THREADS"))
    Eigen::setNbThreads(std::max(1, std::atoi(threads)));
  if (argc < 2) {
    std::cerr << kUsage;
    return 1;
  }
  const std::string cmd = argv[1];
  if (cmd == "--help" || cmd == "-h" || cmd == "help") {
    std::cout << kUsage;
    return 0;
  }
  try {
    if (cmd == "gen-data") return cmd_gen_data(argc, argv);
    if (cmd == "train") return cmd_train(argc, argv);
    if (cmd == "render") return cmd_render(argc, argv);
    if (cmd == "eval") return cmd_eval(argc, argv);
    if (cmd == "ablate") return cmd_ablate(argc, argv);
    if (cmd == "analyze-features") return cmd_analyze_features(argc, argv);
    if (cmd == "bench") return cmd_bench(argc, argv);
    if (cmd == "selftest") return cmd_selftest(argc, argv);
    std::cerr << "unknown command \"" << cmd << "\"\n\n" << kUsage;
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "dvsm " << cmd << ": " << e.what() << "\n\n" << kUsage;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "dvsm " << cmd << ": " << e.what() << "\n";
    return 2;
  }
}
