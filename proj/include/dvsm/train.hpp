#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "dvsm/container.hpp"
#include "dvsm/model.hpp"
#include "dvsm/optim.hpp"
#include "dvsm/scenes.hpp"

namespace dvsm {

struct CurriculumPhase {
  int resolution = 64;
  int steps = 1000;
};

struct TrainConfig {
  std::vector<CurriculumPhase> curriculum{{64, 1000}};
  std::vector<int> context_choices{4};
  int skip_lo = 1;
  int skip_hi = 8;
  int target_count = 2;
  int target_margin = 2;
  int batch_scenes = 1;
  double peak_lr = 4e-4;
  int warmup_steps = 100;
  double min_lr = 0.0;
  double lambda = 0.2;
  double clip_norm = 1.0;
  std::uint64_t seed = 1;
  int checkpoint_interval = 1000;
  bool deterministic_timing = true;
  bool exclude_target_frames = true;
  // Single-scene overfitting mode: keep the context set pinned to the same
  // k-means split evaluation uses and only resample targets. Leaves the task
  // stationary enough for small models to pick up view interpolation.
  bool fixed_context = false;
  std::uint64_t split_seed = 42;

  int total_steps() const {
    int n = 0;
    for (const auto& p : curriculum) n += p.steps;
    return n;
  }

  void validate() const {
    if (curriculum.empty()) throw std::invalid_argument("TrainConfig: empty curriculum");
    for (const auto& p : curriculum)
      if (p.resolution <= 0 || p.steps <= 0)
        throw std::invalid_argument("TrainConfig: curriculum entries need positive fields");
    if (context_choices.empty()) throw std::invalid_argument("TrainConfig: no context_choices");
    for (int c : context_choices)
      if (c <= 0) throw std::invalid_argument("TrainConfig: context counts must be positive");
    if (batch_scenes <= 0 || target_count <= 0 || warmup_steps < 0 || checkpoint_interval <= 0)
      throw std::invalid_argument("TrainConfig: invalid counts");
  }

  LrSchedule schedule() const {
    return LrSchedule{peak_lr, std::int64_t(warmup_steps), std::int64_t(total_steps()), min_lr};
  }
};

inline json train_config_to_json(const TrainConfig& c) {
  json cur = json::array();
  for (const auto& p : c.curriculum)
    cur.push_back(json{{"resolution", p.resolution}, {"steps", p.steps}});
  return json{{"curriculum", cur},
              {"context_choices", c.context_choices},
              {"skip_lo", c.skip_lo},
              {"skip_hi", c.skip_hi},
              {"target_count", c.target_count},
              {"target_margin", c.target_margin},
              {"batch_scenes", c.batch_scenes},
              {"peak_lr", c.peak_lr},
              {"warmup_steps", c.warmup_steps},
              {"min_lr", c.min_lr},
              {"lambda", c.lambda},
              {"clip_norm", c.clip_norm},
              {"seed", c.seed},
              {"checkpoint_interval", c.checkpoint_interval},
              {"deterministic_timing", c.deterministic_timing},
              {"exclude_target_frames", c.exclude_target_frames},
              {"fixed_context", c.fixed_context},
              {"split_seed", c.split_seed}};
}

inline TrainConfig train_config_from_json(const json& j) {
  require_keys(j,
               {"curriculum", "context_choices", "skip_lo", "skip_hi", "target_count",
                "target_margin", "batch_scenes", "peak_lr", "warmup_steps", "min_lr", "lambda",
                "clip_norm", "seed", "checkpoint_interval", "deterministic_timing",
                "exclude_target_frames", "fixed_context", "split_seed"},
               "TrainConfig");
  TrainConfig c;
  c.curriculum.clear();
  for (const auto& p : j.at("curriculum")) {
    require_keys(p, {"resolution", "steps"}, "curriculum phase");
    c.curriculum.push_back({p.at("resolution").get<int>(), p.at("steps").get<int>()});
  }
  c.context_choices = j.at("context_choices").get<std::vector<int>>();
  c.skip_lo = j.at("skip_lo").get<int>();
  c.skip_hi = j.at("skip_hi").get<int>();
  c.target_count = j.at("target_count").get<int>();
  c.target_margin = j.at("target_margin").get<int>();
  c.batch_scenes = j.at("batch_scenes").get<int>();
  c.peak_lr = j.at("peak_lr").get<double>();
  c.warmup_steps = j.at("warmup_steps").get<int>();
  c.min_lr = j.at("min_lr").get<double>();
  c.lambda = j.at("lambda").get<double>();
  c.clip_norm = j.at("clip_norm").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.checkpoint_interval = j.at("checkpoint_interval").get<int>();
  c.deterministic_timing = j.at("deterministic_timing").get<bool>();
  c.exclude_target_frames = j.at("exclude_target_frames").get<bool>();
  c.fixed_context = j.at("fixed_context").get<bool>();
  c.split_seed = j.at("split_seed").get<std::uint64_t>();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Initialization. Every parameter draws from its own stream keyed by name, so
// the result does not depend on enumeration order or on other parameters.

template <class T>
WeightBundle<T> init_weights(const ModelConfig& cfg, std::uint64_t seed) {
  WeightBundle<T> w;
  w.cfg = cfg;
  const Rng root(seed);
  // The attention op multiplies logits by sq*sk, so each factor starts at the
  // fourth root of the head dim: the product is the usual sqrt(d_head).
  const double qk = std::pow(double(cfg.D) / double(cfg.heads), 0.25);
  RandomFeaturizer<T> prior_init;
  if (cfg.prior == "random_featurizer" && cfg.prior_tunable)
    prior_init =
        RandomFeaturizer<T>::frozen(std::size_t(cfg.q()), std::size_t(cfg.prior_dim));
  for (const auto& spec : param_specs(cfg)) {
    Tensor<T> t(spec.shape);
    t.set_requires_grad(true);
    Rng rng = root.fork(spec.name);
    switch (spec.init) {
      case ParamInit::TruncNormal:
        for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = T(rng.trunc_normal(0.02));
        break;
      case ParamInit::Ones:
        for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = T(1);
        break;
      case ParamInit::Zeros:
        break;
      case ParamInit::QkScale:
        for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = T(qk);
        break;
      // The tunable featurizer starts from the same weights the frozen one
      // uses, so enabling learning is the only difference between the two.
      case ParamInit::PriorConv1:
        std::copy(prior_init.w1.data(), prior_init.w1.data() + t.size(), t.data());
        break;
      case ParamInit::PriorConv2:
        std::copy(prior_init.w2.data(), prior_init.w2.data() + t.size(), t.data());
        break;
    }
    w.params.emplace(spec.name, std::move(t));
  }
  return w;
}

// ---------------------------------------------------------------------------
// Loss: pixel MSE plus an optional perceptual term, squared distance in the
// feature space of a frozen random featurizer.

template <class T>
RandomFeaturizer<T> perceptual_featurizer() {
  return RandomFeaturizer<T>::frozen(4, 64);
}

template <class T>
struct LossParts {
  Tensor<T> total;
  double mse = 0, percep = 0;
};

template <class T>
LossParts<T> compute_loss(const Tensor<T>& pred, const Tensor<T>& gt, double lambda,
                          std::type_identity_t<const RandomFeaturizer<T>*> featurizer = nullptr) {
  if (pred.shape() != gt.shape())
    throw std::invalid_argument("compute_loss: prediction " + shape_str(pred.shape()) +
                                " vs target " + shape_str(gt.shape()));
  LossParts<T> parts;
  Tensor<T> d = sub(pred, gt);
  Tensor<T> mse = mean_all(mul(d, d));
  parts.mse = double(mse.item());
  if (lambda != 0.0) {
    if (!featurizer) throw std::invalid_argument("compute_loss: lambda != 0 needs a featurizer");
    Tensor<T> fd = sub(featurizer->features(pred), featurizer->features(gt));
    Tensor<T> percep = mean_all(mul(fd, fd));
    parts.percep = double(percep.item());
    parts.total = add(mse, scale(percep, T(lambda)));
  } else {
    parts.total = mse;
  }
  return parts;
}

// ---------------------------------------------------------------------------
// One optimization step. Sampling state is a pure function of (seed, step),
// which makes interrupted runs resumable without restoring generator state.

struct StepStats {
  double loss = 0, mse = 0, percep = 0, grad_norm = 0;
};

inline std::vector<std::size_t> trainable_frames(std::size_t n_frames, bool exclude_targets) {
  std::vector<std::size_t> pool;
  for (std::size_t k = 0; k < n_frames; ++k)
    if (!exclude_targets || !target_eligible(k)) pool.push_back(k);
  return pool;
}

template <class T>
StepStats train_step(WeightBundle<T>& w, AdamWState<T>& opt, const TrainConfig& tc,
                     const std::vector<LoadedScene>& scenes, std::uint64_t step,
                     std::type_identity_t<const PriorProvider<T>*> prior = nullptr,
                     std::type_identity_t<const RandomFeaturizer<T>*> percep = nullptr) {
  if (scenes.empty()) throw std::invalid_argument("train_step: no scenes");
  Rng rng = Rng(tc.seed).fork("sampler", step);
  for (auto& [name, p] : w.params) {
    (void)name;
    p.zero_grad();
  }

  Tape<T> tape;
  TapeScope<T> scope(tape);
  std::vector<Tensor<T>> losses;
  StepStats stats;
  for (int b = 0; b < tc.batch_scenes; ++b) {
    const LoadedScene& scene = scenes[rng.uniform_int(scenes.size())];
    const int V = tc.context_choices[rng.uniform_int(tc.context_choices.size())];
    const auto pool = trainable_frames(scene.images.size(), tc.exclude_target_frames);
    std::vector<std::size_t> ctx_frames, tgt_frames;
    if (tc.fixed_context) {
      ctx_frames = eval_split(scene.cameras, std::size_t(V), tc.split_seed).first;
      std::vector<std::size_t> candidates;
      for (auto k : pool)
        if (std::find(ctx_frames.begin(), ctx_frames.end(), k) == ctx_frames.end())
          candidates.push_back(k);
      if (candidates.size() < std::size_t(tc.target_count))
        throw std::invalid_argument("train_step: fixed context leaves only " +
                                    std::to_string(candidates.size()) + " target frames");
      for (int t = 0; t < tc.target_count; ++t) {
        const std::size_t j = rng.uniform_int(candidates.size());
        tgt_frames.push_back(candidates[j]);
        candidates.erase(candidates.begin() + std::ptrdiff_t(j));
      }
    } else {
      SampleConfig sc;
      sc.context_count = std::size_t(V);
      sc.skip_lo = std::size_t(tc.skip_lo);
      sc.skip_hi = std::size_t(tc.skip_hi);
      sc.target_count = std::size_t(tc.target_count);
      sc.target_margin = std::size_t(tc.target_margin);
      auto [ctx_local, tgt_local] = sample_context_target(pool.size(), sc, rng);
      for (auto i : ctx_local) ctx_frames.push_back(pool[i]);
      for (auto i : tgt_local) tgt_frames.push_back(pool[i]);
    }

    std::vector<Tensor<T>> ctx_images;
    std::vector<Camera> ctx_cams;
    for (auto i : ctx_frames) {
      ctx_images.push_back(scene.images[i]);
      ctx_cams.push_back(scene.cameras[i]);
    }
    auto [ncams, tf] = normalize_poses(ctx_cams);
    SceneKVCache<T> cache = reconstruct(ctx_images, ncams, w, tf, prior);
    for (auto i : tgt_frames) {
      const Tensor<T>& gt = scene.images[i];
      Camera tcam = tf.apply(scene.cameras[i]);
      Tensor<T> predicted = render(cache, tcam, w, gt.extent(1), gt.extent(2));
      LossParts<T> parts = compute_loss(predicted, gt, tc.lambda, percep);
      stats.mse += parts.mse;
      stats.percep += parts.percep;
      losses.push_back(parts.total);
    }
  }
  Tensor<T> total = losses[0];
  for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
  if (losses.size() > 1) total = scale(total, T(1.0 / double(losses.size())));
  stats.loss = double(total.item());
  stats.mse /= double(losses.size());
  stats.percep /= double(losses.size());
  if (!std::isfinite(stats.loss))
    throw std::runtime_error("train_step: non-finite loss at step " + std::to_string(step) +
                             " (mse " + std::to_string(stats.mse) + ", percep " +
                             std::to_string(stats.percep) + ")");
  tape.backward(total);
  stats.grad_norm = double(clip_grad_norm(w.params, T(tc.clip_norm)));
  adamw_step(w.params, opt, T(lr_at(step, tc.schedule())));
  return stats;
}

// ---------------------------------------------------------------------------
// Checkpoints: a weights container plus a sibling optimizer-state container.

template <class T>
void save_weights(const std::string& path, const WeightBundle<T>& w, std::uint64_t step = 0) {
  Container c;
  c.metadata = canonical_json(
      json{{"kind", "weights"}, {"config", model_config_to_json(w.cfg)}, {"step", step}});
  for (const auto& [name, t] : w.params) c.tensors.emplace(name, to_container(t));
  save_container(path, c);
}

template <class T>
std::pair<WeightBundle<T>, std::uint64_t> load_weights(const std::string& path) {
  const Container c = load_container(path);
  const json meta = json::parse(c.metadata);
  require_keys(meta, {"kind", "config", "step"}, "weights metadata");
  if (meta.at("kind") != "weights")
    throw std::runtime_error("load_weights: " + path + " is not a weights container");
  WeightBundle<T> w;
  w.cfg = model_config_from_json(meta.at("config"));
  for (const auto& spec : param_specs(w.cfg)) {
    auto it = c.tensors.find(spec.name);
    if (it == c.tensors.end())
      throw std::runtime_error("load_weights: missing tensor \"" + spec.name + "\"");
    if (it->second.shape != spec.shape)
      throw std::runtime_error("load_weights: tensor \"" + spec.name + "\" has shape " +
                               shape_str(it->second.shape) + ", expected " +
                               shape_str(spec.shape));
    Tensor<T> t = from_container<T>(it->second);
    t.set_requires_grad(true);
    w.params.emplace(spec.name, std::move(t));
  }
  if (c.tensors.size() != w.params.size())
    throw std::runtime_error("load_weights: container holds unexpected extra tensors");
  return {std::move(w), meta.at("step").get<std::uint64_t>()};
}

template <class T>
void save_optimizer(const std::string& path, const AdamWState<T>& s) {
  Container c;
  c.metadata = canonical_json(json{{"kind", "adamw"},
                                   {"step", s.step},
                                   {"beta1", s.beta1},
                                   {"beta2", s.beta2},
                                   {"weight_decay", s.weight_decay},
                                   {"eps", s.eps}});
  auto put = [&](const std::string& prefix, const std::map<std::string, std::vector<T>>& slot) {
    for (const auto& [name, v] : slot) {
      ContainerTensor t;
      t.shape = {v.size()};
      t.data.assign(v.begin(), v.end());
      c.tensors.emplace(prefix + name, std::move(t));
    }
  };
  put("m.", s.m);
  put("v.", s.v);
  save_container(path, c);
}

template <class T>
AdamWState<T> load_optimizer(const std::string& path) {
  const Container c = load_container(path);
  const json meta = json::parse(c.metadata);
  require_keys(meta, {"kind", "step", "beta1", "beta2", "weight_decay", "eps"},
               "optimizer metadata");
  if (meta.at("kind") != "adamw")
    throw std::runtime_error("load_optimizer: " + path + " is not an optimizer container");
  AdamWState<T> s;
  s.step = meta.at("step").get<std::uint64_t>();
  s.beta1 = meta.at("beta1").get<double>();
  s.beta2 = meta.at("beta2").get<double>();
  s.weight_decay = meta.at("weight_decay").get<double>();
  s.eps = meta.at("eps").get<double>();
  for (const auto& [name, t] : c.tensors) {
    if (name.rfind("m.", 0) == 0)
      s.m[name.substr(2)] = std::vector<T>(t.data.begin(), t.data.end());
    else if (name.rfind("v.", 0) == 0)
      s.v[name.substr(2)] = std::vector<T>(t.data.begin(), t.data.end());
    else
      throw std::runtime_error("load_optimizer: unexpected tensor \"" + name + "\"");
  }
  return s;
}

// ---------------------------------------------------------------------------
// Full run: curriculum phases, per-step metrics CSV, periodic checkpoints.

struct TrainOutput {
  std::string final_weights;
  std::string metrics_csv;
  std::uint64_t steps = 0;
};

template <class T>
TrainOutput run_training(const ModelConfig& mc, const TrainConfig& tc,
                         const std::string& data_root, const std::string& out_dir,
                         std::uint64_t resume_step = 0) {
  namespace fs = std::filesystem;
  tc.validate();
  fs::create_directories(out_dir);
  const DatasetManifest manifest = load_manifest(data_root);

  WeightBundle<T> w;
  AdamWState<T> opt;
  if (resume_step > 0) {
    const std::string base = out_dir + "/ckpt_" + std::to_string(resume_step);
    auto [loaded, step] = load_weights<T>(base + ".dvsm");
    if (step != resume_step)
      throw std::runtime_error("run_training: checkpoint step mismatch in " + base);
    w = std::move(loaded);
    opt = load_optimizer<T>(base + ".opt.dvsm");
  } else {
    w = init_weights<T>(mc, tc.seed);
  }

  PriorProvider<T> prior;
  if (mc.prior != "none") prior = PriorProvider<T>::make(mc);
  RandomFeaturizer<T> percep;
  if (tc.lambda != 0.0) percep = perceptual_featurizer<T>();

  const std::string csv_path = out_dir + "/metrics.csv";
  std::ofstream csv;
  if (resume_step > 0) {
    csv.open(csv_path, std::ios::app);
  } else {
    csv.open(csv_path, std::ios::trunc);
    csv << "step,phase,lr,loss,mse,percep,wallclock_ms\n";
  }
  if (!csv) throw std::runtime_error("run_training: cannot open " + csv_path);

  // Scenes reload when the curriculum switches resolution.
  int loaded_resolution = -1;
  std::vector<LoadedScene> scenes;
  auto ensure_scenes = [&](int res) {
    if (res == loaded_resolution) return;
    scenes.clear();
    for (auto id : manifest.train_scenes)
      scenes.push_back(load_scene(data_root + "/scene_" + std::to_string(id), res));
    loaded_resolution = res;
  };

  const std::uint64_t total = std::uint64_t(tc.total_steps());
  const LrSchedule sched = tc.schedule();
  std::uint64_t phase_end = 0;
  int phase_res = 0;
  std::size_t phase_idx = 0;
  for (std::uint64_t step = 0; step < total; ++step) {
    while (step >= phase_end) {
      phase_res = tc.curriculum[phase_idx].resolution;
      phase_end += std::uint64_t(tc.curriculum[phase_idx].steps);
      ++phase_idx;
    }
    if (step < resume_step) continue;
    ensure_scenes(phase_res);

    const auto t0 = std::chrono::steady_clock::now();
    StepStats st = train_step(w, opt, tc, scenes, step, mc.prior != "none" ? &prior : nullptr,
                              tc.lambda != 0.0 ? &percep : nullptr);
    double ms = 0.0;
    if (!tc.deterministic_timing)
      ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
               .count();

    char line[256];
    std::snprintf(line, sizeof(line), "%llu,%d,%.10g,%.10g,%.10g,%.10g,%.3f\n",
                  static_cast<unsigned long long>(step), phase_res, lr_at(step, sched), st.loss,
                  st.mse, st.percep, ms);
    csv << line;

    const std::uint64_t done = step + 1;
    if (done % std::uint64_t(tc.checkpoint_interval) == 0 || done == total) {
      const std::string base = out_dir + "/ckpt_" + std::to_string(done);
      save_weights(base + ".dvsm", w, done);
      save_optimizer(base + ".opt.dvsm", opt);
    }
  }
  csv.close();

  const std::string final_path = out_dir + "/final.dvsm";
  save_weights(final_path, w, total);
  return {final_path, csv_path, total};
}

}  // namespace dvsm
