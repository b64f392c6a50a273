#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dvsm/gradcheck.hpp"
#include "dvsm/scenes.hpp"
#include "dvsm/train.hpp"

using namespace dvsm;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

ModelConfig micro_config() {
  ModelConfig c;
  c.D = 8;
  c.L = 2;
  c.heads = 2;
  c.p1 = c.p2 = 2;
  return c;
}

std::string tmp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) out.push_back(line);
  return out;
}

template <class T>
bool same_bits(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

template <class T>
std::map<std::string, std::vector<T>> snapshot(const WeightBundle<T>& w) {
  std::map<std::string, std::vector<T>> s;
  for (const auto& [name, t] : w.params)
    s.emplace(name, std::vector<T>(t.data(), t.data() + t.size()));
  return s;
}

TrainConfig tiny_train_config(int steps, int resolution) {
  TrainConfig tc;
  tc.curriculum = {{resolution, steps}};
  tc.context_choices = {2};
  tc.skip_lo = 1;
  tc.skip_hi = 2;
  tc.target_count = 1;
  tc.target_margin = 1;
  tc.peak_lr = 3e-3;
  tc.warmup_steps = 10;
  tc.min_lr = 3e-4;
  tc.lambda = 0.0;
  tc.seed = 5;
  tc.checkpoint_interval = 1000;
  return tc;
}

}  // namespace

TEST_CASE("weight initialization is seeded per parameter") {
  const ModelConfig cfg = micro_config();
  const WeightBundle<float> a = init_weights<float>(cfg, 7);
  const WeightBundle<float> b = init_weights<float>(cfg, 7);
  const WeightBundle<float> c = init_weights<float>(cfg, 8);

  for (const auto& [name, t] : a.params) CHECK(same_bits(t, b.params.at(name)));
  CHECK_FALSE(same_bits(a.params.at("pe_rgb"), c.params.at("pe_rgb")));

  // Norm affines start at identity.
  for (const auto* name : {"input_ln.g", "block0.intra.ln.g", "block1.cross.ln.g"})
    for (std::size_t i = 0; i < a.params.at(name).size(); ++i)
      CHECK(a.params.at(name).data()[i] == 1.0f);
  for (const auto* name : {"input_ln.b", "block0.mlp_a.ln.b", "head.ln.b"})
    for (std::size_t i = 0; i < a.params.at(name).size(); ++i)
      CHECK(a.params.at(name).data()[i] == 0.0f);

  // Random weights respect the two-sigma cutoff but are not degenerate.
  for (const auto* name : {"pe_rgb", "pe_ray", "block0.intra.wq", "head.w_out"}) {
    const Tensor<float>& t = a.params.at(name);
    float largest = 0.0f;
    for (std::size_t i = 0; i < t.size(); ++i) {
      CHECK(std::abs(t.data()[i]) <= 0.04f + 1e-7f);
      largest = std::max(largest, std::abs(t.data()[i]));
    }
    CHECK(largest > 0.015f);
  }

  // The two attention scales multiply together inside the logits, so each
  // starts at the fourth root of the head dimension.
  const double head_dim = double(cfg.D) / double(cfg.heads);
  const Tensor<float>& sq = a.params.at("block0.intra.sq");
  const Tensor<float>& sk = a.params.at("block0.intra.sk");
  REQUIRE(sq.size() == std::size_t(cfg.heads));
  for (std::size_t h = 0; h < sq.size(); ++h) {
    CHECK(double(sq.data()[h]) == Approx(std::pow(head_dim, 0.25)).epsilon(1e-6));
    CHECK(double(sq.data()[h]) * double(sk.data()[h]) ==
          Approx(std::sqrt(head_dim)).epsilon(1e-6));
  }

  // Each parameter draws from a stream keyed by its own name, so adding
  // parameters elsewhere does not disturb existing ones.
  ModelConfig split = cfg;
  split.decouple = {"entire_decoder"};
  const WeightBundle<float> d = init_weights<float>(split, 7);
  for (const auto* name :
       {"pe_rgb", "pe_ray", "head.w_out", "block0.cross.wk", "block0.intra.wq"})
    CHECK(same_bits(a.params.at(name), d.params.at(name)));
  REQUIRE(d.params.count("pe_ray@rend") == 1);
  CHECK_FALSE(same_bits(d.params.at("pe_ray@rend"), d.params.at("pe_ray")));
}

TEST_CASE("loss combines pixel and perceptual terms") {
  Rng rng(404);
  Tensor<float> pred({3, 8, 8});
  Tensor<float> gt({3, 8, 8});
  for (std::size_t i = 0; i < pred.size(); ++i) {
    pred.data()[i] = float(0.5 + 0.2 * rng.normal());
    gt.data()[i] = float(0.5 + 0.2 * rng.normal());
  }

  const LossParts<float> pixel_only = compute_loss<float>(pred, gt, 0.0);
  CHECK(pixel_only.percep == 0.0);
  CHECK(double(pixel_only.total.item()) == Approx(pixel_only.mse).epsilon(1e-6));

  const RandomFeaturizer<float> feat = perceptual_featurizer<float>();
  const LossParts<float> both = compute_loss<float>(pred, gt, 0.25, &feat);
  CHECK(both.mse == Approx(pixel_only.mse).epsilon(1e-6));
  CHECK(both.percep > 0.0);
  CHECK(double(both.total.item()) == Approx(both.mse + 0.25 * both.percep).epsilon(1e-5));

  CHECK_THROWS_AS(compute_loss<float>(pred, gt, 0.25), std::invalid_argument);
  Tensor<float> wrong({3, 4, 4});
  CHECK_THROWS_AS(compute_loss<float>(pred, wrong, 0.0), std::invalid_argument);
}

TEST_CASE("loss gradients match finite differences") {
  Rng rng(405);
  Tensor<double> pred({3, 4, 4});
  Tensor<double> gt({3, 4, 4});
  for (std::size_t i = 0; i < pred.size(); ++i) {
    pred.data()[i] = 0.5 + 0.25 * rng.normal();
    gt.data()[i] = 0.5 + 0.25 * rng.normal();
  }
  const RandomFeaturizer<double> feat = perceptual_featurizer<double>();
  auto f = [&]() { return compute_loss<double>(pred, gt, 0.3, &feat).total; };
  CHECK(grad_check(f, {pred}, 1e-5) < 1e-6);
}

TEST_CASE("zero learning rate leaves weights untouched") {
  const std::string root = tmp_dir("dvsm_train_zero");
  make_dataset(1, 9, {16}, 501, root);
  std::vector<LoadedScene> scenes{load_scene(root + "/scene_0", 16)};

  WeightBundle<float> w = init_weights<float>(micro_config(), 5);
  const auto before = snapshot(w);
  AdamWState<float> opt;
  TrainConfig tc = tiny_train_config(1, 16);
  tc.peak_lr = 0.0;
  tc.warmup_steps = 0;
  tc.min_lr = 0.0;

  const StepStats st = train_step(w, opt, tc, scenes, 0);
  CHECK(st.grad_norm > 0.0);
  CHECK(std::isfinite(st.loss));
  CHECK(opt.step == 1);
  for (const auto& [name, t] : w.params) {
    const auto& old = before.at(name);
    CHECK(std::memcmp(t.data(), old.data(), old.size() * sizeof(float)) == 0);
  }
}

TEST_CASE("a short run reduces the loss") {
  const std::string root = tmp_dir("dvsm_train_short");
  make_dataset(1, 9, {16}, 502, root);
  std::vector<LoadedScene> scenes{load_scene(root + "/scene_0", 16)};

  ModelConfig mc = micro_config();
  mc.D = 16;
  WeightBundle<float> w = init_weights<float>(mc, 3);
  AdamWState<float> opt;
  const int steps = 80;
  TrainConfig tc = tiny_train_config(steps, 16);
  tc.seed = 3;

  std::vector<double> losses;
  for (int s = 0; s < steps; ++s) {
    const StepStats st = train_step(w, opt, tc, scenes, std::uint64_t(s));
    REQUIRE(std::isfinite(st.loss));
    losses.push_back(st.loss);
  }
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 15; ++i) {
    head += losses[std::size_t(i)];
    tail += losses[losses.size() - 1 - std::size_t(i)];
  }
  CHECK(tail < 0.7 * head);
}

TEST_CASE("checkpoints round-trip bitwise") {
  const std::string root = tmp_dir("dvsm_train_ckpt");
  make_dataset(1, 9, {16}, 503, root);
  std::vector<LoadedScene> scenes{load_scene(root + "/scene_0", 16)};

  WeightBundle<float> w = init_weights<float>(micro_config(), 9);
  AdamWState<float> opt;
  const TrainConfig tc = tiny_train_config(3, 16);
  for (int s = 0; s < 3; ++s) train_step(w, opt, tc, scenes, std::uint64_t(s));

  const std::string wpath = root + "/w.dvsm";
  const std::string opath = root + "/o.dvsm";
  save_weights(wpath, w, 3);
  save_optimizer(opath, opt);

  auto [loaded, step] = load_weights<float>(wpath);
  CHECK(step == 3);
  CHECK(config_hash(loaded.cfg) == config_hash(w.cfg));
  REQUIRE(loaded.params.size() == w.params.size());
  for (const auto& [name, t] : w.params) CHECK(same_bits(t, loaded.params.at(name)));

  const AdamWState<float> opt2 = load_optimizer<float>(opath);
  CHECK(opt2.step == opt.step);
  CHECK(opt2.beta1 == opt.beta1);
  CHECK(opt2.beta2 == opt.beta2);
  CHECK(opt2.weight_decay == opt.weight_decay);
  CHECK(opt2.eps == opt.eps);
  REQUIRE(opt2.m.size() == opt.m.size());
  REQUIRE(opt2.v.size() == opt.v.size());
  for (const auto& [name, vec] : opt.m) CHECK(opt2.m.at(name) == vec);
  for (const auto& [name, vec] : opt.v) CHECK(opt2.v.at(name) == vec);
}

TEST_CASE("damaged checkpoints are rejected") {
  const std::string root = tmp_dir("dvsm_train_badckpt");
  const WeightBundle<float> w = init_weights<float>(micro_config(), 2);
  AdamWState<float> opt;
  opt.m["x"] = {1.0f};
  opt.v["x"] = {2.0f};
  const std::string wpath = root + "/w.dvsm";
  const std::string opath = root + "/o.dvsm";
  save_weights(wpath, w, 0);
  save_optimizer(opath, opt);

  CHECK_THROWS(load_weights<float>(opath));
  CHECK_THROWS(load_optimizer<float>(wpath));
  CHECK_THROWS_AS(load_weights<float>(root + "/nope.dvsm"), std::runtime_error);

  Container c = load_container(wpath);
  Container missing = c;
  missing.tensors.erase("head.w_out");
  save_container(root + "/missing.dvsm", missing);
  CHECK_THROWS_WITH(load_weights<float>(root + "/missing.dvsm"),
                    Catch::Matchers::ContainsSubstring("head.w_out"));

  Container extra = c;
  extra.tensors.emplace("zzz_unknown", c.tensors.at("pe_rgb"));
  save_container(root + "/extra.dvsm", extra);
  CHECK_THROWS_AS(load_weights<float>(root + "/extra.dvsm"), std::runtime_error);

  Container reshaped = c;
  ContainerTensor& t = reshaped.tensors.at("head.w_out");
  t.shape = {t.data.size()};
  save_container(root + "/reshaped.dvsm", reshaped);
  CHECK_THROWS_WITH(load_weights<float>(root + "/reshaped.dvsm"),
                    Catch::Matchers::ContainsSubstring("shape"));
}

TEST_CASE("training runs are reproducible and resumable") {
  const std::string data = tmp_dir("dvsm_run_data");
  make_dataset(2, 9, {16, 24}, 9001, data);

  const ModelConfig mc = micro_config();
  TrainConfig tc = tiny_train_config(0, 16);
  tc.curriculum = {{16, 2}, {24, 2}};
  tc.peak_lr = 1e-3;
  tc.warmup_steps = 1;
  tc.lambda = 0.2;
  tc.seed = 11;
  tc.checkpoint_interval = 2;

  const std::string dir_a = tmp_dir("dvsm_run_a");
  const TrainOutput out_a = run_training<float>(mc, tc, data, dir_a);
  CHECK(out_a.steps == 4);
  CHECK(fs::exists(dir_a + "/ckpt_2.dvsm"));
  CHECK(fs::exists(dir_a + "/ckpt_2.opt.dvsm"));
  CHECK(fs::exists(dir_a + "/ckpt_4.dvsm"));
  CHECK(fs::exists(out_a.final_weights));

  const auto rows = lines_of(slurp(out_a.metrics_csv));
  REQUIRE(rows.size() == 5);
  CHECK(rows[0] == "step,phase,lr,loss,mse,percep,wallclock_ms");
  for (std::size_t r = 1; r < rows.size(); ++r) {
    std::istringstream ss(rows[r]);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    REQUIRE(fields.size() == 7);
    CHECK(fields[0] == std::to_string(r - 1));
    CHECK(fields[1] == (r <= 2 ? "16" : "24"));
    CHECK(std::stod(fields[3]) > 0.0);
    CHECK(std::stod(fields[5]) > 0.0);
    CHECK(fields[6] == "0.000");
  }

  // Same configuration, fresh directory: byte-identical outputs.
  const std::string dir_b = tmp_dir("dvsm_run_b");
  const TrainOutput out_b = run_training<float>(mc, tc, data, dir_b);
  CHECK(slurp(out_b.final_weights) == slurp(out_a.final_weights));
  CHECK(slurp(out_b.metrics_csv) == slurp(out_a.metrics_csv));

  // Resuming from the mid-run checkpoint replays the remaining steps exactly.
  const std::string dir_c = tmp_dir("dvsm_run_c");
  fs::copy_file(dir_a + "/ckpt_2.dvsm", dir_c + "/ckpt_2.dvsm");
  fs::copy_file(dir_a + "/ckpt_2.opt.dvsm", dir_c + "/ckpt_2.opt.dvsm");
  const TrainOutput out_c = run_training<float>(mc, tc, data, dir_c, 2);
  CHECK(slurp(out_c.final_weights) == slurp(out_a.final_weights));
  const auto tail = lines_of(slurp(out_c.metrics_csv));
  REQUIRE(tail.size() == 2);
  CHECK(tail[0] == rows[3]);
  CHECK(tail[1] == rows[4]);

  const std::string dir_d = tmp_dir("dvsm_run_d");
  CHECK_THROWS_AS(run_training<float>(mc, tc, data, dir_d, 2), std::runtime_error);
}

TEST_CASE("frame pools respect target exclusion") {
  CHECK(trainable_frames(9, true) == std::vector<std::size_t>{1, 2, 3, 4, 5, 6, 7});
  CHECK(trainable_frames(9, false) ==
        std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8});
  const auto pool = trainable_frames(17, true);
  CHECK(pool.size() == 14);
  for (auto k : pool) CHECK(k % 8 != 0);
}
