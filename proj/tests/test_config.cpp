#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "dvsm/config.hpp"

using namespace dvsm;
namespace fs = std::filesystem;

namespace {

std::string write_tmp_json(const std::string& name, const json& j) {
  const fs::path p = fs::temp_directory_path() / name;
  std::ofstream f(p);
  f << j.dump(2);
  return p.string();
}

}  // namespace

TEST_CASE("run config round-trips through json") {
  RunConfig c;
  c.model.D = 32;
  c.model.L = 3;
  c.model.heads = 2;
  c.model.decouple = {"ffn"};
  c.train.curriculum = {{16, 5}, {32, 7}};
  c.train.lambda = 0.125;
  c.data.root = "elsewhere";
  c.data.resolutions = {16, 32};
  c.eval.context_k = 6;
  c.seed = 99;
  c.output_dir = "runs/x";

  const json j = run_config_to_json(c);
  const RunConfig back = run_config_from_json(j);
  CHECK(run_config_to_json(back) == j);
  CHECK(back.model.D == 32);
  CHECK(back.model.decouple == std::set<std::string>{"ffn"});
  CHECK(back.train.curriculum.size() == 2);
  CHECK(back.train.curriculum[1].resolution == 32);
  CHECK(back.train.lambda == 0.125);
  CHECK(back.data.root == "elsewhere");
  CHECK(back.eval.context_k == 6);
  CHECK(back.seed == 99);
  CHECK(back.output_dir == "runs/x");
}

TEST_CASE("unknown or missing keys are rejected") {
  json j = run_config_to_json(RunConfig{});
  json extra = j;
  extra["surprise"] = 1;
  CHECK_THROWS_AS(run_config_from_json(extra), std::invalid_argument);

  json nested = j;
  nested["data"]["surprise"] = 1;
  CHECK_THROWS_AS(run_config_from_json(nested), std::invalid_argument);

  json missing = j;
  missing.erase("eval");
  CHECK_THROWS_AS(run_config_from_json(missing), std::invalid_argument);

  json bad_counts = j;
  bad_counts["data"]["n_scenes"] = 0;
  CHECK_THROWS_AS(run_config_from_json(bad_counts), std::invalid_argument);

  // Nested sections run their own validation.
  json bad_model = j;
  bad_model["model"]["D"] = 30;
  bad_model["model"]["heads"] = 4;
  CHECK_THROWS_AS(run_config_from_json(bad_model), std::invalid_argument);
}

TEST_CASE("overrides follow existing paths and parse json values") {
  json j = run_config_to_json(RunConfig{});

  apply_override(j, "model.D=128");
  CHECK(j["model"]["D"] == 128);
  apply_override(j, "train.lambda=0.5");
  CHECK(j["train"]["lambda"] == 0.5);
  apply_override(j, "data.resolutions=[16,48]");
  CHECK(j["data"]["resolutions"] == json::array({16, 48}));
  apply_override(j, "train.deterministic_timing=false");
  CHECK(j["train"]["deterministic_timing"] == false);
  // Bare strings work unquoted.
  apply_override(j, "data.root=renders/in");
  CHECK(j["data"]["root"] == "renders/in");
  apply_override(j, "model.prior=random_featurizer");
  CHECK(j["model"]["prior"] == "random_featurizer");

  CHECK_THROWS_AS(apply_override(j, "model.depth=3"), std::invalid_argument);
  CHECK_THROWS_AS(apply_override(j, "model.D.x=3"), std::invalid_argument);
  CHECK_THROWS_AS(apply_override(j, "model.D"), std::invalid_argument);
  CHECK_THROWS_AS(apply_override(j, "=5"), std::invalid_argument);
}

TEST_CASE("resolution defaults to the largest generated") {
  DataConfig d;
  d.resolutions = {32, 64, 16};
  CHECK(native_resolution(d) == 64);
}

TEST_CASE("config resolution layers defaults, file, then overrides") {
  json partial{{"model", json{{"D", 128}, {"L", 6}}},
               {"train", json{{"peak_lr", 1e-3}}},
               {"output_dir", "from_file"}};
  const std::string path = write_tmp_json("dvsm_cfg_partial.json", partial);

  json resolved;
  const RunConfig c = resolve_run_config(path, {"model.L=2", "seed=7"}, &resolved);
  // File beats defaults, override beats file, untouched keys keep defaults.
  CHECK(c.model.D == 128);
  CHECK(c.model.L == 2);
  CHECK(c.train.peak_lr == 1e-3);
  CHECK(c.seed == 7);
  CHECK(c.output_dir == "from_file");
  CHECK(c.model.heads == ModelConfig{}.heads);
  CHECK(resolved == run_config_to_json(c));

  // No file at all still resolves.
  const RunConfig d = resolve_run_config("", {"model.D=16"});
  CHECK(d.model.D == 16);

  CHECK_THROWS(resolve_run_config("/nonexistent/config.json", {}));
  const std::string junk = write_tmp_json("dvsm_cfg_junk.json", json{{"bogus", 1}});
  CHECK_THROWS_AS(resolve_run_config(junk, {}), std::invalid_argument);
}
