#pragma once

#include <string>
#include <vector>

#include "dvsm/jsonutil.hpp"
#include "dvsm/model.hpp"
#include "dvsm/train.hpp"

namespace dvsm {

struct DataConfig {
  std::string root = "data";
  int n_scenes = 8;
  int frames_per_scene = 33;
  std::vector<int> resolutions{16, 32, 48, 64};
};

struct EvalConfig {
  int context_k = 4;
  int resolution = 0;  // 0 = native (largest generated)
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  EvalConfig eval;
  std::uint64_t seed = 1;
  std::string output_dir = "out";
};

inline json run_config_to_json(const RunConfig& c) {
  return json{{"model", model_config_to_json(c.model)},
              {"train", train_config_to_json(c.train)},
              {"data", json{{"root", c.data.root},
                            {"n_scenes", c.data.n_scenes},
                            {"frames_per_scene", c.data.frames_per_scene},
                            {"resolutions", c.data.resolutions}}},
              {"eval", json{{"context_k", c.eval.context_k}, {"resolution", c.eval.resolution}}},
              {"seed", c.seed},
              {"output_dir", c.output_dir}};
}

inline RunConfig run_config_from_json(const json& j) {
  require_keys(j, {"model", "train", "data", "eval", "seed", "output_dir"}, "RunConfig");
  RunConfig c;
  c.model = model_config_from_json(j.at("model"));
  c.train = train_config_from_json(j.at("train"));
  const json& d = j.at("data");
  require_keys(d, {"root", "n_scenes", "frames_per_scene", "resolutions"}, "DataConfig");
  c.data.root = d.at("root").get<std::string>();
  c.data.n_scenes = d.at("n_scenes").get<int>();
  c.data.frames_per_scene = d.at("frames_per_scene").get<int>();
  c.data.resolutions = d.at("resolutions").get<std::vector<int>>();
  const json& e = j.at("eval");
  require_keys(e, {"context_k", "resolution"}, "EvalConfig");
  c.eval.context_k = e.at("context_k").get<int>();
  c.eval.resolution = e.at("resolution").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.output_dir = j.at("output_dir").get<std::string>();
  if (c.data.n_scenes <= 0 || c.data.frames_per_scene <= 0 || c.data.resolutions.empty())
    throw std::invalid_argument("DataConfig: need positive counts and at least one resolution");
  if (c.eval.context_k <= 0) throw std::invalid_argument("EvalConfig: context_k must be positive");
  return c;
}

inline int native_resolution(const DataConfig& d) {
  return *std::max_element(d.resolutions.begin(), d.resolutions.end());
}

// Apply one "--set path.to.key=value" override. The path must already exist,
// so typos fail loudly instead of adding dead keys. Values parse as JSON with
// a bare-string fallback ("--set data.root=in" works without quoting).
inline void apply_override(json& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw std::invalid_argument("override \"" + assignment + "\" is not of the form key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);

  json* node = &root;
  std::size_t start = 0;
  for (;;) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
    if (!node->is_object() || !node->contains(key))
      throw std::invalid_argument("override path \"" + path + "\": no key \"" + key + "\"");
    node = &(*node)[key];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  *node = value;
}

// Defaults, then an optional config file (merged key by key), then overrides.
inline RunConfig resolve_run_config(const std::string& config_path,
                                    const std::vector<std::string>& overrides,
                                    json* resolved = nullptr) {
  json j = run_config_to_json(RunConfig{});
  if (!config_path.empty()) j.merge_patch(read_json_file(config_path));
  for (const auto& o : overrides) apply_override(j, o);
  RunConfig c = run_config_from_json(j);
  if (resolved) *resolved = run_config_to_json(c);
  return c;
}

}  // namespace dvsm
