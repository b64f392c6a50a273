#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dvsm/container.hpp"
#include "dvsm/geometry.hpp"
#include "dvsm/jsonutil.hpp"
#include "dvsm/ops.hpp"
#include "dvsm/rng.hpp"
#include "dvsm/tensor.hpp"

namespace dvsm {

// ---------------------------------------------------------------------------
// Configuration

inline const std::set<std::string>& valid_decouple_flags() {
  static const std::set<std::string> s{"input_proj", "intra_attn", "cross_qo", "ffn",
                                       "entire_decoder"};
  return s;
}

struct ModelConfig {
  int D = 64;
  int L = 4;
  int heads = 4;
  int p1 = 4;  // reconstruction patch size
  int p2 = 4;  // rendering patch size
  std::set<std::string> decouple;
  bool recon_cross_view = true;
  std::string block_variant = "full";      // full | no_mid_ffn | no_intra
  std::string arch_variant = "kv_cache";   // kv_cache | concat_baseline
  std::string prior = "none";              // none | random_featurizer | file
  int prior_patch = 0;                     // 0 = use max(p1, p2)
  int prior_dim = 64;
  bool prior_tunable = false;
  std::string prior_file;

  // Shared receptive patch: both stages tokenize at this patch size.
  int q() const { return prior != "none" && prior_patch > 0 ? prior_patch : std::max(p1, p2); }

  bool has_intra() const { return block_variant != "no_intra"; }
  bool has_mid_ffn() const { return block_variant == "full"; }

  void validate() const {
    auto patch_ok = [](int p) { return p == 2 || p == 4 || p == 8 || p == 16; };
    if (D <= 0 || L <= 0 || heads <= 0 || D % heads != 0)
      throw std::invalid_argument("ModelConfig: need D > 0 divisible by heads, L > 0");
    if (!patch_ok(p1) || !patch_ok(p2))
      throw std::invalid_argument("ModelConfig: patch sizes must be one of {2,4,8,16}");
    if (prior_patch != 0 && !patch_ok(prior_patch))
      throw std::invalid_argument("ModelConfig: prior_patch must be 0 or one of {2,4,8,16}");
    for (const auto& f : decouple)
      if (!valid_decouple_flags().count(f))
        throw std::invalid_argument("ModelConfig: unknown decouple flag \"" + f + "\"");
    if (block_variant != "full" && block_variant != "no_mid_ffn" && block_variant != "no_intra")
      throw std::invalid_argument("ModelConfig: unknown block_variant \"" + block_variant + "\"");
    if (arch_variant != "kv_cache" && arch_variant != "concat_baseline")
      throw std::invalid_argument("ModelConfig: unknown arch_variant \"" + arch_variant + "\"");
    if (prior != "none" && prior != "random_featurizer" && prior != "file")
      throw std::invalid_argument("ModelConfig: unknown prior \"" + prior + "\"");
    if (prior != "none" && prior_dim <= 0)
      throw std::invalid_argument("ModelConfig: prior_dim must be positive");
  }
};

inline json model_config_to_json(const ModelConfig& c) {
  return json{{"D", c.D},
              {"L", c.L},
              {"heads", c.heads},
              {"p1", c.p1},
              {"p2", c.p2},
              {"decouple", std::vector<std::string>(c.decouple.begin(), c.decouple.end())},
              {"recon_cross_view", c.recon_cross_view},
              {"block_variant", c.block_variant},
              {"arch_variant", c.arch_variant},
              {"prior", c.prior},
              {"prior_patch", c.prior_patch},
              {"prior_dim", c.prior_dim},
              {"prior_tunable", c.prior_tunable},
              {"prior_file", c.prior_file}};
}

inline ModelConfig model_config_from_json(const json& j) {
  require_keys(j,
               {"D", "L", "heads", "p1", "p2", "decouple", "recon_cross_view", "block_variant",
                "arch_variant", "prior", "prior_patch", "prior_dim", "prior_tunable",
                "prior_file"},
               "ModelConfig");
  ModelConfig c;
  c.D = j.at("D").get<int>();
  c.L = j.at("L").get<int>();
  c.heads = j.at("heads").get<int>();
  c.p1 = j.at("p1").get<int>();
  c.p2 = j.at("p2").get<int>();
  for (const auto& f : j.at("decouple")) c.decouple.insert(f.get<std::string>());
  c.recon_cross_view = j.at("recon_cross_view").get<bool>();
  c.block_variant = j.at("block_variant").get<std::string>();
  c.arch_variant = j.at("arch_variant").get<std::string>();
  c.prior = j.at("prior").get<std::string>();
  c.prior_patch = j.at("prior_patch").get<int>();
  c.prior_dim = j.at("prior_dim").get<int>();
  c.prior_tunable = j.at("prior_tunable").get<bool>();
  c.prior_file = j.at("prior_file").get<std::string>();
  c.validate();
  return c;
}

inline std::uint64_t config_hash(const ModelConfig& c) {
  const std::string s = canonical_json(model_config_to_json(c));
  return fnv1a64(s.data(), s.size());
}

// ---------------------------------------------------------------------------
// Parameter store

enum class Stage { Recon, Rend };

// Parameters the rendering stage reads. Decoupling can only duplicate these:
// a parameter used by one stage alone has no sharing to break. Cross-view
// wk/wv are excluded because rendering consumes cached K/V and never applies
// them; pe_rgb, the prior, and the head are single-stage by construction.
inline bool rendering_path_param(const std::string& name) {
  if (name == "pe_ray" || name.rfind("input_ln.", 0) == 0) return true;
  if (name.rfind("block", 0) != 0) return false;
  if (name.find(".intra.") != std::string::npos) return true;
  if (name.find(".mlp_a.") != std::string::npos) return true;
  if (name.find(".mlp_b.") != std::string::npos) return true;
  const auto cross = name.find(".cross.");
  if (cross == std::string::npos) return false;
  const std::string leaf = name.substr(cross + 7);
  return leaf == "ln.g" || leaf == "ln.b" || leaf == "wq" || leaf == "wo" || leaf == "sq" ||
         leaf == "sk";
}

inline bool decouple_covers(const ModelConfig& cfg, const std::string& name) {
  if (cfg.decouple.count("entire_decoder")) return rendering_path_param(name);
  if (cfg.decouple.count("input_proj") &&
      (name == "pe_ray" || name.rfind("input_ln.", 0) == 0))
    return true;
  if (cfg.decouple.count("intra_attn") && name.rfind("block", 0) == 0 &&
      name.find(".intra.") != std::string::npos)
    return true;
  if (cfg.decouple.count("cross_qo") && name.rfind("block", 0) == 0) {
    const auto cross = name.find(".cross.");
    if (cross != std::string::npos) {
      const std::string leaf = name.substr(cross + 7);
      if (leaf == "wq" || leaf == "wo") return true;
    }
  }
  if (cfg.decouple.count("ffn") && name.rfind("block", 0) == 0 &&
      (name.find(".mlp_a.") != std::string::npos || name.find(".mlp_b.") != std::string::npos))
    return true;
  return false;
}

enum class ParamInit { TruncNormal, Ones, Zeros, QkScale, PriorConv1, PriorConv2 };

struct ParamSpec {
  std::string name;
  Shape shape;
  ParamInit init;
};

// Strides of the two patch-aligned conv layers composing the featurizer.
inline std::pair<std::size_t, std::size_t> featurizer_strides(std::size_t q) {
  switch (q) {
    case 2: return {2, 1};
    case 4: return {2, 2};
    case 8: return {4, 2};
    case 16: return {4, 4};
    default: throw std::invalid_argument("featurizer_strides: unsupported patch " + std::to_string(q));
  }
}

inline constexpr std::size_t kFeaturizerHidden = 32;

inline std::vector<ParamSpec> param_specs(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t D = std::size_t(cfg.D), H = std::size_t(cfg.heads);
  const std::size_t q = std::size_t(cfg.q()), p2 = std::size_t(cfg.p2);
  std::vector<ParamSpec> specs;
  auto ln = [&](const std::string& prefix) {
    specs.push_back({prefix + ".ln.g", {D}, ParamInit::Ones});
    specs.push_back({prefix + ".ln.b", {D}, ParamInit::Zeros});
  };
  auto attn = [&](const std::string& prefix) {
    ln(prefix);
    for (const char* w : {"wq", "wk", "wv", "wo"})
      specs.push_back({prefix + "." + w, {D, D}, ParamInit::TruncNormal});
    specs.push_back({prefix + ".sq", {H}, ParamInit::QkScale});
    specs.push_back({prefix + ".sk", {H}, ParamInit::QkScale});
  };
  auto mlp = [&](const std::string& prefix) {
    ln(prefix);
    specs.push_back({prefix + ".w1", {D, 4 * D}, ParamInit::TruncNormal});
    specs.push_back({prefix + ".w2", {4 * D, D}, ParamInit::TruncNormal});
  };

  specs.push_back({"pe_ray", {6 * q * q, D}, ParamInit::TruncNormal});
  specs.push_back({"pe_rgb", {3 * q * q, D}, ParamInit::TruncNormal});
  specs.push_back({"input_ln.g", {D}, ParamInit::Ones});
  specs.push_back({"input_ln.b", {D}, ParamInit::Zeros});
  for (int i = 0; i < cfg.L; ++i) {
    const std::string bp = "block" + std::to_string(i);
    if (cfg.has_intra()) attn(bp + ".intra");
    if (cfg.has_mid_ffn()) mlp(bp + ".mlp_a");
    attn(bp + ".cross");
    mlp(bp + ".mlp_b");
  }
  specs.push_back({"head.ln.g", {D}, ParamInit::Ones});
  specs.push_back({"head.ln.b", {D}, ParamInit::Zeros});
  specs.push_back({"head.w_out", {D, 3 * p2 * p2}, ParamInit::TruncNormal});
  if (cfg.prior != "none") {
    const std::size_t F = std::size_t(cfg.prior_dim);
    specs.push_back({"prior.proj", {F, D}, ParamInit::TruncNormal});
    if (cfg.prior == "random_featurizer" && cfg.prior_tunable) {
      auto [s1, s2] = featurizer_strides(q);
      specs.push_back({"prior.conv1", {3 * s1 * s1, kFeaturizerHidden}, ParamInit::PriorConv1});
      specs.push_back({"prior.conv2", {kFeaturizerHidden * s2 * s2, F}, ParamInit::PriorConv2});
    }
  }
  // Rendering-stage duplicates for decoupled groups.
  const std::size_t base_count = specs.size();
  for (std::size_t i = 0; i < base_count; ++i)
    if (decouple_covers(cfg, specs[i].name))
      specs.push_back({specs[i].name + "@rend", specs[i].shape, specs[i].init});
  return specs;
}

// Closed-form parameter count, kept independent of param_specs so the two can
// cross-check each other. Per full block: 24D^2 + 8D + 4*heads.
inline std::int64_t count_params(const ModelConfig& cfg,
                                 std::map<std::string, std::int64_t>* breakdown = nullptr) {
  cfg.validate();
  const std::int64_t D = cfg.D, L = cfg.L, h = cfg.heads, p2 = cfg.p2, q = cfg.q();
  const std::int64_t intra = 4 * D * D + 2 * D + 2 * h;
  const std::int64_t mlp = 8 * D * D + 2 * D;
  const std::int64_t cross = 4 * D * D + 2 * D + 2 * h;
  std::int64_t block = cross + mlp;  // cross attention + closing MLP always present
  if (cfg.has_intra()) block += intra;
  if (cfg.has_mid_ffn()) block += mlp;

  const std::int64_t pe_ray = 6 * q * q * D;
  const std::int64_t pe_rgb = 3 * q * q * D;
  const std::int64_t input_ln = 2 * D;
  const std::int64_t head = 2 * D + 3 * p2 * p2 * D;
  std::int64_t prior = 0;
  if (cfg.prior != "none") {
    prior = std::int64_t(cfg.prior_dim) * D;
    if (cfg.prior == "random_featurizer" && cfg.prior_tunable) {
      auto [s1, s2] = featurizer_strides(std::size_t(q));
      prior += std::int64_t(3 * s1 * s1 * kFeaturizerHidden);
      prior += std::int64_t(kFeaturizerHidden * s2 * s2) * cfg.prior_dim;
    }
  }

  std::int64_t dup = 0;
  if (cfg.decouple.count("entire_decoder")) {
    dup = pe_ray + input_ln + L * (block - 2 * D * D);  // minus cross wk/wv
  } else {
    if (cfg.decouple.count("input_proj")) dup += pe_ray + input_ln;
    if (cfg.decouple.count("intra_attn") && cfg.has_intra()) dup += L * intra;
    if (cfg.decouple.count("cross_qo")) dup += L * 2 * D * D;
    if (cfg.decouple.count("ffn")) dup += L * (cfg.has_mid_ffn() ? 2 * mlp : mlp);
  }

  if (breakdown) {
    (*breakdown)["blocks"] = L * block;
    (*breakdown)["pe_ray"] = pe_ray;
    (*breakdown)["pe_rgb"] = pe_rgb;
    (*breakdown)["input_ln"] = input_ln;
    (*breakdown)["head"] = head;
    (*breakdown)["prior"] = prior;
    (*breakdown)["decoupled"] = dup;
  }
  return L * block + pe_ray + pe_rgb + input_ln + head + prior + dup;
}

template <class T>
struct WeightBundle {
  ModelConfig cfg;
  std::map<std::string, Tensor<T>> params;

  const Tensor<T>& at(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw std::out_of_range("WeightBundle: no parameter \"" + name + "\"");
    return it->second;
  }

  const Tensor<T>& resolve(Stage s, const std::string& name) const {
    if (s == Stage::Rend && decouple_covers(cfg, name)) return at(name + "@rend");
    return at(name);
  }

  std::int64_t size() const {
    std::int64_t n = 0;
    for (const auto& [k, v] : params) {
      (void)k;
      n += std::int64_t(v.size());
    }
    return n;
  }
};

// ---------------------------------------------------------------------------
// Random featurizer: two patch-aligned conv layers (kernel = stride) with a
// GELU in between. Serves both the prior hook and the perceptual loss.

template <class T>
struct RandomFeaturizer {
  std::size_t patch = 4, s1 = 2, s2 = 2, dim = 64;
  Tensor<T> w1, w2;

  static RandomFeaturizer frozen(std::size_t q, std::size_t F) {
    RandomFeaturizer f;
    f.patch = q;
    std::tie(f.s1, f.s2) = featurizer_strides(q);
    f.dim = F;
    // Fixed stream: the same featurizer in every process, so features are
    // comparable across runs and checkpoints.
    std::uint64_t h = fnv1a64("dvsm.featurizer");
    h = fnv1a64(&q, sizeof(q), h);
    h = fnv1a64(&F, sizeof(F), h);
    Rng rng(h);
    f.w1 = Tensor<T>(Shape{3 * f.s1 * f.s1, kFeaturizerHidden});
    f.w2 = Tensor<T>(Shape{kFeaturizerHidden * f.s2 * f.s2, F});
    const double std1 = 1.0 / std::sqrt(double(3 * f.s1 * f.s1));
    const double std2 = 1.0 / std::sqrt(double(kFeaturizerHidden * f.s2 * f.s2));
    for (std::size_t i = 0; i < f.w1.size(); ++i) f.w1.data()[i] = T(rng.normal() * std1);
    for (std::size_t i = 0; i < f.w2.size(); ++i) f.w2.data()[i] = T(rng.normal() * std2);
    return f;
  }

  static RandomFeaturizer from_weights(std::size_t q, std::size_t F, Tensor<T> w1, Tensor<T> w2) {
    RandomFeaturizer f;
    f.patch = q;
    std::tie(f.s1, f.s2) = featurizer_strides(q);
    f.dim = F;
    f.w1 = std::move(w1);
    f.w2 = std::move(w2);
    return f;
  }

  // img [3, G*q, G'*q] -> per-patch features [G*G', F]
  Tensor<T> features(const Tensor<T>& img) const {
    if (img.rank() != 3 || img.extent(0) != 3 || img.extent(1) % patch != 0 ||
        img.extent(2) % patch != 0)
      throw std::invalid_argument("RandomFeaturizer: image " + shape_str(img.shape()) +
                                  " not divisible by patch " + std::to_string(patch));
    const std::size_t g1h = img.extent(1) / s1, g1w = img.extent(2) / s1;
    Tensor<T> x = gelu(linear(patchify(img, s1), w1));
    Tensor<T> grid = unpatchify(x, g1h, g1w, 1);  // tokens back to a [C, g1h, g1w] map
    return linear(patchify(grid, s2), w2);
  }
};

template <class T>
struct PriorProvider {
  std::string kind = "none";
  bool tunable = false;
  RandomFeaturizer<T> frozen;
  std::map<std::size_t, Tensor<T>> file_features;  // view index -> [T, F]

  static PriorProvider make(const ModelConfig& cfg) {
    PriorProvider p;
    p.kind = cfg.prior;
    p.tunable = cfg.prior_tunable;
    if (cfg.prior == "random_featurizer" && !cfg.prior_tunable)
      p.frozen = RandomFeaturizer<T>::frozen(std::size_t(cfg.q()), std::size_t(cfg.prior_dim));
    if (cfg.prior == "file") {
      if (cfg.prior_file.empty())
        throw std::invalid_argument("PriorProvider: prior=file needs prior_file");
      const Container c = load_container(cfg.prior_file);
      for (const auto& [name, t] : c.tensors) {
        if (name.rfind("view", 0) != 0)
          throw std::runtime_error("PriorProvider: unexpected tensor \"" + name + "\" in " +
                                   cfg.prior_file);
        p.file_features[std::stoul(name.substr(4))] = from_container<T>(t);
      }
    }
    return p;
  }

  Tensor<T> features(const WeightBundle<T>& w, const Tensor<T>& resized_img,
                     std::size_t view_index) const {
    if (kind == "random_featurizer") {
      if (!tunable) return frozen.features(resized_img);
      auto f = RandomFeaturizer<T>::from_weights(std::size_t(w.cfg.q()),
                                                 std::size_t(w.cfg.prior_dim),
                                                 w.at("prior.conv1"), w.at("prior.conv2"));
      return f.features(resized_img);
    }
    if (kind == "file") {
      auto it = file_features.find(view_index);
      if (it == file_features.end())
        throw std::out_of_range("PriorProvider: no features for view " +
                                std::to_string(view_index));
      return it->second;
    }
    throw std::logic_error("PriorProvider: features() on kind=none");
  }
};

// ---------------------------------------------------------------------------
// Scene representation: cached cross-view keys/values, one entry per block.

template <class T>
struct SceneKVCache {
  std::vector<Tensor<T>> keys, values;  // [V*T, D], pre-head-split
  std::size_t views = 0, tokens_per_view = 0;
  std::uint64_t cfg_hash = 0;
  SimilarityTransform transform;
};

template <class T>
std::uint64_t cache_hash(const SceneKVCache<T>& c) {
  std::uint64_t h = fnv1a64("kvcache");
  for (const auto& k : c.keys) h = fnv1a64(k.data(), k.size() * sizeof(T), h);
  for (const auto& v : c.values) h = fnv1a64(v.data(), v.size() * sizeof(T), h);
  return h;
}

// Captures one cross-view layer's attended features, softmax(QK^T)V after
// head merge but before the output projection.
template <class T>
struct AttendedCapture {
  int layer = -1;
  std::size_t view = 0;  // reconstruction branch: which view's rows to keep
  Tensor<T> features;
};

namespace detail {

template <class T>
Tensor<T> attn_over(const Tensor<T>& xn, const WeightBundle<T>& w, Stage st,
                    const std::string& prefix, const std::vector<std::size_t>& starts,
                    std::size_t rows_per_group, Tensor<T>* attended = nullptr) {
  const std::size_t h = std::size_t(w.cfg.heads);
  Tensor<T> qp = linear(xn, w.resolve(st, prefix + ".wq"));
  Tensor<T> kp = linear(xn, w.resolve(st, prefix + ".wk"));
  Tensor<T> vp = linear(xn, w.resolve(st, prefix + ".wv"));
  Tensor<T> scale = mul(w.resolve(st, prefix + ".sq"), w.resolve(st, prefix + ".sk"));
  std::vector<Tensor<T>> parts;
  parts.reserve(starts.size());
  for (auto s0 : starts) {
    Tensor<T> q3 = split_heads(slice0(qp, s0, s0 + rows_per_group), h);
    Tensor<T> k3 = split_heads(slice0(kp, s0, s0 + rows_per_group), h);
    Tensor<T> v3 = split_heads(slice0(vp, s0, s0 + rows_per_group), h);
    parts.push_back(merge_heads(attention(q3, k3, v3, scale)));
  }
  Tensor<T> merged = parts.size() == 1 ? parts[0] : concat0(parts);
  if (attended) *attended = merged;
  return linear(merged, w.resolve(st, prefix + ".wo"));
}

// Self-attention sublayer over groups of rows (one group per view; a single
// group spanning all rows gives full attention).
template <class T>
Tensor<T> self_attn_sublayer(const Tensor<T>& x, const WeightBundle<T>& w, Stage st,
                             const std::string& prefix, std::size_t groups) {
  const std::size_t rows = x.extent(0) / groups;
  Tensor<T> xn = layer_norm(x, w.resolve(st, prefix + ".ln.g"), w.resolve(st, prefix + ".ln.b"));
  std::vector<std::size_t> starts(groups);
  for (std::size_t g = 0; g < groups; ++g) starts[g] = g * rows;
  return add(x, attn_over(xn, w, st, prefix, starts, rows));
}

template <class T>
Tensor<T> mlp_sublayer(const Tensor<T>& x, const WeightBundle<T>& w, Stage st,
                       const std::string& prefix) {
  Tensor<T> xn = layer_norm(x, w.resolve(st, prefix + ".ln.g"), w.resolve(st, prefix + ".ln.b"));
  return add(x, linear(gelu(linear(xn, w.resolve(st, prefix + ".w1"))),
                       w.resolve(st, prefix + ".w2")));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tokenizers (Eq. 3a/3b): reconstruction tokens carry ray + rgb (+ prior)
// embeddings inside a shared LayerNorm; rendering tokens carry rays only.

template <class T>
std::vector<Tensor<T>> embed_recon(const std::vector<Tensor<T>>& images,
                                   const std::vector<Camera>& cams, const WeightBundle<T>& w,
                                   std::type_identity_t<const PriorProvider<T>*> prior = nullptr) {
  if (images.empty() || images.size() != cams.size())
    throw std::invalid_argument("embed_recon: need matching images and cameras");
  const ModelConfig& cfg = w.cfg;
  if (cfg.prior != "none" && !prior)
    throw std::invalid_argument("embed_recon: config enables a prior but none was given");
  const std::size_t q = std::size_t(cfg.q());
  std::vector<Tensor<T>> out;
  out.reserve(images.size());
  for (std::size_t v = 0; v < images.size(); ++v) {
    const auto& img = images[v];
    if (img.rank() != 3 || img.extent(0) != 3)
      throw std::invalid_argument("embed_recon: images must be [3,H,W]");
    auto [gh, gw] = receptive_grid(img.extent(1), img.extent(2), std::size_t(cfg.p1));
    Tensor<T> resized = receptive_resize(img, std::size_t(cfg.p1), q);
    Tensor<T> rays = plucker_map<T>(cams[v], gh * q, gw * q);
    Tensor<T> tok = linear(patchify(rays, q), w.resolve(Stage::Recon, "pe_ray"));
    tok = add(tok, linear(patchify(resized, q), w.at("pe_rgb")));
    if (cfg.prior != "none")
      tok = add(tok, linear(prior->features(w, resized, v), w.at("prior.proj")));
    out.push_back(layer_norm(tok, w.resolve(Stage::Recon, "input_ln.g"),
                             w.resolve(Stage::Recon, "input_ln.b")));
  }
  return out;
}

template <class T>
Tensor<T> embed_rend(const Camera& cam, const WeightBundle<T>& w, std::size_t out_h,
                     std::size_t out_w) {
  const ModelConfig& cfg = w.cfg;
  const std::size_t q = std::size_t(cfg.q());
  auto [gh, gw] = receptive_grid(out_h, out_w, std::size_t(cfg.p2));
  Tensor<T> rays = plucker_map<T>(cam, gh * q, gw * q);
  Tensor<T> tok = linear(patchify(rays, q), w.resolve(Stage::Rend, "pe_ray"));
  return layer_norm(tok, w.resolve(Stage::Rend, "input_ln.g"),
                    w.resolve(Stage::Rend, "input_ln.b"));
}

// ---------------------------------------------------------------------------
// Reconstruction: run the decoder over all context views, caching every
// cross-view layer's K/V (the scene representation).

template <class T>
SceneKVCache<T> reconstruct(const std::vector<Tensor<T>>& images, const std::vector<Camera>& cams,
                            const WeightBundle<T>& w, const SimilarityTransform& tf = {},
                            std::type_identity_t<const PriorProvider<T>*> prior = nullptr,
                            std::type_identity_t<AttendedCapture<T>*> capture = nullptr) {
  const ModelConfig& cfg = w.cfg;
  if (cfg.arch_variant != "kv_cache")
    throw std::invalid_argument("reconstruct: arch_variant must be kv_cache");
  std::vector<Tensor<T>> xs = embed_recon(images, cams, w, prior);
  const std::size_t V = xs.size();
  const std::size_t tokens = xs[0].extent(0);
  Tensor<T> x = V == 1 ? xs[0] : concat0(xs);

  std::vector<std::size_t> view_starts(V);
  for (std::size_t v = 0; v < V; ++v) view_starts[v] = v * tokens;
  const std::vector<std::size_t> full_start{0};

  SceneKVCache<T> cache;
  cache.views = V;
  cache.tokens_per_view = tokens;
  cache.cfg_hash = config_hash(cfg);
  cache.transform = tf;

  for (int i = 0; i < cfg.L; ++i) {
    const std::string bp = "block" + std::to_string(i);
    if (cfg.has_intra())
      x = detail::self_attn_sublayer(x, w, Stage::Recon, bp + ".intra", V);
    if (cfg.has_mid_ffn()) x = detail::mlp_sublayer(x, w, Stage::Recon, bp + ".mlp_a");

    // Cross-view attention. K/V of every layer are cached; with per-view
    // reconstruction the attention pattern shrinks but the cache does not.
    Tensor<T> xn = layer_norm(x, w.resolve(Stage::Recon, bp + ".cross.ln.g"),
                              w.resolve(Stage::Recon, bp + ".cross.ln.b"));
    Tensor<T> kp = linear(xn, w.at(bp + ".cross.wk"));
    Tensor<T> vp = linear(xn, w.at(bp + ".cross.wv"));
    cache.keys.push_back(kp);
    cache.values.push_back(vp);
    Tensor<T> qp = linear(xn, w.resolve(Stage::Recon, bp + ".cross.wq"));
    Tensor<T> scale =
        mul(w.resolve(Stage::Recon, bp + ".cross.sq"), w.resolve(Stage::Recon, bp + ".cross.sk"));
    const std::size_t h = std::size_t(cfg.heads);
    std::vector<Tensor<T>> parts;
    const auto& starts = cfg.recon_cross_view ? full_start : view_starts;
    const std::size_t rows = cfg.recon_cross_view ? V * tokens : tokens;
    for (auto s0 : starts) {
      Tensor<T> q3 = split_heads(slice0(qp, s0, s0 + rows), h);
      Tensor<T> k3 = split_heads(slice0(kp, s0, s0 + rows), h);
      Tensor<T> v3 = split_heads(slice0(vp, s0, s0 + rows), h);
      parts.push_back(merge_heads(attention(q3, k3, v3, scale)));
    }
    Tensor<T> merged = parts.size() == 1 ? parts[0] : concat0(parts);
    if (capture && capture->layer == i)
      capture->features = slice0(merged, capture->view * tokens, (capture->view + 1) * tokens);
    x = add(x, linear(merged, w.resolve(Stage::Recon, bp + ".cross.wo")));

    x = detail::mlp_sublayer(x, w, Stage::Recon, bp + ".mlp_b");
  }
  return cache;
}

// ---------------------------------------------------------------------------
// Rendering: camera-only tokens query the cache. Novel tokens contribute no
// keys or values, so renders from one cache are mutually independent.

template <class T>
Tensor<T> render(const SceneKVCache<T>& cache, const Camera& cam, const WeightBundle<T>& w,
                 std::size_t out_h, std::size_t out_w, std::type_identity_t<AttendedCapture<T>*> capture = nullptr) {
  const ModelConfig& cfg = w.cfg;
  if (cache.cfg_hash != config_hash(cfg))
    throw std::runtime_error("render: cache was built by a different model configuration");
  if (cache.keys.size() != std::size_t(cfg.L))
    throw std::runtime_error("render: cache layer count mismatch");
  const std::size_t h = std::size_t(cfg.heads);
  auto [gh, gw] = receptive_grid(out_h, out_w, std::size_t(cfg.p2));
  Tensor<T> x = embed_rend(cam, w, out_h, out_w);

  for (int i = 0; i < cfg.L; ++i) {
    const std::string bp = "block" + std::to_string(i);
    if (cfg.has_intra()) x = detail::self_attn_sublayer(x, w, Stage::Rend, bp + ".intra", 1);
    if (cfg.has_mid_ffn()) x = detail::mlp_sublayer(x, w, Stage::Rend, bp + ".mlp_a");

    Tensor<T> xn = layer_norm(x, w.resolve(Stage::Rend, bp + ".cross.ln.g"),
                              w.resolve(Stage::Rend, bp + ".cross.ln.b"));
    Tensor<T> qp = linear(xn, w.resolve(Stage::Rend, bp + ".cross.wq"));
    Tensor<T> scale =
        mul(w.resolve(Stage::Rend, bp + ".cross.sq"), w.resolve(Stage::Rend, bp + ".cross.sk"));
    Tensor<T> att = attention(split_heads(qp, h), split_heads(cache.keys[std::size_t(i)], h),
                              split_heads(cache.values[std::size_t(i)], h), scale);
    Tensor<T> merged = merge_heads(att);
    if (capture && capture->layer == i) capture->features = merged;
    x = add(x, linear(merged, w.resolve(Stage::Rend, bp + ".cross.wo")));

    x = detail::mlp_sublayer(x, w, Stage::Rend, bp + ".mlp_b");
  }
  Tensor<T> y = layer_norm(x, w.at("head.ln.g"), w.at("head.ln.b"));
  y = linear(y, w.at("head.w_out"));
  return sigmoid(unpatchify(y, gh, gw, std::size_t(cfg.p2)));
}

// ---------------------------------------------------------------------------
// Verification twin of the KV-cache path: one joint forward where novel
// tokens attend freshly computed context K/V. Must match render(reconstruct).

template <class T>
Tensor<T> render_recompute_oracle(const std::vector<Tensor<T>>& images,
                                  const std::vector<Camera>& cams, const Camera& target,
                                  const WeightBundle<T>& w, std::size_t out_h, std::size_t out_w,
                                  std::type_identity_t<const PriorProvider<T>*> prior = nullptr) {
  const ModelConfig& cfg = w.cfg;
  const std::size_t h = std::size_t(cfg.heads);
  std::vector<Tensor<T>> xs = embed_recon(images, cams, w, prior);
  const std::size_t V = xs.size();
  const std::size_t tokens = xs[0].extent(0);
  Tensor<T> xc = V == 1 ? xs[0] : concat0(xs);
  auto [gh, gw] = receptive_grid(out_h, out_w, std::size_t(cfg.p2));
  Tensor<T> xn = embed_rend(target, w, out_h, out_w);

  std::vector<std::size_t> view_starts(V);
  for (std::size_t v = 0; v < V; ++v) view_starts[v] = v * tokens;
  const std::vector<std::size_t> full_start{0};

  for (int i = 0; i < cfg.L; ++i) {
    const std::string bp = "block" + std::to_string(i);
    if (cfg.has_intra()) {
      xc = detail::self_attn_sublayer(xc, w, Stage::Recon, bp + ".intra", V);
      xn = detail::self_attn_sublayer(xn, w, Stage::Rend, bp + ".intra", 1);
    }
    if (cfg.has_mid_ffn()) {
      xc = detail::mlp_sublayer(xc, w, Stage::Recon, bp + ".mlp_a");
      xn = detail::mlp_sublayer(xn, w, Stage::Rend, bp + ".mlp_a");
    }

    // Context K/V computed once from the pre-update hidden states, consumed
    // by both the context's own cross attention and the novel queries.
    Tensor<T> cn = layer_norm(xc, w.resolve(Stage::Recon, bp + ".cross.ln.g"),
                              w.resolve(Stage::Recon, bp + ".cross.ln.b"));
    Tensor<T> kp = linear(cn, w.at(bp + ".cross.wk"));
    Tensor<T> vp = linear(cn, w.at(bp + ".cross.wv"));
    Tensor<T> qp = linear(cn, w.resolve(Stage::Recon, bp + ".cross.wq"));
    Tensor<T> scale_c =
        mul(w.resolve(Stage::Recon, bp + ".cross.sq"), w.resolve(Stage::Recon, bp + ".cross.sk"));
    std::vector<Tensor<T>> parts;
    const auto& starts = cfg.recon_cross_view ? full_start : view_starts;
    const std::size_t rows = cfg.recon_cross_view ? V * tokens : tokens;
    for (auto s0 : starts) {
      Tensor<T> q3 = split_heads(slice0(qp, s0, s0 + rows), h);
      Tensor<T> k3 = split_heads(slice0(kp, s0, s0 + rows), h);
      Tensor<T> v3 = split_heads(slice0(vp, s0, s0 + rows), h);
      parts.push_back(merge_heads(attention(q3, k3, v3, scale_c)));
    }
    Tensor<T> merged_c = parts.size() == 1 ? parts[0] : concat0(parts);

    Tensor<T> nn = layer_norm(xn, w.resolve(Stage::Rend, bp + ".cross.ln.g"),
                              w.resolve(Stage::Rend, bp + ".cross.ln.b"));
    Tensor<T> qn = linear(nn, w.resolve(Stage::Rend, bp + ".cross.wq"));
    Tensor<T> scale_n =
        mul(w.resolve(Stage::Rend, bp + ".cross.sq"), w.resolve(Stage::Rend, bp + ".cross.sk"));
    Tensor<T> att_n =
        attention(split_heads(qn, h), split_heads(kp, h), split_heads(vp, h), scale_n);

    xc = add(xc, linear(merged_c, w.resolve(Stage::Recon, bp + ".cross.wo")));
    xn = add(xn, linear(merge_heads(att_n), w.resolve(Stage::Rend, bp + ".cross.wo")));

    xc = detail::mlp_sublayer(xc, w, Stage::Recon, bp + ".mlp_b");
    xn = detail::mlp_sublayer(xn, w, Stage::Rend, bp + ".mlp_b");
  }
  Tensor<T> y = layer_norm(xn, w.at("head.ln.g"), w.at("head.ln.b"));
  y = linear(y, w.at("head.w_out"));
  return sigmoid(unpatchify(y, gh, gw, std::size_t(cfg.p2)));
}

// ---------------------------------------------------------------------------
// Single-sequence baseline: context and novel tokens concatenated, every
// attention layer runs over the whole sequence, the head reads the novel slice.

template <class T>
Tensor<T> forward_concat_baseline(const std::vector<Tensor<T>>& images,
                                  const std::vector<Camera>& cams, const Camera& target,
                                  const WeightBundle<T>& w, std::size_t out_h, std::size_t out_w,
                                  std::type_identity_t<const PriorProvider<T>*> prior = nullptr) {
  const ModelConfig& cfg = w.cfg;
  auto [gh, gw] = receptive_grid(out_h, out_w, std::size_t(cfg.p2));
  Tensor<T> xn = embed_rend(target, w, out_h, out_w);
  const std::size_t novel_tokens = xn.extent(0);
  Tensor<T> x = xn;
  std::size_t ctx_tokens = 0;
  if (!images.empty()) {
    std::vector<Tensor<T>> xs = embed_recon(images, cams, w, prior);
    ctx_tokens = xs.size() * xs[0].extent(0);
    xs.push_back(xn);
    x = concat0(xs);
  }
  for (int i = 0; i < cfg.L; ++i) {
    const std::string bp = "block" + std::to_string(i);
    if (cfg.has_intra()) x = detail::self_attn_sublayer(x, w, Stage::Recon, bp + ".intra", 1);
    if (cfg.has_mid_ffn()) x = detail::mlp_sublayer(x, w, Stage::Recon, bp + ".mlp_a");
    x = detail::self_attn_sublayer(x, w, Stage::Recon, bp + ".cross", 1);
    x = detail::mlp_sublayer(x, w, Stage::Recon, bp + ".mlp_b");
  }
  Tensor<T> novel = slice0(x, ctx_tokens, ctx_tokens + novel_tokens);
  Tensor<T> y = layer_norm(novel, w.at("head.ln.g"), w.at("head.ln.b"));
  y = linear(y, w.at("head.w_out"));
  return sigmoid(unpatchify(y, gh, gw, std::size_t(cfg.p2)));
}

}  // namespace dvsm
