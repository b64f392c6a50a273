#pragma once

#include <Eigen/Dense>
#include <array>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "dvsm/geometry.hpp"
#include "dvsm/jsonutil.hpp"
#include "dvsm/rng.hpp"
#include "dvsm/tensor.hpp"

namespace dvsm {

// Lambertian sphere scenes with an optional checkered ground plane. Shading is
// analytic and view-independent, so ground truth exists at any resolution and
// is exactly multi-view consistent.

struct Sphere {
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  double radius = 0.3;
  std::array<double, 3> albedo{0.8, 0.8, 0.8};
};

struct GroundPlane {
  double height = 1.2;  // y-down world: positive y is below the scene
  std::array<double, 3> albedo_a{0.85, 0.85, 0.85};
  std::array<double, 3> albedo_b{0.25, 0.25, 0.25};
  double cell = 0.5;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  std::vector<Sphere> spheres;
  std::optional<GroundPlane> ground_plane;
  Eigen::Vector3d light_dir = Eigen::Vector3d(0, -1, 0);  // toward the light, unit
  double ambient = 0.25;
  std::array<double, 3> background{0.05, 0.06, 0.08};
};

inline json scene_spec_to_json(const SceneSpec& s) {
  json spheres = json::array();
  for (const auto& sp : s.spheres)
    spheres.push_back(json{{"center", {sp.center.x(), sp.center.y(), sp.center.z()}},
                           {"radius", sp.radius},
                           {"albedo", sp.albedo}});
  json j{{"seed", s.seed},
         {"spheres", spheres},
         {"light_dir", {s.light_dir.x(), s.light_dir.y(), s.light_dir.z()}},
         {"ambient", s.ambient},
         {"background", s.background}};
  if (s.ground_plane)
    j["ground_plane"] = json{{"height", s.ground_plane->height},
                             {"albedo_a", s.ground_plane->albedo_a},
                             {"albedo_b", s.ground_plane->albedo_b},
                             {"cell", s.ground_plane->cell}};
  else
    j["ground_plane"] = nullptr;
  return j;
}

inline SceneSpec scene_spec_from_json(const json& j) {
  require_keys(j, {"seed", "spheres", "ground_plane", "light_dir", "ambient", "background"},
               "SceneSpec");
  SceneSpec s;
  s.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& sp : j.at("spheres")) {
    require_keys(sp, {"center", "radius", "albedo"}, "Sphere");
    Sphere o;
    o.center = Eigen::Vector3d(sp.at("center")[0].get<double>(), sp.at("center")[1].get<double>(),
                               sp.at("center")[2].get<double>());
    o.radius = sp.at("radius").get<double>();
    o.albedo = sp.at("albedo").get<std::array<double, 3>>();
    s.spheres.push_back(o);
  }
  if (!j.at("ground_plane").is_null()) {
    const auto& g = j.at("ground_plane");
    require_keys(g, {"height", "albedo_a", "albedo_b", "cell"}, "GroundPlane");
    GroundPlane p;
    p.height = g.at("height").get<double>();
    p.albedo_a = g.at("albedo_a").get<std::array<double, 3>>();
    p.albedo_b = g.at("albedo_b").get<std::array<double, 3>>();
    p.cell = g.at("cell").get<double>();
    s.ground_plane = p;
  }
  s.light_dir = Eigen::Vector3d(j.at("light_dir")[0].get<double>(),
                                j.at("light_dir")[1].get<double>(),
                                j.at("light_dir")[2].get<double>());
  s.ambient = j.at("ambient").get<double>();
  s.background = j.at("background").get<std::array<double, 3>>();
  return s;
}

inline SceneSpec generate_scene(std::uint64_t seed) {
  Rng rng(seed);
  SceneSpec s;
  s.seed = seed;
  const std::size_t want = 3 + rng.uniform_int(6);  // 3..8
  for (std::size_t i = 0; i < want; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      Sphere sp;
      sp.radius = rng.uniform(0.15, 0.45);
      // Center inside the unit ball with the whole sphere contained.
      const double reach = 1.0 - sp.radius;
      for (;;) {
        const Eigen::Vector3d c(rng.uniform(-reach, reach), rng.uniform(-reach, reach),
                                rng.uniform(-reach, reach));
        if (c.norm() <= reach) {
          sp.center = c;
          break;
        }
      }
      bool overlaps = false;
      for (const auto& other : s.spheres)
        if ((other.center - sp.center).norm() <= other.radius + sp.radius) {
          overlaps = true;
          break;
        }
      if (!overlaps) {
        for (auto& a : sp.albedo) a = rng.uniform(0.1, 1.0);
        s.spheres.push_back(sp);
        placed = true;
      }
    }
    // Rejection cap hit: keep the spheres placed so far.
  }
  if (rng.uniform() < 0.5) {
    GroundPlane g;
    g.height = rng.uniform(1.1, 1.6);
    for (auto& a : g.albedo_a) a = rng.uniform(0.5, 0.95);
    for (auto& a : g.albedo_b) a = rng.uniform(0.05, 0.45);
    s.ground_plane = g;
  }
  // Random light from the upper hemisphere (negative y points up).
  for (;;) {
    Eigen::Vector3d l(rng.normal(), rng.normal(), rng.normal());
    if (l.norm() < 1e-6) continue;
    l.normalize();
    if (l.y() > -0.2) l.y() = -std::abs(l.y()) - 0.2;
    s.light_dir = l.normalized();
    break;
  }
  s.ambient = rng.uniform(0.15, 0.35);
  for (auto& b : s.background) b = rng.uniform(0.02, 0.12);
  return s;
}

struct Hit {
  bool hit = false;
  double t = 0.0;
  Eigen::Vector3d point = Eigen::Vector3d::Zero();
  Eigen::Vector3d normal = Eigen::Vector3d::Zero();
  std::array<double, 3> rgb{0, 0, 0};
};

inline std::array<double, 3> shade(const SceneSpec& s, const std::array<double, 3>& albedo,
                                   const Eigen::Vector3d& n) {
  const double diffuse = std::max(0.0, n.dot(s.light_dir));
  const double k = s.ambient + (1.0 - s.ambient) * diffuse;
  return {albedo[0] * k, albedo[1] * k, albedo[2] * k};
}

inline Hit trace_hit(const SceneSpec& s, const Eigen::Vector3d& origin,
                     const Eigen::Vector3d& dir) {
  Hit best;
  best.rgb = s.background;
  double best_t = std::numeric_limits<double>::max();
  for (const auto& sp : s.spheres) {
    const Eigen::Vector3d oc = origin - sp.center;
    const double b = oc.dot(dir);
    const double c = oc.squaredNorm() - sp.radius * sp.radius;
    const double disc = b * b - c;
    if (disc < 0.0) continue;
    const double sq = std::sqrt(disc);
    double t = -b - sq;
    if (t <= 1e-9) t = -b + sq;
    if (t <= 1e-9 || t >= best_t) continue;
    best_t = t;
    best.hit = true;
    best.t = t;
    best.point = origin + t * dir;
    best.normal = (best.point - sp.center) / sp.radius;
    best.rgb = shade(s, sp.albedo, best.normal);
  }
  if (s.ground_plane && std::abs(dir.y()) > 1e-12) {
    const double t = (s.ground_plane->height - origin.y()) / dir.y();
    if (t > 1e-9 && t < best_t) {
      const Eigen::Vector3d p = origin + t * dir;
      const long ix = long(std::floor(p.x() / s.ground_plane->cell));
      const long iz = long(std::floor(p.z() / s.ground_plane->cell));
      const auto& albedo = ((ix + iz) & 1) ? s.ground_plane->albedo_b : s.ground_plane->albedo_a;
      best.hit = true;
      best.t = t;
      best.point = p;
      best.normal = Eigen::Vector3d(0, -1, 0);  // up, toward the cameras
      best.rgb = shade(s, albedo, best.normal);
    }
  }
  return best;
}

inline std::array<double, 3> trace_ray(const SceneSpec& s, const Eigen::Vector3d& origin,
                                       const Eigen::Vector3d& dir) {
  return trace_hit(s, origin, dir).rgb;
}

template <class T>
Tensor<T> render_ground_truth(const SceneSpec& s, const Camera& cam, std::size_t h,
                              std::size_t w) {
  const Rays rays = pixel_rays(cam, h, w);
  Tensor<T> img(Shape{3, h, w});
  T* p = img.data();
  const std::size_t plane = h * w;
  for (std::size_t i = 0; i < plane; ++i) {
    const auto rgb = trace_ray(s, rays.origins[i], rays.dirs[i]);
    for (int c = 0; c < 3; ++c) p[std::size_t(c) * plane + i] = T(rgb[std::size_t(c)]);
  }
  return img;
}

// ---------------------------------------------------------------------------
// PPM (P6, maxval 255) image files.

template <class T>
void write_ppm(const std::string& path, const Tensor<T>& img) {
  if (img.rank() != 3 || img.extent(0) != 3) throw std::invalid_argument("write_ppm: expected [3,H,W]");
  const std::size_t h = img.extent(1), w = img.extent(2), plane = h * w;
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("write_ppm: cannot open " + path);
  os << "P6\n" << w << " " << h << "\n255\n";
  const T* p = img.data();
  std::vector<unsigned char> row(w * 3);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(double(p[c * plane + y * w + x]), 0.0, 1.0);
        row[x * 3 + c] = (unsigned char)(std::lround(v * 255.0));
      }
    os.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
  }
  if (!os) throw std::runtime_error("write_ppm: write failed for " + path);
}

template <class T>
Tensor<T> read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_ppm: cannot open " + path);
  std::string magic;
  is >> magic;
  if (magic != "P6") throw std::runtime_error("read_ppm: bad magic in " + path);
  std::size_t w = 0, h = 0, maxval = 0;
  is >> w >> h >> maxval;
  if (!is || maxval != 255 || w == 0 || h == 0)
    throw std::runtime_error("read_ppm: bad header in " + path);
  is.get();  // single whitespace after maxval
  std::vector<unsigned char> raw(w * h * 3);
  if (!is.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size())))
    throw std::runtime_error("read_ppm: truncated pixel data in " + path);
  Tensor<T> img(Shape{3, h, w});
  T* p = img.data();
  const std::size_t plane = h * w;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        p[c * plane + y * w + x] = T(raw[(y * w + x) * 3 + c]) / T(255);
  return img;
}

// ---------------------------------------------------------------------------
// Dataset: <root>/manifest.json, <root>/scene_<id>/{spec.json, cameras.json,
// frame_<k>_<res>.ppm}. Every 8th frame is target-eligible.

struct DatasetManifest {
  std::uint64_t seed = 0;
  std::size_t n_scenes = 0;
  std::size_t frames_per_scene = 0;
  std::vector<std::size_t> resolutions;
  std::vector<std::size_t> train_scenes, test_scenes;
};

inline json manifest_to_json(const DatasetManifest& m) {
  return json{{"seed", m.seed},
              {"n_scenes", m.n_scenes},
              {"frames_per_scene", m.frames_per_scene},
              {"resolutions", m.resolutions},
              {"train_scenes", m.train_scenes},
              {"test_scenes", m.test_scenes},
              {"target_stride", 8}};
}

inline DatasetManifest manifest_from_json(const json& j) {
  require_keys(j,
               {"seed", "n_scenes", "frames_per_scene", "resolutions", "train_scenes",
                "test_scenes", "target_stride"},
               "DatasetManifest");
  if (j.at("target_stride").get<int>() != 8)
    throw std::invalid_argument("DatasetManifest: unsupported target stride");
  DatasetManifest m;
  m.seed = j.at("seed").get<std::uint64_t>();
  m.n_scenes = j.at("n_scenes").get<std::size_t>();
  m.frames_per_scene = j.at("frames_per_scene").get<std::size_t>();
  m.resolutions = j.at("resolutions").get<std::vector<std::size_t>>();
  m.train_scenes = j.at("train_scenes").get<std::vector<std::size_t>>();
  m.test_scenes = j.at("test_scenes").get<std::vector<std::size_t>>();
  return m;
}

inline bool target_eligible(std::size_t frame) { return frame % 8 == 0; }

// Split one scene's frames into k-means-selected context and stride-8 targets.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> eval_split(
    const std::vector<Camera>& cams, std::size_t context_k, std::uint64_t seed) {
  std::vector<std::size_t> pool, targets;
  for (std::size_t k = 0; k < cams.size(); ++k)
    (target_eligible(k) ? targets : pool).push_back(k);
  if (pool.size() < context_k)
    throw std::invalid_argument("eval_split: only " + std::to_string(pool.size()) +
                                " context candidates for k=" + std::to_string(context_k));
  std::vector<Camera> pool_cams;
  for (auto i : pool) pool_cams.push_back(cams[i]);
  std::vector<std::size_t> ctx;
  for (auto i : kmeans_select_views(pool_cams, context_k, seed)) ctx.push_back(pool[i]);
  return {ctx, targets};
}

// Jittered orbit around the origin: radius in [2.5, 3.5], elevation in
// [10, 45] degrees, azimuth advancing monotonically around the full circle.
inline std::vector<Camera> orbit_cameras(std::uint64_t seed, std::size_t frames,
                                         std::size_t resolution) {
  Rng rng(seed);
  std::vector<Camera> cams;
  cams.reserve(frames);
  const double fov = 60.0 * 3.14159265358979323846 / 180.0;
  const double focal = 0.5 * double(resolution) / std::tan(fov / 2.0);
  for (std::size_t k = 0; k < frames; ++k) {
    const double base = 2.0 * 3.14159265358979323846 * double(k) / double(frames);
    const double az = base + rng.uniform(-0.25, 0.25) / double(frames) * 2.0 * 3.14159265358979323846;
    const double elev = rng.uniform(10.0, 45.0) * 3.14159265358979323846 / 180.0;
    const double radius = rng.uniform(2.5, 3.5);
    const Eigen::Vector3d center(radius * std::cos(elev) * std::cos(az),
                                 -radius * std::sin(elev),
                                 radius * std::cos(elev) * std::sin(az));
    cams.push_back(look_at_camera(center, Eigen::Vector3d::Zero(), focal, int(resolution),
                                  int(resolution)));
  }
  return cams;
}

inline std::string frame_filename(std::size_t k, std::size_t res) {
  return "frame_" + std::to_string(k) + "_" + std::to_string(res) + ".ppm";
}

inline DatasetManifest make_dataset(std::size_t n_scenes, std::size_t frames_per_scene,
                                    const std::vector<std::size_t>& resolutions,
                                    std::uint64_t seed, const std::string& out_dir) {
  if (n_scenes == 0 || frames_per_scene == 0 || resolutions.empty())
    throw std::invalid_argument("make_dataset: empty configuration");
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  DatasetManifest m;
  m.seed = seed;
  m.n_scenes = n_scenes;
  m.frames_per_scene = frames_per_scene;
  m.resolutions = resolutions;
  for (std::size_t i = 0; i < n_scenes; ++i) {
    if (n_scenes >= 4 && i % 4 == 3)
      m.test_scenes.push_back(i);
    else
      m.train_scenes.push_back(i);
  }
  if (m.test_scenes.empty()) m.test_scenes = m.train_scenes;

  Rng rng(seed);
  const std::size_t native = *std::max_element(resolutions.begin(), resolutions.end());
  for (std::size_t i = 0; i < n_scenes; ++i) {
    const fs::path sdir = fs::path(out_dir) / ("scene_" + std::to_string(i));
    fs::create_directories(sdir);
    const SceneSpec spec = generate_scene(rng.fork("scene", i).seed());
    write_text_file((sdir / "spec.json").string(), scene_spec_to_json(spec).dump(2));
    const auto cams = orbit_cameras(rng.fork("orbit", i).seed(), frames_per_scene, native);
    json jcams = json::array();
    for (const auto& c : cams) jcams.push_back(camera_to_json(c));
    write_text_file((sdir / "cameras.json").string(), json{{"cameras", jcams}}.dump(2));
    for (std::size_t k = 0; k < frames_per_scene; ++k)
      for (auto res : resolutions) {
        const Tensor<float> img = render_ground_truth<float>(spec, cams[k], res, res);
        write_ppm((sdir / frame_filename(k, res)).string(), img);
      }
  }
  write_text_file((fs::path(out_dir) / "manifest.json").string(), manifest_to_json(m).dump(2));
  return m;
}

struct LoadedScene {
  std::vector<Camera> cameras;
  std::vector<Tensor<float>> images;  // [3,res,res] in [0,1]
  SceneSpec spec;
};

inline DatasetManifest load_manifest(const std::string& root) {
  return manifest_from_json(read_json_file(root + "/manifest.json"));
}

inline LoadedScene load_scene(const std::string& scene_dir, std::size_t resolution) {
  LoadedScene s;
  const json jc = read_json_file(scene_dir + "/cameras.json");
  require_keys(jc, {"cameras"}, "cameras.json");
  for (const auto& c : jc.at("cameras")) s.cameras.push_back(camera_from_json(c));
  s.spec = scene_spec_from_json(read_json_file(scene_dir + "/spec.json"));
  for (std::size_t k = 0; k < s.cameras.size(); ++k) {
    Tensor<float> img = read_ppm<float>(scene_dir + "/" + frame_filename(k, resolution));
    if (img.extent(1) != resolution || img.extent(2) != resolution)
      throw std::runtime_error("load_scene: frame " + std::to_string(k) +
                               " resolution mismatch in " + scene_dir);
    s.images.push_back(std::move(img));
  }
  return s;
}

}  // namespace dvsm
