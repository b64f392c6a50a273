#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <vector>

#include "dvsm/jsonutil.hpp"
#include "dvsm/ops.hpp"
#include "dvsm/rng.hpp"
#include "dvsm/tensor.hpp"

namespace dvsm {

// World-from-camera pose, y-down image, camera looks along +z.
// Pixel (u,v) rays pass through the center (u+0.5, v+0.5).
struct Camera {
  Eigen::Matrix4d pose = Eigen::Matrix4d::Identity();
  Eigen::Matrix3d intrinsics = Eigen::Matrix3d::Identity();
  int width = 0;
  int height = 0;

  Eigen::Vector3d center() const { return pose.block<3, 1>(0, 3); }
  Eigen::Matrix3d rotation() const { return pose.block<3, 3>(0, 0); }
  Eigen::Vector3d view_dir() const { return rotation().col(2); }

  void validate() const {
    const Eigen::Matrix3d r = rotation();
    if ((r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-5)
      throw std::invalid_argument("Camera: rotation not orthonormal");
    if (intrinsics(0, 0) <= 0 || intrinsics(1, 1) <= 0)
      throw std::invalid_argument("Camera: non-positive focal length");
    if (width <= 0 || height <= 0) throw std::invalid_argument("Camera: non-positive extent");
  }
};

inline json camera_to_json(const Camera& c) {
  json pose = json::array();
  for (int r = 0; r < 4; ++r)
    for (int col = 0; col < 4; ++col) pose.push_back(c.pose(r, col));
  json k = json::array();
  for (int r = 0; r < 3; ++r)
    for (int col = 0; col < 3; ++col) k.push_back(c.intrinsics(r, col));
  return json{{"pose", pose}, {"intrinsics", k}, {"width", c.width}, {"height", c.height}};
}

inline Camera camera_from_json(const json& j) {
  require_keys(j, {"pose", "intrinsics", "width", "height"}, "Camera");
  Camera c;
  const auto& pose = j.at("pose");
  const auto& k = j.at("intrinsics");
  if (pose.size() != 16 || k.size() != 9)
    throw std::invalid_argument("Camera: pose must have 16 entries, intrinsics 9");
  for (int r = 0; r < 4; ++r)
    for (int col = 0; col < 4; ++col) c.pose(r, col) = pose[std::size_t(r * 4 + col)].get<double>();
  for (int r = 0; r < 3; ++r)
    for (int col = 0; col < 3; ++col)
      c.intrinsics(r, col) = k[std::size_t(r * 3 + col)].get<double>();
  c.width = j.at("width").get<int>();
  c.height = j.at("height").get<int>();
  return c;
}

// Build a camera at `center` looking at `target`, world "up" = -y.
inline Camera look_at_camera(const Eigen::Vector3d& center, const Eigen::Vector3d& target,
                             double focal_px, int width, int height) {
  Camera c;
  const Eigen::Vector3d z = (target - center).normalized();
  Eigen::Vector3d x = Eigen::Vector3d(0, -1, 0).cross(z);
  if (x.norm() < 1e-9) x = Eigen::Vector3d(1, 0, 0);  // looking straight up/down
  x.normalize();
  const Eigen::Vector3d y = z.cross(x);
  c.pose.block<3, 1>(0, 0) = x;
  c.pose.block<3, 1>(0, 1) = y;
  c.pose.block<3, 1>(0, 2) = z;
  c.pose.block<3, 1>(0, 3) = center;
  c.intrinsics << focal_px, 0, width / 2.0, 0, focal_px, height / 2.0, 0, 0, 1;
  c.width = width;
  c.height = height;
  return c;
}

// Intrinsics for sampling the camera's image plane on an h x w grid (focal
// lengths and principal point scale with the grid).
inline Eigen::Matrix3d scaled_intrinsics(const Camera& c, std::size_t h, std::size_t w) {
  const double sx = double(w) / double(c.width);
  const double sy = double(h) / double(c.height);
  Eigen::Matrix3d k = c.intrinsics;
  k(0, 0) *= sx;
  k(0, 2) *= sx;
  k(1, 1) *= sy;
  k(1, 2) *= sy;
  return k;
}

// World-space unit ray through continuous pixel coordinates (u, v) of an
// h x w sampling of the camera.
inline Eigen::Vector3d ray_dir_through(const Camera& c, const Eigen::Matrix3d& k, double u,
                                       double v) {
  const Eigen::Vector3d d_cam((u - k(0, 2)) / k(0, 0), (v - k(1, 2)) / k(1, 1), 1.0);
  return (c.rotation() * d_cam).normalized();
}

struct Rays {
  std::vector<Eigen::Vector3d> origins, dirs;  // row-major over h x w pixels
};

inline Rays pixel_rays(const Camera& cam, std::size_t h, std::size_t w) {
  cam.validate();
  const Eigen::Matrix3d k = scaled_intrinsics(cam, h, w);
  if (std::abs(k.determinant()) < 1e-12)
    throw std::invalid_argument("pixel_rays: singular intrinsics");
  Rays r;
  r.origins.assign(h * w, cam.center());
  r.dirs.resize(h * w);
  for (std::size_t v = 0; v < h; ++v)
    for (std::size_t u = 0; u < w; ++u)
      r.dirs[v * w + u] = ray_dir_through(cam, k, double(u) + 0.5, double(v) + 0.5);
  return r;
}

// Per-pixel Plücker coordinates as a [6, h, w] tensor: channels 0..2 hold the
// moment r_o x r_d, channels 3..5 the unit direction r_d.
template <class T>
Tensor<T> plucker_map(const Camera& cam, std::size_t h, std::size_t w) {
  const Rays rays = pixel_rays(cam, h, w);
  Tensor<T> out(Shape{6, h, w});
  T* po = out.data();
  const std::size_t plane = h * w;
  for (std::size_t i = 0; i < plane; ++i) {
    const Eigen::Vector3d m = rays.origins[i].cross(rays.dirs[i]);
    for (int c = 0; c < 3; ++c) po[std::size_t(c) * plane + i] = T(m[c]);
    for (int c = 0; c < 3; ++c) po[std::size_t(3 + c) * plane + i] = T(rays.dirs[i][c]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pose normalization: first camera to identity, then a global scale putting
// the mean distance of camera centers from their centroid at 1.

struct SimilarityTransform {
  Eigen::Matrix4d rigid = Eigen::Matrix4d::Identity();
  double scale = 1.0;

  Camera apply(const Camera& c) const {
    Camera out = c;
    out.pose = rigid * c.pose;
    out.pose.block<3, 1>(0, 3) *= scale;
    return out;
  }
};

inline std::pair<std::vector<Camera>, SimilarityTransform> normalize_poses(
    const std::vector<Camera>& cams) {
  if (cams.empty()) throw std::invalid_argument("normalize_poses: no cameras");
  SimilarityTransform tf;
  tf.rigid = cams[0].pose.inverse();
  std::vector<Eigen::Vector3d> centers(cams.size());
  for (std::size_t i = 0; i < cams.size(); ++i)
    centers[i] = (tf.rigid * cams[i].pose).block<3, 1>(0, 3);
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (const auto& c : centers) centroid += c;
  centroid /= double(cams.size());
  double mean_dist = 0.0;
  for (const auto& c : centers) mean_dist += (c - centroid).norm();
  mean_dist /= double(cams.size());
  tf.scale = mean_dist > 1e-12 ? 1.0 / mean_dist : 1.0;
  std::vector<Camera> out;
  out.reserve(cams.size());
  for (const auto& c : cams) out.push_back(tf.apply(c));
  return {std::move(out), tf};
}

// ---------------------------------------------------------------------------
// K-means view selection on features [camera center ; 0.5 * view direction].

namespace detail {
using Feature6 = Eigen::Matrix<double, 6, 1>;

inline Feature6 view_feature(const Camera& c) {
  Feature6 f;
  f.head<3>() = c.center();
  f.tail<3>() = 0.5 * c.view_dir();
  return f;
}
}  // namespace detail

inline std::vector<std::size_t> kmeans_select_views(const std::vector<Camera>& cams, std::size_t k,
                                                    std::uint64_t seed) {
  const std::size_t n = cams.size();
  if (k == 0 || k > n)
    throw std::invalid_argument("kmeans_select_views: k=" + std::to_string(k) + " of n=" +
                                std::to_string(n));
  std::vector<detail::Feature6> f(n);
  for (std::size_t i = 0; i < n; ++i) f[i] = detail::view_feature(cams[i]);

  Rng rng(seed);
  std::vector<detail::Feature6> centroids;
  centroids.reserve(k);
  // k-means++ seeding.
  centroids.push_back(f[rng.uniform_int(n)]);
  std::vector<double> d2(n);
  while (centroids.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::max();
      for (const auto& c : centroids) best = std::min(best, (f[i] - c).squaredNorm());
      d2[i] = best;
      total += best;
    }
    std::size_t pick = 0;
    if (total <= 0.0) {
      pick = rng.uniform_int(n);  // all points coincide with centroids
    } else {
      double r = rng.uniform() * total, acc = 0.0;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (r < acc) {
          pick = i;
          break;
        }
      }
    }
    centroids.push_back(f[pick]);
  }

  // Lloyd iterations.
  std::vector<std::size_t> assign(n, 0);
  for (int iter = 0; iter < 100; ++iter) {
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::max();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = (f[i] - centroids[c]).squaredNorm();
        if (d < best) {
          best = d;
          assign[i] = c;
        }
      }
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      detail::Feature6 sum = detail::Feature6::Zero();
      std::size_t count = 0;
      for (std::size_t i = 0; i < n; ++i)
        if (assign[i] == c) {
          sum += f[i];
          ++count;
        }
      if (count == 0) continue;  // empty cluster keeps its centroid
      const detail::Feature6 next = sum / double(count);
      shift = std::max(shift, (next - centroids[c]).norm());
      centroids[c] = next;
    }
    if (shift < 1e-8) break;
  }

  // Nearest member per centroid, deduplicated.
  std::vector<bool> taken(n, false);
  std::vector<std::size_t> picked;
  picked.reserve(k);
  for (std::size_t c = 0; c < k; ++c) {
    double best = std::numeric_limits<double>::max();
    std::size_t bi = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      const double d = (f[i] - centroids[c]).squaredNorm();
      if (d < best) {
        best = d;
        bi = i;
      }
    }
    if (bi < n) {
      taken[bi] = true;
      picked.push_back(bi);
    }
  }
  // Farthest-point backfill if centroid collisions left gaps.
  while (picked.size() < k) {
    double best = -1.0;
    std::size_t bi = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      double dmin = std::numeric_limits<double>::max();
      for (auto p : picked) dmin = std::min(dmin, (f[i] - f[p]).squaredNorm());
      if (dmin > best) {
        best = dmin;
        bi = i;
      }
    }
    taken[bi] = true;
    picked.push_back(bi);
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

// ---------------------------------------------------------------------------
// Context/target frame sampling over a frame sequence of length n: context
// indices advance by per-gap skips drawn from [skip_lo, skip_hi]; targets come
// from [min(C)-margin, max(C)+margin] minus C.

struct SampleConfig {
  std::size_t context_count = 4;
  std::size_t skip_lo = 1;
  std::size_t skip_hi = 8;
  std::size_t target_count = 2;
  std::size_t target_margin = 2;
};

inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> sample_context_target(
    std::size_t n, const SampleConfig& cfg, Rng& rng) {
  if (cfg.context_count == 0 || cfg.skip_lo == 0 || cfg.skip_hi < cfg.skip_lo)
    throw std::invalid_argument("sample_context_target: bad config");
  const std::size_t min_span = (cfg.context_count - 1) * cfg.skip_lo;
  if (min_span + 1 > n)
    throw std::invalid_argument("sample_context_target: " + std::to_string(n) +
                                " frames cannot fit " + std::to_string(cfg.context_count) +
                                " context views at min skip " + std::to_string(cfg.skip_lo));
  std::vector<std::size_t> ctx;
  for (int attempt = 0;; ++attempt) {
    std::vector<std::size_t> gaps(cfg.context_count - 1);
    std::size_t span = 0;
    for (auto& g : gaps) {
      g = cfg.skip_lo + rng.uniform_int(cfg.skip_hi - cfg.skip_lo + 1);
      span += g;
    }
    if (span + 1 <= n) {
      ctx.assign(1, rng.uniform_int(n - span));
      for (auto g : gaps) ctx.push_back(ctx.back() + g);
      break;
    }
    if (attempt > 200)
      throw std::invalid_argument("sample_context_target: could not place context views");
  }
  const std::size_t lo = ctx.front() >= cfg.target_margin ? ctx.front() - cfg.target_margin : 0;
  const std::size_t hi = std::min(n - 1, ctx.back() + cfg.target_margin);
  std::vector<std::size_t> candidates;
  for (std::size_t i = lo; i <= hi; ++i)
    if (std::find(ctx.begin(), ctx.end(), i) == ctx.end()) candidates.push_back(i);
  if (candidates.size() < cfg.target_count)
    throw std::invalid_argument("sample_context_target: only " +
                                std::to_string(candidates.size()) + " target candidates for " +
                                std::to_string(cfg.target_count) + " targets");
  std::vector<std::size_t> targets;
  for (std::size_t t = 0; t < cfg.target_count; ++t) {
    const std::size_t j = rng.uniform_int(candidates.size());
    targets.push_back(candidates[j]);
    candidates.erase(candidates.begin() + std::ptrdiff_t(j));
  }
  return {std::move(ctx), std::move(targets)};
}

// ---------------------------------------------------------------------------
// Stage-wise patch sizing: resize so a patch of size q covers what a patch of
// size p_i covered at the original resolution. round = half away from zero.

inline std::size_t round_half_away(double x) {
  return std::size_t(std::floor(x + 0.5));
}

inline std::pair<std::size_t, std::size_t> receptive_grid(std::size_t h, std::size_t w,
                                                          std::size_t p_i) {
  const std::size_t gh = round_half_away(double(h) / double(p_i));
  const std::size_t gw = round_half_away(double(w) / double(p_i));
  if (gh == 0 || gw == 0)
    throw std::invalid_argument("receptive_grid: zero token grid for " + std::to_string(h) + "x" +
                                std::to_string(w) + ", p=" + std::to_string(p_i));
  return {gh, gw};
}

template <class T>
Tensor<T> receptive_resize(const Tensor<T>& img, std::size_t p_i, std::size_t q) {
  if (img.rank() != 3) throw std::invalid_argument("receptive_resize: expected [C,H,W]");
  auto [gh, gw] = receptive_grid(img.extent(1), img.extent(2), p_i);
  return bilinear_resize(img, gh * q, gw * q);
}

}  // namespace dvsm
