#pragma once

#include <cmath>
#include <cstdint>

#include "dvsm/tensor.hpp"

namespace dvsm {

// Counts the work a forward pass issues. Used to compare the rendering path
// across configurations, where wall-clock is too noisy.
struct OpTrace {
  std::size_t attn_calls = 0;
  std::size_t attn_query_tokens = 0;
  std::size_t linear_calls = 0;

  bool operator==(const OpTrace&) const = default;

  static OpTrace*& current() {
    thread_local OpTrace* t = nullptr;
    return t;
  }
};

struct TraceScope {
  explicit TraceScope(OpTrace& t) : prev(OpTrace::current()) { OpTrace::current() = &t; }
  ~TraceScope() { OpTrace::current() = prev; }
  TraceScope(const TraceScope&) = delete;
  TraceScope& operator=(const TraceScope&) = delete;
  OpTrace* prev;
};

// Bias-free projection x[..,in] @ w[in,out].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w) {
  if (auto* tr = OpTrace::current()) tr->linear_calls++;
  return matmul(x, w);
}

// ---------------------------------------------------------------------------
// layer_norm over the last axis: (x - mean)/sqrt(var + eps) * gamma + beta,
// biased variance.

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-6)) {
  if (x.rank() < 1) throw std::invalid_argument("layer_norm: rank 0 input");
  const std::size_t d = x.extent(x.rank() - 1);
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d})
    throw std::invalid_argument("layer_norm: feature dim " + std::to_string(d) +
                                " vs gamma " + shape_str(gamma.shape()) + ", beta " +
                                shape_str(beta.shape()));
  const std::size_t rows = x.size() / d;
  Tensor<T> out(x.shape());
  // Saved for backward: normalized values and per-row reciprocal stddev.
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  const T* px = x.data();
  const T* pg = gamma.data();
  const T* pb = beta.data();
  T* po = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = px + r * d;
    T mean = T(0);
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= T(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      const T c = row[j] - mean;
      var += c * c;
    }
    var /= T(d);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T xh = (row[j] - mean) * rs;
      (*xhat)[r * d + j] = xh;
      po[r * d + j] = xh * pg[j] + pb[j];
    }
  }
  if (tracking(x, gamma, beta)) {
    mark_output(out, [x, gamma, beta, out, xhat, rstd, rows, d]() mutable {
      const T* g = out.grad_if_any();
      if (!g) return;
      const T* pg2 = gamma.data();
      std::vector<T> h(d);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* gr = g + r * d;
        const T* xr = xhat->data() + r * d;
        if (gamma.requires_grad()) {
          T* gg = gamma.grad();
          for (std::size_t j = 0; j < d; ++j) gg[j] += gr[j] * xr[j];
        }
        if (beta.requires_grad()) {
          T* gb = beta.grad();
          for (std::size_t j = 0; j < d; ++j) gb[j] += gr[j];
        }
        if (x.requires_grad()) {
          T mh = T(0), mhx = T(0);
          for (std::size_t j = 0; j < d; ++j) {
            h[j] = gr[j] * pg2[j];
            mh += h[j];
            mhx += h[j] * xr[j];
          }
          mh /= T(d);
          mhx /= T(d);
          T* gx = x.grad();
          const T rs = (*rstd)[r];
          for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += rs * (h[j] - mh - xr[j] * mhx);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax over the last axis, max-shifted.

template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.rank() < 1) throw std::invalid_argument("softmax: rank 0 input");
  const std::size_t d = x.extent(x.rank() - 1);
  const std::size_t rows = x.size() / d;
  Tensor<T> out(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = px + r * d;
    T mx = row[0];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      const T e = std::exp(row[j] - mx);
      po[r * d + j] = e;
      sum += e;
    }
    const T inv = T(1) / sum;
    for (std::size_t j = 0; j < d; ++j) po[r * d + j] *= inv;
  }
  if (tracking(x)) {
    mark_output(out, [x, out, rows, d]() mutable {
      const T* g = out.grad_if_any();
      if (!g) return;
      const T* py = out.data();
      T* gx = x.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        T dot = T(0);
        for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * py[r * d + j];
        for (std::size_t j = 0; j < d; ++j)
          gx[r * d + j] += py[r * d + j] * (g[r * d + j] - dot);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities.

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  static const T kC = T(std::sqrt(2.0 / 3.14159265358979323846));
  static const T kA = T(0.044715);
  Tensor<T> out(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T v = px[i];
    po[i] = T(0.5) * v * (T(1) + std::tanh(kC * (v + kA * v * v * v)));
  }
  if (tracking(x)) {
    mark_output(out, [x, out]() mutable {
      const T* g = out.grad_if_any();
      if (!g) return;
      const T* px2 = x.data();
      T* gx = x.grad();
      for (std::size_t i = 0; i < x.size(); ++i) {
        const T v = px2[i];
        const T u = kC * (v + kA * v * v * v);
        const T t = std::tanh(u);
        const T du = kC * (T(1) + T(3) * kA * v * v);
        gx[i] += g[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du);
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) po[i] = T(1) / (T(1) + std::exp(-px[i]));
  if (tracking(x)) {
    mark_output(out, [x, out]() mutable {
      const T* g = out.grad_if_any();
      if (!g) return;
      const T* py = out.data();
      T* gx = x.grad();
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g[i] * py[i] * (T(1) - py[i]);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// l2_normalize over the last axis: x / (||x|| + eps). Zero rows map to zero.

template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x, T eps = T(1e-6)) {
  if (x.rank() < 1) throw std::invalid_argument("l2_normalize: rank 0 input");
  const std::size_t d = x.extent(x.rank() - 1);
  const std::size_t rows = x.size() / d;
  Tensor<T> out(x.shape());
  auto norms = std::make_shared<std::vector<T>>(rows);
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T sq = T(0);
    for (std::size_t j = 0; j < d; ++j) sq += px[r * d + j] * px[r * d + j];
    const T n = std::sqrt(sq);
    (*norms)[r] = n;
    const T inv = T(1) / (n + eps);
    for (std::size_t j = 0; j < d; ++j) po[r * d + j] = px[r * d + j] * inv;
  }
  if (tracking(x)) {
    mark_output(out, [x, out, norms, rows, d, eps]() mutable {
      const T* g = out.grad_if_any();
      if (!g) return;
      const T* px2 = x.data();
      T* gx = x.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const T n = (*norms)[r];
        const T s = n + eps;
        T dot = T(0);
        for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * px2[r * d + j];
        for (std::size_t j = 0; j < d; ++j) {
          T dv = g[r * d + j] / s;
          if (n > T(0)) dv -= px2[r * d + j] * dot / (n * s * s);
          gx[r * d + j] += dv;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Multi-head attention with QK normalization:
//   softmax(qk_scale[h] * (l2n(Q) @ l2n(K)^T)) @ V, no mask.
// V's value dim may differ from the Q/K head dim.

template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const Tensor<T>& qk_scale) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3 || qk_scale.rank() != 1)
    throw std::invalid_argument("attention: Q/K/V must be [heads, tokens, dim], scale [heads]");
  const std::size_t h = q.extent(0);
  if (k.extent(0) != h || v.extent(0) != h || qk_scale.extent(0) != h ||
      q.extent(2) != k.extent(2) || k.extent(1) != v.extent(1))
    throw std::invalid_argument("attention: mismatched heads/tokens/dims: Q" + shape_str(q.shape()) +
                                " K" + shape_str(k.shape()) + " V" + shape_str(v.shape()));
  if (auto* tr = OpTrace::current()) {
    tr->attn_calls++;
    tr->attn_query_tokens += q.extent(1);
  }
  Tensor<T> qs = mul_bcast0(l2_normalize(q), qk_scale);
  Tensor<T> logits = matmul(qs, transpose_last2(l2_normalize(k)));
  return matmul(softmax(logits), v);
}

// ---------------------------------------------------------------------------
// patchify: [C,H,W] -> [(H/p)(W/p), C*p*p], token (gy,gx) row-major over the
// patch grid, feature index c*p*p + py*p + px. unpatchify inverts it exactly.

template <class T>
Tensor<T> patchify(const Tensor<T>& img, std::size_t p) {
  if (img.rank() != 3) throw std::invalid_argument("patchify: expected [C,H,W]");
  const std::size_t c = img.extent(0), hh = img.extent(1), ww = img.extent(2);
  if (p == 0 || hh % p != 0 || ww % p != 0)
    throw std::invalid_argument("patchify: patch " + std::to_string(p) + " does not divide " +
                                shape_str(img.shape()));
  const std::size_t gh = hh / p, gw = ww / p;
  Tensor<T> out(Shape{gh * gw, c * p * p});
  const T* pi = img.data();
  T* po = out.data();
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx) {
      T* tok = po + (gy * gw + gx) * c * p * p;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t py = 0; py < p; ++py)
          for (std::size_t px = 0; px < p; ++px)
            tok[ch * p * p + py * p + px] = pi[(ch * hh + gy * p + py) * ww + gx * p + px];
    }
  if (tracking(img)) {
    mark_output(out, [img, out, c, hh, ww, p, gh, gw]() mutable {
      const T* g = out.grad_if_any();
      if (!g) return;
      T* gi = img.grad();
      for (std::size_t gy = 0; gy < gh; ++gy)
        for (std::size_t gx = 0; gx < gw; ++gx) {
          const T* tok = g + (gy * gw + gx) * c * p * p;
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t py = 0; py < p; ++py)
              for (std::size_t px = 0; px < p; ++px)
                gi[(ch * hh + gy * p + py) * ww + gx * p + px] += tok[ch * p * p + py * p + px];
        }
    });
  }
  return out;
}

template <class T>
Tensor<T> unpatchify(const Tensor<T>& tokens, std::size_t grid_h, std::size_t grid_w,
                     std::size_t p) {
  if (tokens.rank() != 2 || tokens.extent(0) != grid_h * grid_w || p == 0 ||
      tokens.extent(1) % (p * p) != 0)
    throw std::invalid_argument("unpatchify: tokens " + shape_str(tokens.shape()) + " vs grid " +
                                std::to_string(grid_h) + "x" + std::to_string(grid_w) + ", p=" +
                                std::to_string(p));
  const std::size_t c = tokens.extent(1) / (p * p);
  const std::size_t hh = grid_h * p, ww = grid_w * p;
  Tensor<T> out(Shape{c, hh, ww});
  const T* pt = tokens.data();
  T* po = out.data();
  for (std::size_t gy = 0; gy < grid_h; ++gy)
    for (std::size_t gx = 0; gx < grid_w; ++gx) {
      const T* tok = pt + (gy * grid_w + gx) * c * p * p;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t py = 0; py < p; ++py)
          for (std::size_t px = 0; px < p; ++px)
            po[(ch * hh + gy * p + py) * ww + gx * p + px] = tok[ch * p * p + py * p + px];
    }
  if (tracking(tokens)) {
    mark_output(out, [tokens, out, c, hh, ww, p, grid_h, grid_w]() mutable {
      const T* g = out.grad_if_any();
      if (!g) return;
      T* gt = tokens.grad();
      for (std::size_t gy = 0; gy < grid_h; ++gy)
        for (std::size_t gx = 0; gx < grid_w; ++gx) {
          T* tok = gt + (gy * grid_w + gx) * c * p * p;
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t py = 0; py < p; ++py)
              for (std::size_t px = 0; px < p; ++px)
                tok[ch * p * p + py * p + px] += g[(ch * hh + gy * p + py) * ww + gx * p + px];
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// bilinear_resize, align_corners=false, edge-clamped taps.

namespace detail {
struct ResizeTap {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1-w1
};

inline std::vector<ResizeTap> resize_taps(std::size_t src, std::size_t dst) {
  std::vector<ResizeTap> taps(dst);
  for (std::size_t o = 0; o < dst; ++o) {
    const double s = (double(o) + 0.5) * double(src) / double(dst) - 0.5;
    double f = std::floor(s);
    double w = s - f;
    long i = long(f);
    long i0 = std::clamp(i, 0L, long(src) - 1);
    long i1 = std::clamp(i + 1, 0L, long(src) - 1);
    taps[o] = {std::size_t(i0), std::size_t(i1), w};
  }
  return taps;
}
}  // namespace detail

template <class T>
Tensor<T> bilinear_resize(const Tensor<T>& img, std::size_t out_h, std::size_t out_w) {
  if (img.rank() != 3) throw std::invalid_argument("bilinear_resize: expected [C,H,W]");
  if (out_h == 0 || out_w == 0) throw std::invalid_argument("bilinear_resize: zero target extent");
  const std::size_t c = img.extent(0), hh = img.extent(1), ww = img.extent(2);
  if (out_h == hh && out_w == ww) {
    // Sampling positions coincide with the source grid; keep it exact.
    Tensor<T> out = img.clone();
    if (tracking(img)) {
      mark_output(out, [img, out]() mutable {
        const T* g = out.grad_if_any();
        if (!g) return;
        T* gi = img.grad();
        for (std::size_t i = 0; i < img.size(); ++i) gi[i] += g[i];
      });
    }
    return out;
  }
  auto ty = std::make_shared<std::vector<detail::ResizeTap>>(detail::resize_taps(hh, out_h));
  auto tx = std::make_shared<std::vector<detail::ResizeTap>>(detail::resize_taps(ww, out_w));
  Tensor<T> out(Shape{c, out_h, out_w});
  const T* pi = img.data();
  T* po = out.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* plane = pi + ch * hh * ww;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto& ry = (*ty)[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto& rx = (*tx)[ox];
        const double v00 = double(plane[ry.i0 * ww + rx.i0]);
        const double v01 = double(plane[ry.i0 * ww + rx.i1]);
        const double v10 = double(plane[ry.i1 * ww + rx.i0]);
        const double v11 = double(plane[ry.i1 * ww + rx.i1]);
        const double top = v00 * (1.0 - rx.w1) + v01 * rx.w1;
        const double bot = v10 * (1.0 - rx.w1) + v11 * rx.w1;
        po[(ch * out_h + oy) * out_w + ox] = T(top * (1.0 - ry.w1) + bot * ry.w1);
      }
    }
  }
  if (tracking(img)) {
    mark_output(out, [img, out, ty, tx, c, hh, ww, out_h, out_w]() mutable {
      const T* g = out.grad_if_any();
      if (!g) return;
      T* gi = img.grad();
      for (std::size_t ch = 0; ch < c; ++ch) {
        T* plane = gi + ch * hh * ww;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const auto& ry = (*ty)[oy];
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const auto& rx = (*tx)[ox];
            const T gv = g[(ch * out_h + oy) * out_w + ox];
            plane[ry.i0 * ww + rx.i0] += gv * T((1.0 - rx.w1) * (1.0 - ry.w1));
            plane[ry.i0 * ww + rx.i1] += gv * T(rx.w1 * (1.0 - ry.w1));
            plane[ry.i1 * ww + rx.i0] += gv * T((1.0 - rx.w1) * ry.w1);
            plane[ry.i1 * ww + rx.i1] += gv * T(rx.w1 * ry.w1);
          }
        }
      }
    });
  }
  return out;
}

}  // namespace dvsm
