#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdlib>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dvsm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

[[noreturn]] inline void shape_error(const std::string& op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

// 64-byte-aligned storage. Vectorized kernels pick their peel/remainder split
// from the pointer alignment, so pinning the alignment keeps every run of the
// same computation on the same code path and makes results bit-reproducible
// regardless of heap history.
template <class T>
struct AlignedAlloc {
  using value_type = T;
  AlignedAlloc() = default;
  template <class U>
  AlignedAlloc(const AlignedAlloc<U>&) {}
  T* allocate(std::size_t n) {
    if (n == 0) return nullptr;
    void* p = std::aligned_alloc(64, (n * sizeof(T) + 63) / 64 * 64);
    if (!p) throw std::bad_alloc();
    return static_cast<T*>(p);
  }
  void deallocate(T* p, std::size_t) noexcept { std::free(p); }
  template <class U>
  bool operator==(const AlignedAlloc<U>&) const {
    return true;
  }
  template <class U>
  bool operator!=(const AlignedAlloc<U>&) const {
    return false;
  }
};

template <class T>
using AlignedVec = std::vector<T, AlignedAlloc<T>>;

template <class T>
struct TensorBuf {
  AlignedVec<T> data;
  AlignedVec<T> grad;  // empty until a gradient is first accumulated
  bool requires_grad = false;
};

// Dense row-major tensor. Copies are shallow: they share the buffer, so a
// reshape is a new shape over the same storage and gradients flow through it
// with no tape node.
template <class T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() : buf_(std::make_shared<TensorBuf<T>>()), shape_{} {}

  explicit Tensor(Shape shape, T fill = T(0))
      : buf_(std::make_shared<TensorBuf<T>>()), shape_(std::move(shape)) {
    buf_->data.assign(shape_numel(shape_), fill);
  }

  static Tensor from(Shape shape, std::vector<T> values) {
    if (shape_numel(shape) != values.size())
      throw std::invalid_argument("Tensor::from: " + shape_str(shape) + " wants " +
                                  std::to_string(shape_numel(shape)) + " values, got " +
                                  std::to_string(values.size()));
    Tensor t;
    t.shape_ = std::move(shape);
    t.buf_->data.assign(values.begin(), values.end());
    return t;
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t extent(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return buf_->data.size(); }

  T* data() { return buf_->data.data(); }
  const T* data() const { return buf_->data.data(); }
  AlignedVec<T>& vec() { return buf_->data; }
  const AlignedVec<T>& vec() const { return buf_->data; }

  T item() const {
    if (size() != 1) throw std::invalid_argument("item(): tensor has " + std::to_string(size()) + " elements");
    return buf_->data[0];
  }

  bool requires_grad() const { return buf_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    buf_->requires_grad = v;
    return *this;
  }

  bool grad_materialized() const { return !buf_->grad.empty(); }

  // Gradient storage, zero-initialized on first use.
  T* grad() const {
    if (buf_->grad.empty()) buf_->grad.assign(buf_->data.size(), T(0));
    return buf_->grad.data();
  }
  // nullptr when no gradient ever reached this tensor.
  const T* grad_if_any() const { return buf_->grad.empty() ? nullptr : buf_->grad.data(); }

  std::vector<T> grad_copy() const {
    return buf_->grad.empty() ? std::vector<T>(buf_->data.size(), T(0))
                              : std::vector<T>(buf_->grad.begin(), buf_->grad.end());
  }

  void zero_grad() {
    if (!buf_->grad.empty()) std::fill(buf_->grad.begin(), buf_->grad.end(), T(0));
  }

  Tensor reshape(Shape s) const {
    if (shape_numel(s) != size()) shape_error("reshape", shape_, s);
    Tensor t = *this;
    t.shape_ = std::move(s);
    return t;
  }

  Tensor clone() const {
    Tensor t(shape_);
    t.buf_->data = buf_->data;
    return t;
  }

  bool same_buffer(const Tensor& o) const { return buf_ == o.buf_; }

  bool all_finite() const {
    for (T v : buf_->data)
      if (!std::isfinite(double(v))) return false;
    return true;
  }

  void check_finite(const char* what) const {
    if (!all_finite()) throw std::runtime_error(std::string(what) + ": non-finite value");
  }

 private:
  std::shared_ptr<TensorBuf<T>> buf_;
  Shape shape_;
};

// Reverse-mode tape. Nodes are replayed exactly once, in reverse recording
// order; a tensor consumed k times accumulates k partials via +=.
template <class T>
class Tape {
 public:
  void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }

  std::size_t size() const { return nodes_.size(); }

  void backward(Tensor<T> loss) {
    if (loss.size() != 1) throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) throw std::invalid_argument("backward: loss is detached from the tape");
    if (used_) throw std::runtime_error("backward: tape already consumed; reset before reusing");
    used_ = true;
    loss.grad()[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  void reset() {
    nodes_.clear();
    used_ = false;
  }

  static Tape*& current() {
    thread_local Tape* t = nullptr;
    return t;
  }

 private:
  std::vector<std::function<void()>> nodes_;
  bool used_ = false;
};

template <class T>
struct TapeScope {
  explicit TapeScope(Tape<T>& t) : prev(Tape<T>::current()) { Tape<T>::current() = &t; }
  ~TapeScope() { Tape<T>::current() = prev; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
  Tape<T>* prev;
};

template <class T>
inline bool tracking(const Tensor<T>& a) {
  return Tape<T>::current() != nullptr && a.requires_grad();
}

template <class T, class... Rest>
inline bool tracking(const Tensor<T>& a, const Rest&... rest) {
  return tracking(a) || tracking(rest...);
}

template <class T>
inline void mark_output(Tensor<T>& out, std::function<void()> fn) {
  out.set_requires_grad(true);
  Tape<T>::current()->record(std::move(fn));
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error("add", a.shape(), b.shape());
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] + pb[i];
  if (tracking(a, b)) {
    mark_output(out, [a, b, out]() mutable {
      const T* g = out.grad_if_any();
      if (!g) return;
      if (a.requires_grad()) {
        T* ga = a.grad();
        for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        T* gb = b.grad();
        for (std::size_t i = 0; i < b.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error("sub", a.shape(), b.shape());
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] - pb[i];
  if (tracking(a, b)) {
    mark_output(out, [a, b, out]() mutable {
      const T* g = out.grad_if_any();
      if (!g) return;
      if (a.requires_grad()) {
        T* ga = a.grad();
        for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        T* gb = b.grad();
        for (std::size_t i = 0; i < b.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] * pb[i];
  if (tracking(a, b)) {
    mark_output(out, [a, b, out]() mutable {
      const T* g = out.grad_if_any();
      if (!g) return;
      if (a.requires_grad()) {
        T* ga = a.grad();
        const T* pb2 = b.data();
        for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g[i] * pb2[i];
      }
      if (b.requires_grad()) {
        T* gb = b.grad();
        const T* pa2 = a.data();
        for (std::size_t i = 0; i < b.size(); ++i) gb[i] += g[i] * pa2[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] * c;
  if (tracking(a)) {
    mark_output(out, [a, out, c]() mutable {
      const T* g = out.grad_if_any();
      if (!g) return;
      T* ga = a.grad();
      for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g[i] * c;
    });
  }
  return out;
}

// Multiply tensor [B, ...] by one scalar per leading index, s of shape [B].
template <class T>
Tensor<T> mul_bcast0(const Tensor<T>& x, const Tensor<T>& s) {
  if (x.rank() < 1 || s.rank() != 1 || x.extent(0) != s.extent(0))
    shape_error("mul_bcast0", x.shape(), s.shape());
  const std::size_t b = x.extent(0);
  const std::size_t inner = x.size() / b;
  Tensor<T> out(x.shape());
  const T* px = x.data();
  const T* ps = s.data();
  T* po = out.data();
  for (std::size_t i = 0; i < b; ++i) {
    const T c = ps[i];
    for (std::size_t j = 0; j < inner; ++j) po[i * inner + j] = px[i * inner + j] * c;
  }
  if (tracking(x, s)) {
    mark_output(out, [x, s, out, b, inner]() mutable {
      const T* g = out.grad_if_any();
      if (!g) return;
      if (x.requires_grad()) {
        T* gx = x.grad();
        const T* ps2 = s.data();
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < inner; ++j) gx[i * inner + j] += g[i * inner + j] * ps2[i];
      }
      if (s.requires_grad()) {
        T* gs = s.grad();
        const T* px2 = x.data();
        for (std::size_t i = 0; i < b; ++i) {
          T acc = T(0);
          for (std::size_t j = 0; j < inner; ++j) acc += g[i * inner + j] * px2[i * inner + j];
          gs[i] += acc;
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T acc = T(0);
  const T* pa = a.data();
  for (std::size_t i = 0; i < a.size(); ++i) acc += pa[i];
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (tracking(a)) {
    mark_output(out, [a, out]() mutable {
      const T* g = out.grad_if_any();
      if (!g) return;
      T* ga = a.grad();
      for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g[0];
    });
  }
  return out;
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return scale(sum_all(a), T(1) / T(a.size()));
}

// ---------------------------------------------------------------------------
// Matmul: [..,m,k] x [..,k,n] -> [..,m,n]; leading batch extents broadcast.

namespace detail {

inline bool broadcast_batch(const Shape& a, const Shape& b, Shape& out) {
  const std::size_t r = std::max(a.size(), b.size());
  out.assign(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1) return false;
    out[i] = std::max(ea, eb);
  }
  return true;
}

// Offset of batch block `idx` of `full` inside an operand with batch shape
// `own` (broadcast dims contribute stride 0).
inline std::size_t batch_offset(std::size_t idx, const Shape& full, const Shape& own,
                                std::size_t block) {
  std::size_t off = 0;
  std::size_t stride = block;
  const std::size_t pad = full.size() - own.size();
  for (std::size_t i = full.size(); i-- > 0;) {
    const std::size_t coord = idx % full[i];
    idx /= full[i];
    if (i >= pad && own[i - pad] != 1) {
      off += coord * stride;
      stride *= own[i - pad];
    }
  }
  return off;
}

template <class T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using EMap = Eigen::Map<EMat<T>>;
template <class T>
using ECMap = Eigen::Map<const EMat<T>>;

}  // namespace detail

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) shape_error("matmul", a.shape(), b.shape());
  const std::size_t m = a.extent(a.rank() - 2), k = a.extent(a.rank() - 1);
  const std::size_t k2 = b.extent(b.rank() - 2), n = b.extent(b.rank() - 1);
  if (k != k2) shape_error("matmul", a.shape(), b.shape());
  Shape ba(a.shape().begin(), a.shape().end() - 2);
  Shape bb(b.shape().begin(), b.shape().end() - 2);
  Shape bo;
  if (!detail::broadcast_batch(ba, bb, bo)) shape_error("matmul", a.shape(), b.shape());
  const std::size_t batches = shape_numel(bo);

  Shape os = bo;
  os.push_back(m);
  os.push_back(n);
  Tensor<T> out(std::move(os));

  for (std::size_t i = 0; i < batches; ++i) {
    const T* pa = a.data() + detail::batch_offset(i, bo, ba, m * k);
    const T* pb = b.data() + detail::batch_offset(i, bo, bb, k * n);
    T* po = out.data() + i * m * n;
    detail::EMap<T>(po, m, n).noalias() =
        detail::ECMap<T>(pa, m, k) * detail::ECMap<T>(pb, k, n);
  }

  if (tracking(a, b)) {
    mark_output(out, [a, b, out, bo, ba, bb, batches, m, k, n]() mutable {
      const T* g = out.grad_if_any();
      if (!g) return;
      if (a.requires_grad()) {
        T* ga = a.grad();
        for (std::size_t i = 0; i < batches; ++i) {
          const T* pg = g + i * m * n;
          const T* pb = b.data() + detail::batch_offset(i, bo, bb, k * n);
          T* pga = ga + detail::batch_offset(i, bo, ba, m * k);
          detail::EMap<T>(pga, m, k).noalias() +=
              detail::ECMap<T>(pg, m, n) * detail::ECMap<T>(pb, k, n).transpose();
        }
      }
      if (b.requires_grad()) {
        T* gb = b.grad();
        for (std::size_t i = 0; i < batches; ++i) {
          const T* pg = g + i * m * n;
          const T* pa = a.data() + detail::batch_offset(i, bo, ba, m * k);
          T* pgb = gb + detail::batch_offset(i, bo, bb, k * n);
          detail::EMap<T>(pgb, k, n).noalias() +=
              detail::ECMap<T>(pa, m, k).transpose() * detail::ECMap<T>(pg, m, n);
        }
      }
    });
  }
  return out;
}

// Swap the last two axes.
template <class T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
  if (a.rank() < 2) throw std::invalid_argument("transpose_last2: rank < 2");
  const std::size_t m = a.extent(a.rank() - 2), n = a.extent(a.rank() - 1);
  Shape os = a.shape();
  std::swap(os[os.size() - 2], os[os.size() - 1]);
  Tensor<T> out(std::move(os));
  const std::size_t batches = a.size() / (m * n);
  const T* pa = a.data();
  T* po = out.data();
  for (std::size_t i = 0; i < batches; ++i)
    detail::EMap<T>(po + i * m * n, n, m) = detail::ECMap<T>(pa + i * m * n, m, n).transpose();
  if (tracking(a)) {
    mark_output(out, [a, out, batches, m, n]() mutable {
      const T* g = out.grad_if_any();
      if (!g) return;
      T* ga = a.grad();
      for (std::size_t i = 0; i < batches; ++i)
        detail::EMap<T>(ga + i * m * n, m, n) += detail::ECMap<T>(g + i * m * n, n, m).transpose();
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Row range along axis 0: out = x[r0:r1].

template <class T>
Tensor<T> slice0(const Tensor<T>& x, std::size_t r0, std::size_t r1) {
  if (x.rank() < 1 || r0 > r1 || r1 > x.extent(0))
    throw std::invalid_argument("slice0: range [" + std::to_string(r0) + "," + std::to_string(r1) +
                                ") out of " + shape_str(x.shape()));
  const std::size_t inner = x.size() / std::max<std::size_t>(x.extent(0), 1);
  Shape os = x.shape();
  os[0] = r1 - r0;
  Tensor<T> out(std::move(os));
  std::copy_n(x.data() + r0 * inner, (r1 - r0) * inner, out.data());
  if (tracking(x)) {
    mark_output(out, [x, out, r0, inner]() mutable {
      const T* g = out.grad_if_any();
      if (!g) return;
      T* gx = x.grad();
      for (std::size_t i = 0; i < out.size(); ++i) gx[r0 * inner + i] += g[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> concat0(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat0: no inputs");
  Shape os = parts[0].shape();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != os.size() || !std::equal(os.begin() + 1, os.end(), p.shape().begin() + 1))
      shape_error("concat0", os, p.shape());
    rows += p.extent(0);
  }
  os[0] = rows;
  Tensor<T> out(std::move(os));
  T* po = out.data();
  for (const auto& p : parts) {
    std::copy_n(p.data(), p.size(), po);
    po += p.size();
  }
  bool track = false;
  for (const auto& p : parts) track = track || tracking(p);
  if (track) {
    mark_output(out, [parts, out]() mutable {
      const T* g = out.grad_if_any();
      if (!g) return;
      std::size_t off = 0;
      for (auto& p : parts) {
        if (p.requires_grad()) {
          T* gp = p.grad();
          for (std::size_t i = 0; i < p.size(); ++i) gp[i] += g[off + i];
        }
        off += p.size();
      }
    });
  }
  return out;
}

// [Tk, D] -> [h, Tk, D/h]
template <class T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  if (x.rank() != 2 || x.extent(1) % heads != 0)
    throw std::invalid_argument("split_heads: " + shape_str(x.shape()) + " with h=" + std::to_string(heads));
  const std::size_t t = x.extent(0), d = x.extent(1), dh = d / heads;
  Tensor<T> out(Shape{heads, t, dh});
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < t; ++i)
      std::copy_n(px + i * d + h * dh, dh, po + (h * t + i) * dh);
  if (tracking(x)) {
    mark_output(out, [x, out, heads, t, d, dh]() mutable {
      const T* g = out.grad_if_any();
      if (!g) return;
      T* gx = x.grad();
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < dh; ++j) gx[i * d + h * dh + j] += g[(h * t + i) * dh + j];
    });
  }
  return out;
}

// [h, Tk, dh] -> [Tk, h*dh]
template <class T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  if (x.rank() != 3) throw std::invalid_argument("merge_heads: rank != 3");
  const std::size_t heads = x.extent(0), t = x.extent(1), dh = x.extent(2), d = heads * dh;
  Tensor<T> out(Shape{t, d});
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < t; ++i)
      std::copy_n(px + (h * t + i) * dh, dh, po + i * d + h * dh);
  if (tracking(x)) {
    mark_output(out, [x, out, heads, t, d, dh]() mutable {
      const T* g = out.grad_if_any();
      if (!g) return;
      T* gx = x.grad();
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < dh; ++j) gx[(h * t + i) * dh + j] += g[i * d + h * dh + j];
    });
  }
  return out;
}

}  // namespace dvsm
