#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "wm/blas.hpp"
#include "wm/error.hpp"

namespace wm {

using Shape = std::vector<int>;

inline long numel_of(const Shape& s) {
  long n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {
inline thread_local int no_grad_depth = 0;
}

// RAII guard: while alive, ops on this thread record no backward graph.
struct NoGradGuard {
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

// One node of the backward graph. Tensors are shared handles to these.
template <class S>
struct TensorImpl {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // empty until first needed; same length as value after
  bool requires = false;    // gradient flows to or through this node
  bool leaf_param = false;  // trainable leaf; grad persists across backward calls
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
  }
};

namespace detail {
// Active leaf filter for the running backward pass (see backward below).
// Null means every reachable leaf parameter accumulates.
inline thread_local const void* leaf_filter = nullptr;
}

template <class S>
class Tensor {
 public:
  using Impl = TensorImpl<S>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Impl> p) : p_(std::move(p)) {}

  static Tensor zeros(Shape s) { return full(std::move(s), S(0)); }

  static Tensor full(Shape s, S v) {
    auto p = std::make_shared<Impl>();
    long n = numel_of(s);
    p->shape = std::move(s);
    p->value.assign(static_cast<size_t>(n), v);
    return Tensor(std::move(p));
  }

  static Tensor from(Shape s, std::vector<S> v) {
    if (numel_of(s) != static_cast<long>(v.size()))
      throw ShapeError("tensor data length " + std::to_string(v.size()) +
                       " does not match shape " + shape_str(s));
    auto p = std::make_shared<Impl>();
    p->shape = std::move(s);
    p->value = std::move(v);
    return Tensor(std::move(p));
  }

  static Tensor scalar(S v) { return full({1}, v); }

  bool defined() const { return p_ != nullptr; }
  const Shape& shape() const { return p_->shape; }
  long numel() const { return static_cast<long>(p_->value.size()); }
  S* data() { return p_->value.data(); }
  const S* data() const { return p_->value.data(); }
  S item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return p_->value[0];
  }

  // Marks this tensor as a trainable leaf. Its grad accumulates additively
  // across backward calls; callers zero it between optimizer steps.
  Tensor& mark_parameter() {
    p_->leaf_param = true;
    p_->requires = true;
    return *this;
  }
  bool is_parameter() const { return p_->leaf_param; }
  bool requires_grad() const { return p_->requires; }

  S* grad_data() {
    p_->ensure_grad();
    return p_->grad.data();
  }
  const std::vector<S>& grad() const { return p_->grad; }
  void zero_grad() {
    p_->ensure_grad();
    std::fill(p_->grad.begin(), p_->grad.end(), S(0));
  }

  // Value-only copy: no graph, no parameter flag.
  Tensor detached_copy() const {
    auto p = std::make_shared<Impl>();
    p->shape = p_->shape;
    p->value = p_->value;
    return Tensor(std::move(p));
  }

  template <class T2>
  Tensor<T2> cast() const {
    std::vector<T2> v(p_->value.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T2>(p_->value[i]);
    return Tensor<T2>::from(p_->shape, std::move(v));
  }

  std::shared_ptr<Impl> impl() const { return p_; }

 private:
  std::shared_ptr<Impl> p_;
};

namespace detail {

template <class S>
Tensor<S> make_op(Shape shape, std::vector<std::shared_ptr<TensorImpl<S>>> parents,
                  std::function<void(TensorImpl<S>&)> bwd) {
  auto p = std::make_shared<TensorImpl<S>>();
  p->shape = std::move(shape);
  p->value.resize(static_cast<size_t>(numel_of(p->shape)));
  if (grad_enabled()) {
    bool any = false;
    for (auto& par : parents)
      if (par->requires) any = true;
    if (any) {
      p->requires = true;
      p->parents = std::move(parents);
      p->backward_fn = std::move(bwd);
    }
  }
  return Tensor<S>(std::move(p));
}

// True when gradient should be produced for this parent. Leaf parameters
// additionally consult the routing filter installed by backward().
template <class S>
bool wants_grad(const TensorImpl<S>& t) {
  if (!t.requires) return false;
  if (t.leaf_param && leaf_filter != nullptr) {
    auto* set = static_cast<const std::unordered_set<const void*>*>(leaf_filter);
    return set->count(&t) != 0;
  }
  return true;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar root. Interior grads of the reachable
// subgraph are reset first; leaf-parameter grads accumulate additively.
// `seed` scales the whole pass (used for batch averaging). When
// `allowed_leaves` is given, only leaf parameters in the set accumulate.
template <class S>
void backward(const Tensor<S>& root, S seed = S(1),
              const std::unordered_set<const void*>* allowed_leaves = nullptr) {
  if (root.numel() != 1)
    throw ShapeError("backward requires a scalar loss, got " + shape_str(root.shape()));
  auto* r = root.impl().get();
  if (!r->requires) return;

  // Iterative post-order DFS: topological order, each node exactly once.
  std::vector<TensorImpl<S>*> order;
  std::unordered_set<TensorImpl<S>*> seen;
  std::vector<std::pair<TensorImpl<S>*, size_t>> stack;
  stack.push_back({r, 0});
  seen.insert(r);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorImpl<S>* par = node->parents[idx++].get();
      if (par->requires && !seen.count(par)) {
        seen.insert(par);
        stack.push_back({par, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* n : order) {
    if (n->leaf_param)
      n->ensure_grad();  // keep prior accumulation
    else
      n->grad.assign(n->value.size(), S(0));
  }
  r->grad[0] += seed;  // root may itself be a leaf parameter

  detail::leaf_filter = allowed_leaves;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
  detail::leaf_filter = nullptr;
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

enum class Act { Relu, Tanh, Sigmoid };

template <class S>
Tensor<S> activation(const Tensor<S>& x, Act kind) {
  auto xi = x.impl();
  long n = x.numel();
  auto out = detail::make_op<S>(
      x.shape(), {xi}, nullptr);
  const S* in = xi->value.data();
  S* o = out.data();
  switch (kind) {
    case Act::Relu:
      for (long i = 0; i < n; ++i) o[i] = in[i] > S(0) ? in[i] : S(0);
      break;
    case Act::Tanh:
      for (long i = 0; i < n; ++i) o[i] = std::tanh(in[i]);
      break;
    case Act::Sigmoid:
      for (long i = 0; i < n; ++i) o[i] = S(1) / (S(1) + std::exp(-in[i]));
      break;
  }
  if (out.impl()->requires) {
    out.impl()->backward_fn = [xi, kind, n](TensorImpl<S>& self) {
      if (!detail::wants_grad(*xi)) return;
      xi->ensure_grad();
      const S* g = self.grad.data();
      const S* v = self.value.data();
      const S* in = xi->value.data();
      S* gx = xi->grad.data();
      switch (kind) {
        case Act::Relu:
          for (long i = 0; i < n; ++i)
            if (in[i] > S(0)) gx[i] += g[i];
          break;
        case Act::Tanh:
          for (long i = 0; i < n; ++i) gx[i] += g[i] * (S(1) - v[i] * v[i]);
          break;
        case Act::Sigmoid:
          for (long i = 0; i < n; ++i) gx[i] += g[i] * v[i] * (S(1) - v[i]);
          break;
      }
    };
  }
  return out;
}

template <class S>
Tensor<S> relu(const Tensor<S>& x) { return activation(x, Act::Relu); }
template <class S>
Tensor<S> tanh_act(const Tensor<S>& x) { return activation(x, Act::Tanh); }
template <class S>
Tensor<S> sigmoid(const Tensor<S>& x) { return activation(x, Act::Sigmoid); }

namespace detail {
template <class S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}
}  // namespace detail

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "add");
  auto ai = a.impl(), bi = b.impl();
  long n = a.numel();
  auto out = detail::make_op<S>(a.shape(), {ai, bi}, nullptr);
  const S* av = ai->value.data();
  const S* bv = bi->value.data();
  S* o = out.data();
  for (long i = 0; i < n; ++i) o[i] = av[i] + bv[i];
  if (out.impl()->requires) {
    out.impl()->backward_fn = [ai, bi, n](TensorImpl<S>& self) {
      const S* g = self.grad.data();
      if (detail::wants_grad(*ai)) {
        ai->ensure_grad();
        S* ga = ai->grad.data();
        for (long i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (detail::wants_grad(*bi)) {
        bi->ensure_grad();
        S* gb = bi->grad.data();
        for (long i = 0; i < n; ++i) gb[i] += g[i];
      }
    };
  }
  return out;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "sub");
  auto ai = a.impl(), bi = b.impl();
  long n = a.numel();
  auto out = detail::make_op<S>(a.shape(), {ai, bi}, nullptr);
  const S* av = ai->value.data();
  const S* bv = bi->value.data();
  S* o = out.data();
  for (long i = 0; i < n; ++i) o[i] = av[i] - bv[i];
  if (out.impl()->requires) {
    out.impl()->backward_fn = [ai, bi, n](TensorImpl<S>& self) {
      const S* g = self.grad.data();
      if (detail::wants_grad(*ai)) {
        ai->ensure_grad();
        S* ga = ai->grad.data();
        for (long i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (detail::wants_grad(*bi)) {
        bi->ensure_grad();
        S* gb = bi->grad.data();
        for (long i = 0; i < n; ++i) gb[i] -= g[i];
      }
    };
  }
  return out;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "mul");
  auto ai = a.impl(), bi = b.impl();
  long n = a.numel();
  auto out = detail::make_op<S>(a.shape(), {ai, bi}, nullptr);
  const S* av = ai->value.data();
  const S* bv = bi->value.data();
  S* o = out.data();
  for (long i = 0; i < n; ++i) o[i] = av[i] * bv[i];
  if (out.impl()->requires) {
    out.impl()->backward_fn = [ai, bi, n](TensorImpl<S>& self) {
      const S* g = self.grad.data();
      const S* av = ai->value.data();
      const S* bv = bi->value.data();
      if (detail::wants_grad(*ai)) {
        ai->ensure_grad();
        S* ga = ai->grad.data();
        for (long i = 0; i < n; ++i) ga[i] += g[i] * bv[i];
      }
      if (detail::wants_grad(*bi)) {
        bi->ensure_grad();
        S* gb = bi->grad.data();
        for (long i = 0; i < n; ++i) gb[i] += g[i] * av[i];
      }
    };
  }
  return out;
}

template <class S>
Tensor<S> square(const Tensor<S>& x) { return mul(x, x); }

// out = m * x + c (elementwise, scalar coefficients).
template <class S>
Tensor<S> affine(const Tensor<S>& x, S m, S c) {
  auto xi = x.impl();
  long n = x.numel();
  auto out = detail::make_op<S>(x.shape(), {xi}, nullptr);
  const S* in = xi->value.data();
  S* o = out.data();
  for (long i = 0; i < n; ++i) o[i] = m * in[i] + c;
  if (out.impl()->requires) {
    out.impl()->backward_fn = [xi, m, n](TensorImpl<S>& self) {
      if (!detail::wants_grad(*xi)) return;
      xi->ensure_grad();
      const S* g = self.grad.data();
      S* gx = xi->grad.data();
      for (long i = 0; i < n; ++i) gx[i] += m * g[i];
    };
  }
  return out;
}

template <class S>
Tensor<S> scale(const Tensor<S>& x, S m) { return affine(x, m, S(0)); }

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> sum(const Tensor<S>& x) {
  auto xi = x.impl();
  long n = x.numel();
  auto out = detail::make_op<S>({1}, {xi}, nullptr);
  S acc = 0;
  const S* in = xi->value.data();
  for (long i = 0; i < n; ++i) acc += in[i];
  out.data()[0] = acc;
  if (out.impl()->requires) {
    out.impl()->backward_fn = [xi, n](TensorImpl<S>& self) {
      if (!detail::wants_grad(*xi)) return;
      xi->ensure_grad();
      S g = self.grad[0];
      S* gx = xi->grad.data();
      for (long i = 0; i < n; ++i) gx[i] += g;
    };
  }
  return out;
}

// Mean absolute difference over all elements: (1/n) * sum |a - b|.
template <class S>
Tensor<S> mean_abs(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "mean_abs");
  auto ai = a.impl(), bi = b.impl();
  long n = a.numel();
  auto out = detail::make_op<S>({1}, {ai, bi}, nullptr);
  const S* av = ai->value.data();
  const S* bv = bi->value.data();
  S acc = 0;
  for (long i = 0; i < n; ++i) acc += std::abs(av[i] - bv[i]);
  out.data()[0] = acc / static_cast<S>(n);
  if (out.impl()->requires) {
    out.impl()->backward_fn = [ai, bi, n](TensorImpl<S>& self) {
      const S g = self.grad[0] / static_cast<S>(n);
      const S* av = ai->value.data();
      const S* bv = bi->value.data();
      bool wa = detail::wants_grad(*ai);
      bool wb = detail::wants_grad(*bi);
      if (!wa && !wb) return;
      if (wa) ai->ensure_grad();
      if (wb) bi->ensure_grad();
      for (long i = 0; i < n; ++i) {
        S d = av[i] - bv[i];
        S s = d > S(0) ? g : (d < S(0) ? -g : S(0));
        if (wa) ai->grad[i] += s;
        if (wb) bi->grad[i] -= s;
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

// Concatenate [H,W,Ci] tensors along the channel axis.
template <class S>
Tensor<S> concat_channels(const std::vector<Tensor<S>>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: empty input");
  const Shape& s0 = xs[0].shape();
  if (s0.size() != 3) throw ShapeError("concat_channels expects [H,W,C] tensors");
  int h = s0[0], w = s0[1];
  int ctot = 0;
  std::vector<std::shared_ptr<TensorImpl<S>>> parents;
  for (auto& x : xs) {
    const Shape& s = x.shape();
    if (s.size() != 3 || s[0] != h || s[1] != w)
      throw ShapeError("concat_channels: incompatible shape " + shape_str(s));
    ctot += s[2];
    parents.push_back(x.impl());
  }
  auto out = detail::make_op<S>({h, w, ctot}, parents, nullptr);
  S* o = out.data();
  long pixels = static_cast<long>(h) * w;
  for (long p = 0; p < pixels; ++p) {
    S* dst = o + p * ctot;
    for (auto& par : parents) {
      int c = par->shape[2];
      std::memcpy(dst, par->value.data() + p * c, sizeof(S) * c);
      dst += c;
    }
  }
  if (out.impl()->requires) {
    auto pars = parents;
    out.impl()->backward_fn = [pars, pixels, ctot](TensorImpl<S>& self) {
      const S* g = self.grad.data();
      int off = 0;
      for (auto& par : pars) {
        int c = par->shape[2];
        if (detail::wants_grad(*par)) {
          par->ensure_grad();
          S* gp = par->grad.data();
          for (long p = 0; p < pixels; ++p) {
            const S* gs = g + p * ctot + off;
            S* gd = gp + p * c;
            for (int i = 0; i < c; ++i) gd[i] += gs[i];
          }
        }
        off += c;
      }
    };
  }
  return out;
}

// [H,W,C*r*r] -> [H*r,W*r,C]; sub-pixel order is channel-major:
// out(y*r+dy, x*r+dx, c) = in(y, x, c*r*r + dy*r + dx). Exact inverse of
// space_to_depth.
template <class S>
Tensor<S> depth_to_space(const Tensor<S>& x, int r) {
  const Shape& s = x.shape();
  if (s.size() != 3 || s[2] % (r * r) != 0)
    throw ShapeError("depth_to_space: need [H,W,C*r^2], got " + shape_str(s));
  int h = s[0], w = s[1], cin = s[2], c = cin / (r * r);
  auto xi = x.impl();
  auto out = detail::make_op<S>({h * r, w * r, c}, {xi}, nullptr);
  const S* in = xi->value.data();
  S* o = out.data();
  int wr = w * r;
  for (int y = 0; y < h; ++y)
    for (int x0 = 0; x0 < w; ++x0) {
      const S* src = in + (static_cast<long>(y) * w + x0) * cin;
      for (int cc = 0; cc < c; ++cc)
        for (int dy = 0; dy < r; ++dy)
          for (int dx = 0; dx < r; ++dx)
            o[(static_cast<long>(y * r + dy) * wr + (x0 * r + dx)) * c + cc] =
                src[cc * r * r + dy * r + dx];
    }
  if (out.impl()->requires) {
    out.impl()->backward_fn = [xi, h, w, c, r, cin, wr](TensorImpl<S>& self) {
      if (!detail::wants_grad(*xi)) return;
      xi->ensure_grad();
      const S* g = self.grad.data();
      S* gx = xi->grad.data();
      for (int y = 0; y < h; ++y)
        for (int x0 = 0; x0 < w; ++x0) {
          S* dst = gx + (static_cast<long>(y) * w + x0) * cin;
          for (int cc = 0; cc < c; ++cc)
            for (int dy = 0; dy < r; ++dy)
              for (int dx = 0; dx < r; ++dx)
                dst[cc * r * r + dy * r + dx] +=
                    g[(static_cast<long>(y * r + dy) * wr + (x0 * r + dx)) * c + cc];
        }
    };
  }
  return out;
}

// [H*r,W*r,C] -> [H,W,C*r*r]; inverse of depth_to_space.
template <class S>
Tensor<S> space_to_depth(const Tensor<S>& x, int r) {
  const Shape& s = x.shape();
  if (s.size() != 3 || s[0] % r != 0 || s[1] % r != 0)
    throw ShapeError("space_to_depth: need [H*r,W*r,C], got " + shape_str(s));
  int h = s[0] / r, w = s[1] / r, c = s[2], cout = c * r * r;
  auto xi = x.impl();
  auto out = detail::make_op<S>({h, w, cout}, {xi}, nullptr);
  const S* in = xi->value.data();
  S* o = out.data();
  int wr = s[1];
  for (int y = 0; y < h; ++y)
    for (int x0 = 0; x0 < w; ++x0) {
      S* dst = o + (static_cast<long>(y) * w + x0) * cout;
      for (int cc = 0; cc < c; ++cc)
        for (int dy = 0; dy < r; ++dy)
          for (int dx = 0; dx < r; ++dx)
            dst[cc * r * r + dy * r + dx] =
                in[(static_cast<long>(y * r + dy) * wr + (x0 * r + dx)) * c + cc];
    }
  if (out.impl()->requires) {
    out.impl()->backward_fn = [xi, h, w, c, r, cout, wr](TensorImpl<S>& self) {
      if (!detail::wants_grad(*xi)) return;
      xi->ensure_grad();
      const S* g = self.grad.data();
      S* gx = xi->grad.data();
      for (int y = 0; y < h; ++y)
        for (int x0 = 0; x0 < w; ++x0) {
          const S* src = g + (static_cast<long>(y) * w + x0) * cout;
          for (int cc = 0; cc < c; ++cc)
            for (int dy = 0; dy < r; ++dy)
              for (int dx = 0; dx < r; ++dx)
                gx[(static_cast<long>(y * r + dy) * wr + (x0 * r + dx)) * c + cc] +=
                    src[cc * r * r + dy * r + dx];
        }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear-algebra ops (BLAS-backed)
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
std::vector<S>& scratch_a() {
  static thread_local std::vector<S> buf;
  return buf;
}
template <class S>
std::vector<S>& scratch_b() {
  static thread_local std::vector<S> buf;
  return buf;
}

// Gather 3x3-style patches: col is [H*W, k*k*C] row-major, zero padding.
template <class S>
void im2col(const S* src, int h, int w, int c, int k, S* col) {
  const int pad = k / 2;
  const long kc = static_cast<long>(k) * k * c;
  for (int y = 0; y < h; ++y) {
    for (int ky = 0; ky < k; ++ky) {
      const int sy = y + ky - pad;
      const bool row_ok = sy >= 0 && sy < h;
      const S* srow = row_ok ? src + static_cast<long>(sy) * w * c : nullptr;
      for (int kx = 0; kx < k; ++kx) {
        S* dst = col + static_cast<long>(y) * w * kc + (ky * k + kx) * c;
        if (!row_ok) {
          for (int x = 0; x < w; ++x) std::memset(dst + static_cast<long>(x) * kc, 0, sizeof(S) * c);
          continue;
        }
        for (int x = 0; x < w; ++x) {
          const int sx = x + kx - pad;
          S* d = dst + static_cast<long>(x) * kc;
          if (sx < 0 || sx >= w)
            std::memset(d, 0, sizeof(S) * c);
          else
            std::memcpy(d, srow + static_cast<long>(sx) * c, sizeof(S) * c);
        }
      }
    }
  }
}

// Scatter-add the col layout back onto the image: dst[sy,sx,c] += col entries.
template <class S>
void col2im_add(const S* col, int h, int w, int c, int k, S* dst) {
  const int pad = k / 2;
  const long kc = static_cast<long>(k) * k * c;
  for (int y = 0; y < h; ++y) {
    for (int ky = 0; ky < k; ++ky) {
      const int sy = y + ky - pad;
      if (sy < 0 || sy >= h) continue;
      S* drow = dst + static_cast<long>(sy) * w * c;
      for (int kx = 0; kx < k; ++kx) {
        const S* srcp = col + static_cast<long>(y) * w * kc + (ky * k + kx) * c;
        for (int x = 0; x < w; ++x) {
          const int sx = x + kx - pad;
          if (sx < 0 || sx >= w) continue;
          const S* s = srcp + static_cast<long>(x) * kc;
          S* d = drow + static_cast<long>(sx) * c;
          for (int i = 0; i < c; ++i) d[i] += s[i];
        }
      }
    }
  }
}

}  // namespace detail

// Same-padding stride-1 2D convolution.
// x: [H,W,Cin], kernels: [k,k,Cin,Cout] (row-major, Cout fastest), bias: [Cout].
template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& kernels, const Tensor<S>& bias) {
  const Shape& xs = x.shape();
  const Shape& ks = kernels.shape();
  if (xs.size() != 3) throw ShapeError("conv2d: input must be [H,W,C], got " + shape_str(xs));
  if (ks.size() != 4 || ks[0] != ks[1])
    throw ShapeError("conv2d: kernels must be [k,k,Cin,Cout], got " + shape_str(ks));
  const int k = ks[0];
  if (k % 2 == 0) throw ShapeError("conv2d: kernel size must be odd");
  const int h = xs[0], w = xs[1], cin = xs[2], cout = ks[3];
  if (ks[2] != cin)
    throw ShapeError("conv2d: input has " + std::to_string(cin) +
                     " channels but kernels expect " + std::to_string(ks[2]));
  if (bias.shape() != Shape{cout})
    throw ShapeError("conv2d: bias must be [Cout], got " + shape_str(bias.shape()));

  auto xi = x.impl();
  auto ki = kernels.impl();
  auto bi = bias.impl();
  auto out = detail::make_op<S>({h, w, cout}, {xi, ki, bi}, nullptr);

  const long pixels = static_cast<long>(h) * w;
  const long kdim = static_cast<long>(k) * k * cin;
  S* o = out.data();
  if (k == 1) {
    gemm(false, false, static_cast<int>(pixels), cout, cin, S(1), xi->value.data(), cin,
         ki->value.data(), cout, S(0), o, cout);
  } else {
    auto& col = detail::scratch_a<S>();
    col.resize(static_cast<size_t>(pixels * kdim));
    detail::im2col(xi->value.data(), h, w, cin, k, col.data());
    gemm(false, false, static_cast<int>(pixels), cout, static_cast<int>(kdim), S(1),
         col.data(), static_cast<int>(kdim), ki->value.data(), cout, S(0), o, cout);
  }
  const S* bv = bi->value.data();
  for (long p = 0; p < pixels; ++p) {
    S* row = o + p * cout;
    for (int c = 0; c < cout; ++c) row[c] += bv[c];
  }

  if (out.impl()->requires) {
    out.impl()->backward_fn = [xi, ki, bi, h, w, cin, cout, k, pixels, kdim](TensorImpl<S>& self) {
      const S* g = self.grad.data();
      if (detail::wants_grad(*bi)) {
        bi->ensure_grad();
        S* gb = bi->grad.data();
        for (long p = 0; p < pixels; ++p) {
          const S* row = g + p * cout;
          for (int c = 0; c < cout; ++c) gb[c] += row[c];
        }
      }
      const bool need_dk = detail::wants_grad(*ki);
      const bool need_dx = detail::wants_grad(*xi);
      if (!need_dk && !need_dx) return;
      if (k == 1) {
        if (need_dk) {
          ki->ensure_grad();
          gemm(true, false, cin, cout, static_cast<int>(pixels), S(1), xi->value.data(), cin,
               g, cout, S(1), ki->grad.data(), cout);
        }
        if (need_dx) {
          xi->ensure_grad();
          gemm(false, true, static_cast<int>(pixels), cin, cout, S(1), g, cout,
               ki->value.data(), cout, S(1), xi->grad.data(), cin);
        }
        return;
      }
      if (need_dk) {
        auto& col = detail::scratch_a<S>();
        col.resize(static_cast<size_t>(pixels * kdim));
        detail::im2col(xi->value.data(), h, w, cin, k, col.data());
        ki->ensure_grad();
        gemm(true, false, static_cast<int>(kdim), cout, static_cast<int>(pixels), S(1),
             col.data(), static_cast<int>(kdim), g, cout, S(1), ki->grad.data(), cout);
      }
      if (need_dx) {
        auto& dcol = detail::scratch_b<S>();
        dcol.resize(static_cast<size_t>(pixels * kdim));
        gemm(false, true, static_cast<int>(pixels), static_cast<int>(kdim), cout, S(1), g,
             cout, ki->value.data(), cout, S(0), dcol.data(), static_cast<int>(kdim));
        xi->ensure_grad();
        detail::col2im_add(dcol.data(), h, w, cin, k, xi->grad.data());
      }
    };
  }
  return out;
}

// Shared per-pixel channel transform: out[p] = in[p]^T * weight + bias.
// x: [H,W,Cin], weight: [Cin,Cout], bias: [Cout].
template <class S>
Tensor<S> pointwise_linear(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 3) throw ShapeError("pointwise_linear: input must be [H,W,C]");
  if (ws.size() != 2 || ws[0] != xs[2])
    throw ShapeError("pointwise_linear: weight " + shape_str(ws) +
                     " incompatible with input " + shape_str(xs));
  const int cin = ws[0], cout = ws[1];
  if (bias.shape() != Shape{cout})
    throw ShapeError("pointwise_linear: bias must be [Cout], got " + shape_str(bias.shape()));
  const int h = xs[0], w = xs[1];
  const long pixels = static_cast<long>(h) * w;

  auto xi = x.impl();
  auto wi = weight.impl();
  auto bi = bias.impl();
  auto out = detail::make_op<S>({h, w, cout}, {xi, wi, bi}, nullptr);
  S* o = out.data();
  gemm(false, false, static_cast<int>(pixels), cout, cin, S(1), xi->value.data(), cin,
       wi->value.data(), cout, S(0), o, cout);
  const S* bv = bi->value.data();
  for (long p = 0; p < pixels; ++p)
    for (int c = 0; c < cout; ++c) o[p * cout + c] += bv[c];

  if (out.impl()->requires) {
    out.impl()->backward_fn = [xi, wi, bi, cin, cout, pixels](TensorImpl<S>& self) {
      const S* g = self.grad.data();
      if (detail::wants_grad(*bi)) {
        bi->ensure_grad();
        S* gb = bi->grad.data();
        for (long p = 0; p < pixels; ++p)
          for (int c = 0; c < cout; ++c) gb[c] += g[p * cout + c];
      }
      if (detail::wants_grad(*wi)) {
        wi->ensure_grad();
        gemm(true, false, cin, cout, static_cast<int>(pixels), S(1), xi->value.data(), cin,
             g, cout, S(1), wi->grad.data(), cout);
      }
      if (detail::wants_grad(*xi)) {
        xi->ensure_grad();
        gemm(false, true, static_cast<int>(pixels), cin, cout, S(1), g, cout,
             wi->value.data(), cout, S(1), xi->grad.data(), cin);
      }
    };
  }
  return out;
}

// Channel correlation matrix: G[a,b] = (1/(H*W)) * sum_p x[p,a]*x[p,b].
template <class S>
Tensor<S> gram(const Tensor<S>& x) {
  const Shape& xs = x.shape();
  if (xs.size() != 3) throw ShapeError("gram: input must be [H,W,C], got " + shape_str(xs));
  const int c = xs[2];
  const long pixels = static_cast<long>(xs[0]) * xs[1];
  auto xi = x.impl();
  auto out = detail::make_op<S>({c, c}, {xi}, nullptr);
  gemm(true, false, c, c, static_cast<int>(pixels), S(1) / static_cast<S>(pixels),
       xi->value.data(), c, xi->value.data(), c, S(0), out.data(), c);
  if (out.impl()->requires) {
    out.impl()->backward_fn = [xi, c, pixels](TensorImpl<S>& self) {
      if (!detail::wants_grad(*xi)) return;
      xi->ensure_grad();
      const S* g = self.grad.data();
      std::vector<S> sym(static_cast<size_t>(c) * c);
      for (int a = 0; a < c; ++a)
        for (int b = 0; b < c; ++b)
          sym[a * c + b] = (g[a * c + b] + g[b * c + a]) / static_cast<S>(pixels);
      gemm(false, false, static_cast<int>(pixels), c, c, S(1), xi->value.data(), c,
           sym.data(), c, S(1), xi->grad.data(), c);
    };
  }
  return out;
}

// Broadcast multiply of a per-channel vector: out[...,c] = x[...,c] * v[c].
template <class S>
Tensor<S> mul_channels(const Tensor<S>& x, const Tensor<S>& v) {
  const Shape& xs = x.shape();
  const int c = xs.back();
  if (v.shape() != Shape{c})
    throw ShapeError("mul_channels: vector " + shape_str(v.shape()) +
                     " does not match channels of " + shape_str(xs));
  const long rows = x.numel() / c;
  auto xi = x.impl();
  auto vi = v.impl();
  auto out = detail::make_op<S>(xs, {xi, vi}, nullptr);
  const S* in = xi->value.data();
  const S* vv = vi->value.data();
  S* o = out.data();
  for (long r = 0; r < rows; ++r)
    for (int i = 0; i < c; ++i) o[r * c + i] = in[r * c + i] * vv[i];
  if (out.impl()->requires) {
    out.impl()->backward_fn = [xi, vi, rows, c](TensorImpl<S>& self) {
      const S* g = self.grad.data();
      const S* in = xi->value.data();
      const S* vv = vi->value.data();
      if (detail::wants_grad(*xi)) {
        xi->ensure_grad();
        S* gx = xi->grad.data();
        for (long r = 0; r < rows; ++r)
          for (int i = 0; i < c; ++i) gx[r * c + i] += g[r * c + i] * vv[i];
      }
      if (detail::wants_grad(*vi)) {
        vi->ensure_grad();
        S* gv = vi->grad.data();
        for (long r = 0; r < rows; ++r)
          for (int i = 0; i < c; ++i) gv[i] += g[r * c + i] * in[r * c + i];
      }
    };
  }
  return out;
}

// Column sums of a [R,C] matrix -> [C].
template <class S>
Tensor<S> col_sums(const Tensor<S>& m) {
  const Shape& ms = m.shape();
  if (ms.size() != 2) throw ShapeError("col_sums: input must be [R,C], got " + shape_str(ms));
  const int r = ms[0], c = ms[1];
  auto mi = m.impl();
  auto out = detail::make_op<S>({c}, {mi}, nullptr);
  S* o = out.data();
  std::fill(o, o + c, S(0));
  const S* in = mi->value.data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) o[j] += in[i * c + j];
  if (out.impl()->requires) {
    out.impl()->backward_fn = [mi, r, c](TensorImpl<S>& self) {
      if (!detail::wants_grad(*mi)) return;
      mi->ensure_grad();
      const S* g = self.grad.data();
      S* gm = mi->grad.data();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) gm[i * c + j] += g[j];
    };
  }
  return out;
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace wm
