#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cosdet {

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::runtime_error(msg);
}

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) {
    check(d >= 0, "negative extent in shape");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until touched by backward
  bool requires_grad = false;
  bool leaf = true;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

// Dense row-major tensor of doubles. Copying a Tensor copies the handle;
// the underlying buffer is shared.
class Tensor {
 public:
  Tensor() : impl_(std::make_shared<TensorImpl>()) {}

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : impl_(std::make_shared<TensorImpl>()) {
    check(shape_numel(shape) == static_cast<std::int64_t>(values.size()),
          "tensor: shape " + shape_str(shape) + " does not match " +
              std::to_string(values.size()) + " values");
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0),
                  requires_grad);
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), v),
                  requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<double>{v}, requires_grad);
  }

  const Shape& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return impl_->data.size(); }

  std::vector<double>& values() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }
  double& at(std::size_t i) { return impl_->data[i]; }
  double at(std::size_t i) const { return impl_->data[i]; }

  double item() const {
    check(size() == 1, "item: tensor has " + std::to_string(size()) + " elements");
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }
  bool is_leaf() const { return impl_->leaf; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::vector<double>& grad() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  const std::vector<double>& grad() const {
    check(has_grad(), "grad: gradient buffer not populated");
    return impl_->grad;
  }
  void zero_grad() {
    impl_->ensure_grad();
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }

  // value copy with no graph or grad attached
  Tensor detach() const {
    Tensor t(impl_->shape, impl_->data, false);
    return t;
  }

  bool all_finite() const {
    for (double v : impl_->data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Ordered record of executed ops. Backward replays the record once, in
// reverse; op outputs get a fresh gradient buffer per pass while leaves
// accumulate across passes.
class Tape {
 public:
  struct Op {
    std::shared_ptr<TensorImpl> out;
    std::function<void()> backward;
  };

  void record(const Tensor& out, std::function<void()> backward) {
    ops_.push_back(Op{out.impl(), std::move(backward)});
  }

  void backward(const Tensor& loss) {
    check(loss.size() == 1, "backward: loss must be a scalar");
    for (auto& op : ops_) {
      op.out->ensure_grad();
      std::fill(op.out->grad.begin(), op.out->grad.end(), 0.0);
    }
    loss.impl()->ensure_grad();
    loss.impl()->grad[0] += 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) it->backward();
  }

  void clear() { ops_.clear(); }
  std::size_t size() const { return ops_.size(); }

  static Tape*& current() {
    thread_local Tape* cur = nullptr;
    return cur;
  }

 private:
  std::vector<Op> ops_;
};

// Installs a tape for the current thread for the lifetime of the scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : prev_(Tape::current()) { Tape::current() = &tape; }
  ~TapeScope() { Tape::current() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

namespace detail {

inline bool tracing(std::initializer_list<const Tensor*> inputs) {
  if (Tape::current() == nullptr) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

inline Tensor make_output(Shape shape, std::vector<double> values, bool traced) {
  Tensor out(std::move(shape), std::move(values), traced);
  if (traced) out.impl()->leaf = false;
  return out;
}

// accumulate into grad buffer of an input impl
inline std::vector<double>& grad_of(const std::shared_ptr<TensorImpl>& impl) {
  impl->ensure_grad();
  return impl->grad;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops

inline Tensor add(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(),
        "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const bool traced = detail::tracing({&a, &b});
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  Tensor o = detail::make_output(a.shape(), std::move(out), traced);
  if (traced) {
    auto ai = a.impl(), bi = b.impl(), oi = o.impl();
    Tape::current()->record(o, [ai, bi, oi] {
      auto& g = oi->grad;
      if (ai->requires_grad) {
        auto& ga = detail::grad_of(ai);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bi->requires_grad) {
        auto& gb = detail::grad_of(bi);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return o;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(),
        "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const bool traced = detail::tracing({&a, &b});
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
  Tensor o = detail::make_output(a.shape(), std::move(out), traced);
  if (traced) {
    auto ai = a.impl(), bi = b.impl(), oi = o.impl();
    Tape::current()->record(o, [ai, bi, oi] {
      auto& g = oi->grad;
      if (ai->requires_grad) {
        auto& ga = detail::grad_of(ai);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bi->requires_grad) {
        auto& gb = detail::grad_of(bi);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return o;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(),
        "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const bool traced = detail::tracing({&a, &b});
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  Tensor o = detail::make_output(a.shape(), std::move(out), traced);
  if (traced) {
    auto ai = a.impl(), bi = b.impl(), oi = o.impl();
    Tape::current()->record(o, [ai, bi, oi] {
      auto& g = oi->grad;
      if (ai->requires_grad) {
        auto& ga = detail::grad_of(ai);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bi->data[i];
      }
      if (bi->requires_grad) {
        auto& gb = detail::grad_of(bi);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ai->data[i];
      }
    });
  }
  return o;
}

inline Tensor add(const Tensor& a, double s) {
  const bool traced = detail::tracing({&a});
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + s;
  Tensor o = detail::make_output(a.shape(), std::move(out), traced);
  if (traced) {
    auto ai = a.impl(), oi = o.impl();
    Tape::current()->record(o, [ai, oi] {
      auto& ga = detail::grad_of(ai);
      for (std::size_t i = 0; i < oi->grad.size(); ++i) ga[i] += oi->grad[i];
    });
  }
  return o;
}

inline Tensor mul(const Tensor& a, double s) {
  const bool traced = detail::tracing({&a});
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * s;
  Tensor o = detail::make_output(a.shape(), std::move(out), traced);
  if (traced) {
    auto ai = a.impl(), oi = o.impl();
    Tape::current()->record(o, [ai, oi, s] {
      auto& ga = detail::grad_of(ai);
      for (std::size_t i = 0; i < oi->grad.size(); ++i) ga[i] += oi->grad[i] * s;
    });
  }
  return o;
}

inline Tensor relu(const Tensor& a) {
  const bool traced = detail::tracing({&a});
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) > 0.0 ? a.at(i) : 0.0;
  Tensor o = detail::make_output(a.shape(), std::move(out), traced);
  if (traced) {
    auto ai = a.impl(), oi = o.impl();
    Tape::current()->record(o, [ai, oi] {
      auto& ga = detail::grad_of(ai);
      for (std::size_t i = 0; i < oi->grad.size(); ++i)
        if (ai->data[i] > 0.0) ga[i] += oi->grad[i];
    });
  }
  return o;
}

inline Tensor exp(const Tensor& a) {
  const bool traced = detail::tracing({&a});
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.at(i));
  Tensor o = detail::make_output(a.shape(), std::move(out), traced);
  if (traced) {
    auto ai = a.impl(), oi = o.impl();
    Tape::current()->record(o, [ai, oi] {
      auto& ga = detail::grad_of(ai);
      for (std::size_t i = 0; i < oi->grad.size(); ++i) ga[i] += oi->grad[i] * oi->data[i];
    });
  }
  return o;
}

inline Tensor log(const Tensor& a) {
  const bool traced = detail::tracing({&a});
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.at(i));
  Tensor o = detail::make_output(a.shape(), std::move(out), traced);
  if (traced) {
    auto ai = a.impl(), oi = o.impl();
    Tape::current()->record(o, [ai, oi] {
      auto& ga = detail::grad_of(ai);
      for (std::size_t i = 0; i < oi->grad.size(); ++i) ga[i] += oi->grad[i] / ai->data[i];
    });
  }
  return o;
}

inline Tensor sigmoid(const Tensor& a) {
  const bool traced = detail::tracing({&a});
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.at(i);
    if (x >= 0.0) {
      out[i] = 1.0 / (1.0 + std::exp(-x));
    } else {
      const double e = std::exp(x);
      out[i] = e / (1.0 + e);
    }
  }
  Tensor o = detail::make_output(a.shape(), std::move(out), traced);
  if (traced) {
    auto ai = a.impl(), oi = o.impl();
    Tape::current()->record(o, [ai, oi] {
      auto& ga = detail::grad_of(ai);
      for (std::size_t i = 0; i < oi->grad.size(); ++i) {
        const double y = oi->data[i];
        ga[i] += oi->grad[i] * y * (1.0 - y);
      }
    });
  }
  return o;
}

// ---------------------------------------------------------------------------
// reductions and shape ops

inline Tensor reduce_sum(const Tensor& a) {
  const bool traced = detail::tracing({&a});
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.at(i);
  Tensor o = detail::make_output(Shape{}, {s}, traced);
  if (traced) {
    auto ai = a.impl(), oi = o.impl();
    Tape::current()->record(o, [ai, oi] {
      auto& ga = detail::grad_of(ai);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += oi->grad[0];
    });
  }
  return o;
}

inline Tensor reduce_mean(const Tensor& a) {
  check(a.size() > 0, "reduce_mean: empty tensor");
  const bool traced = detail::tracing({&a});
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.at(i);
  const double inv = 1.0 / static_cast<double>(a.size());
  Tensor o = detail::make_output(Shape{}, {s * inv}, traced);
  if (traced) {
    auto ai = a.impl(), oi = o.impl();
    Tape::current()->record(o, [ai, oi, inv] {
      auto& ga = detail::grad_of(ai);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += oi->grad[0] * inv;
    });
  }
  return o;
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  check(shape_numel(shape) == static_cast<std::int64_t>(a.size()),
        "reshape: numel mismatch " + shape_str(a.shape()) + " -> " + shape_str(shape));
  const bool traced = detail::tracing({&a});
  Tensor o = detail::make_output(std::move(shape), a.values(), traced);
  if (traced) {
    auto ai = a.impl(), oi = o.impl();
    Tape::current()->record(o, [ai, oi] {
      auto& ga = detail::grad_of(ai);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += oi->grad[i];
    });
  }
  return o;
}

// concat along axis 0 of 1-D tensors or axis 0/1 of 2-D tensors
inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  check(!parts.empty(), "concat: no inputs");
  const int nd = parts[0].ndim();
  check(nd == 1 || nd == 2, "concat: only 1-D and 2-D supported");
  check(axis >= 0 && axis < nd, "concat: bad axis");
  bool traced = false;
  if (Tape::current() != nullptr)
    for (const auto& p : parts)
      if (p.requires_grad()) traced = true;

  Shape out_shape = parts[0].shape();
  for (std::size_t p = 1; p < parts.size(); ++p) {
    check(parts[p].ndim() == nd, "concat: rank mismatch");
    for (int d = 0; d < nd; ++d)
      if (d != axis)
        check(parts[p].dim(d) == parts[0].dim(d),
              "concat: extent mismatch on axis " + std::to_string(d));
    out_shape[static_cast<std::size_t>(axis)] += parts[p].dim(axis);
  }

  std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)));
  std::vector<std::size_t> offsets(parts.size());  // per part, column or row offset
  if (nd == 1 || axis == 0) {
    std::size_t pos = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      offsets[p] = pos;
      const auto& v = parts[p].values();
      std::copy(v.begin(), v.end(), out.begin() + static_cast<std::ptrdiff_t>(pos));
      pos += v.size();
    }
  } else {  // 2-D, axis 1
    const int rows = parts[0].dim(0);
    const int out_cols = out_shape[1];
    int col = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      offsets[p] = static_cast<std::size_t>(col);
      const int cols = parts[p].dim(1);
      const auto& v = parts[p].values();
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
          out[static_cast<std::size_t>(r * out_cols + col + c)] =
              v[static_cast<std::size_t>(r * cols + c)];
      col += cols;
    }
  }

  Tensor o = detail::make_output(out_shape, std::move(out), traced);
  if (traced) {
    std::vector<std::shared_ptr<TensorImpl>> impls;
    impls.reserve(parts.size());
    for (const auto& p : parts) impls.push_back(p.impl());
    auto oi = o.impl();
    const int rows = nd == 2 ? parts[0].dim(0) : 0;
    const int out_cols = nd == 2 ? out_shape[1] : 0;
    const bool flat = (nd == 1 || axis == 0);
    Tape::current()->record(o, [impls, oi, offsets, rows, out_cols, flat] {
      for (std::size_t p = 0; p < impls.size(); ++p) {
        if (!impls[p]->requires_grad) continue;
        auto& gp = detail::grad_of(impls[p]);
        if (flat) {
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += oi->grad[offsets[p] + i];
        } else {
          const int cols = static_cast<int>(gp.size()) / rows;
          for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c)
              gp[static_cast<std::size_t>(r * cols + c)] +=
                  oi->grad[static_cast<std::size_t>(r * out_cols) + offsets[p] +
                           static_cast<std::size_t>(c)];
        }
      }
    });
  }
  return o;
}

// ---------------------------------------------------------------------------
// linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.ndim() == 2 && b.ndim() == 2, "matmul: expects 2-D inputs");
  check(a.dim(1) == b.dim(0), "matmul: inner extents differ, " + shape_str(a.shape()) +
                                  " x " + shape_str(b.shape()));
  const int n = a.dim(0), k = a.dim(1), m = b.dim(1);
  const bool traced = detail::tracing({&a, &b});
  std::vector<double> out(static_cast<std::size_t>(n) * m, 0.0);
  {
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    double* po = out.data();
    for (int i = 0; i < n; ++i)
      for (int kk = 0; kk < k; ++kk) {
        const double av = pa[i * k + kk];
        const double* pbr = pb + kk * m;
        double* por = po + i * m;
        for (int j = 0; j < m; ++j) por[j] += av * pbr[j];
      }
  }
  Tensor o = detail::make_output(Shape{n, m}, std::move(out), traced);
  if (traced) {
    auto ai = a.impl(), bi = b.impl(), oi = o.impl();
    Tape::current()->record(o, [ai, bi, oi, n, k, m] {
      const double* g = oi->grad.data();
      if (ai->requires_grad) {
        auto& ga = detail::grad_of(ai);
        const double* pb = bi->data.data();
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < m; ++j) {
            const double gv = g[i * m + j];
            for (int kk = 0; kk < k; ++kk) ga[static_cast<std::size_t>(i * k + kk)] += gv * pb[kk * m + j];
          }
      }
      if (bi->requires_grad) {
        auto& gb = detail::grad_of(bi);
        const double* pa = ai->data.data();
        for (int i = 0; i < n; ++i)
          for (int kk = 0; kk < k; ++kk) {
            const double av = pa[i * k + kk];
            const double* gr = g + i * m;
            double* gbr = gb.data() + kk * m;
            for (int j = 0; j < m; ++j) gbr[j] += av * gr[j];
          }
      }
    });
  }
  return o;
}

// x [N,K] * w [M,K]^T + b [M] -> [N,M]
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  check(x.ndim() == 2 && w.ndim() == 2 && b.ndim() == 1, "linear: bad ranks");
  check(x.dim(1) == w.dim(1), "linear: feature extents differ, " + shape_str(x.shape()) +
                                  " vs " + shape_str(w.shape()));
  check(w.dim(0) == b.dim(0), "linear: bias extent differs from output extent");
  const int n = x.dim(0), k = x.dim(1), m = w.dim(0);
  const bool traced = detail::tracing({&x, &w, &b});
  std::vector<double> out(static_cast<std::size_t>(n) * m);
  {
    const double* px = x.values().data();
    const double* pw = w.values().data();
    const double* pbv = b.values().data();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) {
        const double* xr = px + i * k;
        const double* wr = pw + j * k;
        double s = pbv[j];
        for (int kk = 0; kk < k; ++kk) s += xr[kk] * wr[kk];
        out[static_cast<std::size_t>(i * m + j)] = s;
      }
  }
  Tensor o = detail::make_output(Shape{n, m}, std::move(out), traced);
  if (traced) {
    auto xi = x.impl(), wi = w.impl(), bi2 = b.impl(), oi = o.impl();
    Tape::current()->record(o, [xi, wi, bi2, oi, n, k, m] {
      const double* g = oi->grad.data();
      if (xi->requires_grad) {
        auto& gx = detail::grad_of(xi);
        const double* pw = wi->data.data();
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < m; ++j) {
            const double gv = g[i * m + j];
            const double* wr = pw + j * k;
            double* gxr = gx.data() + i * k;
            for (int kk = 0; kk < k; ++kk) gxr[kk] += gv * wr[kk];
          }
      }
      if (wi->requires_grad) {
        auto& gw = detail::grad_of(wi);
        const double* px = xi->data.data();
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < m; ++j) {
            const double gv = g[i * m + j];
            const double* xr = px + i * k;
            double* gwr = gw.data() + j * k;
            for (int kk = 0; kk < k; ++kk) gwr[kk] += gv * xr[kk];
          }
      }
      if (bi2->requires_grad) {
        auto& gb = detail::grad_of(bi2);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < m; ++j) gb[static_cast<std::size_t>(j)] += g[i * m + j];
      }
    });
  }
  return o;
}

// ---------------------------------------------------------------------------
// convolution and pooling

inline int conv_out_extent(int in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

// x [C,H,W], w [O,C,kh,kw], b [O]; zero padding
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  check(x.ndim() == 3 && w.ndim() == 4 && b.ndim() == 1, "conv2d: bad ranks");
  check(x.dim(0) == w.dim(1), "conv2d: input channels " + std::to_string(x.dim(0)) +
                                  " vs kernel channels " + std::to_string(w.dim(1)));
  check(w.dim(0) == b.dim(0), "conv2d: bias extent differs from output channels");
  check(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const int HO = conv_out_extent(H, KH, stride, pad);
  const int WO = conv_out_extent(W, KW, stride, pad);
  check(HO > 0 && WO > 0, "conv2d: output would be empty");
  const bool traced = detail::tracing({&x, &w, &b});

  std::vector<double> out(static_cast<std::size_t>(O) * HO * WO);
  const double* px = x.values().data();
  const double* pw = w.values().data();
  const double* pb = b.values().data();
  for (int o = 0; o < O; ++o) {
    double* po = out.data() + static_cast<std::size_t>(o) * HO * WO;
    for (int i = 0; i < HO * WO; ++i) po[i] = pb[o];
    for (int c = 0; c < C; ++c) {
      const double* pxc = px + static_cast<std::size_t>(c) * H * W;
      const double* pwc = pw + (static_cast<std::size_t>(o) * C + c) * KH * KW;
      for (int kh = 0; kh < KH; ++kh)
        for (int kw = 0; kw < KW; ++kw) {
          const double wv = pwc[kh * KW + kw];
          if (wv == 0.0) continue;
          for (int oh = 0; oh < HO; ++oh) {
            const int ih = oh * stride + kh - pad;
            if (ih < 0 || ih >= H) continue;
            // bounds on ow so that iw = ow*stride + kw - pad lies in [0, W)
            int lo = 0;
            while (lo < WO && lo * stride + kw - pad < 0) ++lo;
            int hi = WO;
            while (hi > lo && (hi - 1) * stride + kw - pad >= W) --hi;
            const double* xr = pxc + ih * W + kw - pad;
            double* orow = po + oh * WO;
            for (int ow = lo; ow < hi; ++ow) orow[ow] += wv * xr[ow * stride];
          }
        }
    }
  }

  Tensor o = detail::make_output(Shape{O, HO, WO}, std::move(out), traced);
  if (traced) {
    auto xi = x.impl(), wi = w.impl(), bi2 = b.impl(), oi = o.impl();
    Tape::current()->record(o, [xi, wi, bi2, oi, C, H, W, O, KH, KW, HO, WO, stride, pad] {
      const double* g = oi->grad.data();
      if (bi2->requires_grad) {
        auto& gb = detail::grad_of(bi2);
        for (int o2 = 0; o2 < O; ++o2) {
          const double* go = g + static_cast<std::size_t>(o2) * HO * WO;
          double s = 0.0;
          for (int i = 0; i < HO * WO; ++i) s += go[i];
          gb[static_cast<std::size_t>(o2)] += s;
        }
      }
      const bool need_x = xi->requires_grad;
      const bool need_w = wi->requires_grad;
      if (!need_x && !need_w) return;
      if (need_x) xi->ensure_grad();
      if (need_w) wi->ensure_grad();
      double* gx = need_x ? xi->grad.data() : nullptr;
      double* gw = need_w ? wi->grad.data() : nullptr;
      const double* px = xi->data.data();
      const double* pw = wi->data.data();
      for (int o2 = 0; o2 < O; ++o2) {
        const double* go = g + static_cast<std::size_t>(o2) * HO * WO;
        for (int c = 0; c < C; ++c) {
          const double* pxc = px + static_cast<std::size_t>(c) * H * W;
          double* gxc = need_x ? gx + static_cast<std::size_t>(c) * H * W : nullptr;
          const std::size_t wbase = (static_cast<std::size_t>(o2) * C + c) * KH * KW;
          for (int kh = 0; kh < KH; ++kh)
            for (int kw = 0; kw < KW; ++kw) {
              const double wv = pw[wbase + kh * KW + kw];
              double wg = 0.0;
              for (int oh = 0; oh < HO; ++oh) {
                const int ih = oh * stride + kh - pad;
                if (ih < 0 || ih >= H) continue;
                int lo = 0;
                while (lo < WO && lo * stride + kw - pad < 0) ++lo;
                int hi = WO;
                while (hi > lo && (hi - 1) * stride + kw - pad >= W) --hi;
                const double* grow = go + oh * WO;
                const int xoff = ih * W + kw - pad;
                if (need_w) {
                  const double* xr = pxc + xoff;
                  for (int ow = lo; ow < hi; ++ow) wg += grow[ow] * xr[ow * stride];
                }
                if (need_x) {
                  double* gxr = gxc + xoff;
                  for (int ow = lo; ow < hi; ++ow) gxr[ow * stride] += grow[ow] * wv;
                }
              }
              if (need_w) gw[wbase + kh * KW + kw] += wg;
            }
        }
      }
    });
  }
  return o;
}

// spatial mean per channel: [C,H,W] -> [C]
inline Tensor global_avg_pool(const Tensor& x) {
  check(x.ndim() == 3, "global_avg_pool: expects [C,H,W]");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  check(H > 0 && W > 0, "global_avg_pool: empty spatial extent");
  const bool traced = detail::tracing({&x});
  const double inv = 1.0 / (static_cast<double>(H) * W);
  std::vector<double> out(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) {
    const double* p = x.values().data() + static_cast<std::size_t>(c) * H * W;
    double s = 0.0;
    for (int i = 0; i < H * W; ++i) s += p[i];
    out[static_cast<std::size_t>(c)] = s * inv;
  }
  Tensor o = detail::make_output(Shape{C}, std::move(out), traced);
  if (traced) {
    auto xi = x.impl(), oi = o.impl();
    Tape::current()->record(o, [xi, oi, C, H, W, inv] {
      auto& gx = detail::grad_of(xi);
      for (int c = 0; c < C; ++c) {
        const double gv = oi->grad[static_cast<std::size_t>(c)] * inv;
        double* p = gx.data() + static_cast<std::size_t>(c) * H * W;
        for (int i = 0; i < H * W; ++i) p[i] += gv;
      }
    });
  }
  return o;
}

// divide by Euclidean norm along the last axis; 1-D whole vector, 2-D per row.
// Norm is guarded by max(norm, 1e-12).
inline constexpr double kL2NormalizeEps = 1e-12;

inline Tensor l2_normalize(const Tensor& x) {
  check(x.ndim() == 1 || x.ndim() == 2, "l2_normalize: expects 1-D or 2-D");
  const int rows = x.ndim() == 2 ? x.dim(0) : 1;
  const int cols = x.ndim() == 2 ? x.dim(1) : x.dim(0);
  check(cols > 0, "l2_normalize: empty axis");
  const bool traced = detail::tracing({&x});
  std::vector<double> out(x.size());
  std::vector<double> norms(static_cast<std::size_t>(rows));
  for (int r = 0; r < rows; ++r) {
    const double* p = x.values().data() + static_cast<std::size_t>(r) * cols;
    double s = 0.0;
    for (int c = 0; c < cols; ++c) s += p[c] * p[c];
    const double n = std::max(std::sqrt(s), kL2NormalizeEps);
    norms[static_cast<std::size_t>(r)] = n;
    double* po = out.data() + static_cast<std::size_t>(r) * cols;
    for (int c = 0; c < cols; ++c) po[c] = p[c] / n;
  }
  Tensor o = detail::make_output(x.shape(), std::move(out), traced);
  if (traced) {
    auto xi = x.impl(), oi = o.impl();
    Tape::current()->record(o, [xi, oi, rows, cols, norms] {
      auto& gx = detail::grad_of(xi);
      for (int r = 0; r < rows; ++r) {
        const double n = norms[static_cast<std::size_t>(r)];
        const double* y = oi->data.data() + static_cast<std::size_t>(r) * cols;
        const double* gy = oi->grad.data() + static_cast<std::size_t>(r) * cols;
        double* gxr = gx.data() + static_cast<std::size_t>(r) * cols;
        double dotv = 0.0;
        for (int c = 0; c < cols; ++c) dotv += y[c] * gy[c];
        for (int c = 0; c < cols; ++c) gxr[c] += (gy[c] - y[c] * dotv) / n;
      }
    });
  }
  return o;
}

// row-wise max of a 2-D tensor; gradient routes to the first argmax
inline Tensor row_max(const Tensor& x) {
  check(x.ndim() == 2, "row_max: expects 2-D");
  const int rows = x.dim(0), cols = x.dim(1);
  check(cols > 0, "row_max: empty rows");
  const bool traced = detail::tracing({&x});
  std::vector<double> out(static_cast<std::size_t>(rows));
  std::vector<int> arg(static_cast<std::size_t>(rows));
  for (int r = 0; r < rows; ++r) {
    const double* p = x.values().data() + static_cast<std::size_t>(r) * cols;
    int best = 0;
    for (int c = 1; c < cols; ++c)
      if (p[c] > p[best]) best = c;
    out[static_cast<std::size_t>(r)] = p[best];
    arg[static_cast<std::size_t>(r)] = best;
  }
  Tensor o = detail::make_output(Shape{rows}, std::move(out), traced);
  if (traced) {
    auto xi = x.impl(), oi = o.impl();
    Tape::current()->record(o, [xi, oi, rows, cols, arg] {
      auto& gx = detail::grad_of(xi);
      for (int r = 0; r < rows; ++r)
        gx[static_cast<std::size_t>(r) * cols + static_cast<std::size_t>(arg[static_cast<std::size_t>(r)])] +=
            oi->grad[static_cast<std::size_t>(r)];
    });
  }
  return o;
}

// ---------------------------------------------------------------------------
// losses

namespace detail {

// stabilized log-softmax denominator terms; returns max and log(sum exp(z - max))
inline std::pair<double, double> log_sum_exp(const double* z, int k) {
  double m = z[0];
  for (int i = 1; i < k; ++i) m = std::max(m, z[i]);
  double s = 0.0;
  for (int i = 0; i < k; ++i) s += std::exp(z[i] - m);
  return {m, std::log(s)};
}

}  // namespace detail

// -log softmax(logits)[target], max-subtraction stabilized
inline Tensor softmax_cross_entropy(const Tensor& logits, int target) {
  check(logits.ndim() == 1, "softmax_cross_entropy: expects 1-D logits");
  const int k = logits.dim(0);
  check(target >= 0 && target < k,
        "softmax_cross_entropy: target " + std::to_string(target) + " out of range [0," +
            std::to_string(k) + ")");
  const bool traced = detail::tracing({&logits});
  auto [m, lse] = detail::log_sum_exp(logits.values().data(), k);
  const double loss = m + lse - logits.at(static_cast<std::size_t>(target));
  Tensor o = detail::make_output(Shape{}, {loss}, traced);
  if (traced) {
    auto li = logits.impl(), oi = o.impl();
    Tape::current()->record(o, [li, oi, k, target, m, lse] {
      auto& gl = detail::grad_of(li);
      const double g = oi->grad[0];
      for (int i = 0; i < k; ++i) {
        const double p = std::exp(li->data[static_cast<std::size_t>(i)] - m - lse);
        gl[static_cast<std::size_t>(i)] += g * (p - (i == target ? 1.0 : 0.0));
      }
    });
  }
  return o;
}

// mean over rows of -log(sum_{c in positives(r)} softmax(logits[r])[c]).
// With singleton positive sets this is plain batched cross-entropy.
inline Tensor softmax_group_nll(const Tensor& logits, const std::vector<std::vector<int>>& positives) {
  check(logits.ndim() == 2, "softmax_group_nll: expects 2-D logits");
  const int n = logits.dim(0), k = logits.dim(1);
  check(static_cast<int>(positives.size()) == n, "softmax_group_nll: one positive set per row");
  const bool traced = detail::tracing({&logits});
  double total = 0.0;
  std::vector<double> row_m(static_cast<std::size_t>(n)), row_lse(static_cast<std::size_t>(n)),
      row_logpos(static_cast<std::size_t>(n));
  for (int r = 0; r < n; ++r) {
    check(!positives[static_cast<std::size_t>(r)].empty(), "softmax_group_nll: empty positive set");
    const double* z = logits.values().data() + static_cast<std::size_t>(r) * k;
    auto [m, lse] = detail::log_sum_exp(z, k);
    double ps = 0.0;
    for (int c : positives[static_cast<std::size_t>(r)]) {
      check(c >= 0 && c < k, "softmax_group_nll: positive column out of range");
      ps += std::exp(z[c] - m);
    }
    const double logpos = std::log(ps);
    row_m[static_cast<std::size_t>(r)] = m;
    row_lse[static_cast<std::size_t>(r)] = lse;
    row_logpos[static_cast<std::size_t>(r)] = logpos;
    total += lse - logpos;
  }
  const double inv = 1.0 / static_cast<double>(n);
  Tensor o = detail::make_output(Shape{}, {total * inv}, traced);
  if (traced) {
    auto li = logits.impl(), oi = o.impl();
    Tape::current()->record(o, [li, oi, n, k, positives, row_m, row_lse, row_logpos, inv] {
      auto& gl = detail::grad_of(li);
      const double g = oi->grad[0] * inv;
      for (int r = 0; r < n; ++r) {
        const double* z = li->data.data() + static_cast<std::size_t>(r) * k;
        double* gr = gl.data() + static_cast<std::size_t>(r) * k;
        const double m = row_m[static_cast<std::size_t>(r)];
        const double lse = row_lse[static_cast<std::size_t>(r)];
        const double logpos = row_logpos[static_cast<std::size_t>(r)];
        for (int c = 0; c < k; ++c) gr[c] += g * std::exp(z[c] - m - lse);
        for (int c : positives[static_cast<std::size_t>(r)])
          gr[c] -= g * std::exp(z[c] - m - logpos);
      }
    });
  }
  return o;
}

// batched cross-entropy: mean over rows of -log softmax(row)[target]
inline Tensor softmax_cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets) {
  std::vector<std::vector<int>> pos(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) pos[i] = {targets[i]};
  return softmax_group_nll(logits, pos);
}

// weighted binary cross-entropy with logits; loss = sum_i w_i * bce_i / max(1, sum w)
inline Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& targets,
                              const std::vector<double>& weights) {
  check(logits.size() == targets.size() && logits.size() == weights.size(),
        "bce_with_logits: extent mismatch");
  const bool traced = detail::tracing({&logits});
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  const double norm = 1.0 / std::max(1.0, wsum);
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits.at(i), t = targets[i];
    // max(z,0) - z*t + log(1 + exp(-|z|))
    total += weights[i] * (std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z))));
  }
  Tensor o = detail::make_output(Shape{}, {total * norm}, traced);
  if (traced) {
    auto li = logits.impl(), oi = o.impl();
    Tape::current()->record(o, [li, oi, targets, weights, norm] {
      auto& gl = detail::grad_of(li);
      const double g = oi->grad[0] * norm;
      for (std::size_t i = 0; i < gl.size(); ++i) {
        const double z = li->data[i];
        const double s = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
        gl[i] += g * weights[i] * (s - targets[i]);
      }
    });
  }
  return o;
}

// row-weighted smooth-L1: sum_i w_i * sum_c sl1(pred - target) / max(1, sum w)
inline Tensor smooth_l1_loss(const Tensor& pred, const std::vector<double>& target,
                             const std::vector<double>& row_weights) {
  check(pred.ndim() == 2, "smooth_l1_loss: expects 2-D pred");
  const int n = pred.dim(0), c = pred.dim(1);
  check(static_cast<int>(target.size()) == n * c, "smooth_l1_loss: target extent mismatch");
  check(static_cast<int>(row_weights.size()) == n, "smooth_l1_loss: weight extent mismatch");
  const bool traced = detail::tracing({&pred});
  double wsum = 0.0;
  for (double w : row_weights) wsum += w;
  const double norm = 1.0 / std::max(1.0, wsum);
  double total = 0.0;
  for (int r = 0; r < n; ++r) {
    if (row_weights[static_cast<std::size_t>(r)] == 0.0) continue;
    for (int j = 0; j < c; ++j) {
      const double d = pred.at(static_cast<std::size_t>(r * c + j)) - target[static_cast<std::size_t>(r * c + j)];
      const double a = std::abs(d);
      total += row_weights[static_cast<std::size_t>(r)] * (a < 1.0 ? 0.5 * d * d : a - 0.5);
    }
  }
  Tensor o = detail::make_output(Shape{}, {total * norm}, traced);
  if (traced) {
    auto pi = pred.impl(), oi = o.impl();
    Tape::current()->record(o, [pi, oi, target, row_weights, n, c, norm] {
      auto& gp = detail::grad_of(pi);
      const double g = oi->grad[0] * norm;
      for (int r = 0; r < n; ++r) {
        const double w = row_weights[static_cast<std::size_t>(r)];
        if (w == 0.0) continue;
        for (int j = 0; j < c; ++j) {
          const std::size_t idx = static_cast<std::size_t>(r * c + j);
          const double d = pi->data[idx] - target[idx];
          gp[idx] += g * w * (std::abs(d) < 1.0 ? d : (d > 0.0 ? 1.0 : -1.0));
        }
      }
    });
  }
  return o;
}

// ---------------------------------------------------------------------------
// optimizer

// Momentum SGD over a fixed parameter list.
// Update rule: v <- mu*v + g; p <- p - lr*(v + wd*p).
class SgdOptimizer {
 public:
  explicit SgdOptimizer(std::vector<Tensor> params) : params_(std::move(params)) {
    velocity_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i)
      velocity_[i].assign(params_[i].size(), 0.0);
  }

  void step(double lr, double momentum, double weight_decay) {
    check(lr >= 0.0, "sgd: negative learning rate");
    check(momentum >= 0.0 && momentum < 1.0, "sgd: momentum must be in [0,1)");
    check(weight_decay >= 0.0, "sgd: negative weight decay");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      check(p.has_grad(), "sgd: parameter " + std::to_string(i) + " has no gradient");
      const auto& g = p.grad();
      auto& v = velocity_[i];
      auto& d = p.values();
      for (std::size_t j = 0; j < d.size(); ++j) {
        v[j] = momentum * v[j] + g[j];
        d[j] -= lr * (v[j] + weight_decay * d[j]);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
};

}  // namespace cosdet
