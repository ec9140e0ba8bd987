#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cosdet/tensor.hpp"

namespace cosdet {

enum class ComparatorMode { kCosine, kCosineNoAffine, kCosineScaleOnly, kL2 };
enum class Objective { kSoftmax, kSigmoid };

inline std::string to_string(ComparatorMode m) {
  switch (m) {
    case ComparatorMode::kCosine: return "cosine";
    case ComparatorMode::kCosineNoAffine: return "cosine_no_affine";
    case ComparatorMode::kCosineScaleOnly: return "cosine_scale_only";
    case ComparatorMode::kL2: return "l2";
  }
  return "?";
}

inline std::string to_string(Objective o) {
  return o == Objective::kSoftmax ? "softmax" : "sigmoid";
}

// Scale/bias of the comparison layer plus the learnable background scorer.
// gamma starts at 1 and beta at 0; which of them trains depends on mode.
struct ComparatorParams {
  Tensor gamma = Tensor::scalar(1.0, true);
  Tensor beta = Tensor::scalar(0.0, true);
  Tensor bg_weights;  // [D]
  Tensor bg_bias = Tensor::scalar(0.0, true);
  ComparatorMode mode = ComparatorMode::kCosine;
  Objective objective = Objective::kSoftmax;
};

// per-exemplar comparison logits of one RoI: way x shot entries plus the
// background logit (absent from the softmax only in sigmoid-objective runs)
struct ClassLogits {
  int way = 0;
  int shot = 0;
  std::vector<double> exemplar;  // row-major [way][shot]
  double background = 0.0;

  double at(int cls, int k) const { return exemplar[static_cast<std::size_t>(cls * shot + k)]; }
};

// posterior over {background, class 1..m}; index 0 is background
using ClassPosterior = std::vector<double>;

// ---------------------------------------------------------------------------
// scalar surface (inference and verification paths)

inline double cosine_similarity(const std::vector<double>& w, const std::vector<double>& x) {
  check(w.size() == x.size(), "cosine_similarity: dimension mismatch");
  check(!w.empty(), "cosine_similarity: empty vectors");
  double nw = 0.0, nx = 0.0, d = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    nw += w[i] * w[i];
    nx += x[i] * x[i];
    d += w[i] * x[i];
  }
  return d / (std::max(std::sqrt(nw), kL2NormalizeEps) * std::max(std::sqrt(nx), kL2NormalizeEps));
}

inline double scaled_cosine(const std::vector<double>& w, const std::vector<double>& x,
                            const ComparatorParams& params) {
  const double c = cosine_similarity(w, x);
  switch (params.mode) {
    case ComparatorMode::kCosineNoAffine: return c;
    case ComparatorMode::kCosineScaleOnly: return params.gamma.item() * c;
    default: return params.gamma.item() * c + params.beta.item();
  }
}

inline double background_logit(const std::vector<double>& x, const ComparatorParams& params) {
  check(x.size() == params.bg_weights.size(), "background_logit: dimension mismatch");
  double s = params.bg_bias.item();
  for (std::size_t i = 0; i < x.size(); ++i) s += params.bg_weights.at(i) * x[i];
  return s;
}

// negated squared Euclidean distance as a logit
inline double l2_logits(const std::vector<double>& w, const std::vector<double>& x) {
  check(w.size() == x.size(), "l2_logits: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double d = w[i] - x[i];
    s += d * d;
  }
  return -s;
}

// p(y=i|x) = sum_k exp(c'_ik) / (exp(bg) + sum_j sum_k exp(c'_jk)),
// max-subtraction stabilized; index 0 of the result is background
inline ClassPosterior posterior_nshot(const ClassLogits& logits) {
  check(logits.way >= 1, "posterior: need at least one class");
  check(logits.shot >= 1, "posterior: need at least one shot");
  check(static_cast<int>(logits.exemplar.size()) == logits.way * logits.shot,
        "posterior: ragged logits (way*shot entries required)");
  double m = logits.background;
  for (double v : logits.exemplar) m = std::max(m, v);
  const double ebg = std::exp(logits.background - m);
  double denom = ebg;
  std::vector<double> class_mass(static_cast<std::size_t>(logits.way), 0.0);
  for (int i = 0; i < logits.way; ++i) {
    for (int k = 0; k < logits.shot; ++k) {
      const double e = std::exp(logits.at(i, k) - m);
      class_mass[static_cast<std::size_t>(i)] += e;
      denom += e;
    }
  }
  ClassPosterior p(static_cast<std::size_t>(logits.way) + 1);
  p[0] = ebg / denom;
  for (int i = 0; i < logits.way; ++i) p[static_cast<std::size_t>(i) + 1] = class_mass[static_cast<std::size_t>(i)] / denom;
  return p;
}

inline ClassPosterior posterior_1shot(const ClassLogits& logits) {
  check(logits.shot == 1, "posterior_1shot: expects one shot per class");
  return posterior_nshot(logits);
}

// element-wise sigmoid of the exemplar logits; background plays no part
inline std::vector<double> sigmoid_objective_scores(const ClassLogits& logits) {
  std::vector<double> s(logits.exemplar.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double z = logits.exemplar[i];
    s[i] = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  }
  return s;
}

// ---------------------------------------------------------------------------
// tensor ops (training path)

// a [N,K] x b [M,K]^T -> [N,M]
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  check(a.ndim() == 2 && b.ndim() == 2, "matmul_nt: expects 2-D inputs");
  check(a.dim(1) == b.dim(1), "matmul_nt: inner extents differ");
  const int n = a.dim(0), k = a.dim(1), m = b.dim(0);
  const bool traced = detail::tracing({&a, &b});
  std::vector<double> out(static_cast<std::size_t>(n) * m);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) {
      const double* ar = a.values().data() + static_cast<std::size_t>(i) * k;
      const double* br = b.values().data() + static_cast<std::size_t>(j) * k;
      double s = 0.0;
      for (int kk = 0; kk < k; ++kk) s += ar[kk] * br[kk];
      out[static_cast<std::size_t>(i * m + j)] = s;
    }
  Tensor o = detail::make_output(Shape{n, m}, std::move(out), traced);
  if (traced) {
    auto ai = a.impl(), bi = b.impl(), oi = o.impl();
    Tape::current()->record(o, [ai, bi, oi, n, k, m] {
      const double* g = oi->grad.data();
      if (ai->requires_grad) {
        auto& ga = detail::grad_of(ai);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < m; ++j) {
            const double gv = g[i * m + j];
            const double* br = bi->data.data() + static_cast<std::size_t>(j) * k;
            double* gar = ga.data() + static_cast<std::size_t>(i) * k;
            for (int kk = 0; kk < k; ++kk) gar[kk] += gv * br[kk];
          }
      }
      if (bi->requires_grad) {
        auto& gb = detail::grad_of(bi);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < m; ++j) {
            const double gv = g[i * m + j];
            const double* ar = ai->data.data() + static_cast<std::size_t>(i) * k;
            double* gbr = gb.data() + static_cast<std::size_t>(j) * k;
            for (int kk = 0; kk < k; ++kk) gbr[kk] += gv * ar[kk];
          }
      }
    });
  }
  return o;
}

// gamma * t + beta with scalar tensors so the affine parameters train
inline Tensor scale_shift(const Tensor& t, const Tensor& gamma, const Tensor& beta) {
  check(gamma.size() == 1 && beta.size() == 1, "scale_shift: gamma/beta must be scalars");
  const bool traced = detail::tracing({&t, &gamma, &beta});
  const double gv = gamma.item(), bv = beta.item();
  std::vector<double> out(t.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gv * t.at(i) + bv;
  Tensor o = detail::make_output(t.shape(), std::move(out), traced);
  if (traced) {
    auto ti = t.impl(), gi = gamma.impl(), bi = beta.impl(), oi = o.impl();
    Tape::current()->record(o, [ti, gi, bi, oi, gv] {
      const auto& g = oi->grad;
      if (ti->requires_grad) {
        auto& gt = detail::grad_of(ti);
        for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i] * gv;
      }
      if (gi->requires_grad) {
        auto& gg = detail::grad_of(gi);
        for (std::size_t i = 0; i < g.size(); ++i) gg[0] += g[i] * ti->data[i];
      }
      if (bi->requires_grad) {
        auto& gb = detail::grad_of(bi);
        for (std::size_t i = 0; i < g.size(); ++i) gb[0] += g[i];
      }
    });
  }
  return o;
}

// gamma * t, bias held out of the graph entirely
inline Tensor scale_only(const Tensor& t, const Tensor& gamma) {
  check(gamma.size() == 1, "scale_only: gamma must be scalar");
  const bool traced = detail::tracing({&t, &gamma});
  const double gv = gamma.item();
  std::vector<double> out(t.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gv * t.at(i);
  Tensor o = detail::make_output(t.shape(), std::move(out), traced);
  if (traced) {
    auto ti = t.impl(), gi = gamma.impl(), oi = o.impl();
    Tape::current()->record(o, [ti, gi, oi, gv] {
      const auto& g = oi->grad;
      if (ti->requires_grad) {
        auto& gt = detail::grad_of(ti);
        for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i] * gv;
      }
      if (gi->requires_grad) {
        auto& gg = detail::grad_of(gi);
        for (std::size_t i = 0; i < g.size(); ++i) gg[0] += g[i] * ti->data[i];
      }
    });
  }
  return o;
}

// -||x_n - w_m||^2 for all pairs: x [N,D], w [M,D] -> [N,M]
inline Tensor l2_pair_logits(const Tensor& x, const Tensor& w) {
  check(x.ndim() == 2 && w.ndim() == 2 && x.dim(1) == w.dim(1), "l2_pair_logits: bad shapes");
  const int n = x.dim(0), d = x.dim(1), m = w.dim(0);
  const bool traced = detail::tracing({&x, &w});
  std::vector<double> out(static_cast<std::size_t>(n) * m);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) {
      const double* xr = x.values().data() + static_cast<std::size_t>(i) * d;
      const double* wr = w.values().data() + static_cast<std::size_t>(j) * d;
      double s = 0.0;
      for (int k = 0; k < d; ++k) {
        const double diff = xr[k] - wr[k];
        s += diff * diff;
      }
      out[static_cast<std::size_t>(i * m + j)] = -s;
    }
  Tensor o = detail::make_output(Shape{n, m}, std::move(out), traced);
  if (traced) {
    auto xi = x.impl(), wi = w.impl(), oi = o.impl();
    Tape::current()->record(o, [xi, wi, oi, n, d, m] {
      const double* g = oi->grad.data();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
          const double gv = g[i * m + j];
          if (gv == 0.0) continue;
          const double* xr = xi->data.data() + static_cast<std::size_t>(i) * d;
          const double* wr = wi->data.data() + static_cast<std::size_t>(j) * d;
          if (xi->requires_grad) {
            auto& gx = detail::grad_of(xi);
            double* gxr = gx.data() + static_cast<std::size_t>(i) * d;
            for (int k = 0; k < d; ++k) gxr[k] += gv * (-2.0) * (xr[k] - wr[k]);
          }
          if (wi->requires_grad) {
            auto& gw = detail::grad_of(wi);
            double* gwr = gw.data() + static_cast<std::size_t>(j) * d;
            for (int k = 0; k < d; ++k) gwr[k] += gv * 2.0 * (xr[k] - wr[k]);
          }
        }
    });
  }
  return o;
}

// comparison logits for a batch of RoI embeddings against exemplar embeddings,
// per the configured comparison mode: x [N,D], w [M,D] -> [N,M]
inline Tensor comparison_logits(const Tensor& x, const Tensor& w, const ComparatorParams& params) {
  if (params.mode == ComparatorMode::kL2) return l2_pair_logits(x, w);
  Tensor cos = matmul_nt(l2_normalize(x), l2_normalize(w));
  switch (params.mode) {
    case ComparatorMode::kCosineNoAffine: return cos;
    case ComparatorMode::kCosineScaleOnly: return scale_only(cos, params.gamma);
    default: return scale_shift(cos, params.gamma, params.beta);
  }
}

// background logits for a batch of RoI embeddings: x [N,D] -> [N,1]
inline Tensor background_logits(const Tensor& x, const ComparatorParams& params) {
  Tensor w = reshape(params.bg_weights, Shape{1, params.bg_weights.dim(0)});
  Tensor b = reshape(params.bg_bias, Shape{1});
  return linear(x, w, b);
}

}  // namespace cosdet
