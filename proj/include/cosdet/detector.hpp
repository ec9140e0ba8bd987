#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <vector>

#include "cosdet/boxes.hpp"
#include "cosdet/comparator.hpp"
#include "cosdet/embedder.hpp"
#include "cosdet/model.hpp"
#include "cosdet/shapes.hpp"
#include "cosdet/tensor.hpp"

namespace cosdet {

enum class RpnVariant { kStandard, kCosLinear };
enum class Aggregation { kFeatureAverage, kSumScores };

inline std::string to_string(RpnVariant v) {
  return v == RpnVariant::kStandard ? "standard" : "cos_linear";
}
inline std::string to_string(Aggregation a) {
  return a == Aggregation::kFeatureAverage ? "feature_average" : "sum_scores";
}

struct Detection {
  Box box;
  int class_id = -1;
  double score = 0.0;
};

inline constexpr double kRpnNmsIou = 0.7;
inline constexpr double kDetNmsIou = 0.5;
inline constexpr double kScoreThreshold = 0.05;
inline constexpr int kMaxDetections = 20;
inline constexpr int kTrainProposals = 64;
inline constexpr int kEvalProposals = 32;

// anchors in (size, row, col) order matching the flattened RPN heads
inline std::vector<Box> make_anchors(int grid_h, int grid_w) {
  std::vector<Box> anchors;
  anchors.reserve(static_cast<std::size_t>(kNumAnchorSizes) * grid_h * grid_w);
  for (int a = 0; a < kNumAnchorSizes; ++a) {
    const double half = kAnchorSizes[a] / 2.0;
    for (int i = 0; i < grid_h; ++i)
      for (int j = 0; j < grid_w; ++j) {
        const double cx = (j + 0.5) * kStride;
        const double cy = (i + 0.5) * kStride;
        anchors.push_back(Box{cx - half, cy - half, cx + half, cy + half});
      }
  }
  return anchors;
}

// ---------------------------------------------------------------------------
// layout ops for the RPN heads

// [4K,H,W] -> [K*H*W, 4] with row order (k,i,j)
inline Tensor split_anchor_deltas(const Tensor& t, int num_sizes) {
  check(t.ndim() == 3 && t.dim(0) == 4 * num_sizes, "split_anchor_deltas: bad input");
  const int H = t.dim(1), W = t.dim(2);
  const int rows = num_sizes * H * W;
  const bool traced = detail::tracing({&t});
  std::vector<double> out(static_cast<std::size_t>(rows) * 4);
  for (int k = 0; k < num_sizes; ++k)
    for (int c = 0; c < 4; ++c) {
      const double* src = t.values().data() + (static_cast<std::size_t>(k) * 4 + c) * H * W;
      for (int p = 0; p < H * W; ++p)
        out[static_cast<std::size_t>(k * H * W + p) * 4 + c] = src[p];
    }
  Tensor o = detail::make_output(Shape{rows, 4}, std::move(out), traced);
  if (traced) {
    auto ti = t.impl(), oi = o.impl();
    Tape::current()->record(o, [ti, oi, num_sizes, H, W] {
      auto& gt = detail::grad_of(ti);
      for (int k = 0; k < num_sizes; ++k)
        for (int c = 0; c < 4; ++c) {
          double* dst = gt.data() + (static_cast<std::size_t>(k) * 4 + c) * H * W;
          for (int p = 0; p < H * W; ++p)
            dst[p] += oi->grad[static_cast<std::size_t>(k * H * W + p) * 4 + c];
        }
    });
  }
  return o;
}

// [C,H,W] -> [H*W, C] position-major feature rows
inline Tensor hwc_rows(const Tensor& t) {
  check(t.ndim() == 3, "hwc_rows: expects [C,H,W]");
  const int C = t.dim(0), H = t.dim(1), W = t.dim(2);
  const bool traced = detail::tracing({&t});
  std::vector<double> out(static_cast<std::size_t>(H) * W * C);
  for (int c = 0; c < C; ++c)
    for (int p = 0; p < H * W; ++p)
      out[static_cast<std::size_t>(p) * C + c] = t.values()[static_cast<std::size_t>(c) * H * W + p];
  Tensor o = detail::make_output(Shape{H * W, C}, std::move(out), traced);
  if (traced) {
    auto ti = t.impl(), oi = o.impl();
    Tape::current()->record(o, [ti, oi, C, H, W] {
      auto& gt = detail::grad_of(ti);
      for (int c = 0; c < C; ++c)
        for (int p = 0; p < H * W; ++p)
          gt[static_cast<std::size_t>(c) * H * W + p] += oi->grad[static_cast<std::size_t>(p) * C + c];
    });
  }
  return o;
}

// [P] -> [K*P], the per-cell objectness replicated across anchor sizes
inline Tensor tile_rows(const Tensor& t, int k) {
  check(t.ndim() == 1, "tile_rows: expects 1-D");
  const int p = t.dim(0);
  const bool traced = detail::tracing({&t});
  std::vector<double> out(static_cast<std::size_t>(k) * p);
  for (int a = 0; a < k; ++a)
    std::copy(t.values().begin(), t.values().end(), out.begin() + static_cast<std::ptrdiff_t>(a) * p);
  Tensor o = detail::make_output(Shape{k * p}, std::move(out), traced);
  if (traced) {
    auto ti = t.impl(), oi = o.impl();
    Tape::current()->record(o, [ti, oi, k, p] {
      auto& gt = detail::grad_of(ti);
      for (int a = 0; a < k; ++a)
        for (int i = 0; i < p; ++i) gt[static_cast<std::size_t>(i)] += oi->grad[static_cast<std::size_t>(a) * p + i];
    });
  }
  return o;
}

// ---------------------------------------------------------------------------
// RPN

struct RpnOutput {
  Tensor objectness;  // [A] logits, anchor order (k,i,j)
  Tensor deltas;      // [A,4]
};

// standard objectness head, or the cos variant: per-cell maximum scaled
// cosine between a linearly embedded cell feature and the exemplar
// embeddings, replicated across the anchor sizes at that cell
inline RpnOutput rpn_forward(const Tensor& feature, const RpnParams& rpn, RpnVariant variant,
                             const Tensor* exemplar_matrix) {
  Tensor trunk = relu(conv2d(feature, rpn.conv.w, rpn.conv.b, 1, 1));
  const int H = trunk.dim(1), W = trunk.dim(2);
  Tensor deltas = split_anchor_deltas(conv2d(trunk, rpn.delta.w, rpn.delta.b, 1, 0), kNumAnchorSizes);
  if (variant == RpnVariant::kStandard) {
    Tensor obj = reshape(conv2d(trunk, rpn.objectness.w, rpn.objectness.b, 1, 0),
                         Shape{kNumAnchorSizes * H * W});
    return RpnOutput{obj, deltas};
  }
  check(exemplar_matrix != nullptr && exemplar_matrix->dim(0) >= 1,
        "rpn_forward: cos variant requires a non-empty exemplar set");
  Tensor cells = linear(hwc_rows(trunk), rpn.cos_w, rpn.cos_b);  // [H*W, D]
  Tensor cos = matmul_nt(l2_normalize(cells), l2_normalize(*exemplar_matrix));
  Tensor scaled = scale_shift(cos, rpn.cos_gamma, rpn.cos_beta);
  Tensor obj = tile_rows(row_max(scaled), kNumAnchorSizes);
  return RpnOutput{obj, deltas};
}

// per-position objectness of the cos variant alone: [H*W] values
inline std::vector<double> cos_rpn_objectness(const Tensor& trunk_cells, const RpnParams& rpn,
                                              const Tensor& exemplar_matrix) {
  check(exemplar_matrix.dim(0) >= 1, "cos_rpn_objectness: empty exemplar set");
  Tensor cells = linear(trunk_cells, rpn.cos_w, rpn.cos_b);
  Tensor cos = matmul_nt(l2_normalize(cells), l2_normalize(exemplar_matrix));
  Tensor scaled = scale_shift(cos, rpn.cos_gamma, rpn.cos_beta);
  Tensor m = row_max(scaled);
  return m.values();
}

struct Proposals {
  std::vector<Box> boxes;            // ranked, NMS-filtered, clipped
  std::vector<double> scores;        // sigmoid objectness
  std::vector<std::size_t> anchors;  // source anchor index per proposal
};

// decode all anchors, clip, drop degenerates, NMS at IoU 0.7, keep top_k.
// All-equal scores fall back to anchor-index order via the stable ranking.
inline Proposals rpn_propose(const RpnOutput& rpn_out, const std::vector<Box>& anchors,
                             int top_k, double image_size = kImageSize) {
  const auto& logits = rpn_out.objectness.values();
  const auto& deltas = rpn_out.deltas.values();
  check(logits.size() == anchors.size(), "rpn_propose: anchor/logit extent mismatch");

  std::vector<Box> boxes;
  std::vector<double> scores;
  std::vector<std::size_t> keep_anchor;
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    const BoxDelta d{deltas[a * 4 + 0], deltas[a * 4 + 1], deltas[a * 4 + 2], deltas[a * 4 + 3]};
    Box b = decode_delta(d, anchors[a]).clipped(image_size, image_size);
    if (b.width() < 1.0 || b.height() < 1.0) continue;
    const double z = logits[a];
    boxes.push_back(b);
    scores.push_back(z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)));
    keep_anchor.push_back(a);
  }
  const auto kept = nms(boxes, scores, kRpnNmsIou);
  Proposals out;
  for (std::size_t i : kept) {
    if (static_cast<int>(out.boxes.size()) == top_k) break;
    out.boxes.push_back(boxes[i]);
    out.scores.push_back(scores[i]);
    out.anchors.push_back(keep_anchor[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// detection assembly

struct ExemplarSet {
  int class_id = -1;
  std::vector<Tensor> crops;  // n shots, [3,32,32]
};

namespace detail {

struct EmbeddedExemplars {
  std::vector<int> class_ids;   // way entries
  Tensor per_shot;              // [way*shot, D], class-major
  Tensor per_class_mean;        // [way, D]
  int way = 0;
  int shot = 0;
};

inline EmbeddedExemplars embed_exemplar_sets(const std::vector<ExemplarSet>& sets,
                                             const ModelParams& model) {
  check(!sets.empty(), "detect: need at least one exemplar class");
  EmbeddedExemplars out;
  out.way = static_cast<int>(sets.size());
  out.shot = static_cast<int>(sets[0].crops.size());
  check(out.shot >= 1, "detect: need at least one shot");
  std::vector<ExemplarEmbedding> all;
  std::vector<ExemplarEmbedding> means;
  for (const auto& set : sets) {
    check(static_cast<int>(set.crops.size()) == out.shot,
          "detect: ragged shot counts across classes");
    out.class_ids.push_back(set.class_id);
    std::vector<ExemplarEmbedding> shots;
    for (std::size_t k = 0; k < set.crops.size(); ++k) {
      shots.push_back(embed_exemplar(set.crops[k], set.class_id, model.backbone, model.embedder,
                                     static_cast<int>(k)));
      all.push_back(shots.back());
    }
    means.push_back(average_shots(shots));
  }
  out.per_shot = stack_embeddings(all);
  out.per_class_mean = stack_embeddings(means);
  return out;
}

}  // namespace detail

// full two-stage pipeline on one image. Scores come from the n-shot posterior
// (sum_scores) or the 1-shot posterior over averaged embeddings
// (feature_average); background-dominant RoIs are dropped, NMS applied.
inline std::vector<Detection> detect(const Tensor& image, const std::vector<ExemplarSet>& sets,
                                     const ModelParams& model, RpnVariant rpn_variant,
                                     Aggregation aggregation, Objective objective) {
  const auto embedded = detail::embed_exemplar_sets(sets, model);
  const int m = embedded.way, n = embedded.shot;

  Tensor feat = backbone_forward(image, model.backbone);
  const auto anchors = make_anchors(feat.dim(1), feat.dim(2));
  RpnOutput rpn_out = rpn_forward(feat, model.rpn, rpn_variant, &embedded.per_shot);
  Proposals props = rpn_propose(rpn_out, anchors, kEvalProposals);
  if (props.boxes.empty()) return {};

  Tensor pooled = roi_pool(feat, props.boxes);
  BoxHeadOutput head = box_head_forward(pooled, model.head);

  // one class-agnostic refined box per RoI
  const int p = static_cast<int>(props.boxes.size());
  std::vector<Box> refined(static_cast<std::size_t>(p));
  for (int r = 0; r < p; ++r) {
    const double* d = head.delta.values().data() + static_cast<std::size_t>(r) * 4;
    refined[static_cast<std::size_t>(r)] =
        decode_delta(BoxDelta{d[0], d[1], d[2], d[3]}, props.boxes[static_cast<std::size_t>(r)])
            .clipped(kImageSize, kImageSize);
  }

  const Tensor& w = aggregation == Aggregation::kSumScores ? embedded.per_shot
                                                           : embedded.per_class_mean;
  Tensor logits = comparison_logits(head.embedding, w, model.comparator);  // [P, m*n or m]
  Tensor bg = background_logits(head.embedding, model.comparator);         // [P, 1]

  const int shot_cols = aggregation == Aggregation::kSumScores ? n : 1;
  std::vector<Detection> dets;
  for (int r = 0; r < p; ++r) {
    if (!refined[static_cast<std::size_t>(r)].valid()) continue;
    ClassLogits cl;
    cl.way = m;
    cl.shot = shot_cols;
    cl.exemplar.assign(logits.values().begin() + static_cast<std::ptrdiff_t>(r) * m * shot_cols,
                       logits.values().begin() + static_cast<std::ptrdiff_t>(r + 1) * m * shot_cols);
    cl.background = bg.at(static_cast<std::size_t>(r));

    std::vector<double> class_scores(static_cast<std::size_t>(m));
    if (objective == Objective::kSoftmax) {
      const ClassPosterior post = posterior_nshot(cl);
      // drop RoIs where background beats every class
      double best = 0.0;
      for (int i = 1; i <= m; ++i) best = std::max(best, post[static_cast<std::size_t>(i)]);
      if (post[0] >= best) continue;
      for (int i = 0; i < m; ++i) class_scores[static_cast<std::size_t>(i)] = post[static_cast<std::size_t>(i) + 1];
    } else {
      const auto sig = sigmoid_objective_scores(cl);
      for (int i = 0; i < m; ++i) {
        double s = 0.0;
        for (int k = 0; k < shot_cols; ++k) s += sig[static_cast<std::size_t>(i * shot_cols + k)];
        class_scores[static_cast<std::size_t>(i)] = s / shot_cols;
      }
    }
    for (int i = 0; i < m; ++i) {
      const double s = class_scores[static_cast<std::size_t>(i)];
      if (s < kScoreThreshold) continue;
      dets.push_back(Detection{refined[static_cast<std::size_t>(r)], embedded.class_ids[static_cast<std::size_t>(i)], s});
    }
  }

  // per-class NMS, then global cap by score
  std::vector<Detection> kept;
  for (int i = 0; i < m; ++i) {
    const int cid = embedded.class_ids[static_cast<std::size_t>(i)];
    std::vector<Box> boxes;
    std::vector<double> scores;
    std::vector<std::size_t> src;
    for (std::size_t d = 0; d < dets.size(); ++d)
      if (dets[d].class_id == cid) {
        boxes.push_back(dets[d].box);
        scores.push_back(dets[d].score);
        src.push_back(d);
      }
    for (std::size_t k : nms(boxes, scores, kDetNmsIou)) kept.push_back(dets[src[k]]);
  }
  std::stable_sort(kept.begin(), kept.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  if (static_cast<int>(kept.size()) > kMaxDetections) kept.resize(kMaxDetections);
  return kept;
}

}  // namespace cosdet
