#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "cosdet/boxes.hpp"
#include "cosdet/comparator.hpp"
#include "cosdet/rng.hpp"
#include "cosdet/tensor.hpp"

namespace cosdet {

// fixed desk-scale geometry
inline constexpr int kImageSize = 64;      // query images are 64x64
inline constexpr int kCropSize = 32;       // exemplar crops are resized to 32x32
inline constexpr int kStride = 8;          // backbone output stride
inline constexpr int kFeatChannels = 32;   // C_f
inline constexpr int kEmbedDim = 16;       // D, half of C_f
inline constexpr int kRoiGrid = 4;         // RoI pooling output is 4x4
inline constexpr int kRoiFeat = kFeatChannels * kRoiGrid * kRoiGrid;
inline constexpr int kHeadHidden = 64;
inline constexpr int kNumAnchorSizes = 3;
inline constexpr double kAnchorSizes[kNumAnchorSizes] = {12.0, 24.0, 40.0};

struct ConvLayer {
  Tensor w;  // [O,C,kh,kw]
  Tensor b;  // [O]
  int stride = 1;
  int pad = 1;
};

// four 3x3 conv+relu stages: 3 -> 16 -> 24 -> 32 -> 32, strides 2,2,2,1
struct BackboneParams {
  std::vector<ConvLayer> convs;
};

// GAP projection into the comparison space: [D, C_f] weights, [D] bias
struct EmbedderParams {
  Tensor w;
  Tensor b;
};

struct RpnParams {
  ConvLayer conv;       // 3x3, C_f -> C_f
  ConvLayer objectness; // 1x1, C_f -> anchors
  ConvLayer delta;      // 1x1, C_f -> 4*anchors
  // cos-RPN variant: single linear embedder plus its own scale/bias
  Tensor cos_w;  // [D, C_f]
  Tensor cos_b;  // [D]
  Tensor cos_gamma = Tensor::scalar(1.0, true);
  Tensor cos_beta = Tensor::scalar(0.0, true);
};

struct HeadParams {
  Tensor fc1_w;    // [hidden, kRoiFeat]
  Tensor fc1_b;    // [hidden]
  Tensor embed_w;  // [D, hidden]
  Tensor embed_b;  // [D]
  Tensor delta_w;  // [4, hidden], class-agnostic
  Tensor delta_b;  // [4]
};

struct ModelParams {
  BackboneParams backbone;
  RpnParams rpn;
  HeadParams head;
  EmbedderParams embedder;
  ComparatorParams comparator;
};

namespace detail {

inline Tensor init_tensor(Shape shape, double stddev, Rng& rng, bool requires_grad = true) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  for (auto& v : t.values()) v = rng.normal(0.0, stddev);
  return t;
}

inline ConvLayer init_conv(int out_c, int in_c, int k, int stride, int pad, Rng& rng) {
  // He initialization; this backbone trains from scratch
  const double stddev = std::sqrt(2.0 / (in_c * k * k));
  ConvLayer layer;
  layer.w = init_tensor({out_c, in_c, k, k}, stddev, rng);
  layer.b = Tensor::zeros({out_c}, true);
  layer.stride = stride;
  layer.pad = pad;
  return layer;
}

}  // namespace detail

inline ModelParams init_model(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x6d6f64656cULL));
  ModelParams m;
  m.backbone.convs.push_back(detail::init_conv(16, 3, 3, 2, 1, rng));
  m.backbone.convs.push_back(detail::init_conv(24, 16, 3, 2, 1, rng));
  m.backbone.convs.push_back(detail::init_conv(kFeatChannels, 24, 3, 2, 1, rng));
  m.backbone.convs.push_back(detail::init_conv(kFeatChannels, kFeatChannels, 3, 1, 1, rng));

  m.rpn.conv = detail::init_conv(kFeatChannels, kFeatChannels, 3, 1, 1, rng);
  m.rpn.objectness.w = detail::init_tensor({kNumAnchorSizes, kFeatChannels, 1, 1}, 0.01, rng);
  m.rpn.objectness.b = Tensor::zeros({kNumAnchorSizes}, true);
  m.rpn.objectness.stride = 1;
  m.rpn.objectness.pad = 0;
  m.rpn.delta.w = detail::init_tensor({4 * kNumAnchorSizes, kFeatChannels, 1, 1}, 0.01, rng);
  m.rpn.delta.b = Tensor::zeros({4 * kNumAnchorSizes}, true);
  m.rpn.delta.stride = 1;
  m.rpn.delta.pad = 0;
  m.rpn.cos_w = detail::init_tensor({kEmbedDim, kFeatChannels}, 0.01, rng);
  m.rpn.cos_b = Tensor::zeros({kEmbedDim}, true);

  const double head_std = std::sqrt(2.0 / kRoiFeat);
  m.head.fc1_w = detail::init_tensor({kHeadHidden, kRoiFeat}, head_std, rng);
  m.head.fc1_b = Tensor::zeros({kHeadHidden}, true);
  m.head.embed_w = detail::init_tensor({kEmbedDim, kHeadHidden}, 0.01, rng);
  m.head.embed_b = Tensor::zeros({kEmbedDim}, true);
  m.head.delta_w = detail::init_tensor({4, kHeadHidden}, 0.01, rng);
  m.head.delta_b = Tensor::zeros({4}, true);

  m.embedder.w = detail::init_tensor({kEmbedDim, kFeatChannels}, 0.01, rng);
  m.embedder.b = Tensor::zeros({kEmbedDim}, true);

  m.comparator.bg_weights = detail::init_tensor({kEmbedDim}, 0.01, rng);
  return m;
}

// stable name -> tensor registry; order is the checkpoint and update order
inline std::vector<std::pair<std::string, Tensor>> named_params(ModelParams& m) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t i = 0; i < m.backbone.convs.size(); ++i) {
    out.emplace_back("backbone/conv" + std::to_string(i) + "/w", m.backbone.convs[i].w);
    out.emplace_back("backbone/conv" + std::to_string(i) + "/b", m.backbone.convs[i].b);
  }
  out.emplace_back("rpn/conv/w", m.rpn.conv.w);
  out.emplace_back("rpn/conv/b", m.rpn.conv.b);
  out.emplace_back("rpn/obj/w", m.rpn.objectness.w);
  out.emplace_back("rpn/obj/b", m.rpn.objectness.b);
  out.emplace_back("rpn/delta/w", m.rpn.delta.w);
  out.emplace_back("rpn/delta/b", m.rpn.delta.b);
  out.emplace_back("rpn/cos/w", m.rpn.cos_w);
  out.emplace_back("rpn/cos/b", m.rpn.cos_b);
  out.emplace_back("rpn/cos/gamma", m.rpn.cos_gamma);
  out.emplace_back("rpn/cos/beta", m.rpn.cos_beta);
  out.emplace_back("head/fc1/w", m.head.fc1_w);
  out.emplace_back("head/fc1/b", m.head.fc1_b);
  out.emplace_back("head/embed/w", m.head.embed_w);
  out.emplace_back("head/embed/b", m.head.embed_b);
  out.emplace_back("head/delta/w", m.head.delta_w);
  out.emplace_back("head/delta/b", m.head.delta_b);
  out.emplace_back("embedder/w", m.embedder.w);
  out.emplace_back("embedder/b", m.embedder.b);
  out.emplace_back("comparator/gamma", m.comparator.gamma);
  out.emplace_back("comparator/beta", m.comparator.beta);
  out.emplace_back("comparator/bg_w", m.comparator.bg_weights);
  out.emplace_back("comparator/bg_b", m.comparator.bg_bias);
  return out;
}

// the exemplar pathway parameters duplicated by the momentum pair
inline std::vector<std::pair<std::string, Tensor>> exemplar_pathway_params(ModelParams& m) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t i = 0; i < m.backbone.convs.size(); ++i) {
    out.emplace_back("backbone/conv" + std::to_string(i) + "/w", m.backbone.convs[i].w);
    out.emplace_back("backbone/conv" + std::to_string(i) + "/b", m.backbone.convs[i].b);
  }
  out.emplace_back("embedder/w", m.embedder.w);
  out.emplace_back("embedder/b", m.embedder.b);
  return out;
}

inline Tensor backbone_forward(const Tensor& image, const BackboneParams& backbone) {
  Tensor x = image;
  for (const auto& layer : backbone.convs) x = relu(conv2d(x, layer.w, layer.b, layer.stride, layer.pad));
  return x;
}

// 4x4 grid average pooling with nearest-cell binning; boxes are constants in
// the graph (proposals carry no gradient). feature [C,Hf,Wf] in feature cells,
// boxes in image pixels. Output rows are flattened [C*kRoiGrid*kRoiGrid].
inline Tensor roi_pool(const Tensor& feature, const std::vector<Box>& rois) {
  check(feature.ndim() == 3, "roi_pool: expects [C,H,W] feature map");
  const int C = feature.dim(0), Hf = feature.dim(1), Wf = feature.dim(2);
  const int n = static_cast<int>(rois.size());
  const int cell = kRoiGrid;
  const bool traced = detail::tracing({&feature});

  struct Zone {
    int x0, x1, y0, y1;
  };
  std::vector<Zone> zones(static_cast<std::size_t>(n) * cell * cell);
  for (int r = 0; r < n; ++r) {
    const Box& b = rois[static_cast<std::size_t>(r)];
    check(b.valid(), "roi_pool: zero-area box");
    const double fx1 = b.x1 / kStride, fy1 = b.y1 / kStride;
    const double fw = (b.x2 - b.x1) / kStride, fh = (b.y2 - b.y1) / kStride;
    for (int gy = 0; gy < cell; ++gy)
      for (int gx = 0; gx < cell; ++gx) {
        int x0 = static_cast<int>(std::lround(fx1 + fw * gx / cell));
        int x1 = static_cast<int>(std::lround(fx1 + fw * (gx + 1) / cell));
        int y0 = static_cast<int>(std::lround(fy1 + fh * gy / cell));
        int y1 = static_cast<int>(std::lround(fy1 + fh * (gy + 1) / cell));
        x0 = std::clamp(x0, 0, Wf - 1);
        y0 = std::clamp(y0, 0, Hf - 1);
        x1 = std::clamp(std::max(x1, x0 + 1), x0 + 1, Wf);
        y1 = std::clamp(std::max(y1, y0 + 1), y0 + 1, Hf);
        zones[static_cast<std::size_t>((r * cell + gy) * cell + gx)] = Zone{x0, x1, y0, y1};
      }
  }

  std::vector<double> out(static_cast<std::size_t>(n) * C * cell * cell);
  const double* pf = feature.values().data();
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < C; ++c) {
      const double* fc = pf + static_cast<std::size_t>(c) * Hf * Wf;
      for (int gy = 0; gy < cell; ++gy)
        for (int gx = 0; gx < cell; ++gx) {
          const Zone& z = zones[static_cast<std::size_t>((r * cell + gy) * cell + gx)];
          double s = 0.0;
          for (int y = z.y0; y < z.y1; ++y)
            for (int x = z.x0; x < z.x1; ++x) s += fc[y * Wf + x];
          out[static_cast<std::size_t>(((r * C) + c) * cell * cell + gy * cell + gx)] =
              s / ((z.y1 - z.y0) * (z.x1 - z.x0));
        }
    }

  Tensor o = detail::make_output(Shape{n, C * cell * cell}, std::move(out), traced);
  if (traced) {
    auto fi = feature.impl(), oi = o.impl();
    Tape::current()->record(o, [fi, oi, zones, n, C, Hf, Wf, cell] {
      auto& gf = detail::grad_of(fi);
      const double* g = oi->grad.data();
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < C; ++c) {
          double* gc = gf.data() + static_cast<std::size_t>(c) * Hf * Wf;
          for (int gy = 0; gy < cell; ++gy)
            for (int gx = 0; gx < cell; ++gx) {
              const Zone& z = zones[static_cast<std::size_t>((r * cell + gy) * cell + gx)];
              const double gv = g[static_cast<std::size_t>(((r * C) + c) * cell * cell + gy * cell + gx)] /
                                ((z.y1 - z.y0) * (z.x1 - z.x0));
              for (int y = z.y0; y < z.y1; ++y)
                for (int x = z.x0; x < z.x1; ++x) gc[y * Wf + x] += gv;
            }
        }
    });
  }
  return o;
}

// box head: pooled RoI features -> (embedding [N,D], class-agnostic delta [N,4])
struct BoxHeadOutput {
  Tensor embedding;
  Tensor delta;
};

inline BoxHeadOutput box_head_forward(const Tensor& roi_features, const HeadParams& head) {
  Tensor h = relu(linear(roi_features, head.fc1_w, head.fc1_b));
  return BoxHeadOutput{linear(h, head.embed_w, head.embed_b),
                       linear(h, head.delta_w, head.delta_b)};
}

}  // namespace cosdet
