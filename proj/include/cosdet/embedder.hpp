#pragma once

#include <vector>

#include "cosdet/model.hpp"
#include "cosdet/tensor.hpp"

namespace cosdet {

// unit of comparison: one embedded exemplar instance
struct ExemplarEmbedding {
  int class_id = -1;
  Tensor vector;  // [D]
  int shot_index = 0;
};

// vector = GAP(backbone(crop)) * W + b; differentiable end to end
inline ExemplarEmbedding embed_exemplar(const Tensor& crop, int class_id,
                                        const BackboneParams& backbone,
                                        const EmbedderParams& embedder, int shot_index = 0) {
  check(crop.ndim() == 3 && crop.dim(1) >= 8 && crop.dim(2) >= 8,
        "embed_exemplar: crop below backbone minimum of 8x8");
  Tensor feat = backbone_forward(crop, backbone);
  Tensor pooled = reshape(global_avg_pool(feat), Shape{1, kFeatChannels});
  Tensor v = reshape(linear(pooled, embedder.w, embedder.b), Shape{kEmbedDim});
  return ExemplarEmbedding{class_id, v, shot_index};
}

// element-wise mean of same-class embeddings; the inference-time
// feature-average aggregation
inline ExemplarEmbedding average_shots(const std::vector<ExemplarEmbedding>& shots) {
  check(!shots.empty(), "average_shots: empty shot list");
  const int d = shots[0].vector.dim(0);
  for (const auto& s : shots) {
    check(s.class_id == shots[0].class_id, "average_shots: mixed classes");
    check(s.vector.dim(0) == d, "average_shots: dimension mismatch");
  }
  Tensor sum = shots[0].vector;
  for (std::size_t i = 1; i < shots.size(); ++i) sum = add(sum, shots[i].vector);
  Tensor mean = mul(sum, 1.0 / static_cast<double>(shots.size()));
  return ExemplarEmbedding{shots[0].class_id, mean, 0};
}

// exemplar embeddings stacked into a [M,D] matrix in the given order
inline Tensor stack_embeddings(const std::vector<ExemplarEmbedding>& embs) {
  check(!embs.empty(), "stack_embeddings: empty set");
  std::vector<Tensor> rows;
  rows.reserve(embs.size());
  for (const auto& e : embs) rows.push_back(reshape(e.vector, Shape{1, e.vector.dim(0)}));
  return concat(rows, 0);
}

}  // namespace cosdet
