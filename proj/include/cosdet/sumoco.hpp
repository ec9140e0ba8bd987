#pragma once

#include <deque>
#include <utility>
#include <vector>

#include "cosdet/comparator.hpp"
#include "cosdet/embedder.hpp"
#include "cosdet/model.hpp"
#include "cosdet/tensor.hpp"

namespace cosdet {

// live parameters plus their slowly-evolving duplicate; the duplicate never
// receives gradients and is only written by momentum_update
struct MomentumPair {
  std::vector<Tensor> query_params;
  std::vector<Tensor> key_params;
  double alpha = 0.999;
};

inline MomentumPair make_momentum_pair(std::vector<Tensor> query_params, double alpha) {
  MomentumPair pair;
  pair.query_params = std::move(query_params);
  pair.alpha = alpha;
  pair.key_params.reserve(pair.query_params.size());
  for (const auto& p : pair.query_params) pair.key_params.push_back(p.detach());
  return pair;
}

// theta_k <- alpha*theta_k + (1-alpha)*theta_q, element-wise
inline void momentum_update(MomentumPair& pair) {
  check(pair.query_params.size() == pair.key_params.size(), "momentum_update: shape drift");
  for (std::size_t i = 0; i < pair.query_params.size(); ++i) {
    const auto& q = pair.query_params[i].values();
    auto& k = pair.key_params[i].values();
    check(q.size() == k.size(), "momentum_update: shape drift");
    for (std::size_t j = 0; j < k.size(); ++j)
      k[j] = pair.alpha * k[j] + (1.0 - pair.alpha) * q[j];
  }
}

struct QueueEntry {
  std::vector<double> feature;  // detached, dimension D
  int class_id = -1;
  std::int64_t iteration_stamp = 0;
};

// FIFO queue of detached labeled exemplar features; capacity 0 keeps the
// queue permanently empty (Su-MoCo off)
class SuMoCoQueue {
 public:
  explicit SuMoCoQueue(std::size_t capacity) : capacity_(capacity) {}

  void enqueue(const std::vector<double>& feature, int class_id, std::int64_t iteration) {
    check(entries_.empty() || entries_.front().feature.size() == feature.size(),
          "enqueue: feature dimension mismatch");
    if (capacity_ == 0) return;
    entries_.push_back(QueueEntry{feature, class_id, iteration});
    while (entries_.size() > capacity_) entries_.pop_front();
  }

  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  const QueueEntry& at(std::size_t i) const { return entries_[i]; }

  const std::deque<QueueEntry>& entries() const { return entries_; }

 private:
  std::size_t capacity_;
  std::deque<QueueEntry> entries_;
};

// paper's rule of thumb for the momentum given a queue size; advisory only
inline double momentum_rule(std::size_t queue_size) {
  if (queue_size == 0) return 0.0;
  return 1.0 - 1.0 / static_cast<double>(queue_size);
}

struct QueueLossReport {
  std::vector<double> per_sample_losses;
  double mean_loss = 0.0;
  Tensor loss;  // scalar on the tape
};

// Classification loss over one RoI batch with queue augmentation. Each queue
// entry is appended to every RoI softmax as one extra comparison logit,
// counted as an additional positive when its label matches the RoI target;
// the per-entry losses are averaged. Empty queue degenerates to the plain
// episode cross-entropy.
//
// base_logits: [N, 1+m] rows of (background, class 1..m) logits.
// roi_targets: 0 for background, 1..m for episode classes.
// exemplar_class_ids: the episode class id behind each logit column.
// roi_embeddings: [N, D] query embeddings (gradients flow through these only;
// queue features are constants).
inline QueueLossReport sumoco_loss(const Tensor& base_logits, const std::vector<int>& roi_targets,
                                   const std::vector<int>& exemplar_class_ids,
                                   const Tensor& roi_embeddings, const ComparatorParams& params,
                                   const SuMoCoQueue& queue) {
  const int n = base_logits.dim(0);
  const int m = base_logits.dim(1) - 1;
  check(m >= 1, "sumoco_loss: empty current exemplar set");
  check(static_cast<int>(roi_targets.size()) == n, "sumoco_loss: one target per RoI");
  check(static_cast<int>(exemplar_class_ids.size()) == m, "sumoco_loss: class id per exemplar");

  QueueLossReport report;
  if (queue.size() == 0) {
    std::vector<int> targets(roi_targets.begin(), roi_targets.end());
    report.loss = softmax_cross_entropy_rows(base_logits, targets);
    report.mean_loss = report.loss.item();
    report.per_sample_losses = {report.mean_loss};
    return report;
  }

  std::vector<Tensor> entry_losses;
  entry_losses.reserve(queue.size());
  for (std::size_t e = 0; e < queue.size(); ++e) {
    const QueueEntry& entry = queue.at(e);
    check(entry.feature.size() == static_cast<std::size_t>(roi_embeddings.dim(1)),
          "sumoco_loss: queue feature dimension mismatch");
    Tensor feat(Shape{1, roi_embeddings.dim(1)}, entry.feature, false);
    Tensor extra = comparison_logits(roi_embeddings, feat, params);  // [N,1]
    Tensor logits = concat({base_logits, extra}, 1);                 // [N, 1+m+1]
    std::vector<std::vector<int>> positives(static_cast<std::size_t>(n));
    for (int r = 0; r < n; ++r) {
      positives[static_cast<std::size_t>(r)] = {roi_targets[static_cast<std::size_t>(r)]};
      const int t = roi_targets[static_cast<std::size_t>(r)];
      if (t >= 1 && exemplar_class_ids[static_cast<std::size_t>(t - 1)] == entry.class_id)
        positives[static_cast<std::size_t>(r)].push_back(m + 1);
    }
    Tensor l = softmax_group_nll(logits, positives);
    report.per_sample_losses.push_back(l.item());
    entry_losses.push_back(l);
  }

  Tensor total = entry_losses[0];
  for (std::size_t i = 1; i < entry_losses.size(); ++i) total = add(total, entry_losses[i]);
  report.loss = mul(total, 1.0 / static_cast<double>(entry_losses.size()));
  report.mean_loss = report.loss.item();
  return report;
}

}  // namespace cosdet
