#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "cosdet/boxes.hpp"
#include "cosdet/rng.hpp"
#include "cosdet/shapes.hpp"

namespace cosdet {

struct ClassSplit {
  std::vector<int> base;
  std::vector<int> novel;
};

inline ClassSplit default_split() { return ClassSplit{{0, 1, 2, 3, 4, 5}, {6, 7, 8, 9}}; }

struct ImageRef {
  std::uint64_t dataset_seed = 0;
  int index = 0;
};

struct ExemplarRef {
  int class_id = -1;
  ImageRef image;
  Box box;
};

struct Episode {
  std::uint64_t episode_seed = 0;
  int way = 0;
  int shot = 0;
  std::vector<ImageRef> query;
  std::vector<ExemplarRef> exemplars;  // grouped by class: way*shot entries
};

// in-memory training task: one query image plus one exemplar crop per class
struct TrainingEpisode {
  std::uint64_t episode_seed = 0;
  ShapesImage query;                       // flip already applied
  std::vector<int> class_ids;              // episode classes, local index i -> class_ids[i]
  std::vector<Tensor> exemplar_crops;      // one per class, 32x32, flip applied
  std::vector<Box> gt_boxes;               // episode-class ground truth
  std::vector<int> gt_labels;              // local indices, 1..way (0 is background)
};

// image indices usable as base-training queries: at least one object and all
// objects from base classes, so the episode class set can cover the image
class DatasetIndex {
 public:
  DatasetIndex(const std::vector<ShapesImage>& images, const ClassSplit& split) {
    const std::set<int> base(split.base.begin(), split.base.end());
    per_class_.resize(kNumShapeClasses);
    for (std::size_t i = 0; i < images.size(); ++i) {
      bool all_base = !images[i].objects.empty();
      for (std::size_t j = 0; j < images[i].objects.size(); ++j) {
        const auto& obj = images[i].objects[j];
        per_class_[static_cast<std::size_t>(obj.class_id)].emplace_back(static_cast<int>(i),
                                                                        static_cast<int>(j));
        if (base.find(obj.class_id) == base.end()) all_base = false;
      }
      if (all_base) train_queries_.push_back(static_cast<int>(i));
    }
  }

  const std::vector<std::pair<int, int>>& instances_of(int class_id) const {
    return per_class_[static_cast<std::size_t>(class_id)];
  }
  const std::vector<int>& train_queries() const { return train_queries_; }

 private:
  std::vector<std::vector<std::pair<int, int>>> per_class_;  // (image, object)
  std::vector<int> train_queries_;
};

// one query image, `way` base classes covering every class in the query,
// one exemplar per class cropped from other images; independent horizontal
// flips with probability 0.5
inline TrainingEpisode sample_training_episode(const std::vector<ShapesImage>& dataset,
                                               const DatasetIndex& index, const ClassSplit& split,
                                               int way, Rng& rng) {
  check(static_cast<int>(split.base.size()) >= way,
        "sample_training_episode: fewer base classes than the episode way");
  check(!index.train_queries().empty(), "sample_training_episode: no base-only query images");

  TrainingEpisode ep;
  ep.episode_seed = rng.next_u64();
  Rng ep_rng(ep.episode_seed);

  const int query_idx =
      index.train_queries()[ep_rng.uniform_index(index.train_queries().size())];
  const ShapesImage& raw = dataset[static_cast<std::size_t>(query_idx)];

  // episode classes: query classes first, then random fill from the rest
  std::vector<int> classes;
  for (const auto& obj : raw.objects)
    if (std::find(classes.begin(), classes.end(), obj.class_id) == classes.end())
      classes.push_back(obj.class_id);
  check(static_cast<int>(classes.size()) <= way,
        "sample_training_episode: query contains more classes than the episode way");
  std::vector<int> rest;
  for (int c : split.base)
    if (std::find(classes.begin(), classes.end(), c) == classes.end()) rest.push_back(c);
  ep_rng.shuffle(rest);
  for (int c : rest)
    if (static_cast<int>(classes.size()) < way) classes.push_back(c);
  ep.class_ids = classes;

  // exemplars before the query flip draw, one per class, never from the query
  for (int c : classes) {
    std::vector<std::pair<int, int>> pool;
    for (const auto& inst : index.instances_of(c))
      if (inst.first != query_idx) pool.push_back(inst);
    check(!pool.empty(), "sample_training_episode: class " + std::to_string(c) +
                             " has no exemplar instance outside the query image");
    const auto pick = pool[ep_rng.uniform_index(pool.size())];
    const ShapesImage& src = dataset[static_cast<std::size_t>(pick.first)];
    const auto& obj = src.objects[static_cast<std::size_t>(pick.second)];
    Tensor crop = crop_and_resize(src, obj.box);
    if (ep_rng.bernoulli(0.5)) crop = hflip_crop(crop);
    ep.exemplar_crops.push_back(crop);
  }

  ep.query = ep_rng.bernoulli(0.5) ? hflip_image(raw) : raw;
  for (const auto& obj : ep.query.objects) {
    const auto it = std::find(classes.begin(), classes.end(), obj.class_id);
    if (it == classes.end()) continue;  // non-episode classes fall to background
    ep.gt_boxes.push_back(obj.box);
    ep.gt_labels.push_back(static_cast<int>(it - classes.begin()) + 1);
  }
  return ep;
}

// evaluation episodes: m classes, 2 query images per class, n exemplars per
// class from images outside the query set
inline std::vector<Episode> sample_eval_episodes(const std::vector<ShapesImage>& dataset,
                                                 const DatasetIndex& index,
                                                 const std::vector<int>& split_classes,
                                                 int episodes, int way, int shot, Rng& rng) {
  check(way >= 1 && way <= static_cast<int>(split_classes.size()),
        "sample_eval_episodes: way exceeds the class count of the split");
  check(shot >= 1, "sample_eval_episodes: shot must be positive");
  constexpr int kQueriesPerClass = 2;

  std::vector<Episode> out;
  for (int e = 0; e < episodes; ++e) {
    Episode ep;
    ep.episode_seed = rng.next_u64();
    ep.way = way;
    ep.shot = shot;
    Rng ep_rng(ep.episode_seed);

    std::vector<int> classes = split_classes;
    ep_rng.shuffle(classes);
    classes.resize(static_cast<std::size_t>(way));

    std::set<int> query_set;
    for (int c : classes) {
      std::vector<int> images;
      for (const auto& inst : index.instances_of(c))
        if (images.empty() || images.back() != inst.first) images.push_back(inst.first);
      check(static_cast<int>(images.size()) >= kQueriesPerClass + 1,
            "sample_eval_episodes: not enough disjoint images for class " + std::to_string(c));
      ep_rng.shuffle(images);
      for (int k = 0; k < kQueriesPerClass; ++k) {
        const int img = images[static_cast<std::size_t>(k)];
        if (query_set.insert(img).second)
          ep.query.push_back(ImageRef{dataset[0].dataset_seed, img});
      }
    }

    for (int c : classes) {
      std::vector<std::pair<int, int>> pool;
      for (const auto& inst : index.instances_of(c))
        if (query_set.find(inst.first) == query_set.end()) pool.push_back(inst);
      check(static_cast<int>(pool.size()) >= shot,
            "sample_eval_episodes: not enough exemplar instances for class " + std::to_string(c));
      ep_rng.shuffle(pool);
      for (int k = 0; k < shot; ++k) {
        const auto& pick = pool[static_cast<std::size_t>(k)];
        const auto& obj =
            dataset[static_cast<std::size_t>(pick.first)].objects[static_cast<std::size_t>(pick.second)];
        ep.exemplars.push_back(ExemplarRef{c, ImageRef{dataset[0].dataset_seed, pick.first}, obj.box});
      }
    }
    out.push_back(std::move(ep));
  }
  return out;
}

// ---------------------------------------------------------------------------
// episode file serialization (JSON)

inline nlohmann::json to_json(const ImageRef& r) {
  return nlohmann::json{{"dataset_seed", r.dataset_seed}, {"index", r.index}};
}

inline ImageRef image_ref_from_json(const nlohmann::json& j) {
  return ImageRef{j.at("dataset_seed").get<std::uint64_t>(), j.at("index").get<int>()};
}

inline nlohmann::json to_json(const Episode& ep) {
  nlohmann::json q = nlohmann::json::array();
  for (const auto& r : ep.query) q.push_back(to_json(r));
  nlohmann::json ex = nlohmann::json::array();
  for (const auto& e : ep.exemplars)
    ex.push_back(nlohmann::json{{"class", e.class_id},
                                {"image", to_json(e.image)},
                                {"box", {e.box.x1, e.box.y1, e.box.x2, e.box.y2}}});
  return nlohmann::json{{"episode_seed", ep.episode_seed},
                        {"way", ep.way},
                        {"shot", ep.shot},
                        {"query", q},
                        {"exemplars", ex}};
}

inline Episode episode_from_json(const nlohmann::json& j) {
  Episode ep;
  ep.episode_seed = j.at("episode_seed").get<std::uint64_t>();
  ep.way = j.at("way").get<int>();
  ep.shot = j.at("shot").get<int>();
  for (const auto& q : j.at("query")) ep.query.push_back(image_ref_from_json(q));
  for (const auto& e : j.at("exemplars")) {
    ExemplarRef r;
    r.class_id = e.at("class").get<int>();
    r.image = image_ref_from_json(e.at("image"));
    const auto& b = e.at("box");
    r.box = Box{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                b.at(3).get<double>()};
    ep.exemplars.push_back(r);
  }
  return ep;
}

inline void save_episodes(const std::string& path, const std::vector<Episode>& episodes) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& ep : episodes) arr.push_back(to_json(ep));
  nlohmann::json root{{"episodes", arr}};
  std::ofstream out(path);
  check(out.good(), "save_episodes: cannot open " + path);
  out << root.dump(2) << "\n";
}

inline std::vector<Episode> load_episodes(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "load_episodes: cannot open " + path);
  nlohmann::json root = nlohmann::json::parse(in);
  std::vector<Episode> out;
  for (const auto& j : root.at("episodes")) out.push_back(episode_from_json(j));
  return out;
}

}  // namespace cosdet
