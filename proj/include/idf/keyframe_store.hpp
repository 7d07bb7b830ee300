#pragma once

// Keyframe set, covisibility scores, culling, covisible graph and replay
// selection.

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <ostream>
#include <random>
#include <vector>

#include <json.hpp>

#include "idf/keyframe.hpp"

namespace idf {

struct CovisScore {
  double score = 0;
  int valid = 0;      // pixels of kf_new with depth that were tested
  int projected = 0;  // of those, landing inside kf_old with positive depth
  bool no_valid_depth = false;
};

// Projects every `stride`-th pixel of kf_new (rows and columns) with valid
// depth into kf_old: u_i = K T_old^-1 T_new K^-1 [u, v, 1] d. A pixel counts
// when the projected depth is positive and round(u_i) lies inside the image.
inline CovisScore covisibility(const Keyframe& kf_new, const Keyframe& kf_old, int stride = 1) {
  require(stride >= 1, "covisibility: stride must be positive");
  const Intrinsics& Kn = kf_new.frame.intrinsics;
  const Intrinsics& Ko = kf_old.frame.intrinsics;
  require(!kf_new.frame.depth.empty(), "covisibility: new keyframe has no depth");
  const PoseSE3 rel = kf_old.pose.inverse() * kf_new.pose;  // old-from-new
  CovisScore s;
  for (int r = 0; r < Kn.height; r += stride) {
    for (int c = 0; c < Kn.width; c += stride) {
      const double d = kf_new.frame.depth.at(r, c);
      if (!(d > 0)) continue;
      ++s.valid;
      const Vec3 x = rel * (Kn.unproject(r, c) * d);
      if (!(x.z() > 0)) continue;
      const double u = Ko.fx * x.x() / x.z() + Ko.cx;
      const double v = Ko.fy * x.y() / x.z() + Ko.cy;
      const double ur = std::round(u), vr = std::round(v);
      if (ur >= 0 && vr >= 0 && ur < Ko.width && vr < Ko.height) ++s.projected;
    }
  }
  s.no_valid_depth = s.valid == 0;
  s.score = s.valid > 0 ? double(s.projected) / s.valid : 0.0;
  return s;
}

inline double covisibility_score(const Keyframe& kf_new, const Keyframe& kf_old, int stride = 1) {
  return covisibility(kf_new, kf_old, stride).score;
}

struct InsertResult {
  bool culled = false;
  double max_score = 0;
  std::map<int, double> scores;  // against every stored keyframe
  std::map<int, double> edges;   // neighbor id -> score, when inserted
};

class KeyframeStore {
 public:
  KeyframeStore(double sigma_cull = 0.5, double sigma_covis = 0.3, int stride = 4)
      : sigma_cull_(sigma_cull), sigma_covis_(sigma_covis), stride_(stride) {
    require(sigma_covis < sigma_cull, "keyframe store: sigma_covis must be below sigma_cull");
  }

  // Scores of kf against every stored keyframe.
  std::map<int, double> scores(const Keyframe& kf) const {
    std::map<int, double> out;
    for (const auto& k : keyframes_) out[k->id] = covisibility_score(kf, *k, stride_);
    return out;
  }

  InsertResult insert(Keyframe kf) {
    require(kf.pose.has_valid_rotation(1e-6), "insert_keyframe: pose is not a rotation");
    require(!contains(kf.id), "insert_keyframe: duplicate keyframe id");
    InsertResult res;
    res.scores = scores(kf);
    for (const auto& [id, s] : res.scores) res.max_score = std::max(res.max_score, s);
    if (res.max_score > sigma_cull_) {
      res.culled = true;
      return res;
    }
    graph_[kf.id];
    for (const auto& [id, s] : res.scores) {
      if (s > sigma_covis_) {
        graph_[kf.id][id] = s;
        graph_[id][kf.id] = s;
        res.edges[id] = s;
      }
    }
    keyframes_.push_back(std::make_unique<Keyframe>(std::move(kf)));
    return res;
  }

  // kf_new first, then up to n_rep keyframes drawn without replacement from
  // those not adjacent to it.
  std::vector<Keyframe*> select_replay(int new_id, int n_rep, std::mt19937_64& rng) {
    Keyframe* kf = find(new_id);
    require(kf != nullptr, "select_replay: keyframe not in store");
    std::vector<Keyframe*> candidates;
    for (auto& k : keyframes_)
      if (k->id != new_id && !has_edge(new_id, k->id)) candidates.push_back(k.get());
    std::vector<Keyframe*> out{kf};
    sample_into(candidates, n_rep, rng, out);
    return out;
  }

  // Replay for a keyframe that was culled: it goes first, followed by stored
  // keyframes it would not have been connected to.
  std::vector<Keyframe*> select_replay_culled(Keyframe& culled, const std::map<int, double>& scores,
                                              int n_rep, std::mt19937_64& rng) {
    std::vector<Keyframe*> candidates;
    for (auto& k : keyframes_) {
      auto it = scores.find(k->id);
      if (it == scores.end() || it->second <= sigma_covis_) candidates.push_back(k.get());
    }
    std::vector<Keyframe*> out{&culled};
    sample_into(candidates, n_rep, rng, out);
    return out;
  }

  bool contains(int id) const { return find(id) != nullptr; }

  Keyframe* find(int id) const {
    for (const auto& k : keyframes_)
      if (k->id == id) return k.get();
    return nullptr;
  }

  bool has_edge(int a, int b) const {
    auto it = graph_.find(a);
    return it != graph_.end() && it->second.count(b) > 0;
  }

  std::map<int, double> neighbors(int id) const {
    auto it = graph_.find(id);
    return it == graph_.end() ? std::map<int, double>{} : it->second;
  }

  std::size_t size() const { return keyframes_.size(); }
  bool empty() const { return keyframes_.empty(); }

  // Insertion order.
  std::vector<Keyframe*> keyframes() const {
    std::vector<Keyframe*> out;
    for (const auto& k : keyframes_) out.push_back(k.get());
    return out;
  }

  Keyframe* latest() const { return keyframes_.empty() ? nullptr : keyframes_.back().get(); }

  double sigma_cull() const { return sigma_cull_; }
  double sigma_covis() const { return sigma_covis_; }
  int stride() const { return stride_; }

  // One JSON object per line: id, pose (16 reals, row-major), edges.
  void dump_jsonl(std::ostream& os) const {
    for (const auto& k : keyframes_) {
      nlohmann::json j;
      j["id"] = k->id;
      j["timestamp"] = k->frame.timestamp;
      const Mat4 m = k->pose.matrix();
      std::vector<double> pose;
      for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) pose.push_back(m(r, c));
      j["pose"] = pose;
      nlohmann::json edges = nlohmann::json::array();
      for (const auto& [id, s] : neighbors(k->id)) edges.push_back({{"id", id}, {"score", s}});
      j["edges"] = edges;
      os << j.dump() << '\n';
    }
  }

 private:
  static void sample_into(std::vector<Keyframe*>& candidates, int n, std::mt19937_64& rng,
                          std::vector<Keyframe*>& out) {
    // partial Fisher-Yates
    const int take = std::min<int>(n, static_cast<int>(candidates.size()));
    for (int i = 0; i < take; ++i) {
      std::uniform_int_distribution<int> pick(i, static_cast<int>(candidates.size()) - 1);
      std::swap(candidates[static_cast<std::size_t>(i)], candidates[static_cast<std::size_t>(pick(rng))]);
      out.push_back(candidates[static_cast<std::size_t>(i)]);
    }
  }

  double sigma_cull_, sigma_covis_;
  int stride_;
  std::vector<std::unique_ptr<Keyframe>> keyframes_;
  std::map<int, std::map<int, double>> graph_;
};

}  // namespace idf
