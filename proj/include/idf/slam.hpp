#pragma once

// The per-frame pipeline: track against the latest keyframe, then either the
// keyframe path (pose refinement against the frozen map, insertion or culling,
// map optimization over a replay set) or the non-keyframe path (record the
// tracked pose, finetune the extractor once enough keyframes exist).
//
// Phases run strictly one after another. Every phase boundary compares
// checksums of the state that phase must not touch; mismatches are counted as
// violations and logged.

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "idf/keyframe_store.hpp"
#include "idf/mapper.hpp"
#include "idf/tracker.hpp"

namespace idf {

enum class Phase { kIdle, kTracking, kPoseOpt, kMapOpt, kFinetune };

inline const char* phase_name(Phase p) {
  switch (p) {
    case Phase::kIdle: return "idle";
    case Phase::kTracking: return "tracking";
    case Phase::kPoseOpt: return "pose_opt";
    case Phase::kMapOpt: return "map_opt";
    case Phase::kFinetune: return "finetune";
  }
  return "?";
}

struct TrajectoryEntry {
  double timestamp = 0;
  PoseSE3 pose;
};

struct FrameReport {
  int index = 0;
  bool keyframe_event = false;
  bool inserted = false;
  bool culled = false;
  bool lost = false;
  bool pose_opt_failed = false;
  double track_residual = 0;
  double cull_score = 0;
  int replay_size = 0;
  bool finetuned = false;
  PoseSE3 pose;
};

struct PhaseAudit {
  int violations = 0;
  int transitions = 0;
  std::vector<std::string> log;
};

class SlamSystem {
 public:
  explicit SlamSystem(SystemConfig cfg)
      : cfg_((cfg.validate(), cfg)),
        map_(cfg_.map, cfg_.seed),
        extractor_(cfg_.trunk_channels, cfg_.feature_dim, cfg_.seed + 1),
        store_(cfg_.sigma_cull, cfg_.sigma_covis, cfg_.covis_stride),
        rng_(cfg_.seed),
        map_adam_(ad::AdamOptions{cfg_.lr_map}),
        conv_adam_(make_conv_optimizer(cfg_)) {}

  void set_loss_logger(LossLogger log) { logger_ = std::move(log); }

  void initialize(const Frame& first) {
    require(!initialized_, "initialize: already initialized");
    first.validate();
    if (!first.has_valid_depth()) throw InitializationError("first frame has no valid depth");
    Keyframe kf{next_id_++, first, PoseSE3::identity(), {}};
    store_.insert(kf);
    {
      PhaseScope scope(*this, Phase::kMapOpt);
      std::vector<Keyframe*> replay{store_.latest()};
      run_map_opt(replay, cfg_.n_init_iters);
    }
    reference_ = *store_.latest();
    trajectory_.push_back({first.timestamp, PoseSE3::identity()});
    last_pose_ = PoseSE3::identity();
    initialized_ = true;
    ++frames_;
  }

  FrameReport process_frame(const Frame& frame) {
    require(initialized_, "process_frame: system not initialized");
    frame.validate();
    require(trajectory_.empty() || frame.timestamp >= trajectory_.back().timestamp,
            "process_frame: timestamps must be non-decreasing");
    FrameReport rep;
    rep.index = frames_++;

    TrackResult tr;
    {
      PhaseScope scope(*this, Phase::kTracking);
      tr = track(extractor_, frame, *reference_, last_pose_, cfg_);
    }
    rep.lost = tr.lost;
    rep.track_residual = tr.residual;
    const PoseError motion = pose_error(tr.pose, reference_->pose);
    const bool keyframe = tr.lost || motion.translation > cfg_.kf_translation_thresh ||
                          motion.rotation_deg > cfg_.kf_rotation_thresh_deg;

    if (!keyframe) {
      rep.pose = tr.pose;
      if (static_cast<int>(store_.size()) >= cfg_.n_kf_finetune) {
        PhaseScope scope(*this, Phase::kFinetune);
        auto ft = finetune_extractor(extractor_, conv_adam_, map_, store_, cfg_, rng_, cfg_.n_finetune_iters);
        rep.finetuned = ft.ran;
      }
    } else {
      rep.keyframe_event = true;
      Keyframe kf{next_id_, frame, tr.pose, {}};
      PoseOptResult po;
      {
        PhaseScope scope(*this, Phase::kPoseOpt);
        po = optimize_pose(map_, kf, cfg_, rng_);
      }
      rep.pose_opt_failed = po.failed;
      if (po.failed) {
        // keep the tracker's (or fallback) pose and skip the keyframe
        rep.pose = tr.pose;
      } else {
        kf.pose = po.pose;
        rep.pose = kf.pose;
        ++next_id_;
        std::vector<Keyframe*> replay;
        std::optional<Keyframe> culled;
        auto ins = store_.insert(kf);
        rep.cull_score = ins.max_score;
        if (ins.culled) {
          rep.culled = true;
          culled = std::move(kf);
          replay = store_.select_replay_culled(*culled, ins.scores, cfg_.n_replay, rng_);
        } else {
          rep.inserted = true;
          replay = store_.select_replay(store_.latest()->id, cfg_.n_replay, rng_);
        }
        rep.replay_size = static_cast<int>(replay.size());
        {
          PhaseScope scope(*this, Phase::kMapOpt);
          run_map_opt(replay, cfg_.n_map_iters);
        }
        reference_ = culled ? *culled : *store_.latest();
      }
    }
    trajectory_.push_back({frame.timestamp, rep.pose});
    last_pose_ = rep.pose;
    reports_.push_back(rep);
    return rep;
  }

  const SystemConfig& config() const { return cfg_; }
  const ImplicitMap<float>& map() const { return map_; }
  ImplicitMap<float>& map() { return map_; }
  const KeyframeStore& store() const { return store_; }
  const FeatureExtractor& extractor() const { return extractor_; }
  const std::vector<TrajectoryEntry>& trajectory() const { return trajectory_; }
  const std::vector<FrameReport>& reports() const { return reports_; }
  const PhaseAudit& audit() const { return audit_; }
  Phase phase() const { return phase_; }
  bool initialized() const { return initialized_; }
  // The keyframe the tracker currently registers against.
  const Keyframe* reference() const { return reference_ ? &*reference_ : nullptr; }

  std::uint64_t stored_pose_checksum() const {
    Checksum c;
    for (const auto* k : store_.keyframes()) {
      c.add(&k->id, sizeof(k->id));
      c.add(k->pose.matrix());
    }
    return c.value();
  }

 private:
  // Enters a phase, snapshots what it may not modify, and audits on exit.
  class PhaseScope {
   public:
    PhaseScope(SlamSystem& s, Phase p) : s_(s), p_(p) {
      ++s_.audit_.transitions;
      if (s_.phase_ != Phase::kIdle)
        s_.violation(std::string("entered ") + phase_name(p) + " while " + phase_name(s_.phase_) + " active");
      s_.phase_ = p;
      map_ = s_.map_.checksum();
      poses_ = s_.stored_pose_checksum();
      n_stored_ = s_.store_.size();
      trunk_ = s_.extractor_.trunk_checksum();
      outconv_ = s_.extractor_.outconv_checksum();
    }
    ~PhaseScope() {
      if (p_ != Phase::kMapOpt && s_.map_.checksum() != map_)
        s_.violation(std::string("map changed during ") + phase_name(p_));
      if (s_.store_.size() == n_stored_ && s_.stored_pose_checksum() != poses_)
        s_.violation(std::string("stored keyframe poses changed during ") + phase_name(p_));
      if (s_.extractor_.trunk_checksum() != trunk_)
        s_.violation(std::string("extractor trunk changed during ") + phase_name(p_));
      if (p_ != Phase::kFinetune && s_.extractor_.outconv_checksum() != outconv_)
        s_.violation(std::string("outconv changed during ") + phase_name(p_));
      s_.phase_ = Phase::kIdle;
    }
    PhaseScope(const PhaseScope&) = delete;
    PhaseScope& operator=(const PhaseScope&) = delete;

   private:
    SlamSystem& s_;
    Phase p_;
    std::uint64_t map_ = 0, poses_ = 0, trunk_ = 0, outconv_ = 0;
    std::size_t n_stored_ = 0;
  };

  void violation(std::string what) {
    ++audit_.violations;
    audit_.log.push_back(std::move(what));
  }

  void run_map_opt(std::vector<Keyframe*>& replay, int iterations) {
    auto rep = optimize_map<float>(map_, replay, cfg_, rng_, iterations, &map_adam_, logger_, map_iterations_);
    map_iterations_ += iterations;
    map_.set_trainable(false);
    for (auto& d : rep.diagnostics) audit_.log.push_back(std::move(d));
  }

  SystemConfig cfg_;
  ImplicitMap<float> map_;
  FeatureExtractor extractor_;
  KeyframeStore store_;
  std::mt19937_64 rng_;
  ad::AdamState<float> map_adam_;
  ad::AdamState<float> conv_adam_;
  LossLogger logger_;
  long map_iterations_ = 0;

  std::optional<Keyframe> reference_;
  PoseSE3 last_pose_;
  std::vector<TrajectoryEntry> trajectory_;
  std::vector<FrameReport> reports_;
  PhaseAudit audit_;
  Phase phase_ = Phase::kIdle;
  bool initialized_ = false;
  int next_id_ = 0;
  int frames_ = 0;
};

}  // namespace idf
