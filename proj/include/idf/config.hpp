#pragma once

#include <cstdint>
#include <fstream>
#include <string>

#include <json.hpp>

#include "idf/scene_mlp.hpp"

namespace idf {

struct LossWeights {
  double w_fs = 1.0;
  double w_tr = 6.0;
  double w_p = 0.1;
  double w_d = 1.0;
  double w_r = 1.0;

  void validate() const {
    require(w_fs > 0 && w_tr > 0 && w_p > 0 && w_d > 0 && w_r > 0,
            "loss weights must be strictly positive");
  }
};

// Every hyperparameter of the system. Defaults reproduce the published
// settings; values the method leaves open are documented where they are used.
struct SystemConfig {
  // Mapping
  int batch_rays = 1024;        // B
  int samples_per_ray = 144;    // S_p
  double truncation = 0.10;     // tr, meters
  int n_replay = 10;            // N_rep
  double lr_map = 0.005;
  int n_map_iters = 60;
  int n_init_iters = 200;
  LossWeights map_loss{1.0, 6.0, 0.1, 1.0, 1.0};

  // Pose refinement
  double lr_pose = 0.005;
  double pose_lr_decay = 0.7;
  int pose_lr_decay_every = 10;
  int n_pose_iters = 50;
  int pose_batch_rays = 0;  // 0: use batch_rays
  double active_eps = 1e-6;

  // Keyframes
  double sigma_cull = 0.5;
  double sigma_covis = 0.3;
  double kf_translation_thresh = 0.10;  // meters
  double kf_rotation_thresh_deg = 10.0;
  int covis_stride = 4;

  // Tracker
  int n_correspondences = 200;  // K
  int n_kf_finetune = 10;       // N_kf
  double lr_conv = 1e-4;
  int n_finetune_iters = 5;
  int finetune_batch_rays = 256;
  double lost_residual = 0.05;  // meters
  int feature_dim = 32;
  int trunk_channels = 32;
  int reference_stride = 2;
  LossWeights finetune_loss{1.0, 6.0, 1.0, 1.0, 1.0};

  // Scene
  MapOptions map;
  double near = 0.05;
  double far = 0;  // <= 0: diagonal of the scene bounds

  std::uint64_t seed = 0;

  double far_plane() const {
    if (far > 0) return far;
    return (map.bounds.max - map.bounds.min).norm();
  }

  int pose_rays() const { return pose_batch_rays > 0 ? pose_batch_rays : batch_rays; }

  void validate() const {
    require(batch_rays >= 64, "batch_rays must be at least 64 (one per sampling cell)");
    require(samples_per_ray >= 2, "samples_per_ray must be at least 2");
    require(truncation > 0, "truncation must be positive");
    require(near < far_plane(), "near must be below far");
    require(n_correspondences >= 16, "n_correspondences must be at least 16");
    require(sigma_covis < sigma_cull, "sigma_covis must be below sigma_cull");
    map_loss.validate();
    finetune_loss.validate();
  }
};

inline void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"w_fs", w.w_fs}, {"w_tr", w.w_tr}, {"w_p", w.w_p}, {"w_d", w.w_d}, {"w_r", w.w_r}};
}

inline void from_json(const nlohmann::json& j, LossWeights& w) {
  w.w_fs = j.value("w_fs", w.w_fs);
  w.w_tr = j.value("w_tr", w.w_tr);
  w.w_p = j.value("w_p", w.w_p);
  w.w_d = j.value("w_d", w.w_d);
  w.w_r = j.value("w_r", w.w_r);
}

inline nlohmann::json config_to_json(const SystemConfig& c) {
  nlohmann::json j;
  j["batch_rays"] = c.batch_rays;
  j["samples_per_ray"] = c.samples_per_ray;
  j["truncation"] = c.truncation;
  j["n_replay"] = c.n_replay;
  j["lr_map"] = c.lr_map;
  j["n_map_iters"] = c.n_map_iters;
  j["n_init_iters"] = c.n_init_iters;
  j["map_loss"] = c.map_loss;
  j["lr_pose"] = c.lr_pose;
  j["pose_lr_decay"] = c.pose_lr_decay;
  j["pose_lr_decay_every"] = c.pose_lr_decay_every;
  j["n_pose_iters"] = c.n_pose_iters;
  j["pose_batch_rays"] = c.pose_batch_rays;
  j["active_eps"] = c.active_eps;
  j["sigma_cull"] = c.sigma_cull;
  j["sigma_covis"] = c.sigma_covis;
  j["kf_translation_thresh"] = c.kf_translation_thresh;
  j["kf_rotation_thresh_deg"] = c.kf_rotation_thresh_deg;
  j["covis_stride"] = c.covis_stride;
  j["n_correspondences"] = c.n_correspondences;
  j["n_kf_finetune"] = c.n_kf_finetune;
  j["lr_conv"] = c.lr_conv;
  j["n_finetune_iters"] = c.n_finetune_iters;
  j["finetune_batch_rays"] = c.finetune_batch_rays;
  j["lost_residual"] = c.lost_residual;
  j["feature_dim"] = c.feature_dim;
  j["trunk_channels"] = c.trunk_channels;
  j["reference_stride"] = c.reference_stride;
  j["finetune_loss"] = c.finetune_loss;
  j["pos_freqs"] = c.map.pos_freqs;
  j["dir_freqs"] = c.map.dir_freqs;
  const auto& b = c.map.bounds;
  j["scene_bounds"] = {{b.min.x(), b.min.y(), b.min.z()}, {b.max.x(), b.max.y(), b.max.z()}};
  j["near"] = c.near;
  j["far"] = c.far;
  j["seed"] = c.seed;
  return j;
}

// Missing keys keep their defaults.
inline SystemConfig config_from_json(const nlohmann::json& j) {
  SystemConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("batch_rays", c.batch_rays);
  get("samples_per_ray", c.samples_per_ray);
  get("truncation", c.truncation);
  get("n_replay", c.n_replay);
  get("lr_map", c.lr_map);
  get("n_map_iters", c.n_map_iters);
  get("n_init_iters", c.n_init_iters);
  if (j.contains("map_loss")) from_json(j.at("map_loss"), c.map_loss);
  get("lr_pose", c.lr_pose);
  get("pose_lr_decay", c.pose_lr_decay);
  get("pose_lr_decay_every", c.pose_lr_decay_every);
  get("n_pose_iters", c.n_pose_iters);
  get("pose_batch_rays", c.pose_batch_rays);
  get("active_eps", c.active_eps);
  get("sigma_cull", c.sigma_cull);
  get("sigma_covis", c.sigma_covis);
  get("kf_translation_thresh", c.kf_translation_thresh);
  get("kf_rotation_thresh_deg", c.kf_rotation_thresh_deg);
  get("covis_stride", c.covis_stride);
  get("n_correspondences", c.n_correspondences);
  get("n_kf_finetune", c.n_kf_finetune);
  get("lr_conv", c.lr_conv);
  get("n_finetune_iters", c.n_finetune_iters);
  get("finetune_batch_rays", c.finetune_batch_rays);
  get("lost_residual", c.lost_residual);
  get("feature_dim", c.feature_dim);
  get("trunk_channels", c.trunk_channels);
  get("reference_stride", c.reference_stride);
  if (j.contains("finetune_loss")) from_json(j.at("finetune_loss"), c.finetune_loss);
  get("pos_freqs", c.map.pos_freqs);
  get("dir_freqs", c.map.dir_freqs);
  if (j.contains("scene_bounds")) {
    const auto& sb = j.at("scene_bounds");
    for (int k = 0; k < 3; ++k) {
      c.map.bounds.min(k) = sb.at(0).at(k).get<double>();
      c.map.bounds.max(k) = sb.at(1).at(k).get<double>();
    }
  }
  get("near", c.near);
  get("far", c.far);
  get("seed", c.seed);
  return c;
}

inline SystemConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw LoadError("cannot open config " + path);
  try {
    return config_from_json(nlohmann::json::parse(is));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("config " + path + ": " + e.what());
  }
}

}  // namespace idf
