// idf-slam: run the RGB-D mapping and tracking pipeline on a dataset, and
// evaluate or generate datasets.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "idf/checkpoint.hpp"
#include "idf/config.hpp"
#include "idf/eval/dataset.hpp"
#include "idf/eval/mesh.hpp"
#include "idf/eval/metrics.hpp"
#include "idf/eval/recon.hpp"
#include "idf/eval/synthetic.hpp"
#include "idf/slam.hpp"

namespace fs = std::filesystem;
using namespace idf;
using json = nlohmann::json;

namespace {

struct RunArgs {
  std::string dataset, config, out;
  bool render_keyframes = false;
  bool mesh = false;
  double mesh_resolution = 0.04;
  double tau = 0.05;
  int eval_samples = 20000;
  int max_frames = 0;
  std::optional<std::uint64_t> seed;
  bool verbose = false;
};

std::vector<eval::StampedPose> stamped(const std::vector<TrajectoryEntry>& t) {
  std::vector<eval::StampedPose> out;
  for (const auto& e : t) out.push_back({e.timestamp, e.pose});
  return out;
}

void write_keyframe_images(const SlamSystem& slam, const fs::path& dir) {
  fs::create_directories(dir);
  const auto& cfg = slam.config();
  for (const auto* kf : slam.store().keyframes()) {
    Image rgb, depth;
    render_frame(slam.map(), kf->frame, kf->pose, cfg.samples_per_ray, cfg.truncation, cfg.near, cfg.far_plane(),
                 cfg.seed + std::uint64_t(kf->id), rgb, depth);
    std::ostringstream stem;
    stem << std::setw(6) << std::setfill('0') << kf->id;
    eval::PngImage c{rgb.width, rgb.height, 3, 8, {}};
    for (float v : rgb.data) c.data.push_back(std::uint16_t(std::lround(std::clamp(v, 0.f, 1.f) * 255.0)));
    eval::write_png((dir / (stem.str() + "_rgb.png")).string(), c);
    eval::PngImage d{depth.width, depth.height, 1, 16, {}};
    for (float v : depth.data) d.data.push_back(eval::quantize_depth(v, 1000.0));  // millimeters
    eval::write_png((dir / (stem.str() + "_depth.png")).string(), d);
  }
}

int run(const RunArgs& a) {
  using clk = std::chrono::steady_clock;
  const auto t0 = clk::now();
  SystemConfig cfg = load_config(a.config);
  if (a.seed) cfg.seed = *a.seed;
  const eval::Dataset ds(a.dataset);
  const std::size_t n = a.max_frames > 0 ? std::min<std::size_t>(std::size_t(a.max_frames), ds.size()) : ds.size();
  if (n == 0) throw LoadError(a.dataset + ": no frames");
  const fs::path out(a.out);
  fs::create_directories(out);

  SlamSystem slam(cfg);
  std::ofstream losses(out / "losses.csv");
  losses << "iteration,L_p,L_fs,L_tr,total\n";
  slam.set_loss_logger([&](const LossRecord& r) {
    losses << r.iteration << ',' << r.l_p << ',' << r.l_fs << ',' << r.l_tr << ',' << r.total << '\n';
  });

  std::vector<Frame> frames;
  frames.push_back(ds.frame(0));
  slam.initialize(frames[0]);
  int events = 0, culled = 0, lost = 0, pose_failures = 0;
  for (std::size_t i = 1; i < n; ++i) {
    frames.push_back(ds.frame(i));
    const FrameReport r = slam.process_frame(frames.back());
    events += r.keyframe_event;
    culled += r.culled;
    lost += r.lost;
    pose_failures += r.pose_opt_failed;
    if (a.verbose && (r.keyframe_event || r.lost))
      std::cerr << "frame " << i << (r.inserted ? " keyframe" : r.culled ? " culled" : " skipped")
                << (r.lost ? " lost" : "") << " residual " << r.track_residual << " covis " << r.cull_score << '\n';
  }
  const double slam_seconds = std::chrono::duration<double>(clk::now() - t0).count();

  eval::save_tum_trajectory((out / "trajectory.txt").string(), stamped(slam.trajectory()));
  {
    std::ofstream os(out / "keyframes.jsonl");
    slam.store().dump_jsonl(os);
  }
  save_checkpoint((out / "map.ckpt").string(), slam.map().state());
  if (a.render_keyframes) write_keyframe_images(slam, out / "keyframes");

  json m;
  m["frames"] = n;
  m["keyframe_events"] = events;
  m["keyframes_stored"] = slam.store().size();
  m["keyframes_culled"] = culled;
  m["tracking_lost"] = lost;
  m["pose_opt_failures"] = pose_failures;
  m["phase_violations"] = slam.audit().violations;
  m["slam_seconds"] = slam_seconds;

  const auto gt = ds.ground_truth();
  std::optional<eval::AteResult> ate;
  if (!gt.empty()) {
    try {
      ate = eval::ate(stamped(slam.trajectory()), gt);
      m["ate"] = {{"rmse", ate->rmse}, {"mean", ate->mean}, {"median", ate->median}, {"associated", ate->associated}};
    } catch (const MetricError& e) {
      m["ate_error"] = e.what();
    }
  }

  if (a.mesh) {
    eval::Mesh mesh = eval::extract_mesh(slam.map(), cfg.map.bounds, a.mesh_resolution);
    for (const auto& w : mesh.warnings) std::cerr << "warning: " << w << '\n';
    eval::save_ply((out / "mesh.ply").string(), mesh);
    m["mesh_vertices"] = mesh.vertices.size();
    m["mesh_faces"] = mesh.faces.size();
    if (ate && !mesh.empty()) {
      // ground-truth surface from the recorded depth at the ground-truth poses
      const auto pairs = eval::associate(stamped(slam.trajectory()), gt);
      std::vector<Frame> obs;
      std::vector<PoseSE3> poses;
      for (auto [i, j] : pairs) {
        obs.push_back(frames[i]);
        poses.push_back(gt[j].pose);
      }
      std::mt19937_64 rng(cfg.seed);
      const auto ev = eval::evaluate_reconstruction(eval::transformed(mesh, ate->alignment), obs, poses, a.tau,
                                                    a.eval_samples, rng);
      m["recon"] = {{"accuracy", ev.metrics.accuracy},
                    {"completion", ev.metrics.completion},
                    {"completion_ratio", ev.metrics.completion_ratio},
                    {"tau", a.tau}};
    }
  }
  m["total_seconds"] = std::chrono::duration<double>(clk::now() - t0).count();
  std::ofstream(out / "metrics.json") << m.dump(2) << '\n';
  std::cout << m.dump(2) << '\n';
  for (const auto& l : slam.audit().log) std::cerr << "audit: " << l << '\n';
  return 0;
}

int eval_ate(const std::string& est_path, const std::string& gt_path, double max_dt) {
  const auto r = eval::ate(eval::load_tum_trajectory(est_path), eval::load_tum_trajectory(gt_path), max_dt);
  std::cout << json{{"rmse", r.rmse}, {"mean", r.mean}, {"median", r.median}, {"associated", r.associated}}.dump(2)
            << '\n';
  return 0;
}

int eval_recon(const std::string& mesh_path, const std::string& dataset, const std::string& traj_path, double tau,
               int samples, std::uint64_t seed) {
  const eval::Dataset ds(dataset);
  const auto gt = ds.ground_truth();
  if (gt.empty()) throw LoadError(dataset + ": groundtruth.txt required for reconstruction metrics");
  eval::Mesh mesh = eval::load_ply(mesh_path);
  if (!traj_path.empty()) {
    // mesh lives in the estimate's frame: bring it into the ground-truth frame
    mesh = eval::transformed(mesh, eval::ate(eval::load_tum_trajectory(traj_path), gt).alignment);
  }
  std::vector<Frame> frames;
  std::vector<PoseSE3> poses;
  std::vector<eval::StampedPose> stamps;
  for (std::size_t i = 0; i < ds.size(); ++i) stamps.push_back({ds.entries()[i].timestamp, PoseSE3::identity()});
  for (auto [i, j] : eval::associate(stamps, gt)) {
    frames.push_back(ds.frame(i));
    poses.push_back(gt[j].pose);
  }
  std::mt19937_64 rng(seed);
  const auto ev = eval::evaluate_reconstruction(mesh, frames, poses, tau, samples, rng);
  std::cout << json{{"accuracy", ev.metrics.accuracy},
                    {"completion", ev.metrics.completion},
                    {"completion_ratio", ev.metrics.completion_ratio},
                    {"tau", tau},
                    {"gt_points", ev.gt_points},
                    {"pred_points", ev.pred_points}}
                   .dump(2)
            << '\n';
  return 0;
}

int make_synthetic(const std::string& out, int frames, int width, int height, std::uint64_t seed,
                   double depth_scale) {
  eval::SyntheticScene scene;
  const auto seq = eval::make_room_sequence(seed, frames, width, height, &scene);
  eval::write_dataset(out, seq.frames, seq.ground_truth, depth_scale);
  SystemConfig cfg;
  cfg.map.bounds = scene.bounds();
  cfg.seed = seed;
  std::ofstream(fs::path(out) / "config.json") << config_to_json(cfg).dump(2) << '\n';
  std::cout << "wrote " << frames << " frames to " << out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural implicit RGB-D SLAM"};
  app.require_subcommand(1);

  RunArgs ra;
  std::uint64_t seed_value = 0;
  auto* run_cmd = app.add_subcommand("run", "track and map a dataset");
  run_cmd->add_option("--dataset", ra.dataset, "dataset directory")->required()->check(CLI::ExistingDirectory);
  run_cmd->add_option("--config", ra.config, "JSON configuration")->required()->check(CLI::ExistingFile);
  run_cmd->add_option("--out", ra.out, "output directory")->required();
  run_cmd->add_flag("--render-keyframes", ra.render_keyframes, "write rendered RGB and depth per keyframe");
  run_cmd->add_flag("--mesh", ra.mesh, "extract mesh.ply from the map");
  run_cmd->add_option("--mesh-resolution", ra.mesh_resolution, "mesh grid step, meters");
  run_cmd->add_option("--tau", ra.tau, "completion-ratio threshold, meters");
  run_cmd->add_option("--frames", ra.max_frames, "process at most this many frames");
  auto* seed_opt = run_cmd->add_option("--seed", seed_value, "override the configured seed");
  run_cmd->add_flag("--verbose", ra.verbose, "log keyframe events");

  std::string est, gt;
  double max_dt = 0.01;
  auto* ate_cmd = app.add_subcommand("eval-ate", "absolute trajectory error of TUM trajectories");
  ate_cmd->add_option("--estimated", est)->required()->check(CLI::ExistingFile);
  ate_cmd->add_option("--groundtruth", gt)->required()->check(CLI::ExistingFile);
  ate_cmd->add_option("--max-dt", max_dt, "association window, seconds");

  std::string mesh_path, recon_dataset, recon_traj;
  double tau = 0.05;
  int samples = 20000;
  std::uint64_t recon_seed = 0;
  auto* recon_cmd = app.add_subcommand("eval-recon", "accuracy, completion and completion ratio of a mesh");
  recon_cmd->add_option("--mesh", mesh_path)->required()->check(CLI::ExistingFile);
  recon_cmd->add_option("--dataset", recon_dataset)->required()->check(CLI::ExistingDirectory);
  recon_cmd->add_option("--trajectory", recon_traj, "estimated trajectory used to align the mesh");
  recon_cmd->add_option("--tau", tau);
  recon_cmd->add_option("--samples", samples);
  recon_cmd->add_option("--seed", recon_seed);

  std::string syn_out;
  int syn_frames = 100, syn_w = 80, syn_h = 60;
  std::uint64_t syn_seed = 1;
  double depth_scale = 5000;
  auto* syn_cmd = app.add_subcommand("make-synthetic", "render a synthetic room sequence");
  syn_cmd->add_option("--out", syn_out)->required();
  syn_cmd->add_option("--frames", syn_frames)->check(CLI::PositiveNumber);
  syn_cmd->add_option("--width", syn_w)->check(CLI::PositiveNumber);
  syn_cmd->add_option("--height", syn_h)->check(CLI::PositiveNumber);
  syn_cmd->add_option("--seed", syn_seed);
  syn_cmd->add_option("--depth-scale", depth_scale)->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*run_cmd) {
      if (*seed_opt) ra.seed = seed_value;
      return run(ra);
    }
    if (*ate_cmd) return eval_ate(est, gt, max_dt);
    if (*recon_cmd) return eval_recon(mesh_path, recon_dataset, recon_traj, tau, samples, recon_seed);
    if (*syn_cmd) return make_synthetic(syn_out, syn_frames, syn_w, syn_h, syn_seed, depth_scale);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
