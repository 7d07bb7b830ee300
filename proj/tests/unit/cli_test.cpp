#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include <json.hpp>

#include "idf/config.hpp"
#include "idf/eval/png_io.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

int run_cli(const std::string& args, std::string* out = nullptr) {
  const fs::path log = fs::temp_directory_path() / ("idf_cli_" + std::to_string(::getpid()) + ".log");
  const std::string cmd = std::string(IDF_SLAM_BIN) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  if (out) {
    std::ifstream is(log);
    std::stringstream ss;
    ss << is.rdbuf();
    *out = ss.str();
  }
  fs::remove(log);
  return WEXITSTATUS(status);
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::ifstream is(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(is, l);)
    if (!l.empty()) out.push_back(l);
  return out;
}

// One small synthetic dataset and one run over it, shared by all tests.
class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("idf_cli_suite_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    ASSERT_EQ(run_cli("make-synthetic --out " + data() + " --frames 8 --width 32 --height 24 --seed 3"), 0);
    idf::SystemConfig cfg = idf::load_config((root_ / "data" / "config.json").string());
    cfg.batch_rays = 96;
    cfg.samples_per_ray = 8;
    cfg.pose_batch_rays = 64;
    cfg.n_init_iters = 10;
    cfg.n_map_iters = 2;
    cfg.n_pose_iters = 2;
    cfg.trunk_channels = 8;
    cfg.feature_dim = 8;
    cfg.map.pos_freqs = 3;
    cfg.map.dir_freqs = 2;
    std::ofstream(root_ / "tiny.json") << idf::config_to_json(cfg).dump(2);
    status_ = run_cli("run --dataset " + data() + " --config " + (root_ / "tiny.json").string() + " --out " + out() +
                          " --mesh --mesh-resolution 0.2 --render-keyframes --seed 5",
                      &log_);
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static std::string data() { return (root_ / "data").string(); }
  static std::string out() { return (root_ / "out").string(); }

  static fs::path root_;
  static int status_;
  static std::string log_;
};
fs::path Cli::root_;
int Cli::status_ = -1;
std::string Cli::log_;

}  // namespace

TEST_F(Cli, MakeSyntheticWritesADataset) {
  for (const char* f : {"intrinsics.txt", "associations.txt", "groundtruth.txt", "config.json"})
    EXPECT_TRUE(fs::exists(root_ / "data" / f)) << f;
  EXPECT_EQ(lines_of(root_ / "data" / "associations.txt").size(), 8u);
  EXPECT_TRUE(fs::exists(root_ / "data" / "depth" / "000007.png"));
}

TEST_F(Cli, RunWritesEveryOutput) {
  ASSERT_EQ(status_, 0) << log_;
  for (const char* f : {"trajectory.txt", "keyframes.jsonl", "map.ckpt", "mesh.ply", "losses.csv", "metrics.json"})
    EXPECT_TRUE(fs::exists(fs::path(out()) / f)) << f;
  EXPECT_EQ(lines_of(fs::path(out()) / "trajectory.txt").size(), 8u);
  const auto losses = lines_of(fs::path(out()) / "losses.csv");
  ASSERT_GT(losses.size(), 10u);
  EXPECT_EQ(losses[0], "iteration,L_p,L_fs,L_tr,total");
  EXPECT_EQ(losses[1].substr(0, 2), "0,");
  const json m = json::parse(std::ifstream(fs::path(out()) / "metrics.json"));
  EXPECT_EQ(m["frames"].get<int>(), 8);
  EXPECT_EQ(m["phase_violations"].get<int>(), 0);
  EXPECT_TRUE(m.contains("ate"));
  EXPECT_EQ(lines_of(fs::path(out()) / "keyframes.jsonl").size(), m["keyframes_stored"].get<std::size_t>());
}

TEST_F(Cli, RenderedKeyframesAreColorAndMillimeterDepth) {
  ASSERT_EQ(status_, 0) << log_;
  const auto rgb = idf::eval::read_png((fs::path(out()) / "keyframes" / "000000_rgb.png").string());
  const auto depth = idf::eval::read_png((fs::path(out()) / "keyframes" / "000000_depth.png").string());
  EXPECT_EQ(rgb.channels, 3);
  EXPECT_EQ(rgb.width, 32);
  EXPECT_EQ(depth.channels, 1);
  EXPECT_EQ(depth.bit_depth, 16);
  EXPECT_EQ(depth.height, 24);
}

TEST_F(Cli, EvaluationSubcommands) {
  ASSERT_EQ(status_, 0) << log_;
  std::string text;
  ASSERT_EQ(run_cli("eval-ate --estimated " + out() + "/trajectory.txt --groundtruth " + data() + "/groundtruth.txt",
                    &text),
            0)
      << text;
  EXPECT_GE(json::parse(text)["rmse"].get<double>(), 0.0);
  EXPECT_EQ(run_cli("eval-ate --estimated " + data() + "/groundtruth.txt --groundtruth " + data() +
                        "/groundtruth.txt",
                    &text),
            0);
  EXPECT_LT(json::parse(text)["rmse"].get<double>(), 1e-6);

  const int rc = run_cli("eval-recon --mesh " + out() + "/mesh.ply --dataset " + data() + " --trajectory " + out() +
                             "/trajectory.txt --samples 2000",
                         &text);
  // an untrained tiny map may not intersect the observed region at all
  if (rc == 0) {
    const json r = json::parse(text);
    EXPECT_GE(r["completion_ratio"].get<double>(), 0.0);
    EXPECT_LE(r["completion_ratio"].get<double>(), 100.0);
  } else {
    EXPECT_NE(text.find("error:"), std::string::npos) << text;
  }
}

TEST_F(Cli, BadInvocationsFail) {
  EXPECT_NE(run_cli(""), 0);
  EXPECT_NE(run_cli("run --dataset /nonexistent --config /nonexistent --out /tmp/x"), 0);
  std::string text;
  EXPECT_NE(run_cli("eval-ate --estimated " + data() + "/intrinsics.txt --groundtruth " + data() + "/groundtruth.txt",
                    &text),
            0);
  EXPECT_NE(text.find("error:"), std::string::npos);
}
