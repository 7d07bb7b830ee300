#pragma once

// RGB-D sequences on disk in the TUM association layout:
//
//   intrinsics.txt    fx fy cx cy width height depth_scale
//   associations.txt  t_rgb rgb/xxx.png t_depth depth/xxx.png   (one per frame)
//   groundtruth.txt   optional, TUM trajectory
//
// Depth PNGs are 16-bit; meters = value / depth_scale.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "idf/eval/metrics.hpp"
#include "idf/eval/png_io.hpp"
#include "idf/eval/synthetic.hpp"
#include "idf/frame.hpp"

namespace idf::eval {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// TUM trajectories: timestamp tx ty tz qx qy qz qw

inline void write_tum_trajectory(std::ostream& os, const std::vector<StampedPose>& traj) {
  os << std::setprecision(9);
  for (const auto& s : traj) {
    const Eigen::Quaterniond q(s.pose.R);
    os << std::fixed << std::setprecision(6) << s.timestamp << std::setprecision(9) << ' ' << s.pose.t.x() << ' '
       << s.pose.t.y() << ' ' << s.pose.t.z() << ' ' << q.x() << ' ' << q.y() << ' ' << q.z() << ' ' << q.w()
       << '\n';
  }
}

inline void save_tum_trajectory(const std::string& path, const std::vector<StampedPose>& traj) {
  std::ofstream os(path);
  if (!os) throw LoadError("cannot write " + path);
  write_tum_trajectory(os, traj);
}

inline std::vector<StampedPose> read_tum_trajectory(std::istream& is, const std::string& name = "trajectory") {
  std::vector<StampedPose> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    double t, x, y, z, qx, qy, qz, qw;
    if (!(ss >> t >> x >> y >> z >> qx >> qy >> qz >> qw))
      throw LoadError(name + ":" + std::to_string(lineno) + ": expected 8 numbers");
    StampedPose s;
    s.timestamp = t;
    s.pose.R = Eigen::Quaterniond(qw, qx, qy, qz).normalized().toRotationMatrix();
    s.pose.t = Vec3(x, y, z);
    out.push_back(s);
  }
  return out;
}

inline std::vector<StampedPose> load_tum_trajectory(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw LoadError("cannot open " + path);
  return read_tum_trajectory(is, path);
}

// ---------------------------------------------------------------------------
// Datasets

struct DatasetEntry {
  double timestamp = 0;  // color timestamp
  std::string rgb;
  std::string depth;
};

class Dataset {
 public:
  explicit Dataset(const std::string& dir) : dir_(dir) {
    const auto ipath = (fs::path(dir) / "intrinsics.txt").string();
    std::ifstream is(ipath);
    if (!is) throw LoadError("missing " + ipath);
    if (!(is >> intr_.fx >> intr_.fy >> intr_.cx >> intr_.cy >> intr_.width >> intr_.height >> depth_scale_))
      throw LoadError(ipath + ": expected fx fy cx cy width height depth_scale");
    if (!(intr_.fx > 0 && intr_.fy > 0 && intr_.width > 0 && intr_.height > 0 && depth_scale_ > 0))
      throw LoadError(ipath + ": values out of range");

    const auto apath = (fs::path(dir) / "associations.txt").string();
    std::ifstream as(apath);
    if (!as) throw LoadError("missing " + apath);
    std::string line;
    int lineno = 0;
    while (std::getline(as, line)) {
      ++lineno;
      if (line.empty() || line[0] == '#') continue;
      std::istringstream ss(line);
      DatasetEntry e;
      double td;
      if (!(ss >> e.timestamp >> e.rgb >> td >> e.depth))
        throw LoadError(apath + ":" + std::to_string(lineno) + ": expected t_rgb rgb t_depth depth");
      entries_.push_back(e);
    }
    std::stable_sort(entries_.begin(), entries_.end(),
                     [](const DatasetEntry& a, const DatasetEntry& b) { return a.timestamp < b.timestamp; });
  }

  std::size_t size() const { return entries_.size(); }
  const Intrinsics& intrinsics() const { return intr_; }
  double depth_scale() const { return depth_scale_; }
  const std::vector<DatasetEntry>& entries() const { return entries_; }

  Frame frame(std::size_t i) const {
    require(i < entries_.size(), "dataset: frame index out of range");
    const auto& e = entries_[i];
    Frame f;
    f.intrinsics = intr_;
    f.timestamp = e.timestamp;
    const auto rgb_path = (fs::path(dir_) / e.rgb).string();
    const auto depth_path = (fs::path(dir_) / e.depth).string();
    const PngImage rgb = read_png(rgb_path);
    if (rgb.width != intr_.width || rgb.height != intr_.height || rgb.channels != 3)
      throw LoadError(rgb_path + ": expected " + std::to_string(intr_.width) + "x" + std::to_string(intr_.height) +
                      " RGB image");
    const PngImage depth = read_png(depth_path);
    if (depth.width != intr_.width || depth.height != intr_.height || depth.channels != 1)
      throw LoadError(depth_path + ": expected " + std::to_string(intr_.width) + "x" + std::to_string(intr_.height) +
                      " single-channel depth");
    const double color_max = rgb.bit_depth == 16 ? 65535.0 : 255.0;
    f.rgb = Image(intr_.width, intr_.height, 3);
    for (std::size_t k = 0; k < rgb.data.size(); ++k) f.rgb.data[k] = float(rgb.data[k] / color_max);
    f.depth = Image(intr_.width, intr_.height, 1);
    for (std::size_t k = 0; k < depth.data.size(); ++k) f.depth.data[k] = float(depth.data[k] / depth_scale_);
    return f;
  }

  // Ground truth if groundtruth.txt exists, else empty.
  std::vector<StampedPose> ground_truth() const {
    const auto p = fs::path(dir_) / "groundtruth.txt";
    if (!fs::exists(p)) return {};
    return load_tum_trajectory(p.string());
  }

 private:
  std::string dir_;
  Intrinsics intr_;
  double depth_scale_ = 5000;
  std::vector<DatasetEntry> entries_;
};

inline std::uint16_t quantize_depth(double meters, double depth_scale) {
  if (!(meters > 0)) return 0;
  return static_cast<std::uint16_t>(std::clamp(std::lround(meters * depth_scale), 0l, 65535l));
}

// Writes frames, intrinsics, associations and (if given) ground truth.
inline void write_dataset(const std::string& dir, const std::vector<Frame>& frames,
                          const std::vector<PoseSE3>& ground_truth = {}, double depth_scale = 5000) {
  require(!frames.empty(), "write_dataset: no frames");
  require(ground_truth.empty() || ground_truth.size() == frames.size(), "write_dataset: ground truth size");
  fs::create_directories(fs::path(dir) / "rgb");
  fs::create_directories(fs::path(dir) / "depth");
  const Intrinsics& K = frames.front().intrinsics;
  {
    std::ofstream os(fs::path(dir) / "intrinsics.txt");
    os << std::setprecision(12) << K.fx << ' ' << K.fy << ' ' << K.cx << ' ' << K.cy << ' ' << K.width << ' '
       << K.height << ' ' << depth_scale << '\n';
  }
  std::ofstream as(fs::path(dir) / "associations.txt");
  as << std::fixed << std::setprecision(6);
  std::vector<StampedPose> gt;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const Frame& f = frames[i];
    f.validate();
    std::ostringstream name;
    name << std::setw(6) << std::setfill('0') << i << ".png";
    PngImage rgb{K.width, K.height, 3, 8, {}};
    rgb.data.resize(f.rgb.data.size());
    for (std::size_t k = 0; k < rgb.data.size(); ++k)
      rgb.data[k] = static_cast<std::uint16_t>(std::lround(std::clamp(f.rgb.data[k], 0.f, 1.f) * 255.0));
    write_png((fs::path(dir) / "rgb" / name.str()).string(), rgb);
    PngImage depth{K.width, K.height, 1, 16, {}};
    depth.data.resize(f.depth.data.size());
    for (std::size_t k = 0; k < depth.data.size(); ++k) depth.data[k] = quantize_depth(f.depth.data[k], depth_scale);
    write_png((fs::path(dir) / "depth" / name.str()).string(), depth);
    as << f.timestamp << " rgb/" << name.str() << ' ' << f.timestamp << " depth/" << name.str() << '\n';
    if (!ground_truth.empty()) gt.push_back({f.timestamp, ground_truth[i]});
  }
  if (!gt.empty()) save_tum_trajectory((fs::path(dir) / "groundtruth.txt").string(), gt);
}

}  // namespace idf::eval
