#pragma once

// The map: one MLP from positional-encoded position (and view direction) to a
// truncated signed distance in meters and an RGB color in [0,1].
//
//   enc(p) -> hidden.0 .. hidden.7 (ReLU, width 256; hidden.5 also sees enc(p))
//          -> sdf_head (linear, 1)
//          -> [h7 | enc(d)] -> color_head (sigmoid, 3)
//
// The view direction only reaches the color head, so the T-SDF is view
// independent.

#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "idf/autodiff.hpp"
#include "idf/checkpoint.hpp"
#include "idf/geometry.hpp"

namespace idf {

struct PositionalEncoding {
  int num_freqs = 0;
  bool include_input = true;

  int output_dim(int input_dim) const { return input_dim * (2 * num_freqs + (include_input ? 1 : 0)); }
};

// Layout: [x | sin(pi x) | cos(pi x) | sin(2 pi x) | cos(2 pi x) | ...], each
// block holding every input component.
inline std::vector<double> encode(std::span<const double> x, const PositionalEncoding& enc) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(enc.output_dim(static_cast<int>(x.size()))));
  if (enc.include_input) out.insert(out.end(), x.begin(), x.end());
  double freq = std::numbers::pi;
  for (int k = 0; k < enc.num_freqs; ++k, freq *= 2) {
    for (double v : x) out.push_back(std::sin(freq * v));
    for (double v : x) out.push_back(std::cos(freq * v));
  }
  return out;
}

namespace ad {

template <class S>
Tensor<S> positional_encoding(const Tensor<S>& x, const PositionalEncoding& enc) {
  const Index n = x.rows(), d = x.cols();
  Mat<S> out(n, enc.output_dim(static_cast<int>(d)));
  Index col = 0;
  if (enc.include_input) {
    out.leftCols(d) = x.value();
    col = d;
  }
  S freq = std::numbers::pi_v<S>;
  for (int k = 0; k < enc.num_freqs; ++k, freq *= 2) {
    out.middleCols(col, d) = (x.value().array() * freq).sin().matrix();
    out.middleCols(col + d, d) = (x.value().array() * freq).cos().matrix();
    col += 2 * d;
  }
  auto* xn = x.raw();
  Mat<S> y = out;
  return make_op<S>(std::move(out), {x}, [xn, enc, d, y = std::move(y)](const Mat<S>& g) {
    Mat<S> gx = Mat<S>::Zero(xn->value.rows(), d);
    Index c = 0;
    if (enc.include_input) {
      gx += g.leftCols(d);
      c = d;
    }
    S f = std::numbers::pi_v<S>;
    for (int k = 0; k < enc.num_freqs; ++k, f *= 2) {
      // d sin(fx) = f cos(fx), d cos(fx) = -f sin(fx)
      gx.array() += f * (g.middleCols(c, d).array() * y.middleCols(c + d, d).array() -
                         g.middleCols(c + d, d).array() * y.middleCols(c, d).array());
      c += 2 * d;
    }
    xn->accumulate(gx);
  });
}

}  // namespace ad

// Axis-aligned box used to normalize world coordinates into [-1,1]^3.
struct SceneBounds {
  Vec3 min = Vec3::Constant(-1);
  Vec3 max = Vec3::Constant(1);

  Vec3 center() const { return 0.5 * (min + max); }
  Vec3 half_extent() const { return 0.5 * (max - min); }
  bool contains(const Vec3& p) const {
    return (p.array() >= min.array()).all() && (p.array() <= max.array()).all();
  }
};

struct MapOptions {
  int pos_freqs = 10;
  int dir_freqs = 4;
  SceneBounds bounds;
};

template <class S>
struct Linear {
  ad::Tensor<S> weight;  // in x out
  ad::Tensor<S> bias;    // 1 x out
};

template <class S>
class ImplicitMap {
 public:
  static constexpr int kHiddenLayers = 8;
  static constexpr int kWidth = 256;
  static constexpr int kSkipLayer = 5;

  struct Output {
    ad::Tensor<S> sdf;  // N x 1, meters
    ad::Tensor<S> rgb;  // N x 3, in [0,1]
  };

  ImplicitMap(const MapOptions& opt, std::uint64_t seed) : opt_(opt) {
    std::mt19937_64 rng(seed);
    const int pos_dim = pos_encoding().output_dim(3);
    const int dir_dim = dir_encoding().output_dim(3);
    for (int i = 0; i < kHiddenLayers; ++i) {
      int in = kWidth;
      if (i == 0) in = pos_dim;
      if (i == kSkipLayer) in = kWidth + pos_dim;
      hidden_.push_back(make_layer(in, kWidth, std::sqrt(6.0 / in), rng));
    }
    sdf_head_ = make_layer(kWidth, 1, std::sqrt(3.0 / kWidth), rng);
    color_head_ = make_layer(kWidth + dir_dim, 3, std::sqrt(3.0 / (kWidth + dir_dim)), rng);
  }

  ImplicitMap(const ImplicitMap& o) : opt_(o.opt_) {
    for (const auto& l : o.hidden_) hidden_.push_back(copy_layer(l));
    sdf_head_ = copy_layer(o.sdf_head_);
    color_head_ = copy_layer(o.color_head_);
  }
  ImplicitMap& operator=(const ImplicitMap& o) {
    if (this != &o) *this = ImplicitMap(o);
    return *this;
  }
  ImplicitMap(ImplicitMap&&) noexcept = default;
  ImplicitMap& operator=(ImplicitMap&&) noexcept = default;

  const MapOptions& options() const { return opt_; }
  PositionalEncoding pos_encoding() const { return {opt_.pos_freqs, true}; }
  PositionalEncoding dir_encoding() const { return {opt_.dir_freqs, true}; }

  // points, dirs: N x 3 world-frame rows. Pure with respect to the map.
  Output forward(const ad::Tensor<S>& points, const ad::Tensor<S>& dirs) const {
    require(points.cols() == 3 && dirs.cols() == 3 && points.rows() == dirs.rows(),
            "ImplicitMap::forward: expects matching N x 3 points and directions");
    check_inputs(points.value(), dirs.value());
    ad::Tensor<S> h = trunk(points);
    Output out;
    out.sdf = ad::linear(h, sdf_head_.weight, sdf_head_.bias);
    auto denc = ad::positional_encoding(dirs, dir_encoding());
    out.rgb = ad::sigmoid(ad::linear(ad::concat_cols<S>({h, denc}), color_head_.weight, color_head_.bias));
    return out;
  }

  // Direction-dependent color is skipped; used for meshing and diagnostics.
  Mat<S> sdf_values(const Mat<S>& points) const {
    require(points.cols() == 3, "sdf_values: expects N x 3 points");
    require(points.allFinite(), "sdf_values: non-finite input");
    auto h = trunk(ad::Tensor<S>::constant(points));
    return ad::linear(h, sdf_head_.weight, sdf_head_.bias).value();
  }

  struct PointQuery {
    double sdf;
    Vec3 rgb;
  };

  PointQuery query(const Vec3& p, const Vec3& d) const {
    require(p.allFinite() && d.allFinite(), "query: non-finite input");
    require(std::abs(d.norm() - 1.0) <= 1e-6, "query: view direction must have unit norm");
    Mat<S> pm(1, 3), dm(1, 3);
    pm << S(p.x()), S(p.y()), S(p.z());
    dm << S(d.x()), S(d.y()), S(d.z());
    auto out = forward(ad::Tensor<S>::constant(pm), ad::Tensor<S>::constant(dm));
    return {double(out.sdf.value()(0, 0)),
            Vec3(out.rgb.value()(0, 0), out.rgb.value()(0, 1), out.rgb.value()(0, 2))};
  }

  std::vector<std::pair<std::string, ad::Tensor<S>>> named_parameters() const {
    std::vector<std::pair<std::string, ad::Tensor<S>>> out;
    auto push = [&](const std::string& name, const Linear<S>& l) {
      out.emplace_back(name + ".weight", l.weight);
      out.emplace_back(name + ".bias", l.bias);
    };
    for (int i = 0; i < kHiddenLayers; ++i) push("hidden." + std::to_string(i), hidden_[i]);
    push("sdf_head", sdf_head_);
    push("color_head", color_head_);
    return out;
  }

  std::vector<ad::Tensor<S>> parameters() const {
    std::vector<ad::Tensor<S>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  // Freezing removes the parameters from every graph built afterwards.
  void set_trainable(bool on) {
    for (auto& p : parameters()) {
      p.set_requires_grad(on);
      if (!on) p.zero_grad();
    }
  }

  std::uint64_t checksum() const {
    Checksum c;
    for (auto& p : parameters()) c.add(p.value());
    return c.value();
  }

  std::vector<NamedTensor> state() const {
    std::vector<NamedTensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(to_named(name, t.value()));
    return out;
  }

  void load_state(const std::vector<NamedTensor>& tensors) {
    auto params = named_parameters();
    require(tensors.size() == params.size(), "load_state: tensor count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      require(tensors[i].name == params[i].first, "load_state: unexpected tensor name");
      Mat<S> m = from_named<S>(tensors[i]);
      require(m.rows() == params[i].second.rows() && m.cols() == params[i].second.cols(),
              "load_state: tensor shape mismatch");
      params[i].second.mutable_value() = std::move(m);
    }
  }

  template <class T>
  ImplicitMap<T> cast() const {
    ImplicitMap<T> out(opt_, 0);
    auto src = named_parameters();
    auto dst = out.named_parameters();
    for (std::size_t i = 0; i < src.size(); ++i)
      dst[i].second.mutable_value() = src[i].second.value().template cast<T>();
    return out;
  }

 private:
  using Index = Eigen::Index;

  ad::Tensor<S> trunk(const ad::Tensor<S>& points) const {
    const Vec3 c = opt_.bounds.center();
    const Vec3 h = opt_.bounds.half_extent();
    Mat<S> shift(1, 3), inv(3, 3);
    shift << S(-c.x()), S(-c.y()), S(-c.z());
    inv.setZero();
    for (int k = 0; k < 3; ++k) inv(k, k) = S(1.0 / h(k));
    auto normalized = ad::matmul(ad::add_row(points, ad::Tensor<S>::constant(shift)),
                                 ad::Tensor<S>::constant(inv));
    auto enc = ad::positional_encoding(normalized, pos_encoding());
    ad::Tensor<S> x = enc;
    for (int i = 0; i < kHiddenLayers; ++i) {
      if (i == kSkipLayer) x = ad::concat_cols<S>({x, enc});
      x = ad::relu(ad::linear(x, hidden_[i].weight, hidden_[i].bias));
    }
    return x;
  }

  static void check_inputs(const Mat<S>& points, const Mat<S>& dirs) {
    require(points.allFinite() && dirs.allFinite(), "ImplicitMap: non-finite input");
    const double tol = std::max(1e-6, 16.0 * double(std::numeric_limits<S>::epsilon()));
    for (Index r = 0; r < dirs.rows(); ++r)
      require(std::abs(double(dirs.row(r).norm()) - 1.0) <= tol,
              "ImplicitMap: view directions must have unit norm");
  }

  static Linear<S> make_layer(int in, int out, double bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-bound, bound);
    Mat<S> w(in, out);
    for (Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<S>(u(rng));
    return {ad::Tensor<S>::parameter(std::move(w)), ad::Tensor<S>::parameter(Mat<S>::Zero(1, out))};
  }

  static Linear<S> copy_layer(const Linear<S>& l) {
    auto w = ad::Tensor<S>::parameter(l.weight.value());
    auto b = ad::Tensor<S>::parameter(l.bias.value());
    w.set_requires_grad(l.weight.requires_grad());
    b.set_requires_grad(l.bias.requires_grad());
    return {w, b};
  }

  MapOptions opt_;
  std::vector<Linear<S>> hidden_;
  Linear<S> sdf_head_;
  Linear<S> color_head_;
};

}  // namespace idf
