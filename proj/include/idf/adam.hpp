#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "idf/autodiff.hpp"

namespace idf::ad {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double decay_factor = 1.0;  // in (0, 1]
  int decay_every = 0;        // 0 disables the step schedule
};

template <class S>
struct AdamState {
  AdamOptions opt;
  long step_count = 0;
  std::vector<Mat<S>> first_moment;
  std::vector<Mat<S>> second_moment;

  AdamState() = default;
  explicit AdamState(AdamOptions o) : opt(o) {
    require(opt.lr > 0, "Adam: lr must be positive");
    require(opt.decay_factor > 0 && opt.decay_factor <= 1, "Adam: decay_factor must be in (0,1]");
    require(opt.decay_every >= 0, "Adam: decay_every must be >= 0");
  }

  // lr * decay_factor^floor(step_count / decay_every)
  double effective_lr() const {
    if (opt.decay_every <= 0) return opt.lr;
    return opt.lr * std::pow(opt.decay_factor, static_cast<double>(step_count / opt.decay_every));
  }
};

// One bias-corrected Adam update at the state's effective learning rate.
// Moments are allocated lazily on the first call.
template <class S>
void adam_step(std::span<Mat<S>* const> params, std::span<const Mat<S>* const> grads,
               AdamState<S>& state) {
  require(params.size() == grads.size(), "adam_step: params/grads count mismatch");
  if (state.first_moment.empty()) {
    for (auto* p : params) {
      state.first_moment.push_back(Mat<S>::Zero(p->rows(), p->cols()));
      state.second_moment.push_back(Mat<S>::Zero(p->rows(), p->cols()));
    }
  }
  require(state.first_moment.size() == params.size(), "adam_step: moment count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = *params[i];
    const auto& g = *grads[i];
    require(p.rows() == g.rows() && p.cols() == g.cols(), "adam_step: gradient shape mismatch");
    require(state.first_moment[i].rows() == p.rows() && state.first_moment[i].cols() == p.cols(),
            "adam_step: moment shape mismatch");
  }

  const double lr = state.effective_lr();
  const long t = state.step_count + 1;
  const double b1 = state.opt.beta1, b2 = state.opt.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const auto& g = *grads[i];
    m = S(b1) * m + S(1 - b1) * g;
    v = S(b2) * v + S(1 - b2) * g.cwiseProduct(g);
    auto denom = ((v.array() / S(bc2)).sqrt() + S(state.opt.eps));
    params[i]->array() -= S(lr) * (m.array() / S(bc1)) / denom;
  }
  state.step_count = t;
}

// Owns an AdamState and steps a fixed list of parameter tensors using their
// accumulated gradients. Parameters without a gradient are treated as zero.
template <class S>
class Adam {
 public:
  Adam(std::vector<Tensor<S>> params, AdamOptions opt)
      : params_(std::move(params)), state_(opt) {}

  void step() {
    std::vector<Mat<S>*> values;
    std::vector<Mat<S>> zeros;
    zeros.reserve(params_.size());
    std::vector<const Mat<S>*> grads;
    for (auto& p : params_) {
      values.push_back(&p.mutable_value());
      if (p.has_grad()) {
        grads.push_back(&p.grad());
      } else {
        zeros.push_back(Mat<S>::Zero(p.rows(), p.cols()));
        grads.push_back(&zeros.back());
      }
    }
    adam_step<S>(std::span<Mat<S>* const>(values), std::span<const Mat<S>* const>(grads), state_);
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  const AdamState<S>& state() const { return state_; }
  AdamState<S>& state() { return state_; }
  double effective_lr() const { return state_.effective_lr(); }

 private:
  std::vector<Tensor<S>> params_;
  AdamState<S> state_;
};

}  // namespace idf::ad
