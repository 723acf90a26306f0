#ifndef PHPAV_OPTIM_HPP
#define PHPAV_OPTIM_HPP

#include <cmath>
#include <map>
#include <string>

#include "phpav/params.hpp"
#include "phpav/tensor.hpp"

// Adam with coupled weight decay (decay enters the gradient, classic L2
// style) plus a cosine learning-rate schedule that decays to exactly zero at
// the final step of each task and restarts at every task boundary.

namespace phpav {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 2e-4;

  void validate() const {
    if (lr <= 0 || beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1 || eps <= 0 ||
        weight_decay < 0)
      throw validation_error("adam: invalid hyperparameters");
  }
};

// lr at `step` of `total_steps` (step in [0, total)); lr0 at step 0, exactly
// 0 at the last step, monotone in between.
inline double cosine_lr(double lr0, long step, long total_steps) {
  if (total_steps < 1 || step < 0 || step >= total_steps)
    throw validation_error("cosine_lr: step out of range");
  if (total_steps == 1) return lr0;
  double x = static_cast<double>(step) / static_cast<double>(total_steps - 1);
  return lr0 * 0.5 * (1.0 + std::cos(3.14159265358979323846 * x));
}

template <typename T>
class Adam {
public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) { cfg.validate(); }

  // Advance the shared timestep; call once per optimizer step, before update().
  void begin_step() { ++t_; }

  // Apply one Adam update to `w` under `name`'s moment slots. An empty grad
  // means the parameter was unreachable this step and is treated as zero.
  void update(const std::string& name, Tensor<T>& w, const Tensor<T>& grad, double lr) {
    if (t_ < 1) throw validation_error("adam: update before begin_step");
    if (grad.numel() != 0 && grad.shape != w.shape)
      throw validation_error("adam: gradient shape mismatch for " + name);
    auto& [m, v] = slot(name, w.shape);
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (long i = 0; i < w.numel(); ++i) {
      double g = grad.numel() ? double(grad.data[size_t(i)]) : 0.0;
      g += cfg_.weight_decay * double(w.data[size_t(i)]);
      double mi = b1 * double(m.data[size_t(i)]) + (1.0 - b1) * g;
      double vi = b2 * double(v.data[size_t(i)]) + (1.0 - b2) * g * g;
      m.data[size_t(i)] = T(mi);
      v.data[size_t(i)] = T(vi);
      double mhat = mi / bc1, vhat = vi / bc2;
      w.data[size_t(i)] = T(double(w.data[size_t(i)]) - lr * mhat / (std::sqrt(vhat) + cfg_.eps));
    }
  }

  long timestep() const { return t_; }
  const AdamConfig& config() const { return cfg_; }
  // Moment state, exposed for checkpointing: name -> (m, v).
  std::map<std::string, std::pair<Tensor<T>, Tensor<T>>>& state() { return state_; }
  const std::map<std::string, std::pair<Tensor<T>, Tensor<T>>>& state() const { return state_; }
  void set_timestep(long t) { t_ = t; }

private:
  std::pair<Tensor<T>, Tensor<T>>& slot(const std::string& name, const std::vector<long>& shape) {
    auto it = state_.find(name);
    if (it == state_.end())
      it = state_.emplace(name, std::make_pair(Tensor<T>(shape), Tensor<T>(shape))).first;
    else if (it->second.first.shape != shape)
      throw validation_error("adam: moment shape changed for " + name);
    return it->second;
  }

  AdamConfig cfg_;
  long t_ = 0;
  std::map<std::string, std::pair<Tensor<T>, Tensor<T>>> state_;
};

}  // namespace phpav

#endif
