#pragma once

#include <cstddef>
#include <vector>

#include "rmt/tensor.hpp"

namespace rmt {

// Linear warmup from 0 to peak, then linear decay to 0 at `total`.
struct LrSchedule {
  double peak = 1e-3;
  std::size_t warmup = 100;
  std::size_t total = 1000;
};
double lr_at(std::size_t step, const LrSchedule& sched);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Decoupled-weight-decay Adam over a fixed parameter list.
template <class Real>
class AdamW {
 public:
  AdamW() = default;
  AdamW(std::vector<Tensor<Real>> params, AdamWConfig cfg);

  // One update from the parameters' current gradients. Throws NumericError
  // naming the parameter when a gradient is not finite.
  void step(double lr);
  void reset();

  std::size_t steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }
  const std::vector<Tensor<Real>>& params() const { return params_; }
  std::vector<std::vector<Real>>& first_moments() { return m_; }
  std::vector<std::vector<Real>>& second_moments() { return v_; }
  const std::vector<std::vector<Real>>& first_moments() const { return m_; }
  const std::vector<std::vector<Real>>& second_moments() const { return v_; }
  void set_steps(std::size_t t) { t_ = t; }

 private:
  std::vector<Tensor<Real>> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<Real>> m_, v_;
  std::size_t t_ = 0;
};

// Scales all gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
template <class Real>
double clip_grad_norm(const std::vector<Tensor<Real>>& params, double max_norm);

template <class Real>
void zero_grads(const std::vector<Tensor<Real>>& params);

}  // namespace rmt
