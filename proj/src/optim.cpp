#include "rmt/optim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace rmt {

double lr_at(std::size_t step, const LrSchedule& sched) {
  const double s = static_cast<double>(step);
  if (step < sched.warmup) return sched.peak * s / static_cast<double>(sched.warmup);
  if (sched.total <= sched.warmup) return step == sched.warmup ? sched.peak : 0.0;
  const double span = static_cast<double>(sched.total - sched.warmup);
  const double frac = (s - static_cast<double>(sched.warmup)) / span;
  return std::max(0.0, sched.peak * (1.0 - frac));
}

template <class Real>
AdamW<Real>::AdamW(std::vector<Tensor<Real>> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  reset();
}

template <class Real>
void AdamW<Real>::reset() {
  m_.assign(params_.size(), {});
  v_.assign(params_.size(), {});
  for (std::size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(params_[i].numel(), Real(0));
    v_[i].assign(params_[i].numel(), Real(0));
  }
  t_ = 0;
}

template <class Real>
void AdamW<Real>::step(double lr) {
  for (const auto& p : params_) {
    if (!p.has_grad()) continue;
    for (Real g : p.grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NumericError("non-finite gradient in parameter '" + p.name() + "'");
      }
    }
  }
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const double shrink = 1.0 - lr * cfg_.weight_decay;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto p = params_[i];
    if (!p.requires_grad()) continue;
    auto w = p.mutable_data();
    auto g = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g.empty() ? 0.0 : static_cast<double>(g[j]);
      const double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * gj;
      const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * gj * gj;
      m[j] = static_cast<Real>(mj);
      v[j] = static_cast<Real>(vj);
      const double update = (mj / c1) / (std::sqrt(vj / c2) + cfg_.eps);
      w[j] = static_cast<Real>(static_cast<double>(w[j]) * shrink - lr * update);
    }
  }
}

template <class Real>
double clip_grad_norm(const std::vector<Tensor<Real>>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params) {
    for (Real g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto p : params) {
      if (!p.has_grad()) continue;
      for (Real& g : p.mutable_grad()) g = static_cast<Real>(static_cast<double>(g) * f);
    }
  }
  return norm;
}

template <class Real>
void zero_grads(const std::vector<Tensor<Real>>& params) {
  for (auto p : params) p.zero_grad();
}

template class AdamW<float>;
template class AdamW<double>;
template double clip_grad_norm(const std::vector<Tensor<float>>&, double);
template double clip_grad_norm(const std::vector<Tensor<double>>&, double);
template void zero_grads(const std::vector<Tensor<float>>&);
template void zero_grads(const std::vector<Tensor<double>>&);

}  // namespace rmt
