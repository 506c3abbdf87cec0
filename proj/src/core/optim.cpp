#include "omae/core/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace omae {

void LrSchedule::validate() const {
  if (!(total_epochs > 0.0)) throw std::invalid_argument("schedule needs total_epochs > 0");
  if (warmup_epochs < 0.0 || (kind == Kind::WarmupCosine && warmup_epochs >= total_epochs))
    throw std::invalid_argument("schedule needs 0 <= warmup_epochs < total_epochs");
  if (!(peak_lr > 0.0) || floor_lr < 0.0 || floor_lr > peak_lr)
    throw std::invalid_argument("schedule needs 0 <= floor_lr <= peak_lr, peak_lr > 0");
}

double LrSchedule::at(double epoch) const {
  if (kind == Kind::Constant) return peak_lr;
  if (warmup_epochs > 0.0 && epoch <= warmup_epochs) return peak_lr * (epoch / warmup_epochs);
  const double t = (epoch - warmup_epochs) / (total_epochs - warmup_epochs);
  if (t <= 0.0) return peak_lr;
  if (t >= 1.0) return floor_lr;
  return floor_lr + 0.5 * (peak_lr - floor_lr) * (1.0 + std::cos(M_PI * t));
}

AdamW::AdamW(std::vector<NamedParam> params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
  for (auto& p : params_) {
    p.tensor.set_requires_grad(true);
    m_.emplace_back(p.tensor.numel(), 0.0f);
    v_.emplace_back(p.tensor.numel(), 0.0f);
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void AdamW::step(double lr) {
  ++step_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& t = params_[i].tensor;
    auto w = t.data();
    auto g = t.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    const auto& name = params_[i].name;
    const bool is_token = name.size() >= 6 && name.compare(name.size() - 6, 6, "_token") == 0;
    const bool decay = t.rank() >= 2 && !is_token && config_.weight_decay > 0.0;
    const float shrink = static_cast<float>(1.0 - lr * config_.weight_decay);
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = static_cast<float>(b1 * m[j] + (1.0 - b1) * g[j]);
      v[j] = static_cast<float>(b2 * v[j] + (1.0 - b2) * static_cast<double>(g[j]) * g[j]);
      if (decay) w[j] *= shrink;
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] = static_cast<float>(w[j] - lr * mhat / (std::sqrt(vhat) + config_.eps));
    }
  }
}

}  // namespace omae
