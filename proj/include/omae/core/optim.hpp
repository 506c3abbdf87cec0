#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "omae/core/tensor.hpp"

namespace omae {

/// Linear warmup from 0 to peak over warmup_epochs, then either a cosine
/// decay from peak to floor over the remaining epochs or a constant peak.
struct LrSchedule {
  enum class Kind { WarmupCosine, Constant };

  Kind kind = Kind::WarmupCosine;
  double total_epochs = 1.0;
  double warmup_epochs = 0.0;
  double peak_lr = 1e-3;
  double floor_lr = 0.0;

  static LrSchedule constant(double lr, double total_epochs) {
    return {Kind::Constant, total_epochs, 0.0, lr, lr};
  }

  /// Learning rate at a fractional epoch position in [0, total_epochs].
  double at(double epoch) const;
  void validate() const;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

using NamedParam = NamedTensor<float>;

/// Adam with decoupled weight decay. Decay applies to matrices only; biases,
/// norm parameters and learned tokens (names ending in "_token") are exempt.
class AdamW {
 public:
  AdamW(std::vector<NamedParam> params, AdamWConfig config);

  void step(double lr);
  void zero_grad();

  std::int64_t steps() const { return step_; }
  const std::vector<NamedParam>& params() const { return params_; }
  const AdamWConfig& config() const { return config_; }

  // Moment buffers, exposed for checkpointing.
  std::vector<std::vector<float>>& first_moments() { return m_; }
  std::vector<std::vector<float>>& second_moments() { return v_; }
  const std::vector<std::vector<float>>& first_moments() const { return m_; }
  const std::vector<std::vector<float>>& second_moments() const { return v_; }
  void set_steps(std::int64_t s) { step_ = s; }

 private:
  std::vector<NamedParam> params_;
  AdamWConfig config_;
  std::vector<std::vector<float>> m_, v_;
  std::int64_t step_ = 0;
};

}  // namespace omae
