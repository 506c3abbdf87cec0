#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "omae/core/ops.hpp"
#include "omae/core/rng.hpp"
#include "omae/core/tensor.hpp"

namespace omae::nn {

inline constexpr double kInitStd = 0.02;

/// Weight initialization: truncated normal with sigma kInitStd, or
/// uniform in +-sqrt(6 / (fan_in + fan_out)).
enum class Init { TruncNormal, XavierUniform };

template <typename T>
struct Linear {
  Tensor<T> weight;  // [out x in]
  Tensor<T> bias;    // [out], may be undefined

  static Linear create(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true,
                       Init init = Init::TruncNormal);
  std::size_t in_features() const { return weight.dim(1); }
  std::size_t out_features() const { return weight.dim(0); }
  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

template <typename T>
struct LayerNorm {
  Tensor<T> gamma, beta;

  static LayerNorm create(std::size_t dim);
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

/// Low-rank adapter for a frozen linear layer: adds (alpha / rank) * B A x.
template <typename T>
struct LoraAdapter {
  Tensor<T> a;  // [rank x in]
  Tensor<T> b;  // [out x rank], zero at creation
  std::size_t rank = 0;
  double alpha = 0.0;

  static LoraAdapter create(std::size_t in, std::size_t out, std::size_t rank, double alpha,
                            Rng& rng);
  double scaling() const { return alpha / static_cast<double>(rank); }
  std::size_t parameter_count() const { return a.numel() + b.numel(); }
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

/// y = x W^T + bias + (alpha / r) x A^T B^T.
template <typename T>
Tensor<T> lora_linear(const Tensor<T>& x, const Linear<T>& base,
                      const std::optional<LoraAdapter<T>>& adapter);

template <typename T>
struct Attention {
  Linear<T> q, k, v, o;  // k is bias-free
  std::size_t heads = 1;
  std::optional<LoraAdapter<T>> lora_q, lora_v;

  static Attention create(std::size_t dim, std::size_t heads, Rng& rng,
                          Init init = Init::TruncNormal);
  /// x [B x T x D] -> [B x T x D].
  Tensor<T> operator()(const Tensor<T>& x, bool causal = false) const;
  /// Softmax attention weights [B * heads x T x T], for inspection.
  Tensor<T> weights(const Tensor<T>& x, bool causal = false) const;
  void collect(const std::string& prefix, ParamList<T>& out) const;

 private:
  Tensor<T> split_heads(const Tensor<T>& x) const;
};

template <typename T>
struct Mlp {
  Linear<T> fc1, fc2;

  static Mlp create(std::size_t dim, std::size_t hidden, Rng& rng, Init init = Init::TruncNormal);
  Tensor<T> operator()(const Tensor<T>& x) const { return fc2(gelu(fc1(x))); }
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

/// Pre-norm transformer block: x + attn(ln1(x)), then + mlp(ln2(.)).
template <typename T>
struct TransformerBlock {
  LayerNorm<T> ln1;
  Attention<T> attn;
  LayerNorm<T> ln2;
  Mlp<T> mlp;

  static TransformerBlock create(std::size_t dim, std::size_t heads, std::size_t mlp_ratio,
                                 Rng& rng, Init init = Init::TruncNormal);
  Tensor<T> operator()(const Tensor<T>& x, bool causal = false) const;
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

/// Fixed 2-D sine-cosine table [(grid_h * grid_w) x dim]. The first half of
/// each row encodes the row coordinate, the second half the column.
template <typename T>
Tensor<T> sincos_pos_embed(std::size_t grid_h, std::size_t grid_w, std::size_t dim);

/// Fixed 1-D sine-cosine table [length x dim], dim even.
template <typename T>
Tensor<T> sincos_pos_embed_1d(std::size_t length, std::size_t dim);

/// Deep copy of every tensor in a parameter list, keeping names.
template <typename T>
ParamList<T> snapshot(const ParamList<T>& params);

/// Copies values from src into dst; names and shapes must match one to one.
template <typename T>
void restore(const ParamList<T>& src, ParamList<T>& dst);

}  // namespace omae::nn
