#include "omae/nn/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace omae::nn {

template <typename T>
Linear<T> Linear<T>::create(std::size_t in, std::size_t out, Rng& rng, bool with_bias, Init init) {
  Linear l;
  l.weight = Tensor<T>({out, in});
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  for (auto& w : l.weight.values())
    w = static_cast<T>(init == Init::XavierUniform ? rng.uniform(-bound, bound)
                                                   : rng.truncated_normal(kInitStd));
  if (with_bias) l.bias = Tensor<T>({out});
  return l;
}

template <typename T>
void Linear<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  out.push_back({prefix + ".weight", weight});
  if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

template <typename T>
LayerNorm<T> LayerNorm<T>::create(std::size_t dim) {
  return {Tensor<T>({dim}, T(1)), Tensor<T>({dim}, T(0))};
}

template <typename T>
void LayerNorm<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

template <typename T>
LoraAdapter<T> LoraAdapter<T>::create(std::size_t in, std::size_t out, std::size_t rank,
                                      double alpha, Rng& rng) {
  if (rank == 0 || rank >= std::min(in, out))
    throw std::invalid_argument("LoRA rank " + std::to_string(rank) +
                                " must satisfy 0 < r < min(d_in, d_out) = " +
                                std::to_string(std::min(in, out)));
  LoraAdapter ad;
  ad.rank = rank;
  ad.alpha = alpha;
  ad.a = Tensor<T>({rank, in});
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  for (auto& w : ad.a.values()) w = static_cast<T>(rng.uniform(-bound, bound));
  ad.b = Tensor<T>({out, rank});
  return ad;
}

template <typename T>
void LoraAdapter<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  out.push_back({prefix + ".lora_a", a});
  out.push_back({prefix + ".lora_b", b});
}

template <typename T>
Tensor<T> lora_linear(const Tensor<T>& x, const Linear<T>& base,
                      const std::optional<LoraAdapter<T>>& adapter) {
  auto y = base(x);
  if (!adapter) return y;
  const auto& ad = *adapter;
  if (ad.a.dim(1) != base.in_features() || ad.b.dim(0) != base.out_features() ||
      ad.a.dim(0) != ad.rank || ad.b.dim(1) != ad.rank)
    throw ShapeError("LoRA adapter shapes do not match base layer " +
                     shape_str(base.weight.shape()));
  auto delta = linear(linear(x, ad.a), ad.b);
  return add(y, scale(delta, ad.scaling()));
}

template <typename T>
Attention<T> Attention<T>::create(std::size_t dim, std::size_t heads, Rng& rng, Init init) {
  if (heads == 0 || dim % heads != 0)
    throw std::invalid_argument("attention dim " + std::to_string(dim) +
                                " not divisible by heads " + std::to_string(heads));
  Attention a;
  a.q = Linear<T>::create(dim, dim, rng, true, init);
  a.k = Linear<T>::create(dim, dim, rng, false, init);
  a.v = Linear<T>::create(dim, dim, rng, true, init);
  a.o = Linear<T>::create(dim, dim, rng, true, init);
  a.heads = heads;
  return a;
}

template <typename T>
Tensor<T> Attention<T>::split_heads(const Tensor<T>& x) const {
  const std::size_t B = x.dim(0), Tn = x.dim(1), D = x.dim(2), dh = D / heads;
  auto h = permute(reshape(x, {B, Tn, heads, dh}), {0, 2, 1, 3});
  return reshape(h, {B * heads, Tn, dh});
}

template <typename T>
Tensor<T> Attention<T>::weights(const Tensor<T>& x, bool causal) const {
  if (x.rank() != 3 || x.dim(2) != q.in_features())
    throw ShapeError("attention input " + shape_str(x.shape()) + " does not match dim " +
                     std::to_string(q.in_features()));
  const std::size_t dh = x.dim(2) / heads;
  auto qh = split_heads(lora_linear(x, q, lora_q));
  auto kh = split_heads(k(x));
  auto scores = scale(bmm(qh, kh, true), 1.0 / std::sqrt(static_cast<double>(dh)));
  return causal ? causal_softmax(scores) : softmax(scores);
}

template <typename T>
Tensor<T> Attention<T>::operator()(const Tensor<T>& x, bool causal) const {
  const std::size_t B = x.dim(0), Tn = x.dim(1), D = x.dim(2), dh = D / heads;
  auto probs = weights(x, causal);
  auto vh = split_heads(lora_linear(x, v, lora_v));
  auto ctx = reshape(bmm(probs, vh), {B, heads, Tn, dh});
  ctx = reshape(permute(ctx, {0, 2, 1, 3}), {B, Tn, D});
  return o(ctx);
}

template <typename T>
void Attention<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  q.collect(prefix + ".q", out);
  k.collect(prefix + ".k", out);
  v.collect(prefix + ".v", out);
  o.collect(prefix + ".o", out);
}

template <typename T>
Mlp<T> Mlp<T>::create(std::size_t dim, std::size_t hidden, Rng& rng, Init init) {
  return {Linear<T>::create(dim, hidden, rng, true, init), Linear<T>::create(hidden, dim, rng, true, init)};
}

template <typename T>
void Mlp<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

template <typename T>
TransformerBlock<T> TransformerBlock<T>::create(std::size_t dim, std::size_t heads,
                                                std::size_t mlp_ratio, Rng& rng, Init init) {
  TransformerBlock b;
  b.ln1 = LayerNorm<T>::create(dim);
  b.attn = Attention<T>::create(dim, heads, rng, init);
  b.ln2 = LayerNorm<T>::create(dim);
  b.mlp = Mlp<T>::create(dim, dim * mlp_ratio, rng, init);
  return b;
}

template <typename T>
Tensor<T> TransformerBlock<T>::operator()(const Tensor<T>& x, bool causal) const {
  auto h = add(x, attn(ln1(x), causal));
  return add(h, mlp(ln2(h)));
}

template <typename T>
void TransformerBlock<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  ln1.collect(prefix + ".ln1", out);
  attn.collect(prefix + ".attn", out);
  ln2.collect(prefix + ".ln2", out);
  mlp.collect(prefix + ".mlp", out);
}

namespace {

// Writes [sin(pos * w_i) ..., cos(pos * w_i) ...] for i < dim / 2.
void sincos_1d(double pos, std::size_t dim, double* out) {
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(half));
    out[i] = std::sin(pos * omega);
    out[half + i] = std::cos(pos * omega);
  }
}

}  // namespace

template <typename T>
Tensor<T> sincos_pos_embed(std::size_t grid_h, std::size_t grid_w, std::size_t dim) {
  if (dim == 0 || dim % 4 != 0)
    throw std::invalid_argument("2-D positional embedding dim must be divisible by 4, got " +
                                std::to_string(dim));
  Tensor<T> out({grid_h * grid_w, dim});
  std::vector<double> row(dim);
  for (std::size_t r = 0; r < grid_h; ++r)
    for (std::size_t c = 0; c < grid_w; ++c) {
      sincos_1d(static_cast<double>(r), dim / 2, row.data());
      sincos_1d(static_cast<double>(c), dim / 2, row.data() + dim / 2);
      T* dst = out.values().data() + (r * grid_w + c) * dim;
      for (std::size_t j = 0; j < dim; ++j) dst[j] = static_cast<T>(row[j]);
    }
  return out;
}

template <typename T>
Tensor<T> sincos_pos_embed_1d(std::size_t length, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0)
    throw std::invalid_argument("1-D positional embedding dim must be even");
  Tensor<T> out({length, dim});
  std::vector<double> row(dim);
  for (std::size_t p = 0; p < length; ++p) {
    sincos_1d(static_cast<double>(p), dim, row.data());
    for (std::size_t j = 0; j < dim; ++j) out.values()[p * dim + j] = static_cast<T>(row[j]);
  }
  return out;
}

template <typename T>
ParamList<T> snapshot(const ParamList<T>& params) {
  ParamList<T> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back({p.name, p.tensor.detach()});
  return out;
}

template <typename T>
void restore(const ParamList<T>& src, ParamList<T>& dst) {
  if (src.size() != dst.size()) throw std::invalid_argument("restore: parameter count mismatch");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].name != dst[i].name || src[i].tensor.shape() != dst[i].tensor.shape())
      throw std::invalid_argument("restore: mismatch at " + dst[i].name);
    dst[i].tensor.values() = src[i].tensor.values();
  }
}

#define OMAE_INSTANTIATE_LAYERS(T)                                                         \
  template struct Linear<T>;                                                               \
  template struct LayerNorm<T>;                                                            \
  template struct LoraAdapter<T>;                                                          \
  template struct Attention<T>;                                                            \
  template struct Mlp<T>;                                                                  \
  template struct TransformerBlock<T>;                                                     \
  template Tensor<T> lora_linear(const Tensor<T>&, const Linear<T>&,                       \
                                 const std::optional<LoraAdapter<T>>&);                    \
  template Tensor<T> sincos_pos_embed(std::size_t, std::size_t, std::size_t);              \
  template Tensor<T> sincos_pos_embed_1d(std::size_t, std::size_t);                        \
  template ParamList<T> snapshot(const ParamList<T>&);                                     \
  template void restore(const ParamList<T>&, ParamList<T>&);

OMAE_INSTANTIATE_LAYERS(float)
OMAE_INSTANTIATE_LAYERS(double)

}  // namespace omae::nn
