#include "doctest.h"

#include <cmath>
#include <cstring>
#include <numeric>

#include "omae/core/grad_check.hpp"
#include "omae/core/kernels.hpp"
#include "omae/core/ops.hpp"
#include "test_util.hpp"

using namespace omae;
using omae::test::random_dim;
using omae::test::random_tensor;
using omae::test::weighted_sum;

namespace {

// Taylor series of erf, independent of std::erf.
double erf_series(double x) {
  double sum = 0.0, term = x;
  for (int n = 0; n < 60; ++n) {
    sum += term / (2 * n + 1);
    term *= -x * x / (n + 1);
  }
  return 2.0 / std::sqrt(M_PI) * sum;
}

}  // namespace

TEST_CASE("matmul: identity, shape and error contract") {
  Tensor<double> eye({2, 2}, {1, 0, 0, 1});
  Tensor<double> x({2, 2}, {3, -1, 4, 2});
  CHECK(matmul(eye, x).values() == x.values());

  Rng rng(1);
  auto y = matmul(random_tensor({2, 3}, rng), random_tensor({3, 4}, rng));
  CHECK(y.shape() == Shape{2, 4});

  CHECK_THROWS_AS(matmul(random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)), ShapeError);
}

TEST_CASE("matmul: gradient of sum(A B) w.r.t. A matches finite differences") {
  Rng rng(2);
  auto b = random_tensor({3, 4}, rng);
  auto a = random_tensor({2, 3}, rng);
  double err = grad_check([&](const Tensor<double>& x) { return sum(matmul(x, b)); }, a);
  CHECK(err < 1e-5);
}

TEST_CASE("layer_norm: hand-computed rows") {
  Tensor<double> gamma({2}, 1.0), beta({2}, 0.0);
  auto flat = layer_norm(Tensor<double>({1, 2}, {5, 5}), gamma, beta);
  CHECK(flat.values()[0] == 0.0);
  CHECK(flat.values()[1] == 0.0);

  auto pm = layer_norm(Tensor<double>({1, 2}, {1, -1}), gamma, beta, 1e-15);
  CHECK(pm.values()[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(pm.values()[1] == doctest::Approx(-1.0).epsilon(1e-12));

  CHECK_THROWS_AS(Tensor<double>(Shape{3, 0}), ShapeError);
  CHECK_THROWS_AS(layer_norm(Tensor<double>({2, 3}), gamma, beta), ShapeError);
}

TEST_CASE("layer_norm: gradient w.r.t. input and affine parameters") {
  Rng rng(3);
  auto x = random_tensor({3, 5}, rng, 2.0);
  auto g = random_tensor({5}, rng);
  auto b = random_tensor({5}, rng);
  auto rep = grad_check_params([&] { return weighted_sum(layer_norm(x, g, b), 11); }, {x, g, b});
  CHECK(rep.max_rel_error < 1e-5);
}

TEST_CASE("gelu: exact erf form") {
  CHECK(gelu(Tensor<double>({1}, {0.0})).item() == 0.0);
  CHECK(gelu(Tensor<double>({1}, {30.0})).item() == doctest::Approx(30.0).epsilon(1e-12));
  const double oracle = 1.0 * 0.5 * (1.0 + erf_series(1.0 / std::sqrt(2.0)));
  CHECK(oracle == doctest::Approx(0.841345).epsilon(1e-6));
  CHECK(gelu(Tensor<double>({1}, {1.0})).item() == doctest::Approx(oracle).epsilon(1e-12));
}

TEST_CASE("softmax: symmetry, shift invariance and direct formula") {
  auto half = softmax(Tensor<double>({1, 2}, {0, 0}));
  CHECK(half.values()[0] == doctest::Approx(0.5));
  CHECK(half.values()[1] == doctest::Approx(0.5));

  Rng rng(4);
  auto x = random_tensor({3, 6}, rng, 3.0);
  Tensor<double> shifted = x.clone();
  for (auto& v : shifted.values()) v += 17.25;
  auto a = softmax(x), b = softmax(shifted);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.values()[i] == doctest::Approx(b.values()[i]).epsilon(1e-12));

  auto y = softmax(Tensor<double>({1, 3}, {1, 2, 3}));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  const double expected[3] = {std::exp(1.0) / z, std::exp(2.0) / z, std::exp(3.0) / z};
  CHECK(expected[0] == doctest::Approx(0.09003).epsilon(1e-4));
  CHECK(expected[2] == doctest::Approx(0.66524).epsilon(1e-4));
  for (int i = 0; i < 3; ++i) CHECK(std::abs(y.values()[i] - expected[i]) < 1e-5);
}

TEST_CASE("backward: analytic cases and scalar contract") {
  Tensor<double> x({2}, {1, 2}, true);
  backward(sum(mul(x, x)));
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 4.0);

  Tensor<double> p({3}, 1.0, true);
  Tensor<double> q({2}, {1, 2}, true);
  backward(sum(q));
  for (double g : p.grad()) CHECK(g == 0.0);

  CHECK_THROWS_AS(backward(mul(q, q)), ShapeError);
}

TEST_CASE("backward: composite MLP matches finite differences") {
  Rng rng(5);
  auto x = random_tensor({4, 6}, rng);
  auto w1 = random_tensor({8, 6}, rng), b1 = random_tensor({8}, rng);
  auto w2 = random_tensor({3, 8}, rng), b2 = random_tensor({3}, rng);
  auto loss = [&] {
    auto h = gelu(linear(x, w1, b1));
    auto logits = linear(h, w2, b2);
    std::vector<double> tgt(12, 0.0);
    for (int r = 0; r < 4; ++r) tgt[r * 3 + r % 3] = 1.0;
    return softmax_cross_entropy(logits, std::span<const double>(tgt));
  };
  auto rep = grad_check_params(loss, {x, w1, b1, w2, b2});
  CHECK(rep.max_rel_error < 1e-5);
}

TEST_CASE("backward: accumulates until zeroed and repeats identically") {
  Rng rng(6);
  auto w = random_tensor({4, 4}, rng, 1.0, true);
  auto x = random_tensor({3, 4}, rng);
  auto loss = weighted_sum(gelu(linear(x, w)), 3);
  backward(loss);
  std::vector<double> first(w.grad().begin(), w.grad().end());
  backward(loss);
  for (std::size_t i = 0; i < first.size(); ++i) CHECK(w.grad()[i] == doctest::Approx(2 * first[i]));
  w.zero_grad();
  backward(loss);
  CHECK(std::equal(first.begin(), first.end(), w.grad().begin()));
}

TEST_CASE("grad_check: exact linear, quadratic and a broken backward rule") {
  Rng rng(7);
  auto x = random_tensor({5}, rng);
  CHECK(grad_check([](const Tensor<double>& t) { return sum(t); }, x) < 1e-9);

  Tensor<double> q({2}, {1, 2});
  CHECK(grad_check([](const Tensor<double>& t) { return sum(mul(t, t)); }, q, 1e-5) < 1e-8);

  // d/dx sum(x^2) recorded as x instead of 2x.
  auto wrong_square_sum = [](const Tensor<double>& t) {
    Tensor<double> out({1});
    double s = 0;
    for (double v : t.values()) s += v * v;
    out.values()[0] = s;
    out.node().requires_grad = true;
    out.node().parents.push_back(t.node_ptr());
    out.node().backward_fn = [](Node<double>& self) {
      auto& in = *self.parents[0];
      for (std::size_t i = 0; i < in.data.size(); ++i) in.grad[i] += self.grad[0] * in.data[i];
    };
    return out;
  };
  CHECK(grad_check(wrong_square_sum, q) > 0.1);

  CHECK_THROWS_AS(grad_check([](const Tensor<double>& t) { return mul(t, t); }, q), ShapeError);
}

TEST_CASE("property: every differentiable op passes grad_check on random small inputs") {
  Rng rng(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 6; ++trial) {
    const std::size_t a = random_dim(rng), b = random_dim(rng), c = random_dim(rng),
                      d = random_dim(rng, 2, 8);
    const std::uint64_t ws = 100 + trial;
    std::vector<std::pair<const char*, double>> errs;
    auto check = [&](const char* name, auto fn, std::vector<Tensor<double>> params) {
      auto rep = grad_check_params(fn, params);
      INFO(std::string(name) << " trial " << trial << " err " << rep.max_rel_error << " at " << rep.worst_param
           << ":" << rep.worst_index << " analytic " << rep.worst_analytic << " numeric " << rep.worst_numeric);
      CHECK(rep.max_rel_error < 1e-5);
      worst = std::max(worst, rep.max_rel_error);
    };
    {
      auto x = random_tensor({a, b}, rng), y = random_tensor({b, c}, rng);
      check("matmul", [&] { return weighted_sum(matmul(x, y), ws); }, {x, y});
    }
    {
      auto x = random_tensor({2, a, b}, rng), y = random_tensor({2, b, c}, rng),
           yt = random_tensor({2, c, b}, rng);
      check("bmm", [&] { return weighted_sum(bmm(x, y), ws); }, {x, y});
      check("bmm_t", [&] { return weighted_sum(bmm(x, yt, true), ws); }, {x, yt});
    }
    {
      auto x = random_tensor({a, b, c}, rng), w = random_tensor({d, c}, rng), bias = random_tensor({d}, rng);
      check("linear", [&] { return weighted_sum(linear(x, w, bias), ws); }, {x, w, bias});
    }
    {
      auto x = random_tensor({a, b, c}, rng), y = random_tensor({b, c}, rng), z = random_tensor({a, b, c}, rng);
      check("add_broadcast", [&] { return weighted_sum(add(x, y), ws); }, {x, y});
      check("sub", [&] { return weighted_sum(sub(x, z), ws); }, {x, z});
      check("mul", [&] { return weighted_sum(mul(x, z), ws); }, {x, z});
      check("scale", [&] { return weighted_sum(scale(x, -1.75), ws); }, {x});
      check("gelu", [&] { return weighted_sum(gelu(scale(x, 2.0)), ws); }, {x});
      check("mean", [&] { return mean(mul(x, x)); }, {x});
      check("reshape", [&] { return weighted_sum(reshape(x, {a * b, c}), ws); }, {x});
      check("permute", [&] { return weighted_sum(permute(x, {2, 0, 1}), ws); }, {x});
      check("softmax_last", [&] { return weighted_sum(softmax(x, -1), ws); }, {x});
      check("softmax_mid", [&] { return weighted_sum(softmax(x, 1), ws); }, {x});
      check("slice", [&] { return weighted_sum(slice(x, 1, b / 2, b - b / 2), ws); }, {x});
      check("concat", [&] { return weighted_sum(concat<double>({x, z}, 1), ws); }, {x, z});
    }
    {
      // With two features the normalized output is +-1 regardless of x.
      const std::size_t f = d + 1;
      auto x = random_tensor({a, f}, rng, 2.0), g = random_tensor({f}, rng), be = random_tensor({f}, rng);
      check("layer_norm", [&] { return weighted_sum(layer_norm(x, g, be), ws); }, {x, g, be});
    }
    {
      auto s = random_tensor({a, d, d}, rng, 2.0);
      check("causal_softmax", [&] { return weighted_sum(causal_softmax(s), ws); }, {s});
    }
    {
      auto x = random_tensor({2, d, c}, rng);
      std::vector<std::size_t> idx;
      for (int i = 0; i < 6; ++i) idx.push_back(rng.index(d));
      check("gather_rows", [&] { return weighted_sum(gather_rows<double>(x, idx), ws); }, {x});
      auto t = random_tensor({1, 1, c}, rng);
      check("broadcast_to", [&] { return weighted_sum(broadcast_to(t, {a, 2, c}), ws); }, {t});
      auto table = random_tensor({d, c}, rng);
      std::vector<std::size_t> ids{0, d - 1, 0, 1 % d};
      check("embedding", [&] { return weighted_sum(embedding<double>(table, ids, {2, 2}), ws); }, {table});
    }
    {
      auto logits = random_tensor({a, d}, rng, 3.0);
      std::vector<double> soft(a * d), weights(a), bin(a * d), mask(a);
      for (std::size_t r = 0; r < a; ++r) {
        double tot = 0;
        for (std::size_t k = 0; k < d; ++k) tot += soft[r * d + k] = rng.uniform();
        for (std::size_t k = 0; k < d; ++k) soft[r * d + k] /= tot;
        weights[r] = r == 0 ? 1.0 : static_cast<double>(rng.index(2));
        mask[r] = r == 0 ? 1.0 : static_cast<double>(rng.index(2));
      }
      for (auto& v : bin) v = static_cast<double>(rng.index(2));
      check("softmax_ce", [&] { return softmax_cross_entropy<double>(logits, soft, weights); }, {logits});
      check("bce", [&] { return bce_with_logits<double>(logits, bin); }, {logits});
      auto pred = random_tensor({1, a, d}, rng);
      std::vector<double> target(a * d);
      for (auto& v : target) v = rng.uniform(-1, 1);
      check("masked_mse", [&] { return masked_mse<double>(pred, target, mask); }, {pred});
    }
  }
  MESSAGE("worst op relative error: " << worst);
}

TEST_CASE("property: 32-bit and 64-bit forward passes agree") {
  Rng rng(8);
  auto xd = random_tensor({4, 8}, rng), wd = random_tensor({6, 8}, rng), gd = random_tensor({6}, rng),
       bd = random_tensor({6}, rng);
  auto tof = [](const Tensor<double>& t) {
    return Tensor<float>(t.shape(), std::vector<float>(t.values().begin(), t.values().end()));
  };
  auto yd = softmax(layer_norm(gelu(linear(xd, wd)), gd, bd));
  auto yf = softmax(layer_norm(gelu(linear(tof(xd), tof(wd))), tof(gd), tof(bd)));
  for (std::size_t i = 0; i < yd.numel(); ++i)
    CHECK(std::abs(yf.values()[i] - yd.values()[i]) <= 1e-4 * std::max(1.0, std::abs(yd.values()[i])));
}

TEST_CASE("kernels: OpenMP results are bitwise equal to the serial reference") {
  Rng rng(9);
  const std::size_t m = 67, n = 45, k = 129;
  std::vector<float> A(m * k), B(k * n), Bt(n * k);
  for (auto& v : A) v = static_cast<float>(rng.uniform(-1, 1));
  for (auto& v : B) v = static_cast<float>(rng.uniform(-1, 1));
  for (auto& v : Bt) v = static_cast<float>(rng.uniform(-1, 1));
  for (int threads : {1, 2, 3}) {
    kernels::set_threads(threads);
    for (bool tb : {false, true}) {
      std::vector<float> cs(m * n), cp(m * n);
      kernels::serial::gemm(false, tb, m, n, k, A.data(), tb ? Bt.data() : B.data(), cs.data(), false);
      kernels::parallel::gemm(false, tb, m, n, k, A.data(), tb ? Bt.data() : B.data(), cp.data(), false);
      CHECK(std::memcmp(cs.data(), cp.data(), cs.size() * sizeof(float)) == 0);
    }
    std::vector<float> ys(m * k), yp(m * k), xs(m * k), mean(m), rstd(m);
    kernels::serial::softmax_rows(A.data(), m, k, ys.data());
    kernels::parallel::softmax_rows(A.data(), m, k, yp.data());
    CHECK(ys == yp);
    kernels::serial::layer_norm_rows(A.data(), m, k, 1e-6, ys.data(), mean.data(), rstd.data());
    kernels::parallel::layer_norm_rows(A.data(), m, k, 1e-6, yp.data(), mean.data(), rstd.data());
    CHECK(ys == yp);
    kernels::serial::gelu(A.data(), A.size(), ys.data());
    kernels::parallel::gelu(A.data(), A.size(), yp.data());
    CHECK(ys == yp);
  }
  kernels::set_threads(1);
}
