#include "doctest.h"

#include <cmath>
#include <set>

#include "omae/core/rng.hpp"
#include "omae/metrics/metrics.hpp"

using namespace omae;
using namespace omae::metrics;

namespace {

double pair_count_auroc(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        den += 1;
        num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return num / den;
}

// Mean over positives of the precision at that positive's score threshold.
double per_positive_ap(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
  double sum = 0;
  int pos = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    ++pos;
    int above = 0, tp = 0;
    for (std::size_t j = 0; j < s.size(); ++j)
      if (s[j] >= s[i]) {
        ++above;
        tp += y[j];
      }
    sum += static_cast<double>(tp) / above;
  }
  return sum / pos;
}

// Two-sided t tail by composite Simpson integration of the density on [0, |t|].
double t_p_numeric(double t, double df) {
  const double c = std::exp(std::lgamma((df + 1) / 2) - std::lgamma(df / 2)) / std::sqrt(df * M_PI);
  auto pdf = [&](double x) { return c * std::pow(1 + x * x / df, -(df + 1) / 2); };
  const int n = 20000;
  const double h = std::abs(t) / n;
  double s = pdf(0) + pdf(std::abs(t));
  for (int i = 1; i < n; ++i) s += (i % 2 ? 4 : 2) * pdf(i * h);
  return 1.0 - 2.0 * s * h / 3.0;
}

struct RandomInstance {
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
};

RandomInstance random_instance(Rng& rng) {
  RandomInstance r;
  const std::size_t n = 2 + rng.index(49);
  for (std::size_t i = 0; i < n; ++i) {
    // Coarse grid so ties are frequent.
    r.scores.push_back(static_cast<double>(rng.index(8)) / 7.0 + (rng.bernoulli(0.3) ? rng.uniform() : 0.0));
    r.labels.push_back(rng.bernoulli(0.4) ? 1 : 0);
  }
  r.labels[0] = 1;
  r.labels[1] = 0;
  return r;
}

}  // namespace

TEST_CASE("roc_auc_binary: documented cases") {
  CHECK(roc_auc_binary(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<std::uint8_t>{0, 0, 1, 1}) == 1.0);
  CHECK(roc_auc_binary(std::vector<double>{0.5, 0.5, 0.5}, std::vector<std::uint8_t>{0, 1, 1}) == 0.5);
  CHECK(roc_auc_binary(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<std::uint8_t>{0, 0, 1, 1}) == 0.75);
  CHECK_THROWS_AS(roc_auc_binary(std::vector<double>{0.1, 0.2}, std::vector<std::uint8_t>{1, 1}), MetricError);
  CHECK_THROWS_AS(roc_auc_binary(std::vector<double>{0.1}, std::vector<std::uint8_t>{1, 0}), MetricError);
}

TEST_CASE("roc_auc_binary: pair-count oracle, complement and monotone invariance") {
  Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    auto r = random_instance(rng);
    const double fast = roc_auc_binary(r.scores, r.labels);
    REQUIRE(std::abs(fast - pair_count_auroc(r.scores, r.labels)) <= 1e-12);
    std::vector<double> neg, cube, ex;
    for (double s : r.scores) {
      neg.push_back(-s);
      cube.push_back(s * s * s);
      ex.push_back(std::exp(s));
    }
    REQUIRE(std::abs(fast + roc_auc_binary(neg, r.labels) - 1.0) <= 1e-12);
    REQUIRE(roc_auc_binary(cube, r.labels) == fast);
    REQUIRE(roc_auc_binary(ex, r.labels) == fast);
  }
}

TEST_CASE("pr_auc_binary: documented cases and sweep oracle") {
  CHECK(pr_auc_binary(std::vector<double>{0.3, 0.1}, std::vector<std::uint8_t>{1, 1}) == 1.0);
  CHECK(pr_auc_binary(std::vector<double>{0.9, 0.8, 0.2, 0.1}, std::vector<std::uint8_t>{1, 1, 0, 0}) == 1.0);
  CHECK(pr_auc_binary(std::vector<double>{0.9, 0.8, 0.7}, std::vector<std::uint8_t>{1, 0, 1}) ==
        doctest::Approx(5.0 / 6.0).epsilon(1e-15));
  CHECK_THROWS_AS(pr_auc_binary(std::vector<double>{0.9, 0.8}, std::vector<std::uint8_t>{0, 0}), MetricError);

  Rng rng(2);
  for (int trial = 0; trial < 1000; ++trial) {
    auto r = random_instance(rng);
    REQUIRE(std::abs(pr_auc_binary(r.scores, r.labels) - per_positive_ap(r.scores, r.labels)) <= 1e-12);
  }
}

TEST_CASE("macro_average: mean over evaluable classes with skips") {
  // Class a: perfect (1.0); class b: reversed (0.0); class c: never positive.
  PredictionSet set;
  set.classes = {"a", "b", "c"};
  set.scores = {{0.9, 0.1, 0.3}, {0.2, 0.8, 0.1}, {0.8, 0.3, 0.2}, {0.1, 0.7, 0.4}};
  set.targets = {{1, 1, 0}, {0, 0, 0}, {1, 1, 0}, {0, 0, 0}};
  auto m = macro_average(set);
  REQUIRE(m.per_class.size() == 2);
  CHECK(m.per_class[0].auroc == 1.0);
  CHECK(m.per_class[1].auroc == 0.0);
  CHECK(m.auroc == 0.5);
  CHECK(m.aupr == doctest::Approx((1.0 + 5.0 / 12.0) / 2));  // reversed AP: 1/2 * 1/3 + 1/2 * 2/4
  CHECK(m.skipped == std::vector<std::string>{"c"});

  PredictionSet one;
  one.classes = {"x"};
  one.scores = {{0.1}, {0.4}, {0.35}, {0.8}};
  one.targets = {{0}, {0}, {1}, {1}};
  CHECK(macro_average(one).auroc == 0.75);

  PredictionSet none;
  none.classes = {"x"};
  none.scores = {{0.1}, {0.4}};
  none.targets = {{1}, {1}};
  CHECK_THROWS_AS(macro_average(none), MetricError);
}

TEST_CASE("evaluate_classification: two-class single-label uses class 1 only") {
  std::vector<std::size_t> labels{0, 1, 0, 1};
  auto set = PredictionSet::from_single_labels({"neg", "pos"}, {{0.9, 0.1}, {0.6, 0.4}, {0.7, 0.3}, {0.2, 0.8}}, labels);
  auto r = evaluate_classification(set, true);
  REQUIRE(r.per_class.size() == 1);
  CHECK(r.per_class[0].name == "pos");
  CHECK(r.auroc == 1.0);
  CHECK(evaluate_classification(set, false).per_class.size() == 2);
}

TEST_CASE("vqa_text_metrics: documented cases") {
  auto same = vqa_text_metrics("Macular hole.", "macular  HOLE");
  CHECK(same.exact_match == 1.0);
  CHECK(same.f1 == 1.0);

  auto ab = vqa_text_metrics("a b", "b c");
  CHECK(ab.exact_match == 0.0);
  CHECK(ab.precision == 0.5);
  CHECK(ab.recall == 0.5);
  CHECK(ab.f1 == 0.5);

  auto empty = vqa_text_metrics("", "drusen");
  CHECK(empty.exact_match == 0.0);
  CHECK(empty.f1 == 0.0);
  auto both = vqa_text_metrics("", "");
  CHECK(both.exact_match == 1.0);
  CHECK(both.f1 == 1.0);

  auto repeat = vqa_text_metrics("b b b", "a b");
  CHECK(repeat.precision == doctest::Approx(1.0 / 3));
  CHECK(repeat.recall == 0.5);
}

TEST_CASE("bleu: documented cases and reference-order invariance") {
  auto same = bleu("the retina shows a large macular hole", {"the retina shows a large macular hole"});
  for (double b : same) CHECK(b == doctest::Approx(1.0).epsilon(1e-15));

  auto short_pred = bleu("the cat", {"the cat sat"}, 1);
  CHECK(short_pred[0] == doctest::Approx(std::exp(-0.5)).epsilon(1e-15));
  CHECK(short_pred[0] == doctest::Approx(0.6065).epsilon(1e-4));

  auto no_bigram = bleu("cat the", {"the cat"}, 2);
  CHECK(no_bigram[0] == 1.0);
  CHECK(no_bigram[1] == 0.0);

  // Clipping: "the the the" vs "the cat": p1 = 1/3, BP = 1.
  CHECK(bleu("the the the", {"the cat"}, 1)[0] == doctest::Approx(1.0 / 3));

  // Hand computation: p1 = 6/6, p2 = 4/5 ("e x" unmatched), c = 6, closest ref length 6.
  auto hand = bleu("a b c d e x", {"a b c x e d", "a b c d e f g"}, 2);
  CHECK(hand[0] == 1.0);
  CHECK(hand[1] == doctest::Approx(std::sqrt(4.0 / 5.0)));

  std::vector<std::string> refs{"one two three four", "one two five", "six seven one two three"};
  std::vector<std::string> rev(refs.rbegin(), refs.rend());
  CHECK(bleu("one two three", refs) == bleu("one two three", rev));

  auto empty = bleu("", {"x"});
  CHECK(empty == std::vector<double>(4, 0.0));
  CHECK_THROWS_AS(bleu("x", {"x"}, 5), MetricError);
}

TEST_CASE("aggregate_runs: hand values, 1/sqrt(n) scaling and translation") {
  auto flat = aggregate_runs(std::vector<double>{0.9, 0.9, 0.9, 0.9, 0.9});
  CHECK(flat.mean == doctest::Approx(0.9));
  CHECK(flat.ci_half_width == 0.0);

  auto two = aggregate_runs(std::vector<double>{0.8, 1.0});
  CHECK(std::abs(two.mean - 0.9) < 1e-12);
  CHECK(std::abs(two.std_error - 0.1) < 1e-12);
  CHECK(std::abs(two.ci_half_width - 0.196) < 1e-12);

  // Repeating a block k times keeps the sample variance near-constant; exact
  // ratio uses (n-1) correction: var_k = var_1 * (m-1) k / (m k - 1).
  std::vector<double> block{0.1, 0.5, 0.2, 0.9};
  auto base = aggregate_runs(block);
  std::vector<double> four;
  for (int k = 0; k < 4; ++k) four.insert(four.end(), block.begin(), block.end());
  auto big = aggregate_runs(four);
  const double corr = std::sqrt((3.0 * 4.0) / (16.0 - 1.0));
  CHECK(std::abs(big.ci_half_width - base.ci_half_width * corr / 2.0) < 1e-12);

  std::vector<double> shifted;
  for (double v : block) shifted.push_back(v + 3.25);
  auto sh = aggregate_runs(shifted);
  CHECK(std::abs(sh.mean - (base.mean + 3.25)) < 1e-12);
  CHECK(std::abs(sh.ci_half_width - base.ci_half_width) < 1e-12);

  CHECK_THROWS_AS(aggregate_runs(std::vector<double>{}), MetricError);
}

TEST_CASE("t_test_two_sided: Welch hand case against numeric integration") {
  auto r = t_test_two_sided(std::vector<double>{1, 2, 3, 4, 5}, std::vector<double>{2, 3, 4, 5, 6});
  CHECK(std::abs(r.t + 1.0) < 1e-12);
  CHECK(std::abs(r.df - 8.0) < 1e-12);
  CHECK(std::abs(r.p - t_p_numeric(-1.0, 8.0)) < 1e-6);
  CHECK(std::abs(r.p - 0.3466) < 1e-4);

  CHECK(t_test_two_sided(std::vector<double>{0.7, 0.8, 0.9}, std::vector<double>{0.7, 0.8, 0.9}).p == 1.0);
  CHECK(t_test_two_sided(std::vector<double>{0, 0, 0}, std::vector<double>{1, 1, 1}).p == 0.0);
  CHECK(t_test_two_sided(std::vector<double>{1, 1}, std::vector<double>{1, 1}).p == 1.0);

  // Unequal sizes and variances: Welch-Satterthwaite df is fractional.
  std::vector<double> a{0.91, 0.93, 0.95, 0.90, 0.94}, b{0.85, 0.95, 0.80, 0.90};
  auto w = t_test_two_sided(a, b);
  CHECK(std::abs(w.p - t_p_numeric(w.t, w.df)) < 1e-6);
  CHECK(w.df != std::floor(w.df));

  auto p = t_test_two_sided(std::vector<double>{1, 2, 3, 5}, std::vector<double>{1, 1, 2, 2}, true);
  // d = [0, 1, 1, 3]: mean 1.25, sample sd sqrt(1.5833), t = 1.25 / (sd / 2).
  CHECK(std::abs(p.t - 1.25 / (std::sqrt(19.0 / 12.0) / 2.0)) < 1e-12);
  CHECK(p.df == 3.0);
  CHECK(std::abs(p.p - t_p_numeric(p.t, 3.0)) < 1e-6);
  CHECK_THROWS_AS(t_test_two_sided(std::vector<double>{1, 2}, std::vector<double>{1, 2, 3}, true), MetricError);
}

TEST_CASE("incomplete_beta: closed forms") {
  // I_x(1, 1) = x; I_x(a, 1) = x^a; I_x(1, b) = 1 - (1 - x)^b.
  for (double x : {0.1, 0.37, 0.5, 0.93}) {
    CHECK(incomplete_beta(1, 1, x) == doctest::Approx(x).epsilon(1e-13));
    CHECK(incomplete_beta(2.5, 1, x) == doctest::Approx(std::pow(x, 2.5)).epsilon(1e-13));
    CHECK(incomplete_beta(1, 3.5, x) == doctest::Approx(1 - std::pow(1 - x, 3.5)).epsilon(1e-13));
  }
  // Student t with df = 1 is Cauchy: p = 1 - 2 atan(|t|) / pi.
  CHECK(student_t_two_sided_p(2.0, 1.0) == doctest::Approx(1 - 2 * std::atan(2.0) / M_PI).epsilon(1e-13));
}

TEST_CASE("report: JSON round trip and table layout") {
  RunMetrics r1{1, {0.9, 0.8, {{"a", 0.9, 0.8}}, {}}}, r2{2, {0.7, 0.6, {{"a", 0.7, 0.6}}, {"b"}}};
  auto rep = build_report("model", {"a", "b"}, {r1, r2}, std::vector<double>{0.5, 0.6}, "baseline");
  CHECK(rep.auroc.mean == doctest::Approx(0.8));
  REQUIRE(rep.comparison);
  auto back = report_from_json(to_json(rep));
  CHECK(to_json(back) == to_json(rep));
  const auto table = format_table({rep});
  CHECK(table.find("AUROC [lo, hi]") != std::string::npos);
  CHECK(table.find("AUPR [lo, hi]") != std::string::npos);
  CHECK(table.find("P value") != std::string::npos);
  CHECK(table.find("0.800 [") != std::string::npos);
}
