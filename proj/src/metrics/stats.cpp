#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

#include "omae/metrics/metrics.hpp"

namespace omae::metrics {

namespace {

double mean_of(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_variance(std::span<const double> v, double mean) {
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return ss / static_cast<double>(v.size() - 1);
}

// Continued fraction for the incomplete beta function (modified Lentz).
double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-16, kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace

Aggregate aggregate_runs(std::span<const double> values) {
  if (values.empty()) throw MetricError("aggregate_runs needs at least one value");
  Aggregate a;
  a.n = values.size();
  a.mean = mean_of(values);
  if (a.n >= 2) {
    a.std_error = std::sqrt(sample_variance(values, a.mean) / static_cast<double>(a.n));
    a.ci_half_width = 1.96 * a.std_error;
  }
  return a;
}

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw MetricError("incomplete_beta needs positive a and b");
  if (x < 0.0 || x > 1.0) throw MetricError("incomplete_beta needs x in [0, 1]");
  if (x == 0.0 || x == 1.0) return x;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_two_sided_p(double t, double df) {
  if (!(df > 0.0)) throw MetricError("t distribution needs positive degrees of freedom");
  if (std::isinf(t)) return 0.0;
  return incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
}

TTestResult t_test_two_sided(std::span<const double> a, std::span<const double> b, bool paired) {
  if (a.size() < 2 || b.size() < 2) throw MetricError("t-test needs at least two values per sample");
  TTestResult r;
  if (paired) {
    if (a.size() != b.size()) throw MetricError("paired t-test needs samples of equal length");
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    const double md = mean_of(d), vd = sample_variance(d, md);
    r.df = static_cast<double>(d.size() - 1);
    if (vd == 0.0) {
      r.t = md == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), md);
      r.p = md == 0.0 ? 1.0 : 0.0;
      return r;
    }
    r.t = md / std::sqrt(vd / static_cast<double>(d.size()));
  } else {
    const double ma = mean_of(a), mb = mean_of(b);
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    const double va = sample_variance(a, ma) / na, vb = sample_variance(b, mb) / nb;
    if (va + vb == 0.0) {
      r.df = na + nb - 2.0;
      r.t = ma == mb ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), ma - mb);
      r.p = ma == mb ? 1.0 : 0.0;
      return r;
    }
    r.t = (ma - mb) / std::sqrt(va + vb);
    r.df = (va + vb) * (va + vb) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
  }
  r.p = student_t_two_sided_p(r.t, r.df);
  return r;
}

EvalReport build_report(std::string name, std::vector<std::string> classes, std::vector<RunMetrics> runs,
                        std::optional<std::vector<double>> reference_auroc, std::string reference_name,
                        bool paired) {
  if (runs.empty()) throw MetricError("build_report needs at least one run");
  EvalReport rep;
  rep.name = std::move(name);
  rep.classes = std::move(classes);
  rep.runs = std::move(runs);
  std::vector<double> au, ap;
  for (const auto& r : rep.runs) {
    au.push_back(r.result.auroc);
    ap.push_back(r.result.aupr);
  }
  rep.auroc = aggregate_runs(au);
  rep.aupr = aggregate_runs(ap);
  if (reference_auroc) {
    rep.comparison = t_test_two_sided(au, *reference_auroc, paired);
    rep.comparison_name = std::move(reference_name);
  }
  return rep;
}

namespace {

nlohmann::json aggregate_json(const Aggregate& a) {
  return {{"mean", a.mean}, {"std_error", a.std_error}, {"ci_half_width", a.ci_half_width},
          {"lo", a.lo()}, {"hi", a.hi()}, {"n", a.n}};
}

Aggregate aggregate_from_json(const nlohmann::json& j) {
  Aggregate a;
  a.mean = j.at("mean").get<double>();
  a.std_error = j.at("std_error").get<double>();
  a.ci_half_width = j.at("ci_half_width").get<double>();
  a.n = j.at("n").get<std::size_t>();
  return a;
}

}  // namespace

nlohmann::json to_json(const MacroResult& result) {
  nlohmann::json per_class = nlohmann::json::array();
  for (const auto& c : result.per_class) per_class.push_back({{"class", c.name}, {"auroc", c.auroc}, {"aupr", c.aupr}});
  return {{"auroc", result.auroc}, {"aupr", result.aupr}, {"per_class", per_class}, {"skipped_classes", result.skipped}};
}

nlohmann::json to_json(const EvalReport& report) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& r : report.runs) {
    auto j = to_json(r.result);
    j["seed"] = r.seed;
    runs.push_back(std::move(j));
  }
  nlohmann::json j = {{"name", report.name},
                      {"classes", report.classes},
                      {"runs", runs},
                      {"auroc", aggregate_json(report.auroc)},
                      {"aupr", aggregate_json(report.aupr)}};
  if (report.comparison)
    j["comparison"] = {{"against", report.comparison_name},
                       {"t", report.comparison->t},
                       {"df", report.comparison->df},
                       {"p", report.comparison->p}};
  return j;
}

EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport rep;
  rep.name = j.at("name").get<std::string>();
  rep.classes = j.at("classes").get<std::vector<std::string>>();
  for (const auto& r : j.at("runs")) {
    RunMetrics run;
    run.seed = r.at("seed").get<std::uint64_t>();
    run.result.auroc = r.at("auroc").get<double>();
    run.result.aupr = r.at("aupr").get<double>();
    for (const auto& c : r.at("per_class"))
      run.result.per_class.push_back(
          {c.at("class").get<std::string>(), c.at("auroc").get<double>(), c.at("aupr").get<double>()});
    run.result.skipped = r.at("skipped_classes").get<std::vector<std::string>>();
    rep.runs.push_back(std::move(run));
  }
  rep.auroc = aggregate_from_json(j.at("auroc"));
  rep.aupr = aggregate_from_json(j.at("aupr"));
  if (j.contains("comparison")) {
    const auto& c = j.at("comparison");
    rep.comparison = TTestResult{c.at("t").get<double>(), c.at("df").get<double>(), c.at("p").get<double>()};
    rep.comparison_name = c.at("against").get<std::string>();
  }
  return rep;
}

std::string format_table(const std::vector<EvalReport>& reports) {
  std::size_t width = 4;
  for (const auto& r : reports) width = std::max(width, r.name.size());
  std::ostringstream out;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-*s  %-22s  %-22s  %s\n", static_cast<int>(width), "Name",
                "AUROC [lo, hi]", "AUPR [lo, hi]", "P value");
  out << buf;
  for (const auto& r : reports) {
    char au[64], ap[64], pv[32];
    std::snprintf(au, sizeof(au), "%.3f [%.3f, %.3f]", r.auroc.mean, r.auroc.lo(), r.auroc.hi());
    std::snprintf(ap, sizeof(ap), "%.3f [%.3f, %.3f]", r.aupr.mean, r.aupr.lo(), r.aupr.hi());
    if (r.comparison)
      std::snprintf(pv, sizeof(pv), r.comparison->p < 0.001 ? "<0.001" : "%.3f", r.comparison->p);
    else
      std::snprintf(pv, sizeof(pv), "-");
    std::snprintf(buf, sizeof(buf), "%-*s  %-22s  %-22s  %s\n", static_cast<int>(width), r.name.c_str(), au, ap, pv);
    out << buf;
  }
  return out.str();
}

}  // namespace omae::metrics
