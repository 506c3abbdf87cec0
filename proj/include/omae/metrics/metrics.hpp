#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace omae::metrics {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Binary ranking metrics; labels are 0/1.

/// Mann-Whitney AUROC with average ranks for ties.
double roc_auc_binary(std::span<const double> scores, std::span<const std::uint8_t> labels);
/// Step-wise average precision over a descending-score sweep; tied scores
/// form one threshold.
double pr_auc_binary(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// N samples x K classes of scores with a binary target matrix.
struct PredictionSet {
  std::vector<std::string> classes;
  std::vector<std::vector<double>> scores;
  std::vector<std::vector<std::uint8_t>> targets;

  static PredictionSet from_single_labels(std::vector<std::string> classes,
                                          std::vector<std::vector<double>> scores,
                                          std::span<const std::size_t> labels);
  std::size_t num_classes() const { return classes.size(); }
  void validate() const;
};

struct ClassMetric {
  std::string name;
  double auroc = 0.0;
  double aupr = 0.0;
};

struct MacroResult {
  double auroc = 0.0;
  double aupr = 0.0;
  std::vector<ClassMetric> per_class;
  std::vector<std::string> skipped;  // classes without both label values
};

/// One-vs-rest per-class AUROC/AUPR averaged over classes where both label
/// values occur. Throws if no class is evaluable.
MacroResult macro_average(const PredictionSet& set);

/// Classification scoring entry point: a two-class single-label problem is
/// scored in the binary setting on class 1; everything else is macro OvR.
MacroResult evaluate_classification(const PredictionSet& set, bool single_label);

// Text metrics.

/// Lowercase, punctuation removed, whitespace collapsed.
std::string normalize_answer(std::string_view text);
std::vector<std::string> word_tokens(std::string_view text);

struct TextScores {
  double exact_match = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};
TextScores vqa_text_metrics(std::string_view prediction, std::string_view reference);

/// BLEU-1..max_n of one prediction against one or more references, without
/// smoothing. Closest reference length (shorter on ties) for the brevity
/// penalty.
std::vector<double> bleu(std::string_view prediction, const std::vector<std::string>& references,
                         std::size_t max_n = 4);

// Statistics over seeds / splits.

struct Aggregate {
  double mean = 0.0;
  double std_error = 0.0;
  double ci_half_width = 0.0;  // 1.96 x standard error
  std::size_t n = 0;
  double lo() const { return mean - ci_half_width; }
  double hi() const { return mean + ci_half_width; }
};
Aggregate aggregate_runs(std::span<const double> values);

struct TTestResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
};
/// Welch's unequal-variance t-test, or a paired t-test on a - b. Zero
/// variance gives p = 1 for equal means and p = 0 otherwise.
TTestResult t_test_two_sided(std::span<const double> a, std::span<const double> b, bool paired = false);

/// Regularized incomplete beta I_x(a, b) by continued fraction.
double incomplete_beta(double a, double b, double x);
/// Two-sided tail probability P(|T| >= |t|) for Student's t with df degrees.
double student_t_two_sided_p(double t, double df);

// Reports.

struct RunMetrics {
  std::uint64_t seed = 0;
  MacroResult result;
};

struct EvalReport {
  std::string name;
  std::vector<std::string> classes;
  std::vector<RunMetrics> runs;
  Aggregate auroc;
  Aggregate aupr;
  std::optional<TTestResult> comparison;  // AUROC vs a reference set
  std::string comparison_name;
};

EvalReport build_report(std::string name, std::vector<std::string> classes,
                        std::vector<RunMetrics> runs,
                        std::optional<std::vector<double>> reference_auroc = std::nullopt,
                        std::string reference_name = {}, bool paired = false);

nlohmann::json to_json(const MacroResult& result);
nlohmann::json to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);

/// Fixed-width text table: "AUROC [lo, hi] AUPR [lo, hi] P value".
std::string format_table(const std::vector<EvalReport>& reports);

}  // namespace omae::metrics
