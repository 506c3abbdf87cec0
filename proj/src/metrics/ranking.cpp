#include <algorithm>
#include <numeric>

#include "omae/metrics/metrics.hpp"

namespace omae::metrics {

namespace {

void check_binary_input(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size())
    throw MetricError("scores and labels differ in length (" + std::to_string(scores.size()) +
                      " vs " + std::to_string(labels.size()) + ")");
  for (auto l : labels)
    if (l > 1) throw MetricError("binary labels must be 0 or 1");
}

std::vector<std::size_t> descending_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace

double roc_auc_binary(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  check_binary_input(scores, labels);
  const std::size_t n = scores.size();
  const std::size_t pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) throw MetricError("AUROC is undefined unless both classes are present");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Average 1-based ranks over tie groups; ranks are exact half-integers.
  double pos_rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]]) pos_rank_sum += avg_rank;
    i = j;
  }
  const double np = static_cast<double>(pos), nn = static_cast<double>(neg);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

double pr_auc_binary(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  check_binary_input(scores, labels);
  const std::size_t pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  if (pos == 0) throw MetricError("AUPR is undefined without positive samples");
  const auto order = descending_order(scores);
  double ap = 0.0, prev_recall = 0.0;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      tp += labels[order[j]];
      ++j;
    }
    seen = j;
    const double recall = static_cast<double>(tp) / static_cast<double>(pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(seen);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

PredictionSet PredictionSet::from_single_labels(std::vector<std::string> classes,
                                                std::vector<std::vector<double>> scores,
                                                std::span<const std::size_t> labels) {
  PredictionSet set;
  set.classes = std::move(classes);
  set.scores = std::move(scores);
  const std::size_t K = set.classes.size();
  for (auto l : labels) {
    if (l >= K) throw MetricError("label " + std::to_string(l) + " out of range for " + std::to_string(K) + " classes");
    std::vector<std::uint8_t> row(K, 0);
    row[l] = 1;
    set.targets.push_back(std::move(row));
  }
  set.validate();
  return set;
}

void PredictionSet::validate() const {
  if (scores.size() != targets.size()) throw MetricError("PredictionSet: scores and targets differ in length");
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (scores[i].size() != classes.size() || targets[i].size() != classes.size())
      throw MetricError("PredictionSet: row " + std::to_string(i) + " does not have " +
                        std::to_string(classes.size()) + " entries");
}

MacroResult macro_average(const PredictionSet& set) {
  set.validate();
  MacroResult out;
  const std::size_t N = set.scores.size();
  std::vector<double> col(N);
  std::vector<std::uint8_t> lab(N);
  for (std::size_t k = 0; k < set.num_classes(); ++k) {
    std::size_t positives = 0;
    for (std::size_t i = 0; i < N; ++i) {
      col[i] = set.scores[i][k];
      lab[i] = set.targets[i][k] ? 1 : 0;
      positives += lab[i];
    }
    if (positives == 0 || positives == N) {
      out.skipped.push_back(set.classes[k]);
      continue;
    }
    out.per_class.push_back({set.classes[k], roc_auc_binary(col, lab), pr_auc_binary(col, lab)});
  }
  if (out.per_class.empty()) throw MetricError("no class has both positive and negative samples");
  for (const auto& c : out.per_class) {
    out.auroc += c.auroc;
    out.aupr += c.aupr;
  }
  out.auroc /= static_cast<double>(out.per_class.size());
  out.aupr /= static_cast<double>(out.per_class.size());
  return out;
}

MacroResult evaluate_classification(const PredictionSet& set, bool single_label) {
  if (!(single_label && set.num_classes() == 2)) return macro_average(set);
  PredictionSet positive;
  positive.classes = {set.classes[1]};
  for (std::size_t i = 0; i < set.scores.size(); ++i) {
    positive.scores.push_back({set.scores[i][1]});
    positive.targets.push_back({set.targets[i][1]});
  }
  return macro_average(positive);
}

}  // namespace omae::metrics
