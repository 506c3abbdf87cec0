#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <sstream>

#include "omae/metrics/metrics.hpp"

namespace omae::metrics {

std::string normalize_answer(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::ispunct(c)) continue;
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

std::vector<std::string> word_tokens(std::string_view text) {
  std::istringstream in{normalize_answer(text)};
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

TextScores vqa_text_metrics(std::string_view prediction, std::string_view reference) {
  TextScores s;
  const auto pred = word_tokens(prediction), ref = word_tokens(reference);
  s.exact_match = normalize_answer(prediction) == normalize_answer(reference) ? 1.0 : 0.0;
  if (pred.empty() && ref.empty()) {
    s.precision = s.recall = s.f1 = 1.0;
    return s;
  }
  if (pred.empty() || ref.empty()) return s;
  std::map<std::string, int> ref_counts;
  for (const auto& w : ref) ++ref_counts[w];
  std::size_t overlap = 0;
  for (const auto& w : pred) {
    auto it = ref_counts.find(w);
    if (it != ref_counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  s.precision = static_cast<double>(overlap) / static_cast<double>(pred.size());
  s.recall = static_cast<double>(overlap) / static_cast<double>(ref.size());
  s.f1 = overlap == 0 ? 0.0 : 2.0 * s.precision * s.recall / (s.precision + s.recall);
  return s;
}

namespace {

using Ngrams = std::map<std::vector<std::string>, std::size_t>;

Ngrams count_ngrams(const std::vector<std::string>& tokens, std::size_t n) {
  Ngrams out;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i)
    ++out[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                   tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return out;
}

}  // namespace

std::vector<double> bleu(std::string_view prediction, const std::vector<std::string>& references,
                         std::size_t max_n) {
  if (max_n < 1 || max_n > 4) throw MetricError("BLEU order must be between 1 and 4");
  if (references.empty()) throw MetricError("BLEU needs at least one reference");
  std::vector<double> out(max_n, 0.0);
  const auto pred = word_tokens(prediction);
  if (pred.empty()) return out;
  std::vector<std::vector<std::string>> refs;
  for (const auto& r : references) refs.push_back(word_tokens(r));

  const double c = static_cast<double>(pred.size());
  std::size_t ref_len = refs.front().size();
  for (const auto& r : refs) {
    const auto d = std::abs(static_cast<long>(r.size()) - static_cast<long>(pred.size()));
    const auto best = std::abs(static_cast<long>(ref_len) - static_cast<long>(pred.size()));
    if (d < best || (d == best && r.size() < ref_len)) ref_len = r.size();
  }
  const double bp = std::min(1.0, std::exp(1.0 - static_cast<double>(ref_len) / c));

  double log_sum = 0.0;
  bool zero = false;
  for (std::size_t n = 1; n <= max_n; ++n) {
    const auto pc = count_ngrams(pred, n);
    std::size_t total = 0, clipped = 0;
    for (const auto& [gram, count] : pc) {
      std::size_t max_ref = 0;
      for (const auto& r : refs) {
        const auto rc = count_ngrams(r, n);
        auto it = rc.find(gram);
        if (it != rc.end()) max_ref = std::max(max_ref, it->second);
      }
      clipped += std::min(count, max_ref);
      total += count;
    }
    if (total == 0 || clipped == 0) zero = true;
    if (!zero) log_sum += std::log(static_cast<double>(clipped) / static_cast<double>(total));
    out[n - 1] = zero ? 0.0 : bp * std::exp(log_sum / static_cast<double>(n));
  }
  return out;
}

}  // namespace omae::metrics
