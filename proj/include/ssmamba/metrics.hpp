// SPDX-License-Identifier: Apache-2.0
//
// Classification metrics. AUC counts correctly ordered positive/negative
// pairs in half units (ties count one half), so it is exact, not an
// approximation of the rank statistic.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace ssm {

inline void check_same_length(std::size_t a, std::size_t b, const char* op) {
  if (a != b) throw std::invalid_argument(std::string(op) + ": length mismatch " + std::to_string(a) + " vs " + std::to_string(b));
  if (a == 0) throw std::invalid_argument(std::string(op) + ": no samples");
}

/// Fraction in [0, 1].
inline double accuracy(const std::vector<std::size_t>& y_true, const std::vector<std::size_t>& y_pred) {
  check_same_length(y_true.size(), y_pred.size(), "accuracy");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < y_true.size(); ++i) hit += y_true[i] == y_pred[i];
  return double(hit) / double(y_true.size());
}

/// Unweighted mean of per-class F1 over every label that occurs in either
/// y_true or y_pred. A class with no true and no predicted positives cannot
/// appear, so the denominator 2TP + FP + FN is never zero.
inline double macro_f1(const std::vector<std::size_t>& y_true, const std::vector<std::size_t>& y_pred) {
  check_same_length(y_true.size(), y_pred.size(), "macro_f1");
  std::set<std::size_t> labels(y_true.begin(), y_true.end());
  labels.insert(y_pred.begin(), y_pred.end());
  double total = 0;
  for (std::size_t c : labels) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < y_true.size(); ++i) {
      const bool t = y_true[i] == c, p = y_pred[i] == c;
      tp += t && p;
      fp += !t && p;
      fn += t && !p;
    }
    total += 2.0 * double(tp) / double(2 * tp + fp + fn);
  }
  return total / double(labels.size());
}

struct PairCounts {
  std::uint64_t half_units = 0;  // 2 * correctly ordered + tied
  std::uint64_t positives = 0, negatives = 0;
  double auc() const { return double(half_units) / (2.0 * double(positives) * double(negatives)); }
};

/// Sort-based pair counting, O(n log n).
inline PairCounts auc_pair_counts(const std::vector<int>& is_positive, const std::vector<double>& score) {
  check_same_length(is_positive.size(), score.size(), "auc");
  std::vector<std::size_t> idx(score.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return score[a] < score[b]; });
  PairCounts pc;
  std::uint64_t neg_below = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    std::uint64_t pos = 0, neg = 0;
    while (j < idx.size() && score[idx[j]] == score[idx[i]]) {
      (is_positive[idx[j]] ? pos : neg) += 1;
      ++j;
    }
    pc.half_units += pos * (2 * neg_below + neg);
    neg_below += neg;
    pc.positives += pos;
    pc.negatives += neg;
    i = j;
  }
  if (pc.positives == 0 || pc.negatives == 0) {
    throw std::invalid_argument("auc: undefined with a single class in y_true");
  }
  return pc;
}

/// Binary AUC as a fraction.
inline double auc_binary(const std::vector<int>& is_positive, const std::vector<double>& score) {
  return auc_pair_counts(is_positive, score).auc();
}

/// probs is row-major [n, K]. K == 2 uses class-1 scores; otherwise the
/// one-vs-rest AUCs are averaged over the classes present in y_true.
inline double auc_ovr(const std::vector<std::size_t>& y_true, const std::vector<double>& probs, std::size_t K) {
  if (K < 2) throw std::invalid_argument("auc: need at least 2 classes");
  if (probs.size() != y_true.size() * K) throw std::invalid_argument("auc: score matrix size mismatch");
  std::set<std::size_t> present(y_true.begin(), y_true.end());
  if (present.size() < 2) throw std::invalid_argument("auc: undefined with a single class in y_true");
  auto column = [&](std::size_t c) {
    std::vector<double> s(y_true.size());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = probs[i * K + c];
    return s;
  };
  auto positives = [&](std::size_t c) {
    std::vector<int> p(y_true.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = y_true[i] == c;
    return p;
  };
  if (K == 2) return auc_binary(positives(1), column(1));
  double total = 0;
  for (std::size_t c : present) total += auc_binary(positives(c), column(c));
  return total / double(present.size());
}

/// Percentages, as reported.
struct ClassificationMetrics {
  double acc = 0, macro_f1 = 0, auc = 0;
  bool has_auc = false;
};

inline ClassificationMetrics classification_metrics(const std::vector<std::size_t>& y_true,
                                                    const std::vector<double>& probs, std::size_t K) {
  if (probs.size() != y_true.size() * K) throw std::invalid_argument("metrics: score matrix size mismatch");
  std::vector<std::size_t> pred(y_true.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto row = probs.begin() + static_cast<std::ptrdiff_t>(i * K);
    pred[i] = static_cast<std::size_t>(std::max_element(row, row + static_cast<std::ptrdiff_t>(K)) - row);
  }
  ClassificationMetrics m;
  m.acc = 100.0 * accuracy(y_true, pred);
  m.macro_f1 = 100.0 * macro_f1(y_true, pred);
  if (std::set<std::size_t>(y_true.begin(), y_true.end()).size() >= 2) {
    m.auc = 100.0 * auc_ovr(y_true, probs, K);
    m.has_auc = true;
  }
  return m;
}

/// Two-decimal rounding used in logs and reports.
inline double round2(double v) { return std::round(v * 100.0) / 100.0; }

}  // namespace ssm
