#pragma once

// Slow reference implementations written straight from the definitions.
// The real library is tested against these, never the other way round, so
// keep them free of calibtk includes and obviously correct.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <utility>
#include <vector>

namespace oracle {

using Rows = std::vector<std::vector<double>>;

inline std::vector<double> softmax(std::vector<double> z, double t = 1.0) {
  for (double& v : z) v /= t;
  const double mx = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  std::vector<double> p(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] - mx);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

inline Rows softmax_all(const Rows& logits, double t = 1.0) {
  Rows out;
  out.reserve(logits.size());
  for (const auto& row : logits) out.push_back(softmax(row, t));
  return out;
}

inline double clip_prob(double p) {
  return std::min(0.999, std::max(0.001, p));
}

inline double nll(const Rows& probs, const std::vector<int>& labels) {
  double sum = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i)
    sum += -std::log(clip_prob(probs[i][static_cast<std::size_t>(labels[i])]));
  return sum / static_cast<double>(probs.size());
}

inline double brier(const Rows& probs, const std::vector<int>& labels) {
  double sum = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double miss =
        1.0 - probs[i][static_cast<std::size_t>(labels[i])];
    sum += miss * miss;
  }
  return std::sqrt(sum / static_cast<double>(probs.size()));
}

inline std::size_t argmax(const std::vector<double>& row) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < row.size(); ++c)
    if (row[c] > row[best]) best = c;
  return best;
}

inline double label_error(const Rows& probs, const std::vector<int>& labels) {
  int wrong = 0;
  for (std::size_t i = 0; i < probs.size(); ++i)
    if (argmax(probs[i]) != static_cast<std::size_t>(labels[i])) ++wrong;
  return static_cast<double>(wrong) / static_cast<double>(probs.size());
}

// Equal-count quantile binning: rows sorted ascending by confidence (stable),
// N = q*bins + r, first r bins hold q+1 rows; score is the count-weighted
// mean |accuracy - mean confidence|.
inline double ece(const Rows& probs, const std::vector<int>& labels,
                  int bins = 10) {
  const int n = static_cast<int>(probs.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> conf(static_cast<std::size_t>(n));
  std::vector<bool> correct(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const std::size_t am = argmax(probs[static_cast<std::size_t>(i)]);
    conf[static_cast<std::size_t>(i)] = probs[static_cast<std::size_t>(i)][am];
    correct[static_cast<std::size_t>(i)] =
        am == static_cast<std::size_t>(labels[static_cast<std::size_t>(i)]);
  }
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return conf[static_cast<std::size_t>(a)] <
           conf[static_cast<std::size_t>(b)];
  });
  double total = 0.0;
  int pos = 0;
  for (int b = 0; b < bins; ++b) {
    const int count = n / bins + (b < n % bins ? 1 : 0);
    if (count == 0) continue;
    double c_sum = 0.0, a_sum = 0.0;
    for (int k = 0; k < count; ++k, ++pos) {
      c_sum += conf[static_cast<std::size_t>(order[pos])];
      a_sum += correct[static_cast<std::size_t>(order[pos])] ? 1.0 : 0.0;
    }
    total += (static_cast<double>(count) / n) *
             std::abs(a_sum / count - c_sum / count);
  }
  return total;
}

inline std::optional<double> e99(const Rows& probs,
                                 const std::vector<int>& labels,
                                 double threshold = 0.99) {
  int qualifying = 0, wrong = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const std::size_t am = argmax(probs[i]);
    if (probs[i][am] >= threshold) {
      ++qualifying;
      if (am != static_cast<std::size_t>(labels[i])) ++wrong;
    }
  }
  if (qualifying == 0) return std::nullopt;
  return static_cast<double>(wrong) / qualifying;
}

inline double nll_at_temperature(const Rows& logits,
                                 const std::vector<int>& labels, double t) {
  return nll(softmax_all(logits, t), labels);
}

// Dense linear grid argmin of the temperature-scaled NLL.
inline double best_temperature_grid(const Rows& logits,
                                    const std::vector<int>& labels, double lo,
                                    double hi, int points) {
  double best_t = lo;
  double best_nll = nll_at_temperature(logits, labels, lo);
  for (int i = 1; i < points; ++i) {
    const double t = lo + (hi - lo) * i / static_cast<double>(points - 1);
    const double v = nll_at_temperature(logits, labels, t);
    if (v < best_nll) {
      best_nll = v;
      best_t = t;
    }
  }
  return best_t;
}

// Percentile by linear interpolation between order statistics at rank
// q * (n - 1).
inline double percentile(std::vector<double> values, double q) {
  std::sort(values.begin(), values.end());
  const double rank = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  if (lo + 1 >= values.size()) return values.back();
  const double frac = rank - static_cast<double>(lo);
  return values[lo] + frac * (values[lo + 1] - values[lo]);
}

}  // namespace oracle
