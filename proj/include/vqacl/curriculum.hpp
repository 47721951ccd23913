#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace vqacl {

// Self-paced reweighting with the soft regularizer f(v; lambda) =
// lambda * (v^2/2 - v): the per-sample weight minimizing
// v*L + f(v; lambda) over [0,1] in closed form.
inline double spl_weight(double loss, double lambda) {
  if (!(lambda > 0.0)) throw std::invalid_argument("spl_weight: lambda must be > 0");
  if (loss < 0.0) throw std::invalid_argument("spl_weight: loss must be >= 0");
  return loss <= lambda ? 1.0 - loss / lambda : 0.0;
}

struct Pace {
  double fraction;   // K
  double threshold;  // lambda
};

// K = 0.5 + (t/15)*0.1 with real-valued t/15;
// lambda = (max - min)*K + min over the previous epoch's losses.
inline double pace_fraction(int t) {
  if (t < 0) throw std::invalid_argument("pace_fraction: negative epoch index");
  return 0.5 + (static_cast<double>(t) / 15.0) * 0.1;
}

inline Pace update_pace(const std::vector<double>& prev_losses, int t) {
  if (prev_losses.empty()) throw std::invalid_argument("update_pace: empty loss list");
  double lo = prev_losses[0], hi = prev_losses[0];
  for (double l : prev_losses) {
    if (!std::isfinite(l)) throw std::invalid_argument("update_pace: non-finite loss");
    lo = std::min(lo, l);
    hi = std::max(hi, l);
  }
  const double k = pace_fraction(t);
  return Pace{k, (hi - lo) * k + lo};
}

// Per-epoch curriculum state.
struct PaceState {
  int epoch = 0;
  double fraction = 0.5;    // K
  double threshold = 0.0;   // lambda
  std::vector<double> prev_losses;
  std::vector<double> weights;  // v, by sample index
};

// ranking score a_i = prior(type_i) * token_count_i / max token count
inline std::vector<double> ranking_scores(const std::vector<int>& token_counts,
                                          const std::vector<double>& type_priors) {
  if (token_counts.size() != type_priors.size())
    throw std::invalid_argument("ranking_scores: size mismatch");
  if (token_counts.empty()) throw std::invalid_argument("ranking_scores: empty split");
  int max_tokens = 0;
  for (int c : token_counts) max_tokens = std::max(max_tokens, c);
  if (max_tokens <= 0) throw std::invalid_argument("ranking_scores: max token count must be > 0");
  std::vector<double> a(token_counts.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(type_priors[i] > 0.0))
      throw std::invalid_argument("ranking_scores: non-positive prior weight");
    a[i] = type_priors[i] * static_cast<double>(token_counts[i]) /
           static_cast<double>(max_tokens);
  }
  return a;
}

// Initial weight vector inside the curriculum region {v | a.v <= c} with
// c = fraction * sum(a): easiest samples (smallest a) get weight 1 until the
// budget binds, the boundary sample gets the fractional remainder, the rest 0.
// Ties break by sample index. The returned v satisfies a.v <= c exactly under
// index-order summation.
inline std::vector<double> init_curriculum(const std::vector<double>& scores, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw std::invalid_argument("init_curriculum: fraction must be in (0, 1]");
  const std::size_t n = scores.size();
  double total = 0.0;
  for (double a : scores) {
    if (!(a > 0.0)) throw std::invalid_argument("init_curriculum: scores must be positive");
    total += a;
  }
  const double budget = fraction * total;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    return scores[i] != scores[j] ? scores[i] < scores[j] : i < j;
  });

  std::vector<double> v(n, 0.0);
  double used = 0.0;
  std::vector<std::size_t> chosen;
  std::size_t boundary = n;  // index (into v) of the fractional sample, if any
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t i = order[k];
    if (used + scores[i] <= budget) {
      v[i] = 1.0;
      used += scores[i];
      chosen.push_back(i);
    } else {
      double frac = (budget - used) / scores[i];
      if (frac < 0.0) frac = 0.0;
      if (frac > 1.0) frac = 1.0;
      v[i] = frac;
      boundary = i;
      break;
    }
  }

  // a.v <= c must hold exactly under index-order summation (the order every
  // consumer uses). Rounding can push the resummed dot a few ulps past the
  // budget, so shrink weights, boundary first then hardest selected, via
  // bisection; fp addition is monotone in each addend, so this is exact.
  const auto dot = [&]() {
    double d = 0.0;
    for (std::size_t i = 0; i < n; ++i) d += scores[i] * v[i];
    return d;
  };
  std::vector<std::size_t> shrinkable;
  if (boundary < n) shrinkable.push_back(boundary);
  for (auto it = chosen.rbegin(); it != chosen.rend(); ++it) shrinkable.push_back(*it);
  for (std::size_t cand : shrinkable) {
    if (dot() <= budget) break;
    double hi = v[cand];
    v[cand] = 0.0;
    if (dot() > budget) continue;
    double lo = 0.0;
    for (int iter = 0; iter < 80; ++iter) {
      const double mid = 0.5 * (lo + hi);
      if (mid == lo || mid == hi) break;
      v[cand] = mid;
      if (dot() > budget) hi = mid;
      else lo = mid;
    }
    v[cand] = lo;
  }
  return v;
}

}  // namespace vqacl
