#pragma once

// Slow reference implementations used to cross-check the analysis routines.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "gprune/numerics.hpp"

namespace gprune::testing {

struct BruteOverlap {
  double best_total = 0.0;  // max over pairings of the summed intersections
  double accuracy = 0.0;
};

// Every bijection between the padded module sets.
inline BruteOverlap brute_overlap(const std::vector<int>& a, int k_a, const std::vector<int>& b, int k_b) {
  const int m = std::max(k_a, k_b);
  std::vector<std::vector<double>> inter(static_cast<std::size_t>(m), std::vector<double>(static_cast<std::size_t>(m), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i) inter[static_cast<std::size_t>(a[i])][static_cast<std::size_t>(b[i])] += 1.0;
  std::vector<int> perm(static_cast<std::size_t>(m));
  std::iota(perm.begin(), perm.end(), 0);
  BruteOverlap r;
  do {
    double total = 0.0;
    for (int i = 0; i < m; ++i) total += inter[static_cast<std::size_t>(i)][static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    r.best_total = std::max(r.best_total, total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  r.accuracy = r.best_total / static_cast<double>(a.size());
  return r;
}

// Kendall tau-b from explicit pair signs.
inline double kendall_pairs(const std::vector<double>& a, const std::vector<double>& b) {
  const std::size_t n = a.size();
  double s = 0.0, n1 = 0.0, n2 = 0.0;
  const double n0 = static_cast<double>(n * (n - 1) / 2);
  auto sign = [](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); };
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j) {
      const double sa = sign(a[i] - a[j]), sb = sign(b[i] - b[j]);
      s += sa * sb;
      n1 += sa == 0.0;
      n2 += sb == 0.0;
    }
  return s / std::sqrt((n0 - n1) * (n0 - n2));
}

// Std over modules of mean drift divided by the mean of module drift stds, with each
// moment computed in a separate pass.
inline double mss_two_pass(const std::vector<int>& assignment, int k, const Vec& drifts) {
  std::vector<double> mu(static_cast<std::size_t>(k), 0.0), sd(static_cast<std::size_t>(k), 0.0), cnt(static_cast<std::size_t>(k), 0.0);
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    mu[static_cast<std::size_t>(assignment[i])] += drifts(static_cast<Eigen::Index>(i));
    cnt[static_cast<std::size_t>(assignment[i])] += 1.0;
  }
  for (int m = 0; m < k; ++m) mu[static_cast<std::size_t>(m)] /= cnt[static_cast<std::size_t>(m)];
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    const double dev = drifts(static_cast<Eigen::Index>(i)) - mu[static_cast<std::size_t>(assignment[i])];
    sd[static_cast<std::size_t>(assignment[i])] += dev * dev;
  }
  double within = 0.0;
  for (int m = 0; m < k; ++m) within += std::sqrt(sd[static_cast<std::size_t>(m)] / cnt[static_cast<std::size_t>(m)]) / k;
  double grand = 0.0;
  for (double v : mu) grand += v / k;
  double between = 0.0;
  for (double v : mu) between += (v - grand) * (v - grand) / k;
  return std::sqrt(between) / within;
}

// Partition with every module nonempty.
inline std::vector<int> random_partition(Rng& rng, int n, int k) {
  std::vector<int> a(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) a[static_cast<std::size_t>(i)] = i < k ? i : static_cast<int>(rng.index(static_cast<std::size_t>(k)));
  for (int i = n - 1; i > 0; --i) std::swap(a[static_cast<std::size_t>(i)], a[rng.index(static_cast<std::size_t>(i + 1))]);
  return a;
}

}  // namespace gprune::testing
