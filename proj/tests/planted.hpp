#pragma once

#include "gprune/numerics.hpp"

#include <vector>

namespace gprune::testing {

// Synthetic FFN layer: four orthogonal parameter clusters of equal size. Cluster 0 is two
// close sub-blobs with low and high drift; the other clusters have near-constant drift.
// Ground truth has five groups: sub-blob 0a, sub-blob 0b, clusters 1..3.
struct PlantedLayer {
  Mat x;
  Vec drifts;
  std::vector<int> truth;
  int groups = 5;
};

inline PlantedLayer planted_layer(std::uint64_t seed, int n = 256, int dim = 16, double noise = 0.02,
                                  double sub_offset = 0.2) {
  Rng rng(seed);
  PlantedLayer p;
  p.x.resize(n, dim);
  p.drifts.resize(n);
  p.truth.resize(static_cast<std::size_t>(n));
  const int per = n / 4;
  Eigen::RowVectorXd v = Eigen::RowVectorXd::Zero(dim);
  v(4) = 1.0;  // sub-blob axis, orthogonal to all four cluster axes
  for (int i = 0; i < n; ++i) {
    const int cluster = std::min(i / per, 3);
    Eigen::RowVectorXd center = Eigen::RowVectorXd::Zero(dim);
    center(cluster) = 1.0;
    int group = cluster + 1;
    double drift = 0.1 + 0.02 * rng.normal();
    if (cluster == 0) {
      const bool high = (i % per) >= per / 2;
      center += (high ? sub_offset : -sub_offset) * v;
      group = high ? 1 : 0;
      drift = (high ? 0.85 : 0.05) + 0.02 * rng.normal();
    }
    Eigen::RowVectorXd row = center.normalized() + noise * rng.normal_matrix(1, dim, 1.0);
    p.x.row(i) = row.normalized();
    p.drifts(i) = std::clamp(drift, 0.0, 1.0);
    p.truth[static_cast<std::size_t>(i)] = group;
  }
  return p;
}

}  // namespace gprune::testing
