#pragma once

#include "gprune/toymodel.hpp"

#include <span>
#include <vector>

namespace gprune {

struct BcmHyper {
  std::vector<int> candidates{2, 4, 8};
  double gamma_split = 0.80;
  int min_split_size = 4;
  int steps = 15;
  double lr = 0.01;
  double gamma_pair = 0.25;
  double w_sim = 1.0;
  double w_consis = 1.0;
  double w_rep = 1.0;
  double temperature = 1.0;  // softmax temperature on cosine logits
  std::uint64_t seed = 0;

  // Reduced candidate set and split size for d_ffn in the hundreds.
  static BcmHyper desk() { return {}; }
  // Values used at 7B scale.
  static BcmHyper paper() {
    BcmHyper h;
    h.candidates = {16, 24, 32, 40, 48};
    h.min_split_size = 32;
    return h;
  }

  bool operator==(const BcmHyper&) const = default;
};

// Neuron-to-module structure for one FFN layer. Module ids are 0-based.
struct ModulePartition {
  int k = 0;
  std::vector<int> assignment;
  Mat membership;  // N x K soft probabilities, rows sum to 1
  Mat centroids;   // K x D, unit rows
  Vec mean_drift;  // hard-member mean drift per module
  Vec soft_drift;  // membership-weighted mean drift per module

  std::size_t size() const { return assignment.size(); }
  std::vector<int> module_sizes() const;
  std::vector<std::vector<int>> members() const;
};

struct NeuronFeatures {
  Mat x;                        // N x (2*d_model), unit rows
  std::vector<int> degenerate;  // neurons with all-zero input weights
};

// Row i = normalized (gate row i, up row i). Zero neurons get a deterministic basis vector.
NeuronFeatures neuron_features(const ModelWeights& w, int layer);

struct KMeansResult {
  std::vector<int> assignment;
  Mat centroids;
  int iterations = 0;
};

// Spherical k-means with k-means++ seeding under cosine distance.
KMeansResult kmeans_cosine(const Mat& x, int k, std::uint64_t seed, int max_iter = 100);

// Mean silhouette coefficient with distance 1 - cos. Singletons score 0.
double silhouette_cosine(const Mat& x, const std::vector<int>& assignment, int k);

struct SilhouetteSelection {
  int k = 0;
  std::vector<int> candidates;
  std::vector<double> scores;
  KMeansResult clustering;
};

SilhouetteSelection select_k_silhouette(const Mat& x, std::span<const int> candidates, std::uint64_t seed);

// Builds centroids (normalized member means), memberships and drift summaries from a
// hard assignment.
ModulePartition make_partition(const Mat& x, const std::vector<int>& assignment, int k, const Vec& drifts,
                               double temperature = 1.0);

// Soft membership p_ik = softmax_k(cos(x_i, c_k) / temperature).
Mat soft_membership(const Mat& x, const Mat& centroids, double temperature = 1.0);

// Splits every module whose drift std exceeds the gamma_split-quantile of module drift
// stds at its median drift, when both halves have at least min_size neurons.
ModulePartition drift_split(const ModulePartition& partition, const Mat& x, const Vec& drifts, double gamma_split,
                            int min_size, double temperature = 1.0, int* n_splits = nullptr);

struct BcdmLoss {
  double total = 0.0;
  double inner = 0.0;
  double pair = 0.0;
  double consis = 0.0;
  double rep = 0.0;
  bool zero_mass = false;  // some module had zero soft mass
};

BcdmLoss bcdm_loss(const Mat& membership, const Mat& centroids, const Mat& x, const Vec& drifts, const BcmHyper& hyper);

// Loss as a function of the (not necessarily unit) centroids, with its analytic gradient.
BcdmLoss bcdm_loss_and_grad(const Mat& centroids, const Mat& x, const Vec& drifts, const BcmHyper& hyper,
                            Mat* grad = nullptr);

struct RefineTrace {
  std::vector<BcdmLoss> losses;  // losses[0] at initialization, then after each step
  int dropped_modules = 0;
};

ModulePartition refine(const ModulePartition& partition, const Mat& x, const Vec& drifts, const BcmHyper& hyper,
                       RefineTrace* trace = nullptr);

struct ModularizationInfo {
  SilhouetteSelection selection;
  int initial_k = 0;
  int n_splits = 0;
  RefineTrace trace;
};

// Initialization (k-means + silhouette), drift split and refinement for one layer.
ModulePartition modularize_layer(const Mat& x, const Vec& drifts, const BcmHyper& hyper,
                                 ModularizationInfo* info = nullptr);

}  // namespace gprune
