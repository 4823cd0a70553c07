#include "gprune/bcm.hpp"

#include <algorithm>
#include <numeric>

namespace gprune {

std::vector<int> ModulePartition::module_sizes() const {
  std::vector<int> sizes(static_cast<std::size_t>(k), 0);
  for (int a : assignment) ++sizes.at(static_cast<std::size_t>(a));
  return sizes;
}

std::vector<std::vector<int>> ModulePartition::members() const {
  std::vector<std::vector<int>> out(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < assignment.size(); ++i)
    out.at(static_cast<std::size_t>(assignment[i])).push_back(static_cast<int>(i));
  return out;
}

NeuronFeatures neuron_features(const ModelWeights& w, int layer) {
  if (layer < 0 || layer >= w.config.n_layers) throw Error("neuron_features: layer out of range");
  const LayerWeights& L = w.layers[static_cast<std::size_t>(layer)];
  const Eigen::Index n = L.w_gate.rows();
  const Eigen::Index d = L.w_gate.cols();
  NeuronFeatures f;
  f.x.resize(n, 2 * d);
  f.x.leftCols(d) = L.w_gate;
  f.x.rightCols(d) = L.w_up;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double norm = f.x.row(i).norm();
    if (norm > 0.0) {
      f.x.row(i) /= norm;
    } else {
      f.x.row(i).setZero();
      f.x(i, i % (2 * d)) = 1.0;
      f.degenerate.push_back(static_cast<int>(i));
    }
  }
  return f;
}

namespace {

Mat normalized_means(const Mat& x, const std::vector<int>& assignment, int k, const Mat* fallback) {
  Mat c = Mat::Zero(k, x.cols());
  for (std::size_t i = 0; i < assignment.size(); ++i) c.row(assignment[i]) += x.row(static_cast<Eigen::Index>(i));
  for (int j = 0; j < k; ++j) {
    const double norm = c.row(j).norm();
    if (norm > 1e-12) {
      c.row(j) /= norm;
    } else if (fallback && fallback->rows() == k) {
      c.row(j) = fallback->row(j);
    } else {
      c.row(j).setZero();
      c(j, j % x.cols()) = 1.0;
    }
  }
  return c;
}

std::vector<int> argmax_rows(const Mat& m) {
  std::vector<int> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < m.cols(); ++j)
      if (m(i, j) > m(i, best)) best = j;
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

}  // namespace

KMeansResult kmeans_cosine(const Mat& x, int k, std::uint64_t seed, int max_iter) {
  const auto n = static_cast<int>(x.rows());
  if (k < 1) throw Error("kmeans_cosine: K must be >= 1");
  if (k > n) throw Error("kmeans_cosine: K exceeds number of points");
  Rng rng(seed);

  // k-means++ seeding, squared cosine distance weights.
  std::vector<int> chosen{static_cast<int>(rng.index(static_cast<std::size_t>(n)))};
  Vec best_cos = x * x.row(chosen[0]).transpose();
  while (static_cast<int>(chosen.size()) < k) {
    std::vector<double> weights(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      const double dist = std::max(0.0, 1.0 - best_cos(i));
      weights[static_cast<std::size_t>(i)] = dist * dist;
    }
    for (int c : chosen) weights[static_cast<std::size_t>(c)] = 0.0;
    int next;
    if (std::accumulate(weights.begin(), weights.end(), 0.0) > 0.0) {
      next = static_cast<int>(rng.categorical(weights));
    } else {
      std::vector<int> rest;
      for (int i = 0; i < n; ++i)
        if (std::find(chosen.begin(), chosen.end(), i) == chosen.end()) rest.push_back(i);
      next = rest[rng.index(rest.size())];
    }
    chosen.push_back(next);
    best_cos = best_cos.cwiseMax(x * x.row(next).transpose());
  }
  KMeansResult r;
  r.centroids.resize(k, x.cols());
  for (int j = 0; j < k; ++j) r.centroids.row(j) = x.row(chosen[static_cast<std::size_t>(j)]).normalized();

  std::vector<int> previous;
  for (int it = 0; it < max_iter; ++it) {
    const Mat sims = x * r.centroids.transpose();
    std::vector<int> assign = argmax_rows(sims);
    // Repair empty clusters by stealing the point farthest from its own centroid.
    for (int j = 0; j < k; ++j) {
      std::vector<int> sizes(static_cast<std::size_t>(k), 0);
      for (int a : assign) ++sizes[static_cast<std::size_t>(a)];
      if (sizes[static_cast<std::size_t>(j)] > 0) continue;
      int victim = -1;
      double worst = std::numeric_limits<double>::infinity();
      for (int i = 0; i < n; ++i) {
        const int a = assign[static_cast<std::size_t>(i)];
        if (sizes[static_cast<std::size_t>(a)] <= 1) continue;
        if (sims(i, a) < worst) {
          worst = sims(i, a);
          victim = i;
        }
      }
      if (victim >= 0) assign[static_cast<std::size_t>(victim)] = j;
    }
    r.iterations = it + 1;
    r.centroids = normalized_means(x, assign, k, &r.centroids);
    const bool converged = assign == previous;
    previous = std::move(assign);
    if (converged) break;
  }
  r.assignment = std::move(previous);
  return r;
}

double silhouette_cosine(const Mat& x, const std::vector<int>& assignment, int k) {
  const auto n = static_cast<Eigen::Index>(x.rows());
  require_shape(assignment.size() == static_cast<std::size_t>(n), "silhouette: assignment length");
  if (k < 2 || n == 0) return 0.0;
  const Mat dist = (Mat::Ones(n, n) - x * x.transpose()).cwiseMax(0.0);
  std::vector<int> sizes(static_cast<std::size_t>(k), 0);
  for (int a : assignment) ++sizes.at(static_cast<std::size_t>(a));
  double total = 0.0;
  std::vector<double> sums(static_cast<std::size_t>(k));
  for (Eigen::Index i = 0; i < n; ++i) {
    const int own = assignment[static_cast<std::size_t>(i)];
    if (sizes[static_cast<std::size_t>(own)] <= 1) continue;
    std::fill(sums.begin(), sums.end(), 0.0);
    for (Eigen::Index j = 0; j < n; ++j) sums[static_cast<std::size_t>(assignment[static_cast<std::size_t>(j)])] += dist(i, j);
    const double a = sums[static_cast<std::size_t>(own)] / (sizes[static_cast<std::size_t>(own)] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c)
      if (c != own && sizes[static_cast<std::size_t>(c)] > 0)
        b = std::min(b, sums[static_cast<std::size_t>(c)] / sizes[static_cast<std::size_t>(c)]);
    if (!std::isfinite(b)) continue;
    const double m = std::max(a, b);
    if (m > 0.0) total += (b - a) / m;
  }
  return total / static_cast<double>(n);
}

SilhouetteSelection select_k_silhouette(const Mat& x, std::span<const int> candidates, std::uint64_t seed) {
  std::vector<int> sorted(candidates.begin(), candidates.end());
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  SilhouetteSelection sel;
  double best = -std::numeric_limits<double>::infinity();
  for (int k : sorted) {
    if (k < 1 || k > x.rows()) continue;
    KMeansResult km = kmeans_cosine(x, k, seed);
    const double s = silhouette_cosine(x, km.assignment, k);
    sel.candidates.push_back(k);
    sel.scores.push_back(s);
    if (s > best) {
      best = s;
      sel.k = k;
      sel.clustering = std::move(km);
    }
  }
  if (sel.candidates.empty()) throw Error("select_k_silhouette: no valid candidate module count");
  return sel;
}

Mat soft_membership(const Mat& x, const Mat& centroids, double temperature) {
  Mat s = x * centroids.transpose();
  for (Eigen::Index k = 0; k < centroids.rows(); ++k) s.col(k) /= centroids.row(k).norm();
  return softmax_rows(s, temperature);
}

namespace {

void fill_drift_summaries(ModulePartition& p, const Vec& drifts) {
  p.mean_drift = Vec::Zero(p.k);
  p.soft_drift = Vec::Zero(p.k);
  const auto sizes = p.module_sizes();
  for (std::size_t i = 0; i < p.assignment.size(); ++i) p.mean_drift(p.assignment[i]) += drifts(static_cast<Eigen::Index>(i));
  for (int k = 0; k < p.k; ++k) {
    if (sizes[static_cast<std::size_t>(k)] > 0) p.mean_drift(k) /= sizes[static_cast<std::size_t>(k)];
    const double mass = p.membership.col(k).sum();
    if (mass > 0.0) p.soft_drift(k) = p.membership.col(k).dot(drifts) / mass;
  }
}

}  // namespace

ModulePartition make_partition(const Mat& x, const std::vector<int>& assignment, int k, const Vec& drifts,
                               double temperature) {
  require_shape(assignment.size() == static_cast<std::size_t>(x.rows()) && drifts.size() == x.rows(),
                "make_partition: sizes");
  ModulePartition p;
  p.k = k;
  p.assignment = assignment;
  p.centroids = normalized_means(x, assignment, k, nullptr);
  p.membership = soft_membership(x, p.centroids, temperature);
  fill_drift_summaries(p, drifts);
  return p;
}

ModulePartition drift_split(const ModulePartition& partition, const Mat& x, const Vec& drifts, double gamma_split,
                            int min_size, double temperature, int* n_splits) {
  const auto members = partition.members();
  std::vector<double> stds;
  for (const auto& m : members) {
    if (m.empty()) {
      stds.push_back(0.0);
      continue;
    }
    std::vector<double> d;
    for (int i : m) d.push_back(drifts(i));
    stds.push_back(population_std(d));
  }
  const double threshold = quantile(std::span<const double>(stds), gamma_split);
  std::vector<int> assignment = partition.assignment;
  int k = partition.k;
  int splits = 0;
  for (std::size_t m = 0; m < members.size(); ++m) {
    if (!(stds[m] > threshold)) continue;
    std::vector<double> d;
    for (int i : members[m]) d.push_back(drifts(i));
    const double median = quantile(std::span<const double>(d), 0.5);
    std::vector<int> high;
    for (int i : members[m])
      if (drifts(i) > median) high.push_back(i);
    const auto low_count = members[m].size() - high.size();
    if (static_cast<int>(high.size()) < min_size || static_cast<int>(low_count) < min_size) continue;
    for (int i : high) assignment[static_cast<std::size_t>(i)] = k;
    ++k;
    ++splits;
  }
  if (n_splits) *n_splits = splits;
  return make_partition(x, assignment, k, drifts, temperature);
}

namespace {

struct LossParts {
  Mat s;         // N x K cosines
  Mat p;         // N x K memberships
  Vec cnorm;     // centroid norms
  Mat chat;      // unit centroids
};

double pair_term(const Mat& x, const std::vector<int>& hard, int k, double gamma_pair) {
  Mat sums = Mat::Zero(k, x.cols());
  std::vector<int> sizes(static_cast<std::size_t>(k), 0);
  for (std::size_t i = 0; i < hard.size(); ++i) {
    sums.row(hard[i]) += x.row(static_cast<Eigen::Index>(i));
    ++sizes[static_cast<std::size_t>(hard[i])];
  }
  std::vector<double> h(static_cast<std::size_t>(k), 0.0);
  for (int j = 0; j < k; ++j) {
    const double n = sizes[static_cast<std::size_t>(j)];
    if (n > 0) h[static_cast<std::size_t>(j)] = std::max(0.0, 1.0 - sums.row(j).squaredNorm() / (n * n));
  }
  const int m = std::clamp(static_cast<int>(std::ceil(gamma_pair * k - 1e-12)), 1, k);
  std::sort(h.begin(), h.end(), std::greater<>());
  double acc = 0.0;
  for (int j = 0; j < m; ++j) acc += h[static_cast<std::size_t>(j)];
  return acc / m;
}

BcdmLoss evaluate(const Mat& p, const Mat& s, const Mat& chat, const Mat& x, const Vec& drifts, const BcmHyper& hyper,
                  Mat* dL_dp, Mat* dL_ds_direct, Vec* consis_var, Vec* soft_mean, Vec* mass) {
  const auto n = static_cast<double>(x.rows());
  const auto K = static_cast<int>(chat.rows());
  BcdmLoss out;
  out.inner = (p.array() * (1.0 - s.array())).sum() / n;
  out.pair = pair_term(x, argmax_rows(p), K, hyper.gamma_pair);

  Vec m = p.colwise().sum().transpose();
  Vec dt = Vec::Zero(K);
  Vec var = Vec::Zero(K);
  for (int k = 0; k < K; ++k) {
    if (!(m(k) > 0.0)) {
      out.zero_mass = true;
      continue;
    }
    dt(k) = p.col(k).dot(drifts) / m(k);
    var(k) = p.col(k).dot((drifts.array() - dt(k)).square().matrix()) / m(k);
  }
  out.consis = var.sum() / K;

  if (K > 1) {
    const Mat cc = chat * chat.transpose();
    double acc = 0.0;
    for (int a = 0; a < K; ++a)
      for (int b = 0; b < K; ++b)
        if (a != b) acc += cc(a, b) * cc(a, b);
    out.rep = acc / (static_cast<double>(K) * (K - 1));
  }
  out.total = hyper.w_sim * (out.inner + out.pair) + hyper.w_consis * out.consis + hyper.w_rep * out.rep;

  if (dL_dp) {
    *dL_dp = hyper.w_sim * (1.0 - s.array()).matrix() / n;
    for (int k = 0; k < K; ++k) {
      if (!(m(k) > 0.0)) continue;
      dL_dp->col(k).array() +=
          hyper.w_consis / K * (((drifts.array() - dt(k)).square() - var(k)) / m(k));
    }
    *dL_ds_direct = -hyper.w_sim * p / n;
  }
  if (consis_var) *consis_var = var;
  if (soft_mean) *soft_mean = dt;
  if (mass) *mass = m;
  return out;
}

}  // namespace

BcdmLoss bcdm_loss(const Mat& membership, const Mat& centroids, const Mat& x, const Vec& drifts, const BcmHyper& hyper) {
  require_shape(membership.rows() == x.rows() && membership.cols() == centroids.rows() &&
                    centroids.cols() == x.cols() && drifts.size() == x.rows(),
                "bcdm_loss operands");
  Mat chat = centroids;
  for (Eigen::Index k = 0; k < chat.rows(); ++k) chat.row(k).normalize();
  const Mat s = x * chat.transpose();
  return evaluate(membership, s, chat, x, drifts, hyper, nullptr, nullptr, nullptr, nullptr, nullptr);
}

BcdmLoss bcdm_loss_and_grad(const Mat& centroids, const Mat& x, const Vec& drifts, const BcmHyper& hyper, Mat* grad) {
  require_shape(centroids.cols() == x.cols() && drifts.size() == x.rows(), "bcdm_loss_and_grad operands");
  const auto K = static_cast<int>(centroids.rows());
  Vec cnorm(K);
  Mat chat = centroids;
  for (int k = 0; k < K; ++k) {
    cnorm(k) = centroids.row(k).norm();
    if (!(cnorm(k) > 0.0)) throw DegenerateVectorError("bcdm: zero-norm centroid");
    chat.row(k) /= cnorm(k);
  }
  const Mat s = x * chat.transpose();
  const Mat p = softmax_rows(s, hyper.temperature);
  Mat dL_dp, dL_ds;
  BcdmLoss loss = evaluate(p, s, chat, x, drifts, hyper, grad ? &dL_dp : nullptr, grad ? &dL_ds : nullptr, nullptr,
                           nullptr, nullptr);
  if (!grad) return loss;

  // Softmax Jacobian: ds_ik += p_ik (G_ik - sum_j p_ij G_ij) / T.
  const Vec inner = (p.array() * dL_dp.array()).rowwise().sum();
  dL_ds.array() += p.array() * (dL_dp.colwise() - inner).array() / hyper.temperature;

  grad->resize(K, x.cols());
  for (int k = 0; k < K; ++k) {
    const double weighted = dL_ds.col(k).dot(s.col(k));
    grad->row(k) = (dL_ds.col(k).transpose() * x - weighted * chat.row(k)) / cnorm(k);
  }
  if (K > 1 && hyper.w_rep != 0.0) {
    const Mat cc = chat * chat.transpose();
    const double coef = hyper.w_rep * 4.0 / (static_cast<double>(K) * (K - 1));
    for (int k = 0; k < K; ++k) {
      Eigen::RowVectorXd g = Eigen::RowVectorXd::Zero(x.cols());
      for (int j = 0; j < K; ++j)
        if (j != k) g += cc(k, j) * (chat.row(j) - cc(k, j) * chat.row(k));
      grad->row(k) += coef * g / cnorm(k);
    }
  }
  return loss;
}

ModulePartition refine(const ModulePartition& partition, const Mat& x, const Vec& drifts, const BcmHyper& hyper,
                       RefineTrace* trace) {
  if (hyper.steps <= 0) {
    if (trace) trace->losses.push_back(bcdm_loss_and_grad(partition.centroids, x, drifts, hyper));
    return partition;
  }
  Mat c = partition.centroids;
  AdamState adam(hyper.lr);
  Mat grad;
  for (int step = 0; step < hyper.steps; ++step) {
    const BcdmLoss loss = bcdm_loss_and_grad(c, x, drifts, hyper, &grad);
    if (!std::isfinite(loss.total) || !grad.allFinite())
      throw DivergenceError("refine: non-finite loss at step " + std::to_string(step), step);
    if (trace) trace->losses.push_back(loss);
    adam_step(c, grad, adam);
    for (Eigen::Index k = 0; k < c.rows(); ++k) c.row(k).normalize();
  }
  const BcdmLoss final_loss = bcdm_loss_and_grad(c, x, drifts, hyper);
  if (!std::isfinite(final_loss.total)) throw DivergenceError("refine: non-finite final loss", hyper.steps);
  if (trace) trace->losses.push_back(final_loss);

  const Mat p = soft_membership(x, c, hyper.temperature);
  std::vector<int> hard = argmax_rows(p);
  std::vector<int> sizes(static_cast<std::size_t>(c.rows()), 0);
  for (int a : hard) ++sizes[static_cast<std::size_t>(a)];
  std::vector<int> remap(sizes.size(), -1);
  int kept = 0;
  for (std::size_t k = 0; k < sizes.size(); ++k)
    if (sizes[k] > 0) remap[k] = kept++;
  if (trace) trace->dropped_modules = static_cast<int>(sizes.size()) - kept;

  ModulePartition out;
  out.k = kept;
  out.centroids.resize(kept, c.cols());
  for (std::size_t k = 0; k < sizes.size(); ++k)
    if (remap[k] >= 0) out.centroids.row(remap[k]) = c.row(static_cast<Eigen::Index>(k));
  out.assignment.resize(hard.size());
  for (std::size_t i = 0; i < hard.size(); ++i) out.assignment[i] = remap[static_cast<std::size_t>(hard[i])];
  out.membership = soft_membership(x, out.centroids, hyper.temperature);
  fill_drift_summaries(out, drifts);
  return out;
}

ModulePartition modularize_layer(const Mat& x, const Vec& drifts, const BcmHyper& hyper, ModularizationInfo* info) {
  require_shape(drifts.size() == x.rows(), "modularize_layer: drift length");
  SilhouetteSelection sel = select_k_silhouette(x, hyper.candidates, hyper.seed);
  ModulePartition init = make_partition(x, sel.clustering.assignment, sel.k, drifts, hyper.temperature);
  int splits = 0;
  ModulePartition split = drift_split(init, x, drifts, hyper.gamma_split, hyper.min_split_size, hyper.temperature, &splits);
  RefineTrace trace;
  ModulePartition refined = refine(split, x, drifts, hyper, &trace);
  if (info) {
    info->initial_k = sel.k;
    info->selection = std::move(sel);
    info->n_splits = splits;
    info->trace = std::move(trace);
  }
  return refined;
}

}  // namespace gprune
