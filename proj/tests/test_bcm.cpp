#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "gprune/analysis.hpp"
#include "gprune/bcm.hpp"
#include "planted.hpp"
#include "test_helpers.hpp"

using namespace gprune;
using namespace gprune::testing;

namespace {

Mat random_unit_rows(Rng& rng, int n, int d) {
  Mat x = rng.normal_matrix(n, d, 1.0);
  for (int i = 0; i < n; ++i) x.row(i).normalize();
  return x;
}

// Points scattered tightly around the given unit centers.
Mat blobs(Rng& rng, const Mat& centers, int per, double noise, std::vector<int>* labels) {
  const auto k = static_cast<int>(centers.rows());
  Mat x(k * per, centers.cols());
  for (int c = 0; c < k; ++c)
    for (int j = 0; j < per; ++j) {
      x.row(c * per + j) = (centers.row(c) + noise * rng.normal_matrix(1, centers.cols(), 1.0)).normalized();
      if (labels) labels->push_back(c);
    }
  return x;
}

bool pure(const std::vector<int>& assignment, const std::vector<int>& labels) {
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t j = 0; j < labels.size(); ++j)
      if ((labels[i] == labels[j]) != (assignment[i] == assignment[j])) return false;
  return true;
}

}  // namespace

TEST_CASE("neuron features") {
  const ModelConfig c = tiny_config(1, 6, 10, 2);
  ModelWeights w = ModelWeights::init(c, 3);
  auto& L = w.layers[0];
  L.w_gate.row(4) = L.w_gate.row(1);
  L.w_up.row(4) = L.w_up.row(1);
  L.w_gate.row(7).setZero();
  L.w_up.row(7).setZero();
  const NeuronFeatures f = neuron_features(w, 0);
  CHECK((f.x.rowwise().norm().array() - 1.0).abs().maxCoeff() < 1e-12);
  CHECK(f.degenerate == std::vector<int>{7});
  CHECK(f.x.row(4) == f.x.row(1));
  CHECK(f.x.row(4).dot(f.x.row(1)) == doctest::Approx(1.0).epsilon(1e-14));
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 10; ++j) {
      if (i == 7 || j == 7) continue;
      Vec wi(12), wj(12);
      wi << L.w_gate.row(i).transpose(), L.w_up.row(i).transpose();
      wj << L.w_gate.row(j).transpose(), L.w_up.row(j).transpose();
      const double direct = wi.dot(wj) / (wi.norm() * wj.norm());
      CHECK(std::abs(f.x.row(i).dot(f.x.row(j)) - direct) < 1e-9);
    }
  CHECK_THROWS_AS(neuron_features(w, 1), Error);
}

TEST_CASE("kmeans") {
  Rng rng(1);
  SUBCASE("antipodal blobs") {
    Mat centers(2, 5);
    centers.row(0) << 1, 0, 0, 0, 0;
    centers.row(1) = -centers.row(0);
    std::vector<int> labels;
    const Mat x = blobs(rng, centers, 10, 0.1, &labels);
    for (std::uint64_t seed = 0; seed < 5; ++seed) CHECK(pure(kmeans_cosine(x, 2, seed).assignment, labels));
  }
  SUBCASE("single cluster centroid is the normalized mean") {
    const Mat x = random_unit_rows(rng, 12, 4);
    const KMeansResult r = kmeans_cosine(x, 1, 9);
    const Eigen::RowVectorXd mean = x.colwise().sum().normalized();
    CHECK((r.centroids.row(0) - mean).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(std::all_of(r.assignment.begin(), r.assignment.end(), [](int a) { return a == 0; }));
  }
  SUBCASE("deterministic, valid, locally optimal") {
    const Mat x = random_unit_rows(rng, 30, 5);
    const KMeansResult a = kmeans_cosine(x, 4, 7);
    const KMeansResult b = kmeans_cosine(x, 4, 7);
    CHECK(a.assignment == b.assignment);
    CHECK(a.centroids == b.centroids);
    std::vector<int> sizes(4, 0);
    for (int v : a.assignment) ++sizes[static_cast<std::size_t>(v)];
    CHECK(std::count(sizes.begin(), sizes.end(), 0) == 0);
    CHECK((a.centroids.rowwise().norm().array() - 1.0).abs().maxCoeff() < 1e-12);
    // No point would be closer to another centroid than its own.
    if (a.iterations < 100) {
      const Mat sims = x * a.centroids.transpose();
      for (int i = 0; i < 30; ++i) {
        const double own = sims(i, a.assignment[static_cast<std::size_t>(i)]);
        CHECK(sims.row(i).maxCoeff() <= own + 1e-12);
      }
    }
  }
  SUBCASE("errors") {
    const Mat x = random_unit_rows(rng, 3, 4);
    CHECK_THROWS_AS(kmeans_cosine(x, 4, 0), Error);
    CHECK_THROWS_AS(kmeans_cosine(x, 0, 0), Error);
  }
}

TEST_CASE("silhouette") {
  SUBCASE("four-point closed form") {
    // Angles 0, 0.2 in one cluster and pi/2, pi/2 + 0.2 in the other.
    Mat x(4, 2);
    const double t[4] = {0.0, 0.2, M_PI / 2, M_PI / 2 + 0.2};
    for (int i = 0; i < 4; ++i) x.row(i) << std::cos(t[i]), std::sin(t[i]);
    const std::vector<int> a{0, 0, 1, 1};
    double total = 0.0;
    for (int i = 0; i < 4; ++i) {
      double own = 0.0, other = 0.0;
      for (int j = 0; j < 4; ++j) {
        if (j == i) continue;
        const double d = 1.0 - std::cos(t[i] - t[j]);
        (a[static_cast<std::size_t>(j)] == a[static_cast<std::size_t>(i)] ? own : other) += d;
      }
      other /= 2.0;
      total += (other - own) / std::max(own, other);
    }
    CHECK(silhouette_cosine(x, a, 2) == doctest::Approx(total / 4.0).epsilon(1e-12));
  }
  SUBCASE("three blobs select K=3") {
    Rng rng(2);
    Mat centers = Mat::Zero(3, 6);
    centers(0, 0) = centers(1, 2) = centers(2, 4) = 1.0;
    const Mat x = blobs(rng, centers, 12, 0.05, nullptr);
    const std::vector<int> cands{2, 3, 4};
    const SilhouetteSelection sel = select_k_silhouette(x, cands, 1);
    CHECK(sel.k == 3);
    // Brute-force silhouette of the returned clustering agrees with the recorded score.
    CHECK(sel.scores[1] == doctest::Approx(silhouette_cosine(x, sel.clustering.assignment, 3)));
  }
  SUBCASE("identical points tie to the smallest candidate") {
    Mat x = Mat::Zero(10, 3);
    x.col(1).setOnes();
    const std::vector<int> cands{4, 2, 3};
    CHECK(select_k_silhouette(x, cands, 0).k == 2);
  }
  SUBCASE("no valid candidate") {
    const Mat x = Mat::Identity(3, 3);
    const std::vector<int> cands{5, 8};
    CHECK_THROWS_AS(select_k_silhouette(x, cands, 0), Error);
  }
}

TEST_CASE("drift split") {
  Rng rng(5);
  const Mat x = random_unit_rows(rng, 160, 6);
  std::vector<int> assign(160);
  for (int i = 0; i < 160; ++i) assign[static_cast<std::size_t>(i)] = i / 64 < 2 ? i / 64 : 2;  // 64, 64, 32
  SUBCASE("equal spreads do not split") {
    Vec d(160);
    for (int i = 0; i < 160; ++i) d(i) = (i % 2) * 0.3;
    const ModulePartition p = make_partition(x, assign, 3, d);
    int splits = -1;
    const ModulePartition s = drift_split(p, x, d, 0.8, 4, 1.0, &splits);
    CHECK(splits == 0);
    CHECK(s.k == 3);
    CHECK(s.assignment == assign);
  }
  SUBCASE("bimodal module splits in two halves") {
    Vec d = Vec::Constant(160, 0.2);
    for (int i = 0; i < 64; ++i) d(i) = i < 32 ? 0.0 : 1.0;
    const ModulePartition p = make_partition(x, assign, 3, d);
    int splits = -1;
    const ModulePartition s = drift_split(p, x, d, 0.8, 32, 1.0, &splits);
    CHECK(splits == 1);
    CHECK(s.k == 4);
    CHECK(s.module_sizes() == std::vector<int>{32, 64, 32, 32});
    for (int i = 32; i < 64; ++i) CHECK(s.assignment[static_cast<std::size_t>(i)] == 3);
    CHECK(s.mean_drift(0) == 0.0);
    CHECK(s.mean_drift(3) == 1.0);
  }
  SUBCASE("guard blocks small halves") {
    std::vector<int> a2(160, 1);
    for (int i = 0; i < 40; ++i) a2[static_cast<std::size_t>(i)] = 0;
    Vec d = Vec::Constant(160, 0.2);
    for (int i = 0; i < 40; ++i) d(i) = i < 20 ? 0.0 : 1.0;
    const ModulePartition p = make_partition(x, a2, 2, d);
    int splits = -1;
    const ModulePartition s = drift_split(p, x, d, 0.0, 32, 1.0, &splits);
    CHECK(splits == 0);
    CHECK(s.k == 2);
  }
}

TEST_CASE("partition invariants") {
  Rng rng(3);
  const Mat x = random_unit_rows(rng, 40, 5);
  Vec d(40);
  for (int i = 0; i < 40; ++i) d(i) = rng.uniform();
  const KMeansResult km = kmeans_cosine(x, 4, 2);
  const ModulePartition p = make_partition(x, km.assignment, 4, d);
  CHECK((p.membership.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-9);
  CHECK((p.centroids.rowwise().norm().array() - 1.0).abs().maxCoeff() < 1e-12);
  const auto members = p.members();
  for (int k = 0; k < 4; ++k) {
    double s = 0.0;
    for (int i : members[static_cast<std::size_t>(k)]) s += d(i);
    CHECK(p.mean_drift(k) == doctest::Approx(s / members[static_cast<std::size_t>(k)].size()));
    CHECK(p.soft_drift(k) == doctest::Approx(p.membership.col(k).dot(d) / p.membership.col(k).sum()));
  }
}

TEST_CASE("bcdm loss components") {
  BcmHyper h;
  SUBCASE("zero cases") {
    const Mat x = Mat::Identity(4, 4);
    const Mat c = Mat::Identity(4, 4);
    const Mat p = Mat::Identity(4, 4);
    const BcdmLoss l = bcdm_loss(p, c, x, Vec::Constant(4, 0.3), h);
    CHECK(l.inner == 0.0);
    CHECK(l.rep == 0.0);
    CHECK(l.consis == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(l.pair == 0.0);
  }
  SUBCASE("hand values") {
    // Two points split evenly over two orthogonal centroids.
    Mat x(2, 2);
    x << 1, 0, 0, 1;
    const Mat c = Mat::Identity(2, 2);
    const Mat p = Mat::Constant(2, 2, 0.5);
    Vec d(2);
    d << 0.0, 1.0;
    const BcdmLoss l = bcdm_loss(p, c, x, d, h);
    CHECK(l.inner == doctest::Approx(0.5));  // (0.5*0 + 0.5*1) per point
    CHECK(l.consis == doctest::Approx(0.25));
    // Row argmax ties go to module 0, so both points share module 0: h = 1 - |(1,1)/2|^2 = 0.5.
    CHECK(l.pair == doctest::Approx(0.5));
    CHECK(l.total == doctest::Approx(l.inner + l.pair + l.consis + l.rep));
  }
  SUBCASE("pair term takes the worst ceil(gamma K) modules") {
    Rng rng(8);
    const Mat x = random_unit_rows(rng, 24, 4);
    std::vector<int> assign(24);
    for (int i = 0; i < 24; ++i) assign[static_cast<std::size_t>(i)] = i % 4;
    Mat p = Mat::Zero(24, 4);
    for (int i = 0; i < 24; ++i) p(i, i % 4) = 1.0;
    const Mat c = Mat::Identity(4, 4);
    std::vector<double> hs;
    for (int k = 0; k < 4; ++k) {
      Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(4);
      for (int i = k; i < 24; i += 4) sum += x.row(i);
      hs.push_back(1.0 - sum.squaredNorm() / 36.0);
    }
    std::sort(hs.begin(), hs.end(), std::greater<>());
    h.gamma_pair = 0.25;
    CHECK(bcdm_loss(p, c, x, Vec::Zero(24), h).pair == doctest::Approx(hs[0]));
    h.gamma_pair = 0.5;
    CHECK(bcdm_loss(p, c, x, Vec::Zero(24), h).pair == doctest::Approx((hs[0] + hs[1]) / 2));
  }
  SUBCASE("zero mass module is flagged") {
    const Mat x = Mat::Identity(3, 3);
    Mat p = Mat::Zero(3, 2);
    p.col(0).setOnes();
    const BcdmLoss l = bcdm_loss(p, Mat::Identity(2, 3), x, Vec::Ones(3), h);
    CHECK(l.zero_mass);
    CHECK(std::isfinite(l.total));
  }
}

TEST_CASE("bcdm centroid gradient matches finite differences") {
  Rng rng(11);
  BcmHyper h;
  h.gamma_pair = 0.34;
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const Mat x = random_unit_rows(rng, 16, 8);
    Vec d(16);
    for (int i = 0; i < 16; ++i) d(i) = rng.uniform();
    Mat c = rng.normal_matrix(3, 8, 1.0);
    Mat grad;
    bcdm_loss_and_grad(c, x, d, h, &grad);
    // The hard pair term is piecewise constant; differentiate the smooth part only.
    auto f = [&](const Vec& flat) {
      const Mat cc = Eigen::Map<const Mat>(flat.data(), 3, 8);
      const BcdmLoss l = bcdm_loss_and_grad(cc, x, d, h);
      return l.total - h.w_sim * l.pair;
    };
    const Vec c_flat = Eigen::Map<const Vec>(c.data(), c.size());
    const Vec g_flat = Eigen::Map<const Vec>(grad.data(), grad.size());
    worst = std::max(worst, grad_check(f, c_flat, g_flat));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("refinement") {
  const PlantedLayer planted = planted_layer(3);
  BcmHyper h;
  SUBCASE("zero steps leaves the partition unchanged") {
    const ModulePartition p = make_partition(planted.x, planted.truth, 5, planted.drifts);
    h.steps = 0;
    const ModulePartition r = refine(p, planted.x, planted.drifts, h);
    CHECK(r.assignment == p.assignment);
    CHECK(r.centroids == p.centroids);
  }
  SUBCASE("descends from k-means initialization and keeps invariants") {
    int descended = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const KMeansResult km = kmeans_cosine(planted.x, 5, seed);
      const ModulePartition p = make_partition(planted.x, km.assignment, 5, planted.drifts);
      RefineTrace trace;
      const ModulePartition r = refine(p, planted.x, planted.drifts, h, &trace);
      CHECK(trace.losses.size() == static_cast<std::size_t>(h.steps + 1));
      for (const auto& l : trace.losses) {
        CHECK(l.inner >= 0.0);
        CHECK(l.pair >= 0.0);
        CHECK(l.consis >= 0.0);
        CHECK(l.rep >= 0.0);
      }
      descended += trace.losses.back().total <= trace.losses.front().total;
      CHECK((r.membership.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-9);
      CHECK(r.k + trace.dropped_modules == 5);
      const auto sizes = r.module_sizes();
      CHECK(std::count(sizes.begin(), sizes.end(), 0) == 0);
    }
    CHECK(descended >= 9);
  }
}

TEST_CASE("modularization recovers planted groups and is deterministic") {
  BcmHyper h;
  int recovered = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const PlantedLayer planted = planted_layer(100 + seed);
    h.seed = seed;
    ModularizationInfo info;
    const ModulePartition p = modularize_layer(planted.x, planted.drifts, h, &info);
    const ModulePartition again = modularize_layer(planted.x, planted.drifts, h);
    CHECK(p.assignment == again.assignment);
    CHECK(info.initial_k == 4);
    CHECK(info.n_splits >= 1);
    const OverlapResult o = module_overlap(planted.truth, planted.groups, p.assignment, p.k);
    recovered += o.accuracy >= 0.9;
  }
  CHECK(recovered == 3);
}
