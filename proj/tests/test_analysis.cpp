#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "gprune/analysis.hpp"
#include "oracles.hpp"

using namespace gprune;
using namespace gprune::testing;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int data_rows(const std::filesystem::path& p) {
  std::istringstream in(slurp(p));
  std::string line;
  int n = -2;  // hash line and column header
  while (std::getline(in, line)) ++n;
  return n;
}

}  // namespace

TEST_CASE("kendall tau") {
  const std::vector<double> a{1, 2, 3, 4, 5};
  const std::vector<double> rev{5, 4, 3, 2, 1};
  CHECK(kendall_tau(a, a) == 1.0);
  CHECK(kendall_tau(a, rev) == -1.0);
  CHECK(kendall_tau(std::vector<double>{1, 2, 3}, std::vector<double>{1, 3, 2}) == doctest::Approx(1.0 / 3.0));
  CHECK(kendall_tau(std::vector<double>{1, 1, 2}, std::vector<double>{1, 2, 3}) ==
        doctest::Approx(2.0 / std::sqrt(6.0)).epsilon(1e-15));
  CHECK_THROWS_AS(kendall_tau(std::vector<double>{1}, std::vector<double>{1}), Error);
  CHECK_THROWS_AS(kendall_tau(std::vector<double>{1, 1}, std::vector<double>{1, 2}), Error);

  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + static_cast<int>(rng.index(49));
    std::vector<double> x(static_cast<std::size_t>(n)), y(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      x[static_cast<std::size_t>(i)] = static_cast<double>(rng.index(6));
      y[static_cast<std::size_t>(i)] = static_cast<double>(rng.index(6));
    }
    if (std::adjacent_find(x.begin(), x.end(), std::not_equal_to<>()) == x.end()) continue;
    if (std::adjacent_find(y.begin(), y.end(), std::not_equal_to<>()) == y.end()) continue;
    const double tau = kendall_tau(x, y);
    CHECK(tau == kendall_pairs(x, y));
    CHECK(kendall_tau(y, x) == tau);
  }
  // Antisymmetry under rank reversal when there are no ties.
  RankVector r(20), s(20);
  std::iota(r.begin(), r.end(), 1);
  std::iota(s.begin(), s.end(), 1);
  for (int i = 19; i > 0; --i) std::swap(s[static_cast<std::size_t>(i)], s[rng.index(static_cast<std::size_t>(i + 1))]);
  RankVector s_rev = s;
  for (auto& v : s_rev) v = 21 - v;
  CHECK(kendall_tau(r, s_rev) == doctest::Approx(-kendall_tau(r, s)).epsilon(1e-15));
}

TEST_CASE("module separation score") {
  Vec d(4);
  d << -0.1, 0.1, 0.9, 1.1;
  CHECK(mss({0, 0, 1, 1}, 2, d) == doctest::Approx(5.0).epsilon(1e-14));
  Vec same(4);
  same << 0.0, 1.0, 0.0, 1.0;
  CHECK(mss({0, 0, 1, 1}, 2, same) == 0.0);
  CHECK_THROWS_AS(mss({0, 0, 1, 1}, 2, Vec::Constant(4, 0.3)), UndefinedMssError);
  CHECK_THROWS_AS(mss({0, 0, 0, 0}, 1, d), Error);
  CHECK_THROWS_AS(mss({0, 0, 2, 2}, 3, d), Error);

  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const int k = 2 + static_cast<int>(rng.index(4));
    const int n = k * 2 + static_cast<int>(rng.index(30));
    const std::vector<int> a = random_partition(rng, n, k);
    Vec dd(n);
    for (int i = 0; i < n; ++i) dd(i) = rng.uniform();
    const double m = mss(a, k, dd);
    CHECK(std::abs(m - mss_two_pass(a, k, dd)) < 1e-12);
    const Vec shifted = (dd.array() + 3.0).matrix();
    CHECK(mss(a, k, shifted) == doctest::Approx(m).epsilon(1e-9));
    CHECK(mss(a, k, Vec(dd * 7.5)) == doctest::Approx(m).epsilon(1e-12));
  }
}

TEST_CASE("module overlap") {
  SUBCASE("identical and relabeled") {
    const std::vector<int> a{0, 0, 1, 1, 2, 2, 2};
    const OverlapResult same = module_overlap(a, 3, a, 3);
    CHECK(same.accuracy == 1.0);
    CHECK(same.iou == 1.0);
    std::vector<int> relabeled;
    for (int v : a) relabeled.push_back((v + 1) % 3);
    const OverlapResult r = module_overlap(a, 3, relabeled, 3);
    CHECK(r.accuracy == 1.0);
    CHECK(r.iou == 1.0);
    CHECK(r.pairing == std::vector<int>{1, 2, 0});
    CHECK(!r.padded);
  }
  SUBCASE("matches brute force over all pairings") {
    Rng rng(3);
    for (int trial = 0; trial < 300; ++trial) {
      const int ka = 1 + static_cast<int>(rng.index(5));
      const int kb = 1 + static_cast<int>(rng.index(5));
      const int n = std::max(ka, kb) + static_cast<int>(rng.index(static_cast<std::size_t>(21 - std::max(ka, kb))));
      const std::vector<int> a = random_partition(rng, n, ka);
      const std::vector<int> b = random_partition(rng, n, kb);
      const OverlapResult r = module_overlap(a, ka, b, kb);
      const BruteOverlap o = brute_overlap(a, ka, b, kb);
      CHECK(r.accuracy == o.accuracy);
      CHECK((r.accuracy >= 0.0 && r.accuracy <= 1.0 && r.iou >= 0.0 && r.iou <= 1.0));
      CHECK(r.padded == (ka != kb));
      // One-to-one pairing.
      std::vector<int> cols = r.pairing;
      std::sort(cols.begin(), cols.end());
      CHECK(std::adjacent_find(cols.begin(), cols.end()) == cols.end());
      // Never below the best single intersection.
      CHECK(r.accuracy * n >= r.intersections.maxCoeff());
      // Relabeling either side leaves the scores unchanged.
      std::vector<int> perm(static_cast<std::size_t>(kb));
      std::iota(perm.begin(), perm.end(), 0);
      for (int i = kb - 1; i > 0; --i) std::swap(perm[static_cast<std::size_t>(i)], perm[rng.index(static_cast<std::size_t>(i + 1))]);
      std::vector<int> b2;
      for (int v : b) b2.push_back(perm[static_cast<std::size_t>(v)]);
      CHECK(module_overlap(a, ka, b2, kb).accuracy == r.accuracy);
    }
  }
  SUBCASE("IoU over matched pairs") {
    // a = {0,1},{2,3}; b = {0,1,2},{3}
    const OverlapResult r = module_overlap({0, 0, 1, 1}, 2, {0, 0, 0, 1}, 2);
    CHECK(r.accuracy == 0.75);
    CHECK(r.iou == doctest::Approx((2.0 / 3.0 + 1.0 / 2.0) / 2.0));
    // Padding: the first partition has more modules than the second.
    const OverlapResult p = module_overlap({0, 1, 2, 2}, 3, {0, 0, 1, 1}, 2);
    CHECK(p.padded);
    CHECK(p.iou_pairs == 3);
    CHECK(p.accuracy == 0.75);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(module_overlap({0, 1}, 2, {0, 1, 1}, 2), Error);
    CHECK_THROWS_AS(module_overlap({0, 3}, 2, {0, 1}, 2), Error);
  }
}

TEST_CASE("matching solver against brute force") {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + static_cast<int>(rng.index(6));
    Mat w(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) w(i, j) = std::round(rng.uniform() * 5);
    const std::vector<int> p = max_weight_matching(w);
    double got = 0.0;
    for (int i = 0; i < n; ++i) got += w(i, p[static_cast<std::size_t>(i)]);
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    double best = -1.0;
    do {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += w(i, perm[static_cast<std::size_t>(i)]);
      best = std::max(best, s);
    } while (std::next_permutation(perm.begin(), perm.end()));
    CHECK(got == best);
  }
}

TEST_CASE("partition file round trip") {
  const std::vector<StoredPartition> parts{{0, 3, {0, 1, 2, 2}}, {1, 2, {1, 0}}};
  std::stringstream s;
  write_partitions(s, parts);
  const auto back = read_partitions(s);
  REQUIRE(back.size() == 2);
  CHECK(back[0].assignment == parts[0].assignment);
  CHECK(back[1].k == 2);
  std::istringstream bad("layer 0 k 2\n0 5\n");
  CHECK_THROWS_AS(read_partitions(bad), IoError);
  std::istringstream missing("layer 0 k 2\n");
  CHECK_THROWS_AS(read_partitions(missing), IoError);
}

TEST_CASE("reports") {
  RunReport r;
  r.config_hash = "00ff";
  r.mode = "gprune";
  r.metric = "wanda_sp";
  r.target = 0.5;
  r.retention_actual = r.retention_estimate = 0.515625;
  Rng rng(5);
  for (int l = 0; l < 2; ++l) {
    LayerReport lr;
    lr.scores_a.ffn = Vec::LinSpaced(6, 1, 6);
    lr.scores_b.ffn = Vec::LinSpaced(6, 6, 1);
    lr.scores_a.heads = Vec::LinSpaced(2, 1, 2);
    lr.scores_b.heads = Vec::LinSpaced(2, 1, 2);
    lr.drift.ffn = Vec::LinSpaced(6, 0, 1);
    lr.drift.heads = Vec::Zero(2);
    ModulePartition p;
    p.k = 2;
    p.assignment = {0, 0, 0, 1, 1, 1};
    lr.partition = p;
    lr.ffn_thresholds = Vec::Zero(2);
    r.layers.push_back(lr);
  }
  const auto base = std::filesystem::temp_directory_path() / "gprune_report_test";
  std::filesystem::remove_all(base);
  emit_report(r, (base / "a").string());
  emit_report(r, (base / "b").string());
  for (const char* f : {"units.csv", "modules.csv", "kendall.csv", "mss.csv", "summary.txt"}) {
    CHECK(slurp(base / "a" / f) == slurp(base / "b" / f));
    CHECK(slurp(base / "a" / f).rfind("# config_hash = 00ff\n", 0) == 0);
  }
  CHECK(data_rows(base / "a" / "units.csv") == 2 * (6 + 2));
  CHECK(data_rows(base / "a" / "modules.csv") == 4);
  const std::string summary = slurp(base / "a" / "summary.txt");
  CHECK(summary.find("retention_actual = 0.515625\n") != std::string::npos);
  CHECK(slurp(base / "a" / "kendall.csv").find("0,ffn,-1\n") != std::string::npos);
  std::filesystem::remove_all(base);
}
