#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gprune {

template <typename Scalar>
using MatrixT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorT = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Mat = MatrixT<double>;
using Vec = VectorT<double>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class DegenerateVectorError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError("shape mismatch: " + what);
}

// Cosine similarity. Throws DegenerateVectorError when either input has zero norm.
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar cosine(const Eigen::MatrixBase<DerivedA>& u,
                                 const Eigen::MatrixBase<DerivedB>& v) {
  using Scalar = typename DerivedA::Scalar;
  require_shape(u.size() == v.size(), "cosine operands differ in length");
  const Scalar nu = u.norm();
  const Scalar nv = v.norm();
  if (!(nu > Scalar(0)) || !(nv > Scalar(0)))
    throw DegenerateVectorError("cosine of a zero-norm vector");
  const Scalar c = u.cwiseProduct(v).sum() / (nu * nv);
  return std::clamp(c, Scalar(-1), Scalar(1));
}

// Max-shifted softmax of a vector of logits.
template <typename Derived>
VectorT<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  VectorT<Scalar> out(logits.size());
  if (logits.size() == 0) return out;
  const Scalar mx = logits.maxCoeff();
  for (Eigen::Index i = 0; i < logits.size(); ++i) out(i) = std::exp(logits(i) - mx);
  out /= out.sum();
  return out;
}

// Row-wise softmax (each row treated as a logit vector), optionally temperature-scaled.
template <typename Derived>
MatrixT<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& logits,
                                               typename Derived::Scalar temperature = 1) {
  using Scalar = typename Derived::Scalar;
  MatrixT<Scalar> out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const Scalar mx = logits.row(r).maxCoeff();
    Scalar sum = 0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      out(r, c) = std::exp((logits(r, c) - mx) / temperature);
      sum += out(r, c);
    }
    out.row(r) /= sum;
  }
  return out;
}

// Empirical quantile, linear interpolation at position gamma*(n-1) of the sorted values.
double quantile(std::span<const double> values, double gamma);

inline double quantile(const Vec& values, double gamma) {
  return quantile(std::span<const double>(values.data(), static_cast<size_t>(values.size())), gamma);
}

// Population mean / standard deviation (divide by n).
double mean(std::span<const double> values);
double population_std(std::span<const double> values);

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::vector<Mat> m;
  std::vector<Mat> v;

  AdamState() = default;
  explicit AdamState(double learning_rate) : lr(learning_rate) {}
};

// Bias-corrected Adam update, in place. Moment buffers are created lazily on the
// first call and must shape-match on every later call.
void adam_step(std::span<Mat* const> params, std::span<const Mat* const> grads, AdamState& state);

inline void adam_step(Mat& param, const Mat& grad, AdamState& state) {
  Mat* p[] = {&param};
  const Mat* g[] = {&grad};
  adam_step(std::span<Mat* const>(p), std::span<const Mat* const>(g), state);
}

// Max relative error between fourth-order central differences and an analytic gradient:
// max_i |fd_i - a_i| / max(1e-8, |a_i| + |fd_i|).
double grad_check(const std::function<double(const Vec&)>& f, const Vec& x, const Vec& analytic_grad,
                  double h = 1e-4);

std::uint64_t splitmix64(std::uint64_t x);

// Deterministic random stream; substreams are derived by hashing (seed, index).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(splitmix64(seed)) {}

  Rng substream(std::uint64_t index) const {
    return Rng(splitmix64(seed_ ^ splitmix64(index + 0x632be59bd9b4e019ULL)));
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Standard normal via Box-Muller; does not depend on the stdlib distribution implementation.
  double normal();
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n; }
  // Sample an index with probability proportional to weights (all >= 0, sum > 0).
  std::size_t categorical(std::span<const double> weights);

  Mat normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline bool all_finite(const Mat& m) { return m.allFinite(); }

}  // namespace gprune
