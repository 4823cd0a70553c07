#include "gprune/numerics.hpp"

#include <numeric>

namespace gprune {

double quantile(std::span<const double> values, double gamma) {
  if (values.empty()) throw Error("quantile of an empty set");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  gamma = std::clamp(gamma, 0.0, 1.0);
  const double pos = gamma * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  if (frac == 0.0) return sorted[lo];
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

double mean(std::span<const double> values) {
  if (values.empty()) throw Error("mean of an empty set");
  double s = 0.0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

double population_std(std::span<const double> values) {
  const double mu = mean(values);
  double s = 0.0;
  for (double v : values) s += (v - mu) * (v - mu);
  return std::sqrt(s / static_cast<double>(values.size()));
}

void adam_step(std::span<Mat* const> params, std::span<const Mat* const> grads, AdamState& state) {
  require_shape(params.size() == grads.size(), "adam: parameter/gradient count");
  if (state.m.empty()) {
    state.m.reserve(params.size());
    state.v.reserve(params.size());
    for (const Mat* p : params) {
      state.m.push_back(Mat::Zero(p->rows(), p->cols()));
      state.v.push_back(Mat::Zero(p->rows(), p->cols()));
    }
  }
  require_shape(state.m.size() == params.size(), "adam: optimizer state tracks a different parameter set");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_shape(params[i]->rows() == grads[i]->rows() && params[i]->cols() == grads[i]->cols(),
                  "adam: gradient " + std::to_string(i));
    require_shape(state.m[i].rows() == params[i]->rows() && state.m[i].cols() == params[i]->cols(),
                  "adam: moment " + std::to_string(i));
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Mat& m = state.m[i];
    Mat& v = state.v[i];
    const Mat& g = *grads[i];
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g.cwiseProduct(g);
    auto mhat = m.array() / bc1;
    auto vhat = v.array() / bc2;
    params[i]->array() -= state.lr * mhat / (vhat.sqrt() + state.eps);
  }
}

double grad_check(const std::function<double(const Vec&)>& f, const Vec& x, const Vec& analytic_grad, double h) {
  require_shape(x.size() == analytic_grad.size(), "grad_check: gradient length");
  Vec probe = x;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    double f_at[4];
    const double offsets[4] = {2.0 * h, h, -h, -2.0 * h};
    for (int k = 0; k < 4; ++k) {
      probe(i) = x(i) + offsets[k];
      f_at[k] = f(probe);
      if (!std::isfinite(f_at[k]))
        throw Error("grad_check: non-finite function value at coordinate " + std::to_string(i));
    }
    probe(i) = x(i);
    const double fd = (8.0 * (f_at[1] - f_at[2]) - (f_at[0] - f_at[3])) / (12.0 * h);
    const double a = analytic_grad(i);
    const double err = std::abs(fd - a) / std::max(1e-8, std::abs(a) + std::abs(fd));
    worst = std::max(worst, err);
  }
  return worst;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * M_PI * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::size_t Rng::categorical(std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  if (!(total > 0.0)) throw Error("categorical: weights sum to zero");
  const double target = uniform() * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (target < acc) return i;
  }
  for (std::size_t i = weights.size(); i-- > 0;)
    if (weights[i] > 0.0) return i;
  return weights.size() - 1;
}

Mat Rng::normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev) {
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = stddev * normal();
  return m;
}

}  // namespace gprune
