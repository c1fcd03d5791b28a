#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hitl/error.hpp"

namespace hitl {

using FeatureVector = std::vector<double>;

/// Mixture of K Gaussians with diagonal covariances.
struct GmmModel {
  std::size_t K = 0;
  std::size_t D = 0;
  std::vector<double> weights;
  std::vector<FeatureVector> means;
  std::vector<FeatureVector> variances;
  std::vector<double> log_likelihood_history;  // total log-likelihood before each update, then of the result

  bool operator==(const GmmModel&) const = default;
};

inline void to_json(nlohmann::json& j, const GmmModel& g) {
  j = {{"K", g.K}, {"D", g.D}, {"weights", g.weights}, {"means", g.means}, {"variances", g.variances},
       {"log_likelihood_history", g.log_likelihood_history}};
}

struct GmmOptions {
  std::size_t iterations = 100;
  double tolerance = 1e-8;
  double variance_floor = 1e-6;
};

namespace detail {

inline double log_sum_exp(const std::vector<double>& v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline double log_gaussian_diag(const FeatureVector& x, const FeatureVector& mean, const FeatureVector& var) {
  double acc = 0.0;
  for (std::size_t d = 0; d < x.size(); ++d) {
    const double diff = x[d] - mean[d];
    acc += std::log(2.0 * std::numbers::pi * var[d]) + diff * diff / var[d];
  }
  return -0.5 * acc;
}

// Component-wise log(pi_k) + log N(x | k).
inline std::vector<double> joint_log_density(const GmmModel& g, const FeatureVector& x) {
  std::vector<double> out(g.K);
  for (std::size_t k = 0; k < g.K; ++k) {
    out[k] = (g.weights[k] > 0 ? std::log(g.weights[k]) : -std::numeric_limits<double>::infinity()) +
             log_gaussian_diag(x, g.means[k], g.variances[k]);
  }
  return out;
}

inline double unit_draw(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double squared_distance(const FeatureVector& a, const FeatureVector& b) {
  double s = 0.0;
  for (std::size_t d = 0; d < a.size(); ++d) s += (a[d] - b[d]) * (a[d] - b[d]);
  return s;
}

inline void check_features(const std::vector<FeatureVector>& X, std::size_t D) {
  for (const auto& x : X) {
    if (x.size() != D) {
      throw ContractError("feature dimension " + std::to_string(x.size()) + " does not match " + std::to_string(D));
    }
    for (double v : x)
      if (!std::isfinite(v)) throw ContractError("non-finite feature value");
  }
}

}  // namespace detail

/// Seeded k-means++ means, uniform weights, global per-dimension variance.
inline GmmModel initialize_gmm(const std::vector<FeatureVector>& X, std::size_t K, std::uint64_t seed,
                               double variance_floor = 1e-6) {
  if (K == 0) throw ContractError("GMM needs at least one component");
  if (X.empty()) throw ContractError("GMM needs at least one feature vector");
  const std::size_t N = X.size(), D = X[0].size();
  detail::check_features(X, D);
  if (std::set<FeatureVector>(X.begin(), X.end()).size() < K) {
    throw ContractError("GMM with " + std::to_string(K) + " components needs at least " + std::to_string(K) +
                        " distinct feature vectors");
  }
  GmmModel g;
  g.K = K;
  g.D = D;
  g.weights.assign(K, 1.0 / static_cast<double>(K));

  std::mt19937_64 rng(seed);
  std::vector<double> nearest(N, std::numeric_limits<double>::infinity());
  std::size_t pick = static_cast<std::size_t>(detail::unit_draw(rng) * static_cast<double>(N));
  for (std::size_t k = 0; k < K; ++k) {
    if (k > 0) {
      double total = 0.0;
      for (double d : nearest) total += d;
      const double target = detail::unit_draw(rng) * total;
      double run = 0.0;
      pick = N;
      for (std::size_t i = 0; i < N; ++i) {
        if (nearest[i] <= 0.0) continue;
        run += nearest[i];
        pick = i;
        if (run > target) break;
      }
    }
    g.means.push_back(X[pick]);
    for (std::size_t i = 0; i < N; ++i) nearest[i] = std::min(nearest[i], detail::squared_distance(X[i], X[pick]));
  }

  FeatureVector mean(D, 0.0), var(D, 0.0);
  for (const auto& x : X)
    for (std::size_t d = 0; d < D; ++d) mean[d] += x[d] / static_cast<double>(N);
  for (const auto& x : X)
    for (std::size_t d = 0; d < D; ++d) var[d] += (x[d] - mean[d]) * (x[d] - mean[d]) / static_cast<double>(N);
  for (auto& v : var) v = std::max(v, variance_floor);
  g.variances.assign(K, var);
  return g;
}

/// Total log-likelihood of X under g.
inline double gmm_log_likelihood(const GmmModel& g, const std::vector<FeatureVector>& X) {
  double ll = 0.0;
  for (const auto& x : X) ll += detail::log_sum_exp(detail::joint_log_density(g, x));
  return ll;
}

/// EM from a given starting point. Stops after `iterations` updates or when
/// an update improves the log-likelihood by less than the tolerance.
inline GmmModel run_em(GmmModel g, const std::vector<FeatureVector>& X, const GmmOptions& opt = {}) {
  detail::check_features(X, g.D);
  const std::size_t N = X.size(), K = g.K, D = g.D;
  g.log_likelihood_history.clear();
  std::vector<std::vector<double>> resp(N, std::vector<double>(K));
  for (std::size_t it = 0; it <= opt.iterations; ++it) {
    double ll = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      resp[i] = detail::joint_log_density(g, X[i]);
      const double lse = detail::log_sum_exp(resp[i]);
      ll += lse;
      for (auto& r : resp[i]) r = std::exp(r - lse);
    }
    const bool converged = !g.log_likelihood_history.empty() && ll - g.log_likelihood_history.back() < opt.tolerance;
    g.log_likelihood_history.push_back(ll);
    if (converged || it == opt.iterations) break;

    for (std::size_t k = 0; k < K; ++k) {
      double nk = 0.0;
      for (std::size_t i = 0; i < N; ++i) nk += resp[i][k];
      g.weights[k] = nk / static_cast<double>(N);
      if (nk <= 0.0) continue;
      FeatureVector mean(D, 0.0), var(D, 0.0);
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t d = 0; d < D; ++d) mean[d] += resp[i][k] * X[i][d];
      for (auto& m : mean) m /= nk;
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t d = 0; d < D; ++d) var[d] += resp[i][k] * (X[i][d] - mean[d]) * (X[i][d] - mean[d]);
      for (auto& v : var) v = std::max(v / nk, opt.variance_floor);
      g.means[k] = std::move(mean);
      g.variances[k] = std::move(var);
    }
  }
  return g;
}

inline GmmModel fit_gmm(const std::vector<FeatureVector>& X, std::size_t K, std::uint64_t seed,
                        const GmmOptions& opt = {}) {
  return run_em(initialize_gmm(X, K, seed, opt.variance_floor), X, opt);
}

/// ln g(x) for each feature vector.
inline std::vector<double> score_samples(const GmmModel& g, const std::vector<FeatureVector>& X) {
  detail::check_features(X, g.D);
  std::vector<double> out;
  out.reserve(X.size());
  for (const auto& x : X) out.push_back(detail::log_sum_exp(detail::joint_log_density(g, x)));
  return out;
}

}  // namespace hitl
