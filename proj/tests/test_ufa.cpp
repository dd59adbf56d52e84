#include <random>

#include <gtest/gtest.h>

#include "ufm/parallel.hpp"
#include "ufm/rank_select.hpp"
#include "ufm/simlab.hpp"
#include "ufm/ufa.hpp"

using namespace ufm;

namespace {

FactorEstimate start_for(const Matrix& y, const QuantileGrid& grid, const EstimatorConfig& cfg, int r) {
  const auto report = estimate_r(y, grid, default_rank_threshold(y.rows(), y.cols()));
  return warm_start(report, cfg.box_bound, r);
}

void expect_normalized(const FactorEstimate& est) {
  const Index t = est.factors.rows();
  const Index r = est.factors.cols();
  const Matrix ftf = est.factors.transpose() * est.factors / static_cast<double>(t);
  EXPECT_LE((ftf - Matrix::Identity(r, r)).cwiseAbs().maxCoeff(), 1e-8);
  Matrix gram = Matrix::Zero(r, r);
  for (const auto& l : est.loadings) gram += l.transpose() * l;
  gram /= static_cast<double>(est.levels() * est.loadings.front().rows());
  for (Index a = 0; a < r; ++a) {
    for (Index b = 0; b < r; ++b)
      if (a != b) EXPECT_LE(std::abs(gram(a, b)), 1e-6);
    if (a > 0) EXPECT_GE(gram(a - 1, a - 1), gram(a, a));
    EXPECT_GE(est.factors.col(a).sum(), 0.0);
  }
}

struct ThreadGuard {
  int saved = max_threads();
  ~ThreadGuard() { set_max_threads(saved); }
};

}  // namespace

TEST(Normalize, RankOneEigenvector) {
  Vector u(4), v(6);
  u << 1, -2, 0.5, 3;
  v << 1, 2, -1, 0.5, 1.5, -2;
  v *= std::sqrt(6.0) / v.norm();
  const Matrix l = u * v.transpose();
  // Hand the product in as a different factorization: 2u times v/2.
  const auto est = normalize({2.0 * u}, 0.5 * v);
  const double s = est.factors(0, 0) / v(0);
  EXPECT_NEAR(std::abs(s), 1.0, 1e-12);
  EXPECT_LE((est.factors - s * v).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((est.loadings[0] - s * u).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((est.common_component(0) - l).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Normalize, IdempotentUpToSign) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;
  std::vector<Matrix> lams(3, Matrix(6, 2));
  Matrix f(8, 2);
  for (auto& l : lams) l = l.unaryExpr([&](double) { return g(rng); });
  f = f.unaryExpr([&](double) { return g(rng); });
  const auto once = normalize(lams, f);
  const auto twice = normalize(once.loadings, once.factors);
  EXPECT_LE((once.factors - twice.factors).cwiseAbs().maxCoeff(), 1e-10);
  for (int m = 0; m < 3; ++m)
    EXPECT_LE((once.loadings[m] - twice.loadings[m]).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Normalize, ReconstructsCommonComponents) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g;
  std::vector<Matrix> lams(3, Matrix(6, 2));
  Matrix f(8, 2);
  for (auto& l : lams) l = l.unaryExpr([&](double) { return g(rng); });
  f = f.unaryExpr([&](double) { return g(rng); });
  const auto est = normalize(lams, f);
  for (int m = 0; m < 3; ++m)
    EXPECT_LE((est.common_component(m) - lams[m] * f.transpose()).cwiseAbs().maxCoeff(), 1e-10);
  const Matrix ftf = est.factors.transpose() * est.factors / 8.0;
  EXPECT_LE((ftf - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff(), 1e-12);
  expect_normalized(est);
  EXPECT_GE(est.eigenvalues(0), est.eigenvalues(1));
}

TEST(Normalize, RejectsRankDeficientFactors) {
  Matrix f = Matrix::Ones(5, 2);
  EXPECT_THROW(normalize({Matrix::Ones(4, 2)}, f), UfmError);
}

TEST(Ufa, NoiselessRankOneAtMedian) {
  Vector lam(12), f(10);
  for (Index i = 0; i < 12; ++i) lam(i) = 0.5 + 0.1 * i;
  for (Index t = 0; t < 10; ++t) f(t) = 1.0 + 0.2 * ((t * 7) % 10);
  const Matrix y = lam * f.transpose();
  const auto grid = make_quantile_grid(1, 0.04);
  auto cfg = default_config(y);
  cfg.rank = 1;
  FactorEstimate init;
  init.factors = f + 0.3 * Vector::Ones(10);
  init.loadings = {lam * 0.8};
  const auto est = ufa_fit(y, grid, cfg, init);
  EXPECT_TRUE(est.converged);
  EXPECT_LE((est.common_component(0) - y).cwiseAbs().maxCoeff(), 1e-4);
  expect_normalized(est);
}

TEST(Ufa, NoiselessRankOneSmallBandwidth) {
  // Off the median the smoothed fit is biased by O(h); a small h keeps it close.
  Vector lam(12), f(12);
  for (Index i = 0; i < 12; ++i) lam(i) = 0.5 + 0.1 * i;
  for (Index t = 0; t < 12; ++t) f(t) = 1.0 + 0.15 * ((t * 5) % 12);
  const Matrix y = lam * f.transpose();
  const auto grid = make_quantile_grid(3, 0.01);
  auto cfg = default_config(y);
  cfg.rank = 1;
  cfg.bandwidth_h = 0.01;
  FactorEstimate init;
  init.factors = f;
  init.loadings.assign(3, lam);
  const auto est = ufa_fit(y, grid, cfg, init);
  for (int m = 0; m < 3; ++m)
    EXPECT_LE((est.common_component(m) - y).cwiseAbs().maxCoeff() / y.cwiseAbs().maxCoeff(), 0.02);
}

TEST(Ufa, DeterministicAcrossThreads) {
  ThreadGuard guard;
  const auto draw = gen_dgp(20, 20, 5);
  const auto grid = make_quantile_grid(9, 0.04);
  auto cfg = default_config(draw.panel.values());
  cfg.rank = 1;
  const auto init = start_for(draw.panel.values(), grid, cfg, 1);
  set_max_threads(1);
  const auto a = ufa_fit(draw.panel, grid, cfg, init);
  set_max_threads(4);
  const auto b = ufa_fit(draw.panel, grid, cfg, init);
  const auto c = ufa_fit(draw.panel, grid, cfg, init);
  EXPECT_EQ(a.factors, b.factors);
  EXPECT_EQ(b.factors, c.factors);
  for (int m = 0; m < 9; ++m) EXPECT_EQ(a.loadings[m], b.loadings[m]);
  expect_normalized(a);
}

TEST(Ufa, RankTooLarge) {
  const auto draw = gen_dgp(10, 12, 1);
  const auto grid = make_quantile_grid(3, 0.04);
  auto cfg = default_config(draw.panel.values());
  cfg.rank = 5;
  FactorEstimate init;
  init.factors = Matrix::Ones(12, 5);
  init.loadings.assign(3, Matrix::Ones(10, 5));
  try {
    ufa_fit(draw.panel, grid, cfg, init);
    FAIL() << "expected RankTooLarge";
  } catch (const UfmError& e) {
    EXPECT_EQ(e.code(), ErrorCode::RankTooLarge);
  }
}

TEST(Ufa, UnitWeightsEqualUnweighted) {
  const auto draw = gen_dgp(16, 16, 3);
  const auto grid = make_quantile_grid(9, 0.04);
  auto cfg = default_config(draw.panel.values());
  cfg.rank = 1;
  const auto init = start_for(draw.panel.values(), grid, cfg, 1);
  const WeightTensor ones(9, 16, 16, 1.0);
  const auto a = ufa_fit(draw.panel, grid, cfg, init);
  const auto b = ufa_fit(draw.panel, grid, cfg, init, &ones);
  EXPECT_EQ(a.factors, b.factors);
}

TEST(Ufa, WeightScaleInvariance) {
  const auto draw = gen_dgp(16, 16, 4);
  const auto grid = make_quantile_grid(9, 0.04);
  auto cfg = default_config(draw.panel.values());
  cfg.rank = 1;
  const auto init = start_for(draw.panel.values(), grid, cfg, 1);
  WeightTensor w(9, 16, 16);
  WeightTensor w_scaled(9, 16, 16);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.5, 2.0);
  for (int m = 0; m < 9; ++m) {
    w.slice(m) = w.slice(m).unaryExpr([&](double) { return u(rng); });
    w_scaled.slice(m) = 3.0 * w.slice(m);
  }
  const auto a = ufa_fit(draw.panel, grid, cfg, init, &w);
  const auto b = ufa_fit(draw.panel, grid, cfg, init, &w_scaled);
  EXPECT_LE((a.factors - b.factors).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Ufa, HalfStepsDoNotIncreaseObjective) {
  const auto draw = gen_dgp(10, 10, 6);
  const Matrix& y = draw.panel.values();
  const auto grid = make_quantile_grid(9, 0.04);
  auto cfg = default_config(y);
  cfg.rank = 1;
  const auto kernel = SmoothKernel<double>::gaussian(cfg.kernel_order);
  auto est = start_for(y, grid, cfg, 1);
  Matrix f = est.factors;
  std::vector<Matrix> lam = est.loadings;
  double prev = ufa_objective(y, grid, kernel, cfg.bandwidth_h, lam, f);
  for (int sweep = 0; sweep < 5; ++sweep) {
    f = ufa_update_factors(y, grid, cfg, lam, f);
    const double after_f = ufa_objective(y, grid, kernel, cfg.bandwidth_h, lam, f);
    EXPECT_LE(after_f, prev + 1e-4);
    lam = ufa_update_loadings(y, grid, cfg, f, lam);
    const double after_l = ufa_objective(y, grid, kernel, cfg.bandwidth_h, lam, f);
    EXPECT_LE(after_l, after_f + 1e-4);
    prev = after_l;
  }
}

TEST(Ufa, NormalizationKeepsObjective) {
  const auto draw = gen_dgp(10, 10, 7);
  const Matrix& y = draw.panel.values();
  const auto grid = make_quantile_grid(9, 0.04);
  auto cfg = default_config(y);
  const auto kernel = SmoothKernel<double>::gaussian(14);
  std::vector<Matrix> lam(9, Matrix::Constant(10, 1, 0.7));
  Matrix f = Matrix::Constant(10, 1, 1.3);
  f(2, 0) = 0.4;
  const auto n = normalize(lam, f);
  EXPECT_NEAR(ufa_objective(y, grid, kernel, cfg.bandwidth_h, lam, f),
              ufa_objective(y, grid, kernel, cfg.bandwidth_h, n.loadings, n.factors), 1e-12);
}
