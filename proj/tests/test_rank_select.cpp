#include <random>

#include <Eigen/SVD>
#include <gtest/gtest.h>

#include "ufm/inference.hpp"
#include "ufm/rank_select.hpp"
#include "ufm/simlab.hpp"
#include "ufm/ufa.hpp"

using namespace ufm;

namespace {

Matrix noiseless_rank_one(Index n, Index t_count) {
  Vector lam(n), f(t_count);
  for (Index i = 0; i < n; ++i) lam(i) = 0.5 + 1.5 * static_cast<double>((i * 7) % n) / n;
  for (Index t = 0; t < t_count; ++t) f(t) = 0.5 + 1.5 * static_cast<double>((t * 11) % t_count) / t_count;
  return lam * f.transpose();
}

}  // namespace

TEST(Pel, SoftThreshold) {
  Vector s(3);
  s << 3, 1, 0.2;
  const Vector out = soft_threshold(s, 0.5);
  EXPECT_DOUBLE_EQ(out(0), 2.5);
  EXPECT_DOUBLE_EQ(out(1), 0.5);
  EXPECT_DOUBLE_EQ(out(2), 0.0);
}

TEST(Pel, SvtMatchesSvdReference) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  for (auto [rows, cols] : {std::pair<int, int>{7, 5}, {5, 9}}) {
    Matrix a(rows, cols);
    a = a.unaryExpr([&](double) { return g(rng); });
    const double thr = 1.1;
    Eigen::BDCSVD<Matrix> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Vector s = soft_threshold(svd.singularValues(), thr);
    const Matrix ref = svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose();
    double nuc = 0;
    const Matrix out = singular_value_threshold(a, thr, &nuc);
    EXPECT_LE((out - ref).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_NEAR(nuc, s.sum(), 1e-10);
  }
}

TEST(Pel, PenaltyFormula) {
  EXPECT_NEAR(nuclear_penalty(50, 80, 0.2), 0.2 * std::sqrt(std::log(4000.0)) * std::sqrt(80.0) / 4000.0, 1e-15);
  const auto box = pel_box(noiseless_rank_one(6, 6));
  EXPECT_LT(box.first, 0.0);
}

TEST(Pel, HugePenaltyKillsEverything) {
  const Matrix y = noiseless_rank_one(20, 20);
  PelOptions opts;
  opts.penalty_const = 1e6;
  const auto res = pel_fit(y, 0.5, opts, pel_box(y));
  EXPECT_LE(res.common.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Pel, NoiselessRecovery) {
  const Matrix y = noiseless_rank_one(40, 40);
  const auto res = pel_fit(y, 0.5, {}, pel_box(y));
  EXPECT_LE((res.common - y).norm() / y.norm(), 0.15);
}

TEST(Pel, ObjectiveNonIncreasing) {
  const auto draw = gen_dgp(30, 30, 2);
  const Matrix& y = draw.panel.values();
  for (double tau : {0.2, 0.5, 0.9}) {
    const auto res = pel_fit(y, tau, {}, pel_box(y));
    ASSERT_GE(res.objective_path.size(), 2u);
    for (std::size_t k = 1; k < res.objective_path.size(); ++k)
      EXPECT_LE(res.objective_path[k], res.objective_path[k - 1] + 1e-12) << "step " << k;
    EXPECT_DOUBLE_EQ(res.objective, res.objective_path.back());
  }
}

TEST(Rank, ZeroPanel) {
  const Matrix y = Matrix::Zero(12, 10);
  const auto report = estimate_r(y, make_quantile_grid(9, 0.04), default_rank_threshold(12, 10));
  EXPECT_EQ(report.r_hat, 0);
  EXPECT_LE(report.eigenvalues.maxCoeff(), 1e-12);
  EXPECT_THROW(warm_start(report, 10.0), UfmError);
}

TEST(Rank, DefaultThreshold) {
  EXPECT_NEAR(default_rank_threshold(50, 60), 1.0 / (12.0 * std::cbrt(50.0)), 1e-15);
}

TEST(Rank, EigenvaluesMatchStackedSingularValues) {
  const auto draw = gen_dgp(20, 16, 9);
  const auto grid = make_quantile_grid(3, 0.04);
  const auto report = estimate_r(draw.panel.values(), grid, default_rank_threshold(20, 16));
  Matrix stacked(3 * 20, 16);
  for (int m = 0; m < 3; ++m) stacked.middleRows(20 * m, 20) = report.common_components[m];
  stacked /= std::sqrt(3.0 * 20 * 16);
  Eigen::BDCSVD<Matrix> svd(stacked);
  ASSERT_EQ(report.eigenvalues.size(), 16);
  for (Index j = 0; j < 16; ++j)
    EXPECT_NEAR(report.eigenvalues(j), svd.singularValues()(j) * svd.singularValues()(j), 1e-8);
  for (Index j = 1; j < 16; ++j) EXPECT_LE(report.eigenvalues(j), report.eigenvalues(j - 1));
  EXPECT_EQ(report.r_hat, (report.eigenvalues.array() >= report.threshold).count());
}

TEST(Rank, ThresholdMonotone) {
  const auto draw = gen_dgp(20, 20, 10);
  const auto grid = make_quantile_grid(9, 0.04);
  int prev = 1 << 30;
  for (double cr : {1e-4, 1e-3, 1e-2, 0.1, 1.0}) {
    const auto report = estimate_r(draw.panel.values(), grid, cr);
    EXPECT_LE(report.r_hat, prev);
    prev = report.r_hat;
  }
}

TEST(Rank, WarmStartOrthonormal) {
  const Matrix y = noiseless_rank_one(20, 20);
  const auto report = estimate_r(y, make_quantile_grid(9, 0.04), default_rank_threshold(20, 20));
  ASSERT_GE(report.r_hat, 1);
  const auto ws = warm_start(report, default_box_bound(y));
  const Matrix ftf = ws.factors.transpose() * ws.factors / 20.0;
  EXPECT_LE((ftf - Matrix::Identity(ws.rank(), ws.rank())).cwiseAbs().maxCoeff(), 1e-10);
  // At the median the warm start reproduces the noiseless panel.
  EXPECT_LE((ws.common_component(4) - y).norm() / y.norm(), 0.15);
  // Single-level variant.
  const auto one = estimate_r(y, make_quantile_grid(9, 0.04).single(4), default_rank_threshold(20, 20));
  EXPECT_EQ(warm_start(one, 10.0, 1).levels(), 1);
}

TEST(Select, StrengthThreshold) {
  EXPECT_NEAR(strength_threshold(100, 1.0, 1.0), 1.0 / std::log(100.0), 1e-15);
  EXPECT_NEAR(strength_threshold(100, 0.5, 2.0), 2.0 * std::pow(100.0, -0.25) / std::log(100.0), 1e-15);
}

TEST(Select, DgpMeanIsWeakQuantileIsStrong) {
  const auto draw = gen_dgp(100, 100, 12);
  const Matrix& y = draw.panel.values();
  const auto grid = make_quantile_grid(9, 0.04);
  auto cfg = default_config(y);
  cfg.rank = 1;
  const auto report = estimate_r(y, grid, default_rank_threshold(100, 100));
  const auto est = ufa_fit(y, grid, cfg, warm_start(report, cfg.box_bound, 1));
  const auto mean = mean_loadings(y, est);
  EXPECT_EQ(select_factors(est, &mean.lam_bar, StrengthTarget::Mean, -1, 1.0, 1.0).selected, 0);
  EXPECT_EQ(select_factors(est, nullptr, StrengthTarget::Quantile, 8, 1.0, 1.0).selected, 1);
  EXPECT_THROW(select_factors(est, nullptr, StrengthTarget::Mean, -1, 1.0, 1.0), UfmError);
  // Non-increasing in alpha.
  int prev = 1 << 30;
  for (double alpha : {0.05, 0.25, 0.5, 0.75, 1.0}) {
    const int sel = select_factors(est, &mean.lam_bar, StrengthTarget::Mean, -1, alpha, 1.0).selected;
    EXPECT_LE(sel, prev);
    prev = sel;
  }
}

TEST(Select, SmallAlphaSelectsAll) {
  FactorEstimate est;
  est.factors = Matrix::Zero(10, 2);
  est.factors(0, 0) = est.factors(1, 1) = std::sqrt(10.0);
  est.loadings = {Matrix::Identity(10, 2) * 0.3};
  const auto rep = select_factors(est, nullptr, StrengthTarget::Quantile, 0, 1e-9, 1e-3);
  EXPECT_EQ(rep.selected, 2);
}
