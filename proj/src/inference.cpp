#include "ufm/inference.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Eigenvalues>

#include "ufm/parallel.hpp"

namespace ufm {

MeanLoadings mean_loadings(const Eigen::Ref<const Matrix>& y, const FactorEstimate& estimate) {
  const Index t_count = estimate.factors.rows();
  if (y.cols() != t_count)
    throw UfmError(ErrorCode::InvalidArgument, "panel and factors disagree on T");
  MeanLoadings out;
  out.lam_bar = y * estimate.factors / static_cast<double>(t_count);
  out.residuals = y - out.lam_bar * estimate.factors.transpose();
  return out;
}

namespace {

void check_phi(const Matrix& phi) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(phi, Eigen::EigenvaluesOnly);
  if (eig.info() != Eigen::Success) throw UfmError(ErrorCode::EigenFailure, "phi eigen failed");
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (!(hi > 0.0) || !(lo > 0.0) || hi / lo > 1e12)
    throw UfmError(ErrorCode::SingularPhi, "phi is singular or ill-conditioned (eigenvalues " +
                                               std::to_string(lo) + ", " + std::to_string(hi) +
                                               ")");
}

Matrix symmetrize(const Matrix& a) { return 0.5 * (a + a.transpose()); }

}  // namespace

CovariancePack plugin_covariances(const FactorEstimate& estimate, const QuantileGrid& grid,
                                  const WeightTensor& weights, const MeanLoadings* mean) {
  const int m_count = grid.size();
  if (estimate.levels() != m_count)
    throw UfmError(ErrorCode::InvalidArgument, "estimate and grid disagree on M");
  const Index n = estimate.loadings.front().rows();
  const Index t_count = estimate.factors.rows();
  const Index r = estimate.factors.cols();
  if (weights.levels() != m_count || weights.rows() != n || weights.cols() != t_count)
    throw UfmError(ErrorCode::InvalidArgument, "weight tensor shape does not match (M,N,T)");

  CovariancePack out;
  out.n = n;
  out.t_count = t_count;
  out.levels = grid.levels();
  const auto& lam = estimate.loadings;
  const Matrix& f = estimate.factors;

  out.phi = Matrix::Zero(r, r);
  for (const auto& l : lam) out.phi.noalias() += l.transpose() * l;
  out.phi = symmetrize(out.phi / (static_cast<double>(m_count) * static_cast<double>(n)));
  check_phi(out.phi);

  Matrix omega(m_count, m_count);
  for (int a = 0; a < m_count; ++a)
    for (int b = 0; b < m_count; ++b)
      omega(a, b) = std::min(grid.level(a), grid.level(b)) - grid.level(a) * grid.level(b);

  // sigma_f[t] = (1/(M^2 N)) sum_i A_it' Omega A_it, row m of A_it = w_mit lam_i(tau_m)'.
  out.sigma_f.assign(static_cast<std::size_t>(t_count), Matrix());
  const double f_scale = 1.0 / (static_cast<double>(m_count) * m_count * static_cast<double>(n));
  parallel_for(t_count, [&](Index t) {
    Matrix acc = Matrix::Zero(r, r);
    Matrix a(m_count, r);
    for (Index i = 0; i < n; ++i) {
      for (int m = 0; m < m_count; ++m)
        a.row(m) = weights(m, i, t) * lam[static_cast<std::size_t>(m)].row(i);
      acc.noalias() += a.transpose() * omega * a;
    }
    out.sigma_f[static_cast<std::size_t>(t)] = symmetrize(acc * f_scale);
  });

  out.sigma_l.assign(static_cast<std::size_t>(m_count), std::vector<Matrix>());
  for (int m = 0; m < m_count; ++m) {
    auto& row = out.sigma_l[static_cast<std::size_t>(m)];
    row.assign(static_cast<std::size_t>(n), Matrix());
    const double tau = grid.level(m);
    const Matrix& w = weights.slice(m);
    parallel_for(n, [&](Index i) {
      const Vector w2 = w.row(i).transpose().array().square();
      const Matrix s = f.transpose() * w2.asDiagonal() * f;
      row[static_cast<std::size_t>(i)] =
          symmetrize(tau * (1.0 - tau) * s / static_cast<double>(t_count));
    });
  }

  if (mean != nullptr) {
    if (mean->residuals.rows() != n || mean->residuals.cols() != t_count)
      throw UfmError(ErrorCode::InvalidArgument, "mean residuals must be N x T");
    out.sigma_mean.assign(static_cast<std::size_t>(n), Matrix());
    parallel_for(n, [&](Index i) {
      const Vector nu2 = mean->residuals.row(i).transpose().array().square();
      out.sigma_mean[static_cast<std::size_t>(i)] =
          symmetrize(f.transpose() * nu2.asDiagonal() * f / static_cast<double>(t_count));
    });
  }
  return out;
}

Matrix phi_inverse(const Matrix& phi) {
  check_phi(phi);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(phi);
  const double floor = 1e-12 * phi.trace();
  const Vector inv = eig.eigenvalues().cwiseMax(floor).cwiseInverse();
  return eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
}

namespace {

struct SeContext {
  const FactorEstimate& est;
  const CovariancePack& covs;
  const MeanLoadings* mean;
  Matrix phi_inv;
  std::vector<Matrix> sandwich;  // Phi^-1 Sigma_F,t Phi^-1 per t

  SeContext(const FactorEstimate& e, const CovariancePack& c, const MeanLoadings* m)
      : est(e), covs(c), mean(m), phi_inv(phi_inverse(c.phi)) {
    if (static_cast<Index>(c.sigma_f.size()) != c.t_count)
      throw UfmError(ErrorCode::InvalidArgument, "covariance pack is incomplete");
  }

  const Matrix& sandwich_at(Index t) {
    if (sandwich.empty()) sandwich.resize(covs.sigma_f.size());
    auto& s = sandwich[static_cast<std::size_t>(t)];
    if (s.size() == 0) s = phi_inv * covs.sigma_f[static_cast<std::size_t>(t)] * phi_inv;
    return s;
  }

  double n() const { return static_cast<double>(covs.n); }
  double t_count() const { return static_cast<double>(covs.t_count); }

  void need_mean() const {
    if (mean == nullptr || covs.sigma_mean.empty())
      throw UfmError(ErrorCode::InvalidArgument, "mean targets need mean loadings and their covariance");
  }
};

Vector se_of(SeContext& ctx, const SeTarget& target) {
  const auto i = static_cast<std::size_t>(target.i);
  const auto m = static_cast<std::size_t>(target.level);
  const bool per_level = target.kind == SeKind::Loading || target.kind == SeKind::Common;
  if (target.t < 0 || target.t >= ctx.covs.t_count || target.i < 0 || target.i >= ctx.covs.n ||
      (per_level && (target.level < 0 || m >= ctx.covs.sigma_l.size() ||
                     i >= ctx.covs.sigma_l[m].size())))
    throw UfmError(ErrorCode::InvalidArgument, "standard error target out of range");
  switch (target.kind) {
    case SeKind::Factor:
      return (ctx.sandwich_at(target.t).diagonal() / ctx.n()).cwiseMax(0.0).cwiseSqrt();
    case SeKind::Loading:
      return (ctx.covs.sigma_l[m][i].diagonal() / ctx.t_count()).cwiseMax(0.0).cwiseSqrt();
    case SeKind::Common: {
      const Vector lam = ctx.est.loadings[m].row(target.i).transpose();
      const Vector f = ctx.est.factors.row(target.t).transpose();
      const double v = lam.dot(ctx.sandwich_at(target.t) * lam) / ctx.n() +
                       f.dot(ctx.covs.sigma_l[m][i] * f) / ctx.t_count();
      return Vector::Constant(1, std::sqrt(std::max(v, 0.0)));
    }
    case SeKind::MeanLoading:
      ctx.need_mean();
      return (ctx.covs.sigma_mean[i].diagonal() / ctx.t_count()).cwiseMax(0.0).cwiseSqrt();
    case SeKind::MeanCommon: {
      ctx.need_mean();
      const Vector lam = ctx.mean->lam_bar.row(target.i).transpose();
      const Vector f = ctx.est.factors.row(target.t).transpose();
      const double v = lam.dot(ctx.sandwich_at(target.t) * lam) / ctx.n() +
                       f.dot(ctx.covs.sigma_mean[i] * f) / ctx.t_count();
      return Vector::Constant(1, std::sqrt(std::max(v, 0.0)));
    }
  }
  return {};
}

}  // namespace

Vector standard_errors(const FactorEstimate& estimate, const CovariancePack& covs,
                       const SeTarget& target, const MeanLoadings* mean) {
  SeContext ctx(estimate, covs, mean);
  return se_of(ctx, target);
}

StandardErrorTables standard_error_tables(const FactorEstimate& estimate,
                                          const CovariancePack& covs, const MeanLoadings* mean) {
  SeContext ctx(estimate, covs, mean);
  const Index n = covs.n;
  const Index t_count = covs.t_count;
  const Index r = estimate.factors.cols();
  const int m_count = static_cast<int>(covs.sigma_l.size());
  for (Index t = 0; t < t_count; ++t) ctx.sandwich_at(t);  // fill the cache up front

  StandardErrorTables out;
  out.factors.resize(t_count, r);
  for (Index t = 0; t < t_count; ++t)
    out.factors.row(t) = se_of(ctx, {SeKind::Factor, 0, 0, t}).transpose();
  for (int m = 0; m < m_count; ++m) {
    Matrix l(n, r), c(n, t_count);
    for (Index i = 0; i < n; ++i) {
      l.row(i) = se_of(ctx, {SeKind::Loading, m, i, 0}).transpose();
      for (Index t = 0; t < t_count; ++t) c(i, t) = se_of(ctx, {SeKind::Common, m, i, t})(0);
    }
    out.loadings.push_back(std::move(l));
    out.common.push_back(std::move(c));
  }
  if (mean != nullptr && !covs.sigma_mean.empty()) {
    out.mean_loadings.resize(n, r);
    out.mean_common.resize(n, t_count);
    for (Index i = 0; i < n; ++i) {
      out.mean_loadings.row(i) = se_of(ctx, {SeKind::MeanLoading, 0, i, 0}).transpose();
      for (Index t = 0; t < t_count; ++t)
        out.mean_common(i, t) = se_of(ctx, {SeKind::MeanCommon, 0, i, t})(0);
    }
  }
  return out;
}

}  // namespace ufm
