#include "ufm/rank_select.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "ufm/kernel.hpp"
#include "ufm/parallel.hpp"

namespace ufm {

Vector soft_threshold(const Vector& singular_values, double threshold) {
  return (singular_values.array() - threshold).cwiseMax(0.0).matrix();
}

Matrix singular_value_threshold(const Matrix& a, double threshold, double* nuclear_norm) {
  // Work on the smaller Gram matrix: with A'A = V S^2 V', the thresholded
  // matrix is A V diag((s - thr)_+ / s) V'.
  const bool wide = a.cols() > a.rows();
  const Matrix gram = wide ? Matrix(a * a.transpose()) : Matrix(a.transpose() * a);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(gram);
  if (eig.info() != Eigen::Success)
    throw UfmError(ErrorCode::EigenFailure, "singular value thresholding failed");
  const Vector s = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  Index keep = 0;
  double nuc = 0.0;
  for (Index j = 0; j < s.size(); ++j)
    if (s(j) > threshold) {
      ++keep;
      nuc += s(j) - threshold;
    }
  if (nuclear_norm) *nuclear_norm = nuc;
  if (keep == 0) return Matrix::Zero(a.rows(), a.cols());
  const Matrix v = eig.eigenvectors().rightCols(keep);  // eigenvalues ascend
  const Vector shrink =
      (s.tail(keep).array() - threshold) / s.tail(keep).array();
  if (wide) return v * shrink.asDiagonal() * (v.transpose() * a);
  return (a * v) * shrink.asDiagonal() * v.transpose();
}

double nuclear_penalty(Index rows, Index cols, double penalty_const) {
  const double n = static_cast<double>(rows);
  const double t = static_cast<double>(cols);
  return penalty_const * std::sqrt(std::log(n * t)) * std::max(std::sqrt(n), std::sqrt(t)) /
         (n * t);
}

std::pair<double, double> pel_box(const Matrix& y) {
  const double lo = y.minCoeff();
  const double hi = y.maxCoeff();
  const double range = hi - lo;
  return {lo - range, hi + range};
}

PelResult pel_fit(const Eigen::Ref<const Matrix>& y, double tau, const PelOptions& options,
                  std::pair<double, double> box) {
  if (!(options.penalty_const > 0.0))
    throw UfmError(ErrorCode::InvalidArgument, "penalty constant C must be positive");
  if (!(tau > 0.0 && tau < 1.0)) throw UfmError(ErrorCode::InvalidArgument, "tau must lie in (0,1)");
  const Index n = y.rows();
  const Index t_count = y.cols();
  const double h = options.bandwidth.value_or(
      std::pow(static_cast<double>(std::min(n, t_count)), -0.2));
  const auto kernel = SmoothKernel<double>::gaussian(2);

  // Everything below is scaled by NT: loss sum_it V + lambda ||L||_*.
  const double lambda =
      nuclear_penalty(n, t_count, options.penalty_const) * static_cast<double>(n * t_count);
  const double step = h / kernel.sup_density();

  auto loss = [&](const Matrix& l) {
    double acc = 0.0;
    for (Index t = 0; t < t_count; ++t)
      for (Index i = 0; i < n; ++i) acc += smoothed_value(kernel, h, tau, l(i, t), y(i, t));
    return acc;
  };
  auto gradient = [&](const Matrix& l) {
    Matrix g(n, t_count);
    for (Index t = 0; t < t_count; ++t)
      for (Index i = 0; i < n; ++i) g(i, t) = kernel.cdf((l(i, t) - y(i, t)) / h) - tau;
    return g;
  };

  PelResult out;
  Matrix current = Matrix::Zero(n, t_count);
  double current_obj = loss(current);
  const double scale = static_cast<double>(n * t_count);
  out.objective_path.push_back(current_obj / scale);
  Matrix extrap = current;
  double momentum = 1.0;
  bool extrapolated = false;
  int iter = 0;
  while (iter < options.max_iters) {
    ++iter;
    double nuc = 0.0;
    Matrix next = singular_value_threshold(extrap - step * gradient(extrap), step * lambda, &nuc);
    const double next_obj = loss(next) + lambda * nuc;
    if (extrapolated && next_obj > current_obj) {
      // Restart from the last accepted iterate without momentum.
      extrap = current;
      momentum = 1.0;
      extrapolated = false;
      continue;
    }
    const double denom = std::max({current.norm(), next.norm(), 1e-12});
    const double change = (next - current).norm() / denom;
    const double next_momentum = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * momentum * momentum));
    extrap = next + ((momentum - 1.0) / next_momentum) * (next - current);
    extrapolated = momentum > 1.0;
    momentum = next_momentum;
    current = std::move(next);
    current_obj = std::min(current_obj, next_obj);
    out.objective_path.push_back(next_obj / scale);
    if (change < options.tol) {
      out.converged = true;
      break;
    }
  }
  out.iterations = iter;
  out.objective = current_obj / scale;
  out.common = current.cwiseMax(box.first).cwiseMin(box.second);
  return out;
}

double default_rank_threshold(Index rows, Index cols) {
  return 1.0 / (12.0 * std::cbrt(static_cast<double>(std::min(rows, cols))));
}

namespace {

Matrix pooled_gram(const std::vector<Matrix>& common) {
  const Index n = common.front().rows();
  const Index t_count = common.front().cols();
  Matrix gram = Matrix::Zero(t_count, t_count);
  for (const auto& l : common) gram.noalias() += l.transpose() * l;
  gram /= static_cast<double>(common.size()) * static_cast<double>(n) *
          static_cast<double>(t_count);
  return gram;
}

}  // namespace

Vector pooled_eigenvalues(const std::vector<Matrix>& common_components) {
  if (common_components.empty())
    throw UfmError(ErrorCode::InvalidArgument, "no common components");
  Eigen::SelfAdjointEigenSolver<Matrix> eig(pooled_gram(common_components),
                                            Eigen::EigenvaluesOnly);
  if (eig.info() != Eigen::Success) throw UfmError(ErrorCode::EigenFailure, "pooled eigen failed");
  const Index count = std::min(common_components.front().rows(), common_components.front().cols());
  return eig.eigenvalues().reverse().head(count).cwiseMax(0.0);
}

RankReport estimate_r(const Eigen::Ref<const Matrix>& y, const QuantileGrid& grid,
                      double threshold, const PelOptions& options) {
  if (!(threshold > 0.0)) throw UfmError(ErrorCode::InvalidArgument, "C_r must be positive");
  RankReport report;
  report.threshold = threshold;
  report.penalty_const = options.penalty_const;
  const auto box = pel_box(y);
  std::vector<PelResult> fits(static_cast<std::size_t>(grid.size()));
  parallel_for(grid.size(), [&](Index m) {
    fits[static_cast<std::size_t>(m)] = pel_fit(y, grid.level(static_cast<int>(m)), options, box);
  });
  for (std::size_t m = 0; m < fits.size(); ++m) {
    if (!fits[m].converged)
      report.diagnostics.add(WarningCode::NoConverge,
                             "nuclear-norm fit at tau=" + std::to_string(grid.level(static_cast<int>(m))) +
                                 " hit the iteration limit");
    report.common_components.push_back(std::move(fits[m].common));
  }
  report.eigenvalues = pooled_eigenvalues(report.common_components);
  report.r_hat = static_cast<int>((report.eigenvalues.array() >= threshold).count());
  return report;
}

FactorEstimate warm_start(const RankReport& report, double box_bound, std::optional<int> rank) {
  const int r = rank.value_or(report.r_hat);
  if (r < 1) throw UfmError(ErrorCode::InvalidArgument, "warm start needs at least one factor");
  if (report.common_components.empty())
    throw UfmError(ErrorCode::InvalidArgument, "rank report has no common components");
  const Index t_count = report.common_components.front().cols();
  if (r > t_count) throw UfmError(ErrorCode::RankTooLarge, "rank exceeds T");

  Eigen::SelfAdjointEigenSolver<Matrix> eig(pooled_gram(report.common_components));
  if (eig.info() != Eigen::Success) throw UfmError(ErrorCode::EigenFailure, "warm start eigen failed");
  FactorEstimate out;
  out.factors.resize(t_count, r);
  out.eigenvalues.resize(r);
  for (int j = 0; j < r; ++j) {
    out.factors.col(j) = std::sqrt(static_cast<double>(t_count)) *
                         eig.eigenvectors().col(t_count - 1 - j);
    out.eigenvalues(j) = eig.eigenvalues()(t_count - 1 - j);
    if (out.factors.col(j).sum() < 0.0) out.factors.col(j) *= -1.0;
  }
  for (const auto& l : report.common_components)
    out.loadings.push_back((l * out.factors / static_cast<double>(t_count))
                               .cwiseMax(-box_bound)
                               .cwiseMin(box_bound));
  out.factors = out.factors.cwiseMax(-box_bound).cwiseMin(box_bound);
  return out;
}

double strength_threshold(Index rows, double alpha, double constant) {
  const double n = static_cast<double>(rows);
  return constant * std::pow(n, (alpha - 1.0) / 2.0) / std::log(n);
}

StrengthReport select_factors(const FactorEstimate& estimate, const Matrix* mean_loadings,
                              StrengthTarget target, int level, double alpha, double constant) {
  if (!(alpha > 0.0 && alpha <= 1.0))
    throw UfmError(ErrorCode::InvalidArgument, "alpha must lie in (0,1]");
  const Matrix* lam = nullptr;
  if (target == StrengthTarget::Mean) {
    if (mean_loadings == nullptr)
      throw UfmError(ErrorCode::InvalidArgument, "mean target needs mean loadings");
    lam = mean_loadings;
  } else {
    if (level < 0 || level >= estimate.levels())
      throw UfmError(ErrorCode::InvalidArgument, "quantile level index out of range");
    lam = &estimate.loadings[static_cast<std::size_t>(level)];
  }
  const Index n = lam->rows();
  const Index t_count = estimate.factors.rows();
  const Index r = estimate.factors.cols();
  const Matrix common = (*lam) * estimate.factors.transpose() /
                        std::sqrt(static_cast<double>(n) * static_cast<double>(t_count));
  Eigen::BDCSVD<Matrix> svd(common);

  StrengthReport out;
  out.target = target;
  out.level = target == StrengthTarget::Quantile ? level : -1;
  out.alpha = alpha;
  out.threshold = strength_threshold(n, alpha, constant);
  out.singular_values = svd.singularValues().head(std::min<Index>(r, svd.singularValues().size()));
  out.selected = static_cast<int>((out.singular_values.array() >= out.threshold).count());
  return out;
}

}  // namespace ufm
