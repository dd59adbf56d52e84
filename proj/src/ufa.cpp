#include "ufm/ufa.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/QR>

#include "ufm/parallel.hpp"
#include "ufm/sqr.hpp"

namespace ufm {

namespace {

void check_weights(const WeightTensor* weights, int m_count, Index n, Index t) {
  if (weights == nullptr) return;
  if (weights->levels() != m_count || weights->rows() != n || weights->cols() != t)
    throw UfmError(ErrorCode::InvalidArgument, "weight tensor shape does not match (M,N,T)");
}

void summarize(Diagnostics* diagnostics, const std::vector<char>& unconverged,
               const std::vector<char>& active, const std::vector<char>& regularized,
               const char* what) {
  if (diagnostics == nullptr) return;
  auto count = [](const std::vector<char>& v) {
    return std::count(v.begin(), v.end(), char(1));
  };
  if (auto c = count(unconverged); c > 0)
    diagnostics->add(WarningCode::MaxIters,
                     std::to_string(c) + " " + what + " solves stopped before stationarity");
  if (auto c = count(active); c > 0)
    diagnostics->add(WarningCode::ActiveBox,
                     std::to_string(c) + " " + what + " solves ended on the parameter box");
  if (auto c = count(regularized); c > 0)
    diagnostics->add(WarningCode::RegularizedHessian,
                     std::to_string(c) + " " + what + " solves needed Hessian regularization");
}

SqrOptions inner_options(const EstimatorConfig& config) {
  return {config.inner_tol, config.max_inner_iters};
}

}  // namespace

FactorEstimate normalize(const std::vector<Matrix>& loadings, const Matrix& factors) {
  const Index t_count = factors.rows();
  const Index r = factors.cols();
  if (loadings.empty() || r < 1)
    throw UfmError(ErrorCode::InvalidArgument, "normalize needs loadings and factors");
  const Index n = loadings.front().rows();
  const auto m_count = static_cast<double>(loadings.size());
  if (t_count < r) throw UfmError(ErrorCode::EigenFailure, "fewer periods than factors");

  Matrix gram = Matrix::Zero(r, r);
  for (const auto& lam : loadings) {
    if (lam.rows() != n || lam.cols() != r)
      throw UfmError(ErrorCode::InvalidArgument, "loading matrices must all be N x r");
    gram.noalias() += lam.transpose() * lam;
  }
  gram /= m_count * static_cast<double>(n) * static_cast<double>(t_count);

  // The T x T matrix F gram F' has the same nonzero spectrum as R gram R'
  // with F = QR, and eigenvectors Q V.
  Eigen::HouseholderQR<Matrix> qr(factors);
  const Matrix q = qr.householderQ() * Matrix::Identity(t_count, r);
  const Matrix rr = qr.matrixQR().topRows(r).triangularView<Eigen::Upper>();
  const double rmax = rr.diagonal().cwiseAbs().maxCoeff();
  if (!(rr.diagonal().cwiseAbs().minCoeff() > 1e-12 * rmax) || !factors.allFinite())
    throw UfmError(ErrorCode::EigenFailure, "factor matrix is not of full column rank");

  const Matrix small = rr * gram * rr.transpose();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (small + small.transpose()));
  if (eig.info() != Eigen::Success)
    throw UfmError(ErrorCode::EigenFailure, "eigendecomposition failed");

  FactorEstimate out;
  out.eigenvalues.resize(r);
  Matrix vecs(r, r);
  for (Index j = 0; j < r; ++j) {
    out.eigenvalues(j) = eig.eigenvalues()(r - 1 - j);
    vecs.col(j) = eig.eigenvectors().col(r - 1 - j);
  }
  out.factors = std::sqrt(static_cast<double>(t_count)) * (q * vecs);
  for (Index j = 0; j < r; ++j)
    if (out.factors.col(j).sum() < 0.0) out.factors.col(j) *= -1.0;

  // Lambda_m = L_m F / T with L_m = Lambda_temp F_temp'.
  const Matrix rotate = factors.transpose() * out.factors / static_cast<double>(t_count);
  out.loadings.reserve(loadings.size());
  for (const auto& lam : loadings) out.loadings.push_back(lam * rotate);

  for (Index j = 0; j + 1 < r; ++j) {
    if (out.eigenvalues(j) - out.eigenvalues(j + 1) < 1e-10) {
      out.diagnostics.add(WarningCode::NearDegenerateEigs,
                          "eigenvalues " + std::to_string(j + 1) + " and " +
                              std::to_string(j + 2) + " are nearly equal");
      break;
    }
  }
  return out;
}

Matrix ufa_update_factors(const Eigen::Ref<const Matrix>& y, const QuantileGrid& grid,
                          const EstimatorConfig& config, const std::vector<Matrix>& loadings,
                          const Matrix& factors, const WeightTensor* weights,
                          Diagnostics* diagnostics) {
  const int m_count = grid.size();
  const Index n = y.rows();
  const Index t_count = y.cols();
  const Index r = factors.cols();
  const auto kernel = SmoothKernel<double>::gaussian(config.kernel_order);

  Matrix stacked(m_count * n, r);
  Vector taus(m_count * n);
  for (int m = 0; m < m_count; ++m) {
    stacked.middleRows(m * n, n) = loadings[static_cast<std::size_t>(m)];
    taus.segment(m * n, n).setConstant(grid.level(m));
  }

  Matrix out(t_count, r);
  std::vector<char> unconverged(static_cast<std::size_t>(t_count), 0);
  std::vector<char> active(unconverged), regularized(unconverged);
  const auto opts = inner_options(config);
  parallel_for(t_count, [&](Index t) {
    Vector yt(m_count * n);
    Vector wt = Vector::Ones(m_count * n);
    for (int m = 0; m < m_count; ++m) {
      yt.segment(m * n, n) = y.col(t);
      if (weights) wt.segment(m * n, n) = weights->slice(m).col(t);
    }
    const Vector init = factors.row(t).transpose();
    auto sol = solve_sqr<double>(SqrDesign<double>{stacked, yt, taus, wt}, kernel,
                                 config.bandwidth_h, config.box_bound, init, opts);
    out.row(t) = sol.theta.transpose();
    const auto k = static_cast<std::size_t>(t);
    unconverged[k] = !sol.converged;
    active[k] = sol.box_active;
    regularized[k] = sol.regularized;
  });
  summarize(diagnostics, unconverged, active, regularized, "factor");
  return out;
}

std::vector<Matrix> ufa_update_loadings(const Eigen::Ref<const Matrix>& y,
                                        const QuantileGrid& grid, const EstimatorConfig& config,
                                        const Matrix& factors, const std::vector<Matrix>& loadings,
                                        const WeightTensor* weights, Diagnostics* diagnostics) {
  const int m_count = grid.size();
  const Index n = y.rows();
  const Index t_count = y.cols();
  const Index r = factors.cols();
  const auto kernel = SmoothKernel<double>::gaussian(config.kernel_order);

  std::vector<Matrix> out(static_cast<std::size_t>(m_count), Matrix(n, r));
  const Index jobs = n * m_count;
  std::vector<char> unconverged(static_cast<std::size_t>(jobs), 0);
  std::vector<char> active(unconverged), regularized(unconverged);
  const auto opts = inner_options(config);
  parallel_for(jobs, [&](Index job) {
    const int m = static_cast<int>(job / n);
    const Index i = job % n;
    const Vector yi = y.row(i).transpose();
    const Vector taus = Vector::Constant(t_count, grid.level(m));
    const Vector wi = weights ? Vector(weights->slice(m).row(i).transpose())
                              : Vector(Vector::Ones(t_count));
    const Vector init = loadings[static_cast<std::size_t>(m)].row(i).transpose();
    auto sol = solve_sqr<double>(SqrDesign<double>{factors, yi, taus, wi}, kernel,
                                 config.bandwidth_h, config.box_bound, init, opts);
    out[static_cast<std::size_t>(m)].row(i) = sol.theta.transpose();
    const auto k = static_cast<std::size_t>(job);
    unconverged[k] = !sol.converged;
    active[k] = sol.box_active;
    regularized[k] = sol.regularized;
  });
  summarize(diagnostics, unconverged, active, regularized, "loading");
  return out;
}

double ufa_objective(const Eigen::Ref<const Matrix>& y, const QuantileGrid& grid,
                     const SmoothKernel<double>& kernel, double h,
                     const std::vector<Matrix>& loadings, const Matrix& factors,
                     const WeightTensor* weights) {
  double total = 0.0;
  for (int m = 0; m < grid.size(); ++m) {
    const Matrix fitted = loadings[static_cast<std::size_t>(m)] * factors.transpose();
    double acc = 0.0;
    for (Index t = 0; t < y.cols(); ++t)
      for (Index i = 0; i < y.rows(); ++i) {
        const double w = weights ? (*weights)(m, i, t) : 1.0;
        acc += w * smoothed_value(kernel, h, grid.level(m), fitted(i, t), y(i, t));
      }
    total += acc / static_cast<double>(y.size());
  }
  return total / grid.size();
}

FactorEstimate ufa_fit(const Eigen::Ref<const Matrix>& y, const QuantileGrid& grid,
                       const EstimatorConfig& config, const FactorEstimate& init,
                       const WeightTensor* weights) {
  config.validate();
  const int m_count = grid.size();
  const Index n = y.rows();
  const Index t_count = y.cols();
  const Index r = init.factors.cols();
  if (config.rank && *config.rank != r)
    throw UfmError(ErrorCode::InvalidArgument, "initial estimate rank differs from config.rank");
  if (2 * r >= std::min(n, t_count))
    throw UfmError(ErrorCode::RankTooLarge, "rank " + std::to_string(r) +
                                                " must be below min(N,T)/2");
  if (init.factors.rows() != t_count || init.levels() != m_count)
    throw UfmError(ErrorCode::InvalidArgument, "initial estimate does not match panel and grid");
  for (const auto& lam : init.loadings)
    if (lam.rows() != n || lam.cols() != r)
      throw UfmError(ErrorCode::InvalidArgument, "initial loadings must be N x r");
  check_weights(weights, m_count, n, t_count);
  if (!y.allFinite()) throw UfmError(ErrorCode::NonFinite, "panel has non-finite entries");

  Diagnostics diagnostics;
  Matrix factors = init.factors.cwiseMax(-config.box_bound).cwiseMin(config.box_bound);
  std::vector<Matrix> loadings;
  for (const auto& lam : init.loadings)
    loadings.push_back(lam.cwiseMax(-config.box_bound).cwiseMin(config.box_bound));

  std::vector<Matrix> common;
  for (const auto& lam : loadings) common.push_back(lam * factors.transpose());

  bool converged = false;
  int iter = 0;
  double delta = 0.0;
  Diagnostics last_sweep;
  while (iter < config.max_outer_iters) {
    ++iter;
    last_sweep = Diagnostics{};
    Matrix next_f = ufa_update_factors(y, grid, config, loadings, factors, weights, &last_sweep);
    auto next_l = ufa_update_loadings(y, grid, config, next_f, loadings, weights, &last_sweep);
    delta = 0.0;
    for (int m = 0; m < m_count; ++m) {
      Matrix c = next_l[static_cast<std::size_t>(m)] * next_f.transpose();
      delta = std::max(delta, (c - common[static_cast<std::size_t>(m)]).cwiseAbs().maxCoeff());
      common[static_cast<std::size_t>(m)] = std::move(c);
    }
    factors = std::move(next_f);
    loadings = std::move(next_l);
    if (!std::isfinite(delta)) throw UfmError(ErrorCode::NonFinite, "UFA iterate diverged");
    if (delta < config.outer_tol) {
      converged = true;
      break;
    }
  }
  diagnostics.merge(last_sweep);
  if (!converged)
    diagnostics.add(WarningCode::NoConverge,
                    "UFA stopped after " + std::to_string(iter) +
                        " sweeps with max common-component change " + std::to_string(delta));

  FactorEstimate out = normalize(loadings, factors);
  out.iterations = iter;
  out.converged = converged;
  diagnostics.merge(out.diagnostics);
  out.diagnostics = std::move(diagnostics);
  return out;
}

}  // namespace ufm
