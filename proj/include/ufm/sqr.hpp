#ifndef UFM_SQR_HPP
#define UFM_SQR_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <type_traits>
#include <vector>

#include <Eigen/Eigenvalues>

#include "ufm/error.hpp"
#include "ufm/kernel.hpp"
#include "ufm/types.hpp"

namespace ufm {

/// One term of a weighted smoothed quantile regression.
template <typename Scalar = double>
struct SqrObservation {
  Scalar y;
  VectorX<Scalar> x;
  Scalar tau;
  Scalar weight = Scalar(1);
};

/// Column-oriented view of a regression problem: row s of `x` is the
/// regressor for response y(s) at level tau(s) with weight(s).
template <typename Scalar = double>
struct SqrDesign {
  Eigen::Ref<const MatrixX<Scalar>> x;
  Eigen::Ref<const VectorX<Scalar>> y;
  Eigen::Ref<const VectorX<Scalar>> tau;
  Eigen::Ref<const VectorX<Scalar>> weight;
};

struct SqrOptions {
  double tol = 1e-7;
  int max_iters = 200;
};

template <typename Scalar = double>
struct SqrSolution {
  VectorX<Scalar> theta;
  Scalar objective = Scalar(0);
  Scalar stationarity = Scalar(0);
  int iterations = 0;
  bool converged = false;
  bool box_active = false;
  bool regularized = false;
  bool gradient_fallback = false;
};

namespace detail {

template <typename Scalar>
struct SqrState {
  VectorX<Scalar> theta;
  Scalar value;
  VectorX<Scalar> grad;
  MatrixX<Scalar> hess;
};

/// Objective, gradient and Hessian of (1/n) sum_s w_s V(theta'x_s; y_s, tau_s),
/// with weights already normalized to mean one.
template <typename Scalar>
SqrState<Scalar> sqr_evaluate(const SqrDesign<Scalar>& d, const VectorX<Scalar>& w,
                              const SmoothKernel<Scalar>& kernel, Scalar h,
                              const VectorX<Scalar>& theta) {
  const Index n = d.x.rows();
  const Index r = d.x.cols();
  SqrState<Scalar> s{theta, Scalar(0), VectorX<Scalar>::Zero(r), MatrixX<Scalar>::Zero(r, r)};
  const VectorX<Scalar> fitted = d.x * theta;
  VectorX<Scalar> gcoef(n), hcoef(n);
  Scalar value = Scalar(0);
  for (Index k = 0; k < n; ++k) {
    const Scalar z = (fitted(k) - d.y(k)) / h;
    const auto e = kernel.evaluate(z);
    value += w(k) * h * (z * (e.cdf - d.tau(k)) - e.partial_mean);
    gcoef(k) = w(k) * (e.cdf - d.tau(k));
    hcoef(k) = w(k) * e.density / h;
  }
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(n);
  s.value = value * inv_n;
  s.grad.noalias() = d.x.transpose() * gcoef * inv_n;
  s.hess.noalias() = d.x.transpose() * hcoef.asDiagonal() * d.x * inv_n;
  return s;
}

template <typename Scalar>
VectorX<Scalar> project_box(const VectorX<Scalar>& v, Scalar bound) {
  return v.cwiseMax(-bound).cwiseMin(bound);
}

}  // namespace detail

/// Minimizes (1/n) sum_s w_s V(theta'x_s; y_s, tau_s) over the box
/// [-bound, bound]^r, where V is the kernel-smoothed check loss.
///
/// Damped Newton with the analytic Hessian; when the Hessian is indefinite
/// (possible for kernels of order > 2) the step falls back to projected
/// gradient descent. Steps are projected on the box and accepted by an
/// Armijo test on the smoothed objective. Weights enter only through their
/// ratios to the mean weight, so rescaling all weights leaves the path
/// unchanged.
template <typename Scalar>
SqrSolution<Scalar> solve_sqr(const SqrDesign<Scalar>& design, const SmoothKernel<Scalar>& kernel,
                              std::type_identity_t<Scalar> h, std::type_identity_t<Scalar> bound,
                              const std::type_identity_t<VectorX<Scalar>>& init,
                              const SqrOptions& options = {}) {
  const Index n = design.x.rows();
  const Index r = design.x.cols();
  if (n < r || n == 0)
    throw UfmError(ErrorCode::InvalidArgument, "smoothed QR needs at least r observations");
  if (init.size() != r) throw UfmError(ErrorCode::InvalidArgument, "init has wrong dimension");
  if (!(h > Scalar(0))) throw UfmError(ErrorCode::InvalidArgument, "bandwidth must be positive");

  const Scalar mean_w = design.weight.mean();
  if (!(mean_w > Scalar(0)) || (design.weight.array() <= Scalar(0)).any())
    throw UfmError(ErrorCode::InvalidArgument, "weights must be positive");
  const VectorX<Scalar> w = design.weight / mean_w;

  // Gradient Lipschitz bound for the fallback step size.
  const Scalar lipschitz =
      kernel.sup_density() / h *
      (w.array() * design.x.rowwise().squaredNorm().array()).sum() / static_cast<Scalar>(n);

  SqrSolution<Scalar> out;
  auto state = detail::sqr_evaluate(design, w, kernel, h, detail::project_box(init, bound));
  const Scalar tol = static_cast<Scalar>(options.tol);

  auto stationarity = [&](const detail::SqrState<Scalar>& s) {
    return (s.theta - detail::project_box<Scalar>(s.theta - s.grad, bound)).cwiseAbs().maxCoeff();
  };

  int iter = 0;
  for (; iter < options.max_iters; ++iter) {
    if (!std::isfinite(state.value) || !state.grad.allFinite())
      throw UfmError(ErrorCode::NonFinite, "non-finite objective in smoothed QR");
    out.stationarity = stationarity(state);
    if (out.stationarity <= tol) {
      out.converged = true;
      break;
    }

    // Classify the Hessian on its (tiny) spectrum.
    Eigen::SelfAdjointEigenSolver<MatrixX<Scalar>> eig(state.hess, Eigen::EigenvaluesOnly);
    const Scalar lo = eig.eigenvalues().minCoeff();
    const Scalar hi = eig.eigenvalues().maxCoeff();
    const Scalar scale = std::max(std::abs(hi), std::numeric_limits<Scalar>::min());
    VectorX<Scalar> direction;
    Scalar step = Scalar(1);
    bool newton = true;
    if (lo > Scalar(1e-8) * scale) {
      direction = -state.hess.ldlt().solve(state.grad);
    } else if (lo > -Scalar(1e-8) * scale) {
      MatrixX<Scalar> reg = state.hess;
      reg.diagonal().array() += Scalar(1e-8);
      direction = -reg.ldlt().solve(state.grad);
      out.regularized = true;
    } else {
      newton = false;
    }
    if (newton && !direction.allFinite()) newton = false;
    if (!newton) {
      direction = -state.grad;
      step = Scalar(1) / std::max(lipschitz, std::numeric_limits<Scalar>::min());
      out.gradient_fallback = true;
    }

    bool accepted = false;
    for (int halving = 0; halving < 60; ++halving) {
      VectorX<Scalar> trial = detail::project_box<Scalar>(state.theta + step * direction, bound);
      auto next = detail::sqr_evaluate(design, w, kernel, h, trial);
      const Scalar decrease = state.grad.dot(trial - state.theta);
      if (std::isfinite(next.value) &&
          next.value <= state.value + Scalar(1e-4) * decrease + Scalar(8) * std::numeric_limits<Scalar>::epsilon() * std::abs(state.value)) {
        const bool moved = (trial - state.theta).cwiseAbs().maxCoeff() > Scalar(0);
        state = std::move(next);
        accepted = moved;
        break;
      }
      step *= Scalar(0.5);
      if (halving == 30 && newton) {
        // Newton direction is not working; switch to the gradient.
        newton = false;
        direction = -state.grad;
        step = Scalar(1) / std::max(lipschitz, std::numeric_limits<Scalar>::min());
        out.gradient_fallback = true;
      }
    }
    if (!accepted) {
      out.stationarity = stationarity(state);
      out.converged = out.stationarity <= tol;
      break;
    }
  }
  out.iterations = iter;
  if (iter == options.max_iters) {
    out.stationarity = stationarity(state);
    out.converged = out.stationarity <= tol;
  }
  out.theta = state.theta;
  out.objective = state.value;
  out.box_active = (state.theta.cwiseAbs().array() >= bound).any();
  return out;
}

/// Convenience overload on a list of observations.
template <typename Scalar>
SqrSolution<Scalar> solve_sqr(const std::vector<SqrObservation<Scalar>>& obs,
                              const SmoothKernel<Scalar>& kernel, std::type_identity_t<Scalar> h,
                              std::type_identity_t<Scalar> bound,
                              const std::type_identity_t<VectorX<Scalar>>& init, const SqrOptions& options = {}) {
  if (obs.empty()) throw UfmError(ErrorCode::InvalidArgument, "no observations");
  const Index n = static_cast<Index>(obs.size());
  const Index r = obs.front().x.size();
  MatrixX<Scalar> x(n, r);
  VectorX<Scalar> y(n), tau(n), w(n);
  for (Index s = 0; s < n; ++s) {
    const auto& o = obs[static_cast<std::size_t>(s)];
    if (o.x.size() != r) throw UfmError(ErrorCode::InvalidArgument, "ragged regressors");
    if (!(o.tau > Scalar(0) && o.tau < Scalar(1)))
      throw UfmError(ErrorCode::InvalidArgument, "tau must lie in (0,1)");
    x.row(s) = o.x.transpose();
    y(s) = o.y;
    tau(s) = o.tau;
    w(s) = o.weight;
  }
  return solve_sqr(SqrDesign<Scalar>{x, y, tau, w}, kernel, h, bound, init, options);
}

}  // namespace ufm

#endif  // UFM_SQR_HPP
