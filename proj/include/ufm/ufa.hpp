#ifndef UFM_UFA_HPP
#define UFM_UFA_HPP

#include <vector>

#include "ufm/kernel.hpp"
#include "ufm/panel.hpp"

namespace ufm {

/// Rotates (loadings, factors) so that F'F/T = I_r and
/// sum_m Lambda_m' Lambda_m / (MN) is diagonal with decreasing entries,
/// leaving every common component Lambda_m F' unchanged. Factor columns
/// are signed to have nonnegative sums.
FactorEstimate normalize(const std::vector<Matrix>& loadings, const Matrix& factors);

/// Alternating smoothed quantile regressions over the grid followed by
/// normalize(). Each sweep first refits every f_t against the previous
/// sweep's loadings, then every lambda_i(tau_m) against the new factors.
/// Stops when the largest change in any common component entry falls below
/// config.outer_tol. With `weights` each (m, i, t) term is weighted; without
/// them all weights are one.
FactorEstimate ufa_fit(const Eigen::Ref<const Matrix>& y, const QuantileGrid& grid,
                       const EstimatorConfig& config, const FactorEstimate& init,
                       const WeightTensor* weights = nullptr);

inline FactorEstimate ufa_fit(const PanelMatrix& panel, const QuantileGrid& grid,
                              const EstimatorConfig& config, const FactorEstimate& init,
                              const WeightTensor* weights = nullptr) {
  return ufa_fit(panel.values(), grid, config, init, weights);
}

/// One factor half-sweep: f_t <- argmin over the box for every t.
Matrix ufa_update_factors(const Eigen::Ref<const Matrix>& y, const QuantileGrid& grid,
                          const EstimatorConfig& config, const std::vector<Matrix>& loadings,
                          const Matrix& factors, const WeightTensor* weights = nullptr,
                          Diagnostics* diagnostics = nullptr);

/// One loading half-sweep: lambda_i(tau_m) <- argmin over the box for every (i, m).
std::vector<Matrix> ufa_update_loadings(const Eigen::Ref<const Matrix>& y,
                                        const QuantileGrid& grid, const EstimatorConfig& config,
                                        const Matrix& factors, const std::vector<Matrix>& loadings,
                                        const WeightTensor* weights = nullptr,
                                        Diagnostics* diagnostics = nullptr);

/// (1/M) sum_m (1/NT) sum_{i,t} w_mit V(lambda_i(tau_m)'f_t; Y_it, tau_m).
double ufa_objective(const Eigen::Ref<const Matrix>& y, const QuantileGrid& grid,
                     const SmoothKernel<double>& kernel, double h,
                     const std::vector<Matrix>& loadings, const Matrix& factors,
                     const WeightTensor* weights = nullptr);

}  // namespace ufm

#endif  // UFM_UFA_HPP
