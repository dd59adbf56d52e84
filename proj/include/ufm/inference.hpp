#ifndef UFM_INFERENCE_HPP
#define UFM_INFERENCE_HPP

#include <vector>

#include "ufm/panel.hpp"

namespace ufm {

/// Mean-model loadings Y F / T and residuals Y - lam_bar F'.
struct MeanLoadings {
  Matrix lam_bar;    // N x r
  Matrix residuals;  // N x T
};

MeanLoadings mean_loadings(const Eigen::Ref<const Matrix>& y, const FactorEstimate& estimate);

/// Plug-in covariance matrices in the estimate's own coordinates.
struct CovariancePack {
  Index n = 0;
  Index t_count = 0;
  std::vector<double> levels;
  Matrix phi;                                // r x r
  std::vector<Matrix> sigma_f;               // per t
  std::vector<std::vector<Matrix>> sigma_l;  // [m][i]
  std::vector<Matrix> sigma_mean;            // per i; empty without mean loadings
};

/// phi        = sum_{m,i} lam lam' / (MN)
/// sigma_f[t] = (1/(M^2 N)) sum_{m,m',i} (min(tau_m,tau_m') - tau_m tau_m') w_mit w_m'it lam_i(tau_m) lam_i(tau_m')'
/// sigma_l    = tau_m (1 - tau_m) (1/T) sum_t w_mit^2 f_t f_t'
/// sigma_mean = (1/T) sum_t nu_it^2 f_t f_t'
/// Throws SingularPhi when phi's condition number exceeds 1e12.
CovariancePack plugin_covariances(const FactorEstimate& estimate, const QuantileGrid& grid,
                                  const WeightTensor& weights, const MeanLoadings* mean = nullptr);

/// Inverse through the symmetric eigendecomposition, eigenvalues floored at
/// 1e-12 * trace.
Matrix phi_inverse(const Matrix& phi);

enum class SeKind { Factor, Loading, Common, MeanLoading, MeanCommon };

struct SeTarget {
  SeKind kind = SeKind::Factor;
  int level = 0;  // grid index, for Loading and Common
  Index i = 0;
  Index t = 0;
};

/// Factor and loading targets give one SE per factor; the common-component
/// targets give a single entry. Mean targets need `mean`.
Vector standard_errors(const FactorEstimate& estimate, const CovariancePack& covs,
                       const SeTarget& target, const MeanLoadings* mean = nullptr);

/// Every standard error at once, laid out like the estimates.
struct StandardErrorTables {
  Matrix factors;                    // T x r
  std::vector<Matrix> loadings;      // per level, N x r
  std::vector<Matrix> common;        // per level, N x T
  Matrix mean_loadings;              // N x r (empty without mean)
  Matrix mean_common;                // N x T
};

StandardErrorTables standard_error_tables(const FactorEstimate& estimate,
                                          const CovariancePack& covs,
                                          const MeanLoadings* mean = nullptr);

}  // namespace ufm

#endif  // UFM_INFERENCE_HPP
