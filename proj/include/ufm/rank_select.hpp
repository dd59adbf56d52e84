#ifndef UFM_RANK_SELECT_HPP
#define UFM_RANK_SELECT_HPP

#include <optional>
#include <utility>
#include <vector>

#include "ufm/panel.hpp"

namespace ufm {

/// Settings for the nuclear-norm penalized quantile fit.
struct PelOptions {
  double penalty_const = 0.2;         // C
  std::optional<double> bandwidth;    // default min(N,T)^(-1/5)
  double tol = 1e-5;                  // relative change in L
  int max_iters = 500;
};

struct PelResult {
  Matrix common;  // N x T
  int iterations = 0;
  bool converged = false;
  double objective = 0.0;
  std::vector<double> objective_path;  // accepted iterates, starting at L = 0
};

/// Soft-thresholds singular values: max(s - threshold, 0).
Vector soft_threshold(const Vector& singular_values, double threshold);

/// Singular value thresholding prox of threshold * ||.||_*.
Matrix singular_value_threshold(const Matrix& a, double threshold, double* nuclear_norm = nullptr);

/// psi = C sqrt(log(NT)) max(sqrt N, sqrt T) / (NT).
double nuclear_penalty(Index rows, Index cols, double penalty_const);

/// [min Y - range, max Y + range].
std::pair<double, double> pel_box(const Matrix& y);

/// Approximate minimizer of (1/NT) sum rho_tau(Y - L) + psi ||L||_* with the
/// check loss smoothed by a second-order Gaussian kernel. Accelerated
/// proximal gradient with singular value thresholding; the momentum is
/// reset whenever the objective would increase, so the objective sequence
/// is non-increasing. The result is clamped to `box`.
PelResult pel_fit(const Eigen::Ref<const Matrix>& y, double tau, const PelOptions& options,
                  std::pair<double, double> box);

struct RankReport {
  Vector eigenvalues;  // sigma_j^2, j = 1..min(N,T), descending
  int r_hat = 0;
  double threshold = 0.0;      // C_r
  double penalty_const = 0.0;  // C
  std::vector<Matrix> common_components;  // L_pel(tau_m)
  Diagnostics diagnostics;
};

/// 1 / (12 min(N,T)^(1/3)).
double default_rank_threshold(Index rows, Index cols);

/// Eigenvalues of sum_m L'L / (MNT) for the given per-level common components.
Vector pooled_eigenvalues(const std::vector<Matrix>& common_components);

/// r_hat = #{j : sigma_j^2 >= C_r}.
RankReport estimate_r(const Eigen::Ref<const Matrix>& y, const QuantileGrid& grid,
                      double threshold, const PelOptions& options = {});

/// Factors sqrt(T) x top eigenvectors of sum_m L'L/(MNT) and loadings L F / T,
/// clamped to [-box_bound, box_bound]. Uses report.r_hat unless `rank` is given.
FactorEstimate warm_start(const RankReport& report, double box_bound,
                          std::optional<int> rank = std::nullopt);

enum class StrengthTarget { Mean, Quantile };

struct StrengthReport {
  StrengthTarget target = StrengthTarget::Mean;
  int level = -1;  // grid index for quantile targets
  double alpha = 1.0;
  double threshold = 0.0;
  Vector singular_values;
  int selected = 0;
};

/// C N^((alpha-1)/2) / log N.
double strength_threshold(Index rows, double alpha, double constant);

/// Counts factors whose singular value in Lambda F' / sqrt(NT) reaches the
/// strength-alpha threshold. Mean targets need `mean_loadings` (N x r).
StrengthReport select_factors(const FactorEstimate& estimate, const Matrix* mean_loadings,
                              StrengthTarget target, int level, double alpha, double constant);

}  // namespace ufm

#endif  // UFM_RANK_SELECT_HPP
