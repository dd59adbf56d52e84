#ifndef UFM_PANEL_HPP
#define UFM_PANEL_HPP

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ufm/error.hpp"
#include "ufm/types.hpp"

namespace ufm {

/// N x T matrix of observables with row (unit) and column (period) labels.
/// Labels are carried through I/O but never used by the estimators.
class PanelMatrix {
 public:
  explicit PanelMatrix(Matrix values);
  PanelMatrix(Matrix values, std::vector<std::string> row_ids,
              std::vector<std::string> col_ids);

  const Matrix& values() const { return values_; }
  Index rows() const { return values_.rows(); }
  Index cols() const { return values_.cols(); }
  double operator()(Index i, Index t) const { return values_(i, t); }

  const std::vector<std::string>& row_ids() const { return row_ids_; }
  const std::vector<std::string>& col_ids() const { return col_ids_; }

 private:
  Matrix values_;
  std::vector<std::string> row_ids_;
  std::vector<std::string> col_ids_;
};

/// Throws InvalidArgument unless N >= 4 and T >= 4 (every quadrant of the
/// four-way split must be nonempty).
void require_estimable(const PanelMatrix& panel);
void require_estimable(Index rows, Index cols);

enum class PanelLayout { Wide, Long };

PanelLayout parse_layout(const std::string& name);

/// Wide: header row of column labels, optional leading row-label column
/// (signalled by an empty first header cell or by non-numeric first fields).
/// Long: header "row,col,value" followed by one triple per cell.
PanelMatrix read_panel(std::istream& in, PanelLayout layout);
PanelMatrix load_panel(const std::filesystem::path& path, PanelLayout layout);

/// Writes with 17 significant digits so that load(save(x)) == x bitwise.
void write_panel(std::ostream& out, const PanelMatrix& panel, PanelLayout layout);
void save_panel(const std::filesystem::path& path, const PanelMatrix& panel,
                PanelLayout layout);

/// Equally spaced quantile levels tau_m = m / (M + 1) plus the difference
/// step h_d used by the inverse-density stencils.
class QuantileGrid {
 public:
  QuantileGrid(std::vector<double> levels, double shift);

  int size() const { return static_cast<int>(levels_.size()); }
  double level(int m) const { return levels_[static_cast<std::size_t>(m)]; }
  const std::vector<double>& levels() const { return levels_; }
  double shift() const { return shift_; }

  /// One-level grid at `tau`; used by single-quantile estimators.
  QuantileGrid single(int m) const { return QuantileGrid({level(m)}, shift_); }

 private:
  std::vector<double> levels_;
  double shift_;
};

QuantileGrid make_quantile_grid(int m_count, double shift);

struct EstimatorConfig {
  std::optional<int> rank;  // nullopt = estimate by thresholding
  double bandwidth_h = 0.5;
  int kernel_order = 14;
  double box_bound = 10.0;
  int max_outer_iters = 500;
  double outer_tol = 1e-4;
  double inner_tol = 1e-7;
  int max_inner_iters = 200;
  std::uint64_t seed = 0;

  void validate() const;
};

/// h = min(N, T)^(-1/13).
double default_bandwidth(Index rows, Index cols);

/// 10 * max|Y| / min(1, sd(Y)), with fallbacks for constant panels.
double default_box_bound(const Matrix& y);

/// Defaults for a given panel: bandwidth and box scaled to the data.
EstimatorConfig default_config(const Matrix& y);

/// Factors (T x r), one loading matrix (N x r) per quantile level, and the
/// eigenvalues sigma_j^2 of the averaged common-component Gram matrix.
struct FactorEstimate {
  Matrix factors;
  std::vector<Matrix> loadings;
  Vector eigenvalues;
  int iterations = 0;
  bool converged = true;
  Diagnostics diagnostics;

  int rank() const { return static_cast<int>(factors.cols()); }
  int levels() const { return static_cast<int>(loadings.size()); }
  Matrix common_component(int m) const {
    return loadings[static_cast<std::size_t>(m)] * factors.transpose();
  }
};

/// Per-(m, i, t) weights, stored as one N x T slice per quantile level.
class WeightTensor {
 public:
  WeightTensor() = default;
  WeightTensor(int m_count, Index rows, Index cols, double fill = 1.0);

  int levels() const { return static_cast<int>(slices_.size()); }
  Index rows() const { return slices_.empty() ? 0 : slices_.front().rows(); }
  Index cols() const { return slices_.empty() ? 0 : slices_.front().cols(); }

  Matrix& slice(int m) { return slices_[static_cast<std::size_t>(m)]; }
  const Matrix& slice(int m) const { return slices_[static_cast<std::size_t>(m)]; }
  double operator()(int m, Index i, Index t) const { return slice(m)(i, t); }

  double clip_lo = 0.0;
  double clip_hi = 0.0;
  double clipped_fraction = 0.0;

 private:
  std::vector<Matrix> slices_;
};

}  // namespace ufm

#endif  // UFM_PANEL_HPP
