#ifndef UFM_IDW_HPP
#define UFM_IDW_HPP

#include <array>
#include <functional>
#include <vector>

#include "ufm/panel.hpp"
#include "ufm/rank_select.hpp"

namespace ufm {

/// Row halves n1 = [0, N/2), n2 = [N/2, N) and column halves t1, t2 (floor).
/// Quadrant (a, b) with a, b in {1, 2} is rows(a) x cols(b).
struct SplitIndex {
  IndexRange n1, n2, t1, t2;

  const IndexRange& rows(int a) const { return a == 1 ? n1 : n2; }
  const IndexRange& cols(int b) const { return b == 1 ? t1 : t2; }
};

SplitIndex split_panel(Index rows, Index cols);
inline SplitIndex split_panel(const PanelMatrix& panel) {
  return split_panel(panel.rows(), panel.cols());
}

enum class StencilMode { Central, Forward, Backward };

/// Forward when tau - 2 h_d <= 0.01, backward when tau + 2 h_d >= 0.99.
StencilMode select_stencil(double tau, double shift);

/// Level offsets (in units of h_d) and numerators; the derivative is
/// sum_k coef_k value(tau + offset_k h_d) / (12 h_d).
struct Stencil {
  std::vector<int> offsets;
  std::vector<double> coefs;
};

const Stencil& stencil(StencilMode mode);

/// Five-point difference from values ordered as stencil(mode).offsets.
template <typename T>
T fpdf_derivative(const std::vector<T>& values, double shift, StencilMode mode) {
  const Stencil& s = stencil(mode);
  if (values.size() != s.offsets.size())
    throw UfmError(ErrorCode::InvalidArgument, "stencil needs one value per offset");
  T acc = s.coefs[0] * values[0];
  for (std::size_t k = 1; k < values.size(); ++k) acc = acc + s.coefs[k] * values[k];
  return acc / (12.0 * shift);
}

/// Same, sampling `path` at the stencil levels around tau.
template <typename Fn>
auto fpdf_derivative(Fn&& path, double tau, double shift, StencilMode mode) {
  const Stencil& s = stencil(mode);
  std::vector<decltype(path(tau))> values;
  for (int off : s.offsets) values.push_back(path(tau + off * shift));
  return fpdf_derivative(values, shift, mode);
}

/// Every level at which cross-fit loadings are needed for `grid`, sorted.
std::vector<double> stencil_levels(const QuantileGrid& grid);

/// Read-only view of Y that reports every block it hands out. Estimation
/// code in this module touches the data only through block().
class PanelSource {
 public:
  using Observer = std::function<void(const IndexRange& rows, const IndexRange& cols)>;

  explicit PanelSource(const Matrix& y, Observer observer = {})
      : y_(y), observer_(std::move(observer)) {}

  Index rows() const { return y_.rows(); }
  Index cols() const { return y_.cols(); }
  Matrix block(const IndexRange& rows, const IndexRange& cols) const;

 private:
  const Matrix& y_;
  Observer observer_;
};

struct IdwOptions {
  double clip_lo_factor = 0.05;  // times the median raw weight
  double clip_hi_factor = 20.0;
  double clip_warn_fraction = 0.10;
  PelOptions pel;  // warm starts of the half-panel fits
};

/// Half-panel factors and loading tables. Each lam_* holds one N x r matrix
/// per entry of `levels`: lam_tl regresses Y(i, t1) on f_top(t1), lam_tr uses
/// t2, and lam_b* use f_bottom.
struct CrossFitSet {
  SplitIndex split;
  Matrix f_top;     // fit on rows n1, all columns
  Matrix f_bottom;  // fit on rows n2
  std::vector<double> levels;
  std::vector<Matrix> lam_tl, lam_tr, lam_bl, lam_br;
  Diagnostics diagnostics;

  std::size_t level_index(double tau) const;
};

/// UFA on rows `rows` over all columns, started from a nuclear-norm warm
/// start computed on the same rows. Throws SubsampleRankDeficient when the
/// half-panel normalization degenerates.
Matrix half_panel_factors(const PanelSource& source, const IndexRange& rows,
                          const QuantileGrid& grid, const EstimatorConfig& config,
                          const IdwOptions& options, Diagnostics* diagnostics = nullptr);

/// Smoothed QR of Y(i, cols) on factors(cols) for every i in `rows` and every
/// level; entry k is rows.size() x r.
std::vector<Matrix> shifted_loadings(const PanelSource& source, const IndexRange& rows,
                                     const IndexRange& cols, const Matrix& factors,
                                     const std::vector<double>& levels,
                                     const EstimatorConfig& config,
                                     Diagnostics* diagnostics = nullptr);

CrossFitSet crossfit_estimates(const Eigen::Ref<const Matrix>& y, const QuantileGrid& grid,
                               const EstimatorConfig& config, const SplitIndex& split,
                               const IdwOptions& options = {});

/// Unclipped weights for quadrant (a, b), one rows(a) x cols(b) block per
/// level, computed from a source that only ever serves the other three
/// quadrants' data. Matches the same block of inverse_density_weights
/// before clipping.
std::vector<Matrix> quadrant_raw_weights(const PanelSource& source, const QuantileGrid& grid,
                                         const EstimatorConfig& config, const SplitIndex& split,
                                         int a, int b, const IdwOptions& options = {});

/// Unclipped 1/f estimates for every (m, i, t) from a complete cross-fit.
WeightTensor raw_inverse_density(const CrossFitSet& crossfit, const QuantileGrid& grid);

/// Clips to [lo * med, hi * med] with med the median finite raw entry (1 when that
/// median is not positive). Warns when too many entries were clipped.
void clip_weights(WeightTensor& weights, const IdwOptions& options, Diagnostics* diagnostics);

WeightTensor inverse_density_weights(const CrossFitSet& crossfit, const QuantileGrid& grid,
                                     const IdwOptions& options = {},
                                     Diagnostics* diagnostics = nullptr);

struct IdwResult {
  FactorEstimate estimate;
  WeightTensor weights;
};

/// Cross-fit, weights, then weighted UFA on the full panel started at `init`.
IdwResult idw_ufa_fit(const Eigen::Ref<const Matrix>& y, const QuantileGrid& grid,
                      const EstimatorConfig& config, const FactorEstimate& init,
                      const IdwOptions& options = {});

/// As above, with init = plain UFA from the full-panel warm start.
IdwResult idw_ufa_fit(const Eigen::Ref<const Matrix>& y, const QuantileGrid& grid,
                      const EstimatorConfig& config, const IdwOptions& options = {});

}  // namespace ufm

#endif  // UFM_IDW_HPP
