#include "ufm/idw.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ufm/kernel.hpp"
#include "ufm/parallel.hpp"
#include "ufm/sqr.hpp"
#include "ufm/ufa.hpp"

namespace ufm {

SplitIndex split_panel(Index rows, Index cols) {
  require_estimable(rows, cols);
  const Index n_half = rows / 2;
  const Index t_half = cols / 2;
  return {{0, n_half}, {n_half, rows}, {0, t_half}, {t_half, cols}};
}

StencilMode select_stencil(double tau, double shift) {
  if (tau - 2.0 * shift <= 0.01) return StencilMode::Forward;
  if (tau + 2.0 * shift >= 0.99) return StencilMode::Backward;
  return StencilMode::Central;
}

const Stencil& stencil(StencilMode mode) {
  static const Stencil central{{-2, -1, 1, 2}, {1.0, -8.0, 8.0, -1.0}};
  static const Stencil forward{{0, 1, 2, 3, 4}, {-25.0, 48.0, -36.0, 16.0, -3.0}};
  static const Stencil backward{{0, -1, -2, -3, -4}, {25.0, -48.0, 36.0, -16.0, 3.0}};
  switch (mode) {
    case StencilMode::Forward: return forward;
    case StencilMode::Backward: return backward;
    case StencilMode::Central: break;
  }
  return central;
}

namespace {

// Shifted levels are rounded so that e.g. 0.1 + 0.04 and 0.2 - 0.06 coincide.
double snap(double level) { return std::round(level * 1e12) / 1e12; }

}  // namespace

std::vector<double> stencil_levels(const QuantileGrid& grid) {
  std::vector<double> out;
  for (double tau : grid.levels()) {
    const auto mode = select_stencil(tau, grid.shift());
    for (int off : stencil(mode).offsets) {
      const double level = snap(tau + off * grid.shift());
      if (!(level > 0.0 && level < 1.0))
        throw UfmError(ErrorCode::InvalidArgument,
                       "difference step too large: level " + std::to_string(level) +
                           " needed around tau=" + std::to_string(tau));
      out.push_back(level);
    }
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

Matrix PanelSource::block(const IndexRange& rows, const IndexRange& cols) const {
  if (rows.begin < 0 || rows.end > y_.rows() || cols.begin < 0 || cols.end > y_.cols() ||
      rows.size() < 0 || cols.size() < 0)
    throw UfmError(ErrorCode::InvalidArgument, "block outside the panel");
  if (observer_) observer_(rows, cols);
  return y_.block(rows.begin, cols.begin, rows.size(), cols.size());
}

std::size_t CrossFitSet::level_index(double tau) const {
  const double key = snap(tau);
  auto it = std::lower_bound(levels.begin(), levels.end(), key - 1e-11);
  if (it == levels.end() || std::abs(*it - key) > 1e-11)
    throw UfmError(ErrorCode::InvalidArgument, "no cross-fit loadings at level " + std::to_string(tau));
  return static_cast<std::size_t>(it - levels.begin());
}

Matrix half_panel_factors(const PanelSource& source, const IndexRange& rows,
                          const QuantileGrid& grid, const EstimatorConfig& config,
                          const IdwOptions& options, Diagnostics* diagnostics) {
  if (!config.rank) throw UfmError(ErrorCode::InvalidArgument, "cross-fitting needs a fixed rank");
  const int r = *config.rank;
  const Matrix y = source.block(rows, {0, source.cols()});
  if (2 * r >= std::min(y.rows(), y.cols()))
    throw UfmError(ErrorCode::SubsampleRankDeficient,
                   "half panel with " + std::to_string(y.rows()) + " rows cannot carry rank " +
                       std::to_string(r));
  try {
    const auto report =
        estimate_r(y, grid, default_rank_threshold(y.rows(), y.cols()), options.pel);
    const auto init = warm_start(report, config.box_bound, r);
    auto fit = ufa_fit(y, grid, config, init);
    const double top = fit.eigenvalues(0);
    if (!(top > 0.0) || !(fit.eigenvalues(r - 1) > 1e-10 * top))
      throw UfmError(ErrorCode::SubsampleRankDeficient,
                     "half-panel eigenvalues degenerate (smallest " +
                         std::to_string(fit.eigenvalues(r - 1)) + ")");
    if (diagnostics) {
      diagnostics->merge(report.diagnostics);
      diagnostics->merge(fit.diagnostics);
    }
    return fit.factors;
  } catch (const UfmError& e) {
    if (e.code() == ErrorCode::EigenFailure)
      throw UfmError(ErrorCode::SubsampleRankDeficient, e.what());
    throw;
  }
}

std::vector<Matrix> shifted_loadings(const PanelSource& source, const IndexRange& rows,
                                     const IndexRange& cols, const Matrix& factors,
                                     const std::vector<double>& levels,
                                     const EstimatorConfig& config, Diagnostics* diagnostics) {
  const Matrix y = source.block(rows, cols);
  const Matrix f = factors.middleRows(cols.begin, cols.size());
  const Index r = f.cols();
  const auto kernel = SmoothKernel<double>::gaussian(config.kernel_order);
  const SqrOptions opts{config.inner_tol, config.max_inner_iters};

  // Least-squares starting values, one per row.
  const Matrix ols = f.colPivHouseholderQr().solve(y.transpose()).transpose();
  const Vector ones = Vector::Ones(cols.size());

  const auto level_count = static_cast<Index>(levels.size());
  std::vector<Matrix> out(levels.size(), Matrix(rows.size(), r));
  std::vector<char> unconverged(static_cast<std::size_t>(level_count * rows.size()), 0);
  parallel_for(level_count * rows.size(), [&](Index job) {
    const Index k = job / rows.size();
    const Index i = job % rows.size();
    const Vector yi = y.row(i).transpose();
    const Vector taus = Vector::Constant(cols.size(), levels[static_cast<std::size_t>(k)]);
    const Vector init = ols.row(i).transpose();
    auto sol = solve_sqr<double>(SqrDesign<double>{f, yi, taus, ones}, kernel,
                                 config.bandwidth_h, config.box_bound, init, opts);
    out[static_cast<std::size_t>(k)].row(i) = sol.theta.transpose();
    unconverged[static_cast<std::size_t>(job)] = !sol.converged;
  });
  const auto misses = std::count(unconverged.begin(), unconverged.end(), char(1));
  if (diagnostics && misses > 0)
    diagnostics->add(WarningCode::MaxIters,
                     std::to_string(misses) + " cross-fit loading solves stopped early");
  return out;
}

CrossFitSet crossfit_estimates(const Eigen::Ref<const Matrix>& y, const QuantileGrid& grid,
                               const EstimatorConfig& config, const SplitIndex& split,
                               const IdwOptions& options) {
  const Matrix panel = y;
  const PanelSource source(panel);
  CrossFitSet out;
  out.split = split;
  out.levels = stencil_levels(grid);
  out.f_top = half_panel_factors(source, split.n1, grid, config, options, &out.diagnostics);
  out.f_bottom = half_panel_factors(source, split.n2, grid, config, options, &out.diagnostics);
  const IndexRange all_rows{0, panel.rows()};
  out.lam_tl = shifted_loadings(source, all_rows, split.t1, out.f_top, out.levels, config,
                                &out.diagnostics);
  out.lam_tr = shifted_loadings(source, all_rows, split.t2, out.f_top, out.levels, config,
                                &out.diagnostics);
  out.lam_bl = shifted_loadings(source, all_rows, split.t1, out.f_bottom, out.levels, config,
                                &out.diagnostics);
  out.lam_br = shifted_loadings(source, all_rows, split.t2, out.f_bottom, out.levels, config,
                                &out.diagnostics);
  return out;
}

namespace {

// Quadrant (a, b) is weighted with factors fitted on the other row half and
// loadings fitted on the other column half:
//   (1,1): (b,r) + bottom   (1,2): (b,l) + bottom
//   (2,1): (t,r) + top      (2,2): (t,l) + top
struct QuadrantPlan {
  bool top_factors;
  int loading_cols;  // column half used for the loadings
};

QuadrantPlan plan_for(int a, int b) {
  if (a != 1 && a != 2) throw UfmError(ErrorCode::InvalidArgument, "quadrant row index must be 1 or 2");
  if (b != 1 && b != 2) throw UfmError(ErrorCode::InvalidArgument, "quadrant column index must be 1 or 2");
  return {a == 2, b == 1 ? 2 : 1};
}

// w(m, i, t) = d lambda_i / d tau (tau_m)' f_t for i in rows, t in cols.
// `table(k)` gives the loading matrix at levels[k] with rows aligned to `rows`.
template <typename Table>
std::vector<Matrix> assemble(const QuantileGrid& grid, const std::vector<double>& levels,
                             Table&& table, const Matrix& factors, const IndexRange& cols) {
  auto index_of = [&](double level) {
    auto it = std::lower_bound(levels.begin(), levels.end(), snap(level) - 1e-11);
    return static_cast<std::size_t>(it - levels.begin());
  };
  const Matrix f = factors.middleRows(cols.begin, cols.size());
  std::vector<Matrix> out;
  for (int m = 0; m < grid.size(); ++m) {
    const double tau = grid.level(m);
    const auto mode = select_stencil(tau, grid.shift());
    std::vector<Matrix> values;
    for (int off : stencil(mode).offsets) values.push_back(table(index_of(tau + off * grid.shift())));
    const Matrix deriv = fpdf_derivative(values, grid.shift(), mode);
    out.push_back(deriv * f.transpose());
  }
  return out;
}

}  // namespace

std::vector<Matrix> quadrant_raw_weights(const PanelSource& source, const QuantileGrid& grid,
                                         const EstimatorConfig& config, const SplitIndex& split,
                                         int a, int b, const IdwOptions& options) {
  const auto plan = plan_for(a, b);
  const IndexRange& factor_rows = plan.top_factors ? split.n1 : split.n2;
  const Matrix f = half_panel_factors(source, factor_rows, grid, config, options);
  const auto levels = stencil_levels(grid);
  const auto table = shifted_loadings(source, split.rows(a), split.cols(plan.loading_cols), f,
                                      levels, config);
  return assemble(grid, levels, [&](std::size_t k) -> const Matrix& { return table[k]; }, f,
                  split.cols(b));
}

WeightTensor raw_inverse_density(const CrossFitSet& crossfit, const QuantileGrid& grid) {
  const SplitIndex& split = crossfit.split;
  const Index n = split.n2.end;
  const Index t_count = split.t2.end;
  WeightTensor out(grid.size(), n, t_count, 0.0);
  for (int a = 1; a <= 2; ++a)
    for (int b = 1; b <= 2; ++b) {
      const auto plan = plan_for(a, b);
      const Matrix& f = plan.top_factors ? crossfit.f_top : crossfit.f_bottom;
      const std::vector<Matrix>* table = nullptr;
      if (plan.top_factors)
        table = plan.loading_cols == 1 ? &crossfit.lam_tl : &crossfit.lam_tr;
      else
        table = plan.loading_cols == 1 ? &crossfit.lam_bl : &crossfit.lam_br;
      const IndexRange& rows = split.rows(a);
      const IndexRange& cols = split.cols(b);
      const auto blocks = assemble(
          grid, crossfit.levels,
          [&](std::size_t k) -> Matrix { return (*table)[k].middleRows(rows.begin, rows.size()); },
          f, cols);
      for (int m = 0; m < grid.size(); ++m)
        out.slice(m).block(rows.begin, cols.begin, rows.size(), cols.size()) =
            blocks[static_cast<std::size_t>(m)];
    }
  return out;
}

void clip_weights(WeightTensor& weights, const IdwOptions& options, Diagnostics* diagnostics) {
  if (!(options.clip_lo_factor > 0.0 && options.clip_hi_factor > options.clip_lo_factor))
    throw UfmError(ErrorCode::InvalidArgument, "clip factors must satisfy 0 < lo < hi");
  std::vector<double> all;  // finite entries only; NaN would break the ordering
  std::size_t total = 0;
  for (int m = 0; m < weights.levels(); ++m) {
    const Matrix& s = weights.slice(m);
    total += static_cast<std::size_t>(s.size());
    for (Index k = 0; k < s.size(); ++k)
      if (std::isfinite(s.data()[k])) all.push_back(s.data()[k]);
  }
  if (total == 0) return;
  double med = 1.0;
  if (!all.empty()) {
    auto mid = all.begin() + static_cast<std::ptrdiff_t>(all.size() / 2);
    std::nth_element(all.begin(), mid, all.end());
    med = *mid;
    if (all.size() % 2 == 0) med = 0.5 * (med + *std::max_element(all.begin(), mid));
  }
  if (!(med > 0.0) || !std::isfinite(med)) med = 1.0;

  weights.clip_lo = options.clip_lo_factor * med;
  weights.clip_hi = options.clip_hi_factor * med;
  std::size_t clipped = 0;
  for (int m = 0; m < weights.levels(); ++m) {
    Matrix& s = weights.slice(m);
    for (Index k = 0; k < s.size(); ++k) {
      double& w = s.data()[k];
      if (std::isnan(w)) {
        w = weights.clip_hi;
        ++clipped;
      } else if (w < weights.clip_lo) {
        w = weights.clip_lo;
        ++clipped;
      } else if (w > weights.clip_hi) {
        w = weights.clip_hi;
        ++clipped;
      }
    }
  }
  weights.clipped_fraction = static_cast<double>(clipped) / static_cast<double>(total);
  if (diagnostics && weights.clipped_fraction > options.clip_warn_fraction)
    diagnostics->add(WarningCode::ClippedFraction,
                     std::to_string(100.0 * weights.clipped_fraction) +
                         "% of inverse-density weights were clipped");
}

WeightTensor inverse_density_weights(const CrossFitSet& crossfit, const QuantileGrid& grid,
                                     const IdwOptions& options, Diagnostics* diagnostics) {
  WeightTensor w = raw_inverse_density(crossfit, grid);
  clip_weights(w, options, diagnostics);
  return w;
}

IdwResult idw_ufa_fit(const Eigen::Ref<const Matrix>& y, const QuantileGrid& grid,
                      const EstimatorConfig& config, const FactorEstimate& init,
                      const IdwOptions& options) {
  config.validate();
  if (!config.rank) throw UfmError(ErrorCode::InvalidArgument, "IDW-UFA needs a fixed rank");
  Diagnostics diagnostics;
  if (!(grid.shift() < config.bandwidth_h))
    diagnostics.add(WarningCode::BandwidthBand,
                    "difference step h_d=" + std::to_string(grid.shift()) +
                        " is not below the smoothing bandwidth h=" +
                        std::to_string(config.bandwidth_h));
  const auto split = split_panel(y.rows(), y.cols());
  const auto crossfit = crossfit_estimates(y, grid, config, split, options);
  diagnostics.merge(crossfit.diagnostics);
  IdwResult out;
  out.weights = inverse_density_weights(crossfit, grid, options, &diagnostics);
  out.estimate = ufa_fit(y, grid, config, init, &out.weights);
  diagnostics.merge(out.estimate.diagnostics);
  out.estimate.diagnostics = std::move(diagnostics);
  return out;
}

IdwResult idw_ufa_fit(const Eigen::Ref<const Matrix>& y, const QuantileGrid& grid,
                      const EstimatorConfig& config, const IdwOptions& options) {
  if (!config.rank) throw UfmError(ErrorCode::InvalidArgument, "IDW-UFA needs a fixed rank");
  const auto report = estimate_r(y, grid, default_rank_threshold(y.rows(), y.cols()), options.pel);
  const auto start = warm_start(report, config.box_bound, *config.rank);
  const auto plain = ufa_fit(y, grid, config, start);
  return idw_ufa_fit(y, grid, config, plain, options);
}

}  // namespace ufm
