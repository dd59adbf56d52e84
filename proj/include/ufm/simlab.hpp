#ifndef UFM_SIMLAB_HPP
#define UFM_SIMLAB_HPP

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ufm/idw.hpp"
#include "ufm/panel.hpp"
#include "ufm/rank_select.hpp"

namespace ufm {

// Counter-based uniforms: the k-th draw of a stream depends only on
// (seed, stream, k), so draws can be generated in any order or in parallel.
std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);
double uniform01(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);

enum class DgpStream : std::uint64_t { Factor = 1, Loading = 2, Shock = 3 };

/// Quantile coefficient of the simulation design, beta(u) = -0.99 + 2u.
inline double dgp_beta(double u) { return -0.99 + 2.0 * u; }

/// Y_it = beta(U_it) lambda_i f_t with f, lambda ~ U[0,2] and U ~ U[0,1].
struct DgpDraw {
  PanelMatrix panel;
  Matrix true_factor;        // T x 1
  Matrix true_loading_base;  // N x 1
  Matrix u;                  // N x T
  FactorEstimate normalized_truth;  // at beta(tau_m) lambda, normalized
  std::uint64_t truth_seed = 0;
  std::uint64_t shock_seed = 0;
};

/// Truth and shocks from one seed.
DgpDraw gen_dgp(Index n, Index t_count, std::uint64_t seed,
                const QuantileGrid& grid = make_quantile_grid(9, 0.04));

/// Truth from `truth_seed`, shocks from `shock_seed`; keeping `truth_seed`
/// fixed across reps gives the fixed-truth protocol.
DgpDraw gen_dgp(Index n, Index t_count, std::uint64_t truth_seed, std::uint64_t shock_seed,
                const QuantileGrid& grid = make_quantile_grid(9, 0.04));

/// sqrt(T) x top-r eigenvectors of Y'Y/(NT), columns signed to nonnegative sums.
Matrix pca_fit(const Eigen::Ref<const Matrix>& y, int r);

enum class QfaInit { Ufa, Tau };

/// Single-level start from a full-grid rank report: QfaInit::Ufa uses the
/// pooled warm start's factors, QfaInit::Tau the nuclear-norm fit at level m
/// alone. Loadings come from level m's nuclear-norm fit.
FactorEstimate qfa_start(const RankReport& report, int level, int r, double box_bound,
                         QfaInit init);

/// Smoothed quantile factor analysis at one level: UFA on a one-level grid.
FactorEstimate qfa_fit(const Eigen::Ref<const Matrix>& y, const QuantileGrid& grid, int level,
                       const EstimatorConfig& config, const FactorEstimate& start);

/// Convenience wrapper that builds the rank report itself.
FactorEstimate qfa_fit(const Eigen::Ref<const Matrix>& y, const QuantileGrid& grid, int level,
                       int r, QfaInit init, const EstimatorConfig& config,
                       const PelOptions& pel = {});

/// Adjusted R^2 of `truth` regressed on `estimated` plus an intercept.
double adjusted_r2(const Vector& truth, const Matrix& estimated);

/// F0' F / T after flipping each estimated column to agree in sign with truth.
Matrix rotation_scalar(const Matrix& estimated, const Matrix& truth);

enum class Experiment { Table1, Table2, Table3, Table4Fig1 };

Experiment parse_experiment(const std::string& name);
std::string to_string(Experiment e);

struct McSpec {
  Experiment experiment = Experiment::Table1;
  std::vector<Index> sizes{50};  // N = T
  int reps = 100;
  std::uint64_t seed = 0;
  int m_count = 9;
  double shift = 0.04;
  std::optional<double> rank_threshold;  // default 1/(12 min^(1/3))
  PelOptions pel;
  std::vector<double> fig_levels{0.2, 0.5, 0.8};
};

/// Header plus rows of already formatted cells.
struct McTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

struct McResult {
  McTable summary;
  McTable per_rep;
  Diagnostics diagnostics;  // aggregated per-rep warnings, one line per code
};

/// Column names of the per-rep table ("N", "T", "rep", then the statistics).
std::vector<std::string> per_rep_header(const McSpec& spec);

/// Runs the experiment, calling `on_rep` with each per-rep row in rep order
/// as soon as it is available. Reps run in blocks of max_threads().
McResult monte_carlo_run(const McSpec& spec,
                         const std::function<void(const std::vector<std::string>&)>& on_rep = {});

/// %.17g.
std::string format_number(double v);
void write_csv(std::ostream& out, const McTable& table);
void write_csv_row(std::ostream& out, const std::vector<std::string>& row);

}  // namespace ufm

#endif  // UFM_SIMLAB_HPP
