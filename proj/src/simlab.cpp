#include "ufm/simlab.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <ostream>

#include <Eigen/Eigenvalues>

#include "ufm/inference.hpp"
#include "ufm/parallel.hpp"
#include "ufm/ufa.hpp"

namespace ufm {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return splitmix64(splitmix64(splitmix64(seed) ^ a) ^ (b * 0xd1b54a32d192ed03ULL));
}

double uniform01(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  const std::uint64_t bits = derive_seed(seed, stream, index + 1);
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

DgpDraw gen_dgp(Index n, Index t_count, std::uint64_t seed, const QuantileGrid& grid) {
  return gen_dgp(n, t_count, seed, seed, grid);
}

DgpDraw gen_dgp(Index n, Index t_count, std::uint64_t truth_seed, std::uint64_t shock_seed,
                const QuantileGrid& grid) {
  require_estimable(n, t_count);
  const auto stream = [](DgpStream s) { return static_cast<std::uint64_t>(s); };
  Matrix f(t_count, 1), lam(n, 1), u(n, t_count), y(n, t_count);
  for (Index t = 0; t < t_count; ++t)
    f(t, 0) = 2.0 * uniform01(truth_seed, stream(DgpStream::Factor), static_cast<std::uint64_t>(t));
  for (Index i = 0; i < n; ++i)
    lam(i, 0) = 2.0 * uniform01(truth_seed, stream(DgpStream::Loading), static_cast<std::uint64_t>(i));
  for (Index i = 0; i < n; ++i)
    for (Index t = 0; t < t_count; ++t) {
      const auto k = static_cast<std::uint64_t>(i * t_count + t);
      u(i, t) = uniform01(shock_seed, stream(DgpStream::Shock), k);
      y(i, t) = dgp_beta(u(i, t)) * lam(i, 0) * f(t, 0);
    }

  std::vector<Matrix> truth_loadings;
  for (double tau : grid.levels()) truth_loadings.push_back(dgp_beta(tau) * lam);
  DgpDraw out{PanelMatrix(std::move(y)), f, lam, std::move(u),
              normalize(truth_loadings, f), truth_seed, shock_seed};
  return out;
}

Matrix pca_fit(const Eigen::Ref<const Matrix>& y, int r) {
  const Index n = y.rows();
  const Index t_count = y.cols();
  if (r < 1 || r > std::min(n, t_count))
    throw UfmError(ErrorCode::InvalidArgument, "PCA rank must lie in [1, min(N,T)]");
  const Matrix gram = y.transpose() * y / (static_cast<double>(n) * static_cast<double>(t_count));
  Eigen::SelfAdjointEigenSolver<Matrix> eig(gram);
  if (eig.info() != Eigen::Success) throw UfmError(ErrorCode::EigenFailure, "PCA eigen failed");
  Matrix f(t_count, r);
  for (int j = 0; j < r; ++j) {
    f.col(j) = std::sqrt(static_cast<double>(t_count)) * eig.eigenvectors().col(t_count - 1 - j);
    if (f.col(j).sum() < 0.0) f.col(j) *= -1.0;
  }
  return f;
}

FactorEstimate qfa_start(const RankReport& report, int level, int r, double box_bound,
                         QfaInit init) {
  if (level < 0 || level >= static_cast<int>(report.common_components.size()))
    throw UfmError(ErrorCode::InvalidArgument, "QFA level outside the rank report");
  const Matrix& common = report.common_components[static_cast<std::size_t>(level)];
  if (init == QfaInit::Tau) {
    RankReport one;
    one.common_components = {common};
    return warm_start(one, box_bound, r);
  }
  FactorEstimate pooled = warm_start(report, box_bound, r);
  FactorEstimate out;
  out.factors = pooled.factors;
  out.eigenvalues = pooled.eigenvalues;
  out.loadings = {(common * pooled.factors / static_cast<double>(common.cols()))
                      .cwiseMax(-box_bound)
                      .cwiseMin(box_bound)};
  return out;
}

FactorEstimate qfa_fit(const Eigen::Ref<const Matrix>& y, const QuantileGrid& grid, int level,
                       const EstimatorConfig& config, const FactorEstimate& start) {
  EstimatorConfig cfg = config;
  cfg.rank = start.rank();
  return ufa_fit(y, grid.single(level), cfg, start);
}

FactorEstimate qfa_fit(const Eigen::Ref<const Matrix>& y, const QuantileGrid& grid, int level,
                       int r, QfaInit init, const EstimatorConfig& config,
                       const PelOptions& pel) {
  const auto report = estimate_r(y, grid, default_rank_threshold(y.rows(), y.cols()), pel);
  return qfa_fit(y, grid, level, config, qfa_start(report, level, r, config.box_bound, init));
}

double adjusted_r2(const Vector& truth, const Matrix& estimated) {
  const Index t_count = truth.size();
  const Index k = estimated.cols();
  if (k < 1 || estimated.rows() != t_count)
    throw UfmError(ErrorCode::InvalidArgument, "estimated factors must be T x k with k >= 1");
  if (t_count <= k + 1)
    throw UfmError(ErrorCode::DegenerateRegressors, "too few periods for the regression");
  for (Index j = 0; j < k; ++j) {
    const auto col = estimated.col(j).array();
    const double spread = col.maxCoeff() - col.minCoeff();
    if (!(spread > 1e-12 * std::max(1.0, col.abs().maxCoeff())))
      throw UfmError(ErrorCode::DegenerateRegressors, "estimated factor has zero variance");
  }
  const double sst = (truth.array() - truth.mean()).square().sum();
  if (!(sst > 0.0)) throw UfmError(ErrorCode::DegenerateRegressors, "true factor is constant");
  Matrix x(t_count, k + 1);
  x.col(0).setOnes();
  x.rightCols(k) = estimated;
  const Vector coef = x.colPivHouseholderQr().solve(truth);
  const double ssr = (truth - x * coef).squaredNorm();
  const double r2 = 1.0 - ssr / sst;
  return 1.0 - (1.0 - r2) * static_cast<double>(t_count - 1) / static_cast<double>(t_count - k - 1);
}

Matrix rotation_scalar(const Matrix& estimated, const Matrix& truth) {
  if (estimated.rows() != truth.rows())
    throw UfmError(ErrorCode::InvalidArgument, "estimate and truth disagree on T");
  Matrix aligned = estimated;
  for (Index j = 0; j < std::min(aligned.cols(), truth.cols()); ++j)
    if (aligned.col(j).dot(truth.col(j)) < 0.0) aligned.col(j) *= -1.0;
  return truth.transpose() * aligned / static_cast<double>(truth.rows());
}

Experiment parse_experiment(const std::string& name) {
  if (name == "1" || name == "table1") return Experiment::Table1;
  if (name == "2" || name == "table2") return Experiment::Table2;
  if (name == "3" || name == "table3") return Experiment::Table3;
  if (name == "4" || name == "table4" || name == "table4_fig1" || name == "fig1")
    return Experiment::Table4Fig1;
  throw UfmError(ErrorCode::InvalidArgument, "unknown experiment " + name);
}

std::string to_string(Experiment e) {
  switch (e) {
    case Experiment::Table1: return "table1";
    case Experiment::Table2: return "table2";
    case Experiment::Table3: return "table3";
    case Experiment::Table4Fig1: return "table4_fig1";
  }
  return "unknown";
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_csv_row(std::ostream& out, const std::vector<std::string>& row) {
  for (std::size_t k = 0; k < row.size(); ++k) out << (k ? "," : "") << row[k];
  out << '\n';
}

void write_csv(std::ostream& out, const McTable& table) {
  write_csv_row(out, table.header);
  for (const auto& row : table.rows) write_csv_row(out, row);
}

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct RepOutcome {
  std::vector<double> values;
  Diagnostics diagnostics;
};

std::string level_tag(double tau) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%.2f", tau);
  return buf;
}

int grid_index(const QuantileGrid& grid, double tau) {
  for (int m = 0; m < grid.size(); ++m)
    if (std::abs(grid.level(m) - tau) < 1e-9) return m;
  throw UfmError(ErrorCode::InvalidArgument, "level " + level_tag(tau) + " is not on the grid");
}

// Runs `fn`; numeric failures become NaN plus a diagnostic so that one bad
// rep does not abort a long run.
template <typename Fn>
double guarded(Diagnostics& diag, const char* what, Fn&& fn) {
  try {
    return fn();
  } catch (const UfmError& e) {
    if (!is_numeric(e.code())) throw;
    diag.add(WarningCode::NoConverge, std::string(what) + " failed: " + e.what());
    return kNaN;
  }
}

class Runner {
 public:
  Runner(const McSpec& spec, Index size)
      : spec_(spec), n_(size), grid_(make_quantile_grid(spec.m_count, spec.shift)) {
    threshold_ = spec.rank_threshold.value_or(default_rank_threshold(n_, n_));
  }

  std::vector<std::string> value_names() const {
    switch (spec_.experiment) {
      case Experiment::Table1: return {"r_hat", "sigma2_1", "sigma2_2"};
      case Experiment::Table2: {
        std::vector<std::string> names{"r_hat", "ufa", "idw_ufa", "pca"};
        for (const char* init : {"qfa_ini_ufa", "qfa_ini_tau"})
          for (double tau : grid_.levels()) names.push_back(std::string(init) + "_" + level_tag(tau));
        return names;
      }
      case Experiment::Table3: return {"abs_h_minus_1"};
      case Experiment::Table4Fig1: {
        std::vector<std::string> names{"f_std"};
        for (double tau : spec_.fig_levels) names.push_back("L_std_" + level_tag(tau));
        return names;
      }
    }
    return {};
  }

  RepOutcome run(int rep) const {
    const auto size_key = static_cast<std::uint64_t>(n_);
    const std::uint64_t rep_seed = derive_seed(spec_.seed, size_key, static_cast<std::uint64_t>(rep) + 1);
    const std::uint64_t truth_seed = derive_seed(spec_.seed, size_key, 0);
    switch (spec_.experiment) {
      case Experiment::Table1: return table1(gen_dgp(n_, n_, rep_seed, grid_));
      case Experiment::Table2: return table2(gen_dgp(n_, n_, rep_seed, grid_));
      case Experiment::Table3: return table3(gen_dgp(n_, n_, truth_seed, rep_seed, grid_));
      case Experiment::Table4Fig1: return table4(gen_dgp(n_, n_, truth_seed, rep_seed, grid_));
    }
    return {};
  }

 private:
  RankReport rank_report(const Matrix& y) const { return estimate_r(y, grid_, threshold_, spec_.pel); }

  RepOutcome table1(const DgpDraw& draw) const {
    const auto report = rank_report(draw.panel.values());
    RepOutcome out;
    out.values = {static_cast<double>(report.r_hat), report.eigenvalues(0), report.eigenvalues(1)};
    return out;
  }

  RepOutcome table2(const DgpDraw& draw) const {
    const Matrix& y = draw.panel.values();
    const Vector truth = draw.true_factor.col(0);
    const auto report = rank_report(y);
    RepOutcome out;
    auto& diag = out.diagnostics;
    const int r_max = static_cast<int>((n_ - 1) / 4);  // half panels must carry the rank too
    const int r_use = std::clamp(report.r_hat, 1, std::max(1, r_max));
    EstimatorConfig cfg = default_config(y);
    cfg.rank = r_use;

    FactorEstimate ufa;
    bool have_ufa = false;
    const double ufa_r2 = guarded(diag, "UFA", [&] {
      ufa = ufa_fit(y, grid_, cfg, warm_start(report, cfg.box_bound, r_use));
      have_ufa = true;
      return adjusted_r2(truth, ufa.factors);
    });
    const double idw_r2 = guarded(diag, "IDW-UFA", [&] {
      if (!have_ufa) return kNaN;
      IdwOptions opts;
      opts.pel = spec_.pel;
      return adjusted_r2(truth, idw_ufa_fit(y, grid_, cfg, ufa, opts).estimate.factors);
    });
    const double pca_r2 = guarded(diag, "PCA", [&] { return adjusted_r2(truth, pca_fit(y, 1)); });
    out.values = {static_cast<double>(report.r_hat), ufa_r2, idw_r2, pca_r2};
    for (QfaInit init : {QfaInit::Ufa, QfaInit::Tau})
      for (int m = 0; m < grid_.size(); ++m)
        out.values.push_back(guarded(diag, "QFA", [&] {
          const auto start = qfa_start(report, m, 1, cfg.box_bound, init);
          return adjusted_r2(truth, qfa_fit(y, grid_, m, cfg, start).factors);
        }));
    return out;
  }

  IdwResult idw_rank_one(const Matrix& y, Diagnostics& diag) const {
    const auto report = rank_report(y);
    EstimatorConfig cfg = default_config(y);
    cfg.rank = 1;
    const auto ufa = ufa_fit(y, grid_, cfg, warm_start(report, cfg.box_bound, 1));
    IdwOptions opts;
    opts.pel = spec_.pel;
    auto res = idw_ufa_fit(y, grid_, cfg, ufa, opts);
    diag.merge(res.estimate.diagnostics);
    return res;
  }

  RepOutcome table3(const DgpDraw& draw) const {
    RepOutcome out;
    out.values = {guarded(out.diagnostics, "IDW-UFA", [&] {
      const auto res = idw_rank_one(draw.panel.values(), out.diagnostics);
      return std::abs(rotation_scalar(res.estimate.factors, draw.normalized_truth.factors)(0, 0) - 1.0);
    })};
    return out;
  }

  RepOutcome table4(const DgpDraw& draw) const {
    RepOutcome out;
    const std::size_t width = 1 + spec_.fig_levels.size();
    const Index t_star = n_ / 2 - 1;
    const Index i_star = n_ / 2 - 1;
    std::vector<int> fig_index;
    for (double tau : spec_.fig_levels) fig_index.push_back(grid_index(grid_, tau));
    try {
      const Matrix& y = draw.panel.values();
      const auto res = idw_rank_one(y, out.diagnostics);
      const auto& est = res.estimate;
      const auto covs = plugin_covariances(est, grid_, res.weights);
      const Matrix& f0 = draw.normalized_truth.factors;
      const double sign = est.factors.col(0).dot(f0.col(0)) < 0.0 ? -1.0 : 1.0;
      const double se_f = standard_errors(est, covs, {SeKind::Factor, 0, 0, t_star})(0);
      out.values.push_back((sign * est.factors(t_star, 0) - f0(t_star, 0)) / se_f);
      for (std::size_t k = 0; k < fig_index.size(); ++k) {
        const int m = fig_index[k];
        const double fitted = est.loadings[static_cast<std::size_t>(m)].row(i_star).dot(est.factors.row(t_star));
        const double truth = dgp_beta(grid_.level(m)) * draw.true_loading_base(i_star, 0) *
                             draw.true_factor(t_star, 0);
        const double se = standard_errors(est, covs, {SeKind::Common, m, i_star, t_star})(0);
        out.values.push_back((fitted - truth) / se);
      }
    } catch (const UfmError& e) {
      if (!is_numeric(e.code())) throw;
      out.diagnostics.add(WarningCode::NoConverge, std::string("standardization failed: ") + e.what());
      out.values.assign(width, kNaN);
    }
    return out;
  }

  const McSpec& spec_;
  Index n_;
  QuantileGrid grid_;
  double threshold_ = 0.0;
};

double finite_mean(const std::vector<double>& v) {
  double acc = 0.0;
  int count = 0;
  for (double x : v)
    if (std::isfinite(x)) {
      acc += x;
      ++count;
    }
  return count ? acc / count : kNaN;
}

double finite_sd(const std::vector<double>& v) {
  const double mu = finite_mean(v);
  double acc = 0.0;
  int count = 0;
  for (double x : v)
    if (std::isfinite(x)) {
      acc += (x - mu) * (x - mu);
      ++count;
    }
  return count > 1 ? std::sqrt(acc / (count - 1)) : kNaN;
}

}  // namespace

std::vector<std::string> per_rep_header(const McSpec& spec) {
  if (spec.sizes.empty()) throw UfmError(ErrorCode::InvalidArgument, "no sample sizes given");
  std::vector<std::string> header{"N", "T", "rep"};
  const auto names = Runner(spec, spec.sizes.front()).value_names();
  header.insert(header.end(), names.begin(), names.end());
  return header;
}

McResult monte_carlo_run(const McSpec& spec,
                         const std::function<void(const std::vector<std::string>&)>& on_rep) {
  if (spec.reps < 1) throw UfmError(ErrorCode::InvalidArgument, "reps must be positive");
  if (spec.sizes.empty()) throw UfmError(ErrorCode::InvalidArgument, "no sample sizes given");
  McResult result;
  std::map<std::string, int> warning_counts;
  std::map<std::string, WarningCode> warning_codes;

  bool header_done = false;
  for (Index size : spec.sizes) {
    const Runner runner(spec, size);
    const auto names = runner.value_names();
    if (!header_done) {
      result.per_rep.header = per_rep_header(spec);
      result.summary.header = {"N", "T", "reps"};
      if (spec.experiment == Experiment::Table1) {
        result.summary.header.insert(result.summary.header.end(), {"avg_r_hat", "max_r_hat", "min_r_hat"});
      } else if (spec.experiment == Experiment::Table4Fig1) {
        for (const auto& n : names) {
          result.summary.header.push_back("mean_" + n);
          result.summary.header.push_back("std_" + n);
        }
      } else {
        for (const auto& n : names) result.summary.header.push_back("mean_" + n);
      }
      header_done = true;
    }

    std::vector<std::vector<double>> columns(names.size());
    const int block = std::max(1, max_threads());
    for (int start = 0; start < spec.reps; start += block) {
      const int count = std::min(block, spec.reps - start);
      std::vector<RepOutcome> outcomes(static_cast<std::size_t>(count));
      parallel_for(count, [&](Index k) {
        outcomes[static_cast<std::size_t>(k)] = runner.run(start + static_cast<int>(k));
      });
      for (int k = 0; k < count; ++k) {
        const auto& o = outcomes[static_cast<std::size_t>(k)];
        std::vector<std::string> row{std::to_string(size), std::to_string(size),
                                     std::to_string(start + k)};
        for (std::size_t c = 0; c < o.values.size(); ++c) {
          row.push_back(c == 0 && spec.experiment != Experiment::Table3 &&
                                spec.experiment != Experiment::Table4Fig1 && std::isfinite(o.values[c])
                            ? std::to_string(static_cast<int>(o.values[c]))
                            : format_number(o.values[c]));
          columns[c].push_back(o.values[c]);
        }
        for (const auto& w : o.diagnostics.items()) {
          ++warning_counts[to_string(w.code)];
          warning_codes.emplace(to_string(w.code), w.code);
        }
        if (on_rep) on_rep(row);
        result.per_rep.rows.push_back(std::move(row));
      }
    }

    std::vector<std::string> summary{std::to_string(size), std::to_string(size),
                                     std::to_string(spec.reps)};
    if (spec.experiment == Experiment::Table1) {
      const auto& r = columns[0];
      summary.push_back(format_number(finite_mean(r)));
      summary.push_back(format_number(*std::max_element(r.begin(), r.end())));
      summary.push_back(format_number(*std::min_element(r.begin(), r.end())));
    } else if (spec.experiment == Experiment::Table4Fig1) {
      for (const auto& c : columns) {
        summary.push_back(format_number(finite_mean(c)));
        summary.push_back(format_number(finite_sd(c)));
      }
    } else {
      for (const auto& c : columns) summary.push_back(format_number(finite_mean(c)));
    }
    result.summary.rows.push_back(std::move(summary));
  }
  for (const auto& [name, count] : warning_counts)
    result.diagnostics.add(warning_codes.at(name),
                           name + " raised " + std::to_string(count) + " time(s) across reps");
  return result;
}

}  // namespace ufm
