// Acceptance checks 1-10. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fails. Optional arguments restrict the run to the listed
// criterion numbers, e.g. `acceptance 1 2 3`.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "cli.hpp"
#include "ufm/idw.hpp"
#include "ufm/inference.hpp"
#include "ufm/kernel.hpp"
#include "ufm/parallel.hpp"
#include "ufm/simlab.hpp"
#include "ufm/sqr.hpp"

using namespace ufm;
namespace fs = std::filesystem;

namespace {

// Tolerances, all in one place.
constexpr double kKernelMassTol = 1e-8;
constexpr double kKernelMomentTol = 1e-6;
constexpr double kKernelTopMomentMin = 1e-3;
constexpr double kKernelCdfTol = 1e-9;
constexpr double kKernelSeconds = 1.0;
constexpr int kSolverInstances = 20;
constexpr double kLatticeStep = 1e-2;
constexpr double kFiniteDiffRelTol = 1e-5;
constexpr double kSolverSeconds = 10.0;
constexpr double kSlopeTarget = 4.0;
constexpr double kSlopeTol = 0.2;
constexpr double kPolyExactTol = 1e-10;
constexpr int kTable1Reps = 100;
constexpr double kRankMeanLo = 1.00, kRankMeanHi = 1.08;
constexpr int kTable2Reps = 50;
constexpr double kUfaMin = 0.90, kIdwMin = 0.88, kPcaMax = 0.10, kQfaMidMax = 0.15, kQfaTopMin = 0.88;
constexpr int kTable3Reps = 50;
constexpr double kRotationMax = 0.02;
constexpr int kTable4Reps = 200;
constexpr double kFactorMeanMax = 0.3, kCommonMeanMax = 0.25, kStdLo = 0.85, kStdHi = 1.30;
constexpr double kCovarianceTol = 1e-12;

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

template <typename F>
double integrate(F f, double a, double b) {
  using boost::math::quadrature::gauss_kronrod;
  double acc = 0.0;
  const int pieces = std::max(1, static_cast<int>(std::ceil(b - a)));
  const double w = (b - a) / pieces;
  for (int k = 0; k < pieces; ++k)
    acc += gauss_kronrod<double, 61>::integrate(f, a + k * w, a + (k + 1) * w, 0, 1e-15);
  return acc;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------- 1
Outcome kernel_check() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto k = SmoothKernel<double>::gaussian(14);
  auto dens = [&](double z) { return k.density(z); };
  const double mass_err = std::abs(integrate(dens, -14, 14) - 1.0);
  double worst_moment = 0;
  for (int j = 1; j <= 13; ++j)
    worst_moment = std::max(worst_moment, std::abs(integrate([&](double z) { return std::pow(z, j) * dens(z); }, -14, 14)));
  const double top = std::abs(integrate([&](double z) { return std::pow(z, 14) * dens(z); }, -14, 14));
  double cdf_err = 0;
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-6, 6);
  for (int s = 0; s < 25; ++s) {
    const double z = u(rng);
    cdf_err = std::max(cdf_err, std::abs(k.cdf(z) - integrate(dens, -14, z)));
  }
  const double secs = seconds_since(t0);
  const bool ok = mass_err <= kKernelMassTol && worst_moment <= kKernelMomentTol &&
                  top > kKernelTopMomentMin && cdf_err <= kKernelCdfTol && secs < kKernelSeconds;
  return {ok, "mass err " + fmt("%.2e", mass_err) + ", max |moment 1-13| " + fmt("%.2e", worst_moment) +
                  ", |moment 14| " + fmt("%.3g", top) + ", cdf err " + fmt("%.2e", cdf_err) + ", " +
                  fmt("%.2f s", secs)};
}

// ---------------------------------------------------------------- 2
Outcome solver_check() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto k = SmoothKernel<double>::gaussian(14);
  const double h = 0.5;
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> uw(0.5, 2.0), utau(0.1, 0.9);
  double worst_gap = 0;
  for (int inst = 0; inst < kSolverInstances; ++inst) {
    const int r = inst % 2 + 1;
    const int n = 100;
    const double tau = utau(rng);
    Matrix x(n, r);
    Vector y(n), w(n);
    for (int s = 0; s < n; ++s) {
      x(s, 0) = 1.0;
      if (r == 2) x(s, 1) = g(rng);
      y(s) = 0.5 * g(rng) + (r == 2 ? 0.4 * x(s, 1) : 0.0) + 0.3;
      w(s) = uw(rng);
    }
    const Vector taus = Vector::Constant(n, tau);
    const auto sol = solve_sqr<double>({x, y, taus, w}, k, h, 10.0, Vector::Zero(r));
    auto objective = [&](const Vector& th) {
      double v = 0;
      for (int s = 0; s < n; ++s) v += w(s) * smoothed_value(k, h, tau, x.row(s).dot(th), y(s));
      return v;
    };
    // Coarse lattice over [-3, 3]^r at step 0.1, then step 1e-2 around the coarse minimizer.
    Vector th(r);
    auto scan = [&](const Vector& center, double step, int half) {
      Vector arg = center;
      double arg_v = 1e300;
      const int other = r == 2 ? half : 0;
      for (int a = -half; a <= half; ++a)
        for (int b = -other; b <= other; ++b) {
          th(0) = center(0) + a * step;
          if (r == 2) th(1) = center(1) + b * step;
          const double v = objective(th);
          if (v < arg_v) arg_v = v, arg = th;
        }
      return arg;
    };
    const Vector best = scan(scan(Vector::Zero(r), 0.1, 30), kLatticeStep, 20);
    worst_gap = std::max(worst_gap, (best - sol.theta).cwiseAbs().maxCoeff());
  }
  // Finite differences of value -> gradient -> Hessian.
  double worst_fd = 0;
  std::uniform_real_distribution<double> u(0, 1);
  for (int s = 0; s < 100; ++s) {
    const double hh = 0.1 + 0.8 * u(rng), tau = 0.05 + 0.9 * u(rng), c = 4 * u(rng) - 2, yy = 4 * u(rng) - 2;
    const double e = 1e-5;
    const double gv = smoothed_grad(k, hh, tau, c, yy);
    const double dv = (smoothed_value(k, hh, tau, c + e, yy) - smoothed_value(k, hh, tau, c - e, yy)) / (2 * e);
    const double hv = smoothed_hess(k, hh, tau, c, yy);
    const double dg = (smoothed_grad(k, hh, tau, c + e, yy) - smoothed_grad(k, hh, tau, c - e, yy)) / (2 * e);
    worst_fd = std::max({worst_fd, std::abs(dv - gv) / std::max(1.0, std::abs(gv)),
                         std::abs(dg - hv) / std::max(1.0, std::abs(hv))});
  }
  const double secs = seconds_since(t0);
  const bool ok = worst_gap <= kLatticeStep && worst_fd <= kFiniteDiffRelTol && secs < kSolverSeconds;
  return {ok, "max |theta - lattice argmin| " + fmt("%.2e", worst_gap) + ", max rel FD err " +
                  fmt("%.2e", worst_fd) + ", " + fmt("%.2f s", secs)};
}

// ---------------------------------------------------------------- 3
Outcome fpdf_check() {
  double worst_slope_dev = 0, worst_exact = 0;
  std::string slopes;
  for (auto mode : {StencilMode::Central, StencilMode::Forward, StencilMode::Backward}) {
    std::vector<double> lh, le;
    for (double hd : {0.04, 0.02, 0.01}) {
      const double d = fpdf_derivative([](double t) { return std::pow(t, 5); }, 0.5, hd, mode);
      lh.push_back(std::log(hd));
      le.push_back(std::log(std::abs(d - 5 * std::pow(0.5, 4))));
    }
    const double mh = (lh[0] + lh[1] + lh[2]) / 3, me = (le[0] + le[1] + le[2]) / 3;
    double num = 0, den = 0;
    for (int j = 0; j < 3; ++j) num += (lh[j] - mh) * (le[j] - me), den += (lh[j] - mh) * (lh[j] - mh);
    const double slope = num / den;
    slopes += (slopes.empty() ? "" : "/") + fmt("%.3f", slope);
    worst_slope_dev = std::max(worst_slope_dev, std::abs(slope - kSlopeTarget));
    for (int deg = 0; deg <= 4; ++deg)
      for (double hd : {0.04, 0.02, 0.01}) {
        auto p = [deg](double t) { return 1.0 + std::pow(t - 0.2, deg); };
        const double exact = deg == 0 ? 0.0 : deg * std::pow(0.3, deg - 1);
        worst_exact = std::max(worst_exact, std::abs(fpdf_derivative(p, 0.5, hd, mode) - exact));
      }
  }
  return {worst_slope_dev <= kSlopeTol && worst_exact <= kPolyExactTol,
          "slopes central/forward/backward " + slopes + ", max error on degree <= 4 " + fmt("%.2e", worst_exact)};
}

// Per-rep column by header name, NaNs dropped; `failed` counts the NaNs.
std::vector<double> column(const McResult& res, const std::string& name, int* failed = nullptr) {
  const auto& h = res.per_rep.header;
  const auto idx = static_cast<std::size_t>(std::find(h.begin(), h.end(), name) - h.begin());
  if (idx >= h.size()) throw std::runtime_error("no column " + name);
  std::vector<double> out;
  int nan = 0;
  for (const auto& row : res.per_rep.rows) {
    const double v = std::stod(row[idx]);
    if (std::isfinite(v)) out.push_back(v);
    else ++nan;
  }
  if (failed) *failed = nan;
  return out;
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? std::nan("") : s / static_cast<double>(v.size());
}

double sd(const std::vector<double>& v) {
  const double m = mean(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return v.size() < 2 ? std::nan("") : std::sqrt(s / static_cast<double>(v.size() - 1));
}

McResult run_table(Experiment e, Index n, int reps, std::uint64_t seed) {
  McSpec spec;
  spec.experiment = e;
  spec.sizes = {n};
  spec.reps = reps;
  spec.seed = seed;
  return monte_carlo_run(spec);
}

// ---------------------------------------------------------------- 4
Outcome table1_check() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = run_table(Experiment::Table1, 50, kTable1Reps, 1);
  const auto r = column(res, "r_hat");
  const double avg = mean(r);
  const double lo = *std::min_element(r.begin(), r.end());
  const double hi = *std::max_element(r.begin(), r.end());
  const bool ok = static_cast<int>(r.size()) == kTable1Reps && avg >= kRankMeanLo && avg <= kRankMeanHi && lo == 1.0;
  return {ok, "mean r_hat " + fmt("%.3f", avg) + ", min " + fmt("%g", lo) + ", max " + fmt("%g", hi) + ", " +
                  fmt("%.0f s", seconds_since(t0))};
}

// ---------------------------------------------------------------- 5
Outcome table2_check() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = run_table(Experiment::Table2, 50, kTable2Reps, 2);
  int failed = 0, f;
  auto avg = [&](const std::string& name) {
    const double m = mean(column(res, name, &f));
    failed += f;
    return m;
  };
  const double ufa = avg("ufa"), idw = avg("idw_ufa"), pca = avg("pca");
  const double qfa_mid = avg("qfa_ini_tau_0.50");
  const double qfa_top_tau = avg("qfa_ini_tau_0.90"), qfa_top_ufa = avg("qfa_ini_ufa_0.90");
  const bool ok = ufa >= kUfaMin && idw >= kIdwMin && pca <= kPcaMax && qfa_mid <= kQfaMidMax &&
                  qfa_top_tau >= kQfaTopMin && qfa_top_ufa >= kQfaTopMin;
  return {ok, "UFA " + fmt("%.3f", ufa) + ", IDW-UFA " + fmt("%.3f", idw) + ", PCA " + fmt("%.3f", pca) +
                  ", QFA ini_tau(0.5) " + fmt("%.3f", qfa_mid) + ", QFA(0.9) ini_tau " + fmt("%.3f", qfa_top_tau) +
                  " ini_UFA " + fmt("%.3f", qfa_top_ufa) + ", failed fits " + std::to_string(failed) + ", " +
                  fmt("%.0f s", seconds_since(t0))};
}

// ---------------------------------------------------------------- 6
Outcome table3_check() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = run_table(Experiment::Table3, 50, kTable3Reps, 3);
  int failed = 0;
  const double m = mean(column(res, "abs_h_minus_1", &failed));
  return {m <= kRotationMax && failed == 0, "mean |H-1| " + fmt("%.4f", m) + ", failed reps " +
                                                std::to_string(failed) + ", " + fmt("%.0f s", seconds_since(t0))};
}

// ---------------------------------------------------------------- 7
Outcome table4_check() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = run_table(Experiment::Table4Fig1, 100, kTable4Reps, 4);
  int failed_f = 0, failed_l = 0;
  const auto f = column(res, "f_std", &failed_f);
  const auto l = column(res, "L_std_0.50", &failed_l);
  const double mf = mean(f), sf = sd(f), ml = mean(l), sl = sd(l);
  const bool ok = std::abs(mf) <= kFactorMeanMax && sf >= kStdLo && sf <= kStdHi &&
                  std::abs(ml) <= kCommonMeanMax && sl >= kStdLo && sl <= kStdHi;
  return {ok, "f_std mean " + fmt("%.3f", mf) + " std " + fmt("%.3f", sf) + "; L_std(0.5) mean " +
                  fmt("%.3f", ml) + " std " + fmt("%.3f", sl) + "; failed reps " +
                  std::to_string(std::max(failed_f, failed_l)) + ", " + fmt("%.0f s", seconds_since(t0))};
}

// ---------------------------------------------------------------- 8
Outcome covariance_check() {
  double worst = 0;
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> u(0.2, 3.0);
  for (int inst = 0; inst < 6; ++inst) {
    const int mc = 1 + inst % 3;
    const Index n = 4 + inst % 5, t_count = 8 - inst % 4, r = 1 + inst % 2;
    const auto grid = make_quantile_grid(mc, 0.04);
    FactorEstimate est;
    est.factors = Matrix(t_count, r).unaryExpr([&](double) { return g(rng); });
    WeightTensor w(mc, n, t_count);
    for (int m = 0; m < mc; ++m) {
      est.loadings.push_back(Matrix(n, r).unaryExpr([&](double) { return g(rng); }));
      w.slice(m) = w.slice(m).unaryExpr([&](double) { return u(rng); });
    }
    MeanLoadings ml{Matrix(n, r).unaryExpr([&](double) { return g(rng); }),
                    Matrix(n, t_count).unaryExpr([&](double) { return g(rng); })};
    const auto c = plugin_covariances(est, grid, w, &ml);
    for (Index a = 0; a < r; ++a)
      for (Index b = 0; b < r; ++b) {
        double phi = 0;
        for (int m = 0; m < mc; ++m)
          for (Index i = 0; i < n; ++i) phi += est.loadings[m](i, a) * est.loadings[m](i, b);
        worst = std::max(worst, std::abs(c.phi(a, b) - phi / (mc * static_cast<double>(n))));
        for (Index t = 0; t < t_count; ++t) {
          double s = 0;
          for (int m = 0; m < mc; ++m)
            for (int mp = 0; mp < mc; ++mp)
              for (Index i = 0; i < n; ++i)
                s += (std::min(grid.level(m), grid.level(mp)) - grid.level(m) * grid.level(mp)) * w(m, i, t) *
                     w(mp, i, t) * est.loadings[m](i, a) * est.loadings[mp](i, b);
          worst = std::max(worst, std::abs(c.sigma_f[t](a, b) - s / (mc * mc * static_cast<double>(n))));
        }
        for (Index i = 0; i < n; ++i) {
          for (int m = 0; m < mc; ++m) {
            double s = 0;
            for (Index t = 0; t < t_count; ++t)
              s += w(m, i, t) * w(m, i, t) * est.factors(t, a) * est.factors(t, b);
            const double tau = grid.level(m);
            worst = std::max(worst, std::abs(c.sigma_l[m][i](a, b) - tau * (1 - tau) * s / t_count));
          }
          double s = 0;
          for (Index t = 0; t < t_count; ++t)
            s += ml.residuals(i, t) * ml.residuals(i, t) * est.factors(t, a) * est.factors(t, b);
          worst = std::max(worst, std::abs(c.sigma_mean[i](a, b) - s / t_count));
        }
      }
  }
  return {worst <= kCovarianceTol, "max abs difference " + fmt("%.2e", worst)};
}

// ---------------------------------------------------------------- 9
Outcome tracing_check() {
  const auto draw = gen_dgp(8, 8, 9);
  const Matrix& y = draw.panel.values();
  const auto grid = make_quantile_grid(9, 0.04);
  const auto split = split_panel(8, 8);
  auto cfg = default_config(y);
  cfg.rank = 1;
  int reads = 0, violations = 0;
  for (int a = 1; a <= 2; ++a)
    for (int b = 1; b <= 2; ++b) {
      const PanelSource src(y, [&](const IndexRange& r, const IndexRange& c) {
        ++reads;
        if (r.overlaps(split.rows(a)) && c.overlaps(split.cols(b))) ++violations;
      });
      quadrant_raw_weights(src, grid, cfg, split, a, b);
    }
  return {violations == 0 && reads > 0,
          std::to_string(reads) + " traced block reads, " + std::to_string(violations) + " touching the own quadrant"};
}

// ---------------------------------------------------------------- 10
Outcome determinism_check() {
  const fs::path root = fs::temp_directory_path() / "ufm_acceptance_determinism";
  fs::remove_all(root);
  std::string detail;
  bool ok = true;
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
  };
  for (const std::string table : {"1", "2", "4"}) {
    std::vector<std::string> outs;
    int k = 0;
    for (const char* threads : {"1", "1", "4"}) {
      const fs::path dir = root / (table + "_" + std::to_string(k++));
      std::ostringstream out, err;
      const int code = cli::run_cli({"simulate", "--table", table, "--sizes", "20", "--reps", "4", "--seed", "7",
                                     "--threads", threads, "--out-dir", dir.string()},
                                    out, err);
      if (code != 0) {
        ok = false;
        detail += "table " + table + " exit " + std::to_string(code) + "; ";
      }
      const std::string stem = parse_experiment(table) == Experiment::Table4Fig1 ? "table4_fig1" : "table" + table;
      outs.push_back(slurp(dir / (stem + "_reps.csv")) + slurp(dir / (stem + "_summary.csv")));
    }
    const bool same = !outs[0].empty() && outs[0] == outs[1] && outs[0] == outs[2];
    ok = ok && same;
    detail += "table " + table + (same ? " identical" : " DIFFERS") + "; ";
  }
  fs::remove_all(root);
  return {ok, detail + "threads {1, 1, 4}"};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int k = 1; k < argc; ++k) only.insert(std::atoi(argv[k]));
  const std::vector<std::pair<std::string, std::function<Outcome()>>> checks{
      {"kernel correctness", kernel_check},
      {"solver oracle", solver_check},
      {"five-point difference order", fpdf_check},
      {"rank estimation, N=T=50, 100 reps", table1_check},
      {"factor-space recovery, N=T=50, 50 reps", table2_check},
      {"rotation proximity, N=T=50, 50 reps", table3_check},
      {"Gaussian approximation, N=T=100, 200 reps", table4_check},
      {"covariance plug-ins vs brute force", covariance_check},
      {"independence structure on 8x8", tracing_check},
      {"determinism across runs and threads", determinism_check},
  };
  int failures = 0;
  for (std::size_t k = 0; k < checks.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = checks[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::printf("%s criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", id, checks[k].first.c_str(),
                o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
