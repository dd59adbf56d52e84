#include "cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "ufm/idw.hpp"
#include "ufm/inference.hpp"
#include "ufm/parallel.hpp"
#include "ufm/rank_select.hpp"
#include "ufm/simlab.hpp"
#include "ufm/ufa.hpp"

namespace ufm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Settings {
  std::string input;
  std::string layout = "wide";
  int m_count = 9;
  std::string rank = "auto";
  double h = 0.0;  // 0 = min(N,T)^(-1/13)
  double hd = 0.04;
  int kernel_order = 14;
  double c = 0.2;
  double cr = 0.0;  // 0 = 1/(12 min(N,T)^(1/3))
  double alpha = 1.0;
  double tau = 0.5;
  std::uint64_t seed = 0;
  int reps = 100;
  std::vector<int> sizes{50};
  int threads = 1;
  std::string out_dir;
  // subcommand options
  std::string method = "ufa";
  std::string target = "mean";
  double select_c = 1.0;
  std::string table;
};

json settings_json(const Settings& s) {
  return {{"input", s.input},       {"layout", s.layout},   {"M", s.m_count},
          {"rank", s.rank},         {"h", s.h},             {"hd", s.hd},
          {"kernel_order", s.kernel_order}, {"C", s.c},      {"Cr", s.cr},
          {"alpha", s.alpha},       {"tau", s.tau},         {"seed", s.seed},
          {"reps", s.reps},         {"sizes", s.sizes},     {"threads", s.threads},
          {"out_dir", s.out_dir},   {"method", s.method},   {"target", s.target},
          {"select_C", s.select_c}, {"table", s.table}};
}

std::string level_tag(double tau) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", tau);
  return buf;
}

std::vector<std::string> factor_labels(Index r) {
  std::vector<std::string> out;
  for (Index j = 0; j < r; ++j) out.push_back("f" + std::to_string(j + 1));
  return out;
}

// Writes through a temporary file in the same directory, then renames.
void atomic_write(const fs::path& path, const std::function<void(std::ostream&)>& body) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw UfmError(ErrorCode::Io, "cannot write " + tmp.string());
    body(out);
    out.flush();
    if (!out) throw UfmError(ErrorCode::Io, "write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw UfmError(ErrorCode::Io, "cannot rename " + tmp.string() + ": " + ec.message());
}

class Session {
 public:
  Session(const Settings& s, std::string command, std::ostream& out, std::ostream& err)
      : s_(s), command_(std::move(command)), out_(out), err_(err) {}

  const Settings& settings() const { return s_; }
  std::ostream& out() { return out_; }
  Diagnostics& diagnostics() { return diagnostics_; }

  template <typename Fn>
  auto timed(const std::string& phase, Fn&& fn) {
    const auto start = std::chrono::steady_clock::now();
    auto result = fn();
    timings_[phase] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
  }

  fs::path out_dir(bool required) {
    if (s_.out_dir.empty()) {
      if (required) throw UfmError(ErrorCode::InvalidArgument, command_ + " needs --out-dir");
      return {};
    }
    fs::path dir(s_.out_dir);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw UfmError(ErrorCode::Io, "cannot create " + dir.string() + ": " + ec.message());
    return dir;
  }

  void write_matrix(const std::string& name, const Matrix& m, std::vector<std::string> rows,
                    std::vector<std::string> cols) {
    const fs::path dir = out_dir(true);
    const PanelMatrix panel(m, std::move(rows), std::move(cols));
    atomic_write(dir / name, [&](std::ostream& o) { write_panel(o, panel, PanelLayout::Wide); });
    outputs_.push_back(name);
  }

  void write_text(const std::string& name, const std::function<void(std::ostream&)>& body) {
    atomic_write(out_dir(true) / name, body);
    outputs_.push_back(name);
  }

  void note_output(const std::string& name) { outputs_.push_back(name); }

  json& extra() { return extra_; }

  void finish() {
    for (const auto& w : diagnostics_.items())
      err_ << "warning: " << to_string(w.code) << ": " << w.message << '\n';
    if (s_.out_dir.empty()) return;
    json warnings = json::array();
    for (const auto& w : diagnostics_.items())
      warnings.push_back({{"code", to_string(w.code)}, {"message", w.message}});
    json manifest = {{"version", kVersion},   {"command", command_},
                     {"config", settings_json(s_)}, {"seed", s_.seed},
                     {"timings", timings_},    {"warnings", warnings},
                     {"outputs", outputs_}};
    for (auto it = extra_.begin(); it != extra_.end(); ++it) manifest[it.key()] = it.value();
    atomic_write(out_dir(true) / "manifest.json",
                 [&](std::ostream& o) { o << manifest.dump(2) << '\n'; });
  }

 private:
  Settings s_;
  std::string command_;
  std::ostream& out_;
  std::ostream& err_;
  Diagnostics diagnostics_;
  json timings_ = json::object();
  json extra_ = json::object();
  std::vector<std::string> outputs_;
};

// Data and fitted model shared by the estimation subcommands.
struct Pipeline {
  PanelMatrix panel{Matrix::Zero(1, 1)};
  QuantileGrid grid{{0.5}, 0.04};
  EstimatorConfig config;
  PelOptions pel;
  RankReport report;
  FactorEstimate estimate;
  WeightTensor weights;
  bool weighted = false;
};

Pipeline load(Session& session) {
  const Settings& s = session.settings();
  if (s.input.empty()) throw UfmError(ErrorCode::InvalidArgument, "--input is required");
  Pipeline p;
  p.panel = session.timed("load", [&] { return load_panel(s.input, parse_layout(s.layout)); });
  require_estimable(p.panel);
  p.grid = make_quantile_grid(s.m_count, s.hd);
  p.config = default_config(p.panel.values());
  if (s.h > 0.0) p.config.bandwidth_h = s.h;
  p.config.kernel_order = s.kernel_order;
  p.config.seed = s.seed;
  p.config.validate();
  p.pel.penalty_const = s.c;
  return p;
}

double rank_threshold(const Settings& s, const PanelMatrix& panel) {
  return s.cr > 0.0 ? s.cr : default_rank_threshold(panel.rows(), panel.cols());
}

void run_rank_report(Session& session, Pipeline& p) {
  const Settings& s = session.settings();
  p.report = session.timed("rank", [&] {
    return estimate_r(p.panel.values(), p.grid, rank_threshold(s, p.panel), p.pel);
  });
  session.diagnostics().merge(p.report.diagnostics);
}

int resolve_rank(Session& session, const Pipeline& p) {
  const Settings& s = session.settings();
  if (s.rank == "auto") {
    if (p.report.r_hat >= 1) return p.report.r_hat;
    session.diagnostics().add(WarningCode::NoConverge,
                              "estimated rank is 0; continuing with one factor");
    return 1;
  }
  int r = 0;
  try {
    std::size_t used = 0;
    r = std::stoi(s.rank, &used);
    if (used != s.rank.size()) r = 0;
  } catch (const std::exception&) {
    r = 0;
  }
  if (r < 1) throw UfmError(ErrorCode::InvalidArgument, "--rank must be a positive integer or auto");
  return r;
}

void fit(Session& session, Pipeline& p, const std::string& method) {
  if (method != "ufa" && method != "idw-ufa")
    throw UfmError(ErrorCode::InvalidArgument, "--method must be ufa or idw-ufa");
  run_rank_report(session, p);
  const int r = resolve_rank(session, p);
  p.config.rank = r;
  const Matrix& y = p.panel.values();
  p.estimate = session.timed("ufa", [&] {
    return ufa_fit(y, p.grid, p.config, warm_start(p.report, p.config.box_bound, r));
  });
  if (method == "idw-ufa") {
    IdwOptions opts;
    opts.pel = p.pel;
    auto res = session.timed("idw_ufa", [&] { return idw_ufa_fit(y, p.grid, p.config, p.estimate, opts); });
    p.estimate = std::move(res.estimate);
    p.weights = std::move(res.weights);
    p.weighted = true;
  }
  session.diagnostics().merge(p.estimate.diagnostics);
  session.extra()["rank"] = r;
  session.extra()["iterations"] = p.estimate.iterations;
  session.extra()["converged"] = p.estimate.converged;
  session.extra()["eigenvalues"] =
      std::vector<double>(p.estimate.eigenvalues.data(),
                          p.estimate.eigenvalues.data() + p.estimate.eigenvalues.size());
  if (p.weighted) session.extra()["clipped_fraction"] = p.weights.clipped_fraction;
}

void write_estimate(Session& session, const Pipeline& p) {
  const Index r = p.estimate.rank();
  session.write_matrix("factors.csv", p.estimate.factors, p.panel.col_ids(), factor_labels(r));
  for (int m = 0; m < p.grid.size(); ++m)
    session.write_matrix("loadings_tau_" + level_tag(p.grid.level(m)) + ".csv",
                         p.estimate.loadings[static_cast<std::size_t>(m)], p.panel.row_ids(),
                         factor_labels(r));
}

void write_weights(Session& session, const Pipeline& p) {
  session.write_text("weights.csv", [&](std::ostream& o) {
    o << "tau,row,col,value\n";
    for (int m = 0; m < p.grid.size(); ++m)
      for (Index i = 0; i < p.panel.rows(); ++i)
        for (Index t = 0; t < p.panel.cols(); ++t)
          o << format_number(p.grid.level(m)) << ',' << p.panel.row_ids()[static_cast<std::size_t>(i)]
            << ',' << p.panel.col_ids()[static_cast<std::size_t>(t)] << ','
            << format_number(p.weights(m, i, t)) << '\n';
  });
}

void write_standard_errors(Session& session, const Pipeline& p, const MeanLoadings* mean) {
  const auto covs = session.timed("covariances", [&] {
    return plugin_covariances(p.estimate, p.grid, p.weights, mean);
  });
  const auto se = session.timed("standard_errors", [&] {
    return standard_error_tables(p.estimate, covs, mean);
  });
  const Index r = p.estimate.rank();
  session.write_matrix("se_factors.csv", se.factors, p.panel.col_ids(), factor_labels(r));
  for (int m = 0; m < p.grid.size(); ++m) {
    const std::string tag = level_tag(p.grid.level(m));
    session.write_matrix("se_loadings_tau_" + tag + ".csv", se.loadings[static_cast<std::size_t>(m)],
                         p.panel.row_ids(), factor_labels(r));
    session.write_matrix("se_common_tau_" + tag + ".csv", se.common[static_cast<std::size_t>(m)],
                         p.panel.row_ids(), p.panel.col_ids());
  }
  if (mean != nullptr) {
    session.write_matrix("se_mean_loadings.csv", se.mean_loadings, p.panel.row_ids(), factor_labels(r));
    session.write_matrix("se_mean_common.csv", se.mean_common, p.panel.row_ids(), p.panel.col_ids());
  }
}

void cmd_estimate(Session& session) {
  session.out_dir(true);
  Pipeline p = load(session);
  fit(session, p, session.settings().method);
  write_estimate(session, p);
  if (p.weighted) {
    write_weights(session, p);
    write_standard_errors(session, p, nullptr);
  }
  session.out() << "method " << session.settings().method << ", rank " << p.estimate.rank()
                << ", sweeps " << p.estimate.iterations
                << (p.estimate.converged ? ", converged" : ", not converged") << '\n';
}

void cmd_rank(Session& session) {
  Pipeline p = load(session);
  run_rank_report(session, p);
  auto& out = session.out();
  out << "r_hat " << p.report.r_hat << " (C=" << p.report.penalty_const
      << ", C_r=" << format_number(p.report.threshold) << ")\n";
  out << "eigenvalues";
  const Index shown = std::min<Index>(10, p.report.eigenvalues.size());
  for (Index j = 0; j < shown; ++j) out << ' ' << format_number(p.report.eigenvalues(j));
  out << '\n';
  session.extra()["r_hat"] = p.report.r_hat;
  session.extra()["threshold"] = p.report.threshold;
  if (!session.settings().out_dir.empty()) {
    session.write_text("rank_eigenvalues.csv", [&](std::ostream& o) {
      o << "j,eigenvalue\n";
      for (Index j = 0; j < p.report.eigenvalues.size(); ++j)
        o << j + 1 << ',' << format_number(p.report.eigenvalues(j)) << '\n';
    });
  }
}

int level_index(const QuantileGrid& grid, double tau) {
  for (int m = 0; m < grid.size(); ++m)
    if (std::abs(grid.level(m) - tau) < 1e-9) return m;
  throw UfmError(ErrorCode::InvalidArgument, "--tau " + level_tag(tau) + " is not a grid level");
}

void cmd_select(Session& session) {
  const Settings& s = session.settings();
  Pipeline p = load(session);
  fit(session, p, s.method);
  StrengthReport report;
  if (s.target == "mean") {
    const auto mean = mean_loadings(p.panel.values(), p.estimate);
    report = select_factors(p.estimate, &mean.lam_bar, StrengthTarget::Mean, -1, s.alpha, s.select_c);
  } else if (s.target == "quantile") {
    report = select_factors(p.estimate, nullptr, StrengthTarget::Quantile, level_index(p.grid, s.tau),
                            s.alpha, s.select_c);
  } else {
    throw UfmError(ErrorCode::InvalidArgument, "--target must be mean or quantile");
  }
  auto& out = session.out();
  out << "selected " << report.selected << " of " << p.estimate.rank() << " (target " << s.target;
  if (s.target == "quantile") out << " tau=" << level_tag(s.tau);
  out << ", alpha=" << s.alpha << ", threshold=" << format_number(report.threshold) << ")\n";
  out << "singular_values";
  for (Index j = 0; j < report.singular_values.size(); ++j)
    out << ' ' << format_number(report.singular_values(j));
  out << '\n';
  session.extra()["selected"] = report.selected;
  session.extra()["strength_threshold"] = report.threshold;
}

void cmd_mean_loadings(Session& session) {
  session.out_dir(true);
  Pipeline p = load(session);
  fit(session, p, session.settings().method);
  const auto mean = mean_loadings(p.panel.values(), p.estimate);
  write_estimate(session, p);
  const Index r = p.estimate.rank();
  session.write_matrix("mean_loadings.csv", mean.lam_bar, p.panel.row_ids(), factor_labels(r));
  if (p.weighted) {
    write_weights(session, p);
    write_standard_errors(session, p, &mean);
  }
  session.out() << "mean loadings for " << p.panel.rows() << " units, rank " << r << '\n';
}

void cmd_infer(Session& session) {
  session.out_dir(true);
  Pipeline p = load(session);
  fit(session, p, "idw-ufa");
  const auto mean = mean_loadings(p.panel.values(), p.estimate);
  write_estimate(session, p);
  session.write_matrix("mean_loadings.csv", mean.lam_bar, p.panel.row_ids(),
                       factor_labels(p.estimate.rank()));
  write_weights(session, p);
  write_standard_errors(session, p, &mean);
  session.out() << "standard errors written for rank " << p.estimate.rank() << " (clipped weights "
                << format_number(100.0 * p.weights.clipped_fraction) << "%)\n";
}

void cmd_simulate(Session& session) {
  const Settings& s = session.settings();
  if (s.table.empty()) throw UfmError(ErrorCode::InvalidArgument, "simulate needs --table");
  const fs::path dir = session.out_dir(true);
  McSpec spec;
  spec.experiment = parse_experiment(s.table);
  spec.sizes.clear();
  for (int n : s.sizes) spec.sizes.push_back(n);
  spec.reps = s.reps;
  spec.seed = s.seed;
  spec.m_count = s.m_count;
  spec.shift = s.hd;
  if (s.cr > 0.0) spec.rank_threshold = s.cr;
  spec.pel.penalty_const = s.c;

  const std::string stem = to_string(spec.experiment);
  const fs::path reps_path = dir / (stem + "_reps.csv");
  fs::path partial = reps_path;
  partial += ".partial";
  std::ofstream reps_out(partial, std::ios::binary | std::ios::trunc);
  if (!reps_out) throw UfmError(ErrorCode::Io, "cannot write " + partial.string());
  write_csv_row(reps_out, per_rep_header(spec));
  reps_out.flush();
  const auto result = session.timed("simulate", [&] {
    return monte_carlo_run(spec, [&](const std::vector<std::string>& row) {
      write_csv_row(reps_out, row);
      reps_out.flush();
    });
  });
  reps_out.close();
  if (!reps_out) throw UfmError(ErrorCode::Io, "write failed for " + partial.string());
  std::error_code ec;
  fs::rename(partial, reps_path, ec);
  if (ec) throw UfmError(ErrorCode::Io, "cannot rename " + partial.string());
  session.note_output(reps_path.filename().string());
  session.write_text(stem + "_summary.csv", [&](std::ostream& o) { write_csv(o, result.summary); });
  session.diagnostics().merge(result.diagnostics);
  write_csv(session.out(), result.summary);
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Settings s;
  CLI::App app{"Quantile factor models: estimation, inference and simulation", "ufm"};
  app.set_help_flag("--help", "print this help");  // -h would collide with --h
  app.set_version_flag("--version", kVersion);
  app.set_config("--config", "", "flat key=value file; command-line flags take precedence");
  app.require_subcommand(1);

  app.add_option("--input", s.input, "panel CSV");
  app.add_option("--layout", s.layout, "wide or long")->check(CLI::IsMember({"wide", "long"}));
  app.add_option("--M", s.m_count, "number of quantile levels")->check(CLI::PositiveNumber);
  app.add_option("--rank", s.rank, "number of factors, or auto");
  app.add_option("--h", s.h, "smoothing bandwidth (default min(N,T)^(-1/13))");
  app.add_option("--hd", s.hd, "difference step for inverse densities");
  app.add_option("--kernel-order", s.kernel_order, "2 or 14")->check(CLI::IsMember({2, 14}));
  app.add_option("--C", s.c, "nuclear-norm penalty constant");
  app.add_option("--Cr", s.cr, "rank threshold (default 1/(12 min(N,T)^(1/3)))");
  app.add_option("--alpha", s.alpha, "factor strength for select");
  app.add_option("--tau", s.tau, "quantile level for select --target quantile");
  app.add_option("--seed", s.seed, "master seed");
  app.add_option("--reps", s.reps, "Monte Carlo repetitions")->check(CLI::PositiveNumber);
  app.add_option("--sizes", s.sizes, "N = T sample sizes")->delimiter(',');
  app.add_option("--threads", s.threads, "worker threads")->check(CLI::PositiveNumber);
  app.add_option("--out-dir", s.out_dir, "output directory");

  auto* estimate = app.add_subcommand("estimate", "fit factors and loadings")->fallthrough();
  estimate->add_option("--method", s.method, "ufa or idw-ufa")
      ->check(CLI::IsMember({"ufa", "idw-ufa"}));
  auto* rank = app.add_subcommand("rank", "estimate the number of factors")->fallthrough();
  auto* select = app.add_subcommand("select", "count factors of a given strength")->fallthrough();
  select->add_option("--target", s.target, "mean or quantile")
      ->check(CLI::IsMember({"mean", "quantile"}));
  select->add_option("--select-C", s.select_c, "constant of the strength threshold");
  select->add_option("--method", s.method, "ufa or idw-ufa")->check(CLI::IsMember({"ufa", "idw-ufa"}));
  auto* mean = app.add_subcommand("mean-loadings", "closed-form mean-model loadings")->fallthrough();
  mean->add_option("--method", s.method, "ufa or idw-ufa")->check(CLI::IsMember({"ufa", "idw-ufa"}));
  auto* infer = app.add_subcommand("infer", "IDW-UFA with plug-in standard errors")->fallthrough();
  auto* simulate = app.add_subcommand("simulate", "Monte Carlo tables")->fallthrough();
  simulate->add_option("--table", s.table, "1, 2, 3 or 4");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << '\n';
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n';
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return 1;
  }

  CLI::App* chosen = app.get_subcommands().front();
  set_max_threads(s.threads);
  Session session(s, chosen->get_name(), out, err);
  try {
    if (chosen == estimate) cmd_estimate(session);
    else if (chosen == rank) cmd_rank(session);
    else if (chosen == select) cmd_select(session);
    else if (chosen == mean) cmd_mean_loadings(session);
    else if (chosen == infer) cmd_infer(session);
    else if (chosen == simulate) cmd_simulate(session);
    session.finish();
  } catch (const UfmError& e) {
    for (const auto& w : session.diagnostics().items())
      err << "warning: " << to_string(w.code) << ": " << w.message << '\n';
    err << "error: " << e.what() << '\n';
    if (e.code() == ErrorCode::InvalidArgument) err << chosen->help();
    return is_numeric(e.code()) ? 2 : 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int k = 1; k < argc; ++k) args.emplace_back(argv[k]);
  return run_cli(args, out, err);
}

}  // namespace ufm::cli
