#include "ufm/panel.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace ufm {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::Io: return "Io";
    case ErrorCode::NonNumericCell: return "NonNumericCell";
    case ErrorCode::RaggedRows: return "RaggedRows";
    case ErrorCode::DuplicateCell: return "DuplicateCell";
    case ErrorCode::MissingCell: return "MissingCell";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::RankTooLarge: return "RankTooLarge";
    case ErrorCode::EigenFailure: return "EigenFailure";
    case ErrorCode::SubsampleRankDeficient: return "SubsampleRankDeficient";
    case ErrorCode::SingularPhi: return "SingularPhi";
    case ErrorCode::DegenerateRegressors: return "DegenerateRegressors";
  }
  return "Unknown";
}

bool is_numeric(ErrorCode code) {
  switch (code) {
    case ErrorCode::NonFinite:
    case ErrorCode::RankTooLarge:
    case ErrorCode::EigenFailure:
    case ErrorCode::SubsampleRankDeficient:
    case ErrorCode::SingularPhi:
    case ErrorCode::DegenerateRegressors:
      return true;
    default:
      return false;
  }
}

const char* to_string(WarningCode code) {
  switch (code) {
    case WarningCode::MaxIters: return "MaxIters";
    case WarningCode::ActiveBox: return "ActiveBox";
    case WarningCode::RegularizedHessian: return "RegularizedHessian";
    case WarningCode::NoConverge: return "NoConverge";
    case WarningCode::NearDegenerateEigs: return "NearDegenerateEigs";
    case WarningCode::ClippedFraction: return "ClippedFractionWarning";
    case WarningCode::BandwidthBand: return "BandwidthBand";
  }
  return "Unknown";
}

namespace {

std::vector<std::string> default_labels(Index n) {
  std::vector<std::string> out;
  out.reserve(static_cast<std::size_t>(n));
  for (Index k = 0; k < n; ++k) out.push_back(std::to_string(k + 1));
  return out;
}

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string_view rest(line);
  while (true) {
    auto pos = rest.find(',');
    out.push_back(trim(rest.substr(0, pos)));
    if (pos == std::string_view::npos) break;
    rest.remove_prefix(pos + 1);
  }
  return out;
}

std::optional<double> parse_number(const std::string& cell) {
  if (cell.empty()) return std::nullopt;
  double v = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) return std::nullopt;
  return v;
}

double require_number(const std::string& cell, std::size_t line_no) {
  if (cell.empty())
    throw UfmError(ErrorCode::MissingCell, "empty cell on line " + std::to_string(line_no));
  auto v = parse_number(cell);
  if (!v)
    throw UfmError(ErrorCode::NonNumericCell,
                   "'" + cell + "' on line " + std::to_string(line_no));
  return *v;
}

bool read_data_line(std::istream& in, std::string& line, std::size_t& line_no) {
  while (std::getline(in, line)) {
    ++line_no;
    if (!trim(line).empty()) return true;
  }
  return false;
}

PanelMatrix read_wide(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  if (!read_data_line(in, line, line_no))
    throw UfmError(ErrorCode::Io, "empty panel file");
  auto header = split_csv(line);

  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> row_lines;
  while (read_data_line(in, line, line_no)) {
    rows.push_back(split_csv(line));
    row_lines.push_back(line_no);
  }
  if (rows.empty()) throw UfmError(ErrorCode::Io, "panel has no data rows");

  // The first column holds row labels when the header's first cell is blank,
  // when data rows are one wider than the header, or when it is non-numeric.
  bool labelled = header.front().empty() || rows.front().size() == header.size() + 1;
  if (!labelled) {
    labelled = std::all_of(rows.begin(), rows.end(), [](const auto& r) {
      return !r.empty() && !r.front().empty() && !parse_number(r.front());
    });
  }
  std::vector<std::string> col_ids = header;
  if (labelled && rows.front().size() == header.size()) col_ids.erase(col_ids.begin());
  const std::size_t width = col_ids.size() + (labelled ? 1 : 0);

  const auto n = static_cast<Index>(rows.size());
  const auto t_count = static_cast<Index>(col_ids.size());
  if (t_count == 0) throw UfmError(ErrorCode::Io, "panel has no columns");
  Matrix values(n, t_count);
  std::vector<std::string> row_ids;
  for (Index i = 0; i < n; ++i) {
    const auto& r = rows[static_cast<std::size_t>(i)];
    const auto ln = row_lines[static_cast<std::size_t>(i)];
    if (r.size() != width)
      throw UfmError(ErrorCode::RaggedRows, "line " + std::to_string(ln) + " has " +
                                                std::to_string(r.size()) + " fields, expected " +
                                                std::to_string(width));
    std::size_t off = 0;
    if (labelled) {
      row_ids.push_back(r.front());
      off = 1;
    }
    for (Index t = 0; t < t_count; ++t)
      values(i, t) = require_number(r[off + static_cast<std::size_t>(t)], ln);
  }
  if (!labelled) row_ids = default_labels(n);
  return PanelMatrix(std::move(values), std::move(row_ids), std::move(col_ids));
}

PanelMatrix read_long(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  if (!read_data_line(in, line, line_no))
    throw UfmError(ErrorCode::Io, "empty panel file");
  auto header = split_csv(line);
  if (header.size() != 3)
    throw UfmError(ErrorCode::RaggedRows, "long layout header must be row,col,value");

  std::vector<std::string> row_ids, col_ids;
  std::map<std::string, std::size_t> row_pos, col_pos;
  std::map<std::pair<std::size_t, std::size_t>, double> cells;
  while (read_data_line(in, line, line_no)) {
    auto f = split_csv(line);
    if (f.size() != 3)
      throw UfmError(ErrorCode::RaggedRows, "line " + std::to_string(line_no) +
                                                " must have exactly 3 fields");
    if (f[0].empty() || f[1].empty())
      throw UfmError(ErrorCode::MissingCell, "empty label on line " + std::to_string(line_no));
    double v = require_number(f[2], line_no);
    auto [ri, rnew] = row_pos.try_emplace(f[0], row_ids.size());
    if (rnew) row_ids.push_back(f[0]);
    auto [ci, cnew] = col_pos.try_emplace(f[1], col_ids.size());
    if (cnew) col_ids.push_back(f[1]);
    if (!cells.emplace(std::make_pair(ri->second, ci->second), v).second)
      throw UfmError(ErrorCode::DuplicateCell, "(" + f[0] + "," + f[1] + ") on line " +
                                                   std::to_string(line_no));
  }
  if (cells.empty()) throw UfmError(ErrorCode::Io, "panel has no cells");
  const auto n = static_cast<Index>(row_ids.size());
  const auto t_count = static_cast<Index>(col_ids.size());
  if (static_cast<Index>(cells.size()) != n * t_count)
    throw UfmError(ErrorCode::MissingCell,
                   std::to_string(n * t_count - static_cast<Index>(cells.size())) +
                       " (row,col) pairs absent");
  Matrix values(n, t_count);
  for (const auto& [key, v] : cells)
    values(static_cast<Index>(key.first), static_cast<Index>(key.second)) = v;
  return PanelMatrix(std::move(values), std::move(row_ids), std::move(col_ids));
}

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

PanelMatrix::PanelMatrix(Matrix values)
    : PanelMatrix(values, default_labels(values.rows()), default_labels(values.cols())) {}

PanelMatrix::PanelMatrix(Matrix values, std::vector<std::string> row_ids,
                         std::vector<std::string> col_ids)
    : values_(std::move(values)), row_ids_(std::move(row_ids)), col_ids_(std::move(col_ids)) {
  if (values_.rows() < 1 || values_.cols() < 1)
    throw UfmError(ErrorCode::InvalidArgument, "panel must be nonempty");
  if (static_cast<Index>(row_ids_.size()) != values_.rows() ||
      static_cast<Index>(col_ids_.size()) != values_.cols())
    throw UfmError(ErrorCode::InvalidArgument, "label count does not match panel shape");
  if (!values_.allFinite())
    throw UfmError(ErrorCode::NonFinite, "panel contains non-finite entries");
}

void require_estimable(Index rows, Index cols) {
  if (rows < 4 || cols < 4)
    throw UfmError(ErrorCode::InvalidArgument,
                   "panel must be at least 4x4, got " + std::to_string(rows) + "x" +
                       std::to_string(cols));
}

void require_estimable(const PanelMatrix& panel) { require_estimable(panel.rows(), panel.cols()); }

PanelLayout parse_layout(const std::string& name) {
  if (name == "wide") return PanelLayout::Wide;
  if (name == "long") return PanelLayout::Long;
  throw UfmError(ErrorCode::InvalidArgument, "layout must be wide or long, got " + name);
}

PanelMatrix read_panel(std::istream& in, PanelLayout layout) {
  return layout == PanelLayout::Wide ? read_wide(in) : read_long(in);
}

PanelMatrix load_panel(const std::filesystem::path& path, PanelLayout layout) {
  std::ifstream in(path);
  if (!in) throw UfmError(ErrorCode::Io, "cannot open " + path.string());
  return read_panel(in, layout);
}

void write_panel(std::ostream& out, const PanelMatrix& panel, PanelLayout layout) {
  const auto& y = panel.values();
  if (layout == PanelLayout::Wide) {
    for (const auto& c : panel.col_ids()) out << ',' << c;
    out << '\n';
    for (Index i = 0; i < y.rows(); ++i) {
      out << panel.row_ids()[static_cast<std::size_t>(i)];
      for (Index t = 0; t < y.cols(); ++t) out << ',' << format_double(y(i, t));
      out << '\n';
    }
  } else {
    out << "row,col,value\n";
    for (Index i = 0; i < y.rows(); ++i)
      for (Index t = 0; t < y.cols(); ++t)
        out << panel.row_ids()[static_cast<std::size_t>(i)] << ','
            << panel.col_ids()[static_cast<std::size_t>(t)] << ',' << format_double(y(i, t))
            << '\n';
  }
}

void save_panel(const std::filesystem::path& path, const PanelMatrix& panel, PanelLayout layout) {
  std::ofstream out(path);
  if (!out) throw UfmError(ErrorCode::Io, "cannot write " + path.string());
  write_panel(out, panel, layout);
}

QuantileGrid::QuantileGrid(std::vector<double> levels, double shift)
    : levels_(std::move(levels)), shift_(shift) {
  if (levels_.empty()) throw UfmError(ErrorCode::InvalidArgument, "grid needs at least one level");
  if (!(shift_ > 0.0)) throw UfmError(ErrorCode::InvalidArgument, "h_d must be positive");
  for (std::size_t m = 0; m < levels_.size(); ++m) {
    if (!(levels_[m] > 0.0 && levels_[m] < 1.0))
      throw UfmError(ErrorCode::InvalidArgument, "quantile levels must lie in (0,1)");
    if (m > 0 && !(levels_[m] > levels_[m - 1]))
      throw UfmError(ErrorCode::InvalidArgument, "quantile levels must be increasing");
  }
}

QuantileGrid make_quantile_grid(int m_count, double shift) {
  if (m_count < 1) throw UfmError(ErrorCode::InvalidArgument, "M must be positive");
  std::vector<double> levels;
  for (int m = 1; m <= m_count; ++m)
    levels.push_back(static_cast<double>(m) / static_cast<double>(m_count + 1));
  if (!(shift > 0.0 && shift < levels.front()))
    throw UfmError(ErrorCode::InvalidArgument, "h_d must lie in (0, tau_1)");
  return QuantileGrid(std::move(levels), shift);
}

void EstimatorConfig::validate() const {
  if (rank && *rank < 1) throw UfmError(ErrorCode::InvalidArgument, "rank must be positive");
  if (!(bandwidth_h > 0.0 && bandwidth_h < 1.0))
    throw UfmError(ErrorCode::InvalidArgument, "bandwidth h must lie in (0,1)");
  if (kernel_order < 2 || kernel_order % 2 != 0)
    throw UfmError(ErrorCode::InvalidArgument, "kernel order must be even and >= 2");
  if (!(box_bound > 0.0)) throw UfmError(ErrorCode::InvalidArgument, "box bound must be positive");
  if (max_outer_iters < 1 || max_inner_iters < 1)
    throw UfmError(ErrorCode::InvalidArgument, "iteration limits must be positive");
  if (!(outer_tol > 0.0) || !(inner_tol > 0.0))
    throw UfmError(ErrorCode::InvalidArgument, "tolerances must be positive");
}

double default_bandwidth(Index rows, Index cols) {
  return std::pow(static_cast<double>(std::min(rows, cols)), -1.0 / 13.0);
}

double default_box_bound(const Matrix& y) {
  const double max_abs = y.cwiseAbs().maxCoeff();
  if (max_abs == 0.0) return 10.0;
  const double n = static_cast<double>(y.size());
  const double mean = y.mean();
  const double sd = n > 1 ? std::sqrt((y.array() - mean).square().sum() / (n - 1.0)) : 0.0;
  const double denom = sd > 0.0 ? std::min(1.0, sd) : 1.0;
  return 10.0 * max_abs / denom;
}

EstimatorConfig default_config(const Matrix& y) {
  EstimatorConfig cfg;
  cfg.bandwidth_h = default_bandwidth(y.rows(), y.cols());
  cfg.box_bound = default_box_bound(y);
  return cfg;
}

WeightTensor::WeightTensor(int m_count, Index rows, Index cols, double fill) {
  slices_.assign(static_cast<std::size_t>(m_count), Matrix::Constant(rows, cols, fill));
  clip_lo = fill;
  clip_hi = fill;
}

}  // namespace ufm
