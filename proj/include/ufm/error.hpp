#ifndef UFM_ERROR_HPP
#define UFM_ERROR_HPP

#include <stdexcept>
#include <string>
#include <vector>

namespace ufm {

enum class ErrorCode {
  InvalidArgument,
  Io,
  NonNumericCell,
  RaggedRows,
  DuplicateCell,
  MissingCell,
  NonFinite,
  RankTooLarge,
  EigenFailure,
  SubsampleRankDeficient,
  SingularPhi,
  DegenerateRegressors,
};

const char* to_string(ErrorCode code);

/// True for failures of the numerics (as opposed to bad input or usage).
bool is_numeric(ErrorCode code);

class UfmError : public std::runtime_error {
 public:
  UfmError(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

/// Non-fatal conditions. Results are still returned when one of these fires.
enum class WarningCode {
  MaxIters,
  ActiveBox,
  RegularizedHessian,
  NoConverge,
  NearDegenerateEigs,
  ClippedFraction,
  BandwidthBand,
};

const char* to_string(WarningCode code);

struct Warning {
  WarningCode code;
  std::string message;
};

class Diagnostics {
 public:
  void add(WarningCode code, std::string message) {
    items_.push_back({code, std::move(message)});
  }
  void merge(const Diagnostics& other) {
    items_.insert(items_.end(), other.items_.begin(), other.items_.end());
  }
  bool has(WarningCode code) const {
    for (const auto& w : items_)
      if (w.code == code) return true;
    return false;
  }
  bool empty() const { return items_.empty(); }
  const std::vector<Warning>& items() const { return items_; }

 private:
  std::vector<Warning> items_;
};

}  // namespace ufm

#endif  // UFM_ERROR_HPP
