#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace dfq {

enum class ErrorCode {
  kInvalidArgument = 1,
  kShape = 2,
  kFormat = 3,
  kIo = 4,
  kNumeric = 5,
  kInternal = 6,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

struct InvalidArgument : Error {
  explicit InvalidArgument(const std::string& w) : Error(ErrorCode::kInvalidArgument, w) {}
};
struct ShapeError : Error {
  explicit ShapeError(const std::string& w) : Error(ErrorCode::kShape, w) {}
};
struct FormatError : Error {
  explicit FormatError(const std::string& w) : Error(ErrorCode::kFormat, w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorCode::kIo, w) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error(ErrorCode::kNumeric, w) {}
};
struct InternalError : Error {
  explicit InternalError(const std::string& w) : Error(ErrorCode::kInternal, w) {}
};

// Non-fatal diagnostics (degenerate calibration channels, clamped norms).
// Collected per thread; callers drain them with take_warnings().
void warn(std::string message);
std::vector<std::string> take_warnings();
std::size_t warning_count();

}  // namespace dfq
