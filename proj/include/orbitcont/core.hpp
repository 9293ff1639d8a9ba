#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace orbitcont {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual const char* kind() const noexcept { return "error"; }
};

/// Time integration failed (step-size underflow, blow-up, step budget).
class IntegrationError : public Error {
 public:
  enum class Reason { StepSizeUnderflow, NonFinite, TooManySteps, BadInput };

  IntegrationError(Reason reason, double time, const std::string& what)
      : Error(what), reason_(reason), time_(time) {}

  Reason reason() const noexcept { return reason_; }
  double time() const noexcept { return time_; }
  const char* kind() const noexcept override { return "integration"; }

 private:
  Reason reason_;
  double time_;
};

/// A stop condition was never met before the time limit.
class EventNotFound : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "event_not_found"; }
};

/// A Newton iteration diverged or hit its iteration cap.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, std::vector<double> history)
      : Error(what), history_(std::move(history)) {}
  const std::vector<double>& history() const noexcept { return history_; }
  const char* kind() const noexcept override { return "convergence"; }

 private:
  std::vector<double> history_;
};

/// Failure attributed to one shooting segment.
class SegmentError : public Error {
 public:
  SegmentError(std::size_t segment, const std::string& what)
      : Error("segment " + std::to_string(segment) + ": " + what), segment_(segment) {}
  std::size_t segment() const noexcept { return segment_; }
  const char* kind() const noexcept override { return "segment"; }

 private:
  std::size_t segment_;
};

inline bool all_finite(const Vec& v) { return v.allFinite(); }

inline std::vector<double> to_std(const Vec& v) { return {v.data(), v.data() + v.size()}; }

inline Vec from_std(const std::vector<double>& v) {
  return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace orbitcont
