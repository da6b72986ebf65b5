#ifndef FIELDPROBE_ERRORS_HPP
#define FIELDPROBE_ERRORS_HPP

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fieldprobe {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NotFound : public Error { using Error::Error; };
class FormatError : public Error { using Error::Error; };
class IoError : public Error { using Error::Error; };
class RangeError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class ShapeError : public Error { using Error::Error; };
class StateError : public Error { using Error::Error; };

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what, long chain = -1)
      : Error(what), chain_(chain) {}
  /// Index of the offending chain, or -1 when not chain-specific.
  long chain() const noexcept { return chain_; }

 private:
  long chain_;
};

class TrainingDiverged : public Error {
 public:
  explicit TrainingDiverged(std::size_t step)
      : Error("training diverged (non-finite loss) at step " + std::to_string(step)),
        step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

/// Carries one message per offending field, e.g. {"radius", "must be >= 0"}.
class ValidationError : public Error {
 public:
  using FieldMessages = std::vector<std::pair<std::string, std::string>>;

  explicit ValidationError(FieldMessages fields)
      : Error(join(fields)), fields_(std::move(fields)) {}
  const FieldMessages& fields() const noexcept { return fields_; }

 private:
  static std::string join(const FieldMessages& fields) {
    std::string out = "validation failed:";
    for (const auto& [name, msg] : fields) out += " " + name + ": " + msg + ";";
    return out;
  }
  FieldMessages fields_;
};

}  // namespace fieldprobe

#endif  // FIELDPROBE_ERRORS_HPP
