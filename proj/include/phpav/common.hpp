#ifndef PHPAV_COMMON_HPP
#define PHPAV_COMMON_HPP

#include <atomic>
#include <stdexcept>
#include <string>

namespace phpav {

// Raised for bad user input: malformed configs, shape mismatches at module
// boundaries, unknown task ids, occupied output directories. The CLI maps
// these to exit code 1; everything else lands on exit code 2.
class validation_error : public std::runtime_error {
public:
  explicit validation_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised when a file on disk is missing, truncated, or fails an integrity
// check (array shape header vs manifest, checksum mismatch).
class io_error : public std::runtime_error {
public:
  explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Global warning counters. The normalization guard fires when a vector with
// norm below the epsilon floor is normalized (e.g. a zero-initialized final
// projection layer); outputs stay finite but direction is meaningless, so
// callers can detect and report it.
struct warning_counters {
  static std::atomic<long>& normalization_floor() {
    static std::atomic<long> n{0};
    return n;
  }
};

}  // namespace phpav

#endif
