#pragma once

#include <chrono>
#include <iomanip>
#include <string>

#include "shala/suites.hpp"

namespace shala::detail {

/// Collects records and criterion results for one suite run and writes them
/// on finish. Records carry a digest of (suite, seed) so reruns compare equal.
class SuiteContext {
 public:
  SuiteContext(std::string suite, const SuiteOptions& options);

  void log(const std::string& message) const;
  double elapsed() const;
  void record(const std::string& name, double value, int64_t count, json details = json::object());
  void criterion(int id, const std::string& name, bool pass, double value, double threshold,
                 const std::string& detail);
  SuiteReport finish();

  const SuiteOptions& options() const { return options_; }

 private:
  SuiteOptions options_;
  SuiteReport report_;
  std::string digest_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace shala::detail
