#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

namespace mbdl::acceptance {

struct Outcome {
  bool passed = false;
  std::string detail;
};

struct Criterion {
  int id = 0;
  std::string name;
  double budget_seconds = 0.0;  // wall-clock limit, counted as a failure when exceeded
  std::function<Outcome(bool quick)> check;
};

struct Result {
  int id = 0;
  std::string name;
  bool passed = false;
  double seconds = 0.0;
  double budget_seconds = 0.0;
  std::string detail;
};

const std::vector<Criterion>& criteria();

/// Runs one criterion; exceptions and budget overruns count as failures.
Result run_criterion(const Criterion& c, bool quick);

struct SuiteOptions {
  bool quick = false;
  std::vector<int> only;        // empty runs all
  std::ostream* live = nullptr;  // one line per finished criterion
};

std::vector<Result> run_suite(const SuiteOptions& options);

/// "C01 PASS name (1.2 s): detail"
std::string format_line(const Result& r);
std::string format_listing(const Criterion& c);
nlohmann::json results_json(const std::vector<Result>& results, bool quick);

}  // namespace mbdl::acceptance
