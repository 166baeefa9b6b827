#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "suite.hpp"

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria, one line each"};
  bool quick = false, list = false;
  std::vector<int> only;
  std::string json_path;
  int min_failures = -1;
  app.add_flag("--quick", quick, "smaller data and fewer epochs");
  app.add_flag("--list", list, "print criterion ids and exit");
  app.add_option("--only", only, "criterion ids to run");
  app.add_option("--json", json_path, "write machine-readable results here");
  app.add_option("--min-failures", min_failures,
                 "succeed only when at least this many criteria fail (mutation runs)");
  CLI11_PARSE(app, argc, argv);

  if (list) {
    for (const auto& c : mbdl::acceptance::criteria()) std::cout << mbdl::acceptance::format_listing(c) << '\n';
    return 0;
  }
  mbdl::acceptance::SuiteOptions opts;
  opts.quick = quick;
  opts.only = only;
  opts.live = &std::cout;
  const auto results = mbdl::acceptance::run_suite(opts);
  const auto summary = mbdl::acceptance::results_json(results, quick);
  if (!json_path.empty()) std::ofstream(json_path) << summary.dump(2) << '\n';
  const int failed = summary["failed"];
  std::cout << summary["passed"].get<int>() << "/" << results.size() << " criteria passed\n";
  if (min_failures >= 0) {
    std::cout << (failed >= min_failures ? "mutant detected" : "mutant survived") << " (" << failed << " failures, need "
              << min_failures << ")\n";
    return failed >= min_failures ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
