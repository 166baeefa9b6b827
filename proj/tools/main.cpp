#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "mbdl/error.hpp"
#include "mbdl/experiment.hpp"
#include "suite.hpp"

namespace {

namespace fs = std::filesystem;
using mbdl::Json;

struct Common {
  std::string config;
  std::string out;
  std::string method;
  std::string artifacts;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  bool quick = false;
};

void add_common(CLI::App* cmd, Common& c, const std::string& default_out, bool with_method) {
  cmd->add_option("--config", c.config, "JSON config file");
  cmd->add_option("--out", c.out, "output directory")->default_val(default_out);
  cmd->add_option("--seed", c.seed, "overrides the config seed");
  cmd->add_option("--set", c.overrides, "dotted key=value override, repeatable");
  cmd->add_flag("--quick", c.quick, "smaller data and fewer epochs");
  if (with_method) cmd->add_option("--method", c.method, "overrides the config method");
}

Json build_config(const Common& c) {
  Json cfg = c.config.empty() ? Json{{"schema_version", mbdl::kConfigSchemaVersion}} : mbdl::read_config(c.config);
  if (!c.method.empty()) {
    cfg["method"] = c.method;
    if (!cfg.contains("task") || !cfg["task"].is_string()) {
      cfg["task"] = mbdl::task_for_method(c.method);
    } else {
      const auto methods = mbdl::experiment_methods(cfg["task"]);
      if (std::find(methods.begin(), methods.end(), c.method) == methods.end()) cfg["task"] = mbdl::task_for_method(c.method);
    }
  }
  if (c.seed) cfg["seed"] = *c.seed;
  if (!c.artifacts.empty()) cfg["artifacts"] = c.artifacts;
  for (const auto& o : c.overrides) mbdl::apply_override(cfg, o);
  return cfg;
}

void print_metrics(const mbdl::ExperimentReport& r) {
  std::cout << "run " << r.run_dir.string() << '\n';
  for (const auto& [k, v] : r.metrics["metrics"].items()) std::cout << "  " << k << " " << v.dump() << '\n';
  std::cout << "  runtime_seconds " << r.metrics["timing"]["runtime_seconds"].dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"model-based deep learning lab: solvers, trainers and the acceptance suite"};
  app.require_subcommand(1);
  Common solve_o, train_o, eval_o, data_o, bench_o;

  auto* solve = app.add_subcommand("solve", "run one solver or filter on one instance, write the solution and trace.csv");
  add_common(solve, solve_o, "solve-out", true);
  solve->add_option("--artifacts", solve_o.artifacts, "trained parameters from a train run");

  auto* train = app.add_subcommand("train", "generate data, train, evaluate and write a run directory");
  add_common(train, train_o, "runs", true);

  auto* eval = app.add_subcommand("eval", "evaluate trained artifacts on the config's test split");
  add_common(eval, eval_o, "runs", true);
  eval->add_option("--artifacts", eval_o.artifacts, "artifacts directory of a train run")->required();

  auto* gen = app.add_subcommand("gen-data", "write the dataset tensors and splits for a config");
  add_common(gen, data_o, "data", true);

  auto* bench = app.add_subcommand("bench", "compare two or more methods: bench.csv and summary.csv");
  add_common(bench, bench_o, "bench-out", false);
  std::vector<std::string> bench_methods;
  bench->add_option("--methods", bench_methods, "methods to compare (else config 'methods')");

  auto* suite = app.add_subcommand("suite", "run the acceptance criteria");
  bool suite_quick = false, suite_list = false;
  std::vector<int> suite_only;
  std::string suite_out;
  suite->add_flag("--quick", suite_quick, "smaller data and fewer epochs");
  suite->add_flag("--list", suite_list, "print criterion ids without running");
  suite->add_option("--only", suite_only, "criterion ids to run");
  suite->add_option("--out", suite_out, "directory for results.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    if (argc > 1 && argv[1][0] != '-' && app.get_subcommand_no_throw(argv[1]) == nullptr) {
      std::cerr << "unknown verb '" << argv[1] << "'\n\n";
    } else {
      std::cerr << e.what() << "\n\n";
    }
    std::cerr << app.help();
    return 2;
  }

  try {
    if (*solve) {
      const Json summary = mbdl::solve_instance(build_config(solve_o), solve_o.out);
      std::cout << summary.dump(2) << '\n';
    } else if (*train) {
      mbdl::ExperimentOptions opts;
      opts.quick = train_o.quick;
      print_metrics(mbdl::run_experiment(build_config(train_o), train_o.out, opts));
    } else if (*eval) {
      mbdl::ExperimentOptions opts;
      opts.quick = eval_o.quick;
      Json cfg = build_config(eval_o);
      cfg.erase("artifacts");
      opts.load_artifacts = eval_o.artifacts;
      if (!fs::is_directory(opts.load_artifacts)) throw mbdl::ConfigError("artifacts directory not found: " + eval_o.artifacts);
      print_metrics(mbdl::run_experiment(cfg, eval_o.out, opts));
    } else if (*gen) {
      mbdl::write_dataset(build_config(data_o), data_o.out);
      std::cout << "wrote " << data_o.out << '\n';
    } else if (*bench) {
      Json cfg = build_config(bench_o);
      if (!bench_methods.empty()) cfg["methods"] = bench_methods;
      const Json rows = mbdl::run_bench(cfg, bench_o.out, bench_o.quick);
      for (const auto& r : rows) {
        std::cout << r["method"].get<std::string>() << "  " << r["test_mse_db"].get<double>() << " dB  "
                  << r["runtime_seconds"].get<double>() << " s\n";
      }
      std::cout << "wrote " << (fs::path(bench_o.out) / "bench.csv").string() << '\n';
    } else if (*suite) {
      if (suite_list) {
        for (const auto& c : mbdl::acceptance::criteria()) std::cout << mbdl::acceptance::format_listing(c) << '\n';
        return 0;
      }
      mbdl::acceptance::SuiteOptions opts;
      opts.quick = suite_quick;
      opts.only = suite_only;
      opts.live = &std::cout;
      const auto results = mbdl::acceptance::run_suite(opts);
      const Json summary = mbdl::acceptance::results_json(results, suite_quick);
      if (!suite_out.empty()) {
        fs::create_directories(suite_out);
        std::ofstream(fs::path(suite_out) / "results.json") << summary.dump(2) << '\n';
      }
      std::cout << summary["passed"].get<int>() << "/" << results.size() << " criteria passed\n";
      return summary["failed"].get<int>() == 0 ? 0 : 1;
    }
  } catch (const mbdl::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 1;
  } catch (const mbdl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "file error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
