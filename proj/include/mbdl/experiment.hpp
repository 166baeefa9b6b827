#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mbdl/state_space.hpp"
#include "mbdl/train.hpp"

namespace mbdl {

using Json = nlohmann::json;

inline constexpr int kConfigSchemaVersion = 1;

/// Task names and the methods each accepts.
std::vector<std::string> experiment_tasks();
std::vector<std::string> experiment_methods(const std::string& task);
/// Task owning `method`; throws ConfigError listing every method when unknown.
std::string task_for_method(const std::string& method);

/// Reads a JSON config. Missing, empty or malformed files raise ConfigError.
Json read_config(const std::filesystem::path& path);
/// "a.b=value": value parsed as JSON when possible, else kept as a string.
void apply_override(Json& config, const std::string& assignment);

/// Fills task and method defaults under the user's values and checks names,
/// types and the schema version. `quick` shrinks data sizes and epochs.
Json resolve_config(const Json& config, bool quick = false);
/// FNV-1a 64 over the compact dump of a resolved config, as 16 hex digits.
std::string config_hash(const Json& resolved);

TrainConfig train_config_from_json(const Json& train);

struct ExperimentOptions {
  bool quick = false;
  /// Evaluate parameters from this artifacts directory instead of training.
  std::filesystem::path load_artifacts;
};

struct ExperimentReport {
  std::filesystem::path run_dir;
  Json metrics;
};

/// Generates data, trains (if the method has parameters), evaluates on the
/// test split and writes <out_root>/<task>-<method>-<hash>/ (suffix "-eval" when
/// loading artifacts):
///   config.json, metrics.json, train_trace.csv, curve.csv, artifacts/.
/// Everything outside metrics.json's "timing" object is a pure function of the config.
ExperimentReport run_experiment(const Json& config, const std::filesystem::path& out_root,
                                const ExperimentOptions& options = {});

/// metrics.json without its "timing" object.
Json deterministic_metrics(const Json& metrics);

/// One instance: solution tensors plus trace.csv (iter, objective, residual, wall_ns).
/// Returns the summary also written to summary.json.
Json solve_instance(const Json& config, const std::filesystem::path& out_dir);

/// Dataset tensors and splits for a config, without running any method.
void write_dataset(const Json& config, const std::filesystem::path& out_dir);

/// Runs every entry of config["methods"] (at least two) and writes bench.csv
/// (method, step, mse, mse_db) and summary.csv. Returns the summary rows.
Json run_bench(const Json& config, const std::filesystem::path& out_dir, bool quick = false);

/// Model presets for the linear-Gaussian task: "tracking" and "scalar".
StateSpaceModel model_preset(const std::string& name);

/// RFC-4180 field quoting.
std::string csv_field(const std::string& value);

}  // namespace mbdl
