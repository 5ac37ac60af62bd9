#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "evln/config.hpp"
#include "evln/engine.hpp"

namespace evln {

// Version tag of the forgetting definition written into every result file.
inline constexpr const char* kFgtDefinition = "clamped-mean-decay/v1";

struct RunRecord {
  std::string label;
  RunConfig config;
  RunResult result;
  double wall_seconds = 0.0;
  // Filled when config.save_attention is set: inputs and attended maps of
  // the final model on the first test samples.
  NamedTensors attention;
};

/// Builds the dataset and task sequence described by cfg and runs the full
/// protocol.
RunRecord execute_run(const RunConfig& cfg, const std::string& label,
                      const RunHooks& hooks = {});

/// Writes into dir (created if missing):
///   result.json  config echo, accuracy matrix, ACC, FGT, final accuracies,
///                wall time
///   curves.csv   one row per task boundary
///   log.jsonl    one record per batch plus one per task boundary
///   attention.evln / model.evln when the config asks for them.
/// Throws IoError when a file cannot be written.
void write_results(const std::filesystem::path& dir, const RunRecord& run);

std::string result_json(const RunRecord& run);
std::string curves_csv(const AccuracyMatrix& a);

struct StoredResult {
  std::filesystem::path path;
  std::string label;
  std::uint64_t seed = 0;
  double lambda = 0.0;
  AccuracyMatrix matrix;
  double acc = 0.0;
  double fgt = 0.0;
  std::vector<double> final_accuracies;
  double wall_seconds = 0.0;
};

// FormatError on malformed content, IoError when unreadable.
StoredResult read_result(const std::filesystem::path& path);

// Every result.json below dir, sorted by path.
std::vector<StoredResult> collect_results(const std::filesystem::path& dir);

struct GroupSummary {
  std::string label;
  std::size_t runs = 0;
  double acc_mean = 0.0, acc_std = 0.0;
  double fgt_mean = 0.0, fgt_std = 0.0;
  std::vector<double> curve_acc;  // per step, averaged over runs
  std::vector<double> curve_fgt;
};

// Groups by label, in order of first appearance.
std::vector<GroupSummary> summarize(const std::vector<StoredResult>& results);

/// Writes summary.csv, runs.csv and curves_summary.csv into dir and prints a
/// table to out. Returns the groups.
std::vector<GroupSummary> write_report(const std::filesystem::path& dir, std::ostream& out);

/// Loss-term combinations of the ablation grid.
struct AblationRow {
  std::string name;
  LossSwitches use;
};
std::vector<AblationRow> ablation_rows(bool with_distillation);

}  // namespace evln
