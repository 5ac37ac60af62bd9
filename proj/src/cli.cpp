#include "evln/cli.hpp"

#include <atomic>
#include <exception>
#include <iomanip>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "evln/errors.hpp"
#include "evln/gradsuite.hpp"
#include "evln/report.hpp"

namespace evln {

namespace fs = std::filesystem;

namespace {

struct GridPoint {
  std::string label;
  RunConfig config;
  fs::path dir;
};

int exit_code_for(const std::exception_ptr& e) {
  try {
    std::rethrow_exception(e);
  } catch (const ConfigError&) {
    return kExitConfig;
  } catch (const ParameterError&) {
    return kExitConfig;
  } catch (const IoError&) {
    return kExitIo;
  } catch (const FormatError&) {
    return kExitIo;
  } catch (const DataError&) {
    return kExitIo;
  } catch (const NumericError&) {
    return kExitNumeric;
  } catch (const DomainError&) {
    return kExitNumeric;
  } catch (...) {
    return kExitConfig;
  }
}

std::string describe(const std::exception_ptr& e) {
  try {
    std::rethrow_exception(e);
  } catch (const std::exception& ex) {
    return ex.what();
  } catch (...) {
    return "unknown error";
  }
}

// Runs every grid point, `jobs` at a time. Returns the worst exit code.
int run_grid(const std::vector<GridPoint>& grid, std::size_t jobs, std::ostream& out,
             std::ostream& err) {
  std::mutex io;
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(grid.size());
  auto worker = [&] {
    for (std::size_t i = next++; i < grid.size(); i = next++) {
      try {
        const RunRecord rec = execute_run(grid[i].config, grid[i].label);
        write_results(grid[i].dir, rec);
        std::lock_guard lock(io);
        out << std::left << std::setw(12) << grid[i].label << " seed " << grid[i].config.seed
            << "  ACC " << std::fixed << std::setprecision(4) << acc(rec.result.matrix)
            << "  FGT " << fgt(rec.result.matrix) << "  (" << std::setprecision(1)
            << rec.wall_seconds << " s) -> " << grid[i].dir.string() << '\n'
            << std::defaultfloat;
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  jobs = std::max<std::size_t>(1, std::min(jobs, grid.size()));
  std::vector<std::thread> pool;
  for (std::size_t j = 1; j < jobs; ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  int code = kExitOk;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!errors[i]) continue;
    err << "error: " << grid[i].label << " seed " << grid[i].config.seed << ": "
        << describe(errors[i]) << '\n';
    code = std::max(code, exit_code_for(errors[i]));
  }
  return code;
}

std::vector<double> parse_values(const std::string& text) {
  std::vector<double> values;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    RunConfig probe;
    probe.set("lambda", part);  // same bounds and messages as the config key
    values.push_back(probe.lambda);
  }
  if (values.empty()) throw ConfigError("--values needs at least one lambda");
  return values;
}

std::string seed_dir(std::uint64_t seed) { return "seed" + std::to_string(seed); }

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Class-incremental learning with uncertainty and attention distillation"};
  app.require_subcommand(1);

  std::string config_path, out_dir, values_text, report_dir;
  std::size_t seeds = 5, jobs = 1;
  std::uint64_t gc_seed = 0;
  double gc_tol = 1e-4;

  auto* run = app.add_subcommand("run", "Train one class-incremental sequence");
  run->add_option("config", config_path, "Config file")->required();
  run->add_option("--out", out_dir, "Output directory")->default_val("results/run");

  auto* ablate = app.add_subcommand(
      "ablate", "Loss-term ablation grid (plus fine-tuning and LD-only baselines)");
  ablate->add_option("config", config_path, "Config file")->required();
  ablate->add_option("--seeds", seeds, "Seeds 0..N-1 per row")->default_val(5);
  ablate->add_option("--jobs", jobs, "Runs in parallel")->default_val(1);
  ablate->add_option("--out", out_dir, "Output directory")->default_val("results/ablate");

  auto* sweep = app.add_subcommand("sweep-lambda", "Grid over the lambda weight");
  sweep->add_option("config", config_path, "Config file")->required();
  sweep->add_option("--values", values_text, "Comma separated lambdas")->required();
  sweep->add_option("--seeds", seeds, "Seeds 0..N-1 per value")->default_val(1);
  sweep->add_option("--jobs", jobs, "Runs in parallel")->default_val(1);
  sweep->add_option("--out", out_dir, "Output directory")->default_val("results/sweep");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gc->add_option("--seed", gc_seed, "Suite seed")->default_val(0);
  gc->add_option("--tol", gc_tol, "Maximum relative error")->default_val(1e-4);

  auto* rep = app.add_subcommand("report", "Aggregate result files");
  rep->add_option("dir", report_dir, "Results directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }

  try {
    if (run->parsed()) {
      const RunConfig cfg = load_config(config_path);
      return run_grid({{"run", cfg, out_dir}}, 1, out, err);
    }
    if (ablate->parsed() || sweep->parsed()) {
      const RunConfig base = load_config(config_path);
      if (seeds < 1) throw ConfigError("--seeds must be >= 1");
      std::vector<GridPoint> grid;
      auto add_seeds = [&](const std::string& label, RunConfig cfg, const fs::path& dir) {
        for (std::uint64_t s = 0; s < seeds; ++s) {
          cfg.seed = base.seed + s;
          grid.push_back({label, cfg, dir / seed_dir(cfg.seed)});
        }
      };
      if (ablate->parsed()) {
        RunConfig cfg = base;
        cfg.use = {false, false, false, false};
        add_seeds("finetune", cfg, fs::path(out_dir) / "finetune");
        cfg.use = {true, false, false, false};
        add_seeds("LD", cfg, fs::path(out_dir) / "LD");
        for (const auto& row : ablation_rows(base.use.distillation)) {
          cfg.use = row.use;
          std::string name = row.name;
          std::replace(name.begin(), name.end(), '+', '_');
          add_seeds(row.name, cfg, fs::path(out_dir) / name);
        }
      } else {
        for (double v : parse_values(values_text)) {
          RunConfig cfg = base;
          cfg.lambda = v;
          std::ostringstream label;
          label << "lambda=" << v;
          add_seeds(label.str(), cfg, fs::path(out_dir) / ("lambda_" + label.str().substr(7)));
        }
      }
      const int code = run_grid(grid, jobs, out, err);
      if (code != kExitOk) return code;
      write_report(out_dir, out);
      return kExitOk;
    }
    if (gc->parsed()) {
      bool ok = true;
      for (const auto& e : run_gradcheck_suite(gc_seed)) {
        const bool pass = e.max_rel_error < gc_tol;
        ok = ok && pass;
        out << std::left << std::setw(34) << e.name << std::scientific << std::setprecision(3)
            << e.max_rel_error << (pass ? "  ok" : "  FAIL") << '\n'
            << std::defaultfloat;
      }
      return ok ? kExitOk : kExitNumeric;
    }
    if (rep->parsed()) {
      write_report(report_dir, out);
      return kExitOk;
    }
  } catch (...) {
    const auto e = std::current_exception();
    err << "error: " << describe(e) << '\n';
    return exit_code_for(e);
  }
  return kExitConfig;
}

}  // namespace evln
