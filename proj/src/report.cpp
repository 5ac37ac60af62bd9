#include "evln/report.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include <json.hpp>

#include "evln/errors.hpp"
#include "evln/serialize.hpp"

namespace evln {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

json loss_json(const LossBreakdown& l) {
  return json{{"l_c", l.l_c}, {"l_d", l.l_d}, {"l_ale", l.l_ale},
              {"l_a", l.l_a}, {"l_m", l.l_m}, {"total", l.total}};
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

RunRecord execute_run(const RunConfig& cfg, const std::string& label, const RunHooks& hooks) {
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset ds = build_dataset(cfg);
  const TaskSequence tasks =
      make_task_sequence(ds, cfg.classes_per_task, cfg.effective_shuffle_seed());
  RunRecord rec{label, cfg, run_sequence(ds, tasks, cfg.engine_config(ds), hooks), 0.0, {}};
  rec.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (cfg.save_attention && rec.result.model) {
    // Kept on the record so write_results can dump it without the dataset.
    const std::size_t n = std::min<std::size_t>(16, ds.test.size());
    std::vector<std::size_t> idx(ds.test.begin(), ds.test.begin() + static_cast<long>(n));
    NoGradGuard guard;
    const Tensor x = ds.gather(idx);
    const ForwardOutput out = rec.result.model->forward(x);
    rec.attention.emplace_back("input", x);
    for (std::size_t s = 0; s < 3; ++s) {
      rec.attention.emplace_back("stage" + std::to_string(s + 1) + ".attended", out.attn[s]);
    }
    std::vector<double> labels;
    for (std::size_t i : idx) labels.push_back(static_cast<double>(ds.labels[i]));
    rec.attention.emplace_back("labels", Tensor({n}, std::move(labels)));
  }
  return rec;
}

std::string result_json(const RunRecord& run) {
  const AccuracyMatrix& a = run.result.matrix;
  json j;
  j["format"] = "evln-result";
  j["version"] = 1;
  j["label"] = run.label;
  j["fgt_definition"] = kFgtDefinition;
  json cfg = json::object();
  for (const auto& [k, v] : run.config.entries()) cfg[k] = v;
  j["config"] = cfg;
  json rows = json::array();
  for (std::size_t i = 0; i < a.steps(); ++i) rows.push_back(a.row(i));
  j["matrix"] = rows;
  j["acc"] = acc(a);
  j["fgt"] = fgt(a);
  j["final_accuracies"] = a.steps() ? a.row(a.steps() - 1) : std::vector<double>{};
  json order = json::array();
  for (const auto& o : run.result.class_order_per_task) order.push_back(o);
  j["class_order_per_task"] = order;
  j["wall_time_seconds"] = run.wall_seconds;
  return j.dump(2) + "\n";
}

std::string curves_csv(const AccuracyMatrix& a) {
  const std::size_t t = a.steps();
  std::ostringstream os;
  os << "step";
  for (std::size_t j = 0; j < t; ++j) os << ",task_" << j + 1;
  os << ",avg_acc,fgt\n";
  for (std::size_t i = 0; i < t; ++i) {
    os << i + 1;
    double s = 0.0;
    for (std::size_t j = 0; j < t; ++j) {
      os << ',';
      if (j <= i) {
        os << fmt(a.at(i, j));
        s += a.at(i, j);
      }
    }
    os << ',' << fmt(s / static_cast<double>(i + 1)) << ',' << fmt(fgt(a.prefix(i + 1)))
       << '\n';
  }
  return os.str();
}

void write_results(const fs::path& dir, const RunRecord& run) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  write_file(dir / "result.json", result_json(run));
  write_file(dir / "curves.csv", curves_csv(run.result.matrix));

  std::ostringstream log;
  std::size_t next_task = 0;
  auto task_record = [&](std::size_t t) {
    json r{{"type", "task"}, {"task", t + 1}, {"accuracy", run.result.matrix.row(t)}};
    log << r.dump() << '\n';
  };
  for (const BatchLog& b : run.result.batches) {
    while (next_task < b.task) task_record(next_task++);
    json r{{"type", "batch"}, {"task", b.task + 1}, {"epoch", b.epoch + 1}, {"batch", b.batch + 1}};
    r.update(loss_json(b.loss));
    log << r.dump() << '\n';
  }
  while (next_task < run.result.matrix.steps()) task_record(next_task++);
  write_file(dir / "log.jsonl", log.str());

  try {
    if (!run.attention.empty()) save_tensors(dir / "attention.evln", run.attention);
    if (run.config.save_checkpoint && run.result.model) {
      save_tensors(dir / "model.evln", run.result.model->parameters());
    }
  } catch (const FormatError& e) {
    throw IoError(e.what());
  }
}

StoredResult read_result(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
    StoredResult r;
    r.path = path;
    r.label = j.at("label").get<std::string>();
    r.seed = std::stoull(j.at("config").at("seed").get<std::string>());
    r.lambda = std::stod(j.at("config").at("lambda").get<std::string>());
    const auto rows = j.at("matrix").get<std::vector<std::vector<double>>>();
    r.matrix = AccuracyMatrix(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) r.matrix.set_row(i, rows[i]);
    r.acc = j.at("acc").get<double>();
    r.fgt = j.at("fgt").get<double>();
    r.final_accuracies = j.at("final_accuracies").get<std::vector<double>>();
    r.wall_seconds = j.at("wall_time_seconds").get<double>();
    return r;
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError("malformed result file " + path.string() + ": " + e.what());
  }
}

std::vector<StoredResult> collect_results(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> paths;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().filename() == "result.json") paths.push_back(e.path());
  }
  std::sort(paths.begin(), paths.end());
  std::vector<StoredResult> out;
  for (const auto& p : paths) out.push_back(read_result(p));
  return out;
}

std::vector<GroupSummary> summarize(const std::vector<StoredResult>& results) {
  std::vector<GroupSummary> groups;
  std::map<std::string, std::vector<const StoredResult*>> members;
  for (const auto& r : results) {
    if (members.find(r.label) == members.end()) {
      GroupSummary g;
      g.label = r.label;
      groups.push_back(g);
    }
    members[r.label].push_back(&r);
  }
  for (auto& g : groups) {
    const auto& m = members[g.label];
    std::vector<double> accs, fgts;
    std::size_t steps = m.front()->matrix.steps();
    for (const auto* r : m) {
      accs.push_back(r->acc);
      fgts.push_back(r->fgt);
      steps = std::min(steps, r->matrix.steps());
    }
    g.runs = m.size();
    g.acc_mean = mean_of(accs);
    g.acc_std = std_of(accs);
    g.fgt_mean = mean_of(fgts);
    g.fgt_std = std_of(fgts);
    for (std::size_t i = 0; i < steps; ++i) {
      std::vector<double> a, f;
      for (const auto* r : m) {
        a.push_back(mean_of(r->matrix.row(i)));
        f.push_back(fgt(r->matrix.prefix(i + 1)));
      }
      g.curve_acc.push_back(mean_of(a));
      g.curve_fgt.push_back(mean_of(f));
    }
  }
  return groups;
}

std::vector<GroupSummary> write_report(const fs::path& dir, std::ostream& out) {
  const auto results = collect_results(dir);
  if (results.empty()) throw IoError("no result.json files under " + dir.string());
  const auto groups = summarize(results);

  std::ostringstream runs, summary, curves;
  runs << "path,label,seed,lambda,acc,fgt\n";
  for (const auto& r : results) {
    runs << fs::relative(r.path, dir).generic_string() << ',' << r.label << ',' << r.seed
         << ',' << fmt(r.lambda) << ',' << fmt(r.acc) << ',' << fmt(r.fgt) << '\n';
  }
  summary << "label,runs,acc_mean,acc_std,fgt_mean,fgt_std\n";
  curves << "label,step,avg_acc,fgt\n";
  out << std::left << std::setw(22) << "label" << std::right << std::setw(6) << "runs"
      << std::setw(18) << "ACC" << std::setw(18) << "FGT" << '\n';
  for (const auto& g : groups) {
    summary << g.label << ',' << g.runs << ',' << fmt(g.acc_mean) << ',' << fmt(g.acc_std)
            << ',' << fmt(g.fgt_mean) << ',' << fmt(g.fgt_std) << '\n';
    for (std::size_t i = 0; i < g.curve_acc.size(); ++i) {
      curves << g.label << ',' << i + 1 << ',' << fmt(g.curve_acc[i]) << ','
             << fmt(g.curve_fgt[i]) << '\n';
    }
    std::ostringstream a, f;
    a << std::fixed << std::setprecision(4) << g.acc_mean << " +- " << g.acc_std;
    f << std::fixed << std::setprecision(4) << g.fgt_mean << " +- " << g.fgt_std;
    out << std::left << std::setw(22) << g.label << std::right << std::setw(6) << g.runs
        << std::setw(18) << a.str() << std::setw(18) << f.str() << '\n';
  }
  write_file(dir / "runs.csv", runs.str());
  write_file(dir / "summary.csv", summary.str());
  write_file(dir / "curves_summary.csv", curves.str());
  return groups;
}

std::vector<AblationRow> ablation_rows(bool with_distillation) {
  auto row = [&](std::string name, bool au, bool ud, bool ad) {
    return AblationRow{std::move(name), LossSwitches{with_distillation, au, ud, ad}};
  };
  return {row("AU", true, false, false), row("AD", false, false, true),
          row("AU+UD", true, true, false), row("AU+AD", true, false, true),
          row("AU+UD+AD", true, true, true)};
}

}  // namespace evln
