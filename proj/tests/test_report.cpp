#include <doctest.h>

#include <fstream>
#include <sstream>

#include "evln/cli.hpp"
#include "evln/config.hpp"
#include "evln/errors.hpp"
#include "evln/report.hpp"
#include "evln/serialize.hpp"

using namespace evln;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"(# tiny run
seed = 2
synthetic_classes = 4
synthetic_samples_per_class = 10
synthetic_image_size = 8
classes_per_task = 2
buffer_capacity = 8
widths = 4,6,8
epochs = 1
batch_size = 8
t_a = 2
learning_rate = 0.01
)";

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "evln_test_report" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

fs::path write_text(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
  return p;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string without_wall_time(const std::string& text) {
  std::stringstream in(text);
  std::string line, out;
  while (std::getline(in, line))
    if (line.find("wall_time") == std::string::npos) out += line + "\n";
  return out;
}

struct CliResult {
  int code;
  std::string out, err;
};

CliResult cli(std::vector<std::string> args) {
  args.insert(args.begin(), "evln");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

}  // namespace

TEST_CASE("config parsing") {
  RunConfig c = parse_config(kTinyConfig);
  CHECK(c.seed == 2);
  CHECK(c.widths == std::array<std::size_t, 3>{4, 6, 8});
  CHECK(c.effective_shuffle_seed() == 2);
  CHECK(parse_config("shuffle_seed = 9\nseed = 1").effective_shuffle_seed() == 9);
  CHECK(parse_config("use_aleatoric = false\n").use.aleatoric == false);
  CHECK(parse_config("use_aleatoric = 1  # trailing comment\n").use.aleatoric == true);
  CHECK(parse_config("aleatoric_form = literal").aleatoric_form == AleatoricForm::literal);
  CHECK(parse_config("ce_scope = new").ce_scope == CeScope::new_classes);

  RunConfig again = parse_config(c.to_text());
  CHECK(again.entries() == c.entries());

  auto message = [](const std::string& text) {
    try {
      parse_config(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  CHECK(message("lamda = 0.5").find("lamda") != std::string::npos);
  CHECK(message("seed = 1\nseed = 2").find("seed") != std::string::npos);
  CHECK(message("tau = 0").find("tau") != std::string::npos);
  CHECK(message("dropout_rate = 1").find("dropout_rate") != std::string::npos);
  CHECK(message("widths = 4,6").find("widths") != std::string::npos);
  CHECK(message("synthetic_image_size = 12").find("synthetic_image_size") != std::string::npos);
  CHECK(message("just words") != "no error");
  CHECK(message("epochs = many").find("epochs") != std::string::npos);
  CHECK_THROWS_AS(load_config("/nonexistent/evln.cfg"), IoError);
}

TEST_CASE("engine config mirrors the run config") {
  RunConfig c = parse_config(kTinyConfig);
  Dataset ds = build_dataset(c);
  EngineConfig e = c.engine_config(ds);
  CHECK(e.model.image_size == 8);
  CHECK(e.model.widths == c.widths);
  CHECK(e.buffer_capacity == 8);
  CHECK(e.optimizer.batch_size == 8);
  CHECK(e.loss.t_a == 2);
  CHECK(e.seed == 2);
}

TEST_CASE("cli rejects an unknown key and names it") {
  const fs::path dir = scratch_dir("badkey");
  const fs::path cfg = write_text(dir / "bad.cfg", std::string(kTinyConfig) + "lamda = 0.5\n");
  const CliResult r = cli({"run", cfg.string(), "--out", (dir / "out").string()});
  CHECK(r.code == kExitConfig);
  CHECK(r.err.find("lamda") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "out" / "result.json"));
}

TEST_CASE("cli reports missing files as I/O errors") {
  CHECK(cli({"run", "/nonexistent/evln.cfg"}).code == kExitIo);
  CHECK(cli({"report", "/nonexistent/results"}).code == kExitIo);
  CHECK(cli({"frobnicate"}).code == kExitConfig);
  CHECK(cli({}).code == kExitConfig);
}

TEST_CASE("run output files are consistent and reproducible") {
  const fs::path dir = scratch_dir("run");
  const fs::path cfg = write_text(dir / "tiny.cfg", kTinyConfig);
  REQUIRE(cli({"run", cfg.string(), "--out", (dir / "a").string()}).code == kExitOk);
  REQUIRE(cli({"run", cfg.string(), "--out", (dir / "b").string()}).code == kExitOk);

  const StoredResult r = read_result(dir / "a" / "result.json");
  CHECK(r.matrix.steps() == 2);
  CHECK(std::abs(r.acc - acc(r.matrix)) <= 1e-12);
  CHECK(std::abs(r.fgt - fgt(r.matrix)) <= 1e-12);
  CHECK(r.seed == 2);
  CHECK(r.final_accuracies == r.matrix.row(1));

  CHECK(without_wall_time(read_text(dir / "a" / "result.json")) ==
        without_wall_time(read_text(dir / "b" / "result.json")));
  CHECK(read_text(dir / "a" / "curves.csv") == read_text(dir / "b" / "curves.csv"));
  CHECK(read_text(dir / "a" / "log.jsonl") == read_text(dir / "b" / "log.jsonl"));

  std::stringstream curves(read_text(dir / "a" / "curves.csv"));
  std::string line;
  std::size_t lines = 0;
  while (std::getline(curves, line)) ++lines;
  CHECK(lines == 3);
  CHECK(read_text(dir / "a" / "curves.csv").rfind("step,task_1,task_2,avg_acc,fgt", 0) == 0);
  CHECK(read_text(dir / "a" / "result.json").find(kFgtDefinition) != std::string::npos);
}

TEST_CASE("checkpoint and attention dumps") {
  const fs::path dir = scratch_dir("dumps");
  const fs::path cfg = write_text(
      dir / "tiny.cfg", std::string(kTinyConfig) + "save_attention = true\nsave_checkpoint = true\n");
  REQUIRE(cli({"run", cfg.string(), "--out", (dir / "out").string()}).code == kExitOk);
  const NamedTensors model = load_tensors(dir / "out" / "model.evln");
  CHECK_FALSE(model.empty());
  const NamedTensors attn = load_tensors(dir / "out" / "attention.evln");
  REQUIRE(attn.size() == 5);
  CHECK(attn[0].first == "input");
  CHECK(attn[1].second.dim(1) == 4);
}

TEST_CASE("lambda sweep writes one result per value and a report") {
  const fs::path dir = scratch_dir("sweep");
  const fs::path cfg = write_text(dir / "tiny.cfg", kTinyConfig);
  const CliResult r = cli({"sweep-lambda", cfg.string(), "--values", "0.1,0.5,1.0", "--jobs", "2",
                           "--out", (dir / "out").string()});
  REQUIRE(r.code == kExitOk);
  const auto results = collect_results(dir / "out");
  CHECK(results.size() == 3);
  for (const auto& s : results) CHECK(s.matrix.complete());
  CHECK(fs::exists(dir / "out" / "summary.csv"));
  CHECK(fs::exists(dir / "out" / "runs.csv"));
  CHECK(fs::exists(dir / "out" / "curves_summary.csv"));
  CHECK(cli({"report", (dir / "out").string()}).code == kExitOk);
  CHECK(cli({"sweep-lambda", cfg.string(), "--values", "0.1,-2", "--out",
             (dir / "neg").string()}).code == kExitConfig);
}

TEST_CASE("summaries average over seeds") {
  AccuracyMatrix a(2), b(2);
  a.set_row(0, {1.0});
  a.set_row(1, {0.6, 0.8});
  b.set_row(0, {0.8});
  b.set_row(1, {0.8, 1.0});
  std::vector<StoredResult> rs(2);
  rs[0].label = rs[1].label = "x";
  rs[0].matrix = a;
  rs[1].matrix = b;
  rs[0].acc = acc(a);
  rs[1].acc = acc(b);
  rs[0].fgt = fgt(a);
  rs[1].fgt = fgt(b);
  const auto groups = summarize(rs);
  REQUIRE(groups.size() == 1);
  CHECK(groups[0].runs == 2);
  CHECK(groups[0].acc_mean == doctest::Approx(0.8));
  CHECK(groups[0].fgt_mean == doctest::Approx(0.2));
  CHECK(groups[0].curve_acc.size() == 2);
}

TEST_CASE("malformed result files are rejected") {
  const fs::path dir = scratch_dir("malformed");
  write_text(dir / "result.json", "{\"format\": 1");
  CHECK_THROWS_AS(read_result(dir / "result.json"), FormatError);
  write_text(dir / "result.json", "{}");
  CHECK_THROWS_AS(read_result(dir / "result.json"), FormatError);
}

TEST_CASE("parameter container round trip") {
  Rng rng(1);
  NamedTensors t{{"a", uniform(rng, {2, 3}, -1, 1)}, {"b.c", Tensor::scalar(4.5)},
                 {"empty", Tensor::zeros({0, 3})}};
  std::stringstream buf;
  write_tensors(buf, t);
  const NamedTensors back = read_tensors(buf);
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].first == t[i].first);
    CHECK(back[i].second.shape() == t[i].second.shape());
    CHECK(std::vector<double>(back[i].second.data().begin(), back[i].second.data().end()) ==
          std::vector<double>(t[i].second.data().begin(), t[i].second.data().end()));
  }
  std::stringstream bad("EVLX....");
  CHECK_THROWS_AS(read_tensors(bad), FormatError);
  std::string bytes;
  {
    std::stringstream full;
    write_tensors(full, t);
    bytes = full.str();
  }
  std::stringstream cut(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(read_tensors(cut), FormatError);
}
