#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "pyrsearch/search_space.hpp"

namespace fs = std::filesystem;
using namespace pyrsearch;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string stdout_text;
};

RunResult run_cli(const std::string& args) {
  static int counter = 0;
  const std::string capture = (fs::temp_directory_path() / ("pyrsearch_cli_out_" + std::to_string(counter++))).string();
  const std::string cmd = std::string(PYRSEARCH_BIN) + " " + args + " > " + capture + " 2>&1";
  const int status = std::system(cmd.c_str());
  RunResult result;
  result.exit_code = WEXITSTATUS(status);
  std::ifstream in(capture);
  std::ostringstream buf;
  buf << in.rdbuf();
  result.stdout_text = buf.str();
  fs::remove(capture);
  return result;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("pyrsearch_cli_" + std::to_string(std::rand()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("validate: preset file exits 0, corrupted json exits 2, invalid genome exits 1") {
  TempDir dir;
  REQUIRE(run_cli("preset --genome nasfpn-7cell --out " + dir.file("g.json")).exit_code == 0);
  CHECK(run_cli("validate " + dir.file("g.json")).exit_code == 0);

  std::ofstream(dir.file("bad.json")) << "{this is not json";
  CHECK(run_cli("validate " + dir.file("bad.json")).exit_code == 2);

  Genome broken = preset("nasfpn-7cell");
  broken.cells[0].input_b = broken.cells[0].input_a;
  std::ofstream(dir.file("invalid.json")) << to_json(broken);
  auto result = run_cli("validate " + dir.file("invalid.json") + " --report " + dir.file("r.json"));
  CHECK(result.exit_code == 1);
  CHECK(result.stdout_text.find("replacement") != std::string::npos);
  CHECK(slurp(dir.file("r.json")).find("replacement") != std::string::npos);
}

TEST_CASE("compile: artifacts, stage counts and failure modes") {
  TempDir dir;
  REQUIRE(run_cli("preset --genome vanilla-fpn --out " + dir.file("fpn.json")).exit_code == 0);
  auto ok = run_cli("compile " + dir.file("fpn.json") + " --stack 1 --image-side 256 --dim 16 --input-width 8 --dot " +
                    dir.file("g.dot") + " --json " + dir.file("g.json"));
  CHECK(ok.exit_code == 0);
  const std::string dot = slurp(dir.file("g.dot"));
  int outputs_styled = 0;
  for (std::size_t pos = dot.find("lightcoral"); pos != std::string::npos;
       pos = dot.find("lightcoral", pos + 1))
    ++outputs_styled;
  CHECK(outputs_styled == 5);

  REQUIRE(run_cli("preset --genome nasfpn-7cell --out " + dir.file("nas.json")).exit_code == 0);
  auto stacked = run_cli("compile " + dir.file("nas.json") + " --stack 7 --dim 8 --input-width 8 --json " +
                         dir.file("g7.json"));
  CHECK(stacked.exit_code == 0);
  CHECK(slurp(dir.file("g7.json")).find("\"stack_count\":7") != std::string::npos);

  CHECK(run_cli("compile " + dir.file("nas.json") + " --image-side 100").exit_code == 1);
}

TEST_CASE("cost: verify mode and dim comparison") {
  TempDir dir;
  REQUIRE(run_cli("preset --genome nasfpn-7cell --out " + dir.file("g.json")).exit_code == 0);
  auto verify = run_cli("cost " + dir.file("g.json") + " --image-side 128 --dim 8 --input-width 4 --verify --out " +
                        dir.file("cost.json"));
  CHECK(verify.exit_code == 0);
  CHECK(verify.stdout_text.find("==") != std::string::npos);
  CHECK(slurp(dir.file("cost.json")).find("total_flops") != std::string::npos);
}

TEST_CASE("search: planted random search is reproducible via rerun") {
  TempDir dir;
  REQUIRE(run_cli("preset --space default5 --out " + dir.file("space.json")).exit_code == 0);
  auto first = run_cli("search --driver random --space " + dir.file("space.json") +
                       " --task planted --budget 16 --seed 9 --workers 2 --out " + dir.file("run1"));
  REQUIRE(first.exit_code == 0);
  auto rerun = run_cli("rerun " + dir.file("run1") + "/manifest.json --out " + dir.file("run2"));
  REQUIRE(rerun.exit_code == 0);
  CHECK(slurp(dir.path / "run1" / "summary.json") == slurp(dir.path / "run2" / "summary.json"));
  CHECK(slurp(dir.path / "run1" / "best_genome.json") ==
        slurp(dir.path / "run2" / "best_genome.json"));

  // No command mutates its inputs.
  CHECK(slurp(dir.file("space.json")) == space_to_json(space_preset("default5")) + "\n");
}

TEST_CASE("search: missing seed is a usage error") {
  TempDir dir;
  REQUIRE(run_cli("preset --space default5 --out " + dir.file("space.json")).exit_code == 0);
  auto result = run_cli("search --driver random --space " + dir.file("space.json") + " --out " +
                        dir.file("run"));
  CHECK(result.exit_code != 0);
  CHECK(result.exit_code != 1);  // CLI11 usage failure, not a domain failure
}

TEST_CASE("train and eval: metrics, early exit bounds, manifest rerun") {
  TempDir dir;
  Genome toy;
  toy.space = space_preset("toy3");
  toy.cells = {{1, 2, 3, BinaryOpKind::Sum},
               {0, 3, 2, BinaryOpKind::Sum},
               {1, 4, 3, BinaryOpKind::Sum},
               {2, 5, 4, BinaryOpKind::Sum}};
  toy.output_order = {2, 3, 4};
  std::ofstream(dir.file("toy.json")) << to_json(toy);

  auto train = run_cli("train " + dir.file("toy.json") +
                       " --stack 2 --deep-supervision --task-preset default --steps 25 --seed 4 --out " +
                       dir.file("model"));
  REQUIRE(train.exit_code == 0);
  CHECK(fs::exists(dir.path / "model" / "ckpt.bin"));

  auto eval = run_cli("eval --model " + dir.file("model") + " --out " + dir.file("metrics.json"));
  REQUIRE(eval.exit_code == 0);
  const std::string metrics = slurp(dir.file("metrics.json"));
  CHECK(metrics.find("\"stage\":1") != std::string::npos);
  CHECK(metrics.find("\"stage\":2") != std::string::npos);

  CHECK(run_cli("eval --model " + dir.file("model") + " --early-exit 9").exit_code == 1);

  auto rerun = run_cli("rerun " + dir.file("model") + "/manifest.json --out " + dir.file("model2"));
  REQUIRE(rerun.exit_code == 0);
  CHECK(slurp(dir.path / "model" / "metrics.json") == slurp(dir.path / "model2" / "metrics.json"));
}

TEST_CASE("unknown preset exits 2") {
  TempDir dir;
  CHECK(run_cli("preset --genome no-such-thing --out " + dir.file("x.json")).exit_code == 2);
}
