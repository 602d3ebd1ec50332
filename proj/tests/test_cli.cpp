#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const char* kCli = Q2A_CLI_PATH;

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("q2a_cli_test_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string file(const std::string& name) const {
    return (path / name).string();
  }
};

int run(const std::string& args, const std::string& out_file = "") {
  std::string cmd = std::string(kCli) + " " + args;
  if (!out_file.empty()) cmd += " > " + out_file + " 2>&1";
  else cmd += " > /dev/null 2>&1";
  int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("exit code contract: usage errors are 2, runtime errors are 1") {
  TempDir tmp;
  CHECK(run("") == 2);                       // missing subcommand
  CHECK(run("frobnicate") == 2);             // unknown subcommand
  CHECK(run("--help") == 0);
  CHECK(run("gen-data --n 0") == 2);         // constraint violation
  CHECK(run("train") == 2);                  // missing required --data
  CHECK(run("train --data no_such_file.txt") == 2);
  CHECK(run("eval --checkpoint nope.bin --data nope.txt") == 2);

  // A well-formed invocation over a broken input is a runtime error.
  std::string bad = tmp.file("bad.txt");
  {
    std::ofstream out(bad);
    out << "not a dataset\n";
  }
  CHECK(run("train --data " + bad) == 1);
}

TEST_CASE("gen-data is deterministic in the seed and reports class counts") {
  TempDir tmp;
  std::string log = tmp.file("log.txt");
  REQUIRE(run("gen-data --out " + tmp.file("a.txt") +
              " --n 200 --grid 3 --seed 9", log) == 0);
  std::string report = slurp(log);
  CHECK(report.find("wrote 200 samples") != std::string::npos);
  CHECK(report.find("class counts:") != std::string::npos);
  CHECK(report.find("yes:") != std::string::npos);
  REQUIRE(run("gen-data --out " + tmp.file("b.txt") +
              " --n 200 --grid 3 --seed 9") == 0);
  REQUIRE(run("gen-data --out " + tmp.file("c.txt") +
              " --n 200 --grid 3 --seed 10") == 0);
  CHECK(slurp(tmp.file("a.txt")) == slurp(tmp.file("b.txt")));
  CHECK(slurp(tmp.file("a.txt")) != slurp(tmp.file("c.txt")));
}

TEST_CASE("train/eval round trip through the run directory") {
  TempDir tmp;
  REQUIRE(run("gen-data --out " + tmp.file("ds.txt") +
              " --n 80 --grid 2 --seed 3") == 0);
  std::string cfg = tmp.file("cfg.json");
  {
    std::ofstream out(cfg);
    out << R"({"model": {"feature_dim": 8, "answer_embed_dim": 8,
                "num_heads": 2, "fusion_layers": 1, "decoder_layers": 1,
                "ffn_mult": 2},
               "train": {"epochs": 1, "batch_size": 16},
               "val_fraction": 0.25})";
  }
  std::string run_dir = tmp.file("run");
  std::string log = tmp.file("train_log.txt");
  REQUIRE(run("train --config " + cfg + " --data " + tmp.file("ds.txt") +
              " --out " + run_dir, log) == 0);
  CHECK(fs::exists(fs::path(run_dir) / "config.json"));
  CHECK(fs::exists(fs::path(run_dir) / "checkpoint.bin"));
  CHECK(fs::exists(fs::path(run_dir) / "history.csv"));
  CHECK(fs::exists(fs::path(run_dir) / "eval.csv"));
  CHECK(slurp(log).find("best val overall") != std::string::npos);

  // The stored config reflects dataset-derived dims (grid 2 -> 11 classes).
  std::string stored = slurp((fs::path(run_dir) / "config.json").string());
  CHECK(stored.find("\"num_answer_classes\": 11") != std::string::npos);

  std::string eval_log = tmp.file("eval_log.txt");
  std::string ckpt = (fs::path(run_dir) / "checkpoint.bin").string();
  REQUIRE(run("eval --checkpoint " + ckpt + " --data " + tmp.file("ds.txt") +
              " --out " + tmp.file("report.csv"), eval_log) == 0);
  CHECK(slurp(eval_log).find("overall") != std::string::npos);
  CHECK(slurp(tmp.file("report.csv")).rfind("qtype,accuracy", 0) == 0);

  // Evaluating against a dataset with a different answer vocabulary fails.
  REQUIRE(run("gen-data --out " + tmp.file("other.txt") +
              " --n 40 --grid 4 --seed 3") == 0);
  CHECK(run("eval --checkpoint " + ckpt + " --data " + tmp.file("other.txt"),
            tmp.file("mismatch_log.txt")) == 1);
  CHECK(slurp(tmp.file("mismatch_log.txt")).find("vocabulary mismatch") !=
        std::string::npos);
}

TEST_CASE("train rejects configs with unknown keys") {
  TempDir tmp;
  REQUIRE(run("gen-data --out " + tmp.file("ds.txt") +
              " --n 40 --grid 2 --seed 1") == 0);
  std::string cfg = tmp.file("bad_cfg.json");
  {
    std::ofstream out(cfg);
    out << R"({"trian": {"epochs": 1}})";
  }
  std::string log = tmp.file("log.txt");
  CHECK(run("train --config " + cfg + " --data " + tmp.file("ds.txt") +
            " --out " + tmp.file("run"), log) == 1);
  CHECK(slurp(log).find("unknown key") != std::string::npos);
}

TEST_CASE("gradcheck prints one PASS line per check and exits 0") {
  TempDir tmp;
  std::string log = tmp.file("gc.txt");
  REQUIRE(run("gradcheck", log) == 0);
  std::string out = slurp(log);
  CHECK(out.find("all passed") != std::string::npos);
  CHECK(out.find("FAIL") == std::string::npos);
  std::size_t passes = 0;
  for (std::size_t pos = 0; (pos = out.find("PASS", pos)) != std::string::npos;
       ++pos)
    ++passes;
  CHECK(passes >= 10);  // one per checked operation or block
}
