// End-to-end tests for the otmatch command-line binary. The binary path
// arrives in the OTMATCH_BIN environment variable; every case works in its
// own scratch directory and drives the tool exactly as a user would.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"

namespace fs = std::filesystem;

namespace {

std::string binary_path() {
  const char* env = std::getenv("OTMATCH_BIN");
  REQUIRE_MESSAGE(env != nullptr, "OTMATCH_BIN must point at the CLI binary");
  return env;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("otmatch_cli_" + tag);
    fs::remove_all(path);
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

struct RunResult {
  int exit_code = -1;
  std::string out, err;
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

// Runs the binary with `args`, capturing exit code, stdout, and stderr.
RunResult run_cli(const TempDir& dir, const std::string& args) {
  const std::string out_file = dir.file("__stdout.txt");
  const std::string err_file = dir.file("__stderr.txt");
  const std::string cmd = binary_path() + " " + args + " > " + out_file +
                          " 2> " + err_file;
  const int status = std::system(cmd.c_str());
  RunResult result;
  result.exit_code = (status >= 0 && WIFEXITED(status))
                         ? WEXITSTATUS(status)
                         : -1;
  result.out = slurp(out_file);
  result.err = slurp(err_file);
  return result;
}

std::size_t count_lines(const std::string& text) {
  std::size_t lines = 0;
  for (const char c : text) lines += (c == '\n');
  return lines;
}

// Pulls the number following `"key":` out of a JSON-lines record.
double json_number(const std::string& text, const std::string& key) {
  const std::string needle = "\"" + key + "\":";
  const std::size_t pos = text.find(needle);
  REQUIRE(pos != std::string::npos);
  return std::stod(text.substr(pos + needle.size()));
}

std::string last_line(const std::string& text) {
  std::istringstream ss(text);
  std::string line, last;
  while (std::getline(ss, line)) {
    if (!line.empty()) last = line;
  }
  return last;
}

std::string gen_small_dataset(const TempDir& dir, const std::string& sub,
                              const std::string& extra = "") {
  const std::string out = (dir.path / sub).string();
  RunResult r = run_cli(
      dir, "gen-data --n 24 --latent 2 --dx 4 --dy 4 --sigma 0.05 --seed 5 "
           "--n-test 8 --out " + out + " " + extra);
  REQUIRE(r.exit_code == 0);
  return out + "/manifest.txt";
}

const std::string kCommonTrainArgs =
    " --metric mahalanobis --epsilon 0.1 --batch-size 8 "
    "--epochs 2 --lr 1e-3 --seed 3 --embedding-dim 3 --hidden-dim 8 "
    "--sinkhorn-iters 300 --sinkhorn-tol 1e-6";
const std::string kSmallTrainArgs = " --loss mltm" + kCommonTrainArgs;

}  // namespace

TEST_CASE("gen-data writes a minimal dataset directory deterministically") {
  TempDir dir("gen_data");
  const std::string args =
      "gen-data --n 16 --latent 2 --dx 3 --dy 3 --sigma 0.1 --seed 7 --out ";
  REQUIRE(run_cli(dir, args + (dir.path / "a").string()).exit_code == 0);
  REQUIRE(run_cli(dir, args + (dir.path / "b").string()).exit_code == 0);

  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(dir.path / "a")) {
    names.push_back(entry.path().filename().string());
  }
  std::sort(names.begin(), names.end());
  CHECK(names == std::vector<std::string>{"manifest.txt", "x.emb", "y.emb"});

  CHECK(slurp((dir.path / "a" / "x.emb").string()) ==
        slurp((dir.path / "b" / "x.emb").string()));
  CHECK(slurp((dir.path / "a" / "y.emb").string()) ==
        slurp((dir.path / "b" / "y.emb").string()));
  CHECK(slurp((dir.path / "a" / "manifest.txt").string()) ==
        slurp((dir.path / "b" / "manifest.txt").string()));
}

TEST_CASE("gen-data with test rows and noise writes the full file set") {
  TempDir dir("gen_noise");
  const std::string out = (dir.path / "ds").string();
  REQUIRE(run_cli(dir,
                  "gen-data --n 20 --latent 2 --dx 3 --dy 3 --sigma 0.1 "
                  "--seed 9 --n-test 6 --noise-ratio 0.4 --out " + out)
              .exit_code == 0);
  CHECK(fs::exists(out + "/x.emb"));
  CHECK(fs::exists(out + "/y.emb"));
  CHECK(fs::exists(out + "/test_x.emb"));
  CHECK(fs::exists(out + "/test_y.emb"));
  CHECK(fs::exists(out + "/alignment.txt"));
  CHECK(fs::exists(out + "/manifest.txt"));
}

TEST_CASE("gen-data rejects invalid sizes with a nonzero exit") {
  TempDir dir("gen_bad");
  CHECK(run_cli(dir, "gen-data --n 0 --out " + dir.file("x")).exit_code != 0);
  CHECK(run_cli(dir, "gen-data --n 16 --latent 0 --out " + dir.file("y"))
            .exit_code != 0);
}

TEST_CASE("train writes config, metrics, checkpoint, and report") {
  TempDir dir("train_basic");
  const std::string manifest = gen_small_dataset(dir, "ds");
  const std::string out = (dir.path / "run").string();
  const RunResult r = run_cli(
      dir, "train --data " + manifest + " --out " + out + kSmallTrainArgs);
  REQUIRE(r.exit_code == 0);
  CHECK(fs::exists(out + "/config.txt"));
  CHECK(fs::exists(out + "/checkpoint.mltm"));
  CHECK(fs::exists(out + "/report.json"));
  REQUIRE(fs::exists(out + "/metrics.jsonl"));

  const std::string metrics = slurp(out + "/metrics.jsonl");
  CHECK(count_lines(metrics) == 2);  // one record per epoch
  CHECK(json_number(last_line(metrics), "epoch") == 2.0);
  CHECK(json_number(last_line(metrics), "train_loss") > 0.0);

  const std::string report = slurp(out + "/report.json");
  CHECK(report.find("\"r1_a2t\"") != std::string::npos);
  CHECK(report.find("\"avg_r1\"") != std::string::npos);
  CHECK(report.find("\"modality_gap\"") != std::string::npos);
}

TEST_CASE("train rejects a non-positive epsilon with a nonzero exit") {
  TempDir dir("train_bad_eps");
  const std::string manifest = gen_small_dataset(dir, "ds");
  CHECK(run_cli(dir, "train --data " + manifest + " --out " +
                         (dir.path / "run").string() +
                         " --loss mltm --epsilon 0")
            .exit_code != 0);
  CHECK(run_cli(dir, "train --data " + manifest + " --out " +
                         (dir.path / "run2").string() + " --loss nonsense")
            .exit_code != 0);
}

TEST_CASE("partial loss at full mass trains identically to the full loss") {
  TempDir dir("train_pot_full");
  const std::string manifest = gen_small_dataset(dir, "ds");
  const std::string out_full = (dir.path / "full").string();
  const std::string out_pot = (dir.path / "pot").string();
  REQUIRE(run_cli(dir, "train --data " + manifest + " --out " + out_full +
                           kSmallTrainArgs)
              .exit_code == 0);
  REQUIRE(run_cli(dir, "train --data " + manifest + " --out " + out_pot +
                           " --loss mltm-pot --mass 1.0" + kCommonTrainArgs)
              .exit_code == 0);
  const double full_loss =
      json_number(last_line(slurp(out_full + "/metrics.jsonl")), "train_loss");
  const double pot_loss =
      json_number(last_line(slurp(out_pot + "/metrics.jsonl")), "train_loss");
  CHECK(std::abs(full_loss - pot_loss) <= 1e-6 * std::max(1.0, full_loss));
}

TEST_CASE("the echoed config reproduces a run bit-for-bit") {
  TempDir dir("config_echo");
  const std::string manifest = gen_small_dataset(dir, "ds");
  const std::string out_a = (dir.path / "a").string();
  const std::string out_b = (dir.path / "b").string();
  REQUIRE(run_cli(dir, "train --data " + manifest + " --out " + out_a +
                           kSmallTrainArgs)
              .exit_code == 0);
  REQUIRE(run_cli(dir, "train --config " + out_a + "/config.txt --out " + out_b)
              .exit_code == 0);
  CHECK(slurp(out_a + "/metrics.jsonl") == slurp(out_b + "/metrics.jsonl"));
  CHECK(slurp(out_a + "/checkpoint.mltm") == slurp(out_b + "/checkpoint.mltm"));
  CHECK(slurp(out_a + "/report.json") == slurp(out_b + "/report.json"));
}

TEST_CASE("eval prints a report and appends CSV rows") {
  TempDir dir("eval_basic");
  const std::string manifest = gen_small_dataset(dir, "ds");
  const std::string out = (dir.path / "run").string();
  REQUIRE(run_cli(dir, "train --data " + manifest + " --out " + out +
                           kSmallTrainArgs)
              .exit_code == 0);

  const std::string csv = dir.file("results.csv");
  const std::string eval_args = "eval --ckpt " + out + "/checkpoint.mltm" +
                                " --data " + manifest + " --csv " + csv;
  const RunResult r1 = run_cli(dir, eval_args);
  REQUIRE(r1.exit_code == 0);
  CHECK(r1.out.find("\"r1_a2t\"") != std::string::npos);
  CHECK(r1.out.find("\"r10_t2a\"") != std::string::npos);
  const double r5 = json_number(r1.out, "r5_a2t");
  CHECK(json_number(r1.out, "r1_a2t") <= r5);
  CHECK(r5 <= json_number(r1.out, "r10_a2t"));

  const RunResult r2 = run_cli(dir, eval_args);
  REQUIRE(r2.exit_code == 0);
  const std::string csv_text = slurp(csv);
  CHECK(count_lines(csv_text) == 3);  // header + one row per eval
  CHECK(csv_text.rfind("checkpoint,r1_t2a,r1_a2t,avg_r1,modality_gap", 0) ==
        0);

  CHECK(run_cli(dir, "eval --ckpt " + dir.file("missing.mltm") + " --data " +
                         manifest)
            .exit_code != 0);
}

TEST_CASE("gradcheck passes at its default step and clamps extreme ones") {
  TempDir dir("gradcheck");
  // Default step 1e-5: every configuration agrees to well under tolerance.
  const std::string args = "gradcheck --coords 12";
  const RunResult r = run_cli(dir, args);
  REQUIRE(r.exit_code == 0);
  CHECK(r.err.empty());
  CHECK(r.out.find("PASS") != std::string::npos);
  CHECK(r.out.find("FAIL") == std::string::npos);

  const RunResult again = run_cli(dir, args);
  CHECK(again.out == r.out);  // fixed seed, identical report

  // Steps outside [1e-7, 1e-3] are clamped with a warning. The check still
  // runs and reports honestly; at the coarse boundary, truncation error (or
  // at the fine boundary, roundoff on near-zero gradient coordinates) may
  // legitimately fail a case, so only the clamp behavior is asserted.
  const RunResult coarse = run_cli(
      dir, "gradcheck --d 2 --coords 6 --seed 1 --mass 0.6 --h 1e-1");
  CHECK(coarse.err.find("warning") != std::string::npos);
  CHECK(coarse.err.find("clamping to 0.001") != std::string::npos);
  CHECK(coarse.out.find("max_rel_err") != std::string::npos);

  const RunResult fine = run_cli(
      dir, "gradcheck --d 2 --coords 6 --seed 1 --mass 0.6 --h 1e-9");
  CHECK(fine.err.find("clamping to 1e-07") != std::string::npos);
}

TEST_CASE("sweep writes one CSV data row per value") {
  TempDir dir("sweep");
  const std::string manifest = gen_small_dataset(dir, "ds");
  const std::string out = (dir.path / "sweep_out").string();
  const RunResult r = run_cli(
      dir, "sweep --axis epsilon --values 0.1 --data " + manifest + " --out " +
               out + kSmallTrainArgs);
  REQUIRE(r.exit_code == 0);
  REQUIRE(fs::exists(out + "/sweep.csv"));
  const std::string csv = slurp(out + "/sweep.csv");
  CHECK(count_lines(csv) == 2);  // header + the single value row
  CHECK(csv.rfind("value,", 0) == 0);
  CHECK(csv.find("\n0.1,") != std::string::npos);
  CHECK(fs::exists(out + "/run_epsilon_0.1/checkpoint.mltm"));
}

TEST_CASE("unknown subcommands and missing required flags fail loudly") {
  TempDir dir("usage");
  CHECK(run_cli(dir, "frobnicate").exit_code != 0);
  CHECK(run_cli(dir, "gen-data").exit_code != 0);       // --n is required
  CHECK(run_cli(dir, "train").exit_code != 0);          // --data/--out required
  CHECK(run_cli(dir, "sweep --axis epsilon").exit_code != 0);
}
