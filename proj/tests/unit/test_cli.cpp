#include "doctest.h"

#include "support/tmpdir.hpp"

#include <json.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

using anon::testing::TempDir;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli {
 public:
  explicit Cli(const std::string& tag) : dir_(tag) {
    const char* bin = std::getenv("ANON_CLI");
    REQUIRE_MESSAGE(bin != nullptr, "ANON_CLI is not set");
    bin_ = bin;
    std::ofstream(config()) << tiny_config().dump(2);
  }

  fs::path root() const { return dir_.path(); }
  fs::path config() const { return dir_.path() / "tiny.json"; }

  Result run(const std::string& args) const {
    const fs::path o = dir_.path() / "stdout.txt", e = dir_.path() / "stderr.txt";
    const std::string cmd = "\"" + bin_ + "\" " + args + " > \"" + o.string() + "\" 2> \"" + e.string() + "\"";
    const int status = std::system(cmd.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(o);
    r.err = slurp(e);
    return r;
  }

  // Runs a subcommand with the tiny config against an output directory.
  Result stage(const std::string& cmd, const std::string& out, const std::string& extra = "") const {
    return run(cmd + " -q -c \"" + config().string() + "\" -o \"" + (root() / out).string() + "\" " + extra);
  }

  static json tiny_config() {
    json c = {
        {"encoder", {{"hidden", 128}, {"feature_dim", 16}, {"tokens", 4}}},
        {"adapter", {{"heads", 4}, {"depth", 1}}},
        {"pretrain", {{"epochs", 3}, {"max_holdout_mae", 10.0}}},
        {"train", {{"epochs", 2}, {"batch_size", 8}}},
        {"eval", {{"ar", {{"epochs", 3}}}, {"probe", {{"epochs", 3}}}}},
        {"corpora",
         {{"ar_train", {{"num_videos", 16}, {"num_subjects", 8}}},
          {"ar_test", {{"num_videos", 8}, {"num_subjects", 8}, {"first_subject", 8}}},
          {"privacy_train", {{"num_videos", 16}, {"num_subjects", 8}}},
          {"privacy_test", {{"num_videos", 8}, {"num_subjects", 8}}}}},
    };
    for (const char* role : {"anomaly_train", "anomaly_test", "tad_train", "tad_test", "gait", "bias_source", "bias_test"})
      c["corpora"][role] = nullptr;
    return c;
  }

 private:
  TempDir dir_;
  std::string bin_;
};

}  // namespace

TEST_CASE("bad configuration exits with code 2") {
  Cli cli("cli_config");
  const Result r = cli.stage("config", "x", "--set train.epoch=3");
  CHECK(r.code == 2);
  CHECK(r.err.find("unknown config key 'train.epoch'") != std::string::npos);
  CHECK(cli.stage("config", "x", "--set train.batch_size=1").code == 2);

  const Result ok = cli.stage("config", "x", "--set train.epochs=5");
  REQUIRE(ok.code == 0);
  const json shown = json::parse(ok.out);
  CHECK(shown["train"]["epochs"] == 5);
  CHECK(shown["encoder"]["hidden"] == 128);
  CHECK_FALSE(shown["corpora"].contains("gait"));
  CHECK(cli.run("").code != 0);
  CHECK(cli.run("frobnicate").code != 0);
}

TEST_CASE("stages report the artifact they are missing") {
  Cli cli("cli_missing");
  Result r = cli.stage("extract", "run");
  CHECK(r.code == 3);
  CHECK(r.err.find("anon gen") != std::string::npos);
  REQUIRE(cli.stage("gen", "run").code == 0);
  r = cli.stage("train", "run");
  CHECK(r.code == 3);
  CHECK(r.err.find("anon extract") != std::string::npos);
  REQUIRE(cli.stage("extract", "run").code == 0);
  r = cli.stage("train", "run");
  CHECK(r.code == 3);
  CHECK(r.err.find("anon pretrain") != std::string::npos);
  r = cli.stage("eval", "run");
  CHECK(r.code == 3);
  CHECK(r.err.find("anon train") != std::string::npos);
}

TEST_CASE("pipeline artifacts, snapshots and determinism") {
  Cli cli("cli_pipeline");
  for (const char* out : {"a", "b"}) {
    const Result r = cli.stage("pipeline", out);
    REQUIRE_MESSAGE(r.code == 0, r.err);
  }
  for (const char* stage : {"corpora", "features", "pretrain", "train", "eval"}) {
    CHECK(fs::exists(cli.root() / "a" / stage / "config.json"));
    CHECK(fs::exists(cli.root() / "a" / stage / "log.jsonl"));
  }
  const json snap = json::parse(slurp(cli.root() / "a" / "train" / "config.json"));
  CHECK(snap["train"]["epochs"] == 2);

  const json sa = json::parse(slurp(cli.root() / "a" / "train" / "summary.json"));
  const json sb = json::parse(slurp(cli.root() / "b" / "train" / "summary.json"));
  CHECK(sa["adapter_digest"] == sb["adapter_digest"]);
  CHECK(sa["adapter_checksum"] == sb["adapter_checksum"]);
  CHECK(sa["initial_adapter_digest"] != sa["adapter_digest"]);

  const json report = json::parse(slurp(cli.root() / "a" / "eval" / "report.json"));
  CHECK(report.contains("anonymized"));
  CHECK(report.contains("raw"));

  // Another seed trains a different adapter.
  REQUIRE(cli.stage("train", "a", "--set seed=1").code == 0);
  const json sc = json::parse(slurp(cli.root() / "a" / "train" / "summary.json"));
  CHECK(sc["adapter_digest"] != sa["adapter_digest"]);
}

TEST_CASE("features from another encoder abort with code 4") {
  Cli cli("cli_fingerprint");
  REQUIRE(cli.stage("gen", "run").code == 0);
  REQUIRE(cli.stage("extract", "run").code == 0);
  REQUIRE(cli.stage("pretrain", "run").code == 0);
  const Result r = cli.stage("train", "run", "--set encoder.seed=77");
  CHECK(r.code == 4);
  CHECK(r.err.find("fingerprint") != std::string::npos);
  // A corpus edit after extraction asks for regeneration instead.
  const Result s = cli.stage("train", "run", "--set corpora.ar_train.seed=5");
  CHECK(s.code == 3);
  CHECK(s.err.find("anon gen") != std::string::npos);
}
