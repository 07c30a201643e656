#include "doctest.h"

#include "anon/config.hpp"
#include "support/tmpdir.hpp"

#include <fstream>
#include <functional>

using namespace anon;
using anon::testing::TempDir;
using nlohmann::json;

namespace {

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

std::filesystem::path write(const TempDir& dir, const std::string& name, const std::string& text) {
  const auto p = dir.path() / name;
  std::ofstream(p) << text;
  return p;
}

}  // namespace

TEST_CASE("defaults validate and round-trip through JSON") {
  const RunConfig d = RunConfig::defaults();
  CHECK_NOTHROW(d.validate());
  const json j = to_json(d);
  CHECK(to_json(run_config_from_json(j)) == j);
  for (const auto& [role, task] : corpus_roles()) {
    REQUIRE(d.has_corpus(role));
    CHECK(d.corpus(role).task == task);
    CHECK(d.corpus(role).name == role);
  }
  // Sections feed the module configs.
  CHECK(d.encoder_config().feature_dim == d.encoder.feature_dim);
  CHECK(d.adapter_config().feature_dim == d.encoder.feature_dim);
  CHECK(d.pretrain_config().epochs == d.pretrain.epochs);
  CHECK(d.train_config().epochs == d.train.epochs);
  CHECK(d.train_config().tasks.ar);
  CHECK_FALSE(d.train_config().tasks.tad);
  CHECK(d.corpus("ar_train").leak_strength == d.world.leak_strength);
  CHECK(d.head_config(HeadKind::kLinearAR, 8).head.num_outputs == 8);
}

TEST_CASE("unknown keys are rejected with their full path") {
  json j = to_json(RunConfig::defaults());
  j["train"]["epoch"] = 3;
  CHECK(error_of([&] { run_config_from_json(j); }) == "unknown config key 'train.epoch'");
  j = to_json(RunConfig::defaults());
  j["eval"]["ar"]["speed"] = 1;
  CHECK(error_of([&] { run_config_from_json(j); }) == "unknown config key 'eval.ar.speed'");
  j = to_json(RunConfig::defaults());
  j["banana"] = true;
  CHECK(error_of([&] { run_config_from_json(j); }) == "unknown config key 'banana'");
  j = to_json(RunConfig::defaults());
  j["train"]["epochs"] = "ten";
  CHECK(error_of([&] { run_config_from_json(j); }).find("train.epochs") != std::string::npos);
  j = to_json(RunConfig::defaults());
  j["seed"] = -1;
  CHECK_THROWS_AS(run_config_from_json(j), ConfigError);
  j = to_json(RunConfig::defaults());
  j["corpora"]["ar_train"]["videos"] = 3;
  CHECK(error_of([&] { run_config_from_json(j); }) == "unknown config key 'corpora.ar_train.videos'");
}

TEST_CASE("overrides") {
  json j = to_json(RunConfig::defaults());
  j = apply_override(j, "train.epochs=7");
  j = apply_override(j, "output_dir=elsewhere");  // not JSON, taken as a string
  j = apply_override(j, "train.tasks=[\"ar\",\"tad\"]");
  j = apply_override(j, "train.weights.budget=0.5");
  const RunConfig c = run_config_from_json(j);
  CHECK(c.train.epochs == 7);
  CHECK(c.output_dir == "elsewhere");
  CHECK(c.train_config().tasks.tad);
  CHECK(c.train.weights.budget == 0.5);
  CHECK_THROWS_AS(apply_override(j, "novalue"), ConfigError);
  CHECK_THROWS_AS(apply_override(j, "=3"), ConfigError);
  CHECK_THROWS_AS(apply_override(j, "train..epochs=3"), ConfigError);
  CHECK_THROWS_AS(apply_override(j, "seed.x=3"), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(apply_override(j, "train.nope=1")), ConfigError);
}

TEST_CASE("config files merge over the defaults") {
  TempDir dir("config_files");
  const auto f = write(dir, "a.json", R"({"seed": 4, "train": {"epochs": 9}, "corpora": {"tradeoff_x": null, "gait": null}})");
  const RunConfig c = load_run_config(f, {"train.epochs=11"});
  CHECK(c.seed == 4);
  CHECK(c.train.epochs == 11);  // --set wins over the file
  CHECK(c.train.batch_size == RunConfig::defaults().train.batch_size);
  CHECK_FALSE(c.has_corpus("gait"));  // null deletes
  CHECK(c.has_corpus("ar_train"));
  CHECK_THROWS_AS(c.corpus("gait"), ConfigError);

  CHECK_THROWS_AS(load_run_config(write(dir, "b.json", "[1, 2]"), {}), ConfigError);
  CHECK_THROWS_AS(load_run_config(write(dir, "c.json", "{not json"), {}), ConfigError);
  CHECK_THROWS_AS(load_run_config(dir.path() / "absent.json", {}), ConfigError);
  CHECK_THROWS_AS(load_run_config(write(dir, "d.json", R"({"corpora": {"mystery": {}}})"), {}), ConfigError);
  CHECK(load_run_config({}, {}).seed == 0);
}

TEST_CASE("validation names the offending field") {
  auto fails = [](const std::string& set) { return error_of([&] { load_run_config({}, {set}); }); };
  CHECK(fails("train.batch_size=1").find("batch_size") != std::string::npos);
  CHECK(fails("eval.adapter=\"sometimes\"").find("eval.adapter") != std::string::npos);
  CHECK(fails("eval.tiou=[]").find("eval.tiou") != std::string::npos);
  CHECK(fails("eval.ar.lr=0").find("eval.ar.lr") != std::string::npos);
  CHECK(fails("bias.ratio=1.0").find("bias.ratio") != std::string::npos);
  CHECK(fails("bias.shortcut_action=8").find("bias.shortcut_action") != std::string::npos);
  CHECK(fails("bias.orientations=[\"X\"]").find("bias.orientations") != std::string::npos);
  CHECK(fails("tradeoff.weights=[[1,1]]").find("tradeoff.weights") != std::string::npos);
  CHECK(fails("tradeoff.weights=[[1,1],[1]]").find("tradeoff.weights") != std::string::npos);
  CHECK(fails("extract.static_per_window=0").find("static_per_window") != std::string::npos);
  CHECK(fails("adapter.heads=5").find("divisible") != std::string::npos);
  CHECK(fails("adapter.variant=\"conv\"") != "");
  CHECK(fails("eval.pooling=\"median\"") != "");
  CHECK(fails("train.tasks=[\"ar\",\"dance\"]") != "");
  CHECK(fails("train.tasks=[]").find("allow_no_task") != std::string::npos);
  CHECK(fails("corpora.ar_train.frames_per_video=40") != "");
  CHECK(fails("output_dir=\"\"") != "");
  CHECK(error_of([] { load_run_config({}, {"train.tasks=[]", "train.allow_no_task=true"}); }).empty());
}
