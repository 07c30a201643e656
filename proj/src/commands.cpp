#include "anon/commands.hpp"

#include "anon/checkpoint.hpp"
#include "anon/encoder.hpp"
#include "anon/evalsuite.hpp"
#include "anon/featurestore.hpp"
#include "anon/trainer.hpp"

#include "json_io.hpp"

#include <chrono>
#include <cmath>
#include <iostream>
#include <map>
#include <optional>

namespace anon {

namespace fs = std::filesystem;

void Logger::open_file(const fs::path& path) {
  fs::create_directories(path.parent_path());
  file_.close();
  file_.open(path, std::ios::trunc);
  if (!file_) throw IoError("cannot write " + path.string());
}

void Logger::event(const std::string& name, json fields) {
  json line = {{"event", name}};
  line.update(fields);
  const std::string text = line.dump();
  if (console_ != nullptr) *console_ << text << "\n" << std::flush;
  if (file_.is_open()) file_ << text << "\n" << std::flush;
}

namespace {

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

fs::path out(const RunConfig& cfg) { return fs::path(cfg.output_dir); }

// Creates the stage directory, snapshots the config and points the log file there.
fs::path begin_stage(const RunConfig& cfg, const std::string& stage, Logger& log) {
  const fs::path dir = out(cfg) / stage;
  fs::create_directories(dir);
  write_json_file(dir / "config.json", to_json(cfg));
  log.open_file(dir / "log.jsonl");
  log.event("start", {{"command", stage}, {"output", dir.string()}});
  return dir;
}

[[noreturn]] void missing(const fs::path& what, const std::string& producer) {
  throw MissingArtifact("missing " + what.string() + "; run `anon " + producer + "` first");
}

json corpus_config_json(const CorpusConfig& c) {
  return json{{"name", c.name},
              {"task", to_string(c.task)},
              {"num_videos", c.num_videos},
              {"frames_per_video", c.frames_per_video},
              {"height", c.height},
              {"width", c.width},
              {"channels", c.channels},
              {"num_action_classes", c.num_action_classes},
              {"num_private_attributes", c.num_private_attributes},
              {"num_subjects", c.num_subjects},
              {"first_subject", c.first_subject},
              {"leak_strength", c.leak_strength},
              {"identity_strength", c.identity_strength},
              {"motion_strength", c.motion_strength},
              {"noise", c.noise},
              {"anomaly_fraction", c.anomaly_fraction},
              {"world_seed", c.world_seed},
              {"seed", c.seed}};
}

CorpusConfig corpus_config_from(const json& j) {
  CorpusConfig c;
  c.name = j.at("name").get<std::string>();
  c.task = corpus_task_from_string(j.at("task").get<std::string>());
  c.num_videos = j.at("num_videos").get<int>();
  c.frames_per_video = j.at("frames_per_video").get<int>();
  c.height = j.at("height").get<int>();
  c.width = j.at("width").get<int>();
  c.channels = j.at("channels").get<int>();
  c.num_action_classes = j.at("num_action_classes").get<int>();
  c.num_private_attributes = j.at("num_private_attributes").get<int>();
  c.num_subjects = j.at("num_subjects").get<int>();
  c.first_subject = j.at("first_subject").get<int>();
  c.leak_strength = j.at("leak_strength").get<double>();
  c.identity_strength = j.at("identity_strength").get<double>();
  c.motion_strength = j.at("motion_strength").get<double>();
  c.noise = j.at("noise").get<double>();
  c.anomaly_fraction = j.at("anomaly_fraction").get<double>();
  c.world_seed = j.at("world_seed").get<std::uint64_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

// What a feature set was extracted from.
json feature_source(const RunConfig& cfg, const CorpusConfig& corpus) {
  return json{{"corpus", corpus_config_json(corpus)},
              {"static_per_window", cfg.extract.static_per_window},
              {"seed", cfg.extract.seed}};
}

fs::path corpus_path(const RunConfig& cfg, const std::string& role) { return out(cfg) / "corpora" / (role + ".json"); }
fs::path features_root(const RunConfig& cfg) { return out(cfg) / "features"; }

// The stored corpus, refusing one generated under a different configuration.
Corpus stored_corpus(const RunConfig& cfg, const std::string& role) {
  const fs::path path = corpus_path(cfg, role);
  if (!fs::exists(path)) missing(path, "gen");
  Corpus c = load_corpus(path);
  if (corpus_config_json(c.config) != corpus_config_json(cfg.corpus(role)))
    throw MissingArtifact("corpus '" + role + "' on disk was generated with a different configuration; rerun `anon gen`");
  return c;
}

FeatureTable stored_table(const RunConfig& cfg, const std::string& role, const FrozenEncoder& encoder) {
  const fs::path dir = features_root(cfg) / role;
  if (!fs::exists(dir / "manifest.json")) missing(dir / "manifest.json", "extract");
  if (read_json_file(dir / "source.json") != feature_source(cfg, cfg.corpus(role)))
    throw MissingArtifact("features of '" + role + "' are stale; rerun `anon gen` and `anon extract`");
  FeatureManifest m = load_manifest(features_root(cfg), role);
  check_fingerprint(m, encoder.fingerprint());
  return FeatureTable::load(m);
}

void require_corpus(const RunConfig& cfg, const std::string& role, const std::string& why) {
  if (!cfg.has_corpus(role)) throw ConfigError(why + " needs corpus '" + role + "' in the config");
}

Adapter<float> stored_adapter(const RunConfig& cfg, const std::string& stage) {
  const fs::path dir = out(cfg) / stage;
  if (!checkpoint_exists(dir, "adapter")) missing(dir / "adapter.json", stage);
  Adapter<float> a = load_adapter(dir);
  if (a.config().feature_dim != cfg.encoder.feature_dim)
    throw ConfigError("adapter in " + dir.string() + " has feature dim " + std::to_string(a.config().feature_dim) +
                      ", the encoder produces " + std::to_string(cfg.encoder.feature_dim));
  return a;
}

json privacy_json(const PrivacyResult& p) {
  return json{{"cmap", p.cmap}, {"accuracy", p.accuracy}, {"chance", p.chance}};
}

json bias_json(const BiasGap& g) {
  return json{{"acc_female", g.acc_female}, {"acc_male", g.acc_male}, {"overall", g.overall}, {"gap", g.gap}};
}

// Metrics of every protocol whose corpora are configured.
json evaluate(const RunConfig& cfg, std::map<std::string, FeatureTable>& tables, const Adapter<float>* adapter,
              Logger& log, const std::string& tag) {
  json r = json::object();
  auto has = [&](const std::string& role) { return tables.count(role) > 0; };
  const int classes = cfg.world.num_action_classes;
  std::optional<double> top1, cmap;
  if (has("ar_train") && has("ar_test")) {
    const Head<float> head = train_downstream(adapter, tables.at("ar_train"), cfg.head_config(HeadKind::kLinearAR, classes));
    top1 = eval_top1(head, tables.at("ar_test"), adapter, cfg.eval.clips_per_video, cfg.pooling());
    r["ar_top1"] = *top1;
  }
  if (has("privacy_train") && has("privacy_test")) {
    const Head<float> probe = train_downstream(adapter, tables.at("privacy_train"),
                                               cfg.head_config(HeadKind::kPrivacyProbe, cfg.world.num_private_attributes));
    const PrivacyResult p = eval_privacy(probe, tables.at("privacy_test"), adapter, cfg.pooling());
    for (const auto& w : p.warnings) log.event("warning", {{"message", w}});
    r["privacy"] = privacy_json(p);
    cmap = p.cmap;
  }
  if (top1 && cmap) r["combined"] = combined_score(*top1, *cmap);
  if (has("anomaly_train") && has("anomaly_test")) {
    const Head<float> head = train_downstream(adapter, tables.at("anomaly_train"), cfg.head_config(HeadKind::kAD, 1));
    r["ad_auc"] = eval_ad_auc(head, tables.at("anomaly_test"), adapter);
  }
  if (has("tad_train") && has("tad_test")) {
    const Head<float> head = train_downstream(adapter, tables.at("tad_train"), cfg.head_config(HeadKind::kTAD, classes));
    TadDecodeOptions opt;
    opt.score_threshold = cfg.eval.score_threshold;
    opt.nms_iou = cfg.eval.nms_iou;
    const TadMapResult m = eval_tad_map(head, tables.at("tad_test"), adapter, cfg.eval.tiou, opt);
    for (const auto& w : m.warnings) log.event("warning", {{"message", w}});
    json per = json::object();
    for (std::size_t i = 0; i < m.thresholds.size(); ++i) per[std::to_string(m.thresholds[i])] = m.map_at[i];
    r["tad"] = {{"map_at", per}, {"mean_map", m.mean_map}};
  }
  if (has("gait")) r["gait_top1"] = eval_gait_retrieval(tables.at("gait"), adapter, cfg.eval.gait_gallery_per_subject);
  log.event("metrics", {{"features", tag}, {"metrics", r}});
  return r;
}

std::optional<Adapter<float>> eval_adapter(const RunConfig& cfg, std::string& id) {
  if (cfg.eval.adapter == "none") {
    id = "none";
    return std::nullopt;
  }
  Adapter<float> a = stored_adapter(cfg, cfg.eval.adapter);
  id = cfg.eval.adapter + ":" + file_digest(out(cfg) / cfg.eval.adapter / "adapter.bin");
  return a;
}

}  // namespace

void save_corpus(const fs::path& path, const Corpus& corpus) {
  json videos = json::array();
  for (const auto& v : corpus.videos) videos.push_back(to_json(v));
  write_json_file(path, json{{"config", corpus_config_json(corpus.config)}, {"videos", videos}});
}

Corpus load_corpus(const fs::path& path) {
  const json j = read_json_file(path);
  Corpus c;
  try {
    c.config = corpus_config_from(j.at("config"));
    for (const auto& v : j.at("videos")) c.videos.push_back(video_from_json(v));
  } catch (const json::exception& e) {
    throw IoError("malformed corpus " + path.string() + ": " + e.what());
  }
  return c;
}

json cmd_gen(const RunConfig& cfg, Logger& log) {
  cfg.validate();
  const fs::path dir = begin_stage(cfg, "corpora", log);
  json summary = json::object();
  for (const auto& [role, section] : cfg.corpora) {
    const CorpusConfig cc = cfg.corpus(role);
    for (const auto& w : cc.validate()) log.event("warning", {{"message", w}});
    const Corpus corpus = gen_synthetic_corpus(cc);
    save_corpus(dir / (role + ".json"), corpus);
    summary[role] = {{"videos", corpus.videos.size()}, {"task", to_string(cc.task)}};
    log.event("corpus", {{"role", role}, {"videos", corpus.videos.size()}});
  }
  write_json_file(dir / "summary.json", summary);
  return summary;
}

json cmd_extract(const RunConfig& cfg, Logger& log) {
  cfg.validate();
  std::map<std::string, Corpus> corpora;
  for (const auto& [role, section] : cfg.corpora) corpora.emplace(role, stored_corpus(cfg, role));
  const fs::path dir = begin_stage(cfg, "features", log);
  const FrozenEncoder encoder(cfg.encoder_config());
  json summary = {{"encoder_fingerprint", encoder.fingerprint()}, {"datasets", json::object()}};
  for (const auto& [role, corpus] : corpora) {
    const auto t0 = Clock::now();
    const FeatureManifest m =
        write_features(dir, role, encoder.fingerprint(), encode_corpus(encoder, corpus, cfg.extract.static_per_window, cfg.extract.seed));
    write_json_file(dir / role / "source.json", feature_source(cfg, corpus.config));
    summary["datasets"][role] = {{"videos", m.entries.size()}, {"clips", m.total_clips()}};
    log.event("features", {{"role", role}, {"videos", m.entries.size()}, {"clips", m.total_clips()},
                           {"seconds", seconds_since(t0)}});
  }
  write_json_file(dir / "summary.json", summary);
  return summary;
}

json cmd_pretrain(const RunConfig& cfg, Logger& log) {
  cfg.validate();
  require_corpus(cfg, "ar_train", "pretrain");
  const FrozenEncoder encoder(cfg.encoder_config());
  const FeatureTable train = stored_table(cfg, "ar_train", encoder);
  std::optional<FeatureTable> holdout;
  if (cfg.has_corpus("ar_test")) holdout = stored_table(cfg, "ar_test", encoder);
  const fs::path dir = begin_stage(cfg, "pretrain", log);
  Adapter<float> adapter(cfg.adapter_config());
  const auto t0 = Clock::now();
  const PretrainReport rep = pretrain_identity(adapter, {&train}, holdout ? &*holdout : nullptr, cfg.pretrain_config());
  const double mae = holdout ? rep.holdout_mae : identity_mae(adapter, train);
  save_adapter(dir, adapter);
  json summary = {{"holdout_mae", mae},
                  {"loss_history", rep.loss_history},
                  {"steps", rep.steps},
                  {"seconds", seconds_since(t0)},
                  {"adapter_digest", file_digest(dir / "adapter.bin")},
                  {"threshold", cfg.pretrain.max_holdout_mae}};
  write_json_file(dir / "report.json", summary);
  log.event("pretrained", {{"holdout_mae", mae}, {"seconds", seconds_since(t0)}});
  if (!(mae < cfg.pretrain.max_holdout_mae))
    throw DomainError("identity pretraining reached held-out MAE " + std::to_string(mae) + ", above the threshold " +
                      std::to_string(cfg.pretrain.max_holdout_mae));
  return summary;
}

json cmd_train(const RunConfig& cfg, Logger& log) {
  cfg.validate();
  TrainConfig tc = cfg.train_config();
  const FrozenEncoder encoder(cfg.encoder_config());
  std::optional<FeatureTable> ar, tad, ad;
  if (tc.tasks.ar || tc.allow_no_task) {
    require_corpus(cfg, "ar_train", "train");
    ar = stored_table(cfg, "ar_train", encoder);
  }
  if (tc.tasks.tad) {
    require_corpus(cfg, "tad_train", "train with task tad");
    tad = stored_table(cfg, "tad_train", encoder);
  }
  if (tc.tasks.ad) {
    require_corpus(cfg, "anomaly_train", "train with task ad");
    ad = stored_table(cfg, "anomaly_train", encoder);
  }
  Adapter<float> initial = stored_adapter(cfg, "pretrain");
  const std::string pretrain_digest = file_digest(out(cfg) / "pretrain" / "adapter.bin");
  const fs::path dir = begin_stage(cfg, "train", log);
  tc.log_path = dir / "epochs.jsonl";
  tc.checkpoint_dir = dir / "checkpoints";
  TaskData data;
  data.ar = ar ? &*ar : nullptr;
  data.tad = tad ? &*tad : nullptr;
  data.ad = ad ? &*ad : nullptr;
  data.ar_classes = cfg.world.num_action_classes;
  data.tad_classes = cfg.world.num_action_classes;
  TrainHooks hooks;
  hooks.on_epoch = [&](const TrainState&, const EpochRecord& r) {
    if (r.epoch == 1 || r.epoch % 25 == 0 || r.epoch == tc.epochs)
      log.event("epoch", {{"epoch", r.epoch}, {"budget", r.losses.budget}, {"lc", r.losses.lc}, {"ar", r.losses.ar},
                          {"total", r.losses.total}, {"lr_adapter", r.lr_adapter}});
  };
  const auto t0 = Clock::now();
  const TrainState st = train_anonymization(tc, std::move(initial), data, &encoder, hooks);
  save_train_state(dir, st);
  json summary = {{"epochs", st.epoch},
                  {"steps", st.step},
                  {"seconds", seconds_since(t0)},
                  {"initial_adapter_digest", pretrain_digest},
                  {"adapter_digest", file_digest(dir / "adapter.bin")},
                  {"adapter_checksum", st.adapter.checksum()},
                  {"encoder_fingerprint", encoder.fingerprint()}};
  if (!st.history.empty()) {
    const auto& l = st.history.back().losses;
    summary["final"] = {{"budget", l.budget}, {"lc", l.lc}, {"ar", l.ar}, {"total", l.total}};
  }
  write_json_file(dir / "summary.json", summary);
  log.event("trained", summary);
  return summary;
}

json cmd_eval(const RunConfig& cfg, Logger& log) {
  cfg.validate();
  const FrozenEncoder encoder(cfg.encoder_config());
  std::map<std::string, FeatureTable> tables;
  for (const char* role : {"ar_train", "ar_test", "privacy_train", "privacy_test", "anomaly_train", "anomaly_test",
                           "tad_train", "tad_test", "gait"})
    if (cfg.has_corpus(role)) tables.emplace(role, stored_table(cfg, role, encoder));
  std::string id;
  const std::optional<Adapter<float>> adapter = eval_adapter(cfg, id);
  const fs::path dir = begin_stage(cfg, "eval", log);
  const auto t0 = Clock::now();
  json report = {{"adapter_checkpoint", id}, {"seed", cfg.seed}};
  report["anonymized"] = evaluate(cfg, tables, adapter ? &*adapter : nullptr, log, adapter ? "anonymized" : "raw");
  if (cfg.eval.include_raw && adapter) report["raw"] = evaluate(cfg, tables, nullptr, log, "raw");
  report["seconds"] = seconds_since(t0);
  write_json_file(dir / "report.json", report);
  return report;
}

json cmd_bias(const RunConfig& cfg, Logger& log) {
  cfg.validate();
  require_corpus(cfg, "bias_source", "bias");
  require_corpus(cfg, "bias_test", "bias");
  const Corpus source = stored_corpus(cfg, "bias_source");
  const Corpus test = stored_corpus(cfg, "bias_test");
  std::string id;
  const std::optional<Adapter<float>> adapter = eval_adapter(cfg, id);
  const fs::path dir = begin_stage(cfg, "bias", log);
  const FrozenEncoder encoder(cfg.encoder_config());
  const int classes = cfg.world.num_action_classes;
  Rng rng(Rng::mix(cfg.seed, 0xB1A5));
  const int shortcut =
      cfg.bias.shortcut_action >= 0 ? cfg.bias.shortcut_action : static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));

  const Corpus balanced = balance_by_gender(source, cfg.seed);
  const Corpus balanced_test = balance_by_gender(test, cfg.seed + 1);
  const fs::path feat = dir / "features";
  auto encode = [&](const Corpus& c, const std::string& name) {
    save_corpus(dir / "corpora" / (name + ".json"), c);
    return FeatureTable::load(write_features(feat, name, encoder.fingerprint(),
                                             encode_corpus(encoder, c, cfg.extract.static_per_window, cfg.extract.seed)));
  };
  const FeatureTable test_table = encode(balanced_test, "bias_test_balanced");
  json report = {{"adapter_checkpoint", id}, {"shortcut_action", shortcut}, {"ratio", cfg.bias.ratio},
                 {"seed", cfg.seed}, {"protocols", json::object()}};
  for (const auto& o : cfg.bias.orientations) {
    BiasProtocolSpec spec;
    spec.shortcut_action = shortcut;
    spec.favored_gender = o == "F" ? Gender::kMale : Gender::kFemale;
    spec.ratio = cfg.bias.ratio;
    spec.floor_one = cfg.bias.floor_one;
    spec.seed = cfg.seed;
    const Corpus biased = build_bias_protocol(balanced, spec);
    const std::string name = "bias_" + o;
    const FeatureTable train = encode(biased, name);
    json counts = json::array();
    for (int a = 0; a < classes; ++a) {
      int f = 0, m = 0;
      for (const auto& v : biased.videos)
        if (v.action == a) (v.gender == Gender::kMale ? m : f)++;
      counts.push_back({{"action", a}, {"female", f}, {"male", m}});
    }
    json entry = {{"videos", biased.videos.size()}, {"counts", counts}};
    const DownstreamConfig hc = cfg.head_config(HeadKind::kLinearAR, classes);
    entry["raw"] = bias_json(eval_bias_gap(train_downstream(nullptr, train, hc), test_table, nullptr, cfg.eval.clips_per_video));
    if (adapter)
      entry["anonymized"] = bias_json(
          eval_bias_gap(train_downstream(&*adapter, train, hc), test_table, &*adapter, cfg.eval.clips_per_video));
    log.event("protocol", {{"name", name}, {"result", entry}});
    report["protocols"][name] = entry;
  }
  write_json_file(dir / "report.json", report);
  return report;
}

json cmd_tradeoff(const RunConfig& cfg, Logger& log) {
  cfg.validate();
  for (const char* role : {"ar_train", "ar_test", "privacy_train", "privacy_test"}) require_corpus(cfg, role, "tradeoff");
  const FrozenEncoder encoder(cfg.encoder_config());
  std::map<std::string, FeatureTable> tables;
  for (const char* role : {"ar_train", "ar_test", "privacy_train", "privacy_test"})
    tables.emplace(role, stored_table(cfg, role, encoder));
  const Adapter<float> initial = stored_adapter(cfg, "pretrain");
  const fs::path dir = begin_stage(cfg, "tradeoff", log);
  std::vector<TradeoffRun> runs;
  json entries = json::array();
  const int classes = cfg.world.num_action_classes;
  for (std::size_t i = 0; i < cfg.tradeoff.weights.size(); ++i) {
    TrainConfig tc = cfg.train_config();
    tc.epochs = cfg.tradeoff.epochs;
    tc.weights.budget = cfg.tradeoff.weights[i][0];
    tc.weights.task = cfg.tradeoff.weights[i][1];
    tc.tasks = {true, false, false};
    const fs::path run_dir = dir / ("run_" + std::to_string(i));
    tc.log_path = run_dir / "epochs.jsonl";
    TaskData data;
    data.ar = &tables.at("ar_train");
    data.ar_classes = classes;
    const TrainState st = train_anonymization(tc, initial, data, &encoder);
    save_adapter(run_dir, st.adapter);
    const Head<float> head = train_downstream(&st.adapter, tables.at("ar_train"), cfg.head_config(HeadKind::kLinearAR, classes));
    const double acc = eval_top1(head, tables.at("ar_test"), &st.adapter, cfg.eval.clips_per_video, cfg.pooling());
    const Head<float> probe = train_downstream(&st.adapter, tables.at("privacy_train"),
                                               cfg.head_config(HeadKind::kPrivacyProbe, cfg.world.num_private_attributes));
    const PrivacyResult p = eval_privacy(probe, tables.at("privacy_test"), &st.adapter, cfg.pooling());
    runs.push_back({tc.weights.budget, tc.weights.task, acc, p.cmap});
    json e = {{"budget_weight", tc.weights.budget}, {"task_weight", tc.weights.task}, {"acc", acc},
              {"privacy", privacy_json(p)}, {"adapter_digest", file_digest(run_dir / "adapter.bin")}};
    log.event("run", e);
    entries.push_back(e);
  }
  const TradeoffCurve curve = tradeoff_curve(runs);
  for (const auto& w : curve.warnings) log.event("warning", {{"message", w}});
  json points = json::array();
  for (const auto& r : curve.points)
    points.push_back({{"budget_weight", r.budget_weight}, {"task_weight", r.task_weight}, {"acc", r.acc}, {"priv", r.priv}});
  json result = {{"runs", entries}, {"curve", points}, {"nhv", curve.nhv}, {"privacy_metric", "cmap"}};
  write_json_file(dir / "curve.json", result);
  write_text_file(dir / "curve.svg", tradeoff_svg(curve));
  log.event("curve", {{"nhv", curve.nhv}, {"points", points.size()}});
  return result;
}

const std::vector<std::pair<std::string, Command>>& commands() {
  static const std::vector<std::pair<std::string, Command>> list{
      {"gen", cmd_gen},   {"extract", cmd_extract}, {"pretrain", cmd_pretrain}, {"train", cmd_train},
      {"eval", cmd_eval}, {"bias", cmd_bias},       {"tradeoff", cmd_tradeoff},
  };
  return list;
}

}  // namespace anon
