#include "anon/config.hpp"

#include "json_io.hpp"

#include <cmath>
#include <set>
#include <sstream>
#include <type_traits>

namespace anon {

namespace {

// One field list per section, shared by the reader and the writer.
template <class V> void fields(V& v, WorldSection& s) {
  v("height", s.height); v("width", s.width); v("channels", s.channels);
  v("num_action_classes", s.num_action_classes); v("num_private_attributes", s.num_private_attributes);
  v("leak_strength", s.leak_strength); v("identity_strength", s.identity_strength);
  v("motion_strength", s.motion_strength); v("noise", s.noise); v("world_seed", s.world_seed);
}
template <class V> void fields(V& v, CorpusSection& s) {
  v("num_videos", s.num_videos); v("frames_per_video", s.frames_per_video); v("num_subjects", s.num_subjects);
  v("first_subject", s.first_subject); v("anomaly_fraction", s.anomaly_fraction); v("seed", s.seed);
}
template <class V> void fields(V& v, EncoderSection& s) {
  v("hidden", s.hidden); v("tokens", s.tokens); v("feature_dim", s.feature_dim);
  v("motion_gain", s.motion_gain); v("seed", s.seed);
}
template <class V> void fields(V& v, ExtractSection& s) {
  v("static_per_window", s.static_per_window); v("seed", s.seed);
}
template <class V> void fields(V& v, AdapterSection& s) {
  v("variant", s.variant); v("depth", s.depth); v("heads", s.heads); v("ffn_multiplier", s.ffn_multiplier);
  v("dropout_rate", s.dropout_rate); v("attention_dropout_rate", s.attention_dropout_rate); v("seed", s.seed);
}
template <class V> void fields(V& v, PretrainSection& s) {
  v("epochs", s.epochs); v("batch_size", s.batch_size); v("lr", s.lr); v("min_lr", s.min_lr);
  v("weight_decay", s.weight_decay); v("max_holdout_mae", s.max_holdout_mae);
}
template <class V> void fields(V& v, LossWeights& s) {
  v("lc", s.lc); v("task", s.task); v("budget", s.budget); v("ar", s.ar); v("tad", s.tad); v("ad", s.ad);
  v("temperature", s.temperature); v("lambda_smooth", s.lambda_smooth); v("lambda_sparse", s.lambda_sparse);
  v("lambda_magnitude", s.lambda_magnitude); v("margin", s.margin);
}
template <class V> void fields(V& v, TrainSection& s) {
  v("epochs", s.epochs); v("batch_size", s.batch_size); v("tad_batch", s.tad_batch); v("ad_batch", s.ad_batch);
  v("lr_adapter", s.lr_adapter); v("lr_ar", s.lr_ar); v("lr_tad", s.lr_tad); v("lr_ad", s.lr_ad);
  v("weight_decay", s.weight_decay); v("weights", s.weights); v("tasks", s.tasks);
  v("allow_no_task", s.allow_no_task); v("include_positive", s.include_positive); v("lc_on_static", s.lc_on_static);
  v("budget_grad_clip", s.budget_grad_clip); v("plateau_patience", s.plateau_patience);
  v("plateau_factor", s.plateau_factor); v("per_epoch_literal", s.per_epoch_literal);
  v("checkpoint_every", s.checkpoint_every); v("max_bad_steps", s.max_bad_steps); v("head_hidden", s.head_hidden);
}
template <class V> void fields(V& v, HeadSection& s) {
  v("epochs", s.epochs); v("batch_size", s.batch_size); v("lr", s.lr); v("weight_decay", s.weight_decay);
  v("hidden", s.hidden); v("standardize", s.standardize);
}
template <class V> void fields(V& v, EvalSection& s) {
  v("adapter", s.adapter); v("include_raw", s.include_raw); v("clips_per_video", s.clips_per_video);
  v("pooling", s.pooling); v("linear_probe", s.linear_probe);
  v("ar", s.ar); v("probe", s.probe); v("tad", s.tad); v("ad", s.ad);
  v("tiou", s.tiou); v("score_threshold", s.score_threshold); v("nms_iou", s.nms_iou);
  v("gait_gallery_per_subject", s.gait_gallery_per_subject);
}
template <class V> void fields(V& v, BiasSection& s) {
  v("ratio", s.ratio); v("shortcut_action", s.shortcut_action); v("floor_one", s.floor_one);
  v("orientations", s.orientations);
}
template <class V> void fields(V& v, TradeoffSection& s) {
  v("weights", s.weights); v("epochs", s.epochs);
}
template <class V> void fields(V& v, RunConfig& s) {
  v("seed", s.seed); v("output_dir", s.output_dir); v("world", s.world); v("corpora", s.corpora);
  v("encoder", s.encoder); v("extract", s.extract); v("adapter", s.adapter); v("pretrain", s.pretrain);
  v("train", s.train); v("eval", s.eval); v("bias", s.bias); v("tradeoff", s.tradeoff);
}

template <class T> struct is_map : std::false_type {};
template <class V> struct is_map<std::map<std::string, V>> : std::true_type {};

struct Writer {
  json out = json::object();
  template <class T> void operator()(const char* key, T& value) { out[key] = write(value); }

  template <class T> static json write(T& value) {
    if constexpr (is_map<T>::value) {
      json j = json::object();
      for (auto& [k, v] : value) j[k] = write(v);
      return j;
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      return value;
    } else if constexpr (std::is_arithmetic_v<T> || std::is_same_v<T, std::string> ||
                         std::is_same_v<T, std::vector<std::string>> || std::is_same_v<T, std::vector<double>> ||
                         std::is_same_v<T, std::vector<std::vector<double>>>) {
      return value;
    } else {
      Writer w;
      fields(w, value);
      return w.out;
    }
  }
};

struct Reader {
  const json& in;
  std::string path;
  std::set<std::string> known;

  template <class T> void operator()(const char* key, T& value) {
    known.insert(key);
    if (in.contains(key)) read(in.at(key), value, path.empty() ? key : path + "." + key);
  }

  void finish() const {
    for (auto it = in.begin(); it != in.end(); ++it)
      if (!known.count(it.key()))
        throw ConfigError("unknown config key '" + (path.empty() ? it.key() : path + "." + it.key()) + "'");
  }

  template <class T> static void read(const json& j, T& value, const std::string& where) {
    try {
      if constexpr (is_map<T>::value) {
        if (!j.is_object()) throw ConfigError("config key '" + where + "' must be an object");
        T result;
        for (auto it = j.begin(); it != j.end(); ++it) {
          typename T::mapped_type item{};
          if (auto found = value.find(it.key()); found != value.end()) item = found->second;
          read(it.value(), item, where + "." + it.key());
          result.emplace(it.key(), item);
        }
        value = std::move(result);
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!j.is_boolean()) throw ConfigError("config key '" + where + "' must be true or false");
        value = j.get<bool>();
      } else if constexpr (std::is_integral_v<T>) {
        if (!j.is_number_integer()) throw ConfigError("config key '" + where + "' must be an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (j.is_number_unsigned() || j.get<long long>() >= 0) value = j.get<T>();
          else throw ConfigError("config key '" + where + "' must be nonnegative");
        } else {
          value = j.get<T>();
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!j.is_number()) throw ConfigError("config key '" + where + "' must be a number");
        value = j.get<T>();
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!j.is_string()) throw ConfigError("config key '" + where + "' must be a string");
        value = j.get<T>();
      } else if constexpr (std::is_same_v<T, std::vector<std::string>> || std::is_same_v<T, std::vector<double>> ||
                           std::is_same_v<T, std::vector<std::vector<double>>>) {
        if (!j.is_array()) throw ConfigError("config key '" + where + "' must be an array");
        value = j.get<T>();
      } else {
        if (!j.is_object()) throw ConfigError("config key '" + where + "' must be an object");
        Reader r{j, where, {}};
        fields(r, value);
        r.finish();
      }
    } catch (const json::exception& e) {
      throw ConfigError("config key '" + where + "': " + e.what());
    }
  }
};

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

void check_head(const HeadSection& h, const std::string& name) {
  require(h.epochs >= 0, "eval." + name + ".epochs must be >= 0");
  require(h.batch_size >= 1, "eval." + name + ".batch_size must be >= 1");
  require(h.lr > 0 && std::isfinite(h.lr), "eval." + name + ".lr must be > 0");
  require(h.weight_decay >= 0, "eval." + name + ".weight_decay must be >= 0");
  require(h.hidden >= 1, "eval." + name + ".hidden must be >= 1");
}

}  // namespace

const std::map<std::string, CorpusTask>& corpus_roles() {
  static const std::map<std::string, CorpusTask> roles{
      {"ar_train", CorpusTask::kAction},       {"ar_test", CorpusTask::kAction},
      {"privacy_train", CorpusTask::kAction},  {"privacy_test", CorpusTask::kAction},
      {"anomaly_train", CorpusTask::kAnomaly}, {"anomaly_test", CorpusTask::kAnomaly},
      {"tad_train", CorpusTask::kDetection},   {"tad_test", CorpusTask::kDetection},
      {"gait", CorpusTask::kGait},             {"bias_source", CorpusTask::kAction},
      {"bias_test", CorpusTask::kAction},
  };
  return roles;
}

RunConfig RunConfig::defaults() {
  RunConfig c;
  // num_videos, frames, subjects, first subject, anomaly share, seed
  c.corpora["ar_train"] = {240, 64, 48, 0, 0.5, 1};
  c.corpora["ar_test"] = {80, 64, 48, 0, 0.5, 2};
  c.corpora["privacy_train"] = {192, 64, 64, 100, 0.5, 3};
  c.corpora["privacy_test"] = {96, 64, 32, 164, 0.5, 4};
  c.corpora["anomaly_train"] = {40, 128, 48, 200, 0.5, 5};
  c.corpora["anomaly_test"] = {40, 128, 48, 300, 0.5, 6};
  c.corpora["tad_train"] = {48, 128, 48, 700, 0.5, 10};
  c.corpora["tad_test"] = {24, 128, 48, 800, 0.5, 11};
  c.corpora["gait"] = {96, 64, 16, 400, 0.5, 7};
  c.corpora["bias_source"] = {320, 64, 64, 500, 0.5, 8};
  c.corpora["bias_test"] = {160, 64, 32, 600, 0.5, 9};
  return c;
}

CorpusConfig RunConfig::corpus(const std::string& role) const {
  const auto it = corpora.find(role);
  if (it == corpora.end()) throw ConfigError("config has no corpus '" + role + "'");
  const auto task = corpus_roles().find(role);
  if (task == corpus_roles().end()) throw ConfigError("unknown corpus role '" + role + "'");
  CorpusConfig c;
  c.name = role;
  c.task = task->second;
  c.num_videos = it->second.num_videos;
  c.frames_per_video = it->second.frames_per_video;
  c.height = world.height;
  c.width = world.width;
  c.channels = world.channels;
  c.num_action_classes = world.num_action_classes;
  c.num_private_attributes = world.num_private_attributes;
  c.num_subjects = it->second.num_subjects;
  c.first_subject = it->second.first_subject;
  c.leak_strength = world.leak_strength;
  c.identity_strength = world.identity_strength;
  c.motion_strength = world.motion_strength;
  c.noise = world.noise;
  c.anomaly_fraction = it->second.anomaly_fraction;
  c.world_seed = world.world_seed;
  c.seed = it->second.seed;
  return c;
}

EncoderConfig RunConfig::encoder_config() const {
  EncoderConfig e;
  e.height = world.height;
  e.width = world.width;
  e.channels = world.channels;
  e.hidden = encoder.hidden;
  e.tokens = encoder.tokens;
  e.feature_dim = encoder.feature_dim;
  e.motion_gain = encoder.motion_gain;
  e.seed = encoder.seed;
  return e;
}

AdapterConfig RunConfig::adapter_config() const {
  AdapterConfig a;
  a.variant = adapter_variant_from_string(adapter.variant);
  a.depth = adapter.depth;
  a.heads = adapter.heads;
  a.feature_dim = encoder.feature_dim;
  a.ffn_multiplier = adapter.ffn_multiplier;
  a.dropout_rate = adapter.dropout_rate;
  a.attention_dropout_rate = adapter.attention_dropout_rate;
  a.seed = adapter.seed;
  return a;
}

PretrainConfig RunConfig::pretrain_config() const {
  PretrainConfig p;
  p.epochs = pretrain.epochs;
  p.batch_size = pretrain.batch_size;
  p.lr = pretrain.lr;
  p.min_lr = pretrain.min_lr;
  p.weight_decay = pretrain.weight_decay;
  p.seed = seed;
  return p;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.epochs = train.epochs;
  t.batch_size = train.batch_size;
  t.tad_batch = train.tad_batch;
  t.ad_batch = train.ad_batch;
  t.lr_adapter = train.lr_adapter;
  t.lr_ar = train.lr_ar;
  t.lr_tad = train.lr_tad;
  t.lr_ad = train.lr_ad;
  t.weight_decay = train.weight_decay;
  t.weights = train.weights;
  t.tasks = {false, false, false};
  for (const auto& name : train.tasks) {
    if (name == "ar") t.tasks.ar = true;
    else if (name == "tad") t.tasks.tad = true;
    else if (name == "ad") t.tasks.ad = true;
    else throw ConfigError("train.tasks: unknown task '" + name + "' (expected ar, tad or ad)");
  }
  t.allow_no_task = train.allow_no_task;
  t.include_positive = train.include_positive;
  t.lc_on_static = train.lc_on_static;
  t.budget_grad_clip = train.budget_grad_clip;
  t.plateau_patience = train.plateau_patience;
  t.plateau_factor = train.plateau_factor;
  t.per_epoch_literal = train.per_epoch_literal;
  t.checkpoint_every = train.checkpoint_every;
  t.max_bad_steps = train.max_bad_steps;
  t.head_hidden = train.head_hidden;
  t.seed = seed;
  return t;
}

Pooling RunConfig::pooling() const {
  if (eval.pooling == "mean") return Pooling::kMean;
  if (eval.pooling == "max") return Pooling::kMax;
  throw ConfigError("eval.pooling must be mean or max");
}

DownstreamConfig RunConfig::head_config(HeadKind kind, int num_outputs) const {
  const HeadSection& h = kind == HeadKind::kLinearAR ? eval.ar
                         : kind == HeadKind::kPrivacyProbe ? eval.probe
                         : kind == HeadKind::kTAD ? eval.tad
                                                  : eval.ad;
  DownstreamConfig d;
  d.head.kind = kind;
  d.head.input_dim = encoder.feature_dim;
  d.head.num_outputs = kind == HeadKind::kAD ? 1 : num_outputs;
  d.head.hidden = h.hidden;
  d.head.linear_probe = eval.linear_probe;
  d.head.seed = seed;
  d.epochs = h.epochs;
  d.batch_size = h.batch_size;
  d.lr = h.lr;
  d.weight_decay = h.weight_decay;
  d.standardize = h.standardize;
  d.pooling = pooling();
  d.ad.lambda_smooth = train.weights.lambda_smooth;
  d.ad.lambda_sparse = train.weights.lambda_sparse;
  d.ad.lambda_magnitude = train.weights.lambda_magnitude;
  d.ad.margin = train.weights.margin;
  d.seed = seed;
  return d;
}

void RunConfig::validate() const {
  require(!output_dir.empty(), "output_dir must not be empty");
  for (const auto& [role, section] : corpora) {
    require(corpus_roles().count(role) > 0, "unknown corpus role '" + role + "'");
    corpus(role).validate();
  }
  const EncoderConfig enc = encoder_config();
  enc.validate();
  adapter_config().validate();
  require(extract.static_per_window >= 1, "extract.static_per_window must be >= 1");
  require(extract.static_per_window <= kClipFrames, "extract.static_per_window must be <= 16");
  pretrain_config().validate();
  require(pretrain.max_holdout_mae > 0, "pretrain.max_holdout_mae must be > 0");
  train_config().validate();
  for (const auto& [name, h] : std::map<std::string, HeadSection>{
           {"ar", eval.ar}, {"probe", eval.probe}, {"tad", eval.tad}, {"ad", eval.ad}})
    check_head(h, name);
  require(eval.adapter == "train" || eval.adapter == "pretrain" || eval.adapter == "none",
          "eval.adapter must be train, pretrain or none");
  require(eval.clips_per_video >= 1, "eval.clips_per_video must be >= 1");
  pooling();
  require(!eval.tiou.empty(), "eval.tiou must list at least one threshold");
  for (double t : eval.tiou) require(t > 0 && t <= 1, "eval.tiou thresholds must be in (0, 1]");
  require(eval.score_threshold >= 0 && eval.score_threshold < 1, "eval.score_threshold must be in [0, 1)");
  require(eval.nms_iou > 0 && eval.nms_iou <= 1, "eval.nms_iou must be in (0, 1]");
  require(eval.gait_gallery_per_subject >= 1, "eval.gait_gallery_per_subject must be >= 1");
  require(bias.ratio >= 0.5 && bias.ratio < 1, "bias.ratio must be in [0.5, 1)");
  require(bias.shortcut_action >= -1 && bias.shortcut_action < world.num_action_classes,
          "bias.shortcut_action must be -1 or a valid action class");
  require(!bias.orientations.empty(), "bias.orientations must not be empty");
  for (const auto& o : bias.orientations) require(o == "F" || o == "M", "bias.orientations entries must be F or M");
  require(tradeoff.weights.size() >= 2, "tradeoff.weights needs at least 2 runs");
  for (const auto& w : tradeoff.weights)
    require(w.size() == 2 && w[0] >= 0 && w[1] >= 0 && std::isfinite(w[0]) && std::isfinite(w[1]),
            "tradeoff.weights entries must be [budget, task] pairs of nonnegative numbers");
  require(tradeoff.epochs >= 0, "tradeoff.epochs must be >= 0");
}

json to_json(const RunConfig& cfg) {
  RunConfig copy = cfg;
  return Writer::write(copy);
}

RunConfig run_config_from_json(const json& j) {
  RunConfig cfg = RunConfig::defaults();
  Reader::read(j, cfg, "");
  return cfg;
}

json apply_override(json j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  json* node = &j;
  std::stringstream parts(key);
  std::string part;
  std::vector<std::string> path;
  while (std::getline(parts, part, '.')) {
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    path.push_back(part);
  }
  for (std::size_t i = 0; i + 1 < path.size(); ++i) {
    if (!node->is_object()) throw ConfigError("override key '" + key + "' descends into a non-object");
    node = &(*node)[path[i]];
    if (node->is_null()) *node = json::object();
  }
  if (!node->is_object()) throw ConfigError("override key '" + key + "' descends into a non-object");
  (*node)[path.back()] = value;
  return j;
}

RunConfig load_run_config(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
  json j = to_json(RunConfig::defaults());
  if (!file.empty()) {
    json patch;
    try {
      patch = read_json_file(file);
    } catch (const IoError& e) {
      throw ConfigError(e.what());
    }
    if (!patch.is_object()) throw ConfigError("config file " + file.string() + " must hold a JSON object");
    j.merge_patch(patch);
  }
  for (const auto& o : overrides) j = apply_override(std::move(j), o);
  RunConfig cfg = run_config_from_json(j);
  cfg.validate();
  return cfg;
}

}  // namespace anon
