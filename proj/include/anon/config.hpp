#pragma once

// Run configuration for the command-line pipeline: one JSON document with a
// section per stage. Unknown keys are rejected at every level; `--set
// a.b=value` overrides are applied on top of the file before validation.

#include "anon/adapter.hpp"
#include "anon/datagen.hpp"
#include "anon/encoder.hpp"
#include "anon/errors.hpp"
#include "anon/evalsuite.hpp"
#include "anon/trainer.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace anon {

struct WorldSection {
  int height = 16, width = 16, channels = 3;
  int num_action_classes = 8;
  int num_private_attributes = 7;
  double leak_strength = 0.1;
  double identity_strength = 0.0;
  double motion_strength = 0.2;
  double noise = 0.03;
  std::uint64_t world_seed = 2024;
};

// The task of a corpus follows from its role name (see corpus_roles()).
struct CorpusSection {
  int num_videos = 0;
  int frames_per_video = 64;
  int num_subjects = 48;
  int first_subject = 0;
  double anomaly_fraction = 0.5;
  std::uint64_t seed = 1;
};

struct EncoderSection {
  int hidden = 1536;
  int tokens = 8;
  int feature_dim = 64;
  double motion_gain = 50.0;
  std::uint64_t seed = 1234;
};

struct ExtractSection {
  int static_per_window = 2;
  std::uint64_t seed = 99;
};

struct AdapterSection {
  std::string variant = "self_attention";
  int depth = 3;
  int heads = 8;
  int ffn_multiplier = 4;
  double dropout_rate = 0.1;
  double attention_dropout_rate = 0.0;
  std::uint64_t seed = 5;
};

struct PretrainSection {
  int epochs = 40;
  int batch_size = 32;
  double lr = 1e-2;
  double min_lr = 1e-6;
  double weight_decay = 0.0;
  double max_holdout_mae = 1e-3;  // the command fails above this
};

struct TrainSection {
  int epochs = 300;
  int batch_size = 32;
  int tad_batch = 4;
  int ad_batch = 8;
  double lr_adapter = 3e-3;
  double lr_ar = 1e-3;
  double lr_tad = 1e-3;
  double lr_ad = 1e-3;
  double weight_decay = 0.01;
  LossWeights weights;
  std::vector<std::string> tasks{"ar"};
  bool allow_no_task = false;
  bool include_positive = false;
  bool lc_on_static = false;
  double budget_grad_clip = 10.0;
  int plateau_patience = 50;
  double plateau_factor = 0.2;
  bool per_epoch_literal = false;
  int checkpoint_every = 0;
  int max_bad_steps = 3;
  int head_hidden = 64;
};

struct HeadSection {
  int epochs = 100;
  int batch_size = 64;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  int hidden = 64;
  bool standardize = true;
};

struct EvalSection {
  std::string adapter = "train";  // train | pretrain | none
  bool include_raw = true;        // also report raw-feature metrics
  int clips_per_video = 5;
  std::string pooling = "mean";
  bool linear_probe = false;
  HeadSection ar{100, 64, 1e-2, 1e-4, 64, true};
  HeadSection probe{100, 64, 1e-3, 1e-4, 64, true};
  HeadSection tad{60, 8, 1e-3, 1e-4, 64, true};
  HeadSection ad{20, 16, 1e-3, 1e-4, 64, true};
  std::vector<double> tiou{0.3, 0.5, 0.7};
  double score_threshold = 0.1;
  double nms_iou = 0.5;
  int gait_gallery_per_subject = 4;
};

struct BiasSection {
  double ratio = 0.95;
  int shortcut_action = -1;  // -1: drawn from the run seed
  bool floor_one = true;
  std::vector<std::string> orientations{"F", "M"};
};

struct TradeoffSection {
  // (budget weight, task weight) per run
  std::vector<std::vector<double>> weights{{0.0, 1.0}, {0.1, 1.0}, {1.0, 1.0}, {4.0, 1.0}};
  int epochs = 300;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "run";
  WorldSection world;
  std::map<std::string, CorpusSection> corpora;
  EncoderSection encoder;
  ExtractSection extract;
  AdapterSection adapter;
  PretrainSection pretrain;
  TrainSection train;
  EvalSection eval;
  BiasSection bias;
  TradeoffSection tradeoff;

  // The default toy pipeline.
  static RunConfig defaults();
  // Throws ConfigError on any invalid or inconsistent value.
  void validate() const;

  bool has_corpus(const std::string& role) const { return corpora.count(role) > 0; }
  CorpusConfig corpus(const std::string& role) const;
  EncoderConfig encoder_config() const;
  AdapterConfig adapter_config() const;
  PretrainConfig pretrain_config() const;
  TrainConfig train_config() const;
  DownstreamConfig head_config(HeadKind kind, int num_outputs) const;
  Pooling pooling() const;
};

// Known corpus role names and their tasks.
const std::map<std::string, CorpusTask>& corpus_roles();

nlohmann::json to_json(const RunConfig& cfg);
// Strict: every key must be known. Missing keys keep their defaults.
RunConfig run_config_from_json(const nlohmann::json& j);

// Defaults, then the file (if any, merged as a JSON merge patch: null
// removes a key), then each "dotted.path=value" override. The value is
// parsed as JSON when possible, else taken as a string.
RunConfig load_run_config(const std::filesystem::path& file, const std::vector<std::string>& overrides);
nlohmann::json apply_override(nlohmann::json j, const std::string& assignment);

}  // namespace anon
