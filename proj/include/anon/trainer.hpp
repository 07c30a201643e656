#pragma once

// Training drivers: identity pretraining of the adapter, adversarial
// anonymization training (adapter vs. task heads), and head training on
// frozen (anonymized) features.

#include "anon/adapter.hpp"
#include "anon/encoder.hpp"
#include "anon/errors.hpp"
#include "anon/featurestore.hpp"
#include "anon/heads.hpp"
#include "anon/losses.hpp"
#include "anon/nn.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace anon {

// ---- identity pretraining -------------------------------------------------------

struct PretrainConfig {
  int epochs = 40;
  int batch_size = 32;  // clips
  double lr = 1e-2;
  double min_lr = 1e-6;  // cosine decay floor
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  void validate() const;
};

struct PretrainReport {
  std::vector<double> loss_history;  // per-epoch mean |f(h) - h|
  double holdout_mae = 0;
  long steps = 0;
};

// Trains `adapter` toward f(h) = h under an L1 loss on every stored clip
// (temporal and static) of `train`; reports the held-out mean absolute error.
PretrainReport pretrain_identity(Adapter<float>& adapter, const std::vector<const FeatureTable*>& train,
                                 const FeatureTable* holdout, const PretrainConfig& cfg);

// Mean |f(h) - h| over every stored clip of `table`.
double identity_mae(const Adapter<float>& adapter, const FeatureTable& table);

// ---- learning-rate plateau rule ------------------------------------------------------

// Replays `history` (one loss per epoch, lower is better): a reduction fires
// once `patience` epochs pass without a new best, after which the count
// restarts. Returns current_lr * factor if a reduction fires on the last
// entry, else current_lr.
double plateau_scheduler(const std::vector<double>& history, double current_lr, int patience, double factor = 0.2);

// ---- anonymization training ----------------------------------------------------------

struct TrainConfig {
  int epochs = 100;
  int batch_size = 32;  // action videos per step
  int tad_batch = 4;    // detection videos per step
  int ad_batch = 8;     // anomaly videos per step (half normal, half anomalous)
  double lr_adapter = 1e-4;
  double lr_ar = 1e-4;
  double lr_tad = 1e-4;
  double lr_ad = 1e-4;
  double weight_decay = 0.01;
  LossWeights weights;
  TaskMask tasks{true, false, false};
  bool allow_no_task = false;      // no-utility ablation
  bool include_positive = false;   // budget denominator variant
  bool lc_on_static = false;       // also anchor static-clip features
  double budget_grad_clip = 10.0;  // <= 0 disables
  int plateau_patience = 10;
  double plateau_factor = 0.2;
  bool per_epoch_literal = false;  // one adapter step and one head step per epoch
  int checkpoint_every = 0;        // epochs; 0 disables
  std::filesystem::path checkpoint_dir;
  std::filesystem::path log_path;  // per-epoch JSON lines; empty disables
  int max_bad_steps = 3;
  int head_hidden = 64;
  std::uint64_t seed = 0;
  void validate() const;
};

struct TaskData {
  const FeatureTable* ar = nullptr;
  const FeatureTable* tad = nullptr;
  const FeatureTable* ad = nullptr;
  int ar_classes = 0;
  int tad_classes = 0;
};

struct EpochRecord {
  int epoch = 0;
  LossBundle losses;  // means over the epoch's steps
  double lr_adapter = 0, lr_ar = 0, lr_tad = 0, lr_ad = 0;
  double seconds = 0;
  int steps = 0;
};

struct TrainState {
  explicit TrainState(Adapter<float> a) : adapter(std::move(a)) {}

  int epoch = 0;
  long step = 0;
  Adapter<float> adapter;
  std::optional<Head<float>> ar_head, tad_head, ad_head;
  std::vector<EpochRecord> history;
  std::uint64_t seed = 0;  // every random draw derives from (seed, step / epoch)
  std::string encoder_fingerprint;
};

enum class Phase { kAdapter, kArHead, kTadHead, kAdHead };
std::string to_string(Phase p);

struct TrainHooks {
  // Called before and after every optimizer phase of every step.
  std::function<void(Phase, bool after, const TrainState&)> on_phase;
  std::function<void(const TrainState&, const EpochRecord&)> on_epoch;
};

// `encoder` may be null when only stored features are available; otherwise
// its fingerprint must match every manifest and is re-checked at each epoch
// boundary.
TrainState train_anonymization(const TrainConfig& cfg, Adapter<float> initial, const TaskData& data,
                               const FrozenEncoder* encoder, const TrainHooks& hooks = {});

// Adapter, heads (head_ar, head_tad, head_ad) and state.json under `dir`.
void save_train_state(const std::filesystem::path& dir, const TrainState& st);

// ---- heads on frozen features ----------------------------------------------------------

struct DownstreamConfig {
  HeadConfig head;
  int epochs = 100;
  int batch_size = 64;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  Pooling pooling = Pooling::kMean;
  bool standardize = true;  // action and probe heads: per-dimension z-scoring folded into the first layer
  TadOptions tad;
  AdOptions ad;
  std::uint64_t seed = 0;
  void validate() const;
};

// Trains a fresh head of kind cfg.head.kind on features of `train`, passed
// through `adapter` when non-null. Action heads see every temporal clip,
// the privacy probe every static clip, detection and anomaly heads whole
// videos.
Head<float> train_downstream(const Adapter<float>* adapter, const FeatureTable& train, const DownstreamConfig& cfg);

}  // namespace anon
