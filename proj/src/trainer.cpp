#include "anon/trainer.hpp"

#include "anon/checkpoint.hpp"
#include "json_io.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace anon {

namespace {

using Clock = std::chrono::steady_clock;

Mat<float> stack(const std::vector<const Mat<float>*>& clips) {
  if (clips.empty()) throw ShapeError("no clips to stack");
  const Eigen::Index t = clips.front()->rows(), d = clips.front()->cols();
  Mat<float> x(static_cast<Eigen::Index>(clips.size()) * t, d);
  for (std::size_t i = 0; i < clips.size(); ++i) x.middleRows(static_cast<Eigen::Index>(i) * t, t) = *clips[i];
  return x;
}

bool grads_finite(const ParameterSet<float>& ps) {
  for (const auto& p : ps)
    if (!p.grad.allFinite()) return false;
  return true;
}

std::vector<Mat<float>> take_grads(ParameterSet<float>& ps) {
  std::vector<Mat<float>> g;
  for (auto& p : ps) g.push_back(p.grad);
  return g;
}

void add_grads(ParameterSet<float>& ps, const std::vector<Mat<float>>& g) {
  std::size_t i = 0;
  for (auto& p : ps) p.grad += g[i++];
}

// Identical rows: a static clip encoded by the frozen encoder.
bool rows_identical(const Mat<float>& m) {
  for (Eigen::Index r = 1; r < m.rows(); ++r)
    if (m.row(r) != m.row(0)) return false;
  return true;
}

int infer_action_classes(const FeatureTable& t) {
  int k = 0;
  for (const auto& v : t.videos) k = std::max(k, v.labels.action + 1);
  return k;
}

int infer_segment_classes(const FeatureTable& t) {
  int k = 0;
  for (const auto& v : t.videos)
    for (const auto& s : v.labels.segments) k = std::max(k, s.label + 1);
  return k;
}

// Cycles through a shuffled index list, reshuffling on wrap-around.
class Cursor {
 public:
  Cursor(std::vector<std::size_t> items, std::uint64_t seed) : items_(std::move(items)), seed_(seed) { reshuffle(); }
  std::size_t next() {
    if (pos_ == items_.size()) reshuffle();
    return items_[pos_++];
  }
  bool empty() const { return items_.empty(); }

 private:
  void reshuffle() {
    Rng rng(Rng::mix(seed_, round_++));
    rng.shuffle(items_);
    pos_ = 0;
  }
  std::vector<std::size_t> items_;
  std::uint64_t seed_;
  std::uint64_t round_ = 0;
  std::size_t pos_ = 0;
};

double cosine_lr(double lr, double min_lr, long step, long total) {
  if (total <= 1) return lr;
  const double f = static_cast<double>(step) / static_cast<double>(total - 1);
  return min_lr + 0.5 * (lr - min_lr) * (1.0 + std::cos(M_PI * f));
}

}  // namespace

// ---- identity pretraining -------------------------------------------------------

void PretrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("pretrain epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("pretrain batch_size must be >= 1");
  if (!(lr > 0) || !(min_lr >= 0) || min_lr > lr) throw ConfigError("pretrain needs lr > 0 and 0 <= min_lr <= lr");
  if (!(weight_decay >= 0)) throw ConfigError("pretrain weight_decay must be >= 0");
}

double identity_mae(const Adapter<float>& adapter, const FeatureTable& table) {
  std::vector<const Mat<float>*> clips;
  for (const auto& v : table.videos) {
    for (const auto& c : v.clips) clips.push_back(&c);
    for (const auto& c : v.static_clips) clips.push_back(&c);
  }
  if (clips.empty()) throw DomainError("identity_mae: no clips");
  const Eigen::Index t = clips.front()->rows();
  double sum = 0, count = 0;
  for (std::size_t i = 0; i < clips.size(); i += 256) {
    std::vector<const Mat<float>*> chunk(clips.begin() + static_cast<std::ptrdiff_t>(i),
                                         clips.begin() + static_cast<std::ptrdiff_t>(std::min(clips.size(), i + 256)));
    const Mat<float> x = stack(chunk);
    sum += (adapter.apply(x, t) - x).cast<double>().cwiseAbs().sum();
    count += static_cast<double>(x.size());
  }
  return sum / count;
}

PretrainReport pretrain_identity(Adapter<float>& adapter, const std::vector<const FeatureTable*>& train,
                                 const FeatureTable* holdout, const PretrainConfig& cfg) {
  cfg.validate();
  std::vector<const Mat<float>*> clips;
  for (const auto* table : train) {
    if (table == nullptr) continue;
    for (const auto& v : table->videos) {
      for (const auto& c : v.clips) clips.push_back(&c);
      for (const auto& c : v.static_clips) clips.push_back(&c);
    }
  }
  PretrainReport rep;
  if (clips.empty()) throw DomainError("pretrain_identity: no training clips");
  const Eigen::Index t = clips.front()->rows();
  AdamWConfig oc;
  oc.lr = cfg.lr;
  oc.weight_decay = cfg.weight_decay;
  AdamW<float> opt(adapter.params(), oc);
  const long per_epoch = static_cast<long>((clips.size() + cfg.batch_size - 1) / cfg.batch_size);
  const long total = per_epoch * cfg.epochs;
  std::vector<std::size_t> order(clips.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int e = 0; e < cfg.epochs; ++e) {
    Rng shuffle_rng(Rng::mix(cfg.seed, static_cast<std::uint64_t>(e)));
    shuffle_rng.shuffle(order);
    double loss_sum = 0;
    for (long b = 0; b < per_epoch; ++b) {
      std::vector<const Mat<float>*> batch;
      for (std::size_t i = static_cast<std::size_t>(b) * cfg.batch_size;
           i < std::min(order.size(), static_cast<std::size_t>(b + 1) * cfg.batch_size); ++i)
        batch.push_back(clips[order[i]]);
      Rng rng(Rng::mix(cfg.seed ^ 0x5eedULL, static_cast<std::uint64_t>(rep.steps)));
      Tape<float> tape;
      Var<float> x = tape.constant(stack(batch));
      Var<float> y = adapter.forward(tape, x, t, Mode::kTrain, &rng, true);
      Var<float> loss = ad::mean(ad::abs(ad::sub(y, x)));
      adapter.params().zero_grad();
      tape.backward(loss);
      if (!std::isfinite(loss.scalar()) || !grads_finite(adapter.params()))
        throw DivergenceError("pretrain_identity: non-finite loss at epoch " + std::to_string(e));
      opt.set_lr(cosine_lr(cfg.lr, cfg.min_lr, rep.steps, total));
      opt.step();
      adapter.count_step();
      ++rep.steps;
      loss_sum += loss.scalar();
    }
    rep.loss_history.push_back(loss_sum / static_cast<double>(per_epoch));
  }
  if (holdout != nullptr) rep.holdout_mae = identity_mae(adapter, *holdout);
  return rep;
}

// ---- plateau rule ------------------------------------------------------------------

double plateau_scheduler(const std::vector<double>& history, double current_lr, int patience, double factor) {
  if (history.empty()) throw DomainError("plateau_scheduler: empty history");
  if (patience < 1) throw ConfigError("plateau_scheduler: patience must be >= 1");
  double best = history.front();
  int bad = 0;
  bool fired = false;
  for (std::size_t i = 1; i < history.size(); ++i) {
    fired = false;
    if (history[i] < best) {
      best = history[i];
      bad = 0;
    } else if (++bad >= patience) {
      fired = true;
      bad = 0;
    }
  }
  return fired ? current_lr * factor : current_lr;
}

// ---- anonymization training ----------------------------------------------------------

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("train epochs must be >= 0");
  if (batch_size < 2) throw ConfigError("train batch_size must be >= 2 (the budget loss contrasts videos)");
  if (tad_batch < 1) throw ConfigError("train tad_batch must be >= 1");
  if (ad_batch < 2 || ad_batch % 2 != 0) throw ConfigError("train ad_batch must be even and >= 2");
  for (double lr : {lr_adapter, lr_ar, lr_tad, lr_ad})
    if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("learning rates must be > 0");
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
  weights.validate();
  if (!tasks.any() && !allow_no_task) throw ConfigError("no active utility task (set allow_no_task for the ablation)");
  if (plateau_patience < 1) throw ConfigError("plateau_patience must be >= 1");
  if (!(plateau_factor > 0 && plateau_factor <= 1)) throw ConfigError("plateau_factor must be in (0, 1]");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (checkpoint_every > 0 && checkpoint_dir.empty()) throw ConfigError("checkpoint_every needs checkpoint_dir");
  if (max_bad_steps < 1) throw ConfigError("max_bad_steps must be >= 1");
}

std::string to_string(Phase p) {
  switch (p) {
    case Phase::kAdapter: return "adapter";
    case Phase::kArHead: return "ar_head";
    case Phase::kTadHead: return "tad_head";
    case Phase::kAdHead: return "ad_head";
  }
  return "?";
}

namespace {

struct Batch {
  // action
  std::vector<const Mat<float>*> ar_clips, view1, view2;
  std::vector<int> ar_labels;
  // detection
  std::vector<const Mat<float>*> tad_clips;
  std::vector<std::vector<Segment>> tad_segments;
  Eigen::Index tad_len = 0;
  // anomaly
  std::vector<const Mat<float>*> ad_clips;
  std::vector<int> ad_labels;
  Eigen::Index ad_len = 0;
};

struct Snapshot {
  ParameterSet<float> adapter_params, adapter_buffers;
  std::optional<ParameterSet<float>> ar, tad, ad;
};

Snapshot snapshot(const TrainState& st) {
  Snapshot s{st.adapter.params(), st.adapter.buffers(), {}, {}, {}};
  if (st.ar_head) s.ar = st.ar_head->params();
  if (st.tad_head) s.tad = st.tad_head->params();
  if (st.ad_head) s.ad = st.ad_head->params();
  return s;
}

void restore(TrainState& st, const Snapshot& s) {
  auto copy = [](ParameterSet<float>& dst, const ParameterSet<float>& src) {
    std::size_t i = 0;
    for (auto& p : dst) p.value = src[i++].value;
  };
  copy(st.adapter.params(), s.adapter_params);
  copy(st.adapter.buffers(), s.adapter_buffers);
  if (s.ar) copy(st.ar_head->params(), *s.ar);
  if (s.tad) copy(st.tad_head->params(), *s.tad);
  if (s.ad) copy(st.ad_head->params(), *s.ad);
}

json epoch_json(const EpochRecord& r) {
  const auto& l = r.losses;
  return {{"epoch", r.epoch},          {"steps", r.steps},           {"budget", l.budget},   {"lc", l.lc}, {"lc_static", l.lc_static},
          {"ar", l.ar},                {"tad", l.tad},               {"ad", l.ad},           {"task", l.task},
          {"total", l.total},          {"lr_adapter", r.lr_adapter}, {"lr_ar", r.lr_ar},     {"lr_tad", r.lr_tad},
          {"lr_ad", r.lr_ad},          {"seconds", r.seconds}};
}

std::string describe(const LossBundle& l) {
  std::ostringstream os;
  os << "budget=" << l.budget << " lc=" << l.lc << " lc_static=" << l.lc_static << " ar=" << l.ar << " tad=" << l.tad << " ad=" << l.ad
     << " total=" << l.total;
  return os.str();
}

}  // namespace

void save_train_state(const std::filesystem::path& dir, const TrainState& st) {
  save_adapter(dir, st.adapter);
  if (st.ar_head) save_head(dir, *st.ar_head, "head_ar");
  if (st.tad_head) save_head(dir, *st.tad_head, "head_tad");
  if (st.ad_head) save_head(dir, *st.ad_head, "head_ad");
  json j = {{"epoch", st.epoch}, {"step", st.step}, {"seed", std::to_string(st.seed)},
            {"encoder_fingerprint", st.encoder_fingerprint}};
  write_json_file(dir / "state.json", j);
}

TrainState train_anonymization(const TrainConfig& cfg, Adapter<float> initial, const TaskData& data,
                               const FrozenEncoder* encoder, const TrainHooks& hooks) {
  cfg.validate();
  const TaskMask& mask = cfg.tasks;
  if (data.ar == nullptr) throw ConfigError("train_anonymization: the action dataset is required (budget pairs come from it)");
  if (mask.tad && data.tad == nullptr) throw ConfigError("train_anonymization: detection task active without a dataset");
  if (mask.ad && data.ad == nullptr) throw ConfigError("train_anonymization: anomaly task active without a dataset");

  // Fingerprints.
  std::vector<const FeatureTable*> tables = {data.ar};
  if (mask.tad) tables.push_back(data.tad);
  if (mask.ad) tables.push_back(data.ad);
  const std::string fp = encoder != nullptr ? encoder->fingerprint() : data.ar->manifest.encoder_fingerprint;
  const int d = initial.config().feature_dim;
  for (const auto* t : tables) {
    check_fingerprint(t->manifest, fp);
    if (t->manifest.feature_dim != d)
      throw ShapeError("dataset " + t->manifest.dataset_id + " has feature dim " + std::to_string(t->manifest.feature_dim) +
                       ", adapter expects " + std::to_string(d));
  }
  const Eigen::Index tokens = data.ar->manifest.tokens_per_clip;
  const auto& arv = data.ar->videos;
  if (arv.size() < 2) throw DomainError("train_anonymization: need at least 2 action videos");
  for (const auto& v : arv) {
    if (v.clips.empty()) throw DomainError("video " + v.labels.video_id + " has no clips");
    if (v.static_clips.size() < 2) throw DomainError("video " + v.labels.video_id + " has fewer than 2 static clips");
  }

  TrainState st(std::move(initial));
  st.seed = cfg.seed;
  st.encoder_fingerprint = fp;
  auto head_cfg = [&](HeadKind k, int outputs, std::uint64_t salt) {
    HeadConfig h;
    h.kind = k;
    h.input_dim = d;
    h.num_outputs = std::max(outputs, 1);
    h.hidden = cfg.head_hidden;
    h.seed = Rng::mix(cfg.seed, salt);
    return h;
  };
  if (mask.ar) st.ar_head.emplace(head_cfg(HeadKind::kLinearAR, data.ar_classes > 0 ? data.ar_classes : infer_action_classes(*data.ar), 11));
  if (mask.tad) st.tad_head.emplace(head_cfg(HeadKind::kTAD, data.tad_classes > 0 ? data.tad_classes : infer_segment_classes(*data.tad), 12));
  if (mask.ad) st.ad_head.emplace(head_cfg(HeadKind::kAD, 1, 13));

  auto make_opt = [&](ParameterSet<float>& ps, double lr) {
    AdamWConfig c;
    c.lr = lr;
    c.weight_decay = cfg.weight_decay;
    return AdamW<float>(ps, c);
  };
  AdamW<float> opt_adapter = make_opt(st.adapter.params(), cfg.lr_adapter);
  std::optional<AdamW<float>> opt_ar, opt_tad, opt_ad;
  if (st.ar_head) opt_ar.emplace(make_opt(st.ar_head->params(), cfg.lr_ar));
  if (st.tad_head) opt_tad.emplace(make_opt(st.tad_head->params(), cfg.lr_tad));
  if (st.ad_head) opt_ad.emplace(make_opt(st.ad_head->params(), cfg.lr_ad));

  // Detection sequences must share a length to batch them.
  std::optional<Cursor> tad_cursor, normal_cursor, anomalous_cursor;
  if (mask.tad) {
    std::vector<std::size_t> ids(data.tad->videos.size());
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    if (ids.empty()) throw DomainError("detection dataset is empty");
    for (const auto& v : data.tad->videos)
      if (v.clips.size() != data.tad->videos.front().clips.size())
        throw ShapeError("detection videos must all have the same number of clips");
    tad_cursor.emplace(ids, Rng::mix(cfg.seed, 21));
  }
  if (mask.ad) {
    std::vector<std::size_t> normal, anomalous;
    for (std::size_t i = 0; i < data.ad->videos.size(); ++i) {
      const auto& v = data.ad->videos[i];
      if (v.clips.size() != data.ad->videos.front().clips.size())
        throw ShapeError("anomaly videos must all have the same number of clips");
      (v.labels.anomalous ? anomalous : normal).push_back(i);
    }
    if (normal.empty() || anomalous.empty()) throw DomainError("anomaly dataset needs normal and anomalous videos");
    normal_cursor.emplace(normal, Rng::mix(cfg.seed, 22));
    anomalous_cursor.emplace(anomalous, Rng::mix(cfg.seed, 23));
  }

  // A single-token forward equals the 8-token forward of a clip whose tokens
  // are identical when attention is deterministic: every token attends
  // uniformly to copies of itself.
  const bool collapse_static =
      st.adapter.config().variant == AdapterVariant::kSelfAttention && st.adapter.config().attention_dropout_rate == 0.0 &&
      std::all_of(arv.begin(), arv.end(), [](const VideoFeatures& v) {
        return std::all_of(v.static_clips.begin(), v.static_clips.end(), rows_identical);
      });

  const auto& w = cfg.weights;
  AdOptions ad_opt;
  ad_opt.lambda_smooth = w.lambda_smooth;
  ad_opt.lambda_sparse = w.lambda_sparse;
  ad_opt.lambda_magnitude = w.lambda_magnitude;
  ad_opt.margin = w.margin;

  std::vector<double> adapter_hist, ar_hist, tad_hist, ad_hist;
  int bad_steps = 0;
  Snapshot last_good = snapshot(st);
  std::ofstream log;
  if (!cfg.log_path.empty()) {
    std::filesystem::create_directories(cfg.log_path.parent_path().empty() ? "." : cfg.log_path.parent_path());
    log.open(cfg.log_path, std::ios::trunc);
    if (!log) throw IoError("cannot write " + cfg.log_path.string());
  }
  auto phase = [&](Phase p, bool after) {
    if (hooks.on_phase) hooks.on_phase(p, after, st);
  };
  auto diverge = [&](const std::string& what, const LossBundle& l) {
    std::ostringstream os;
    os << "training diverged: " << cfg.max_bad_steps << " consecutive non-finite steps (last in " << what << ", epoch "
       << st.epoch << ", step " << st.step << "; " << describe(l) << ")";
    if (!cfg.checkpoint_dir.empty()) {
      restore(st, last_good);
      const auto dir = cfg.checkpoint_dir / "last_good";
      save_train_state(dir, st);
      os << "; last good parameters saved to " << dir.string();
    }
    throw DivergenceError(os.str());
  };

  const std::size_t n_ar = arv.size();
  const std::size_t bsz = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), n_ar);
  const std::size_t steps_per_epoch = cfg.per_epoch_literal ? 1 : std::max<std::size_t>(1, n_ar / bsz);

  for (int e = 0; e < cfg.epochs; ++e) {
    const auto t0 = Clock::now();
    std::vector<std::size_t> order(n_ar);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng(Rng::mix(cfg.seed, 1000003ULL + static_cast<std::uint64_t>(e))).shuffle(order);
    LossBundle sum;
    int counted = 0;

    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      Rng rng(Rng::mix(cfg.seed, static_cast<std::uint64_t>(st.step)));
      Batch b;
      for (std::size_t i = s * bsz; i < (s + 1) * bsz; ++i) {
        const auto& v = arv[order[i]];
        const int c = static_cast<int>(rng.below(v.clips.size()));
        b.ar_clips.push_back(&v.clips[static_cast<std::size_t>(c)]);
        b.ar_labels.push_back(v.labels.action);
        // Two distinct static frames from the sampled clip's window when
        // possible, otherwise from anywhere in the video.
        std::vector<std::size_t> same;
        for (std::size_t k = 0; k < v.static_clips.size(); ++k)
          if (k < v.static_frames.size() && v.static_frames[k] / kClipFrames == c) same.push_back(k);
        std::size_t k1, k2;
        if (same.size() >= 2) {
          const auto pick = rng.sample_without_replacement(same.size(), 2);
          k1 = same[pick[0]];
          k2 = same[pick[1]];
        } else {
          const auto pick = rng.sample_without_replacement(v.static_clips.size(), 2);
          k1 = pick[0];
          k2 = pick[1];
        }
        b.view1.push_back(&v.static_clips[k1]);
        b.view2.push_back(&v.static_clips[k2]);
      }
      if (mask.tad) {
        for (int i = 0; i < cfg.tad_batch; ++i) {
          const auto& v = data.tad->videos[tad_cursor->next()];
          for (const auto& c : v.clips) b.tad_clips.push_back(&c);
          b.tad_segments.push_back(v.labels.segments);
          b.tad_len = static_cast<Eigen::Index>(v.clips.size());
        }
      }
      if (mask.ad) {
        for (int half = 0; half < 2; ++half)
          for (int i = 0; i < cfg.ad_batch / 2; ++i) {
            const auto& v = data.ad->videos[half == 0 ? normal_cursor->next() : anomalous_cursor->next()];
            for (const auto& c : v.clips) b.ad_clips.push_back(&c);
            b.ad_labels.push_back(half);
            b.ad_len = static_cast<Eigen::Index>(v.clips.size());
          }
      }
      const auto n_b = static_cast<Eigen::Index>(bsz);
      const auto n_ar_clips = static_cast<Eigen::Index>(b.ar_clips.size());
      const auto n_tad_clips = static_cast<Eigen::Index>(b.tad_clips.size());
      const auto n_ad_clips = static_cast<Eigen::Index>(b.ad_clips.size());

      // ---- adapter step: heads enter as constants ----
      phase(Phase::kAdapter, false);
      LossBundle lb;
      auto& ap = st.adapter.params();
      ap.zero_grad();
      std::vector<Mat<float>> budget_grads;
      {
        std::vector<const Mat<float>*> views = b.view1;
        views.insert(views.end(), b.view2.begin(), b.view2.end());
        Mat<float> x = stack(views);
        Eigen::Index tok = tokens;
        if (collapse_static) {
          Mat<float> first(static_cast<Eigen::Index>(views.size()), d);
          for (Eigen::Index i = 0; i < first.rows(); ++i) first.row(i) = x.row(i * tokens);
          x = std::move(first);
          tok = 1;
        }
        Tape<float> tape;
        const bool anchor = cfg.lc_on_static && w.lc > 0;
        Var<float> x_in = tape.constant(std::move(x));
        Var<float> y = st.adapter.forward(tape, x_in, tok, Mode::kTrain, &rng, w.budget > 0 || anchor);
        Var<float> pooled = pool_tokens(y, tok);
        Var<float> lb_var = ad::budget_nt_xent(ad::slice_rows(pooled, 0, n_b), ad::slice_rows(pooled, n_b, n_b),
                                               w.temperature, cfg.include_positive);
        lb.budget = lb_var.scalar();
        if (w.budget > 0) {
          tape.backward(lb_var, static_cast<float>(-w.budget));
          const float norm = ap.grad_norm();
          if (cfg.budget_grad_clip > 0 && norm > cfg.budget_grad_clip)
            ap.scale_grads(static_cast<float>(cfg.budget_grad_clip) / norm);
          budget_grads = take_grads(ap);
          ap.zero_grad();
        }
        if (anchor) {
          // Collapsed clips carry one token for `tokens` identical ones.
          Var<float> lcs = ad::scale(ad::latent_consistency(x_in, y,
                                                            static_cast<Eigen::Index>(views.size())),
                                     static_cast<float>(tokens / tok));
          lb.lc_static = lcs.scalar();
          tape.backward(lcs, static_cast<float>(w.lc));
        }
      }
      {
        std::vector<const Mat<float>*> all = b.ar_clips;
        all.insert(all.end(), b.tad_clips.begin(), b.tad_clips.end());
        all.insert(all.end(), b.ad_clips.begin(), b.ad_clips.end());
        Tape<float> tape;
        Var<float> x = tape.constant(stack(all));
        Var<float> y = st.adapter.forward(tape, x, tokens, Mode::kTrain, &rng, true);
        Var<float> lc = ad::latent_consistency(x, y, static_cast<Eigen::Index>(all.size()));
        lb.lc = lc.scalar();
        Var<float> pooled = pool_tokens(y, tokens);
        std::vector<Var<float>> terms;
        std::vector<float> tw;
        if (mask.ar) {
          Var<float> l = ad::action_ce(st.ar_head->forward_linear_ar(tape, ad::slice_rows(pooled, 0, n_ar_clips), false),
                                       b.ar_labels);
          lb.ar = l.scalar();
          terms.push_back(l);
          tw.push_back(static_cast<float>(w.ar));
        }
        if (mask.tad) {
          auto o = st.tad_head->forward_tad(tape, ad::slice_rows(pooled, n_ar_clips, n_tad_clips), b.tad_len, false);
          Var<float> l = ad::tad_loss(o.logits, o.offsets, b.tad_segments, b.tad_len);
          lb.tad = l.scalar();
          terms.push_back(l);
          tw.push_back(static_cast<float>(w.tad));
        }
        if (mask.ad) {
          auto o = st.ad_head->forward_ad(tape, ad::slice_rows(pooled, n_ar_clips + n_tad_clips, n_ad_clips), b.ad_len,
                                          false);
          Var<float> l = ad::ad_loss(o.scores, o.magnitudes, b.ad_labels, ad_opt);
          lb.ad = l.scalar();
          terms.push_back(l);
          tw.push_back(static_cast<float>(w.ad));
        }
        Var<float> obj = ad::scale(lc, static_cast<float>(w.lc));
        if (!terms.empty()) {
          Var<float> task = ad::weighted_sum(terms, tw);
          lb.task = task.scalar();
          obj = ad::weighted_sum<float>({lc, task}, {static_cast<float>(w.lc), static_cast<float>(w.task)});
        }
        tape.backward(obj);
      }
      if (!budget_grads.empty()) add_grads(ap, budget_grads);
      lb.total = w.lc * (lb.lc + lb.lc_static) + w.task * lb.task - w.budget * lb.budget;
      bool good = std::isfinite(lb.total) && grads_finite(ap);
      if (good) {
        opt_adapter.step();
        st.adapter.count_step();
      }
      phase(Phase::kAdapter, true);

      // ---- head steps on features of the updated adapter ----
      auto head_step = [&](Phase p, Head<float>& head, AdamW<float>& opt, const std::vector<const Mat<float>*>& clips,
                           auto&& loss_fn) {
        phase(p, false);
        const Mat<float> feats = pool_tokens(st.adapter.apply(stack(clips), tokens), tokens);
        Tape<float> tape;
        Var<float> l = loss_fn(tape, head, tape.constant(feats));
        head.params().zero_grad();
        tape.backward(l);
        const bool ok = std::isfinite(l.scalar()) && grads_finite(head.params());
        if (ok) opt.step();
        phase(p, true);
        return ok;
      };
      if (mask.ar)
        good = head_step(Phase::kArHead, *st.ar_head, *opt_ar, b.ar_clips,
                         [&](Tape<float>& t, Head<float>& h, Var<float> f) {
                           return ad::action_ce(h.forward_linear_ar(t, f, true), b.ar_labels);
                         }) && good;
      if (mask.tad)
        good = head_step(Phase::kTadHead, *st.tad_head, *opt_tad, b.tad_clips,
                         [&](Tape<float>& t, Head<float>& h, Var<float> f) {
                           auto o = h.forward_tad(t, f, b.tad_len, true);
                           return ad::tad_loss(o.logits, o.offsets, b.tad_segments, b.tad_len);
                         }) && good;
      if (mask.ad)
        good = head_step(Phase::kAdHead, *st.ad_head, *opt_ad, b.ad_clips,
                         [&](Tape<float>& t, Head<float>& h, Var<float> f) {
                           auto o = h.forward_ad(t, f, b.ad_len, true);
                           return ad::ad_loss(o.scores, o.magnitudes, b.ad_labels, ad_opt);
                         }) && good;

      ++st.step;
      if (!good) {
        if (++bad_steps >= cfg.max_bad_steps) diverge("step", lb);
        continue;
      }
      bad_steps = 0;
      last_good = snapshot(st);
      sum.budget += lb.budget;
      sum.lc += lb.lc;
      sum.ar += lb.ar;
      sum.tad += lb.tad;
      sum.ad += lb.ad;
      sum.task += lb.task;
      sum.total += lb.total;
      sum.lc_static += lb.lc_static;
      ++counted;
    }

    EpochRecord rec;
    rec.epoch = e + 1;
    rec.steps = counted;
    if (counted > 0) {
      const double k = counted;
      rec.losses = {sum.budget / k, sum.lc / k, sum.ar / k, sum.tad / k, sum.ad / k, sum.task / k, sum.total / k,
                    sum.lc_static / k};
    }
    adapter_hist.push_back(rec.losses.total);
    opt_adapter.set_lr(plateau_scheduler(adapter_hist, opt_adapter.lr(), cfg.plateau_patience, cfg.plateau_factor));
    if (opt_ar) {
      ar_hist.push_back(rec.losses.ar);
      opt_ar->set_lr(plateau_scheduler(ar_hist, opt_ar->lr(), cfg.plateau_patience, cfg.plateau_factor));
    }
    if (opt_tad) {
      tad_hist.push_back(rec.losses.tad);
      opt_tad->set_lr(plateau_scheduler(tad_hist, opt_tad->lr(), cfg.plateau_patience, cfg.plateau_factor));
    }
    if (opt_ad) {
      ad_hist.push_back(rec.losses.ad);
      opt_ad->set_lr(plateau_scheduler(ad_hist, opt_ad->lr(), cfg.plateau_patience, cfg.plateau_factor));
    }
    rec.lr_adapter = opt_adapter.lr();
    rec.lr_ar = opt_ar ? opt_ar->lr() : 0.0;
    rec.lr_tad = opt_tad ? opt_tad->lr() : 0.0;
    rec.lr_ad = opt_ad ? opt_ad->lr() : 0.0;
    rec.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    st.epoch = e + 1;
    st.history.push_back(rec);

    if (encoder != nullptr && encoder->fingerprint() != st.encoder_fingerprint)
      throw FingerprintMismatch("encoder parameters changed during training (epoch " + std::to_string(st.epoch) + ")");
    if (log) log << epoch_json(rec).dump() << "\n" << std::flush;
    if (cfg.checkpoint_every > 0 && st.epoch % cfg.checkpoint_every == 0)
      save_train_state(cfg.checkpoint_dir / ("epoch_" + std::to_string(st.epoch)), st);
    if (hooks.on_epoch) hooks.on_epoch(st, rec);
  }
  return st;
}

// ---- heads on frozen features ----------------------------------------------------------

void DownstreamConfig::validate() const {
  head.validate();
  if (epochs < 0) throw ConfigError("downstream epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("downstream batch_size must be >= 1");
  if (!(lr > 0)) throw ConfigError("downstream lr must be > 0");
  if (!(weight_decay >= 0)) throw ConfigError("downstream weight_decay must be >= 0");
}

Head<float> train_downstream(const Adapter<float>* adapter, const FeatureTable& train, const DownstreamConfig& cfg) {
  cfg.validate();
  if (train.videos.empty()) throw DomainError("train_downstream: empty dataset " + train.manifest.dataset_id);
  if (train.manifest.feature_dim != cfg.head.input_dim)
    throw ShapeError("train_downstream: head input_dim differs from the feature dim");
  Head<float> head(cfg.head);
  if (cfg.epochs == 0) return head;
  AdamWConfig oc;
  oc.lr = cfg.lr;
  oc.weight_decay = cfg.weight_decay;
  AdamW<float> opt(head.params(), oc);
  const Eigen::Index tokens = train.manifest.tokens_per_clip;
  auto pooled = [&](const std::vector<Mat<float>>& clips) {
    std::vector<const Mat<float>*> ptrs;
    for (const auto& c : clips) ptrs.push_back(&c);
    Mat<float> x = stack(ptrs);
    if (adapter != nullptr) x = adapter->apply(x, tokens);
    return pool_tokens(x, tokens, cfg.pooling);
  };
  auto step = [&](Var<float> loss) {
    head.params().zero_grad();
    loss.tape->backward(loss);
    if (!std::isfinite(loss.scalar()) || !grads_finite(head.params()))
      throw DivergenceError("train_downstream: non-finite loss for " + to_string(cfg.head.kind));
    opt.step();
  };
  const HeadKind kind = cfg.head.kind;

  if (kind == HeadKind::kLinearAR || kind == HeadKind::kPrivacyProbe) {
    const bool probe = kind == HeadKind::kPrivacyProbe;
    std::vector<Mat<float>> rows;
    std::vector<int> labels;
    std::vector<std::vector<int>> attrs;
    for (const auto& v : train.videos) {
      const auto& src = probe ? v.static_clips : v.clips;
      if (src.empty()) continue;
      const Mat<float> p = pooled(src);
      for (Eigen::Index i = 0; i < p.rows(); ++i) {
        rows.emplace_back(p.row(i));
        labels.push_back(v.labels.action);
        attrs.push_back(v.labels.attributes);
      }
    }
    if (rows.empty()) throw DomainError("train_downstream: no " + std::string(probe ? "static" : "temporal") + " clips");
    const int a = cfg.head.num_outputs;
    if (!probe)
      for (int l : labels)
        if (l < 0 || l >= a) throw RangeError("train_downstream: action label outside the head's classes");
    // Per-dimension standardization from the training rows, folded into the
    // first layer afterwards so the head consumes raw features.
    const Eigen::Index d = cfg.head.input_dim;
    RowVec<double> mu = RowVec<double>::Zero(d), inv = RowVec<double>::Ones(d);
    if (cfg.standardize) {
      RowVec<double> sq = RowVec<double>::Zero(d);
      for (const auto& r : rows) mu += r.cast<double>();
      mu /= static_cast<double>(rows.size());
      for (const auto& r : rows) sq += (r.cast<double>() - mu).array().square().matrix();
      for (Eigen::Index j = 0; j < d; ++j) {
        const double sd = std::sqrt(sq(j) / static_cast<double>(rows.size()));
        inv(j) = sd > 1e-8 * (1.0 + std::abs(mu(j))) ? 1.0 / sd : 1.0;
      }
      for (auto& r : rows) r = ((r.cast<double>() - mu).cwiseProduct(inv)).cast<float>();
    }
    std::vector<std::size_t> order(rows.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (int e = 0; e < cfg.epochs; ++e) {
      Rng(Rng::mix(cfg.seed, static_cast<std::uint64_t>(e))).shuffle(order);
      for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t end = std::min(order.size(), s + static_cast<std::size_t>(cfg.batch_size));
        Mat<float> x(static_cast<Eigen::Index>(end - s), d);
        std::vector<int> y;
        Mat<float> targets(x.rows(), a);
        for (std::size_t i = s; i < end; ++i) {
          const auto r = static_cast<Eigen::Index>(i - s);
          x.row(r) = rows[order[i]];
          y.push_back(labels[order[i]]);
          if (probe) {
            if (static_cast<int>(attrs[order[i]].size()) < a) throw ShapeError("train_downstream: too few attributes");
            for (int j = 0; j < a; ++j) targets(r, j) = static_cast<float>(attrs[order[i]][static_cast<std::size_t>(j)]);
          }
        }
        Tape<float> tape;
        Var<float> f = tape.constant(std::move(x));
        step(probe ? ad::multilabel_bce(head.forward_privacy_probe(tape, f, true), targets)
                   : ad::action_ce(head.forward_linear_ar(tape, f, true), y));
      }
    }
    if (cfg.standardize) {
      const std::string first = probe && !cfg.head.linear_probe ? "fc1" : "fc";
      Mat<double> w = head.params().get(first + ".w").value.cast<double>();
      w.array().rowwise() *= inv.array();
      Mat<double> b = head.params().get(first + ".b").value.cast<double>() - mu * w.transpose();
      head.params().get(first + ".w").value = w.cast<float>();
      head.params().get(first + ".b").value = b.cast<float>();
    }
    return head;
  }

  // Sequence heads: one pooled sequence per video.
  std::vector<Mat<float>> seqs;
  for (const auto& v : train.videos) {
    if (v.clips.empty()) throw DomainError("video " + v.labels.video_id + " has no clips");
    if (v.clips.size() != train.videos.front().clips.size())
      throw ShapeError("train_downstream: videos must have equal clip counts");
    seqs.push_back(pooled(v.clips));
  }
  const Eigen::Index len = seqs.front().rows();
  auto gather = [&](const std::vector<std::size_t>& ids) {
    Mat<float> x(static_cast<Eigen::Index>(ids.size()) * len, cfg.head.input_dim);
    for (std::size_t i = 0; i < ids.size(); ++i) x.middleRows(static_cast<Eigen::Index>(i) * len, len) = seqs[ids[i]];
    return x;
  };

  if (kind == HeadKind::kTAD) {
    std::vector<std::size_t> order(seqs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (int e = 0; e < cfg.epochs; ++e) {
      Rng(Rng::mix(cfg.seed, static_cast<std::uint64_t>(e))).shuffle(order);
      for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(cfg.batch_size)) {
        std::vector<std::size_t> ids(order.begin() + static_cast<std::ptrdiff_t>(s),
                                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + cfg.batch_size)));
        std::vector<std::vector<Segment>> segs;
        for (auto i : ids) segs.push_back(train.videos[i].labels.segments);
        Tape<float> tape;
        auto o = head.forward_tad(tape, tape.constant(gather(ids)), len, true);
        step(ad::tad_loss(o.logits, o.offsets, segs, len, cfg.tad));
      }
    }
    return head;
  }

  if (kind == HeadKind::kAD) {
    std::vector<std::size_t> normal, anomalous;
    for (std::size_t i = 0; i < seqs.size(); ++i) (train.videos[i].labels.anomalous ? anomalous : normal).push_back(i);
    if (normal.empty() || anomalous.empty()) throw DomainError("train_downstream: anomaly set needs both video kinds");
    const std::size_t half = std::max<std::size_t>(1, std::min<std::size_t>(cfg.batch_size / 2, std::min(normal.size(), anomalous.size())));
    const std::size_t steps = std::max(normal.size(), anomalous.size()) / half;
    Cursor nc(normal, Rng::mix(cfg.seed, 31)), ac(anomalous, Rng::mix(cfg.seed, 32));
    for (int e = 0; e < cfg.epochs; ++e)
      for (std::size_t s = 0; s < std::max<std::size_t>(steps, 1); ++s) {
        std::vector<std::size_t> ids;
        std::vector<int> labels;
        for (std::size_t i = 0; i < half; ++i) {
          ids.push_back(nc.next());
          labels.push_back(0);
        }
        for (std::size_t i = 0; i < half; ++i) {
          ids.push_back(ac.next());
          labels.push_back(1);
        }
        Tape<float> tape;
        auto o = head.forward_ad(tape, tape.constant(gather(ids)), len, true);
        step(ad::ad_loss(o.scores, o.magnitudes, labels, cfg.ad));
      }
    return head;
  }
  throw ConfigError("train_downstream: unsupported head kind");
}

}  // namespace anon
