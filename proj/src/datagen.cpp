#include "anon/datagen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <set>

namespace anon {

std::string to_string(CorpusTask t) {
  switch (t) {
    case CorpusTask::kAction: return "action";
    case CorpusTask::kDetection: return "detection";
    case CorpusTask::kAnomaly: return "anomaly";
    case CorpusTask::kGait: return "gait";
  }
  return "?";
}

CorpusTask corpus_task_from_string(const std::string& s) {
  if (s == "action") return CorpusTask::kAction;
  if (s == "detection") return CorpusTask::kDetection;
  if (s == "anomaly") return CorpusTask::kAnomaly;
  if (s == "gait") return CorpusTask::kGait;
  throw ConfigError("unknown corpus task '" + s + "' (expected action, detection, anomaly or gait)");
}

std::string to_string(Gender g) { return g == Gender::kMale ? "male" : "female"; }

Gender gender_from_string(const std::string& s) {
  if (s == "male") return Gender::kMale;
  if (s == "female") return Gender::kFemale;
  throw ConfigError("unknown gender '" + s + "' (expected female or male)");
}

std::vector<std::string> CorpusConfig::validate() const {
  std::vector<std::string> warnings;
  if (num_videos < 1) throw ConfigError("corpus " + name + ": num_videos must be >= 1");
  if (frames_per_video < kClipFrames || frames_per_video % kClipFrames != 0)
    throw ConfigError("corpus " + name + ": frames_per_video must be a positive multiple of 16");
  if (height < 1 || width < 1 || channels < 1) throw ConfigError("corpus " + name + ": bad frame shape");
  if (num_action_classes < 2) throw ConfigError("corpus " + name + ": need at least 2 action classes");
  if (num_private_attributes < 1) throw ConfigError("corpus " + name + ": need at least 1 private attribute");
  if (num_subjects < 1 || first_subject < 0) throw ConfigError("corpus " + name + ": bad subject range");
  if (!std::isfinite(leak_strength) || leak_strength < 0) throw ConfigError("corpus " + name + ": leak_strength must be >= 0");
  if (!std::isfinite(motion_strength) || motion_strength <= 0)
    throw ConfigError("corpus " + name + ": motion_strength must be > 0");
  if (!std::isfinite(identity_strength) || identity_strength < 0)
    throw ConfigError("corpus " + name + ": identity_strength must be >= 0");
  if (!std::isfinite(noise) || noise < 0) throw ConfigError("corpus " + name + ": noise must be >= 0");
  if (anomaly_fraction <= 0 || anomaly_fraction >= 1) throw ConfigError("corpus " + name + ": anomaly_fraction must be in (0, 1)");
  if (task == CorpusTask::kDetection && clips_per_video() < 4)
    throw ConfigError("corpus " + name + ": detection videos need at least 4 clips");
  if (task == CorpusTask::kAnomaly && clips_per_video() < 2)
    throw ConfigError("corpus " + name + ": anomaly videos need at least 2 clips");
  if (leak_strength == 0)
    warnings.push_back("corpus " + name + ": leak_strength is 0, private attributes are unlearnable by construction");
  return warnings;
}

std::vector<int> VideoRecord::frame_labels() const {
  std::vector<int> labels(static_cast<std::size_t>(num_frames), 0);
  for (int c : anomaly_clips)
    for (int f = c * kClipFrames; f < (c + 1) * kClipFrames && f < num_frames; ++f) labels[static_cast<std::size_t>(f)] = 1;
  return labels;
}

const VideoRecord& Corpus::find(const std::string& video_id) const {
  for (const auto& v : videos)
    if (v.video_id == video_id) return v;
  throw LookupError("corpus " + config.name + " has no video " + video_id);
}

namespace {

Mat<float> gaussian_rows(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Mat<float> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal());
  return m;
}

}  // namespace

World World::make(const CorpusConfig& cfg) {
  World w;
  w.frame_size = cfg.frame_size();
  w.seed = cfg.world_seed;
  Rng rng(Rng::mix(cfg.world_seed, 0x6261736573ULL));
  w.attribute_bases = gaussian_rows(cfg.num_private_attributes, w.frame_size, rng);
  w.motion_bases = gaussian_rows(4, w.frame_size, rng);
  return w;
}

std::vector<int> World::subject_attributes(int subject, int num_attributes) const {
  Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(subject) * 2 + 1));
  std::vector<int> bits(static_cast<std::size_t>(num_attributes));
  for (auto& b : bits) b = static_cast<int>(rng.below(2));
  return bits;
}

RowVec<float> World::signature(int subject, int num_attributes, double identity) const {
  if (attribute_bases.rows() < num_attributes) throw ShapeError("world has fewer attribute bases than requested");
  const auto bits = subject_attributes(subject, num_attributes);
  RowVec<float> sig = RowVec<float>::Zero(frame_size);
  for (int a = 0; a < num_attributes; ++a) sig += (bits[static_cast<std::size_t>(a)] ? 1.0f : -1.0f) * attribute_bases.row(a);
  sig /= std::sqrt(static_cast<float>(num_attributes));
  // Per-subject component on top of the attributes.
  if (identity == 0) return sig;
  Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(subject) * 2 + 2));
  for (Eigen::Index i = 0; i < sig.size(); ++i) sig(i) += static_cast<float>(identity * rng.normal());
  return sig;
}

double action_frequency(int action, int num_actions) {
  return 0.3 + 2.6 * static_cast<double>(action) / static_cast<double>(num_actions - 1);
}

double anomaly_frequency() { return 1.1; }

double gait_frequency(int subject, std::uint64_t world_seed) {
  Rng rng(Rng::mix(world_seed, 0x67616974ULL + static_cast<std::uint64_t>(subject)));
  return rng.uniform(0.3, 2.9);
}

Corpus gen_synthetic_corpus(const CorpusConfig& config) {
  config.validate();
  Corpus corpus;
  corpus.config = config;
  const World world = World::make(config);
  Rng rng(config.seed);
  const int clips = config.clips_per_video();
  for (int i = 0; i < config.num_videos; ++i) {
    VideoRecord v;
    v.video_id = config.name + "_" + std::to_string(i);
    v.subject = config.first_subject + static_cast<int>(rng.below(static_cast<std::uint64_t>(config.num_subjects)));
    v.attributes = world.subject_attributes(v.subject, config.num_private_attributes);
    v.gender = config.num_private_attributes > kGenderAttribute && v.attributes[kGenderAttribute] ? Gender::kMale
                                                                                                  : Gender::kFemale;
    v.num_frames = config.frames_per_video;
    v.render_seed = Rng::mix(config.seed, static_cast<std::uint64_t>(i) + 1);
    switch (config.task) {
      case CorpusTask::kAction:
        v.action = i % config.num_action_classes;
        break;
      case CorpusTask::kGait:
        break;
      case CorpusTask::kDetection: {
        // One or two non-overlapping instances of 2..4 clips, background elsewhere.
        const int wanted = 1 + static_cast<int>(rng.below(2));
        std::vector<int> used(static_cast<std::size_t>(clips), 0);
        for (int s = 0, tries = 0; s < wanted && tries < 50; ++tries) {
          const int len = 2 + static_cast<int>(rng.below(3));
          if (len > clips) continue;
          const int start = static_cast<int>(rng.below(static_cast<std::uint64_t>(clips - len + 1)));
          bool free = true;
          for (int c = std::max(0, start - 1); c < std::min(clips, start + len + 1); ++c) free = free && !used[static_cast<std::size_t>(c)];
          if (!free) continue;
          for (int c = start; c < start + len; ++c) used[static_cast<std::size_t>(c)] = 1;
          const int label = static_cast<int>(rng.below(static_cast<std::uint64_t>(config.num_action_classes)));
          v.segments.push_back({start - 0.5, start + len - 0.5, label});
          ++s;
        }
        std::sort(v.segments.begin(), v.segments.end(), [](const Segment& a, const Segment& b) { return a.start < b.start; });
        break;
      }
      case CorpusTask::kAnomaly: {
        v.action = static_cast<int>(rng.below(static_cast<std::uint64_t>(config.num_action_classes)));
        const int n_anomalous = static_cast<int>(std::lround(config.anomaly_fraction * config.num_videos));
        // Normal videos first, then anomalous, by index.
        v.anomalous = i >= config.num_videos - n_anomalous ? 1 : 0;
        if (v.anomalous) {
          const int len = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::min(3, clips - 1))));
          const int start = static_cast<int>(rng.below(static_cast<std::uint64_t>(clips - len + 1)));
          for (int c = start; c < start + len; ++c) v.anomaly_clips.push_back(c);
        }
        break;
      }
    }
    corpus.videos.push_back(std::move(v));
  }
  return corpus;
}

Mat<float> render_frames(const Corpus& corpus, const VideoRecord& video) {
  return render_frames(corpus, World::make(corpus.config), video);
}

Mat<float> render_frames(const Corpus& corpus, const World& world, const VideoRecord& video) {
  const CorpusConfig& cfg = corpus.config;
  const int p = cfg.frame_size();
  if (world.frame_size != p) throw ShapeError("render_frames: world frame size differs from corpus");
  Rng rng(video.render_seed);
  const double phase = rng.uniform(0.0, 2.0 * M_PI);
  const double amp = cfg.motion_strength * rng.uniform(0.9, 1.1);
  const double speed = 1.0 + 0.02 * rng.normal();
  const double anomaly_phase = rng.uniform(0.0, 2.0 * M_PI);

  const RowVec<float> sig = world.signature(video.subject, cfg.num_private_attributes, cfg.identity_strength) * static_cast<float>(cfg.leak_strength);
  std::vector<double> freq(static_cast<std::size_t>(video.num_frames), 0.0);
  std::vector<int> moving(static_cast<std::size_t>(video.num_frames), 0);
  auto fill = [&](int f0, int f1, double w) {
    for (int f = f0; f < f1; ++f) {
      freq[static_cast<std::size_t>(f)] = w;
      moving[static_cast<std::size_t>(f)] = 1;
    }
  };
  switch (cfg.task) {
    case CorpusTask::kAction:
    case CorpusTask::kAnomaly:
      fill(0, video.num_frames, action_frequency(video.action, cfg.num_action_classes) * speed);
      break;
    case CorpusTask::kGait:
      fill(0, video.num_frames, gait_frequency(video.subject, cfg.world_seed) * speed);
      break;
    case CorpusTask::kDetection:
      for (const auto& s : video.segments) {
        const int c0 = static_cast<int>(std::lround(s.start + 0.5)), c1 = static_cast<int>(std::lround(s.end + 0.5));
        fill(c0 * kClipFrames, c1 * kClipFrames, action_frequency(s.label, cfg.num_action_classes) * speed);
      }
      break;
  }
  const auto anomalous = video.frame_labels();

  Mat<float> frames(video.num_frames, p);
  for (int f = 0; f < video.num_frames; ++f) {
    auto row = frames.row(f);
    row = sig;
    if (moving[static_cast<std::size_t>(f)]) {
      const double a = freq[static_cast<std::size_t>(f)] * f + phase;
      row += static_cast<float>(amp * std::cos(a)) * world.motion_bases.row(0) +
             static_cast<float>(amp * std::sin(a)) * world.motion_bases.row(1);
    }
    if (anomalous[static_cast<std::size_t>(f)]) {
      const double a = anomaly_frequency() * f + anomaly_phase;
      row += static_cast<float>(amp * std::cos(a)) * world.motion_bases.row(2) +
             static_cast<float>(amp * std::sin(a)) * world.motion_bases.row(3);
    }
    if (cfg.noise > 0)
      for (int i = 0; i < p; ++i) row(i) += static_cast<float>(cfg.noise * rng.normal());
  }
  return frames;
}

Corpus balance_by_gender(const Corpus& corpus, std::uint64_t seed) {
  std::set<int> female, male;
  for (const auto& v : corpus.videos) (v.gender == Gender::kMale ? male : female).insert(v.subject);
  if (female.empty() || male.empty())
    throw DomainError("balance_by_gender: corpus " + corpus.config.name + " has no " +
                      (female.empty() ? std::string("female") : std::string("male")) + " subjects");
  Rng rng(seed);
  const std::size_t n = std::min(female.size(), male.size());
  auto pick = [&](const std::set<int>& s) {
    std::vector<int> v(s.begin(), s.end());
    rng.shuffle(v);
    v.resize(n);
    return std::set<int>(v.begin(), v.end());
  };
  const std::set<int> keep_f = pick(female), keep_m = pick(male);

  // Per action: equal female and male video counts.
  std::map<std::pair<int, int>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < corpus.videos.size(); ++i) {
    const auto& v = corpus.videos[i];
    const auto& keep = v.gender == Gender::kMale ? keep_m : keep_f;
    if (keep.count(v.subject)) groups[{v.action, static_cast<int>(v.gender)}].push_back(i);
  }
  std::set<int> actions;
  for (const auto& [key, idx] : groups) actions.insert(key.first);
  std::vector<std::size_t> retained;
  for (int a : actions) {
    auto& f = groups[{a, 0}];
    auto& m = groups[{a, 1}];
    const std::size_t c = std::min(f.size(), m.size());
    for (auto* g : {&f, &m}) {
      std::vector<std::size_t> idx = *g;
      rng.shuffle(idx);
      idx.resize(c);
      retained.insert(retained.end(), idx.begin(), idx.end());
    }
  }
  std::sort(retained.begin(), retained.end());
  Corpus out;
  out.config = corpus.config;
  for (auto i : retained) out.videos.push_back(corpus.videos[i]);
  return out;
}

int retained_count(int available, double share, bool floor_one) {
  if (available <= 0) return 0;
  int k = static_cast<int>(std::lround(share * available));
  if (floor_one) k = std::max(k, 1);
  return std::min(k, available);
}

Corpus build_bias_protocol(const Corpus& balanced, const BiasProtocolSpec& spec) {
  if (!(spec.ratio >= 0.5 && spec.ratio < 1.0)) throw ConfigError("bias protocol ratio must be in [0.5, 1)");
  std::map<int, std::array<std::vector<std::size_t>, 2>> by_action;
  for (std::size_t i = 0; i < balanced.videos.size(); ++i) {
    const auto& v = balanced.videos[i];
    by_action[v.action][static_cast<std::size_t>(v.gender)].push_back(i);
  }
  if (!by_action.count(spec.shortcut_action))
    throw ConfigError("bias protocol: shortcut action " + std::to_string(spec.shortcut_action) + " has no videos");
  for (const auto& [a, g] : by_action)
    if (g[0].size() != g[1].size())
      throw DomainError("bias protocol: input is not gender balanced for action " + std::to_string(a) +
                        " (apply balance_by_gender first)");

  Rng rng(spec.seed);
  std::vector<std::size_t> retained;
  for (auto& [a, groups] : by_action) {
    for (int g = 0; g < 2; ++g) {
      const bool favored = static_cast<Gender>(g) == spec.favored_gender;
      const bool flip = a == spec.shortcut_action;
      const double share = favored != flip ? spec.ratio : 1.0 - spec.ratio;
      auto idx = groups[static_cast<std::size_t>(g)];
      const int keep = retained_count(static_cast<int>(idx.size()), share, spec.floor_one);
      if (keep == 0 && !idx.empty())
        throw DomainError("bias protocol: rounding empties the " + to_string(static_cast<Gender>(g)) + " subgroup of action " +
                          std::to_string(a));
      rng.shuffle(idx);
      idx.resize(static_cast<std::size_t>(keep));
      retained.insert(retained.end(), idx.begin(), idx.end());
    }
  }
  std::sort(retained.begin(), retained.end());
  Corpus out;
  out.config = balanced.config;
  out.config.name = balanced.config.name + (spec.favored_gender == Gender::kMale ? "_bias_f" : "_bias_m");
  for (auto i : retained) out.videos.push_back(balanced.videos[i]);
  return out;
}

}  // namespace anon
