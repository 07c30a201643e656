#pragma once

// Synthetic video corpora with planted private attributes, and the gender
// bias protocol built on top of them.
//
// A frame is a flattened H*W*C vector:
//   x_f = leak * (attribute signature + identity * jitter(subject))
//       + motion * (cos(w f + phase) B1 + sin(w f + phase) B2)
//       [+ anomaly motion on B3, B4]
//       + noise
// The signature is static (identical in every frame) and encodes the
// subject's binary attributes; the action lives only in the temporal
// frequency w. Frames are rendered on demand from the record, so a corpus is
// a small list of metadata and a pure function of (config, seed).

#include "anon/errors.hpp"
#include "anon/losses.hpp"
#include "anon/random.hpp"
#include "anon/tensor.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace anon {

enum class CorpusTask { kAction, kDetection, kAnomaly, kGait };
std::string to_string(CorpusTask t);
CorpusTask corpus_task_from_string(const std::string& s);

enum class Gender { kFemale = 0, kMale = 1 };
std::string to_string(Gender g);
Gender gender_from_string(const std::string& s);

// Index of the attribute that doubles as the gender label.
inline constexpr int kGenderAttribute = 1;
inline constexpr int kClipFrames = 16;

struct CorpusConfig {
  std::string name = "ar";
  CorpusTask task = CorpusTask::kAction;
  int num_videos = 240;
  int frames_per_video = 64;
  int height = 16, width = 16, channels = 3;
  int num_action_classes = 8;
  int num_private_attributes = 7;
  int num_subjects = 48;
  int first_subject = 0;  // subjects are [first_subject, first_subject + num_subjects)
  double leak_strength = 0.1;
  double identity_strength = 0.0;  // per-subject jitter on top of the attribute signature
  double motion_strength = 0.2;
  double noise = 0.03;
  double anomaly_fraction = 0.5;  // anomaly corpora: share of anomalous videos
  std::uint64_t world_seed = 2024;  // shared bases; equal across corpora of one run
  std::uint64_t seed = 1;

  int frame_size() const { return height * width * channels; }
  int clips_per_video() const { return frames_per_video / kClipFrames; }
  // Throws ConfigError; returns warnings (e.g. zero leak).
  std::vector<std::string> validate() const;
};

struct VideoRecord {
  std::string video_id;
  int subject = -1;
  Gender gender = Gender::kFemale;
  std::vector<int> attributes;  // private attribute bits
  int action = -1;              // action and gait corpora
  std::vector<Segment> segments;  // detection corpora, in clip units
  int anomalous = 0;              // anomaly corpora: video-level label
  std::vector<int> anomaly_clips;  // anomaly corpora: anomalous clip indices
  int num_frames = 0;
  std::uint64_t render_seed = 0;

  // Frame-level anomaly labels (0/1), one per frame.
  std::vector<int> frame_labels() const;
};

struct Corpus {
  CorpusConfig config;
  std::vector<VideoRecord> videos;

  const VideoRecord& find(const std::string& video_id) const;
};

// Shared random bases of a synthetic world.
struct World {
  int frame_size = 0;
  Mat<float> attribute_bases;  // [A x P]
  Mat<float> motion_bases;     // [4 x P]: B1, B2 (action), B3, B4 (anomaly)
  std::uint64_t seed = 0;

  static World make(const CorpusConfig& cfg);
  std::vector<int> subject_attributes(int subject, int num_attributes) const;
  RowVec<float> signature(int subject, int num_attributes, double identity) const;
};

Corpus gen_synthetic_corpus(const CorpusConfig& config);

// Temporal frequency of an action class (radians per frame).
double action_frequency(int action, int num_actions);
double anomaly_frequency();
double gait_frequency(int subject, std::uint64_t world_seed);

// All frames of a video, [num_frames x P].
Mat<float> render_frames(const Corpus& corpus, const VideoRecord& video);
Mat<float> render_frames(const Corpus& corpus, const World& world, const VideoRecord& video);

// Keeps equal numbers of female and male subjects and equal video counts
// per (action, gender).
Corpus balance_by_gender(const Corpus& corpus, std::uint64_t seed);

struct BiasProtocolSpec {
  int shortcut_action = 0;
  Gender favored_gender = Gender::kMale;  // kMale builds NTU-Bias-F, kFemale NTU-Bias-M
  double ratio = 0.95;
  bool floor_one = true;
  std::uint64_t seed = 0;
};

// Per action, retains `ratio` of the favored gender's videos and 1 - ratio
// of the other's; the shortcut action gets the inverse split.
Corpus build_bias_protocol(const Corpus& balanced, const BiasProtocolSpec& spec);

// Retained count for `available` videos at fraction `share` (nearest,
// optionally at least one).
int retained_count(int available, double share, bool floor_one);

}  // namespace anon
