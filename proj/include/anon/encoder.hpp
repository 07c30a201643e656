#pragma once

// Frozen toy encoder and static-clip construction.
//
// Per frame:  u_f = W_o tanh(W_s x_f + b_s)                       [d]
// Per token k of a 16-frame clip:
//   s_k = mean of u_f over the k-th window of 16 / tokens frames
//   m_k = sum_f M(k, f) u_f       (fixed temporal filter, rows sum to zero)
//   token_k = s_k + g * (m_k .* m_k)
// s carries appearance, m the motion energy; a static clip has m = 0.

#include "anon/datagen.hpp"
#include "anon/errors.hpp"
#include "anon/featurestore.hpp"
#include "anon/random.hpp"
#include "anon/tensor.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace anon {

struct EncoderConfig {
  int height = 16, width = 16, channels = 3;
  int hidden = 1536;
  int tokens = 8;
  int feature_dim = 64;
  double motion_gain = 50.0;
  std::uint64_t seed = 1234;

  int frame_size() const { return height * width * channels; }
  void validate() const;
};

struct RawClip {
  Mat<float> frames;  // [16 x H*W*C]
  std::string video_id;
  int start_frame = 0;
  bool is_static = false;
};

class FrozenEncoder {
 public:
  explicit FrozenEncoder(const EncoderConfig& cfg);

  const EncoderConfig& config() const { return cfg_; }
  int tokens_per_clip() const { return cfg_.tokens; }
  int feature_dim() const { return cfg_.feature_dim; }
  Eigen::Index parameter_count() const;
  // Digest of the configuration and every parameter tensor.
  std::string fingerprint() const;

  // [tokens x d]
  Mat<float> encode_clip(const RawClip& clip) const;
  // Per-frame embeddings u_f for any number of frames, [F x d].
  Mat<float> embed_frames(const Mat<float>& frames) const;
  // Tokens of one clip from its 16 frame embeddings.
  Mat<float> tokens_from_embeddings(const Mat<float>& u) const;

 private:
  EncoderConfig cfg_;
  Mat<float> w_s_, b_s_, w_o_, pool_, filter_;
};

// A 16-frame clip whose every frame is frame t of `frames`.
RawClip make_static_clip(const Mat<float>& frames, int t, const std::string& video_id = "");

// Two static clips from distinct frames drawn uniformly without replacement.
struct StaticPair {
  RawClip first, second;
  int t1 = 0, t2 = 0;
};
StaticPair sample_static_pair(const Mat<float>& frames, std::uint64_t seed, const std::string& video_id = "");

// Consecutive non-overlapping 16-frame windows (skip rate 1).
RawClip temporal_clip(const Mat<float>& frames, int clip_index, const std::string& video_id = "");

// Mean over features of the per-feature variance across frames.
double temporal_variance(const Mat<float>& frames);

// Every temporal clip of a video plus `static_per_window` static clips per
// 16-frame window (frames drawn without replacement). Frame embeddings are
// computed once per video, so results agree with encode_clip up to
// floating-point summation order.
VideoFeatures encode_video(const FrozenEncoder& encoder, const Corpus& corpus, const World& world, const VideoRecord& video,
                           int static_per_window, std::uint64_t seed);
std::vector<VideoFeatures> encode_corpus(const FrozenEncoder& encoder, const Corpus& corpus, int static_per_window,
                                         std::uint64_t seed);

}  // namespace anon
