#include "anon/encoder.hpp"

#include <cmath>

namespace anon {

void EncoderConfig::validate() const {
  if (height < 1 || width < 1 || channels < 1) throw ConfigError("encoder: bad frame shape");
  if (hidden < 1 || feature_dim < 1) throw ConfigError("encoder: hidden and feature_dim must be >= 1");
  if (tokens < 1 || kClipFrames % tokens != 0) throw ConfigError("encoder: tokens must divide 16");
  if (!std::isfinite(motion_gain) || motion_gain < 0) throw ConfigError("encoder: motion_gain must be >= 0");
}

FrozenEncoder::FrozenEncoder(const EncoderConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  const int p = cfg_.frame_size(), h = cfg_.hidden, d = cfg_.feature_dim, t = cfg_.tokens;
  auto fill = [&](Mat<float>& m, Eigen::Index r, Eigen::Index c, double sd) {
    m.resize(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal(0.0, sd));
  };
  fill(w_s_, h, p, std::sqrt(0.5 / p));
  fill(b_s_, 1, h, 0.1);
  fill(w_o_, d, h, std::sqrt(1.0 / h));

  pool_ = Mat<float>::Zero(t, kClipFrames);
  const int span = kClipFrames / t;
  for (int k = 0; k < t; ++k) pool_.block(k, k * span, 1, span).setConstant(1.0f / static_cast<float>(span));

  // One zero-mean, unit-norm temporal filter per (token, feature).
  filter_.resize(static_cast<Eigen::Index>(t) * d, kClipFrames);
  for (Eigen::Index r = 0; r < filter_.rows(); ++r) {
    RowVec<double> f(kClipFrames);
    for (int i = 0; i < kClipFrames; ++i) f(i) = rng.normal();
    f.array() -= f.mean();
    f /= f.norm();
    filter_.row(r) = f.cast<float>();
  }
}

Eigen::Index FrozenEncoder::parameter_count() const {
  return w_s_.size() + b_s_.size() + w_o_.size() + pool_.size() + filter_.size();
}

std::string FrozenEncoder::fingerprint() const {
  Fnv1a h;
  const std::int64_t shape[] = {cfg_.height, cfg_.width, cfg_.channels, cfg_.hidden, cfg_.tokens, cfg_.feature_dim};
  h.update(shape, sizeof(shape));
  h.update(&cfg_.motion_gain, sizeof(cfg_.motion_gain));
  for (const Mat<float>* m : {&w_s_, &b_s_, &w_o_, &pool_, &filter_}) h.update_matrix(*m);
  return h.hex();
}

Mat<float> FrozenEncoder::embed_frames(const Mat<float>& frames) const {
  if (frames.cols() != cfg_.frame_size())
    throw ShapeError("encoder expects frames of " + std::to_string(cfg_.frame_size()) + " values, got " +
                     std::to_string(frames.cols()));
  Mat<float> pre = frames * w_s_.transpose();
  pre.rowwise() += b_s_.row(0);
  return pre.array().tanh().matrix() * w_o_.transpose();
}

Mat<float> FrozenEncoder::tokens_from_embeddings(const Mat<float>& u) const {
  if (u.rows() != kClipFrames || u.cols() != cfg_.feature_dim) throw ShapeError("tokens_from_embeddings: expects [16 x d]");
  const int d = cfg_.feature_dim;
  Mat<float> out = pool_ * u;
  const Mat<float> ut = u.transpose();  // [d x 16]
  const auto g = static_cast<float>(cfg_.motion_gain);
  for (int k = 0; k < cfg_.tokens; ++k) {
    const auto f = filter_.middleRows(static_cast<Eigen::Index>(k) * d, d);
    const ColVec<float> m = f.cwiseProduct(ut).rowwise().sum();
    out.row(k) += g * m.cwiseProduct(m).transpose();
  }
  return out;
}

Mat<float> FrozenEncoder::encode_clip(const RawClip& clip) const {
  if (clip.frames.rows() != kClipFrames)
    throw ShapeError("encode_clip: clip " + clip.video_id + " has " + std::to_string(clip.frames.rows()) + " frames, expected 16");
  if (!clip.frames.allFinite()) throw DomainError("encode_clip: clip " + clip.video_id + " has non-finite values");
  bool still = true;
  for (Eigen::Index f = 1; f < kClipFrames && still; ++f) still = clip.frames.row(f) == clip.frames.row(0);
  if (still) {
    // Identical frames: the motion term is exactly zero and every window
    // average is the single frame embedding.
    const Mat<float> u = embed_frames(clip.frames.topRows(1));
    return u.replicate(cfg_.tokens, 1);
  }
  return tokens_from_embeddings(embed_frames(clip.frames));
}

RawClip make_static_clip(const Mat<float>& frames, int t, const std::string& video_id) {
  if (t < 0 || t >= frames.rows())
    throw RangeError("make_static_clip: frame " + std::to_string(t) + " outside [0, " + std::to_string(frames.rows()) + ")");
  RawClip c;
  c.frames = frames.row(t).replicate(kClipFrames, 1);
  c.video_id = video_id;
  c.start_frame = t;
  c.is_static = true;
  return c;
}

StaticPair sample_static_pair(const Mat<float>& frames, std::uint64_t seed, const std::string& video_id) {
  if (frames.rows() < 2) throw DomainError("sample_static_pair: video " + video_id + " has fewer than 2 frames");
  Rng rng(seed);
  const auto idx = rng.sample_without_replacement(static_cast<std::size_t>(frames.rows()), 2);
  StaticPair p;
  p.t1 = static_cast<int>(idx[0]);
  p.t2 = static_cast<int>(idx[1]);
  p.first = make_static_clip(frames, p.t1, video_id);
  p.second = make_static_clip(frames, p.t2, video_id);
  return p;
}

RawClip temporal_clip(const Mat<float>& frames, int clip_index, const std::string& video_id) {
  const Eigen::Index start = static_cast<Eigen::Index>(clip_index) * kClipFrames;
  if (clip_index < 0 || start + kClipFrames > frames.rows())
    throw RangeError("temporal_clip: clip " + std::to_string(clip_index) + " outside video " + video_id);
  RawClip c;
  c.frames = frames.middleRows(start, kClipFrames);
  c.video_id = video_id;
  c.start_frame = static_cast<int>(start);
  return c;
}

double temporal_variance(const Mat<float>& frames) {
  const Mat<double> f = frames.cast<double>();
  const RowVec<double> mean = f.colwise().mean();
  return (f.rowwise() - mean).array().square().colwise().mean().mean();
}

VideoFeatures encode_video(const FrozenEncoder& encoder, const Corpus& corpus, const World& world, const VideoRecord& video,
                           int static_per_window, std::uint64_t seed) {
  if (static_per_window < 0 || static_per_window > kClipFrames)
    throw ConfigError("static clips per window must be in [0, 16]");
  const Mat<float> frames = render_frames(corpus, world, video);
  const int clips = static_cast<int>(frames.rows()) / kClipFrames;
  if (clips < 1) throw DomainError("video " + video.video_id + " is shorter than one clip");
  const Mat<float> u = encoder.embed_frames(frames);
  VideoFeatures out;
  out.labels = video;
  Rng rng(Rng::mix(seed, video.render_seed));
  for (int c = 0; c < clips; ++c) {
    out.clips.push_back(encoder.tokens_from_embeddings(u.middleRows(static_cast<Eigen::Index>(c) * kClipFrames, kClipFrames)));
    for (auto k : rng.sample_without_replacement(kClipFrames, static_cast<std::size_t>(static_per_window))) {
      const int f = c * kClipFrames + static_cast<int>(k);
      out.static_clips.push_back(u.row(f).replicate(encoder.tokens_per_clip(), 1));
      out.static_frames.push_back(f);
    }
  }
  return out;
}

std::vector<VideoFeatures> encode_corpus(const FrozenEncoder& encoder, const Corpus& corpus, int static_per_window,
                                         std::uint64_t seed) {
  if (corpus.config.frame_size() != encoder.config().frame_size())
    throw ShapeError("corpus " + corpus.config.name + " frames do not match the encoder input size");
  const World world = World::make(corpus.config);
  std::vector<VideoFeatures> out;
  out.reserve(corpus.videos.size());
  for (const auto& v : corpus.videos) out.push_back(encode_video(encoder, corpus, world, v, static_per_window, seed));
  return out;
}

}  // namespace anon
