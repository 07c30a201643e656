#pragma once

// Precomputed clip features on disk.
//
// Layout under <root>/<dataset_id>/:
//   manifest.json   sidecar: dims, encoder fingerprint, one entry per video
//   features.bin    float32, little-endian, row-major [tokens x d] clips
// Each video occupies one contiguous byte range: its temporal clips in
// order, then its static clips (one tiled frame each).

#include "anon/datagen.hpp"
#include "anon/errors.hpp"
#include "anon/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

namespace anon {

struct FeatureClip {
  std::string video_id;
  int clip_index = 0;
  Mat<float> tokens;  // [tokens_per_clip x d]
  bool is_static = false;
};

// Features of one video ready to be written.
struct VideoFeatures {
  VideoRecord labels;
  std::vector<Mat<float>> clips;         // temporal
  std::vector<Mat<float>> static_clips;  // tiled single frames
  std::vector<int> static_frames;        // source frame of each static clip
};

struct ManifestEntry {
  VideoRecord labels;
  int clip_count = 0;
  int static_count = 0;
  std::vector<int> static_frames;
  std::uint64_t offset = 0;  // bytes into features.bin
  std::uint64_t length = 0;  // bytes
};

struct FeatureManifest {
  std::string dataset_id;
  int feature_dim = 0;
  int tokens_per_clip = 0;
  std::string encoder_fingerprint;
  std::filesystem::path directory;
  std::vector<ManifestEntry> entries;

  const ManifestEntry& entry(const std::string& video_id) const;
  bool contains(const std::string& video_id) const;
  std::vector<std::string> video_ids() const;
  std::size_t total_clips() const;
  std::size_t clip_bytes() const { return static_cast<std::size_t>(tokens_per_clip) * feature_dim * sizeof(float); }
  std::filesystem::path payload_path() const { return directory / "features.bin"; }

 private:
  friend FeatureManifest load_manifest(const std::filesystem::path&, const std::string&);
  friend FeatureManifest write_features(const std::filesystem::path&, const std::string&, const std::string&,
                                        const std::vector<VideoFeatures>&);
  void index();
  std::unordered_map<std::string, std::size_t> by_id_;
};

FeatureManifest write_features(const std::filesystem::path& root, const std::string& dataset_id,
                               const std::string& encoder_fingerprint, const std::vector<VideoFeatures>& records);
FeatureManifest load_manifest(const std::filesystem::path& root, const std::string& dataset_id);

// Throws FingerprintMismatch when the manifest was produced by another encoder.
void check_fingerprint(const FeatureManifest& manifest, const std::string& live_fingerprint);

struct ClipSelector {
  enum class Kind { kAll, kIndex, kEvenlySpaced };
  Kind kind = Kind::kAll;
  int value = 0;

  static ClipSelector all() { return {}; }
  static ClipSelector index(int k) { return {Kind::kIndex, k}; }
  static ClipSelector evenly_spaced(int n) { return {Kind::kEvenlySpaced, n}; }
  // "all", "index <k>", "evenly spaced <n>"
  static ClipSelector parse(const std::string& text);
  std::string describe() const;
};

// n indices spread over [0, clip_count): floor(i * clip_count / n). With
// fewer clips than n, indices repeat.
std::vector<int> evenly_spaced_indices(int clip_count, int n);

// Clips of each requested video, in request order. Static clips are
// addressed by their own index when `is_static`.
std::vector<FeatureClip> read_features(const FeatureManifest& manifest, const std::vector<std::string>& video_ids,
                                       const ClipSelector& selector, bool is_static = false);

// Uniformly random stored temporal clip, deterministic in the seed.
FeatureClip sample_training_clip(const FeatureManifest& manifest, const std::string& video_id, std::uint64_t seed);
int sample_clip_index(int clip_count, std::uint64_t seed);

// A whole dataset held in memory for training.
struct FeatureTable {
  FeatureManifest manifest;
  std::vector<VideoFeatures> videos;

  static FeatureTable load(const FeatureManifest& manifest);
  const VideoFeatures& video(const std::string& video_id) const;
  std::size_t index_of(const std::string& video_id) const;
};

}  // namespace anon
