#include "anon/featurestore.hpp"

#include "json_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace anon {

namespace {

static_assert(sizeof(float) == 4, "feature store needs 32-bit floats");

void to_little_endian(std::vector<char>& bytes) {
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i + 4 <= bytes.size(); i += 4) std::reverse(bytes.begin() + static_cast<long>(i), bytes.begin() + static_cast<long>(i) + 4);
  }
}

void append_clip(std::vector<char>& buf, const Mat<float>& clip) {
  const auto n = static_cast<std::size_t>(clip.size()) * sizeof(float);
  const auto at = buf.size();
  buf.resize(at + n);
  std::memcpy(buf.data() + at, clip.data(), n);
}

Mat<float> clip_from_bytes(const char* bytes, int rows, int cols) {
  Mat<float> m(rows, cols);
  std::vector<char> tmp(bytes, bytes + static_cast<std::size_t>(m.size()) * sizeof(float));
  to_little_endian(tmp);  // symmetric swap
  std::memcpy(m.data(), tmp.data(), tmp.size());
  return m;
}

std::vector<char> read_range(const std::filesystem::path& path, std::uint64_t offset, std::uint64_t length) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open feature payload " + path.string());
  in.seekg(static_cast<std::streamoff>(offset));
  std::vector<char> buf(static_cast<std::size_t>(length));
  in.read(buf.data(), static_cast<std::streamsize>(length));
  if (in.gcount() != static_cast<std::streamsize>(length))
    throw IoError("feature payload " + path.string() + " is truncated");
  return buf;
}

}  // namespace

void FeatureManifest::index() {
  by_id_.clear();
  for (std::size_t i = 0; i < entries.size(); ++i) by_id_[entries[i].labels.video_id] = i;
}

const ManifestEntry& FeatureManifest::entry(const std::string& video_id) const {
  auto it = by_id_.find(video_id);
  if (it == by_id_.end()) throw LookupError("dataset " + dataset_id + " has no video " + video_id);
  return entries[it->second];
}

bool FeatureManifest::contains(const std::string& video_id) const { return by_id_.count(video_id) > 0; }

std::vector<std::string> FeatureManifest::video_ids() const {
  std::vector<std::string> ids;
  for (const auto& e : entries) ids.push_back(e.labels.video_id);
  return ids;
}

std::size_t FeatureManifest::total_clips() const {
  std::size_t n = 0;
  for (const auto& e : entries) n += static_cast<std::size_t>(e.clip_count);
  return n;
}

FeatureManifest write_features(const std::filesystem::path& root, const std::string& dataset_id,
                               const std::string& encoder_fingerprint, const std::vector<VideoFeatures>& records) {
  if (dataset_id.empty()) throw ConfigError("write_features: empty dataset id");
  if (records.empty()) throw ConfigError("write_features: no records for dataset " + dataset_id);
  FeatureManifest m;
  m.dataset_id = dataset_id;
  m.encoder_fingerprint = encoder_fingerprint;
  m.directory = root / dataset_id;

  std::set<std::string> seen;
  std::vector<char> payload;
  for (const auto& r : records) {
    const std::string& id = r.labels.video_id;
    if (!seen.insert(id).second) throw ConfigError("write_features: duplicate video_id " + id);
    if (r.static_clips.size() != r.static_frames.size())
      throw ShapeError("write_features: video " + id + " has static clips without source frames");
    for (const auto* group : {&r.clips, &r.static_clips})
      for (const auto& c : *group) {
        if (m.tokens_per_clip == 0) {
          m.tokens_per_clip = static_cast<int>(c.rows());
          m.feature_dim = static_cast<int>(c.cols());
        }
        if (c.rows() != m.tokens_per_clip || c.cols() != m.feature_dim)
          throw ShapeError("write_features: video " + id + " has clip shape [" + std::to_string(c.rows()) + " x " +
                           std::to_string(c.cols()) + "], expected [" + std::to_string(m.tokens_per_clip) + " x " +
                           std::to_string(m.feature_dim) + "]");
        if (!c.allFinite()) throw DomainError("write_features: video " + id + " has non-finite features");
      }
    ManifestEntry e;
    e.labels = r.labels;
    e.clip_count = static_cast<int>(r.clips.size());
    e.static_count = static_cast<int>(r.static_clips.size());
    e.static_frames = r.static_frames;
    e.offset = payload.size();
    for (const auto& c : r.clips) append_clip(payload, c);
    for (const auto& c : r.static_clips) append_clip(payload, c);
    e.length = payload.size() - e.offset;
    m.entries.push_back(std::move(e));
  }
  if (m.tokens_per_clip == 0) throw ConfigError("write_features: dataset " + dataset_id + " has no clips");
  to_little_endian(payload);

  std::filesystem::create_directories(m.directory);
  const auto tmp = m.payload_path().string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw IoError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, m.payload_path());

  json entries = json::array();
  for (const auto& e : m.entries)
    entries.push_back({{"video_id", e.labels.video_id},
                       {"clip_count", e.clip_count},
                       {"static_count", e.static_count},
                       {"static_frames", e.static_frames},
                       {"offset", e.offset},
                       {"length", e.length},
                       {"labels", to_json(e.labels)}});
  json doc = {{"dataset_id", dataset_id},
              {"feature_dim", m.feature_dim},
              {"tokens_per_clip", m.tokens_per_clip},
              {"element", "float32-le"},
              {"layout", "row-major [tokens x d] per clip; temporal clips then static clips per video"},
              {"encoder_fingerprint", encoder_fingerprint},
              {"entries", entries}};
  write_json_file(m.directory / "manifest.json", doc);
  m.index();
  return m;
}

FeatureManifest load_manifest(const std::filesystem::path& root, const std::string& dataset_id) {
  const auto dir = root / dataset_id;
  if (!std::filesystem::exists(dir / "manifest.json"))
    throw IoError("no feature manifest at " + (dir / "manifest.json").string() + " (run `anon extract` first)");
  const json doc = read_json_file(dir / "manifest.json");
  FeatureManifest m;
  try {
    m.dataset_id = doc.at("dataset_id").get<std::string>();
    m.feature_dim = doc.at("feature_dim").get<int>();
    m.tokens_per_clip = doc.at("tokens_per_clip").get<int>();
    m.encoder_fingerprint = doc.at("encoder_fingerprint").get<std::string>();
    if (doc.at("element").get<std::string>() != "float32-le") throw IoError("unsupported element type in " + dir.string());
    for (const auto& je : doc.at("entries")) {
      ManifestEntry e;
      e.labels = video_from_json(je.at("labels"));
      e.clip_count = je.at("clip_count").get<int>();
      e.static_count = je.at("static_count").get<int>();
      e.static_frames = je.at("static_frames").get<std::vector<int>>();
      e.offset = je.at("offset").get<std::uint64_t>();
      e.length = je.at("length").get<std::uint64_t>();
      m.entries.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + (dir / "manifest.json").string() + ": " + e.what());
  }
  m.directory = dir;
  m.index();
  if (m.by_id_.size() != m.entries.size()) throw IoError("manifest " + dataset_id + " repeats a video_id");
  for (const auto& e : m.entries)
    if (e.length != static_cast<std::uint64_t>(e.clip_count + e.static_count) * m.clip_bytes())
      throw IoError("manifest " + dataset_id + ": byte length of " + e.labels.video_id + " disagrees with its clip count");
  return m;
}

void check_fingerprint(const FeatureManifest& manifest, const std::string& live_fingerprint) {
  if (manifest.encoder_fingerprint != live_fingerprint)
    throw FingerprintMismatch("dataset " + manifest.dataset_id + " was extracted with encoder " +
                              manifest.encoder_fingerprint + " but the live encoder is " + live_fingerprint +
                              " (re-run `anon extract`)");
}

ClipSelector ClipSelector::parse(const std::string& text) {
  std::istringstream in(text);
  std::string a, b;
  in >> a;
  if (a == "all") return all();
  int n = -1;
  if (a == "index" && (in >> n)) return index(n);
  if (a == "evenly" && (in >> b) && b == "spaced" && (in >> n)) return evenly_spaced(n);
  throw ConfigError("bad clip selector '" + text + "' (expected all, index <k> or evenly spaced <n>)");
}

std::string ClipSelector::describe() const {
  switch (kind) {
    case Kind::kAll: return "all";
    case Kind::kIndex: return "index " + std::to_string(value);
    case Kind::kEvenlySpaced: return "evenly spaced " + std::to_string(value);
  }
  return "?";
}

std::vector<int> evenly_spaced_indices(int clip_count, int n) {
  if (clip_count < 1) throw RangeError("evenly_spaced_indices: video has no clips");
  if (n < 1) throw RangeError("evenly_spaced_indices: need at least one clip");
  std::vector<int> idx;
  for (int i = 0; i < n; ++i)
    idx.push_back(static_cast<int>(static_cast<long long>(i) * clip_count / n));
  return idx;
}

std::vector<FeatureClip> read_features(const FeatureManifest& manifest, const std::vector<std::string>& video_ids,
                                       const ClipSelector& selector, bool is_static) {
  std::vector<FeatureClip> out;
  for (const auto& id : video_ids) {
    const ManifestEntry& e = manifest.entry(id);
    const int count = is_static ? e.static_count : e.clip_count;
    std::vector<int> idx;
    switch (selector.kind) {
      case ClipSelector::Kind::kAll:
        for (int i = 0; i < count; ++i) idx.push_back(i);
        break;
      case ClipSelector::Kind::kIndex:
        if (selector.value < 0 || selector.value >= count)
          throw RangeError("clip index " + std::to_string(selector.value) + " outside [0, " + std::to_string(count) +
                           ") for video " + id);
        idx.push_back(selector.value);
        break;
      case ClipSelector::Kind::kEvenlySpaced:
        idx = evenly_spaced_indices(count, selector.value);
        break;
    }
    const std::vector<char> bytes = read_range(manifest.payload_path(), e.offset, e.length);
    const std::size_t base = is_static ? static_cast<std::size_t>(e.clip_count) : 0;
    for (int i : idx) {
      FeatureClip c;
      c.video_id = id;
      c.clip_index = i;
      c.is_static = is_static;
      c.tokens = clip_from_bytes(bytes.data() + (base + static_cast<std::size_t>(i)) * manifest.clip_bytes(),
                                 manifest.tokens_per_clip, manifest.feature_dim);
      out.push_back(std::move(c));
    }
  }
  return out;
}

int sample_clip_index(int clip_count, std::uint64_t seed) {
  if (clip_count < 1) throw DomainError("cannot sample a clip from a video without clips");
  Rng rng(seed);
  return static_cast<int>(rng.below(static_cast<std::uint64_t>(clip_count)));
}

FeatureClip sample_training_clip(const FeatureManifest& manifest, const std::string& video_id, std::uint64_t seed) {
  const ManifestEntry& e = manifest.entry(video_id);
  if (e.clip_count < 1) throw DomainError("video " + video_id + " has no stored clips");
  return read_features(manifest, {video_id}, ClipSelector::index(sample_clip_index(e.clip_count, seed)))[0];
}

FeatureTable FeatureTable::load(const FeatureManifest& manifest) {
  FeatureTable t;
  t.manifest = manifest;
  std::ifstream in(manifest.payload_path(), std::ios::binary);
  if (!in) throw IoError("cannot open feature payload " + manifest.payload_path().string());
  std::vector<char> all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  for (const auto& e : manifest.entries) {
    if (e.offset + e.length > all.size()) throw IoError("feature payload of " + manifest.dataset_id + " is truncated");
    VideoFeatures v;
    v.labels = e.labels;
    v.static_frames = e.static_frames;
    const char* p = all.data() + e.offset;
    for (int i = 0; i < e.clip_count + e.static_count; ++i) {
      Mat<float> c = clip_from_bytes(p + static_cast<std::size_t>(i) * manifest.clip_bytes(), manifest.tokens_per_clip,
                                     manifest.feature_dim);
      (i < e.clip_count ? v.clips : v.static_clips).push_back(std::move(c));
    }
    t.videos.push_back(std::move(v));
  }
  return t;
}

std::size_t FeatureTable::index_of(const std::string& video_id) const {
  for (std::size_t i = 0; i < videos.size(); ++i)
    if (videos[i].labels.video_id == video_id) return i;
  throw LookupError("dataset " + manifest.dataset_id + " has no video " + video_id);
}

const VideoFeatures& FeatureTable::video(const std::string& video_id) const { return videos[index_of(video_id)]; }

}  // namespace anon
