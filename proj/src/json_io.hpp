#pragma once

// JSON conversions for library types (internal to the library sources).

#include "anon/datagen.hpp"
#include "anon/errors.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <string>

namespace anon {

using json = nlohmann::json;

inline json to_json(const Segment& s) { return json{{"start", s.start}, {"end", s.end}, {"label", s.label}}; }

inline Segment segment_from_json(const json& j) {
  return {j.at("start").get<double>(), j.at("end").get<double>(), j.at("label").get<int>()};
}

inline json to_json(const VideoRecord& v) {
  json segs = json::array();
  for (const auto& s : v.segments) segs.push_back(to_json(s));
  return json{{"video_id", v.video_id},         {"subject", v.subject},
              {"gender", to_string(v.gender)},  {"attributes", v.attributes},
              {"action", v.action},             {"segments", segs},
              {"anomalous", v.anomalous},       {"anomaly_clips", v.anomaly_clips},
              {"num_frames", v.num_frames},     {"render_seed", std::to_string(v.render_seed)}};
}

inline VideoRecord video_from_json(const json& j) {
  VideoRecord v;
  v.video_id = j.at("video_id").get<std::string>();
  v.subject = j.at("subject").get<int>();
  v.gender = gender_from_string(j.at("gender").get<std::string>());
  v.attributes = j.at("attributes").get<std::vector<int>>();
  v.action = j.at("action").get<int>();
  for (const auto& s : j.at("segments")) v.segments.push_back(segment_from_json(s));
  v.anomalous = j.at("anomalous").get<int>();
  v.anomaly_clips = j.at("anomaly_clips").get<std::vector<int>>();
  v.num_frames = j.at("num_frames").get<int>();
  v.render_seed = std::stoull(j.at("render_seed").get<std::string>());
  return v;
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

// Writes through a temporary file so readers never see a partial document.
inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out << text;
    if (!out) throw IoError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline void write_json_file(const std::filesystem::path& path, const json& j) { write_text_file(path, j.dump(2) + "\n"); }

}  // namespace anon
