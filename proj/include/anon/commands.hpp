#pragma once

// Pipeline stages behind the `anon` tool. Every stage writes under
// <output_dir>/<stage>/ together with a config.json snapshot, logs JSON lines
// to the console and to <stage>/log.jsonl, and returns its summary.
//
//   gen       corpora/<role>.json             corpus metadata (frames render on demand)
//   extract   features/<role>/                feature store per corpus
//   pretrain  pretrain/adapter.*              identity-pretrained adapter
//   train     train/adapter.*, head_*.*       anonymization training
//   eval      eval/report.json
//   bias      bias/report.json                gender-bias protocol
//   tradeoff  tradeoff/curve.{json,svg}       privacy-utility curve

#include "anon/config.hpp"
#include "anon/datagen.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace anon {

// Raised when an upstream artifact is absent or stale; the message names the
// command that produces it.
class MissingArtifact : public Error {
 public:
  using Error::Error;
};

class Logger {
 public:
  explicit Logger(std::ostream* console = nullptr) : console_(console) {}
  void open_file(const std::filesystem::path& path);
  void event(const std::string& name, nlohmann::json fields = nlohmann::json::object());

 private:
  std::ostream* console_;
  std::ofstream file_;
};

nlohmann::json cmd_gen(const RunConfig& cfg, Logger& log);
nlohmann::json cmd_extract(const RunConfig& cfg, Logger& log);
nlohmann::json cmd_pretrain(const RunConfig& cfg, Logger& log);
nlohmann::json cmd_train(const RunConfig& cfg, Logger& log);
nlohmann::json cmd_eval(const RunConfig& cfg, Logger& log);
nlohmann::json cmd_bias(const RunConfig& cfg, Logger& log);
nlohmann::json cmd_tradeoff(const RunConfig& cfg, Logger& log);

using Command = std::function<nlohmann::json(const RunConfig&, Logger&)>;
// Name -> command, in pipeline order.
const std::vector<std::pair<std::string, Command>>& commands();

void save_corpus(const std::filesystem::path& path, const Corpus& corpus);
Corpus load_corpus(const std::filesystem::path& path);

}  // namespace anon
