// anon: command-line driver for the anonymization pipeline.

#include "anon/commands.hpp"
#include "anon/config.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

enum Exit { kOk = 0, kFailure = 1, kBadConfig = 2, kMissing = 3, kFingerprint = 4 };

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent-space anonymization pipeline on a synthetic world"};
  app.require_subcommand(1);

  std::string config_file;
  std::vector<std::string> overrides;
  std::string output_dir;
  bool quiet = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_file, "JSON run configuration (merged over the defaults)")
        ->check(CLI::ExistingFile);
    sub->add_option("-s,--set", overrides, "override a field, e.g. --set train.epochs=50 (repeatable)");
    sub->add_option("-o,--output-dir", output_dir, "shorthand for --set output_dir=...");
    sub->add_flag("-q,--quiet", quiet, "do not echo the resolved configuration");
  };

  std::vector<std::pair<CLI::App*, anon::Command>> subs;
  const std::map<std::string, std::string> help{
      {"gen", "generate the synthetic corpora"},
      {"extract", "encode every corpus into the feature store"},
      {"pretrain", "identity-pretrain the adapter"},
      {"train", "adversarial anonymization training"},
      {"eval", "evaluate raw and anonymized features"},
      {"bias", "gender-bias protocol report"},
      {"tradeoff", "privacy-utility curve over budget/task weights"},
  };
  for (const auto& [name, fn] : anon::commands()) {
    CLI::App* sub = app.add_subcommand(name, help.at(name));
    add_common(sub);
    subs.emplace_back(sub, fn);
  }
  CLI::App* pipeline = app.add_subcommand("pipeline", "gen, extract, pretrain, train and eval in sequence");
  add_common(pipeline);
  CLI::App* show = app.add_subcommand("config", "print the resolved configuration and exit");
  add_common(show);

  CLI11_PARSE(app, argc, argv);

  try {
    if (!output_dir.empty()) overrides.insert(overrides.begin(), "output_dir=\"" + output_dir + "\"");
    const anon::RunConfig cfg = anon::load_run_config(config_file, overrides);
    if (show->parsed()) {
      std::cout << anon::to_json(cfg).dump(2) << "\n";
      return kOk;
    }
    if (!quiet) std::cout << anon::to_json(cfg).dump(2) << "\n";
    anon::Logger log(&std::cout);
    std::vector<anon::Command> todo;
    if (pipeline->parsed()) {
      for (const auto& [name, fn] : anon::commands())
        if (name != "bias" && name != "tradeoff") todo.push_back(fn);
    }
    for (const auto& [sub, fn] : subs)
      if (sub->parsed()) todo.push_back(fn);
    for (const auto& fn : todo) fn(cfg, log);
    return kOk;
  } catch (const anon::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kBadConfig;
  } catch (const anon::MissingArtifact& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kMissing;
  } catch (const anon::FingerprintMismatch& e) {
    std::cerr << "fingerprint mismatch: " << e.what() << "\n";
    return kFingerprint;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}
