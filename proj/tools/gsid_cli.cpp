#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "gsid/pipeline.hpp"

using namespace gsid;

namespace {

constexpr int kUsage = 2;
constexpr int kRuntime = 3;

int fail(const std::string& command, int code, const std::string& kind, const std::string& message) {
  std::cerr << json{{"level", "error"}, {"command", command}, {"exit_code", code}, {"kind", kind}, {"message", message}}
                   .dump()
            << std::endl;
  return code;
}

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("gsid");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%H:%M:%S] %l %v");
  const char* level = std::getenv("GSID_LOG_LEVEL");
  spdlog::set_level(level ? spdlog::level::from_str(level) : spdlog::level::info);
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"gsid: generative semantic indexing pipeline"};
  app.require_subcommand(1);

  std::string config_path, out_dir, from, preset = "desk";
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
  app.add_option("--config", config_path, "JSON config file; keys override the defaults");
  app.add_option("--seed", seed, "master seed");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--from", from, "input checkpoint (train: pre-trained, others: trained model)");
  app.add_option("--set", sets, "override a config key, e.g. --set gsid.temperature=1");
  app.add_option("--preset", preset, "base config")->check(CLI::IsMember({"desk", "paper"}));

  auto* synth = app.add_subcommand("synth", "write the synthetic corpus");
  auto* pretrain = app.add_subcommand("pretrain", "multi-task pre-training (resumable)");
  auto* train = app.add_subcommand("train", "progressive GSID training, steps 1..M");
  auto* index = app.add_subcommand("index", "assign semantic IDs to every item");
  auto* retrieve = app.add_subcommand("retrieve", "rank items for queries");
  auto* eval = app.add_subcommand("eval", "held-out metrics report");
  auto* show = app.add_subcommand("config", "print the resolved config");

  std::string mode = "generative", queries_file;
  std::vector<std::string> queries;
  std::size_t k = 10, width = 0;
  retrieve->add_option("--mode", mode)->check(CLI::IsMember({"generative", "dense"}));
  retrieve->add_option("--query,-q", queries, "query text (repeatable)");
  retrieve->add_option("--queries", queries_file, "file with one query per line");
  retrieve->add_option("--k", k, "results per query");
  retrieve->add_option("--width", width, "beam width (generative); default eval.beam_width");
  for (auto* sub : {synth, pretrain, train, index, retrieve, eval, show}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(app.get_subcommands().empty() ? "" : app.get_subcommands()[0]->get_name(), kUsage, "usage", e.what());
  }
  const std::string command = app.get_subcommands()[0]->get_name();

  RunConfig cfg;
  try {
    json doc = default_config();
    if (preset == "paper") doc = merge_config(doc, paper_scale_overrides());
    if (!config_path.empty()) {
      json file;
      try {
        file = json::parse(read_file(config_path));
      } catch (const json::exception& e) {
        throw ConfigError("config file " + config_path + ": " + e.what());
      } catch (const DataError& e) {
        throw ConfigError(e.what());
      }
      doc = merge_config(doc, file);
    }
    for (const auto& s : sets) doc = merge_config(doc, override_from_assignment(s));
    if (seed) doc = merge_config(doc, json{{"seed", *seed}});
    if (!out_dir.empty()) doc = merge_config(doc, json{{"out_dir", out_dir}});
    cfg = resolve_config(doc);
    if (!queries_file.empty()) {
      std::istringstream in(read_file(queries_file));
      for (std::string line; std::getline(in, line);) {
        if (!line.empty()) queries.push_back(line);
      }
    }
  } catch (const std::exception& e) {
    return fail(command, kUsage, "config", e.what());
  }

  const std::optional<std::filesystem::path> source =
      from.empty() ? std::nullopt : std::optional<std::filesystem::path>(from);
  try {
    if (command == "config") {
      std::cout << cfg.doc.dump(2) << std::endl;
    } else if (command == "synth") {
      cmd_synth(cfg);
    } else if (command == "pretrain") {
      auto s = cmd_pretrain(cfg);
      if (!s.epoch_losses.empty()) {
        spdlog::info("pretrain: loss {:.4f} -> {:.4f}", s.initial_loss, s.epoch_losses.back());
      }
    } else if (command == "train") {
      cmd_train(cfg, source);
    } else if (command == "index") {
      auto idx = cmd_index(cfg, source);
      spdlog::info("index: {} items", idx.size());
    } else if (command == "retrieve") {
      if (queries.empty()) return fail(command, kUsage, "usage", "retrieve needs --query or --queries");
      RetrieveRequest req{mode == "dense" ? RetrieveMode::dense : RetrieveMode::generative, queries, k, width};
      for (const auto& list : cmd_retrieve(cfg, req, source)) {
        json items = json::array();
        for (const auto& it : list.items) items.push_back({{"item_id", it.id}, {"score", it.score}});
        std::cout << json{{"query_id", list.query_id}, {"items", items}}.dump() << '\n';
      }
    } else if (command == "eval") {
      std::cout << cmd_eval(cfg, source).dump(2) << std::endl;
    }
  } catch (const ConfigError& e) {
    return fail(command, kUsage, "config", e.what());
  } catch (const InvalidInput& e) {
    return fail(command, kUsage, "invalid_input", e.what());
  } catch (const std::exception& e) {
    return fail(command, kRuntime, "runtime", e.what());
  }
  return 0;
}
