// entsel: train / eval / analyze / serve / export.

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>

#include <malloc.h>
#include <pthread.h>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "entsel/log.hpp"
#include "entsel/telemetry.hpp"
#include "entsel/trainer.hpp"

namespace fs = std::filesystem;
using namespace entsel;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void fail_line(const std::string& kind, const std::string& message) {
  std::cerr << nlohmann::json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << '\n';
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw UsageError(what + " not found: " + p.string());
}

fs::path manifest_path(const fs::path& p) {
  if (fs::is_directory(p)) return p / "checkpoint.json";
  return p;
}

void write_json(const nlohmann::json& j, const std::string& out) {
  if (out.empty() || out == "-") {
    std::cout << j.dump() << '\n';
    return;
  }
  std::ofstream f(out);
  if (!f) throw std::runtime_error("cannot write " + out);
  f << j.dump(2) << '\n';
}

/// Blocks SIGINT/SIGTERM in every thread started afterwards so the main
/// thread can collect them with sigwait.
sigset_t block_stop_signals() {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  return set;
}

}  // namespace

int main(int argc, char** argv) {
  // Training churns through many mid-sized matrices; keeping them off mmap
  // and untrimmed avoids most page-fault time.
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
  mallopt(M_TRIM_THRESHOLD, 128 << 20);
  init_logging();
  CLI::App app{"Entropy-guided sample selection for human-in-the-loop RL"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for all subcommands");

  // --- train ---
  auto* train_cmd = app.add_subcommand("train", "run training (headless unless --serve-port is given)");
  std::string config_path;
  std::string out_dir;
  std::optional<int> serve_port;
  std::string record_path;
  std::string static_dir;
  std::map<std::string, std::string> overrides;
  const TrainConfig defaults;
  train_cmd->add_option("--config", config_path, "flat key = value config file")->check(CLI::ExistingFile);
  train_cmd->add_option("--out", out_dir, "output directory for metrics, summary, checkpoints, buffer");
  train_cmd->add_option("--serve-port", serve_port, "serve live telemetry on this port (0 = any free)");
  train_cmd->add_option("--record", record_path, "append outbound telemetry to this JSON-lines file");
  train_cmd->add_option("--static-dir", static_dir, "serve static UI assets from here (with --serve-port)");
  auto* keys = train_cmd->add_option_group("config keys", "override any config key (dotted names)");
  for (const auto& k : config_keys()) {
    keys->add_option_function<std::string>(
            "--" + k.key, [&overrides, key = k.key](const std::string& v) { overrides[key] = v; }, k.help)
        ->default_str(defaults.get(k.key))
        ->type_name(k.key == "mode" ? "MODE" : "VALUE");
  }

  // --- eval ---
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint with deterministic actions");
  std::string checkpoint;
  int episodes = 20;
  std::uint64_t eval_seed = 0;
  std::string out_file;
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint manifest or run directory")->required();
  eval_cmd->add_option("--episodes", episodes, "episodes")->capture_default_str()->check(CLI::PositiveNumber);
  eval_cmd->add_option("--seed", eval_seed, "evaluation seed")->capture_default_str();
  eval_cmd->add_option("--out", out_file, "write result JSON here (default stdout)");

  // --- analyze ---
  auto* analyze_cmd = app.add_subcommand("analyze", "recompute influence for an exported buffer");
  std::string buffer_path;
  bool with_records = false;
  analyze_cmd->add_option("--buffer", buffer_path, "JSON-lines transitions")->required();
  analyze_cmd->add_option("--checkpoint", checkpoint, "checkpoint manifest or run directory")->required();
  analyze_cmd->add_option("--out", out_file, "write report JSON here (default stdout)");
  analyze_cmd->add_flag("--records", with_records, "include per-sample records in the report");

  // --- serve ---
  auto* serve_cmd = app.add_subcommand("serve", "replay a recorded telemetry session over WebSocket");
  std::string recording;
  int port = kDefaultPort;
  bool max_speed = false;
  serve_cmd->add_option("--recording", recording, "JSON-lines recording from train --record")->required();
  serve_cmd->add_option("--port", port, "listen port")->capture_default_str()->check(CLI::Range(0, 65535));
  serve_cmd->add_flag("--max-speed", max_speed, "send back to back instead of at recorded cadence");
  serve_cmd->add_option("--static-dir", static_dir, "serve static UI assets from here");

  // --- export ---
  auto* export_cmd = app.add_subcommand("export", "write buffer contents as JSON-lines");
  std::string run_dir;
  std::string source_filter;
  int demo_count = 0;
  std::string task_name = "touch2";
  std::uint64_t export_seed = 0;
  auto* run_opt = export_cmd->add_option("--run", run_dir, "training output directory");
  auto* demos_opt = export_cmd->add_option("--demos", demo_count, "collect this many scripted demo episodes instead");
  run_opt->excludes(demos_opt);
  export_cmd->add_option("--task", task_name, "task for --demos")->capture_default_str();
  export_cmd->add_option("--seed", export_seed, "seed for --demos")->capture_default_str();
  export_cmd->add_option("--source", source_filter, "keep only this source")
      ->check(CLI::IsMember({"exploration", "intervention", "demo"}));
  export_cmd->add_option("--out", out_file, "output JSON-lines file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (app.exit(e) == 0) return 0;
    fail_line("usage", e.what());
    return 2;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (command == "train") {
      TrainConfig cfg;
      if (!config_path.empty()) cfg.apply_file(config_path);
      for (const auto& [k, v] : overrides) cfg.set(k, v);
      cfg.validate();
      if (!static_dir.empty() && !serve_port) throw UsageError("--static-dir requires --serve-port");

      CommandQueue commands;
      TrainHooks hooks;
      std::unique_ptr<TelemetryServer> server;
      std::unique_ptr<RecordingSink> recorder;
      if (serve_port) {
        ServerOptions so;
        so.port = static_cast<std::uint16_t>(*serve_port);
        if (!static_dir.empty()) so.static_dir = static_dir;
        server = std::make_unique<TelemetryServer>(so, commands);
        server->start();
        spdlog::warn("telemetry on ws://127.0.0.1:{}/", server->port());
        hooks.sinks.push_back(server.get());
        hooks.commands = &commands;
      }
      if (!record_path.empty()) {
        recorder = std::make_unique<RecordingSink>(record_path);
        hooks.sinks.push_back(recorder.get());
      }
      if (!out_dir.empty()) hooks.out_dir = fs::path(out_dir);

      const TrainResult res = train(cfg, hooks);
      if (!out_dir.empty()) {
        std::vector<Transition> all = res.replay.contents();
        for (const auto& t : res.demo.contents()) {
          if (t.source == Source::kDemo) all.push_back(t);
        }
        export_jsonl(fs::path(out_dir) / "buffer.jsonl", all);
      }
      std::cout << res.summary.to_json().dump() << '\n';
      if (res.summary.aborted) {
        fail_line("non_finite", res.summary.error);
        return 3;
      }
      return 0;
    }

    if (command == "eval") {
      const fs::path manifest = manifest_path(checkpoint);
      require_file(manifest, "checkpoint");
      TrainConfig cfg;
      const Agent agent = Agent::from_checkpoint(Checkpoint::load(manifest), &cfg);
      Rng rng(eval_seed, "eval-cli");
      const double rate = evaluate(agent.policy, make_task(cfg.task), episodes, rng);
      write_json({{"success_rate", rate}, {"episodes", episodes}, {"task", cfg.task}}, out_file);
      return 0;
    }

    if (command == "analyze") {
      require_file(buffer_path, "buffer");
      const fs::path manifest = manifest_path(checkpoint);
      require_file(manifest, "checkpoint");
      TrainConfig cfg;
      const Agent agent = Agent::from_checkpoint(Checkpoint::load(manifest), &cfg);
      const AnalysisReport rep = analyze(import_jsonl(buffer_path), agent, cfg);
      auto j = rep.to_json();
      if (with_records) {
        j["records"] = nlohmann::json::array();
        for (const auto& r : rep.records) j["records"].push_back(to_json(r));
      }
      write_json(j, out_file);
      return 0;
    }

    if (command == "serve") {
      require_file(recording, "recording");
      FixtureOptions fo;
      fo.port = static_cast<std::uint16_t>(port);
      fo.max_speed = max_speed;
      if (!static_dir.empty()) fo.static_dir = static_dir;
      sigset_t stop = block_stop_signals();
      FixtureServer server(recording, fo);
      server.start();
      std::cout << nlohmann::json{{"port", server.port()}, {"messages", server.message_count()}}.dump()
                << std::endl;
      int sig = 0;
      sigwait(&stop, &sig);
      server.stop();
      return 0;
    }

    if (command == "export") {
      std::vector<Transition> ts;
      if (!run_dir.empty()) {
        const fs::path p = fs::path(run_dir) / "buffer.jsonl";
        require_file(p, "buffer");
        ts = import_jsonl(p);
      } else if (demo_count > 0) {
        const TaskSpec task = make_task(task_name);
        Rng rng(export_seed, "demo");
        ts = collect_demos(task, IntervenerConfig{}, demo_count, rng, 0);
      } else {
        throw UsageError("export needs --run or --demos");
      }
      if (!source_filter.empty()) {
        const Source keep = source_from_string(source_filter);
        std::erase_if(ts, [&](const Transition& t) { return t.source != keep; });
      }
      export_jsonl(out_file, ts);
      std::cout << nlohmann::json{{"written", ts.size()}, {"out", out_file}}.dump() << '\n';
      return 0;
    }
  } catch (const UsageError& e) {
    fail_line("usage", e.what());
    std::cerr << app.get_subcommand(command)->help();
    return 2;
  } catch (const std::invalid_argument& e) {
    fail_line("invalid_argument", e.what());
    return 2;
  } catch (const std::exception& e) {
    fail_line("runtime", e.what());
    return 1;
  }
  return 1;
}
