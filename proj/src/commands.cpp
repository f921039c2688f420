#include "mgil/commands.hpp"

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "mgil/checkpoint.hpp"
#include "mgil/config.hpp"

namespace mgil {

namespace fs = std::filesystem;

const char* metric_name(Task task) { return task == Task::classify ? "top1" : "pck"; }

namespace {

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string csv_row(const EpochRecord& e) {
  char seconds[32];
  std::snprintf(seconds, sizeof seconds, "%.3f", e.seconds);
  return std::to_string(e.epoch) + "," + format_double(e.train_loss) + "," + format_double(e.metric) + "," + seconds;
}

constexpr const char* kMetricsHeader = "epoch,train_loss,eval_metric,seconds";

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

std::string checkpoint_name(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%04zu.ckpt", epoch);
  return buf;
}

void write_checkpoint(const fs::path& dir, const RunConfig& config, Net<float>& net, Trainer& trainer) {
  const Checkpoint ckpt = capture_checkpoint(config, net, trainer);
  const fs::path path = dir / "checkpoints" / checkpoint_name(trainer.epoch());
  save_checkpoint(path, ckpt);
  fs::copy_file(path, dir / "last.ckpt", fs::copy_options::overwrite_existing);
}

// Runs `body`, mapping the library's error types to exit codes.
template <typename Body>
int guarded(std::ostream& err, Body&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << "\n";
    return kExitCheckpoint;
  } catch (const NanLossError& e) {
    err << "error: " << e.what() << "\n";
    return kExitNonFinite;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace

int cmd_train(const TrainCommand& command, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig config = load_config(command.config);
    const fs::path dir = command.output_dir ? *command.output_dir : fs::path(config.output_dir);
    fs::create_directories(dir / "checkpoints");
    const std::string canonical = dump_config(config);
    write_text(dir / "config.json", canonical);

    const DataSplits data = load_data(config);
    Net<float> net(config.net_spec(), config.seed);
    Trainer trainer(net, data.train, &data.test, config.optim, config.train_options(), config.seed);
    trainer.record().config_hash = fnv1a64(canonical);

    if (command.resume) {
      const Checkpoint ckpt = load_checkpoint(*command.resume);
      if (ckpt.config_hash != trainer.record().config_hash) {
        throw ConfigError("config: resume checkpoint was written with a different config (hash mismatch)");
      }
      restore_training(ckpt, net, trainer);
      out << "resumed from " << command.resume->string() << " at epoch " << trainer.epoch() << "\n";
    }

    // The CSV always mirrors the run history, so a resumed run has one row
    // per completed epoch as well.
    std::ofstream metrics(dir / "metrics.csv", std::ios::trunc);
    metrics << kMetricsHeader << "\n";
    for (const auto& e : trainer.record().epochs) metrics << csv_row(e) << "\n";
    metrics.flush();

    if (trainer.epoch() == 0) write_checkpoint(dir, config, net, trainer);
    trainer.run([&](const EpochRecord& e) {
      metrics << csv_row(e) << "\n";
      metrics.flush();
      write_checkpoint(dir, config, net, trainer);
      out << "epoch " << e.epoch << "/" << config.epochs << "  loss " << std::setprecision(6) << e.train_loss << "  "
          << metric_name(config.task) << " " << std::fixed << std::setprecision(4) << e.metric << std::defaultfloat
          << "  (" << std::setprecision(3) << e.seconds << " s)\n";
    });
    if (!metrics) throw std::runtime_error("cannot write " + (dir / "metrics.csv").string());
    out << "wrote " << (dir / "last.ckpt").string() << "\n";
    return static_cast<int>(kExitOk);
  });
}

int cmd_eval(const fs::path& checkpoint, const std::string& data, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const Checkpoint ckpt = load_checkpoint(checkpoint);
    if (fnv1a64(ckpt.config_json) != ckpt.config_hash) {
      throw CheckpointError("checkpoint: embedded config does not match its hash");
    }
    RunConfig config;
    try {
      config = parse_config(ckpt.config_json);
    } catch (const ConfigError& e) {
      throw CheckpointError(std::string("checkpoint: embedded config is invalid: ") + e.what());
    }
    Net<float> net(config.net_spec(), config.seed);
    restore_parameters(ckpt, net);
    const Dataset test = load_test_data(config, data);
    const double metric = evaluate(net, test, config.train.pck_fraction);
    out << metric_name(config.task) << " " << std::fixed << std::setprecision(4) << metric << "\n";
    return static_cast<int>(kExitOk);
  });
}

int cmd_gradcheck(std::ostream& out, std::ostream& err, const std::vector<GradcheckCase>& cases) {
  return guarded(err, [&] {
    const auto results = run_gradcheck(cases);
    print_gradcheck_report(out, results, kGradcheckTolerance);
    std::string failing;
    for (const auto& r : results) {
      if (!r.passed) failing += (failing.empty() ? "" : " ") + r.op;
    }
    if (failing.empty()) return static_cast<int>(kExitOk);
    err << "gradcheck failed: " << failing << "\n";
    return static_cast<int>(kExitGradcheck);
  });
}

int cmd_ablate(const fs::path& config_path, const std::optional<fs::path>& output_dir, std::ostream& out,
               std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig config = load_config(config_path);
    const fs::path dir = output_dir ? *output_dir : fs::path(config.output_dir);
    fs::create_directories(dir);
    const std::string canonical = dump_config(config);
    write_text(dir / "config.json", canonical);

    const DataSplits data = load_data(config);
    AblationSetup setup{config.net_spec(), config.optim, config.train_options(), fnv1a64(canonical)};
    const auto grid = ablation_preset(config.ablation.preset);
    const AblationTable table =
        ablate(grid, config.ablation.seeds, setup, data.train, data.test, [&](const AblationRun& run) {
          out << run.variant.name << " seed " << run.seed << ": " << metric_name(config.task) << " " << std::fixed
              << std::setprecision(4) << run.record.final_metric() << std::defaultfloat << "\n";
        });
    {
      std::ofstream csv(dir / "ablation.csv", std::ios::trunc);
      table.write_csv(csv);
      if (!csv) throw std::runtime_error("cannot write " + (dir / "ablation.csv").string());
    }
    const std::string rendered = table.render();
    write_text(dir / "ablation.txt", rendered);
    out << rendered;
    return static_cast<int>(kExitOk);
  });
}

}  // namespace mgil
