#include <iostream>

#include <CLI11.hpp>

#include "mgil/commands.hpp"
#include "mgil/parallel.hpp"

int main(int argc, char** argv) {
  mgil::configure_threads_from_env();

  CLI::App app{"Multi-granularity downsampling: training, evaluation and checks"};
  app.require_subcommand(1);

  mgil::TrainCommand train;
  std::string train_resume, train_output;
  auto* train_cmd = app.add_subcommand("train", "Train a network from a JSON config");
  train_cmd->add_option("--config", train.config, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--resume", train_resume, "Checkpoint to continue from")->check(CLI::ExistingFile);
  train_cmd->add_option("--output", train_output, "Output directory (overrides output_dir)");

  std::string eval_ckpt, eval_data;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--ckpt", eval_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", eval_data, "CIFAR-10 directory, or 'synthetic'")->required();

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");

  std::string ablate_config, ablate_output;
  auto* ablate_cmd = app.add_subcommand("ablate", "Run an ablation grid over seeds");
  ablate_cmd->add_option("--config", ablate_config, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  ablate_cmd->add_option("--output", ablate_output, "Output directory (overrides output_dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : mgil::kExitConfig;
  }

  if (*train_cmd) {
    if (!train_resume.empty()) train.resume = train_resume;
    if (!train_output.empty()) train.output_dir = train_output;
    return mgil::cmd_train(train, std::cout, std::cerr);
  }
  if (*eval_cmd) return mgil::cmd_eval(eval_ckpt, eval_data, std::cout, std::cerr);
  if (*grad_cmd) return mgil::cmd_gradcheck(std::cout, std::cerr);
  std::optional<std::filesystem::path> out;
  if (!ablate_output.empty()) out = ablate_output;
  return mgil::cmd_ablate(ablate_config, out, std::cout, std::cerr);
}
