// asl: experiment runner. Exit codes: 0 success, 1 stage failure, 2 usage or config error.

#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "asl/pipeline.hpp"
#include "asl/run_config.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kStageFailure = 1;
constexpr int kUsage = 2;

std::optional<asl::grad::OpKind> parse_op(const std::string& name) {
  for (int k = 0; k <= static_cast<int>(asl::grad::OpKind::kMaskedMean); ++k) {
    const auto op = static_cast<asl::grad::OpKind>(k);
    if (asl::grad::op_name(op) == name) return op;
  }
  return std::nullopt;
}

std::vector<std::string> split_names(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Anomaly-aware segmentation experiment runner"};
  app.require_subcommand(1, 1);
  app.set_version_flag("--version", asl::cli::kToolVersion);

  std::string config_path;
  std::string run_dir;
  std::optional<std::uint64_t> seed;

  using StageFn = std::function<void(const asl::cli::Stage&)>;
  const std::map<std::string, std::pair<StageFn, std::string>> stages = {
      {"gen-data", {asl::cli::cmd_gen_data, "Generate the synthetic corpus"}},
      {"train", {asl::cli::cmd_train, "Supervised pre-training"}},
      {"mgu", {asl::cli::cmd_mgu, "Build the auxiliary set by masked gradient update"}},
      {"finetune", {asl::cli::cmd_finetune, "Anomaly-aware fine-tuning"}},
      {"eval", {asl::cli::cmd_eval, "Anomaly metrics and heatmaps for every checkpoint"}},
      {"sweep", {asl::cli::cmd_sweep, "Threshold sweep for every checkpoint"}},
      {"pilot", {asl::cli::cmd_pilot, "Known-unknown selection-bias pilot"}},
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, entry] : stages) {
    CLI::App* sub = app.add_subcommand(name, entry.second);
    sub->add_option("--config", config_path, "Config file")->required();
    sub->add_option("--run", run_dir, "Run directory")->required();
    sub->add_option("--seed", seed, "Override the master seed");
    subs[name] = sub;
  }

  CLI::App* gc = app.add_subcommand("gradcheck", "Finite-difference check of every autodiff primitive");
  std::optional<std::string> primitives;
  std::string fault;
  gc->add_option("--config", config_path, "Ignored; accepted for a uniform interface");
  gc->add_option("--run", run_dir, "Ignored; accepted for a uniform interface");
  gc->add_option("--seed", seed, "Ignored");
  gc->add_option("--primitives", primitives, "Comma-separated primitive names (empty string: none)");
  gc->add_option("--inject-fault", fault, "Test mode: corrupt the gradient of one primitive")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  if (gc->parsed()) {
    asl::cli::GradcheckRequest request;
    if (primitives) request.primitives = split_names(*primitives);
    if (!fault.empty()) {
      request.fault = parse_op(fault);
      if (!request.fault) {
        std::cerr << "asl: unknown primitive '" << fault << "'\n";
        return kUsage;
      }
    }
    try {
      return asl::cli::cmd_gradcheck(request, std::cout) ? kOk : kStageFailure;
    } catch (const asl::InvalidArgument& e) {
      std::cerr << "asl gradcheck: " << e.what() << "\n";
      return kUsage;
    }
  }

  for (const auto& [name, sub] : subs) {
    if (!sub->parsed()) continue;
    asl::cli::RunConfig config;
    try {
      config = asl::cli::load_config(config_path);
      if (seed) asl::cli::apply_seed(config, *seed);
      asl::cli::validate(config);
    } catch (const asl::Error& e) {
      std::cerr << "asl " << name << ": " << e.what() << "\n";
      return kUsage;
    }
    try {
      asl::cli::RunLock lock(run_dir);
      stages.at(name).first(asl::cli::Stage{config, config_path, run_dir, std::cerr});
    } catch (const std::exception& e) {
      std::cerr << "asl " << name << ": " << e.what() << "\n";
      return kStageFailure;
    }
    return kOk;
  }
  return kUsage;
}
