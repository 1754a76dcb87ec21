#pragma once

// Experiment configuration: a sectioned `key = value` file covering every
// pipeline stage, validated as a whole before any stage touches the disk.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "asl/aaft.hpp"
#include "asl/error.hpp"
#include "asl/mgu.hpp"
#include "asl/scenes.hpp"
#include "asl/segmodel.hpp"
#include "asl/training.hpp"

namespace asl::cli {

/// Raised for unreadable, malformed or invalid configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

enum class PartitionKind { kRandom, kIcosahedral };

struct PilotBlock {
  PartitionKind partition = PartitionKind::kRandom;
  std::size_t subsets = 4;
  seg::SgdOptions train{10, 0.1, 256, 1, true};
};

struct EvalBlock {
  std::vector<double> deltas;
  double target_tpr = 0.95;
};

struct RunConfig {
  std::uint64_t seed = 1;
  scenes::CorpusConfig corpus;
  seg::ModelShape model;
  seg::SgdOptions pretrain{10, 0.1, 256, 1, true};
  mgu::MguConfig mgu;
  aaft::LossConfig aaft;
  seg::SgdOptions finetune{10, 0.05, 256, 1, true};
  EvalBlock eval;
  PilotBlock pilot;

  /// Normalized `section.key -> value` view of every setting, for the manifest.
  std::map<std::string, std::string> snapshot() const;
};

/// Defaults with the derived fields (grid, per-stage seeds) filled in.
RunConfig default_config();

/// Parses text; unknown sections or keys are errors. Throws ConfigError.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

/// Replaces the master seed and every seed derived from it.
void apply_seed(RunConfig& config, std::uint64_t seed);

/// Checks every block against its module's preconditions. Throws ConfigError.
void validate(const RunConfig& config);

}  // namespace asl::cli
