#pragma once

// Pipeline stages over a run directory. Each stage reads its prerequisites,
// writes its artifacts, and refreshes run_manifest.json.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "asl/error.hpp"
#include "asl/graph.hpp"
#include "asl/run_config.hpp"
#include "asl/segmodel.hpp"

namespace asl::cli {

inline constexpr const char* kToolVersion = "1.0.0";

/// A stage could not run or did not complete: missing prerequisite, bad file, failed check.
class StageError : public Error {
 public:
  using Error::Error;
};

/// Exclusive lock on <run>/.lock held for the lifetime of the object.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& run_dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  int fd_ = -1;
};

namespace paths {
inline constexpr const char* kCorpusManifest = "corpus/manifest.txt";
inline constexpr const char* kPretrained = "model_pretrained.aslm";
inline constexpr const char* kFinetuned = "model_finetuned.aslm";
inline constexpr const char* kAuxManifest = "aux/manifest.txt";
inline constexpr const char* kRunManifest = "run_manifest.json";
}  // namespace paths

struct Stage {
  const RunConfig& config;
  std::filesystem::path config_path;
  std::filesystem::path run_dir;
  std::ostream& log;
};

void cmd_gen_data(const Stage& stage);
void cmd_train(const Stage& stage);
void cmd_mgu(const Stage& stage);
void cmd_finetune(const Stage& stage);
void cmd_eval(const Stage& stage);
void cmd_sweep(const Stage& stage);
void cmd_pilot(const Stage& stage);

struct GradcheckRequest {
  /// Unset runs every primitive.
  std::optional<std::vector<std::string>> primitives;
  /// Test mode: corrupt the adjoints of one primitive.
  std::optional<grad::OpKind> fault;
  double tolerance = 1e-4;
};

/// Prints the per-primitive report; returns true when the suite passes.
bool cmd_gradcheck(const GradcheckRequest& request, std::ostream& out);

/// Binary PGM (P5, maxval 255) of round(255 · (1 - MSP)).
std::vector<std::uint8_t> heatmap_pgm(const seg::ScoreMap& msp);

std::string sha256_hex(const std::vector<std::uint8_t>& bytes);

/// Records a completed stage and re-inventories every file under the run directory.
void update_manifest(const Stage& stage, const std::string& stage_name);

}  // namespace asl::cli
