#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "asl/binary_io.hpp"
#include "asl/pipeline.hpp"
#include "asl/run_config.hpp"

namespace fs = std::filesystem;
using namespace asl;
using namespace asl::cli;

namespace {

const char* kTinyConfig = R"(
[run]
seed = 3

[corpus]
num_classes = 4
channels = 3
height = 16
width = 16
train_scenes = 6
val_scenes = 1
test_scenes = 3

[model]
patch_radius = 1
hidden = 8

[pretrain]
epochs = 10
lr = 0.1
batch = 128

[mgu]
step_size = 100
max_iters = 20
per_class_budget = 1

[aaft]
alpha = 0.5
loss = ER
epochs = 4
lr = 0.05
batch = 128

[eval]
delta_count = 11

[pilot]
subsets = 2
epochs = 1
lr = 0.1
batch = 128
)";

struct CommandResult {
  int code = -1;
  std::string out;
  std::string err;
};

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = fs::temp_directory_path() / ("asl_cli_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

CommandResult run_asl(const std::string& args, const fs::path& scratch) {
  const fs::path out = scratch / "stdout.txt";
  const fs::path err = scratch / "stderr.txt";
  const std::string cmd = std::string("\"") + ASL_BINARY + "\" " + args + " >\"" + out.string() + "\" 2>\"" +
                          err.string() + "\"";
  const int status = std::system(cmd.c_str());
  CommandResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

fs::path write_config(const fs::path& dir, const std::string& name, const std::string& text) {
  const fs::path p = dir / name;
  io::write_text(p, text);
  return p;
}

}  // namespace

TEST(Config, DefaultFileParsesAndValidates) {
  const RunConfig c = load_config(ASL_DEFAULT_CONFIG);
  EXPECT_NO_THROW(validate(c));
  EXPECT_EQ(c.corpus.num_classes, 12u);
  EXPECT_EQ(c.model.num_classes, 12u);
  EXPECT_EQ(c.model.channels, c.corpus.channels);
  EXPECT_DOUBLE_EQ(c.mgu.step_size, 100.0);
  EXPECT_EQ(c.eval.deltas.size(), 101u);
  EXPECT_DOUBLE_EQ(c.eval.deltas.front(), 0.0);
  EXPECT_DOUBLE_EQ(c.eval.deltas.back(), 1.0);
}

TEST(Config, UnknownKeyIsRejectedByName) {
  try {
    parse_config("[corpus]\nbogus_key = 1\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("bogus_key"), std::string::npos) << e.what();
  }
}

TEST(Config, UnknownSectionIsRejected) { EXPECT_THROW(parse_config("[nonsense]\nx = 1\n"), ConfigError); }

TEST(Config, MalformedValuesAreRejected) {
  EXPECT_THROW(parse_config("[pretrain]\nepochs = ten\n"), ConfigError);
  EXPECT_THROW(parse_config("[pretrain]\nlr = 0.1x\n"), ConfigError);
  EXPECT_THROW(parse_config("[corpus]\nlayout = spiral\n"), ConfigError);
  EXPECT_THROW(parse_config("[aaft]\nloss = MSE\n"), ConfigError);
  EXPECT_THROW(parse_config("[eval]\ndelta_count = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("[mgu]\nreinclusion = allow\n"), ConfigError);
}

TEST(Config, MissingFileIsNamed) {
  try {
    load_config("/nonexistent/asl.ini");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/asl.ini"), std::string::npos);
  }
}

TEST(Config, ModelInheritsCorpusDimensions) {
  const RunConfig c = parse_config("[corpus]\nnum_classes = 5\nchannels = 2\n");
  EXPECT_EQ(c.model.num_classes, 5u);
  EXPECT_EQ(c.model.channels, 2u);
}

TEST(Config, ApplySeedPropagates) {
  RunConfig c = default_config();
  apply_seed(c, 42);
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.corpus.seed, 42u);
  EXPECT_EQ(c.pretrain.seed, 42u);
  EXPECT_EQ(c.mgu.seed, 42u);
  EXPECT_EQ(c.finetune.seed, 42u);
  EXPECT_EQ(c.pilot.train.seed, 42u);
  EXPECT_EQ(c.snapshot().at("run.seed"), "42");
}

TEST(Config, ValidationCatchesCrossBlockErrors) {
  auto expect_invalid = [](const std::string& text) {
    const RunConfig c = parse_config(text);
    EXPECT_THROW(validate(c), ConfigError) << text;
  };
  expect_invalid("[corpus]\nnum_classes = 4\n[model]\nnum_classes = 5\n");
  expect_invalid("[mgu]\nclip_lo = 0.5\n");
  expect_invalid("[eval]\ntarget_tpr = 0\n");
  expect_invalid("[eval]\ntarget_tpr = 1.5\n");
  expect_invalid("[pilot]\nsubsets = 1\n");
  expect_invalid("[pilot]\nsubsets = 13\n");
  expect_invalid("[pilot]\npartition = icosahedral\n");
  expect_invalid("[pretrain]\nlr = 0\n");
  expect_invalid("[aaft]\nalpha = -1\n");
  EXPECT_NO_THROW(validate(parse_config("[corpus]\nlayout = icosahedral\n[pilot]\npartition = icosahedral\n")));
}

TEST(Config, SnapshotCoversEveryBlock) {
  const auto snap = default_config().snapshot();
  for (const char* key : {"run.seed", "corpus.layout", "model.hidden", "pretrain.lr", "mgu.step_size",
                          "mgu.reinclusion", "aaft.loss", "eval.deltas", "pilot.partition"}) {
    EXPECT_TRUE(snap.count(key)) << key;
  }
}

TEST(Helpers, Sha256KnownVector) {
  const std::string abc = "abc";
  EXPECT_EQ(sha256_hex({abc.begin(), abc.end()}),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(sha256_hex({}), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(Helpers, HeatmapPgmLayout) {
  seg::ScoreMap msp;
  msp.height = 2;
  msp.width = 3;
  msp.values = {1.0, 0.0, 0.5, 0.25, 0.998, 0.002};
  const auto bytes = heatmap_pgm(msp);
  const std::string header = "P5\n3 2\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 6);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + header.size()), header);
  for (std::size_t i = 0; i < 6; ++i) {
    const auto expect = static_cast<int>(std::lround(255.0 * (1.0 - msp.values[i])));
    EXPECT_EQ(bytes[header.size() + i], expect) << i;
  }
}

TEST(Cli, MissingConfigExitsWithUsageCode) {
  TempDir dir("missing");
  const auto r = run_asl("gen-data --config /nonexistent.ini --run \"" + (dir.path() / "run").string() + "\"",
                         dir.path());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("config file not found"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir.path() / "run"));
}

TEST(Cli, InvalidConfigCreatesNoRunDirectory) {
  TempDir dir("invalid");
  const fs::path cfg = write_config(dir.path(), "bad.ini", "[pilot]\nsubsets = 1\n");
  const auto r = run_asl("gen-data --config \"" + cfg.string() + "\" --run \"" + (dir.path() / "run").string() + "\"",
                         dir.path());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("subsets"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir.path() / "run"));
}

TEST(Cli, UnknownSubcommandIsUsageError) {
  TempDir dir("usage");
  EXPECT_EQ(run_asl("frobnicate", dir.path()).code, 2);
  EXPECT_EQ(run_asl("", dir.path()).code, 2);
}

TEST(Cli, EvalBeforeTrainNamesMissingCheckpoint) {
  TempDir dir("order");
  const fs::path cfg = write_config(dir.path(), "tiny.ini", kTinyConfig);
  const std::string common = " --config \"" + cfg.string() + "\" --run \"" + (dir.path() / "run").string() + "\"";
  ASSERT_EQ(run_asl("gen-data" + common, dir.path()).code, 0);
  const auto r = run_asl("eval" + common, dir.path());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find(paths::kPretrained), std::string::npos) << r.err;
  const auto m = run_asl("mgu" + common, dir.path());
  EXPECT_EQ(m.code, 1);
  EXPECT_NE(m.err.find(paths::kPretrained), std::string::npos) << m.err;
}

TEST(Cli, StageBeforeGenDataNamesMissingCorpus) {
  TempDir dir("nocorpus");
  const fs::path cfg = write_config(dir.path(), "tiny.ini", kTinyConfig);
  const auto r =
      run_asl("train --config \"" + cfg.string() + "\" --run \"" + (dir.path() / "run").string() + "\"", dir.path());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("manifest.txt"), std::string::npos) << r.err;
}

TEST(Cli, EvalRefusesCorpusWithoutTestScenes) {
  TempDir dir("notest");
  std::string text = kTinyConfig;
  text.replace(text.find("test_scenes = 3"), 15, "test_scenes = 0");
  const fs::path cfg = write_config(dir.path(), "notest.ini", text);
  const std::string common = " --config \"" + cfg.string() + "\" --run \"" + (dir.path() / "run").string() + "\"";
  ASSERT_EQ(run_asl("gen-data" + common, dir.path()).code, 0);
  ASSERT_EQ(run_asl("train" + common, dir.path()).code, 0);
  const auto r = run_asl("eval" + common, dir.path());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("no test scenes"), std::string::npos) << r.err;
}

TEST(Cli, GradcheckPassesByDefault) {
  TempDir dir("gc");
  const auto r = run_asl("gradcheck", dir.path());
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
}

TEST(Cli, GradcheckDetectsInjectedFault) {
  TempDir dir("gcfault");
  const auto r = run_asl("gradcheck --primitives tanh,relu --inject-fault tanh", dir.path());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("FAIL"), std::string::npos) << r.out;
}

TEST(Cli, GradcheckEmptyListWarns) {
  TempDir dir("gcempty");
  const auto r = run_asl("gradcheck --primitives \"\"", dir.path());
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("warning"), std::string::npos) << r.out;
}

TEST(Cli, GradcheckUnknownPrimitiveIsUsageError) {
  TempDir dir("gcunknown");
  EXPECT_EQ(run_asl("gradcheck --inject-fault nosuchop", dir.path()).code, 2);
  EXPECT_EQ(run_asl("gradcheck --primitives nosuchop", dir.path()).code, 2);
}

TEST(Cli, GenDataIsReproducible) {
  TempDir dir("repro");
  const fs::path cfg = write_config(dir.path(), "tiny.ini", kTinyConfig);
  for (const char* run : {"a", "b"}) {
    ASSERT_EQ(run_asl("gen-data --config \"" + cfg.string() + "\" --run \"" + (dir.path() / run).string() + "\"",
                      dir.path())
                  .code,
              0);
  }
  const auto files = [&](const char* run) {
    const auto bytes = io::read_file(dir.path() / run / paths::kRunManifest);
    return nlohmann::json::parse(bytes.begin(), bytes.end()).at("files");
  };
  EXPECT_EQ(files("a"), files("b"));
  EXPECT_FALSE(files("a").empty());
}

TEST(Cli, SeedOverrideChangesCorpus) {
  TempDir dir("seed");
  const fs::path cfg = write_config(dir.path(), "tiny.ini", kTinyConfig);
  const std::string c = " --config \"" + cfg.string() + "\"";
  ASSERT_EQ(run_asl("gen-data" + c + " --run \"" + (dir.path() / "a").string() + "\"", dir.path()).code, 0);
  ASSERT_EQ(run_asl("gen-data" + c + " --seed 99 --run \"" + (dir.path() / "b").string() + "\"", dir.path()).code, 0);
  EXPECT_NE(io::read_file(dir.path() / "a" / "corpus" / "train" / "0000.aseg"),
            io::read_file(dir.path() / "b" / "corpus" / "train" / "0000.aseg"));
}

TEST(Cli, TinyPipelineWritesEveryArtifact) {
  TempDir dir("pipeline");
  const fs::path cfg = write_config(dir.path(), "tiny.ini", kTinyConfig);
  const fs::path run = dir.path() / "run";
  const std::string common = " --config \"" + cfg.string() + "\" --run \"" + run.string() + "\"";
  for (const char* stage : {"gen-data", "train", "mgu", "finetune", "eval", "sweep", "pilot"}) {
    const auto r = run_asl(std::string(stage) + common, dir.path());
    ASSERT_EQ(r.code, 0) << stage << ": " << r.err;
  }
  for (const char* rel : {paths::kCorpusManifest, paths::kPretrained, paths::kFinetuned, paths::kAuxManifest,
                          "aux/summary.csv", "finetune_report.csv", "eval_pretrained/metrics.csv",
                          "eval_finetuned/metrics.csv", "eval_pretrained/curves.csv", "eval_finetuned/curves.csv",
                          "pilot/pilot.csv", "pilot/pilot_anomaly.csv"}) {
    EXPECT_TRUE(fs::is_regular_file(run / rel)) << rel;
  }
  EXPECT_FALSE(fs::is_empty(run / "eval_finetuned" / "heatmaps"));

  const auto bytes = io::read_file(run / paths::kRunManifest);
  const auto doc = nlohmann::json::parse(bytes.begin(), bytes.end());
  EXPECT_EQ(doc.at("tool"), "asl");
  EXPECT_EQ(doc.at("config").at("run.seed"), "3");
  for (const char* stage : {"gen-data", "train", "mgu", "finetune", "eval", "sweep", "pilot"}) {
    EXPECT_TRUE(doc.at("stages").contains(stage)) << stage;
  }
  const auto& files = doc.at("files");
  EXPECT_TRUE(files.contains(paths::kFinetuned));
  EXPECT_EQ(files.at(paths::kFinetuned).get<std::string>(), sha256_hex(io::read_file(run / paths::kFinetuned)));
}
