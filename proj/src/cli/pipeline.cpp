#include "asl/pipeline.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <map>
#include <sstream>

#include <openssl/evp.h>

#include <json.hpp>

#include "asl/aaft.hpp"
#include "asl/binary_io.hpp"
#include "asl/evalkit.hpp"
#include "asl/gradcheck_suite.hpp"
#include "asl/mgu.hpp"
#include "asl/scenes.hpp"
#include "asl/training.hpp"

namespace asl::cli {

namespace fs = std::filesystem;

RunLock::RunLock(const fs::path& run_dir) {
  std::error_code ec;
  fs::create_directories(run_dir, ec);
  if (ec) throw StageError("cannot create run directory " + run_dir.string() + ": " + ec.message());
  const fs::path lock = run_dir / ".lock";
  fd_ = ::open(lock.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  if (fd_ < 0) throw StageError("cannot open lock file " + lock.string());
  if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
    ::close(fd_);
    fd_ = -1;
    throw StageError("run directory " + run_dir.string() + " is locked by another process");
  }
}

RunLock::~RunLock() {
  if (fd_ >= 0) {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
}

std::string sha256_hex(const std::vector<std::uint8_t>& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 digest failed");
  }
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

std::vector<std::uint8_t> heatmap_pgm(const seg::ScoreMap& msp) {
  const std::string header = "P5\n" + std::to_string(msp.width) + " " + std::to_string(msp.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (double v : msp.values) {
    const double s = std::clamp(1.0 - v, 0.0, 1.0);
    out.push_back(static_cast<std::uint8_t>(std::lround(255.0 * s)));
  }
  return out;
}

namespace {

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string scene_name(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04zu", i);
  return buf;
}

void require_file(const fs::path& path, const std::string& hint) {
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) throw StageError("missing " + path.string() + " (" + hint + ")");
}

/// Converts library precondition and format errors into stage failures.
template <class Fn>
auto guarded(const std::string& what, Fn&& fn) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(what + ": " + e.what());
  }
}

struct LoadedCorpus {
  std::vector<Scene> train;
  std::vector<Scene> val;
  std::vector<Scene> test;
};

LoadedCorpus load_corpus(const fs::path& run_dir) {
  const fs::path manifest = run_dir / paths::kCorpusManifest;
  require_file(manifest, "run gen-data first");
  LoadedCorpus out;
  for (const scenes::ManifestEntry& e : scenes::read_manifest(manifest)) {
    const fs::path file = manifest.parent_path() / e.path;
    require_file(file, "listed in " + manifest.string());
    Scene s = scenes::read_scene(file);
    if (e.split == "train") {
      out.train.push_back(std::move(s));
    } else if (e.split == "val") {
      out.val.push_back(std::move(s));
    } else if (e.split == "test") {
      out.test.push_back(std::move(s));
    } else {
      throw StageError(manifest.string() + ": unknown split '" + e.split + "'");
    }
  }
  return out;
}

seg::SegModel load_model(const fs::path& path, const std::string& hint) {
  require_file(path, hint);
  return seg::load_checkpoint(path);
}

void check_model(const seg::SegModel& model, const RunConfig& config, const fs::path& path) {
  if (model.shape() != config.model) {
    throw StageError(path.string() + " does not match the [model] block of the config");
  }
}

std::vector<Scene> load_auxiliary(const fs::path& run_dir) {
  const fs::path manifest = run_dir / paths::kAuxManifest;
  require_file(manifest, "run mgu first");
  std::vector<Scene> out;
  for (const scenes::ManifestEntry& e : scenes::read_manifest(manifest)) {
    const fs::path file = manifest.parent_path() / e.path;
    require_file(file, "listed in " + manifest.string());
    out.push_back(scenes::read_scene(file));
  }
  return out;
}

void write_scene_dir(const fs::path& root, const std::string& split, const std::vector<Scene>& scenes,
                     std::vector<scenes::ManifestEntry>& entries) {
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const std::string rel = split + "/" + scene_name(i) + ".aseg";
    scenes::write_scene(root / rel, scenes[i]);
    entries.push_back({split, rel, std::nullopt});
  }
}

/// Checkpoints present in the run directory, pretrained first.
std::vector<std::pair<std::string, fs::path>> checkpoints(const fs::path& run_dir) {
  const fs::path pre = run_dir / paths::kPretrained;
  require_file(pre, "run train first");
  std::vector<std::pair<std::string, fs::path>> out{{"pretrained", pre}};
  std::error_code ec;
  const fs::path fine = run_dir / paths::kFinetuned;
  if (fs::is_regular_file(fine, ec)) out.emplace_back("finetuned", fine);
  return out;
}

void require_test_unknowns(const std::vector<Scene>& test) {
  if (test.empty()) throw StageError("the corpus has no test scenes; set corpus.test_scenes > 0 and rerun gen-data");
  std::size_t unknown = 0;
  for (const Scene& s : test) unknown += s.count_role(PixelRole::kUnknown);
  if (unknown == 0) throw StageError("the test split has no anomaly pixels to evaluate");
}

}  // namespace

void update_manifest(const Stage& stage, const std::string& stage_name) {
  using nlohmann::json;
  const fs::path path = stage.run_dir / paths::kRunManifest;
  json doc = json::object();
  std::error_code ec;
  if (fs::is_regular_file(path, ec)) {
    const auto bytes = io::read_file(path);
    doc = json::parse(bytes.begin(), bytes.end(), nullptr, false);
    if (doc.is_discarded() || !doc.is_object()) doc = json::object();
  }
  doc["tool"] = "asl";
  doc["version"] = kToolVersion;
  doc["config_path"] = stage.config_path.string();
  json cfg = json::object();
  for (const auto& [k, v] : stage.config.snapshot()) cfg[k] = v;
  doc["config"] = cfg;
  doc["stages"][stage_name] = {{"completed_at", utc_now()}};

  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(stage.run_dir)) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), stage.run_dir);
    if (rel == paths::kRunManifest || rel == ".lock") continue;
    files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  json inventory = json::object();
  for (const fs::path& rel : files) inventory[rel.generic_string()] = sha256_hex(io::read_file(stage.run_dir / rel));
  doc["files"] = inventory;
  io::write_text(path, doc.dump(2) + "\n");
}

void cmd_gen_data(const Stage& stage) {
  const scenes::Corpus corpus = guarded("gen-data", [&] { return scenes::generate_corpus(stage.config.corpus); });
  const fs::path root = stage.run_dir / "corpus";
  std::error_code ec;
  fs::remove_all(root, ec);
  std::vector<scenes::ManifestEntry> entries;
  write_scene_dir(root, "train", corpus.train, entries);
  write_scene_dir(root, "val", corpus.val, entries);
  write_scene_dir(root, "test", corpus.test, entries);
  scenes::write_manifest(root / "manifest.txt", entries);

  std::size_t unknown = 0;
  std::size_t total = 0;
  for (const Scene& s : corpus.test) {
    unknown += s.count_role(PixelRole::kUnknown);
    total += s.pixel_count();
  }
  stage.log << "gen-data: " << corpus.train.size() << " train, " << corpus.val.size() << " val, " << corpus.test.size()
            << " test scenes";
  if (total) stage.log << "; test anomaly fraction " << static_cast<double>(unknown) / static_cast<double>(total);
  stage.log << "\n";
  update_manifest(stage, "gen-data");
}

void cmd_train(const Stage& stage) {
  const LoadedCorpus corpus = load_corpus(stage.run_dir);
  if (corpus.train.empty()) throw StageError("the corpus has no training scenes");
  const seg::TrainResult result = guarded("train", [&] {
    const seg::SegModel init = seg::SegModel::initialize(stage.config.model, stage.config.seed);
    return seg::train_supervised(init, corpus.train, stage.config.pretrain);
  });
  seg::save_checkpoint(stage.run_dir / paths::kPretrained, result.model);

  std::ostringstream trace;
  trace.precision(17);
  trace << "epoch,mean_batch_loss\n";
  for (std::size_t e = 0; e < result.epoch_loss.size(); ++e) trace << e + 1 << ',' << result.epoch_loss[e] << '\n';
  io::write_text(stage.run_dir / "train_trace.csv", trace.str());
  stage.log << "train: cross-entropy " << result.initial_loss << " -> " << result.final_loss << "\n";
  update_manifest(stage, "train");
}

void cmd_mgu(const Stage& stage) {
  const fs::path model_path = stage.run_dir / paths::kPretrained;
  const seg::SegModel model = load_model(model_path, "run train first");
  check_model(model, stage.config, model_path);
  const LoadedCorpus corpus = load_corpus(stage.run_dir);
  const mgu::AuxiliarySet aux =
      guarded("mgu", [&] { return mgu::build_auxiliary_set(model, corpus.train, stage.config.mgu); });
  for (const std::string& w : aux.warnings) stage.log << "mgu: warning: " << w << "\n";
  if (aux.scenes.empty()) throw StageError("mgu produced no auxiliary scenes");

  const fs::path root = stage.run_dir / "aux";
  std::error_code ec;
  fs::remove_all(root, ec);
  std::vector<scenes::ManifestEntry> entries;
  std::ostringstream summary;
  summary << "scene,source,adversarial_class,termination,iterations,synth_unknown_pixels\n";
  std::map<std::string, std::size_t> counts;
  for (std::size_t i = 0; i < aux.scenes.size(); ++i) {
    const mgu::AuxiliaryScene& a = aux.scenes[i];
    const std::string rel = "scenes/" + scene_name(i) + ".aseg";
    scenes::write_scene(root / rel, a.scene);
    io::write_text(root / "traces" / (scene_name(i) + ".csv"), mgu::trace_csv(a.trace));
    entries.push_back({"aux", rel, a.adversarial_class});
    const std::string term(mgu::termination_name(a.trace.termination));
    ++counts[term];
    summary << i << ',' << a.source_index << ',' << a.adversarial_class << ',' << term << ',' << a.trace.iterations
            << ',' << a.scene.count_role(PixelRole::kSynthUnknown) << '\n';
  }
  scenes::write_manifest(root / "manifest.txt", entries);
  io::write_text(root / "summary.csv", summary.str());
  stage.log << "mgu: " << aux.scenes.size() << " auxiliary scenes;";
  for (const auto& [k, v] : counts) stage.log << ' ' << k << '=' << v;
  stage.log << "\n";
  update_manifest(stage, "mgu");
}

void cmd_finetune(const Stage& stage) {
  const fs::path model_path = stage.run_dir / paths::kPretrained;
  const seg::SegModel model = load_model(model_path, "run train first");
  check_model(model, stage.config, model_path);
  const std::vector<Scene> aux = load_auxiliary(stage.run_dir);
  const LoadedCorpus corpus = load_corpus(stage.run_dir);
  const aaft::FinetuneResult result = guarded("finetune", [&] {
    return aaft::finetune(model, corpus.train, aux, stage.config.aaft, stage.config.finetune);
  });
  seg::save_checkpoint(stage.run_dir / paths::kFinetuned, result.model);
  io::write_text(stage.run_dir / "finetune_report.csv", aaft::report_csv(result.report));
  stage.log << "finetune: unknown loss " << result.report.initial_unknown_loss << " -> "
            << (result.report.mean_unknown_loss.empty() ? result.report.initial_unknown_loss
                                                        : result.report.mean_unknown_loss.back())
            << "\n";
  update_manifest(stage, "finetune");
}

void cmd_eval(const Stage& stage) {
  const auto models = checkpoints(stage.run_dir);
  const LoadedCorpus corpus = load_corpus(stage.run_dir);
  require_test_unknowns(corpus.test);
  for (const auto& [name, path] : models) {
    const seg::SegModel model = load_model(path, "");
    check_model(model, stage.config, path);
    const fs::path out = stage.run_dir / ("eval_" + name);
    const eval::MetricReport report =
        guarded("eval", [&] { return eval::evaluate_anomaly(model, corpus.test, stage.config.eval.target_tpr); });
    io::write_text(out / "metrics.csv", eval::metrics_csv(report));
    for (std::size_t i = 0; i < corpus.test.size(); ++i) {
      const seg::ScoreMap msp = seg::msp_score(seg::softmax_map(seg::predict_logits(model, corpus.test[i].features)));
      io::write_file(out / "heatmaps" / (scene_name(i) + ".pgm"), heatmap_pgm(msp));
    }
    stage.log << "eval " << name << ": aupr " << report.aupr << " auroc " << report.auroc << " fpr95 " << report.fpr95
              << " (random guess " << report.aupr_random_guess << ")\n";
  }
  update_manifest(stage, "eval");
}

void cmd_sweep(const Stage& stage) {
  const auto models = checkpoints(stage.run_dir);
  const LoadedCorpus corpus = load_corpus(stage.run_dir);
  require_test_unknowns(corpus.test);
  for (const auto& [name, path] : models) {
    const seg::SegModel model = load_model(path, "");
    check_model(model, stage.config, path);
    const eval::SweepCurve curve =
        guarded("sweep", [&] { return eval::threshold_sweep(model, corpus.test, stage.config.eval.deltas); });
    io::write_text(stage.run_dir / ("eval_" + name) / "curves.csv", eval::curves_csv(curve));
    stage.log << "sweep " << name << ": " << curve.size() << " thresholds\n";
  }
  update_manifest(stage, "sweep");
}

void cmd_pilot(const Stage& stage) {
  const LoadedCorpus loaded = load_corpus(stage.run_dir);
  if (loaded.train.empty() || loaded.test.empty()) throw StageError("pilot needs train and test scenes");
  const RunConfig& c = stage.config;
  scenes::Corpus corpus{loaded.train, loaded.val, loaded.test, {}};
  const eval::PilotTable table = guarded("pilot", [&] {
    scenes::SubsetPartition partition;
    if (c.pilot.partition == PartitionKind::kIcosahedral) {
      partition = scenes::icosahedral_partition(scenes::make_layout(c.corpus));
    } else {
      partition = scenes::partition_classes(c.corpus.num_classes, c.pilot.subsets, c.seed);
    }
    eval::PilotConfig pc;
    pc.model = c.model;
    pc.train = c.pilot.train;
    pc.loss = aaft::LossConfig{c.aaft.alpha, aaft::UnknownLoss::kKL, c.aaft.r};
    pc.target_tpr = c.eval.target_tpr;
    pc.seed = c.seed;
    return eval::pilot_study(corpus, partition, pc);
  });
  io::write_text(stage.run_dir / "pilot" / "pilot.csv", eval::pilot_csv(table, false));
  io::write_text(stage.run_dir / "pilot" / "pilot_anomaly.csv", eval::pilot_csv(table, true));
  for (const eval::PilotRow& r : table.rows) {
    if (r.failed) stage.log << "pilot: warning: subset failed: " << r.error << "\n";
  }
  stage.log << "pilot: AUROC spread " << table.subset_spread.auroc << " (known-unknown), "
            << table.anomaly_spread.auroc << " (held-out anomalies)\n";
  update_manifest(stage, "pilot");
}

bool cmd_gradcheck(const GradcheckRequest& request, std::ostream& out) {
  grad::SuiteOptions options;
  if (request.primitives) options.primitives = *request.primitives;
  grad::FaultInjection fault;
  if (request.fault) {
    fault.op = *request.fault;
    options.fault = &fault;
  }
  if (options.primitives.empty()) {
    out << "gradcheck: warning: empty primitive list, nothing checked\n";
    out << "gradcheck: PASS (vacuous)\n";
    return true;
  }
  const grad::SuiteResult result = grad::run_gradcheck_suite(options);
  for (const grad::PrimitiveResult& p : result.primitives) {
    out << "  " << p.name << ": " << p.graphs << " graphs, max relative error " << p.max_error << "\n";
  }
  const bool pass = result.max_error <= request.tolerance;
  out << "gradcheck: " << result.graphs << " graphs, max relative error " << result.max_error << " -> "
      << (pass ? "PASS" : "FAIL") << "\n";
  return pass;
}

}  // namespace asl::cli
