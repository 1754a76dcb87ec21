#include "asl/run_config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "asl/binary_io.hpp"
#include "asl/evalkit.hpp"

namespace asl::cli {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

template <class T>
T parse_integer(const std::string& key, const std::string& text) {
  const std::string v = trim(text);
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + text + "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& text) {
  const std::string v = trim(text);
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty() || !std::isfinite(out)) {
    throw ConfigError(key + ": expected a finite number, got '" + text + "'");
  }
  return out;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string join(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

template <class T>
Setter size_field(T RunConfig::*block, std::size_t T::*field) {
  return [=](RunConfig& c, const std::string& k, const std::string& v) { c.*block.*field = parse_integer<std::size_t>(k, v); };
}

template <class T>
Setter double_field(T RunConfig::*block, double T::*field) {
  return [=](RunConfig& c, const std::string& k, const std::string& v) { c.*block.*field = parse_double(k, v); };
}

const std::map<std::string, Setter>& setters() {
  using scenes::CorpusConfig;
  static const std::map<std::string, Setter> table = {
      {"run.seed", [](RunConfig& c, const std::string& k, const std::string& v) { c.seed = parse_integer<std::uint64_t>(k, v); }},

      {"corpus.num_classes", size_field(&RunConfig::corpus, &CorpusConfig::num_classes)},
      {"corpus.channels", size_field(&RunConfig::corpus, &CorpusConfig::channels)},
      {"corpus.height", size_field(&RunConfig::corpus, &CorpusConfig::height)},
      {"corpus.width", size_field(&RunConfig::corpus, &CorpusConfig::width)},
      {"corpus.layout",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         const std::string l = lower(trim(v));
         if (l == "random") {
           c.corpus.layout = scenes::Layout::kRandom;
         } else if (l == "icosahedral") {
           c.corpus.layout = scenes::Layout::kIcosahedral;
         } else {
           throw ConfigError(k + ": expected random or icosahedral, got '" + v + "'");
         }
       }},
      {"corpus.noise_sigma", double_field(&RunConfig::corpus, &CorpusConfig::noise_sigma)},
      {"corpus.min_separation_sigmas", double_field(&RunConfig::corpus, &CorpusConfig::min_separation_sigmas)},
      {"corpus.mean_scale", double_field(&RunConfig::corpus, &CorpusConfig::mean_scale)},
      {"corpus.frequency_skew", double_field(&RunConfig::corpus, &CorpusConfig::frequency_skew)},
      {"corpus.noise_spread", double_field(&RunConfig::corpus, &CorpusConfig::noise_spread)},
      {"corpus.feature_lo", double_field(&RunConfig::corpus, &CorpusConfig::feature_lo)},
      {"corpus.feature_hi", double_field(&RunConfig::corpus, &CorpusConfig::feature_hi)},
      {"corpus.shapes_min", size_field(&RunConfig::corpus, &CorpusConfig::shapes_min)},
      {"corpus.shapes_max", size_field(&RunConfig::corpus, &CorpusConfig::shapes_max)},
      {"corpus.shape_size_min", size_field(&RunConfig::corpus, &CorpusConfig::shape_size_min)},
      {"corpus.shape_size_max", size_field(&RunConfig::corpus, &CorpusConfig::shape_size_max)},
      {"corpus.train_scenes", size_field(&RunConfig::corpus, &CorpusConfig::train_scenes)},
      {"corpus.val_scenes", size_field(&RunConfig::corpus, &CorpusConfig::val_scenes)},
      {"corpus.test_scenes", size_field(&RunConfig::corpus, &CorpusConfig::test_scenes)},
      {"corpus.anomaly_components", size_field(&RunConfig::corpus, &CorpusConfig::anomaly_components)},
      {"corpus.anomaly_shapes_per_scene", size_field(&RunConfig::corpus, &CorpusConfig::anomaly_shapes_per_scene)},
      {"corpus.anomaly_size_min", size_field(&RunConfig::corpus, &CorpusConfig::anomaly_size_min)},
      {"corpus.anomaly_size_max", size_field(&RunConfig::corpus, &CorpusConfig::anomaly_size_max)},
      {"corpus.anomaly_sigma", double_field(&RunConfig::corpus, &CorpusConfig::anomaly_sigma)},

      {"model.num_classes", size_field(&RunConfig::model, &seg::ModelShape::num_classes)},
      {"model.channels", size_field(&RunConfig::model, &seg::ModelShape::channels)},
      {"model.patch_radius", size_field(&RunConfig::model, &seg::ModelShape::patch_radius)},
      {"model.hidden",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.model.hidden.clear();
         for (const std::string& item : split_list(v)) c.model.hidden.push_back(parse_integer<std::size_t>(k, item));
       }},

      {"pretrain.epochs", size_field(&RunConfig::pretrain, &seg::SgdOptions::epochs)},
      {"pretrain.lr", double_field(&RunConfig::pretrain, &seg::SgdOptions::lr)},
      {"pretrain.batch", size_field(&RunConfig::pretrain, &seg::SgdOptions::batch)},

      {"mgu.step_size", double_field(&RunConfig::mgu, &mgu::MguConfig::step_size)},
      {"mgu.max_iters", size_field(&RunConfig::mgu, &mgu::MguConfig::max_iters)},
      {"mgu.per_class_budget", size_field(&RunConfig::mgu, &mgu::MguConfig::per_class_budget)},
      {"mgu.clip_lo", double_field(&RunConfig::mgu, &mgu::MguConfig::clip_lo)},
      {"mgu.clip_hi", double_field(&RunConfig::mgu, &mgu::MguConfig::clip_hi)},
      {"mgu.reinclusion",
       [](RunConfig&, const std::string& k, const std::string& v) {
         if (lower(trim(v)) != "permanent_removal") throw ConfigError(k + ": only permanent_removal is supported");
       }},

      {"aaft.alpha", double_field(&RunConfig::aaft, &aaft::LossConfig::alpha)},
      {"aaft.loss",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         try {
           c.aaft.unknown_loss = aaft::parse_loss(trim(v));
         } catch (const InvalidArgument& e) {
           throw ConfigError(k + ": " + e.what());
         }
       }},
      {"aaft.r", [](RunConfig& c, const std::string& k, const std::string& v) { c.aaft.r = parse_double(k, v); }},
      {"aaft.epochs", size_field(&RunConfig::finetune, &seg::SgdOptions::epochs)},
      {"aaft.lr", double_field(&RunConfig::finetune, &seg::SgdOptions::lr)},
      {"aaft.batch", size_field(&RunConfig::finetune, &seg::SgdOptions::batch)},

      {"eval.deltas",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.eval.deltas.clear();
         for (const std::string& item : split_list(v)) c.eval.deltas.push_back(parse_double(k, item));
       }},
      {"eval.delta_count",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         const auto n = parse_integer<std::size_t>(k, v);
         if (n < 2) throw ConfigError(k + ": a uniform grid needs at least two points");
         c.eval.deltas = eval::uniform_deltas(n);
       }},
      {"eval.target_tpr", [](RunConfig& c, const std::string& k, const std::string& v) { c.eval.target_tpr = parse_double(k, v); }},

      {"pilot.partition",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         const std::string l = lower(trim(v));
         if (l == "random") {
           c.pilot.partition = PartitionKind::kRandom;
         } else if (l == "icosahedral") {
           c.pilot.partition = PartitionKind::kIcosahedral;
         } else {
           throw ConfigError(k + ": expected random or icosahedral, got '" + v + "'");
         }
       }},
      {"pilot.subsets", [](RunConfig& c, const std::string& k, const std::string& v) { c.pilot.subsets = parse_integer<std::size_t>(k, v); }},
      {"pilot.epochs", [](RunConfig& c, const std::string& k, const std::string& v) { c.pilot.train.epochs = parse_integer<std::size_t>(k, v); }},
      {"pilot.lr", [](RunConfig& c, const std::string& k, const std::string& v) { c.pilot.train.lr = parse_double(k, v); }},
      {"pilot.batch", [](RunConfig& c, const std::string& k, const std::string& v) { c.pilot.train.batch = parse_integer<std::size_t>(k, v); }},
  };
  return table;
}

}  // namespace

RunConfig default_config() {
  RunConfig c;
  c.eval.deltas = eval::uniform_deltas(101);
  apply_seed(c, c.seed);
  return c;
}

void apply_seed(RunConfig& c, std::uint64_t seed) {
  c.seed = seed;
  c.corpus.seed = seed;
  c.pretrain.seed = seed;
  c.mgu.seed = seed;
  c.finetune.seed = seed;
  c.pilot.train.seed = seed;
}

RunConfig parse_config(const std::string& text) {
  boost::property_tree::ptree tree;
  std::istringstream is(text);
  try {
    boost::property_tree::ini_parser::read_ini(is, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("config line " + std::to_string(e.line()) + ": " + e.message());
  }

  RunConfig config = default_config();
  bool model_classes = false;
  bool model_channels = false;
  const auto& table = setters();
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw ConfigError("key '" + section + "' must be inside a [section]");
    for (const auto& [key, value] : body) {
      const std::string full = section + "." + key;
      const auto it = table.find(full);
      if (it == table.end()) throw ConfigError("unknown setting '" + full + "'");
      it->second(config, full, value.data());
      model_classes |= full == "model.num_classes";
      model_channels |= full == "model.channels";
    }
  }
  apply_seed(config, config.seed);
  if (!model_classes) config.model.num_classes = config.corpus.num_classes;
  if (!model_channels) config.model.channels = config.corpus.channels;
  return config;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) throw ConfigError("config file not found: " + path.string());
  const auto bytes = io::read_file(path);
  return parse_config(std::string(bytes.begin(), bytes.end()));
}

void validate(const RunConfig& c) {
  auto guard = [](const char* block, const auto& fn) {
    try {
      fn();
    } catch (const InvalidArgument& e) {
      throw ConfigError(std::string("[") + block + "] " + e.what());
    }
  };
  guard("corpus", [&] { scenes::validate_config(c.corpus); });
  guard("model", [&] {
    seg::validate_shape(c.model);
    if (c.model.num_classes != c.corpus.num_classes) throw InvalidArgument("num_classes differs from the corpus");
    if (c.model.channels != c.corpus.channels) throw InvalidArgument("channels differs from the corpus");
  });
  guard("pretrain", [&] { seg::validate_sgd(c.pretrain); });
  guard("mgu", [&] {
    mgu::validate_config(c.mgu);
    if (c.mgu.clip_lo > c.corpus.feature_lo || c.mgu.clip_hi < c.corpus.feature_hi) {
      throw InvalidArgument("clip range must contain the corpus feature range");
    }
  });
  guard("aaft", [&] {
    aaft::validate_config(c.aaft);
    seg::validate_sgd(c.finetune);
  });
  guard("eval", [&] {
    eval::validate_deltas(c.eval.deltas);
    if (!(c.eval.target_tpr > 0.0 && c.eval.target_tpr <= 1.0)) throw InvalidArgument("target_tpr must lie in (0, 1]");
  });
  guard("pilot", [&] {
    seg::validate_sgd(c.pilot.train);
    if (c.pilot.subsets < 2 || c.pilot.subsets > c.corpus.num_classes) {
      throw InvalidArgument("subsets must lie in [2, num_classes]");
    }
    if (c.pilot.partition == PartitionKind::kIcosahedral &&
        (c.corpus.layout != scenes::Layout::kIcosahedral || c.pilot.subsets != 4)) {
      throw InvalidArgument("the icosahedral partition needs the icosahedral layout and 4 subsets");
    }
  });
}

std::map<std::string, std::string> RunConfig::snapshot() const {
  std::map<std::string, std::string> m;
  m["run.seed"] = std::to_string(seed);
  const auto& k = corpus;
  m["corpus.num_classes"] = std::to_string(k.num_classes);
  m["corpus.channels"] = std::to_string(k.channels);
  m["corpus.height"] = std::to_string(k.height);
  m["corpus.width"] = std::to_string(k.width);
  m["corpus.layout"] = k.layout == scenes::Layout::kRandom ? "random" : "icosahedral";
  m["corpus.noise_sigma"] = fmt_double(k.noise_sigma);
  m["corpus.min_separation_sigmas"] = fmt_double(k.min_separation_sigmas);
  m["corpus.mean_scale"] = fmt_double(k.mean_scale);
  m["corpus.frequency_skew"] = fmt_double(k.frequency_skew);
  m["corpus.noise_spread"] = fmt_double(k.noise_spread);
  m["corpus.feature_lo"] = fmt_double(k.feature_lo);
  m["corpus.feature_hi"] = fmt_double(k.feature_hi);
  m["corpus.shapes_min"] = std::to_string(k.shapes_min);
  m["corpus.shapes_max"] = std::to_string(k.shapes_max);
  m["corpus.shape_size_min"] = std::to_string(k.shape_size_min);
  m["corpus.shape_size_max"] = std::to_string(k.shape_size_max);
  m["corpus.train_scenes"] = std::to_string(k.train_scenes);
  m["corpus.val_scenes"] = std::to_string(k.val_scenes);
  m["corpus.test_scenes"] = std::to_string(k.test_scenes);
  m["corpus.anomaly_components"] = std::to_string(k.anomaly_components);
  m["corpus.anomaly_shapes_per_scene"] = std::to_string(k.anomaly_shapes_per_scene);
  m["corpus.anomaly_size_min"] = std::to_string(k.anomaly_size_min);
  m["corpus.anomaly_size_max"] = std::to_string(k.anomaly_size_max);
  m["corpus.anomaly_sigma"] = fmt_double(k.anomaly_sigma);
  m["model.num_classes"] = std::to_string(model.num_classes);
  m["model.channels"] = std::to_string(model.channels);
  m["model.patch_radius"] = std::to_string(model.patch_radius);
  m["model.hidden"] = join(model.hidden);
  m["pretrain.epochs"] = std::to_string(pretrain.epochs);
  m["pretrain.lr"] = fmt_double(pretrain.lr);
  m["pretrain.batch"] = std::to_string(pretrain.batch);
  m["mgu.step_size"] = fmt_double(mgu.step_size);
  m["mgu.max_iters"] = std::to_string(mgu.max_iters);
  m["mgu.per_class_budget"] = std::to_string(mgu.per_class_budget);
  m["mgu.clip_lo"] = fmt_double(mgu.clip_lo);
  m["mgu.clip_hi"] = fmt_double(mgu.clip_hi);
  m["mgu.reinclusion"] = "permanent_removal";
  m["aaft.alpha"] = fmt_double(aaft.alpha);
  m["aaft.loss"] = std::string(aaft::loss_name(aaft.unknown_loss));
  m["aaft.r"] = fmt_double(aaft::resolved_regularizer(aaft, std::max<std::size_t>(model.num_classes, 2)));
  m["aaft.epochs"] = std::to_string(finetune.epochs);
  m["aaft.lr"] = fmt_double(finetune.lr);
  m["aaft.batch"] = std::to_string(finetune.batch);
  std::string deltas;
  for (std::size_t i = 0; i < eval.deltas.size(); ++i) deltas += (i ? "," : "") + fmt_double(eval.deltas[i]);
  m["eval.deltas"] = deltas;
  m["eval.target_tpr"] = fmt_double(eval.target_tpr);
  m["pilot.partition"] = pilot.partition == PartitionKind::kRandom ? "random" : "icosahedral";
  m["pilot.subsets"] = std::to_string(pilot.subsets);
  m["pilot.epochs"] = std::to_string(pilot.train.epochs);
  m["pilot.lr"] = fmt_double(pilot.train.lr);
  m["pilot.batch"] = std::to_string(pilot.train.batch);
  return m;
}

}  // namespace asl::cli
