#pragma once

// JSON experiment configs, the run orchestrator and line-delimited result records.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ttacil/checkpoint_io.hpp"
#include "ttacil/corruption.hpp"
#include "ttacil/data.hpp"
#include "ttacil/protocol.hpp"
#include "ttacil/rng.hpp"
#include "ttacil/stream.hpp"

namespace ttacil {

using Json = nlohmann::json;

/// Invalid configuration. The message starts with the offending key path.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& path, const std::string& msg)
      : std::invalid_argument(path.empty() ? msg : path + ": " + msg), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

struct DataConfig {
  enum class Source { Synthetic, Idx };
  Source source = Source::Synthetic;
  SynthSpec synthetic;
  std::string train_images, train_labels, test_images, test_labels;  // idx only
};

struct StreamConfig {
  std::vector<std::size_t> increments{2, 2, 2, 2, 2};
  std::vector<std::uint64_t> order_seeds{11};
};

/// One entry of the method list: a base method plus overrides.
struct MethodVariant {
  std::string label;
  Method method = Method::Ttacil;
  TTAConfig tta;
  EvalOrder eval_order = EvalOrder::ByTask;
};

struct ExperimentConfig {
  ProtocolConfig protocol;  // defaults shared by every variant
  DataConfig data;
  StreamConfig stream;
  std::vector<MethodVariant> methods;
  std::vector<std::optional<CorruptionSpec>> corruptions{std::nullopt};  // nullopt = clean test sets
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::string output = "results.jsonl";
  std::string artifacts;  // directory for checkpoints and CSV logs; empty = none
  bool skip_existing = true;
};

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

/// Reads typed fields from one JSON object and rejects keys nobody asked for.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_, "expected an object");
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }
  const Json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void read(const std::string& key, bool& out) {
    if (!has(key)) return;
    const Json& v = j_.at(key);
    if (!v.is_boolean()) throw ConfigError(child(key), "expected a boolean");
    out = v.get<bool>();
  }
  void read(const std::string& key, double& out) {
    if (!has(key)) return;
    const Json& v = j_.at(key);
    if (!v.is_number()) throw ConfigError(child(key), "expected a number");
    out = v.get<double>();
  }
  void read(const std::string& key, std::string& out) {
    if (!has(key)) return;
    const Json& v = j_.at(key);
    if (!v.is_string()) throw ConfigError(child(key), "expected a string");
    out = v.get<std::string>();
  }
  void read_uint(const std::string& key, std::uint64_t& out) {
    if (!has(key)) return;
    out = as_uint(j_.at(key), child(key));
  }
  void read_count(const std::string& key, std::size_t& out) {
    if (!has(key)) return;
    const auto v = as_uint(j_.at(key), child(key));
    if (v == 0) throw ConfigError(child(key), "must be a positive integer");
    out = static_cast<std::size_t>(v);
  }
  void read_int(const std::string& key, int& out) {
    if (!has(key)) return;
    const Json& v = j_.at(key);
    if (!v.is_number_integer()) throw ConfigError(child(key), "expected an integer");
    out = v.get<int>();
  }

  static std::uint64_t as_uint(const Json& v, const std::string& path) {
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
      throw ConfigError(path, "expected a non-negative integer");
    }
    return v.get<std::uint64_t>();
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.contains(k)) throw ConfigError(child(k), "unknown key");
    }
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class F>
void with_constraint(const std::string& path, F&& f) {
  try {
    f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path, e.what());
  }
}

inline void parse_encoder(const Json& j, const std::string& path, EncoderConfig& c) {
  ObjectReader r(j, path);
  r.read_count("image_size", c.image_size);
  r.read_count("patch_size", c.patch_size);
  r.read_count("channels", c.channels);
  r.read_count("embed_dim", c.embed_dim);
  r.read_count("depth", c.depth);
  r.read_count("heads", c.heads);
  r.read("mlp_ratio", c.mlp_ratio);
  r.read("ln_epsilon", c.ln_epsilon);
  if (r.has("adapter")) {
    ObjectReader a(r.raw("adapter"), r.child("adapter"));
    a.read_count("hidden_dim", c.adapter.hidden_dim);
    a.read("scale", c.adapter.scale);
    a.read("learnable_scale", c.adapter.learnable_scale);
    a.read("enabled", c.adapter.enabled);
    a.finish();
  }
  r.finish();
  with_constraint(path, [&] { c.validate(); });
}

inline void parse_phase1(const Json& j, const std::string& path, Phase1Config& c) {
  ObjectReader r(j, path);
  r.read_count("epochs", c.epochs);
  r.read("lr", c.base_lr);
  r.read("momentum", c.momentum);
  r.read_count("batch_size", c.batch_size);
  r.read("cosine", c.cosine);
  r.read("weight_decay", c.weight_decay);
  if (r.has("head_init")) {
    std::string s;
    r.read("head_init", s);
    with_constraint(r.child("head_init"), [&] { c.head_init = head_init_from_string(s); });
  }
  r.finish();
  with_constraint(path, [&] { c.validate(); });
}

inline void parse_augmentation(const Json& j, const std::string& path, AugmentationPolicy& a) {
  ObjectReader r(j, path);
  r.read("identity", a.identity);
  r.read("crop_scale_min", a.crop_scale_min);
  r.read("crop_scale_max", a.crop_scale_max);
  r.read("flip_prob", a.flip_prob);
  r.read("max_rotation_deg", a.max_rotation_deg);
  r.read("brightness", a.brightness);
  r.read("contrast", a.contrast);
  r.finish();
}

inline void parse_tta(const Json& j, const std::string& path, TTAConfig& c) {
  ObjectReader r(j, path);
  r.read_count("views", c.augmentation.views);
  r.read_count("iterations", c.iterations);
  r.read_count("batch_size", c.batch_size);
  r.read("lr", c.lr);
  r.read("momentum", c.momentum);
  r.read("weight_decay", c.weight_decay);
  r.read("predict_from_marginal", c.predict_from_marginal);
  std::string s;
  if (r.has("param_mode")) {
    r.read("param_mode", s);
    with_constraint(r.child("param_mode"), [&] { c.param_mode = train_mode_from_string(s); });
  }
  if (r.has("reset")) {
    r.read("reset", s);
    with_constraint(r.child("reset"), [&] { c.reset = reset_policy_from_string(s); });
  }
  if (r.has("augmentation")) parse_augmentation(r.raw("augmentation"), r.child("augmentation"), c.augmentation);
  r.finish();
  with_constraint(path, [&] { c.validate(); });
}

inline std::optional<CorruptionSpec> parse_corruption(const Json& j, const std::string& path) {
  if (j.is_null()) return std::nullopt;
  ObjectReader r(j, path);
  CorruptionSpec c;
  std::string kind;
  if (!r.has("kind")) throw ConfigError(r.child("kind"), "required");
  r.read("kind", kind);
  with_constraint(r.child("kind"), [&] { c.kind = corruption_kind_from_string(kind); });
  r.read_int("severity", c.severity);
  r.read_uint("seed", c.seed);
  if (r.has("strength")) {
    double s = 0.0;
    r.read("strength", s);
    if (!(s >= 0.0)) throw ConfigError(r.child("strength"), "must be >= 0");
    c.strength = s;
  }
  r.finish();
  with_constraint(path, [&] { (void)c.level(); });
  return c;
}

inline EvalOrder parse_eval_order(const std::string& s, const std::string& path) {
  EvalOrder o{};
  with_constraint(path, [&] { o = eval_order_from_string(s); });
  return o;
}

inline void parse_data(const Json& j, const std::string& path, DataConfig& d) {
  ObjectReader r(j, path);
  std::string source = "synthetic";
  r.read("source", source);
  if (source == "synthetic") {
    d.source = DataConfig::Source::Synthetic;
  } else if (source == "idx") {
    d.source = DataConfig::Source::Idx;
  } else {
    throw ConfigError(r.child("source"), "expected 'synthetic' or 'idx'");
  }
  if (r.has("synthetic")) {
    ObjectReader s(r.raw("synthetic"), r.child("synthetic"));
    auto& sp = d.synthetic;
    s.read_count("num_classes", sp.num_classes);
    s.read_count("train_per_class", sp.train_per_class);
    s.read_count("test_per_class", sp.test_per_class);
    s.read_count("image_size", sp.image_size);
    s.read("pixel_noise", sp.pixel_noise);
    s.read("contrast_min", sp.contrast_min);
    s.read("contrast_max", sp.contrast_max);
    s.read("phase_jitter", sp.phase_jitter);
    s.read_uint("seed", sp.seed);
    s.finish();
  }
  if (r.has("idx")) {
    ObjectReader s(r.raw("idx"), r.child("idx"));
    s.read("train_images", d.train_images);
    s.read("train_labels", d.train_labels);
    s.read("test_images", d.test_images);
    s.read("test_labels", d.test_labels);
    s.finish();
  }
  if (d.source == DataConfig::Source::Idx &&
      (d.train_images.empty() || d.train_labels.empty() || d.test_images.empty() || d.test_labels.empty())) {
    throw ConfigError(r.child("idx"), "train_images, train_labels, test_images and test_labels are required");
  }
  r.finish();
}

inline void parse_stream(const Json& j, const std::string& path, StreamConfig& s) {
  ObjectReader r(j, path);
  std::size_t tasks = 0, increment = 0;
  r.read_count("tasks", tasks);
  r.read_count("increment", increment);
  if (r.has("increments")) {
    if (tasks != 0 || increment != 0) {
      throw ConfigError(r.child("increments"), "give either increments or tasks/increment, not both");
    }
    const Json& v = r.raw("increments");
    if (!v.is_array() || v.empty()) throw ConfigError(r.child("increments"), "expected a non-empty array");
    s.increments.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const auto p = r.child("increments") + "[" + std::to_string(i) + "]";
      const auto n = ObjectReader::as_uint(v[i], p);
      if (n == 0) throw ConfigError(p, "must be a positive integer");
      s.increments.push_back(static_cast<std::size_t>(n));
    }
  } else if (tasks != 0 || increment != 0) {
    s.increments.assign(tasks != 0 ? tasks : 5, increment != 0 ? increment : 2);
  }
  if (r.has("order_seeds")) {
    const Json& v = r.raw("order_seeds");
    if (!v.is_array() || v.empty()) throw ConfigError(r.child("order_seeds"), "expected a non-empty array");
    s.order_seeds.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      s.order_seeds.push_back(ObjectReader::as_uint(v[i], r.child("order_seeds") + "[" + std::to_string(i) + "]"));
    }
  }
  r.finish();
}

inline MethodVariant parse_variant(const Json& j, const std::string& path, const ExperimentConfig& base) {
  MethodVariant v;
  v.tta = base.protocol.tta;
  v.eval_order = base.protocol.eval_order;
  if (j.is_string()) {
    v.label = j.get<std::string>();
    with_constraint(path, [&] { v.method = method_from_string(v.label); });
    return v;
  }
  ObjectReader r(j, path);
  std::string method;
  if (!r.has("method")) throw ConfigError(r.child("method"), "required");
  r.read("method", method);
  with_constraint(r.child("method"), [&] { v.method = method_from_string(method); });
  v.label = method;
  r.read("label", v.label);
  if (r.has("tta")) parse_tta(r.raw("tta"), r.child("tta"), v.tta);
  if (r.has("eval_order")) {
    std::string s;
    r.read("eval_order", s);
    v.eval_order = parse_eval_order(s, r.child("eval_order"));
  }
  r.finish();
  return v;
}

inline std::vector<std::uint64_t> parse_seed_list(const Json& v, const std::string& path) {
  if (!v.is_array() || v.empty()) throw ConfigError(path, "expected a non-empty array of integers");
  std::vector<std::uint64_t> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out.push_back(ObjectReader::as_uint(v[i], path + "[" + std::to_string(i) + "]"));
  }
  return out;
}

}  // namespace detail

/// Builds a config from parsed JSON. Every section and key is optional; missing
/// values take the library defaults.
inline ExperimentConfig parse_config_json(const Json& j) {
  ExperimentConfig cfg;
  detail::ObjectReader r(j, "");
  if (r.has("encoder")) detail::parse_encoder(r.raw("encoder"), "encoder", cfg.protocol.encoder);
  if (r.has("phase1")) detail::parse_phase1(r.raw("phase1"), "phase1", cfg.protocol.phase1);
  if (r.has("tta")) detail::parse_tta(r.raw("tta"), "tta", cfg.protocol.tta);
  if (r.has("corruption")) {
    const Json& c = r.raw("corruption");
    cfg.corruptions.clear();
    if (c.is_array()) {
      if (c.empty()) throw ConfigError("corruption", "expected a non-empty array");
      for (std::size_t i = 0; i < c.size(); ++i) {
        cfg.corruptions.push_back(detail::parse_corruption(c[i], "corruption[" + std::to_string(i) + "]"));
      }
    } else {
      cfg.corruptions.push_back(detail::parse_corruption(c, "corruption"));
    }
  }
  if (r.has("eval_order")) {
    std::string s;
    r.read("eval_order", s);
    cfg.protocol.eval_order = detail::parse_eval_order(s, "eval_order");
  }
  if (r.has("data")) detail::parse_data(r.raw("data"), "data", cfg.data);
  if (r.has("stream")) detail::parse_stream(r.raw("stream"), "stream", cfg.stream);
  if (r.has("seeds")) cfg.seeds = detail::parse_seed_list(r.raw("seeds"), "seeds");
  r.read("output", cfg.output);
  r.read("artifacts", cfg.artifacts);
  r.read("skip_existing", cfg.skip_existing);
  if (r.has("methods")) {
    const Json& m = r.raw("methods");
    if (!m.is_array() || m.empty()) throw ConfigError("methods", "expected a non-empty array");
    for (std::size_t i = 0; i < m.size(); ++i) {
      cfg.methods.push_back(detail::parse_variant(m[i], "methods[" + std::to_string(i) + "]", cfg));
    }
  } else {
    for (const char* name : {"frozen-pc", "first-session-only", "ttacil"}) {
      cfg.methods.push_back(detail::parse_variant(Json(name), "methods", cfg));
    }
  }
  std::set<std::string> labels;
  for (std::size_t i = 0; i < cfg.methods.size(); ++i) {
    if (!labels.insert(cfg.methods[i].label).second) {
      throw ConfigError("methods[" + std::to_string(i) + "].label", "duplicate label '" + cfg.methods[i].label + "'");
    }
  }
  r.finish();
  if (cfg.data.source == DataConfig::Source::Synthetic &&
      cfg.data.synthetic.image_size != cfg.protocol.encoder.image_size) {
    throw ConfigError("data.synthetic.image_size", "must equal encoder.image_size");
  }
  return cfg;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError("", std::string("malformed JSON: ") + e.what());
  }
  return parse_config_json(j);
}

inline ExperimentConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

// ---------------------------------------------------------------------------
// Serialisation of the resolved configuration

inline Json to_json(const EncoderConfig& c) {
  return {{"image_size", c.image_size},
          {"patch_size", c.patch_size},
          {"channels", c.channels},
          {"embed_dim", c.embed_dim},
          {"depth", c.depth},
          {"heads", c.heads},
          {"mlp_ratio", c.mlp_ratio},
          {"ln_epsilon", c.ln_epsilon},
          {"adapter",
           {{"hidden_dim", c.adapter.hidden_dim},
            {"scale", c.adapter.scale},
            {"learnable_scale", c.adapter.learnable_scale},
            {"enabled", c.adapter.enabled}}}};
}

inline Json to_json(const Phase1Config& c) {
  return {{"epochs", c.epochs},         {"lr", c.base_lr}, {"momentum", c.momentum},
          {"batch_size", c.batch_size}, {"cosine", c.cosine}, {"weight_decay", c.weight_decay},
          {"head_init", std::string(to_string(c.head_init))}};
}

inline Json to_json(const TTAConfig& c) {
  const auto& a = c.augmentation;
  return {{"views", a.views},
          {"iterations", c.iterations},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"param_mode", std::string(to_string(c.param_mode))},
          {"reset", std::string(to_string(c.reset))},
          {"predict_from_marginal", c.predict_from_marginal},
          {"augmentation",
           {{"identity", a.identity},
            {"crop_scale_min", a.crop_scale_min},
            {"crop_scale_max", a.crop_scale_max},
            {"flip_prob", a.flip_prob},
            {"max_rotation_deg", a.max_rotation_deg},
            {"brightness", a.brightness},
            {"contrast", a.contrast}}}};
}

inline Json to_json(const std::optional<CorruptionSpec>& c) {
  if (!c) return nullptr;
  Json j = {{"kind", std::string(to_string(c->kind))}, {"severity", c->severity}, {"seed", c->seed}};
  if (c->strength) j["strength"] = *c->strength;
  return j;
}

inline Json to_json(const DataConfig& d) {
  if (d.source == DataConfig::Source::Idx) {
    return {{"source", "idx"},
            {"idx",
             {{"train_images", d.train_images},
              {"train_labels", d.train_labels},
              {"test_images", d.test_images},
              {"test_labels", d.test_labels}}}};
  }
  const auto& s = d.synthetic;
  return {{"source", "synthetic"},
          {"synthetic",
           {{"num_classes", s.num_classes},
            {"train_per_class", s.train_per_class},
            {"test_per_class", s.test_per_class},
            {"image_size", s.image_size},
            {"pixel_noise", s.pixel_noise},
            {"contrast_min", s.contrast_min},
            {"contrast_max", s.contrast_max},
            {"phase_jitter", s.phase_jitter},
            {"seed", s.seed}}}};
}

// ---------------------------------------------------------------------------
// Running

/// One (variant, corruption, seed, order seed) cell of the experiment grid.
struct RunSpec {
  const MethodVariant* variant = nullptr;
  std::optional<CorruptionSpec> corruption;
  std::uint64_t seed = 0;
  std::uint64_t order_seed = 0;
};

/// The resolved configuration of one run; its hash is the record key.
inline Json run_config_json(const ExperimentConfig& cfg, const RunSpec& run) {
  const auto& v = *run.variant;
  Json j = {{"method", std::string(to_string(v.method))},
            {"label", v.label},
            {"seed", run.seed},
            {"order_seed", run.order_seed},
            {"encoder", to_json(cfg.protocol.encoder)},
            {"data", to_json(cfg.data)},
            {"increments", cfg.stream.increments},
            {"corruption", to_json(run.corruption)},
            {"eval_order", std::string(to_string(v.eval_order))}};
  if (v.method != Method::FrozenPc) j["phase1"] = to_json(cfg.protocol.phase1);
  if (v.method == Method::Ttacil) j["tta"] = to_json(v.tta);
  return j;
}

inline std::string run_key(const Json& run_config) {
  const std::string s = run_config.dump();
  const auto h = fnv1a({reinterpret_cast<const unsigned char*>(s.data()), s.size()});
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline Json result_record(const Json& run_config, const RunResult& r) {
  Json phase1 = Json::array();
  for (const auto& e : r.phase1_log) phase1.push_back({{"epoch", e.epoch}, {"lr", e.lr}, {"mean_loss", e.mean_loss}});
  Json tta = Json::array();
  for (const auto& b : r.tta_log) {
    tta.push_back({{"task", b.task + 1},
                   {"batch_id", b.batch.batch_id},
                   {"size", b.batch.size},
                   {"pre_entropy", b.batch.pre_entropy},
                   {"post_entropy", b.batch.post_entropy},
                   {"first_objective", b.batch.first_objective},
                   {"pre_accuracy", b.batch.pre_accuracy},
                   {"post_accuracy", b.batch.post_accuracy}});
  }
  return {{"key", run_key(run_config)},
          {"config", run_config},
          {"per_task", r.metrics.per_task},
          {"average", r.metrics.average},
          {"last", r.metrics.last},
          {"eval_sizes", r.eval_sizes},
          {"pre_adaptation_accuracy", r.pre_adaptation_accuracy},
          {"phase1_log", phase1},
          {"tta_log", tta}};
}

inline Dataset load_dataset(const DataConfig& d) {
  if (d.source == DataConfig::Source::Synthetic) return synth_dataset(d.synthetic);
  Dataset ds;
  ds.train = load_idx(d.train_images, d.train_labels, 0);
  ds.test = load_idx(d.test_images, d.test_labels, ds.train.size());
  if (ds.train.empty() || ds.test.empty()) throw std::runtime_error("idx data: empty split");
  ClassId max_label = 0;
  for (const auto* split : {&ds.train, &ds.test}) {
    for (const auto& s : *split) max_label = std::max(max_label, s.label);
  }
  ds.num_classes = static_cast<std::size_t>(max_label) + 1;
  ds.image_size = ds.train.front().image.dim(0);
  return ds;
}

/// Worker count from TTACIL_WORKERS, else the hardware concurrency.
inline std::size_t worker_count_from_env() {
  if (const char* s = std::getenv("TTACIL_WORKERS"); s != nullptr && *s != '\0') {
    char* end = nullptr;
    const long v = std::strtol(s, &end, 10);
    if (*end != '\0' || v <= 0) throw ConfigError("TTACIL_WORKERS", "expected a positive integer");
    return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Keys of the records already present in a results file.
inline std::set<std::string> existing_keys(const std::string& path) {
  std::set<std::string> keys;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const Json j = Json::parse(line);
      if (j.contains("key") && j["key"].is_string()) keys.insert(j["key"].get<std::string>());
    } catch (const Json::parse_error&) {
    }
  }
  return keys;
}

/// Appends one line by rewriting the file through a temporary and renaming it,
/// so an interruption leaves either the old file or the new one.
inline void append_line_atomic(const std::string& path, const std::string& line) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + tmp + "'");
    if (std::ifstream in(path, std::ios::binary); in) out << in.rdbuf();
    out << line << '\n';
    if (!out) throw std::runtime_error("write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline void write_phase1_csv(const std::string& path, const std::vector<EpochLog>& log) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out.precision(17);
  out << "epoch,lr,mean_loss\n";
  for (const auto& e : log) out << e.epoch << ',' << e.lr << ',' << e.mean_loss << '\n';
}

inline void write_tta_csv(const std::string& path, const RunResult& r, const TTAConfig& c) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out.precision(17);
  out << "task,batch_id,pre_entropy,post_entropy,pre_accuracy,post_accuracy,param_mode,N,M,B,lr\n";
  for (const auto& b : r.tta_log) {
    out << b.task + 1 << ',' << b.batch.batch_id << ',' << b.batch.pre_entropy << ',' << b.batch.post_entropy
        << ',' << b.batch.pre_accuracy << ',' << b.batch.post_accuracy << ',' << to_string(c.param_mode) << ','
        << c.iterations << ',' << c.views() << ',' << c.batch_size << ',' << c.lr << '\n';
  }
}

struct ExperimentSummary {
  std::size_t planned = 0;
  std::size_t skipped = 0;
  std::size_t written = 0;
};

/// Runs every (variant, corruption, seed, order seed) cell not yet present in cfg.output.
/// Phase I is computed once per (seed, order seed) and shared by all variants.
inline ExperimentSummary run_experiment(const ExperimentConfig& cfg, std::size_t workers = 1) {
  workers = std::max<std::size_t>(workers, 1);
  const Dataset ds = load_dataset(cfg.data);
  if (ds.image_size != cfg.protocol.encoder.image_size) {
    throw std::runtime_error("dataset images are " + std::to_string(ds.image_size) +
                             " pixels wide but the encoder expects " +
                             std::to_string(cfg.protocol.encoder.image_size));
  }
  if (!cfg.artifacts.empty()) std::filesystem::create_directories(cfg.artifacts);
  if (const auto parent = std::filesystem::path(cfg.output).parent_path(); !parent.empty()) {
    std::filesystem::create_directories(parent);
  }

  std::map<std::uint64_t, TaskStream> streams;
  for (auto o : cfg.stream.order_seeds) streams.emplace(o, build_task_stream(ds, cfg.stream.increments, o));

  const std::set<std::string> done = cfg.skip_existing ? existing_keys(cfg.output) : std::set<std::string>{};
  struct Job {
    RunSpec spec;
    Json run_config;
  };
  std::vector<Job> jobs;
  ExperimentSummary summary;
  std::set<std::pair<std::uint64_t, std::uint64_t>> needs_phase1;
  for (const auto& v : cfg.methods) {
    for (const auto& corruption : cfg.corruptions) {
      for (auto seed : cfg.seeds) {
        for (auto o : cfg.stream.order_seeds) {
          ++summary.planned;
          RunSpec spec{&v, corruption, seed, o};
          Json rc = run_config_json(cfg, spec);
          if (done.contains(run_key(rc))) {
            ++summary.skipped;
            continue;
          }
          if (v.method != Method::FrozenPc) needs_phase1.insert({seed, o});
          jobs.push_back({spec, std::move(rc)});
        }
      }
    }
  }

  auto parallel_for = [workers](std::size_t n, auto&& body) {
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex mu;
    auto loop = [&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    };
    std::vector<std::thread> pool;
    for (std::size_t w = 1; w < std::min(workers, n); ++w) pool.emplace_back(loop);
    loop();
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
  };

  const std::vector<std::pair<std::uint64_t, std::uint64_t>> p1_keys(needs_phase1.begin(), needs_phase1.end());
  std::vector<FirstSession> sessions(p1_keys.size());
  parallel_for(p1_keys.size(), [&](std::size_t i) {
    const auto [seed, o] = p1_keys[i];
    sessions[i] = prepare_first_session(cfg.protocol, streams.at(o), seed);
    if (!cfg.artifacts.empty()) {
      const std::string stem = cfg.artifacts + "/estar_seed" + std::to_string(seed) + "_order" + std::to_string(o);
      save_checkpoint(stem + ".ckpt", sessions[i].e_star);
      write_phase1_csv(stem + "_phase1.csv", sessions[i].log);
    }
  });
  auto session_for = [&](std::uint64_t seed, std::uint64_t o) -> const FirstSession* {
    const auto it = std::lower_bound(p1_keys.begin(), p1_keys.end(), std::pair{seed, o});
    return it != p1_keys.end() && *it == std::pair{seed, o} ? &sessions[static_cast<std::size_t>(it - p1_keys.begin())]
                                                            : nullptr;
  };

  std::mutex write_mu;
  std::vector<std::optional<std::string>> pending(jobs.size());
  std::size_t next_to_write = 0;
  const std::size_t inner = std::max<std::size_t>(1, workers / std::max<std::size_t>(jobs.size(), 1));
  parallel_for(jobs.size(), [&](std::size_t i) {
    const auto& job = jobs[i];
    const auto& v = *job.spec.variant;
    ProtocolConfig pc = cfg.protocol;
    pc.tta = v.tta;
    pc.corruption = job.spec.corruption;
    pc.eval_order = v.eval_order;
    RunResult r;
    try {
      r = run_protocol(pc, streams.at(job.spec.order_seed), v.method, job.spec.seed,
                       session_for(job.spec.seed, job.spec.order_seed), inner);
    } catch (const std::exception& e) {
      throw std::runtime_error("run '" + v.label + "' seed " + std::to_string(job.spec.seed) + " order " +
                               std::to_string(job.spec.order_seed) + ": " + e.what());
    }
    const Json rec = result_record(job.run_config, r);
    if (!cfg.artifacts.empty() && v.method == Method::Ttacil) {
      write_tta_csv(cfg.artifacts + "/tta_" + rec["key"].get<std::string>() + ".csv", r, v.tta);
    }
    // Records are written in job order regardless of completion order.
    std::lock_guard lock(write_mu);
    pending[i] = rec.dump();
    while (next_to_write < pending.size() && pending[next_to_write]) {
      append_line_atomic(cfg.output, *pending[next_to_write]);
      pending[next_to_write].reset();
      ++next_to_write;
      ++summary.written;
    }
  });
  return summary;
}

/// Parses every non-empty line of a results file.
inline std::vector<Json> read_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open results file '" + path + "'");
  std::vector<Json> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(Json::parse(line));
    } catch (const Json::parse_error& e) {
      throw std::runtime_error("'" + path + "' line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace ttacil
