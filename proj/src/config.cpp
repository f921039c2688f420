#include "mgil/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <type_traits>

#include <json.hpp>

namespace mgil {

using json = nlohmann::json;

namespace {

template <typename Enum>
struct EnumName {
  Enum value;
  const char* name;
};

constexpr EnumName<Task> kTasks[] = {{Task::classify, "classify"}, {Task::keypoint, "keypoint"}};
constexpr EnumName<DownsamplerKind> kKinds[] = {{DownsamplerKind::strided_conv, "strided_conv"},
                                                {DownsamplerKind::max_pool, "max_pool"},
                                                {DownsamplerKind::spd_conv, "spd_conv"},
                                                {DownsamplerKind::mgil, "mgil"}};
constexpr EnumName<Normalization> kNorms[] = {{Normalization::batch, "batch"}, {Normalization::none, "none"}};
constexpr EnumName<Fusion> kFusions[] = {{Fusion::adaptive, "adaptive"}, {Fusion::additive, "additive"}};
constexpr EnumName<CiiInput> kCiiInputs[] = {{CiiInput::raw, "raw"}, {CiiInput::sct, "sct"}};
constexpr EnumName<OptimKind> kOptims[] = {{OptimKind::sgd_momentum, "sgd_momentum"}, {OptimKind::adam, "adam"}};
constexpr EnumName<DataSource> kSources[] = {{DataSource::cifar10, "cifar10"}, {DataSource::synthetic, "synthetic"}};

template <typename Enum, std::size_t N>
const char* name_of(const EnumName<Enum> (&table)[N], Enum v) {
  for (const auto& e : table)
    if (e.value == v) return e.name;
  return "?";
}

// Reads one JSON object, remembering which keys were consumed so that
// leftovers can be reported as unknown.
class Section {
public:
  Section(const json& object, std::string path) : obj_(object), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError("config: '" + where() + "' must be an object");
  }

  std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* find(const std::string& key) {
    known_.insert(key);
    const auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  template <typename T>
    requires(std::is_unsigned_v<T> && !std::is_same_v<T, bool>)
  void get(const std::string& key, T& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) fail(key, "must be a non-negative integer");
      out = v->get<T>();
    }
  }
  void get(const std::string& key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) fail(key, "must be a number");
      out = v->get<double>();
    }
  }
  void get(const std::string& key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) fail(key, "must be true or false");
      out = v->get<bool>();
    }
  }
  void get(const std::string& key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) fail(key, "must be a string");
      out = v->get<std::string>();
    }
  }
  template <typename Enum, std::size_t N>
  void get(const std::string& key, Enum& out, const EnumName<Enum> (&table)[N]) {
    const json* v = find(key);
    if (v == nullptr) return;
    std::string allowed;
    for (const auto& e : table) {
      if (v->is_string() && v->get<std::string>() == e.name) {
        out = e.value;
        return;
      }
      allowed += std::string(allowed.empty() ? "" : ", ") + e.name;
    }
    fail(key, "must be one of: " + allowed);
  }
  void get(const std::string& key, std::vector<std::size_t>& out) {
    const json* v = find(key);
    if (v == nullptr) return;
    if (!v->is_array()) fail(key, "must be an array of non-negative integers");
    out.clear();
    for (const auto& e : *v) {
      if (!e.is_number_unsigned()) fail(key, "must be an array of non-negative integers");
      out.push_back(e.get<std::size_t>());
    }
  }

  /// Nested object, or nullptr when absent.
  const json* child(const std::string& key) { return find(key); }

  void finish() const {
    for (const auto& item : obj_.items()) {
      if (!known_.count(item.key())) throw ConfigError("config: unknown key '" + key_path(item.key()) + "'");
    }
  }

  [[noreturn]] void fail(const std::string& key, const std::string& what) const {
    throw ConfigError("config: '" + key_path(key) + "' " + what);
  }

private:
  std::string where() const { return path_.empty() ? "<root>" : path_; }

  const json& obj_;
  std::string path_;
  std::set<std::string> known_;
};

template <typename Fn>
void with_section(Section& parent, const std::string& key, Fn&& fn) {
  const json* v = parent.child(key);
  if (v == nullptr) return;
  Section s(*v, parent.key_path(key));
  fn(s);
  s.finish();
}

void check(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigError("config: '" + key + "' " + what);
}

void validate(const RunConfig& c) {
  check(c.net.base_width >= 1, "net.base_width", "must be positive");
  check(c.net.in_channels >= 1, "net.in_channels", "must be positive");
  check(c.net.num_stages >= 1 && c.net.num_stages <= 6, "net.num_stages", "must be in [1, 6]");
  check(c.task == Task::keypoint || c.net.num_classes >= 2, "net.num_classes", "must be at least 2");
  check(c.net.num_keypoints >= 1, "net.num_keypoints", "must be positive");
  check(c.net.decoder_layers >= 1, "net.decoder_layers", "must be at least 1");
  check(c.net.mgil.lie_depth_flie >= 1, "mgil.lie_depth_flie", "must be at least 1");
  if (c.net.mgil.cii_enabled) {
    check(!c.net.mgil.dilation_rates.empty(), "mgil.dilation_rates", "must be non-empty when cii_enabled");
    for (auto d : c.net.mgil.dilation_rates) check(d >= 2, "mgil.dilation_rates", "entries must be >= 2");
  }
  check(c.net.mgil.eca_gamma > 0, "mgil.eca_gamma", "must be positive");
  check(std::isfinite(c.optim.lr) && c.optim.lr >= 0, "optim.lr", "must be finite and non-negative");
  check(c.optim.momentum >= 0 && c.optim.momentum < 1, "optim.momentum", "must be in [0, 1)");
  check(c.optim.beta1 >= 0 && c.optim.beta1 < 1, "optim.beta1", "must be in [0, 1)");
  check(c.optim.beta2 >= 0 && c.optim.beta2 < 1, "optim.beta2", "must be in [0, 1)");
  check(c.optim.eps > 0, "optim.eps", "must be positive");
  check(c.optim.weight_decay >= 0, "optim.weight_decay", "must be non-negative");
  check(c.train.batch_size >= 1, "train.batch_size", "must be positive");
  check(c.train.pck_fraction > 0, "train.pck_fraction", "must be positive");
  check(c.data.lowres_factor >= 1, "data.lowres_factor", "must be positive");
  check(c.data.train_samples >= 1, "data.train_samples", "must be positive");
  check(c.data.test_samples >= 1, "data.test_samples", "must be positive");
  check(c.data.image_size >= 2, "data.image_size", "must be at least 2");
  check(c.data.source == DataSource::synthetic || !c.data.path.empty(), "data.path", "is required for cifar10");
  check(c.data.source == DataSource::synthetic || c.task == Task::classify, "data.source",
        "cifar10 only provides classification labels");
  const std::size_t full = c.data.source == DataSource::cifar10 ? kCifarImageSide : c.data.image_size;
  check(full % c.data.lowres_factor == 0, "data.lowres_factor", "must divide the image size");
  const std::size_t side = full / c.data.lowres_factor;
  check(side % c.net.output_stride() == 0, "net.num_stages",
        "output stride " + std::to_string(c.net.output_stride()) + " must divide the image side " +
            std::to_string(side));
  check(!c.ablation.seeds.empty(), "ablation.seeds", "must be non-empty");
  const auto names = ablation_preset_names();
  check(std::find(names.begin(), names.end(), c.ablation.preset) != names.end(), "ablation.preset",
        "is not a known preset");
}

}  // namespace

const char* to_string(Task task) { return name_of(kTasks, task); }
const char* to_string(DataSource source) { return name_of(kSources, source); }

NetSpec RunConfig::net_spec() const {
  NetSpec s = net;
  s.head = task == Task::classify ? HeadKind::classifier : HeadKind::heatmap;
  return s;
}

TrainOptions RunConfig::train_options() const {
  TrainOptions o = train;
  o.epochs = epochs;
  return o;
}

RunConfig parse_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  RunConfig c;
  Section top(root, "");
  top.get("task", c.task, kTasks);
  top.get("seed", c.seed);
  top.get("epochs", c.epochs);
  top.get("output_dir", c.output_dir);
  with_section(top, "net", [&](Section& s) {
    s.get("in_channels", c.net.in_channels);
    s.get("base_width", c.net.base_width);
    s.get("num_stages", c.net.num_stages);
    s.get("blocks_per_stage", c.net.blocks_per_stage);
    s.get("widen", c.net.widen);
    s.get("normalization", c.net.normalization, kNorms);
    s.get("num_classes", c.net.num_classes);
    s.get("num_keypoints", c.net.num_keypoints);
    s.get("decoder_layers", c.net.decoder_layers);
  });
  with_section(top, "downsampler", [&](Section& s) { s.get("kind", c.net.downsampler, kKinds); });
  with_section(top, "mgil", [&](Section& s) {
    s.get("lie_depth_flie", c.net.mgil.lie_depth_flie);
    s.get("lie_depth_cii", c.net.mgil.lie_depth_cii);
    s.get("dilation_rates", c.net.mgil.dilation_rates);
    s.get("fusion", c.net.mgil.fusion, kFusions);
    s.get("cii_enabled", c.net.mgil.cii_enabled);
    s.get("cii_input", c.net.mgil.cii_input, kCiiInputs);
    s.get("eca_gamma", c.net.mgil.eca_gamma);
    s.get("eca_b", c.net.mgil.eca_b);
  });
  with_section(top, "optim", [&](Section& s) {
    s.get("kind", c.optim.kind, kOptims);
    s.get("lr", c.optim.lr);
    s.get("momentum", c.optim.momentum);
    s.get("beta1", c.optim.beta1);
    s.get("beta2", c.optim.beta2);
    s.get("eps", c.optim.eps);
    s.get("weight_decay", c.optim.weight_decay);
    s.get("cosine", c.optim.cosine);
  });
  with_section(top, "train", [&](Section& s) {
    s.get("batch_size", c.train.batch_size);
    s.get("flip", c.train.flip);
    s.get("pck_fraction", c.train.pck_fraction);
  });
  with_section(top, "data", [&](Section& s) {
    s.get("source", c.data.source, kSources);
    s.get("path", c.data.path);
    s.get("lowres_factor", c.data.lowres_factor);
    s.get("train_samples", c.data.train_samples);
    s.get("test_samples", c.data.test_samples);
    s.get("image_size", c.data.image_size);
    s.get("seed", c.data.seed);
  });
  with_section(top, "ablation", [&](Section& s) {
    s.get("preset", c.ablation.preset);
    if (const json* v = s.child("seeds")) {
      if (!v->is_array() || v->empty()) s.fail("seeds", "must be a non-empty array of non-negative integers");
      c.ablation.seeds.clear();
      for (const auto& e : *v) {
        if (!e.is_number_unsigned()) s.fail("seeds", "must be a non-empty array of non-negative integers");
        c.ablation.seeds.push_back(e.get<std::uint64_t>());
      }
    }
  });
  top.finish();
  validate(c);
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot read " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str());
}

std::string dump_config(const RunConfig& c) {
  json j;
  j["task"] = to_string(c.task);
  j["seed"] = c.seed;
  j["epochs"] = c.epochs;
  j["output_dir"] = c.output_dir;
  j["net"] = {{"in_channels", c.net.in_channels},
              {"base_width", c.net.base_width},
              {"num_stages", c.net.num_stages},
              {"blocks_per_stage", c.net.blocks_per_stage},
              {"widen", c.net.widen},
              {"normalization", name_of(kNorms, c.net.normalization)},
              {"num_classes", c.net.num_classes},
              {"num_keypoints", c.net.num_keypoints},
              {"decoder_layers", c.net.decoder_layers}};
  j["downsampler"] = {{"kind", name_of(kKinds, c.net.downsampler)}};
  j["mgil"] = {{"lie_depth_flie", c.net.mgil.lie_depth_flie},
               {"lie_depth_cii", c.net.mgil.lie_depth_cii},
               {"dilation_rates", c.net.mgil.dilation_rates},
               {"fusion", name_of(kFusions, c.net.mgil.fusion)},
               {"cii_enabled", c.net.mgil.cii_enabled},
               {"cii_input", name_of(kCiiInputs, c.net.mgil.cii_input)},
               {"eca_gamma", c.net.mgil.eca_gamma},
               {"eca_b", c.net.mgil.eca_b}};
  j["optim"] = {{"kind", name_of(kOptims, c.optim.kind)},
                {"lr", c.optim.lr},
                {"momentum", c.optim.momentum},
                {"beta1", c.optim.beta1},
                {"beta2", c.optim.beta2},
                {"eps", c.optim.eps},
                {"weight_decay", c.optim.weight_decay},
                {"cosine", c.optim.cosine}};
  j["train"] = {{"batch_size", c.train.batch_size}, {"flip", c.train.flip}, {"pck_fraction", c.train.pck_fraction}};
  j["data"] = {{"source", to_string(c.data.source)},
               {"path", c.data.path},
               {"lowres_factor", c.data.lowres_factor},
               {"train_samples", c.data.train_samples},
               {"test_samples", c.data.test_samples},
               {"image_size", c.data.image_size},
               {"seed", c.data.seed}};
  j["ablation"] = {{"preset", c.ablation.preset}, {"seeds", c.ablation.seeds}};
  return j.dump(2) + "\n";
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t config_hash(const RunConfig& config) { return fnv1a64(dump_config(config)); }

namespace {

Dataset synthetic_split(const RunConfig& c, std::size_t n, const char* split) {
  const std::uint64_t seed = derive_seed(c.data.seed, split);
  if (c.task == Task::classify) return synth_classification_dataset(n, c.data.image_size, c.net.num_classes, seed);
  // The heatmap stride is the net's output stride at the final resolution;
  // lowres_transform keeps it when shrinking.
  return synth_keypoint_dataset(n, c.data.image_size, seed, c.net.output_stride());
}

Dataset finish(Dataset d, const RunConfig& c) {
  return c.data.lowres_factor == 1 ? d : lowres_transform(d, c.data.lowres_factor);
}

Dataset cifar_split(const RunConfig& c, const std::filesystem::path& dir, Split split) {
  Dataset d = load_cifar10(dir, split, split == Split::train ? c.data.train_samples : c.data.test_samples);
  if (c.net.num_classes != 10) throw ConfigError("config: 'net.num_classes' must be 10 for cifar10");
  return d;
}

}  // namespace

DataSplits load_data(const RunConfig& c) {
  if (c.data.source == DataSource::synthetic) {
    return {finish(synthetic_split(c, c.data.train_samples, "train"), c),
            finish(synthetic_split(c, c.data.test_samples, "test"), c)};
  }
  return {finish(cifar_split(c, c.data.path, Split::train), c), finish(cifar_split(c, c.data.path, Split::test), c)};
}

Dataset load_test_data(const RunConfig& c, const std::string& source) {
  if (source == "synthetic") {
    if (c.data.source != DataSource::synthetic) {
      throw ConfigError("eval: checkpoint was trained on cifar10, not synthetic data");
    }
    return finish(synthetic_split(c, c.data.test_samples, "test"), c);
  }
  if (c.task != Task::classify) throw ConfigError("eval: keypoint checkpoints only evaluate on 'synthetic'");
  return finish(cifar_split(c, source, Split::test), c);
}

}  // namespace mgil
