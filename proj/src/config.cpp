#include "mavt/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace mavt {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

int parse_int(const std::string& key, const std::string& v) {
  int out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("config key " + key + ": expected integer, got \"" + v +
                      "\"");
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("config key " + key + ": expected unsigned integer, got \"" +
                      v + "\"");
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": expected real, got \"" + v +
                      "\"");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  throw ConfigError("config key " + key + ": expected true/false, got \"" + v +
                    "\"");
}

void parse_pair(const std::string& key, const std::string& v, int& a, int& b) {
  std::size_t x = v.find('x');
  if (x == std::string::npos)
    throw ConfigError("config key " + key + ": expected AxB, got \"" + v + "\"");
  a = parse_int(key, v.substr(0, x));
  b = parse_int(key, v.substr(x + 1));
}

std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct KeyDef {
  const char* name;
  const char* doc;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::vector<KeyDef>& key_table() {
  auto i = [](int RunConfig::* f) {
    return std::pair(
        std::function<void(RunConfig&, const std::string&)>(
            [f](RunConfig& c, const std::string& v) {
              c.*f = parse_int("", v);
            }),
        std::function<std::string(const RunConfig&)>(
            [f](const RunConfig& c) { return std::to_string(c.*f); }));
  };
  auto r = [](double RunConfig::* f) {
    return std::pair(
        std::function<void(RunConfig&, const std::string&)>(
            [f](RunConfig& c, const std::string& v) {
              c.*f = parse_real("", v);
            }),
        std::function<std::string(const RunConfig&)>(
            [f](const RunConfig& c) { return fmt_real(c.*f); }));
  };
  auto b = [](bool RunConfig::* f) {
    return std::pair(
        std::function<void(RunConfig&, const std::string&)>(
            [f](RunConfig& c, const std::string& v) {
              c.*f = parse_bool("", v);
            }),
        std::function<std::string(const RunConfig&)>(
            [f](const RunConfig& c) { return c.*f ? "true" : "false"; }));
  };
  auto s = [](std::string RunConfig::* f) {
    return std::pair(
        std::function<void(RunConfig&, const std::string&)>(
            [f](RunConfig& c, const std::string& v) { c.*f = v; }),
        std::function<std::string(const RunConfig&)>(
            [f](const RunConfig& c) { return c.*f; }));
  };

  static const std::vector<KeyDef> table = [&] {
    std::vector<KeyDef> t;
    auto add = [&t](const char* name, const char* doc, auto pair) {
      t.push_back({name, doc, pair.first, pair.second});
    };
    add("d", "embedding width", i(&RunConfig::d));
    add("depth", "number of frozen transformer blocks K", i(&RunConfig::depth));
    add("heads", "attention heads (backbone and LSA)", i(&RunConfig::heads));
    add("mlp_ratio", "hidden/width ratio of block MLPs", i(&RunConfig::mlp_ratio));
    add("patch_size", "square patch side in pixels/bins", i(&RunConfig::patch_size));
    t.push_back({"image_hw", "visual input size as HxW",
                 [](RunConfig& c, const std::string& v) {
                   parse_pair("image_hw", v, c.image_h, c.image_w);
                 },
                 [](const RunConfig& c) {
                   return std::to_string(c.image_h) + "x" +
                          std::to_string(c.image_w);
                 }});
    t.push_back({"spec_ft", "spectrogram size as FxT",
                 [](RunConfig& c, const std::string& v) {
                   parse_pair("spec_ft", v, c.spec_f, c.spec_t);
                 },
                 [](const RunConfig& c) {
                   return std::to_string(c.spec_f) + "x" +
                          std::to_string(c.spec_t);
                 }});
    add("separate_backbones", "audio and visual use distinct frozen encoders",
        b(&RunConfig::separate_backbones));
    add("n_a", "audio prompt tokens", i(&RunConfig::n_a));
    add("n_v", "visual prompt tokens", i(&RunConfig::n_v));
    add("n_s", "shared multimodal prompt tokens", i(&RunConfig::n_s));
    add("class_tokens", "append background/foreground class tokens",
        b(&RunConfig::class_tokens));
    add("deep_prompts", "fresh prompt tokens per block instead of propagation",
        b(&RunConfig::deep_prompts));
    add("share_class_tokens", "one z_b/z_f pair shared across modalities",
        b(&RunConfig::share_class_tokens));
    add("lsa", "apply local self-attention to prompt bags", b(&RunConfig::lsa));
    add("tau", "contrastive temperature", r(&RunConfig::tau));
    add("contrastive_weight", "weight on the summed contrastive terms",
        r(&RunConfig::contrastive_weight));
    add("eq9_mode", "background BCE scope: literal | always_bg",
        s(&RunConfig::eq9_mode));
    add("blockwise", "contrast every block (false: final block only)",
        b(&RunConfig::blockwise));
    add("classes", "foreground class count C", i(&RunConfig::classes));
    add("noise_std", "per-sample Gaussian noise level", r(&RunConfig::noise_std));
    add("train_size", "training split size", i(&RunConfig::train_size));
    add("test_size", "test split size", i(&RunConfig::test_size));
    add("test_bg_ratio", "fraction of baked background pairs in the test split",
        r(&RunConfig::test_bg_ratio));
    add("batch_size", "training batch size B", i(&RunConfig::batch_size));
    add("epochs", "training epochs", i(&RunConfig::epochs));
    add("lr", "initial Adam learning rate", r(&RunConfig::lr));
    add("lr_decay", "learning-rate multiplier per schedule step",
        r(&RunConfig::lr_decay));
    add("lr_step", "epochs between learning-rate decays", i(&RunConfig::lr_step));
    add("mismatch_ratio", "fraction of each batch turned into mismatched pairs",
        r(&RunConfig::mismatch_ratio));
    add("train_modality", "training stream selection: av | a | v",
        s(&RunConfig::train_modality));
    t.push_back({"seed", "master seed for all subsystems",
                 [](RunConfig& c, const std::string& v) {
                   c.seed = parse_u64("seed", v);
                 },
                 [](const RunConfig& c) { return std::to_string(c.seed); }});
    return t;
  }();
  return table;
}

const KeyDef* find_key(const std::string& name) {
  for (const auto& k : key_table())
    if (name == k.name) return &k;
  return nullptr;
}

void set_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  const KeyDef* def = find_key(key);
  if (!def) throw ConfigError("unknown config key \"" + key + "\"");
  try {
    def->set(cfg, value);
  } catch (const ConfigError&) {
    throw ConfigError("config key " + key + ": bad value \"" + value + "\"");
  }
}

}  // namespace

RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    set_key(cfg, key, value);
  }
  validate_config(cfg);
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

std::string dump_config(const RunConfig& cfg) {
  std::ostringstream os;
  for (const auto& k : key_table()) os << k.name << " = " << k.get(cfg) << "\n";
  return os.str();
}

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& sets) {
  for (const std::string& kv : sets) {
    std::size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw ConfigError("override \"" + kv + "\": expected key=value");
    std::string key = trim(kv.substr(0, eq));
    std::string value = trim(kv.substr(eq + 1));
    set_key(cfg, key, value);
  }
  validate_config(cfg);
}

void validate_config(const RunConfig& cfg) {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("invalid config: " + msg);
  };
  require(cfg.d >= 1, "d must be >= 1");
  require(cfg.depth >= 1, "depth must be >= 1");
  require(cfg.heads >= 1 && cfg.d % cfg.heads == 0,
          "heads must divide d");
  require(cfg.mlp_ratio >= 1, "mlp_ratio must be >= 1");
  require(cfg.patch_size >= 1, "patch_size must be >= 1");
  require(cfg.image_h >= 1 && cfg.image_w >= 1, "image_hw must be positive");
  require(cfg.spec_f >= 1 && cfg.spec_t >= 1, "spec_ft must be positive");
  require(cfg.image_h % cfg.patch_size == 0 &&
              cfg.image_w % cfg.patch_size == 0,
          "image_hw must be divisible by patch_size");
  require(cfg.spec_f % cfg.patch_size == 0 && cfg.spec_t % cfg.patch_size == 0,
          "spec_ft must be divisible by patch_size");
  require(cfg.n_a >= 0 && cfg.n_v >= 0 && cfg.n_s >= 0,
          "token counts must be >= 0");
  require(cfg.tau > 0.0, "tau must be positive");
  require(cfg.contrastive_weight >= 0.0, "contrastive_weight must be >= 0");
  require(cfg.eq9_mode == "literal" || cfg.eq9_mode == "always_bg",
          "eq9_mode must be literal or always_bg");
  require(cfg.classes >= 2, "classes must be >= 2");
  require(cfg.noise_std >= 0.0, "noise_std must be >= 0");
  require(cfg.train_size >= 1 && cfg.test_size >= 1,
          "split sizes must be >= 1");
  require(cfg.test_bg_ratio >= 0.0 && cfg.test_bg_ratio <= 1.0,
          "test_bg_ratio must be in [0,1]");
  require(cfg.batch_size >= 1, "batch_size must be >= 1");
  require(cfg.epochs >= 1, "epochs must be >= 1");
  require(cfg.lr > 0.0, "lr must be positive");
  require(cfg.lr_decay > 0.0 && cfg.lr_decay <= 1.0,
          "lr_decay must be in (0,1]");
  require(cfg.lr_step >= 1, "lr_step must be >= 1");
  require(cfg.mismatch_ratio >= 0.0 && cfg.mismatch_ratio <= 1.0,
          "mismatch_ratio must be in [0,1]");
  require(cfg.train_modality == "av" || cfg.train_modality == "a" ||
              cfg.train_modality == "v",
          "train_modality must be av, a, or v");
}

std::string config_reference() {
  RunConfig defaults;
  std::ostringstream os;
  for (const auto& k : key_table())
    os << "  " << k.name << " = " << k.get(defaults) << "\n      " << k.doc
       << "\n";
  return os.str();
}

}  // namespace mavt
