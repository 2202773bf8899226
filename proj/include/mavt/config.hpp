#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mavt/errors.hpp"

namespace mavt {

// Flat run configuration shared by every subsystem. One key=value file drives
// a whole run; ablation suites derive variants by flipping single keys.
struct RunConfig {
  // backbone geometry
  int d = 32;
  int depth = 4;
  int heads = 4;
  int mlp_ratio = 4;
  int patch_size = 8;
  int image_h = 32, image_w = 32;   // key image_hw, "HxW"
  int spec_f = 24, spec_t = 32;     // key spec_ft, "FxT"
  bool separate_backbones = false;

  // tokens
  int n_a = 5;
  int n_v = 5;
  int n_s = 5;
  bool class_tokens = true;
  bool deep_prompts = false;
  bool share_class_tokens = true;
  bool lsa = true;

  // losses
  double tau = 0.07;
  double contrastive_weight = 1.0;
  std::string eq9_mode = "literal";  // literal | always_bg
  bool blockwise = true;

  // data
  int classes = 8;
  double noise_std = 0.1;
  int train_size = 448;
  int test_size = 224;
  double test_bg_ratio = 0.2;

  // training
  int batch_size = 32;
  int epochs = 200;
  double lr = 1e-3;
  double lr_decay = 0.1;
  int lr_step = 30;
  double mismatch_ratio = 0.25;
  std::string train_modality = "av";  // av | a | v
  std::uint64_t seed = 1;

  int patch_pixels() const { return 3 * patch_size * patch_size; }
  int visual_patches() const {
    return (image_h / patch_size) * (image_w / patch_size);
  }
  int audio_patches() const {
    return (spec_f / patch_size) * (spec_t / patch_size);
  }
};

// key=value per line; '#' starts a comment; blank lines ignored; whitespace
// around key and value trimmed. Unknown keys are rejected.
RunConfig parse_config_text(const std::string& text);
RunConfig load_config(const std::string& path);

// Stable canonical dump; parse(dump(c)) reproduces c exactly.
std::string dump_config(const RunConfig& cfg);

// Apply "key=value" strings on top of cfg (CLI override channel).
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& sets);

// Range/consistency checks; throws ConfigError.
void validate_config(const RunConfig& cfg);

// One line per key: "name  default  meaning" (for --help).
std::string config_reference();

}  // namespace mavt
