#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mavt/backbone.hpp"
#include "mavt/config.hpp"
#include "mavt/losses.hpp"
#include "mavt/serialize.hpp"
#include "mavt/tokens.hpp"

namespace mavt {

// Frozen encoders plus every trainable part. The two backbone fields alias
// the same tensors unless separate_backbones is set.
struct Model {
  RunConfig cfg;
  BackboneParams bb_a, bb_v;
  TokenBank bank;
  HeadParams heads;
};

// Sub-seeds are derived from cfg.seed, so one seed fixes the whole model.
Model init_model(const RunConfig& cfg);

// Adam first/second moments parallel to the optimized parameter list, plus
// the shared step counter. Unimodal training optimizes a subset of the
// model's trainables, so the names travel with the buffers.
struct OptimState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  long long step = 0;
  std::vector<std::string> names;
  std::vector<Tensor> m, v;
};

// All trainable leaves as stable (name, tensor) pairs; aliased class tokens
// appear once. Checkpoint and optimizer layouts key off this order.
std::vector<std::pair<std::string, Tensor>> collect_trainables(const Model& m);

long long trainable_count(const Model& m);
long long frozen_count(const Model& m);  // unique frozen tensors only

// Checksum over the frozen record section — the training loop must never
// change it.
std::uint64_t frozen_checksum(const Model& m);

// Record sections: frozen/v/ (and frozen/a/ when separate), train/, and —
// when an optimizer is given — opt/m/, opt/v/, opt/step. meta/epoch rides
// along. The checkpoint file prepends the config text so a checkpoint is
// self-describing: config lines, one blank line, then the binary record.
Record model_record(const Model& m, const OptimState* opt, int epoch);
Model model_from_record(const Record& rec, const RunConfig& cfg,
                        OptimState* opt, int* epoch);

void save_checkpoint(const std::string& path, const Model& m,
                     const OptimState* opt, int epoch);

struct LoadedCheckpoint {
  Model model;
  OptimState opt;
  bool has_opt = false;
  int epoch = 0;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

// Deep copy through the record path, preserving aliasing and shapes.
Model clone_model(const Model& m);

}  // namespace mavt
