#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mavt/model.hpp"
#include "mavt/synthdata.hpp"

namespace mavt {

OptimState init_opt(const std::vector<std::pair<std::string, Tensor>>& params);

// Bias-corrected Adam over the trainable list. Every parameter must carry a
// gradient (ContractError otherwise) — a silent stale grad is the bug this
// guards against.
void adam_step(OptimState& opt,
               const std::vector<std::pair<std::string, Tensor>>& params,
               double lr);

// Step decay: lr * lr_decay^floor(epoch / lr_step).
double lr_at(int epoch, const RunConfig& cfg);

struct EvalResult {
  double fg_acc = 0.0;
  double bg_acc = 0.0;
  double retrieval_r1 = 0.0;
};

// modality "av": paired encode, heads on both class tokens, plus v->a
// retrieval over pooled final-block shared features. "a"/"v": unimodal
// routing; retrieval reads 0 (no paired embedding exists).
// fg accuracy counts argmax hits over foreground samples only; bg accuracy
// thresholds the background probability at 0.5 over every sample.
EvalResult evaluate(const Model& m, const std::vector<PairedSample>& test,
                    const std::string& modality);

// [B,3,H,W] / [B,F,T] constant batch tensors.
Tensor stack_visual(const std::vector<PairedSample>& batch);
Tensor stack_audio(const std::vector<PairedSample>& batch);

inline const char* metrics_header() {
  return "epoch,lr,loss_total,loss_bf,loss_cnt_sum,fg_acc,bg_acc,retrieval_r1";
}

struct TrainLog {
  std::string csv;  // header plus one row per epoch
  int best_epoch = -1;
  EvalResult best_eval;
  Model best_model;
  OptimState best_opt;
  EvalResult final_eval;
};

// Full loop: shuffled drop-last batches, mismatch injection on the paired
// path, Adam with step decay, one evaluation row per epoch, best checkpoint
// kept by foreground accuracy. Loss columns are epoch means over steps.
// A non-finite loss aborts with a NumericalError naming epoch, step, and the
// last finite loss values.
TrainLog train(Model& m, const Dataset& ds);

}  // namespace mavt
