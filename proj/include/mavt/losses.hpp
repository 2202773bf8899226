#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mavt/config.hpp"
#include "mavt/serialize.hpp"
#include "mavt/tensor.hpp"
#include "mavt/tokens.hpp"

namespace mavt {

// Background and foreground prediction heads over the concatenated class-token
// outputs [visual ‖ audio]: two-layer GELU MLPs with hidden width 2d. The
// background call is a cross-modal match test, which no affine map on
// per-stream features can express — the hidden layer is what makes it
// learnable. Rows 0..d-1 of each first-layer weight are the visual half,
// rows d..2d-1 the audio half, so either half works standalone with the full
// biases (unimodal routing).
struct HeadParams {
  Tensor bg_w1, bg_b1;  // [2d, 2d], [2d]
  Tensor bg_w2, bg_b2;  // [2d, 1], [1]
  Tensor fg_w1, fg_b1;  // [2d, 2d], [2d]
  Tensor fg_w2, fg_b2;  // [2d, C], [C]
};

// Random first layer, zero second layer: a fresh model predicts exactly 0.5
// background probability and uniform foreground logits, yet gradients reach
// every layer from the first step.
HeadParams init_heads(const RunConfig& cfg, std::uint64_t seed);

struct Predictions {
  Tensor bg_logit;   // [B]
  Tensor bg_prob;    // sigmoid(bg_logit), [B]
  Tensor fg_logits;  // [B, C]
};

// Both streams' final-block class tokens through the heads. Streams may be
// batched or single-sample; predictions always carry a batch axis.
Predictions heads_forward(const HeadParams& heads, const StreamState& stream_a,
                          const StreamState& stream_v);

// One stream only, using its half of each weight matrix plus the full bias.
Predictions unimodal_heads_forward(const HeadParams& heads,
                                   const StreamState& stream);

// Symmetric InfoNCE over cosine similarities of the masked sub-batch
// (Eqs. 4-6). mask[i] = 1 means row i participates; an empty sub-batch
// contributes exactly zero.
Tensor scl_block_loss(const Tensor& v, const Tensor& a, double tau,
                      const std::vector<int>& mask);

// Eq. 9 batch mean. mode "literal": y_b-weighted BCE + (1-y_b)-weighted CE.
// mode "always_bg": BCE on every sample, CE still foreground-only.
Tensor fg_bg_loss(const Predictions& pred, const std::vector<int>& y_b,
                  const std::vector<int>& y_f, const std::string& mode);

struct LossBundle {
  Tensor l_bf;
  std::vector<Tensor> l_cnt;  // contributing blocks, in depth order
  Tensor l_total;
  double bf_value = 0.0;
  std::vector<double> cnt_values;
  double total_value = 0.0;
};

// Eq. 10: L_bf plus the contrastive sum over foreground samples. blockwise
// off restricts the sum to the final block. block_weights (size K) scales
// individual blocks; empty means all ones. Non-finite totals raise
// NumericalError with the offending term named.
LossBundle total_loss(const Predictions& pred, const StreamState& stream_a,
                      const StreamState& stream_v,
                      const std::vector<int>& y_b,
                      const std::vector<int>& y_f, const RunConfig& cfg,
                      const std::vector<double>& block_weights = {});

// Gradient of one foreground logit w.r.t. the visual patch rows entering the
// final block (the rows its attention folds into the class token),
// channel-averaged, ReLU-clamped, min-max normalized to [0,1], shaped to the
// patch grid. Requires a single-sample stream with its graph still attached.
Tensor saliency_map(const StreamState& stream_v, const Predictions& pred,
                    int class_idx, const RunConfig& cfg);

// 8-bit binary PGM (P5) with values scaled from [0,1].
void write_pgm(const std::string& path, const Tensor& map);

void add_heads(Record& rec, const std::string& prefix, const HeadParams& h);
HeadParams read_heads(const Record& rec, const std::string& prefix);
std::vector<std::pair<std::string, Tensor>> head_trainables(
    const HeadParams& h);

}  // namespace mavt
