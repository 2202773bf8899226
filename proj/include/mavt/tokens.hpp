#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mavt/backbone.hpp"
#include "mavt/config.hpp"
#include "mavt/tensor.hpp"

namespace mavt {

enum class Modality { audio, visual };

// One residual multi-head attention unit over a prompt bag (no biases).
struct LsaParams {
  Tensor wq, wk, wv, wo;  // [d,d]
  bool defined() const { return wq.defined(); }
};

// Every trainable parameter except the prediction heads. Prompt bags hold one
// tensor per block when deep_prompts is on, otherwise a single propagated set.
// With share_class_tokens the audio handles alias the visual nodes, so the
// parameter is genuinely one tensor fed by both streams.
struct TokenBank {
  std::vector<Tensor> z_a, z_v, z_s;  // each entry [n, d]
  Tensor z_b_v, z_f_v;                // [1, d]; undefined when class_tokens off
  Tensor z_b_a, z_f_a;
  LsaParams lsa_a, lsa_v, lsa_s;
};

TokenBank init_tokens(const RunConfig& cfg, std::uint64_t seed);

// LSA(x) = x + MHA(x), Eq. 1 shape-preserving residual attention.
Tensor lsa_forward(const LsaParams& p, int heads, const Tensor& x);

// Row offsets of the named slices inside an assembled stream.
struct StreamLayout {
  int bg = -1;                       // -1 when class tokens are off
  int mod_off = 0, mod_len = 0;
  int patch_off = 0, patch_len = 0;
  int shared_off = 0, shared_len = 0;
  int fg = -1;
  int total = 0;
};

StreamLayout stream_layout(const RunConfig& cfg, int n_mod, int n_patches,
                           bool with_shared);

// Assembled stream input plus the per-block outputs E^1..E^K.
struct StreamState {
  Modality modality = Modality::audio;
  StreamLayout layout;
  Tensor input;
  std::vector<Tensor> blocks;
};

// [z_b ‖ LSA(z_mod) ‖ patches ‖ LSA(z_s) ‖ z_f] for the paired path (class
// token parts and empty bags drop out of the concatenation as configured).
// Patches may be [n,d] or [B,n,d]; prompt rows broadcast across the batch.
Tensor assemble_stream(Modality which, const TokenBank& bank,
                       const Tensor& patches, const RunConfig& cfg);

// Both streams through the K frozen blocks, recording every block output.
std::pair<StreamState, StreamState> encode_pair(const TokenBank& bank,
                                                const BackboneParams& bb_a,
                                                const BackboneParams& bb_v,
                                                const Tensor& patches_a,
                                                const Tensor& patches_v,
                                                const RunConfig& cfg);

// Mean over the shared-token rows of E^k (k is 1-based).
Tensor pool_shared(const StreamState& stream, int k);

// Single-modality stream [z_b ‖ LSA(z_mod) ‖ patches ‖ z_f]: no shared
// tokens, used for unimodal test-time routing.
StreamState unimodal_forward(Modality which, const TokenBank& bank,
                             const BackboneParams& bb, const Tensor& patches,
                             const RunConfig& cfg);

// Class-token output rows of the final block, [B?, d] each.
Tensor class_token_output(const StreamState& stream, bool foreground);

// Closed-form trainable parameter count for a config (prompt tokens, class
// tokens, LSA units, and prediction heads).
long long trainable_param_formula(const RunConfig& cfg);

// Bank parameters as stable (name, tensor) pairs; aliased tensors included
// once. Order is fixed — optimizer state and checkpoints depend on it.
std::vector<std::pair<std::string, Tensor>> bank_trainables(
    const TokenBank& bank);

}  // namespace mavt
