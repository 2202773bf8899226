#pragma once

#include <cstdint>
#include <vector>

#include "mavt/config.hpp"
#include "mavt/serialize.hpp"
#include "mavt/tensor.hpp"

namespace mavt {

// One pre-norm transformer block. All tensors frozen (requires_grad false).
struct BlockParams {
  Tensor ln1_g, ln1_b;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // attention projections [d,d] / [d]
  Tensor ln2_g, ln2_b;
  Tensor w1, b1;  // [d, mlp] / [mlp]
  Tensor w2, b2;  // [mlp, d] / [d]
};

// Frozen dual-stream encoder: one patch projection shared by both modalities,
// a positional table at the visual grid length, and K shared blocks.
struct BackboneParams {
  Tensor patch_proj;  // [3*p*p, d]
  Tensor proj_bias;   // [d]
  Tensor pos_embed;   // [L_pre, d], L_pre = visual patch count
  std::vector<BlockParams> blocks;
  int heads = 0;
};

BackboneParams init_backbone(const RunConfig& cfg, std::uint64_t seed);

// [3,H,W] or [B,3,H,W] -> [m,d] or [B,m,d]: flatten patches, project, add
// position embeddings.
Tensor patchify_visual(const Tensor& pixels, const BackboneParams& bb,
                       const RunConfig& cfg);
// [F,T] or [B,F,T]: channel replicated 1 -> 3, then as visual; position
// embeddings length-interpolated to the audio grid.
Tensor patchify_audio(const Tensor& spec, const BackboneParams& bb,
                      const RunConfig& cfg);

// Per-dimension piecewise-linear resampling of the positional table on the
// normalized index grid; endpoints preserved; identity when lengths match.
Tensor interpolate_pos_embed(const Tensor& table, int target_len);

// Scaled-dot-product multi-head attention over already-projected Q/K/V
// ([S,d] or [B,S,d]); shared by backbone blocks and LSA units.
Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v,
                      int heads);

// Pre-norm block: x + MHA(LN1 x), then + MLP(LN2 x). Rank 2 or 3 input.
Tensor block_forward(const BlockParams& blk, int heads, const Tensor& tokens);

// Checkpoint plumbing: tensors land under `prefix` with stable names.
void add_backbone(Record& rec, const std::string& prefix,
                  const BackboneParams& bb);
BackboneParams read_backbone(const Record& rec, const std::string& prefix,
                             int depth, int heads);

}  // namespace mavt
