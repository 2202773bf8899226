#include "mavt/backbone.hpp"

#include <algorithm>
#include <cmath>

#include "mavt/rng.hpp"

namespace mavt {

namespace {

Tensor frozen_randn(Shape shape, Rng& rng, double stddev) {
  return Tensor::randn(std::move(shape), rng, stddev, false);
}

// Flattens non-overlapping patches of a [C,H,W] image laid out channel-major:
// row (gi,gj) holds [c, r, col] for c in 0..C-1, r/col within the patch.
void flatten_patches(std::span<const double> img, int C, int H, int W, int p,
                     double* out) {
  int gh = H / p, gw = W / p;
  std::size_t row_len = static_cast<std::size_t>(C) * p * p;
  for (int gi = 0; gi < gh; ++gi)
    for (int gj = 0; gj < gw; ++gj) {
      double* row = out + (static_cast<std::size_t>(gi) * gw + gj) * row_len;
      std::size_t w = 0;
      for (int c = 0; c < C; ++c)
        for (int r = 0; r < p; ++r)
          for (int col = 0; col < p; ++col)
            row[w++] = img[(static_cast<std::size_t>(c) * H + gi * p + r) * W +
                           gj * p + col];
    }
}

// Shared tail of both patchify paths: [B?, n, pixels] @ proj + bias + pos.
Tensor project_patches(Tensor flat, const BackboneParams& bb,
                       const Tensor& pos) {
  Tensor proj = matmul(flat, bb.patch_proj);
  proj = add(proj, bb.proj_bias);
  return add(proj, pos);
}

}  // namespace

BackboneParams init_backbone(const RunConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  int d = cfg.d;
  int mlp = cfg.mlp_ratio * d;
  BackboneParams bb;
  bb.heads = cfg.heads;
  bb.patch_proj = frozen_randn({cfg.patch_pixels(), d}, rng, 0.02);
  bb.proj_bias = Tensor::zeros({d});
  bb.pos_embed = frozen_randn({cfg.visual_patches(), d}, rng, 0.02);
  double attn_std = 1.0 / std::sqrt(static_cast<double>(d));
  double mlp_std = 1.0 / std::sqrt(static_cast<double>(mlp));
  for (int k = 0; k < cfg.depth; ++k) {
    BlockParams blk;
    blk.ln1_g = Tensor::full({d}, 1.0);
    blk.ln1_b = Tensor::zeros({d});
    blk.wq = frozen_randn({d, d}, rng, attn_std);
    blk.bq = Tensor::zeros({d});
    blk.wk = frozen_randn({d, d}, rng, attn_std);
    blk.bk = Tensor::zeros({d});
    blk.wv = frozen_randn({d, d}, rng, attn_std);
    blk.bv = Tensor::zeros({d});
    blk.wo = frozen_randn({d, d}, rng, attn_std);
    blk.bo = Tensor::zeros({d});
    blk.ln2_g = Tensor::full({d}, 1.0);
    blk.ln2_b = Tensor::zeros({d});
    blk.w1 = frozen_randn({d, mlp}, rng, attn_std);
    blk.b1 = Tensor::zeros({mlp});
    blk.w2 = frozen_randn({mlp, d}, rng, mlp_std);
    blk.b2 = Tensor::zeros({d});
    bb.blocks.push_back(std::move(blk));
  }
  return bb;
}

Tensor interpolate_pos_embed(const Tensor& table, int target_len) {
  if (table.ndim() != 2)
    throw DimensionError("interpolate_pos_embed: table must be [L, d], got " +
                         shape_str(table.shape()));
  int L = table.dim(0), d = table.dim(1);
  if (L < 2)
    throw ConfigError(
        "interpolate_pos_embed: need at least 2 pretrained positions");
  if (target_len < 1)
    throw ConfigError("interpolate_pos_embed: target length must be >= 1");
  if (target_len == L) return table.detach();
  auto src = table.data();
  std::vector<double> out(static_cast<std::size_t>(target_len) * d);
  for (int i = 0; i < target_len; ++i) {
    double pos = target_len == 1
                     ? 0.0
                     : static_cast<double>(i) * (L - 1) / (target_len - 1);
    int lo = static_cast<int>(pos);
    if (lo >= L - 1) lo = L - 2;
    double frac = pos - lo;
    for (int j = 0; j < d; ++j)
      out[static_cast<std::size_t>(i) * d + j] =
          (1.0 - frac) * src[static_cast<std::size_t>(lo) * d + j] +
          frac * src[(static_cast<std::size_t>(lo) + 1) * d + j];
  }
  return Tensor::from({target_len, d}, std::move(out));
}

Tensor patchify_visual(const Tensor& pixels, const BackboneParams& bb,
                       const RunConfig& cfg) {
  int H = cfg.image_h, W = cfg.image_w, p = cfg.patch_size;
  bool batched = pixels.ndim() == 4;
  if (!batched && pixels.ndim() != 3)
    throw DimensionError("patchify_visual: expected [3,H,W] or [B,3,H,W], got " +
                         shape_str(pixels.shape()));
  int off = batched ? 1 : 0;
  if (pixels.dim(off) != 3 || pixels.dim(off + 1) != H ||
      pixels.dim(off + 2) != W)
    throw DimensionError("patchify_visual: image shape " +
                         shape_str(pixels.shape()) + " does not match config " +
                         std::to_string(H) + "x" + std::to_string(W));
  if (H % p != 0 || W % p != 0)
    throw ConfigError("patchify_visual: image size not divisible by patch size");
  int B = batched ? pixels.dim(0) : 1;
  int m = cfg.visual_patches();
  int pix = cfg.patch_pixels();
  std::vector<double> flat(static_cast<std::size_t>(B) * m * pix);
  auto img = pixels.data();
  std::size_t img_stride = static_cast<std::size_t>(3) * H * W;
  for (int b = 0; b < B; ++b)
    flatten_patches(img.subspan(b * img_stride, img_stride), 3, H, W, p,
                    flat.data() + static_cast<std::size_t>(b) * m * pix);
  Shape fs = batched ? Shape{B, m, pix} : Shape{m, pix};
  return project_patches(Tensor::from(std::move(fs), std::move(flat)), bb,
                         bb.pos_embed);
}

Tensor patchify_audio(const Tensor& spec, const BackboneParams& bb,
                      const RunConfig& cfg) {
  int F = cfg.spec_f, T = cfg.spec_t, p = cfg.patch_size;
  bool batched = spec.ndim() == 3;
  if (!batched && spec.ndim() != 2)
    throw DimensionError("patchify_audio: expected [F,T] or [B,F,T], got " +
                         shape_str(spec.shape()));
  int off = batched ? 1 : 0;
  if (spec.dim(off) != F || spec.dim(off + 1) != T)
    throw DimensionError("patchify_audio: spectrogram shape " +
                         shape_str(spec.shape()) + " does not match config " +
                         std::to_string(F) + "x" + std::to_string(T));
  if (F % p != 0 || T % p != 0)
    throw ConfigError(
        "patchify_audio: spectrogram size not divisible by patch size");
  int B = batched ? spec.dim(0) : 1;
  int n = cfg.audio_patches();
  int pix = cfg.patch_pixels();
  auto sd = spec.data();
  std::size_t spec_stride = static_cast<std::size_t>(F) * T;
  // Replicate the single channel to three before flattening.
  std::vector<double> tri(static_cast<std::size_t>(3) * F * T);
  std::vector<double> flat(static_cast<std::size_t>(B) * n * pix);
  for (int b = 0; b < B; ++b) {
    auto one = sd.subspan(b * spec_stride, spec_stride);
    for (int c = 0; c < 3; ++c)
      std::copy(one.begin(), one.end(), tri.begin() + c * spec_stride);
    flatten_patches({tri.data(), tri.size()}, 3, F, T, p,
                    flat.data() + static_cast<std::size_t>(b) * n * pix);
  }
  Tensor pos = interpolate_pos_embed(bb.pos_embed, n);
  Shape fs = batched ? Shape{B, n, pix} : Shape{n, pix};
  return project_patches(Tensor::from(std::move(fs), std::move(flat)), bb, pos);
}

Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v,
                      int heads) {
  bool batched = q.ndim() == 3;
  if (!batched && q.ndim() != 2)
    throw DimensionError("attention_core: expected [S,d] or [B,S,d], got " +
                         shape_str(q.shape()));
  int d = q.dim(-1);
  if (heads < 1 || d % heads != 0)
    throw DimensionError("attention_core: heads must divide width " +
                         std::to_string(d));
  int B = batched ? q.dim(0) : 1;
  int S = q.dim(batched ? 1 : 0);
  int dh = d / heads;
  auto split = [&](const Tensor& t) {
    return transpose(reshape(t, {B, S, heads, dh}), 1, 2);  // [B,h,S,dh]
  };
  Tensor qh = split(q), kh = split(k), vh = split(v);
  Tensor scores = scale(matmul(qh, transpose(kh, 2, 3)),
                        1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor att = softmax(scores, -1);
  Tensor ctx = reshape(transpose(matmul(att, vh), 1, 2), {B, S, d});
  return batched ? ctx : reshape(ctx, {S, d});
}

Tensor block_forward(const BlockParams& blk, int heads, const Tensor& tokens) {
  if (tokens.dim(-1) != blk.wq.dim(0))
    throw DimensionError("block_forward: token width " +
                         std::to_string(tokens.dim(-1)) +
                         " does not match block width " +
                         std::to_string(blk.wq.dim(0)));
  Tensor x = tokens;
  Tensor h = layernorm(x, blk.ln1_g, blk.ln1_b, 1e-8);
  Tensor q = add(matmul(h, blk.wq), blk.bq);
  Tensor k = add(matmul(h, blk.wk), blk.bk);
  Tensor v = add(matmul(h, blk.wv), blk.bv);
  Tensor attn = add(matmul(attention_core(q, k, v, heads), blk.wo), blk.bo);
  x = add(x, attn);
  Tensor h2 = layernorm(x, blk.ln2_g, blk.ln2_b, 1e-8);
  Tensor mlp = add(matmul(gelu(add(matmul(h2, blk.w1), blk.b1)), blk.w2),
                   blk.b2);
  return add(x, mlp);
}

void add_backbone(Record& rec, const std::string& prefix,
                  const BackboneParams& bb) {
  rec.add(prefix + "patch_proj", bb.patch_proj);
  rec.add(prefix + "proj_bias", bb.proj_bias);
  rec.add(prefix + "pos_embed", bb.pos_embed);
  for (std::size_t k = 0; k < bb.blocks.size(); ++k) {
    const BlockParams& blk = bb.blocks[k];
    std::string bp = prefix + "block" + std::to_string(k) + "/";
    rec.add(bp + "ln1_g", blk.ln1_g);
    rec.add(bp + "ln1_b", blk.ln1_b);
    rec.add(bp + "wq", blk.wq);
    rec.add(bp + "bq", blk.bq);
    rec.add(bp + "wk", blk.wk);
    rec.add(bp + "bk", blk.bk);
    rec.add(bp + "wv", blk.wv);
    rec.add(bp + "bv", blk.bv);
    rec.add(bp + "wo", blk.wo);
    rec.add(bp + "bo", blk.bo);
    rec.add(bp + "ln2_g", blk.ln2_g);
    rec.add(bp + "ln2_b", blk.ln2_b);
    rec.add(bp + "w1", blk.w1);
    rec.add(bp + "b1", blk.b1);
    rec.add(bp + "w2", blk.w2);
    rec.add(bp + "b2", blk.b2);
  }
}

BackboneParams read_backbone(const Record& rec, const std::string& prefix,
                             int depth, int heads) {
  BackboneParams bb;
  bb.heads = heads;
  bb.patch_proj = rec.require(prefix + "patch_proj");
  bb.proj_bias = rec.require(prefix + "proj_bias");
  bb.pos_embed = rec.require(prefix + "pos_embed");
  for (int k = 0; k < depth; ++k) {
    std::string bp = prefix + "block" + std::to_string(k) + "/";
    BlockParams blk;
    blk.ln1_g = rec.require(bp + "ln1_g");
    blk.ln1_b = rec.require(bp + "ln1_b");
    blk.wq = rec.require(bp + "wq");
    blk.bq = rec.require(bp + "bq");
    blk.wk = rec.require(bp + "wk");
    blk.bk = rec.require(bp + "bk");
    blk.wv = rec.require(bp + "wv");
    blk.bv = rec.require(bp + "bv");
    blk.wo = rec.require(bp + "wo");
    blk.bo = rec.require(bp + "bo");
    blk.ln2_g = rec.require(bp + "ln2_g");
    blk.ln2_b = rec.require(bp + "ln2_b");
    blk.w1 = rec.require(bp + "w1");
    blk.b1 = rec.require(bp + "b1");
    blk.w2 = rec.require(bp + "w2");
    blk.b2 = rec.require(bp + "b2");
    bb.blocks.push_back(std::move(blk));
  }
  return bb;
}

}  // namespace mavt
