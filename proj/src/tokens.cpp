#include "mavt/tokens.hpp"

#include <cmath>

#include "mavt/rng.hpp"

namespace mavt {

namespace {

LsaParams init_lsa(Rng& rng, int d) {
  LsaParams p;
  double std = 1.0 / std::sqrt(static_cast<double>(d));
  p.wq = Tensor::randn({d, d}, rng, std, true);
  p.wk = Tensor::randn({d, d}, rng, std, true);
  p.wv = Tensor::randn({d, d}, rng, std, true);
  // Zero output projection: LSA starts as the identity, so enabling it can
  // only add capacity on top of the plain-prompt model.
  p.wo = Tensor::zeros({d, d}, true);
  return p;
}

std::vector<Tensor> init_bag(Rng& rng, int n, int d, int copies) {
  std::vector<Tensor> bag;
  if (n == 0) return bag;
  for (int c = 0; c < copies; ++c)
    bag.push_back(Tensor::randn({n, d}, rng, 0.02, true));
  return bag;
}

// The bag tensor feeding block k (block index 0-based).
const Tensor& bag_at(const std::vector<Tensor>& bag, int k) {
  return bag.size() == 1 ? bag[0] : bag.at(static_cast<std::size_t>(k));
}

struct StreamParts {
  const std::vector<Tensor>* mod_bag;
  const LsaParams* mod_lsa;
  Tensor z_b, z_f;
};

StreamParts parts_for(Modality which, const TokenBank& bank) {
  StreamParts p;
  if (which == Modality::audio) {
    p.mod_bag = &bank.z_a;
    p.mod_lsa = &bank.lsa_a;
    p.z_b = bank.z_b_a;
    p.z_f = bank.z_f_a;
  } else {
    p.mod_bag = &bank.z_v;
    p.mod_lsa = &bank.lsa_v;
    p.z_b = bank.z_b_v;
    p.z_f = bank.z_f_v;
  }
  return p;
}

Tensor maybe_lsa(const LsaParams& p, int heads, const Tensor& bag, bool on) {
  return on && p.defined() ? lsa_forward(p, heads, bag) : bag;
}

Tensor fit_batch(const Tensor& rows, const Tensor& patches) {
  // Prompt rows are [n,d]; lift to [B,n,d] when the patches are batched.
  return patches.ndim() == 3 ? broadcast_batch(rows, patches.dim(0)) : rows;
}

Tensor assemble(Modality which, const TokenBank& bank, const Tensor& patches,
                const RunConfig& cfg, int block_idx, bool with_shared) {
  StreamParts sp = parts_for(which, bank);
  std::vector<Tensor> parts;
  if (cfg.class_tokens) parts.push_back(fit_batch(sp.z_b, patches));
  if (!sp.mod_bag->empty())
    parts.push_back(fit_batch(
        maybe_lsa(*sp.mod_lsa, cfg.heads, bag_at(*sp.mod_bag, block_idx),
                  cfg.lsa),
        patches));
  parts.push_back(patches);
  if (with_shared && !bank.z_s.empty())
    parts.push_back(fit_batch(
        maybe_lsa(bank.lsa_s, cfg.heads, bag_at(bank.z_s, block_idx), cfg.lsa),
        patches));
  if (cfg.class_tokens) parts.push_back(fit_batch(sp.z_f, patches));
  int axis = patches.ndim() == 3 ? 1 : 0;
  return parts.size() == 1 ? parts[0] : concat(parts, axis);
}

// Deep-prompt splice: keep class-token and patch rows from the running
// stream, substitute this block's fresh prompt bags.
Tensor splice_prompts(Modality which, const TokenBank& bank, const Tensor& e,
                      const StreamLayout& lay, const RunConfig& cfg,
                      int block_idx, bool with_shared) {
  StreamParts sp = parts_for(which, bank);
  int axis = e.ndim() == 3 ? 1 : 0;
  std::vector<Tensor> parts;
  if (lay.bg >= 0) parts.push_back(slice(e, axis, lay.bg, 1));
  if (lay.mod_len > 0)
    parts.push_back(fit_batch(
        maybe_lsa(*sp.mod_lsa, cfg.heads, bag_at(*sp.mod_bag, block_idx),
                  cfg.lsa),
        e));
  parts.push_back(slice(e, axis, lay.patch_off, lay.patch_len));
  if (with_shared && lay.shared_len > 0)
    parts.push_back(fit_batch(
        maybe_lsa(bank.lsa_s, cfg.heads, bag_at(bank.z_s, block_idx), cfg.lsa),
        e));
  if (lay.fg >= 0) parts.push_back(slice(e, axis, lay.fg, 1));
  return parts.size() == 1 ? parts[0] : concat(parts, axis);
}

StreamState run_stream(Modality which, const TokenBank& bank,
                       const BackboneParams& bb, const Tensor& patches,
                       const RunConfig& cfg, bool with_shared) {
  StreamState st;
  st.modality = which;
  int n_mod = which == Modality::audio
                  ? (bank.z_a.empty() ? 0 : bank.z_a[0].dim(0))
                  : (bank.z_v.empty() ? 0 : bank.z_v[0].dim(0));
  int n_patches = patches.dim(patches.ndim() == 3 ? 1 : 0);
  st.layout = stream_layout(cfg, n_mod, n_patches, with_shared);
  st.input = assemble(which, bank, patches, cfg, 0, with_shared);
  Tensor e = st.input;
  for (int k = 0; k < cfg.depth; ++k) {
    if (cfg.deep_prompts && k > 0)
      e = splice_prompts(which, bank, e, st.layout, cfg, k, with_shared);
    e = block_forward(bb.blocks[static_cast<std::size_t>(k)], bb.heads, e);
    st.blocks.push_back(e);
  }
  return st;
}

}  // namespace

TokenBank init_tokens(const RunConfig& cfg, std::uint64_t seed) {
  // Every group draws from its own derived stream.  Toggling one group in an
  // ablation (say dropping the shared bag) must not reshuffle the init of the
  // groups that stay, or config comparisons at a fixed seed stop being paired.
  int d = cfg.d;
  int copies = cfg.deep_prompts ? cfg.depth : 1;
  TokenBank bank;
  {
    Rng r(Rng::mix(seed, 0x11));
    bank.z_a = init_bag(r, cfg.n_a, d, copies);
  }
  {
    Rng r(Rng::mix(seed, 0x12));
    bank.z_v = init_bag(r, cfg.n_v, d, copies);
  }
  {
    Rng r(Rng::mix(seed, 0x13));
    bank.z_s = init_bag(r, cfg.n_s, d, copies);
  }
  if (cfg.class_tokens) {
    Rng r(Rng::mix(seed, 0x14));
    bank.z_b_v = Tensor::randn({1, d}, r, 0.02, true);
    bank.z_f_v = Tensor::randn({1, d}, r, 0.02, true);
    if (cfg.share_class_tokens) {
      bank.z_b_a = bank.z_b_v;  // alias: one parameter, two streams
      bank.z_f_a = bank.z_f_v;
    } else {
      bank.z_b_a = Tensor::randn({1, d}, r, 0.02, true);
      bank.z_f_a = Tensor::randn({1, d}, r, 0.02, true);
    }
  }
  if (cfg.lsa) {
    if (cfg.n_a > 0) {
      Rng r(Rng::mix(seed, 0x15));
      bank.lsa_a = init_lsa(r, d);
    }
    if (cfg.n_v > 0) {
      Rng r(Rng::mix(seed, 0x16));
      bank.lsa_v = init_lsa(r, d);
    }
    if (cfg.n_s > 0) {
      Rng r(Rng::mix(seed, 0x17));
      bank.lsa_s = init_lsa(r, d);
    }
  }
  return bank;
}

Tensor lsa_forward(const LsaParams& p, int heads, const Tensor& x) {
  if (!p.defined()) throw ContractError("lsa_forward: unit has no parameters");
  if (x.dim(-1) != p.wq.dim(0))
    throw DimensionError("lsa_forward: token width " +
                         std::to_string(x.dim(-1)) + " does not match unit " +
                         std::to_string(p.wq.dim(0)));
  Tensor q = matmul(x, p.wq);
  Tensor k = matmul(x, p.wk);
  Tensor v = matmul(x, p.wv);
  return add(x, matmul(attention_core(q, k, v, heads), p.wo));
}

StreamLayout stream_layout(const RunConfig& cfg, int n_mod, int n_patches,
                           bool with_shared) {
  StreamLayout lay;
  int off = 0;
  if (cfg.class_tokens) lay.bg = off++;
  lay.mod_off = off;
  lay.mod_len = n_mod;
  off += n_mod;
  lay.patch_off = off;
  lay.patch_len = n_patches;
  off += n_patches;
  lay.shared_off = off;
  lay.shared_len = with_shared ? cfg.n_s : 0;
  off += lay.shared_len;
  if (cfg.class_tokens) lay.fg = off++;
  lay.total = off;
  return lay;
}

Tensor assemble_stream(Modality which, const TokenBank& bank,
                       const Tensor& patches, const RunConfig& cfg) {
  return assemble(which, bank, patches, cfg, 0, true);
}

std::pair<StreamState, StreamState> encode_pair(const TokenBank& bank,
                                                const BackboneParams& bb_a,
                                                const BackboneParams& bb_v,
                                                const Tensor& patches_a,
                                                const Tensor& patches_v,
                                                const RunConfig& cfg) {
  StreamState a = run_stream(Modality::audio, bank, bb_a, patches_a, cfg, true);
  StreamState v =
      run_stream(Modality::visual, bank, bb_v, patches_v, cfg, true);
  return {std::move(a), std::move(v)};
}

Tensor pool_shared(const StreamState& stream, int k) {
  if (k < 1 || k > static_cast<int>(stream.blocks.size()))
    throw ContractError("pool_shared: block index " + std::to_string(k) +
                        " out of range 1.." +
                        std::to_string(stream.blocks.size()));
  if (stream.layout.shared_len == 0)
    throw ContractError("pool_shared: stream has no shared tokens");
  const Tensor& e = stream.blocks[static_cast<std::size_t>(k - 1)];
  int axis = e.ndim() == 3 ? 1 : 0;
  return mean(slice(e, axis, stream.layout.shared_off,
                    stream.layout.shared_len),
              axis);
}

StreamState unimodal_forward(Modality which, const TokenBank& bank,
                             const BackboneParams& bb, const Tensor& patches,
                             const RunConfig& cfg) {
  return run_stream(which, bank, bb, patches, cfg, false);
}

Tensor class_token_output(const StreamState& stream, bool foreground) {
  int off = foreground ? stream.layout.fg : stream.layout.bg;
  if (off < 0)
    throw ContractError("class_token_output: stream has no class tokens");
  const Tensor& e = stream.blocks.back();
  int axis = e.ndim() == 3 ? 1 : 0;
  Tensor row = slice(e, axis, off, 1);  // [B?,1,d]
  Shape s = e.ndim() == 3 ? Shape{e.dim(0), e.dim(2)} : Shape{e.dim(1)};
  return reshape(row, std::move(s));
}

long long trainable_param_formula(const RunConfig& cfg) {
  long long d = cfg.d;
  long long copies = cfg.deep_prompts ? cfg.depth : 1;
  long long prompts = d * (cfg.n_a + cfg.n_v + cfg.n_s) * copies;
  long long cls = 0, heads = 0;
  if (cfg.class_tokens) {
    cls = (cfg.share_class_tokens ? 2 : 4) * d;
    long long d2 = 2 * d, hidden = d2 * d2 + d2;
    heads = (hidden + d2 + 1) + (hidden + d2 * cfg.classes + cfg.classes);
  }
  long long lsa = 0;
  if (cfg.lsa) {
    int bags = (cfg.n_a > 0) + (cfg.n_v > 0) + (cfg.n_s > 0);
    lsa = 4LL * d * d * bags;
  }
  return prompts + cls + lsa + heads;
}

std::vector<std::pair<std::string, Tensor>> bank_trainables(
    const TokenBank& bank) {
  std::vector<std::pair<std::string, Tensor>> out;
  auto add_bag = [&](const char* name, const std::vector<Tensor>& bag) {
    for (std::size_t i = 0; i < bag.size(); ++i)
      out.emplace_back(std::string(name) + "." + std::to_string(i), bag[i]);
  };
  add_bag("z_a", bank.z_a);
  add_bag("z_v", bank.z_v);
  add_bag("z_s", bank.z_s);
  if (bank.z_b_v.defined()) {
    bool shared = bank.z_b_a.node() == bank.z_b_v.node();
    out.emplace_back(shared ? "z_b" : "z_b_v", bank.z_b_v);
    out.emplace_back(shared ? "z_f" : "z_f_v", bank.z_f_v);
    if (!shared) {
      out.emplace_back("z_b_a", bank.z_b_a);
      out.emplace_back("z_f_a", bank.z_f_a);
    }
  }
  auto add_lsa = [&](const char* name, const LsaParams& p) {
    if (!p.defined()) return;
    out.emplace_back(std::string(name) + "/wq", p.wq);
    out.emplace_back(std::string(name) + "/wk", p.wk);
    out.emplace_back(std::string(name) + "/wv", p.wv);
    out.emplace_back(std::string(name) + "/wo", p.wo);
  };
  add_lsa("lsa_a", bank.lsa_a);
  add_lsa("lsa_v", bank.lsa_v);
  add_lsa("lsa_s", bank.lsa_s);
  return out;
}

}  // namespace mavt
