#include "mavt/losses.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "mavt/rng.hpp"

namespace mavt {

namespace {

Tensor as_batch(const Tensor& x) {
  return x.ndim() == 1 ? reshape(x, {1, x.dim(0)}) : x;
}

void check_labels(const std::vector<int>& y_b, int B, const char* where) {
  if (static_cast<int>(y_b.size()) != B)
    throw DimensionError(std::string(where) + ": " + std::to_string(y_b.size()) +
                         " labels for batch of " + std::to_string(B));
  for (int y : y_b)
    if (y != 0 && y != 1)
      throw ContractError(std::string(where) +
                          ": background label must be 0 or 1");
}

}  // namespace

HeadParams init_heads(const RunConfig& cfg, std::uint64_t seed) {
  HeadParams h;
  if (!cfg.class_tokens) return h;  // no class tokens, nothing to predict from
  int d2 = 2 * cfg.d;
  Rng rng(seed);
  double std1 = 1.0 / std::sqrt(static_cast<double>(d2));
  h.bg_w1 = Tensor::randn({d2, d2}, rng, std1, true);
  h.bg_b1 = Tensor::zeros({d2}, true);
  h.bg_w2 = Tensor::zeros({d2, 1}, true);
  h.bg_b2 = Tensor::zeros({1}, true);
  h.fg_w1 = Tensor::randn({d2, d2}, rng, std1, true);
  h.fg_b1 = Tensor::zeros({d2}, true);
  h.fg_w2 = Tensor::zeros({d2, cfg.classes}, true);
  h.fg_b2 = Tensor::zeros({cfg.classes}, true);
  return h;
}

namespace {

Tensor head_mlp(const Tensor& x, const Tensor& w1, const Tensor& b1,
                const Tensor& w2, const Tensor& b2) {
  return add(matmul(gelu(add(matmul(x, w1), b1)), w2), b2);
}

}  // namespace

Predictions heads_forward(const HeadParams& heads, const StreamState& stream_a,
                          const StreamState& stream_v) {
  Tensor bg_v = as_batch(class_token_output(stream_v, false));
  Tensor bg_a = as_batch(class_token_output(stream_a, false));
  Tensor fg_v = as_batch(class_token_output(stream_v, true));
  Tensor fg_a = as_batch(class_token_output(stream_a, true));
  Tensor xb = concat({bg_v, bg_a}, 1);  // visual half first
  Tensor xf = concat({fg_v, fg_a}, 1);
  int B = xb.dim(0);
  Predictions p;
  p.bg_logit = reshape(
      head_mlp(xb, heads.bg_w1, heads.bg_b1, heads.bg_w2, heads.bg_b2), {B});
  p.bg_prob = sigmoid(p.bg_logit);
  p.fg_logits =
      head_mlp(xf, heads.fg_w1, heads.fg_b1, heads.fg_w2, heads.fg_b2);
  return p;
}

Predictions unimodal_heads_forward(const HeadParams& heads,
                                   const StreamState& stream) {
  Tensor bg = as_batch(class_token_output(stream, false));
  Tensor fg = as_batch(class_token_output(stream, true));
  int d = bg.dim(1);
  int off = stream.modality == Modality::visual ? 0 : d;
  int B = bg.dim(0);
  Predictions p;
  p.bg_logit = reshape(head_mlp(bg, slice(heads.bg_w1, 0, off, d), heads.bg_b1,
                                heads.bg_w2, heads.bg_b2),
                       {B});
  p.bg_prob = sigmoid(p.bg_logit);
  p.fg_logits = head_mlp(fg, slice(heads.fg_w1, 0, off, d), heads.fg_b1,
                         heads.fg_w2, heads.fg_b2);
  return p;
}

Tensor scl_block_loss(const Tensor& v, const Tensor& a, double tau,
                      const std::vector<int>& mask) {
  if (tau <= 0.0)
    throw ConfigError("scl_block_loss: tau must be positive, got " +
                      std::to_string(tau));
  if (v.ndim() != 2 || a.ndim() != 2 || v.shape() != a.shape())
    throw DimensionError("scl_block_loss: need matching [B,d] inputs, got " +
                         shape_str(v.shape()) + " and " +
                         shape_str(a.shape()));
  check_labels(mask, v.dim(0), "scl_block_loss");
  std::vector<int> idx;
  for (int i = 0; i < v.dim(0); ++i)
    if (mask[static_cast<std::size_t>(i)] == 1) idx.push_back(i);
  if (idx.empty()) return Tensor::scalar(0.0);
  int M = static_cast<int>(idx.size());
  Tensor vn = l2_normalize_rows(select_rows(v, idx), 1e-8);
  Tensor an = l2_normalize_rows(select_rows(a, idx), 1e-8);
  Tensor s = scale(matmul(vn, transpose(an, 0, 1)), 1.0 / tau);
  Tensor nll = add(diag_nll(s), diag_nll(transpose(s, 0, 1)));
  return scale(sum(nll), 0.5 / M);
}

Tensor fg_bg_loss(const Predictions& pred, const std::vector<int>& y_b,
                  const std::vector<int>& y_f, const std::string& mode) {
  bool literal;
  if (mode == "literal")
    literal = true;
  else if (mode == "always_bg")
    literal = false;
  else
    throw ConfigError("fg_bg_loss: unknown eq9 mode '" + mode + "'");
  int B = pred.fg_logits.dim(0);
  check_labels(y_b, B, "fg_bg_loss");
  if (static_cast<int>(y_f.size()) != B)
    throw DimensionError("fg_bg_loss: foreground labels must match the batch");
  std::vector<double> targets(B), w_bce(B), w_ce(B);
  std::vector<int> yf(B);
  for (int i = 0; i < B; ++i) {
    int bg = y_b[static_cast<std::size_t>(i)];
    targets[static_cast<std::size_t>(i)] = bg;
    w_bce[static_cast<std::size_t>(i)] = literal ? bg : 1.0;
    w_ce[static_cast<std::size_t>(i)] = 1.0 - bg;
    // Background rows carry a dummy class index under zero CE weight.
    yf[static_cast<std::size_t>(i)] = bg ? 0 : y_f[static_cast<std::size_t>(i)];
  }
  return add(bce_logits_mean(pred.bg_logit, targets, w_bce),
             cross_entropy_mean(pred.fg_logits, yf, w_ce));
}

LossBundle total_loss(const Predictions& pred, const StreamState& stream_a,
                      const StreamState& stream_v,
                      const std::vector<int>& y_b,
                      const std::vector<int>& y_f, const RunConfig& cfg,
                      const std::vector<double>& block_weights) {
  if (!block_weights.empty() &&
      static_cast<int>(block_weights.size()) != cfg.depth)
    throw ConfigError("total_loss: block weight vector must have one entry "
                      "per block");
  LossBundle out;
  out.l_bf = fg_bg_loss(pred, y_b, y_f, cfg.eq9_mode);
  Tensor total = out.l_bf;
  if (cfg.contrastive_weight != 0.0) {
    std::vector<int> mask(y_b.size());
    for (std::size_t i = 0; i < y_b.size(); ++i) mask[i] = y_b[i] == 0 ? 1 : 0;
    int first = cfg.blockwise ? 1 : cfg.depth;
    for (int k = first; k <= cfg.depth; ++k) {
      double w = cfg.contrastive_weight *
                 (block_weights.empty()
                      ? 1.0
                      : block_weights[static_cast<std::size_t>(k - 1)]);
      Tensor term = scl_block_loss(pool_shared(stream_v, k),
                                   pool_shared(stream_a, k), cfg.tau, mask);
      out.l_cnt.push_back(term);
      out.cnt_values.push_back(term.item());
      total = add(total, scale(term, w));
    }
  }
  out.l_total = total;
  out.bf_value = out.l_bf.item();
  out.total_value = out.l_total.item();
  if (!std::isfinite(out.bf_value))
    throw NumericalError("total_loss: L_bf is not finite");
  for (std::size_t i = 0; i < out.cnt_values.size(); ++i)
    if (!std::isfinite(out.cnt_values[i]))
      throw NumericalError("total_loss: L_cnt block " + std::to_string(i + 1) +
                           " is not finite");
  if (!std::isfinite(out.total_value))
    throw NumericalError("total_loss: L_total is not finite");
  return out;
}

Tensor saliency_map(const StreamState& stream_v, const Predictions& pred,
                    int class_idx, const RunConfig& cfg) {
  if (class_idx < 0 || class_idx >= pred.fg_logits.dim(1))
    throw ContractError("saliency_map: class index " +
                        std::to_string(class_idx) + " out of range");
  if (pred.fg_logits.dim(0) != 1)
    throw ContractError("saliency_map: needs a single-sample prediction");
  int gh = cfg.image_h / cfg.patch_size;
  int gw = cfg.image_w / cfg.patch_size;
  const StreamLayout& lay = stream_v.layout;
  if (lay.patch_len != gh * gw)
    throw ContractError("saliency_map: stream patch count does not match the "
                        "configured grid");
  // The logit reads only the class-token rows of E^K, so the informative
  // patch gradients live on the embeddings *entering* block K, mixed into the
  // class token by that block's attention.
  Tensor ek = stream_v.blocks.size() >= 2
                  ? stream_v.blocks[stream_v.blocks.size() - 2]
                  : stream_v.input;
  ek.retain_grad();
  backward(slice(pred.fg_logits, 1, class_idx, 1));
  auto g = ek.grad();
  if (g.empty())
    throw ContractError("saliency_map: stream carries no gradient graph");
  int d = ek.dim(-1);
  std::size_t base = 0;  // batch axis, if any, has extent 1
  std::vector<double> score(static_cast<std::size_t>(lay.patch_len));
  for (int p = 0; p < lay.patch_len; ++p) {
    double acc = 0.0;
    std::size_t row = base + static_cast<std::size_t>(lay.patch_off + p) * d;
    for (int j = 0; j < d; ++j) acc += g[row + j];
    acc /= d;
    score[static_cast<std::size_t>(p)] = acc > 0.0 ? acc : 0.0;
  }
  double lo = score[0], hi = score[0];
  for (double s : score) {
    lo = std::min(lo, s);
    hi = std::max(hi, s);
  }
  std::vector<double> out(score.size(), 0.0);
  if (hi > lo)
    for (std::size_t i = 0; i < score.size(); ++i)
      out[i] = (score[i] - lo) / (hi - lo);
  return Tensor::from({gh, gw}, std::move(out));
}

void write_pgm(const std::string& path, const Tensor& map) {
  if (map.ndim() != 2)
    throw DimensionError("write_pgm: map must be rank 2, got " +
                         shape_str(map.shape()));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("write_pgm: cannot open " + path);
  os << "P5\n" << map.dim(1) << " " << map.dim(0) << "\n255\n";
  auto d = map.data();
  for (double v : d) {
    double c = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    unsigned char byte = static_cast<unsigned char>(std::lround(c * 255.0));
    os.put(static_cast<char>(byte));
  }
  if (!os) throw FormatError("write_pgm: write failed for " + path);
}

void add_heads(Record& rec, const std::string& prefix, const HeadParams& h) {
  rec.add(prefix + "bg_w1", h.bg_w1);
  rec.add(prefix + "bg_b1", h.bg_b1);
  rec.add(prefix + "bg_w2", h.bg_w2);
  rec.add(prefix + "bg_b2", h.bg_b2);
  rec.add(prefix + "fg_w1", h.fg_w1);
  rec.add(prefix + "fg_b1", h.fg_b1);
  rec.add(prefix + "fg_w2", h.fg_w2);
  rec.add(prefix + "fg_b2", h.fg_b2);
}

HeadParams read_heads(const Record& rec, const std::string& prefix) {
  HeadParams h;
  h.bg_w1 = rec.require(prefix + "bg_w1");
  h.bg_b1 = rec.require(prefix + "bg_b1");
  h.bg_w2 = rec.require(prefix + "bg_w2");
  h.bg_b2 = rec.require(prefix + "bg_b2");
  h.fg_w1 = rec.require(prefix + "fg_w1");
  h.fg_b1 = rec.require(prefix + "fg_b1");
  h.fg_w2 = rec.require(prefix + "fg_w2");
  h.fg_b2 = rec.require(prefix + "fg_b2");
  for (Tensor* t : {&h.bg_w1, &h.bg_b1, &h.bg_w2, &h.bg_b2, &h.fg_w1,
                    &h.fg_b1, &h.fg_w2, &h.fg_b2})
    t->set_requires_grad(true);
  return h;
}

std::vector<std::pair<std::string, Tensor>> head_trainables(
    const HeadParams& h) {
  if (!h.bg_w1.defined()) return {};
  return {{"bg_w1", h.bg_w1}, {"bg_b1", h.bg_b1}, {"bg_w2", h.bg_w2},
          {"bg_b2", h.bg_b2}, {"fg_w1", h.fg_w1}, {"fg_b1", h.fg_b1},
          {"fg_w2", h.fg_w2}, {"fg_b2", h.fg_b2}};
}

}  // namespace mavt
