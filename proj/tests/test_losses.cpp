#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "mavt/backbone.hpp"
#include "mavt/losses.hpp"
#include "mavt/rng.hpp"

using namespace mavt;

namespace {

RunConfig tiny_config() {
  RunConfig cfg;
  cfg.d = 8;
  cfg.depth = 2;
  cfg.heads = 2;
  cfg.patch_size = 4;
  cfg.image_h = 8;
  cfg.image_w = 8;
  cfg.spec_f = 4;
  cfg.spec_t = 8;
  cfg.n_a = 2;
  cfg.n_v = 2;
  cfg.n_s = 2;
  cfg.classes = 4;
  return cfg;
}

// Log-sum-exp InfoNCE written as plain scalar loops, mirroring the clamped
// row normalization.
double scl_oracle(const std::vector<double>& v, const std::vector<double>& a,
                  int B, int d, double tau) {
  auto norm_rows = [&](const std::vector<double>& x) {
    std::vector<double> out(x.size());
    for (int r = 0; r < B; ++r) {
      double s = 0.0;
      for (int j = 0; j < d; ++j) s += x[r * d + j] * x[r * d + j];
      double n = std::max(std::sqrt(s), 1e-8);
      for (int j = 0; j < d; ++j) out[r * d + j] = x[r * d + j] / n;
    }
    return out;
  };
  std::vector<double> vn = norm_rows(v), an = norm_rows(a);
  std::vector<double> sim(static_cast<std::size_t>(B) * B);
  for (int i = 0; i < B; ++i)
    for (int j = 0; j < B; ++j) {
      double dot = 0.0;
      for (int k = 0; k < d; ++k) dot += vn[i * d + k] * an[j * d + k];
      sim[static_cast<std::size_t>(i) * B + j] = dot / tau;
    }
  auto lse = [&](auto at) {
    double m = at(0);
    for (int j = 1; j < B; ++j) m = std::max(m, at(j));
    double z = 0.0;
    for (int j = 0; j < B; ++j) z += std::exp(at(j) - m);
    return m + std::log(z);
  };
  double total = 0.0;
  for (int i = 0; i < B; ++i) {
    double diag = sim[static_cast<std::size_t>(i) * B + i];
    total += lse([&](int j) { return sim[static_cast<std::size_t>(i) * B + j]; }) - diag;
    total += lse([&](int j) { return sim[static_cast<std::size_t>(j) * B + i]; }) - diag;
  }
  return 0.5 * total / B;
}

// Minimal hand-built stream: three rows [bg, patch, fg] so head tests can use
// a direct affine oracle without running the encoder.
StreamState fake_stream(Modality which, const Tensor& rows) {
  StreamState st;
  st.modality = which;
  st.layout.bg = 0;
  st.layout.mod_off = 1;
  st.layout.mod_len = 0;
  st.layout.patch_off = 1;
  st.layout.patch_len = rows.dim(rows.ndim() - 2) - 2;
  st.layout.shared_off = st.layout.patch_off + st.layout.patch_len;
  st.layout.shared_len = 0;
  st.layout.fg = st.layout.patch_off + st.layout.patch_len;
  st.layout.total = rows.dim(rows.ndim() - 2);
  st.input = rows;
  st.blocks.push_back(rows);
  return st;
}

struct EncodedBatch {
  TokenBank bank;
  BackboneParams bb;
  HeadParams heads;
  StreamState sa, sv;
  Predictions pred;
};

EncodedBatch encode_batch(const RunConfig& cfg, int B, std::uint64_t seed,
                          bool random_heads = false) {
  EncodedBatch eb;
  eb.bank = init_tokens(cfg, seed);
  eb.bb = init_backbone(cfg, seed + 1);
  eb.heads = init_heads(cfg, seed + 2);
  if (random_heads) {
    Rng hr(seed + 2);
    for (auto& [name, t] : head_trainables(eb.heads)) {
      auto d = t.mutable_data();
      for (auto& x : d) x = hr.normal() * 0.3;
    }
  }
  Rng rng(seed + 3);
  Tensor pa = Tensor::randn({B, cfg.audio_patches(), cfg.d}, rng, 1.0);
  Tensor pv = Tensor::randn({B, cfg.visual_patches(), cfg.d}, rng, 1.0);
  auto [sa, sv] = encode_pair(eb.bank, eb.bb, eb.bb, pa, pv, cfg);
  eb.sa = std::move(sa);
  eb.sv = std::move(sv);
  eb.pred = heads_forward(eb.heads, eb.sa, eb.sv);
  return eb;
}

}  // namespace

TEST_CASE("fresh heads predict half background and uniform foreground") {
  // Zero second layers guarantee this despite the random first layers.
  RunConfig cfg = tiny_config();
  EncodedBatch eb = encode_batch(cfg, 3, 5);
  for (std::size_t i = 0; i < eb.pred.bg_prob.numel(); ++i)
    CHECK(eb.pred.bg_prob.at(i) == 0.5);
  for (std::size_t i = 0; i < eb.pred.fg_logits.numel(); ++i)
    CHECK(eb.pred.fg_logits.at(i) == 0.0);
}

TEST_CASE("heads match a direct two-layer oracle") {
  int d = 3, C = 2, d2 = 2 * d;
  RunConfig cfg = tiny_config();
  cfg.d = d;
  cfg.classes = C;
  Rng rng(17);
  Tensor rows_v = Tensor::randn({4, d}, rng, 1.0);
  Tensor rows_a = Tensor::randn({4, d}, rng, 1.0);
  StreamState sv = fake_stream(Modality::visual, rows_v);
  StreamState sa = fake_stream(Modality::audio, rows_a);
  HeadParams h = init_heads(cfg, 17);
  for (auto& [name, t] : head_trainables(h)) {
    auto buf = t.mutable_data();
    for (auto& x : buf) x = rng.normal();
  }
  Predictions p = heads_forward(h, sa, sv);

  auto gelu_s = [](double v) {
    return 0.5 * v * (1.0 + std::erf(v * 0.7071067811865475));
  };
  // Concatenated input is [visual row ‖ audio row] for each class token;
  // hidden layer walked scalar by scalar against the exact-erf GELU.
  auto mlp = [&](const Tensor& w1, const Tensor& b1, const Tensor& w2,
                 const Tensor& b2, int row, int col, int width) {
    double out = b2.at(static_cast<std::size_t>(col));
    for (int k = 0; k < d2; ++k) {
      double pre = b1.at(static_cast<std::size_t>(k));
      for (int j = 0; j < d; ++j) {
        pre += rows_v.at(static_cast<std::size_t>(row) * d + j) *
               w1.at(static_cast<std::size_t>(j) * d2 + k);
        pre += rows_a.at(static_cast<std::size_t>(row) * d + j) *
               w1.at(static_cast<std::size_t>(d + j) * d2 + k);
      }
      out += gelu_s(pre) * w2.at(static_cast<std::size_t>(k) * width + col);
    }
    return out;
  };
  int bg_row = 0, fg_row = 3;
  CHECK(p.bg_logit.at(0) ==
        doctest::Approx(mlp(h.bg_w1, h.bg_b1, h.bg_w2, h.bg_b2, bg_row, 0, 1))
            .epsilon(1e-12));
  for (int c = 0; c < C; ++c)
    CHECK(p.fg_logits.at(c) ==
          doctest::Approx(mlp(h.fg_w1, h.fg_b1, h.fg_w2, h.fg_b2, fg_row, c, C))
              .epsilon(1e-12));

  SUBCASE("zeroed audio rows of the first layer ignore the audio stream") {
    for (int j = d; j < 2 * d; ++j)
      for (int k = 0; k < d2; ++k)
        h.fg_w1.mutable_data()[static_cast<std::size_t>(j) * d2 + k] = 0.0;
    Predictions p1 = heads_forward(h, sa, sv);
    StreamState sa2 = fake_stream(Modality::audio,
                                  Tensor::randn({4, d}, rng, 3.0));
    Predictions p2 = heads_forward(h, sa2, sv);
    for (std::size_t i = 0; i < p1.fg_logits.numel(); ++i)
      CHECK(p1.fg_logits.at(i) == p2.fg_logits.at(i));
  }

  SUBCASE("unimodal halves use the matching first-layer rows") {
    auto half_mlp = [&](const Tensor& w1, const Tensor& b1, const Tensor& w2,
                        const Tensor& b2, const Tensor& rows, int off, int row,
                        int col, int width) {
      double out = b2.at(static_cast<std::size_t>(col));
      for (int k = 0; k < d2; ++k) {
        double pre = b1.at(static_cast<std::size_t>(k));
        for (int j = 0; j < d; ++j)
          pre += rows.at(static_cast<std::size_t>(row) * d + j) *
                 w1.at(static_cast<std::size_t>(off + j) * d2 + k);
        out += gelu_s(pre) * w2.at(static_cast<std::size_t>(k) * width + col);
      }
      return out;
    };
    Predictions pv = unimodal_heads_forward(h, sv);
    CHECK(pv.bg_logit.at(0) ==
          doctest::Approx(half_mlp(h.bg_w1, h.bg_b1, h.bg_w2, h.bg_b2, rows_v,
                                   0, bg_row, 0, 1))
              .epsilon(1e-12));

    Predictions pa = unimodal_heads_forward(h, sa);
    for (int c = 0; c < C; ++c)
      CHECK(pa.fg_logits.at(static_cast<std::size_t>(c)) ==
            doctest::Approx(half_mlp(h.fg_w1, h.fg_b1, h.fg_w2, h.fg_b2,
                                     rows_a, d, fg_row, c, C))
                .epsilon(1e-12));
  }
}

TEST_CASE("scl loss identities hold exactly") {
  Rng rng(31);
  int d = 6;

  SUBCASE("single positive pair gives exactly zero") {
    Tensor v = Tensor::randn({1, d}, rng, 1.0, true);
    Tensor a = Tensor::randn({1, d}, rng, 1.0, true);
    CHECK(scl_block_loss(v, a, 0.07, {1}).item() == 0.0);
  }

  SUBCASE("masking everything out gives exactly zero") {
    Tensor v = Tensor::randn({3, d}, rng, 1.0, true);
    Tensor a = Tensor::randn({3, d}, rng, 1.0, true);
    Tensor l = scl_block_loss(v, a, 0.07, {0, 0, 0});
    CHECK(l.item() == 0.0);
    CHECK(!l.requires_grad());
  }

  SUBCASE("identical rows give log B independent of tau") {
    for (int B : {2, 4}) {
      std::vector<double> vrow(d), arow(d);
      for (int j = 0; j < d; ++j) {
        vrow[j] = rng.normal();
        arow[j] = rng.normal();
      }
      std::vector<double> vall, aall;
      for (int b = 0; b < B; ++b) {
        vall.insert(vall.end(), vrow.begin(), vrow.end());
        aall.insert(aall.end(), arow.begin(), arow.end());
      }
      Tensor v = Tensor::from({B, d}, vall);
      Tensor a = Tensor::from({B, d}, aall);
      std::vector<int> mask(B, 1);
      double l1 = scl_block_loss(v, a, 0.07, mask).item();
      double l2 = scl_block_loss(v, a, 3.5, mask).item();
      CHECK(l1 == l2);  // constant score matrix for every temperature
      CHECK(l1 == doctest::Approx(std::log(double(B))).epsilon(1e-15));
    }
  }
}

TEST_CASE("scl loss matches an independent log-sum-exp oracle") {
  Rng rng(47);
  int B = 4, d = 5;
  std::vector<double> vd(B * d), ad(B * d);
  for (auto& x : vd) x = rng.normal();
  for (auto& x : ad) x = rng.normal();
  Tensor v = Tensor::from({B, d}, vd, true);
  Tensor a = Tensor::from({B, d}, ad, true);
  double got = scl_block_loss(v, a, 0.07, {1, 1, 1, 1}).item();
  CHECK(got == doctest::Approx(scl_oracle(vd, ad, B, d, 0.07)).epsilon(1e-10));

  SUBCASE("permutation invariance") {
    std::vector<int> perm = {2, 0, 3, 1};
    std::vector<double> vp(B * d), ap(B * d);
    for (int i = 0; i < B; ++i)
      for (int j = 0; j < d; ++j) {
        vp[i * d + j] = vd[perm[i] * d + j];
        ap[i * d + j] = ad[perm[i] * d + j];
      }
    double lp = scl_block_loss(Tensor::from({B, d}, vp),
                               Tensor::from({B, d}, ap), 0.07, {1, 1, 1, 1})
                    .item();
    CHECK(lp == doctest::Approx(got).epsilon(1e-12));
  }

  SUBCASE("masked equals filtered bit for bit") {
    std::vector<int> keep = {0, 2, 3};
    std::vector<double> vf, af;
    for (int i : keep) {
      vf.insert(vf.end(), vd.begin() + i * d, vd.begin() + (i + 1) * d);
      af.insert(af.end(), ad.begin() + i * d, ad.begin() + (i + 1) * d);
    }
    double masked =
        scl_block_loss(v, a, 0.07, {1, 0, 1, 1}).item();
    double filtered = scl_block_loss(Tensor::from({3, d}, vf),
                                     Tensor::from({3, d}, af), 0.07, {1, 1, 1})
                          .item();
    CHECK(masked == filtered);
  }

  SUBCASE("aligned rows sit at a local minimum") {
    // v = a is stationary only for a symmetric constellation (the gradient of
    // each row must cancel across negatives), so anchor on a regular
    // tetrahedron: pairwise cosine -1/3, zero sum.
    double r = 1.0 / std::sqrt(3.0);
    std::vector<double> simplex = {r,  r,  r,  r,  -r, -r,
                                   -r, r,  -r, -r, -r, r};
    Tensor anchors = Tensor::from({4, 3}, simplex);
    double base =
        scl_block_loss(anchors, anchors, 0.25, {1, 1, 1, 1}).item();
    Rng pr(91);
    for (int trial = 0; trial < 8; ++trial) {
      std::vector<double> pert = simplex;
      int row = pr.uniform_int(4);
      for (int j = 0; j < 3; ++j) pert[row * 3 + j] += 0.1 * pr.normal();
      double moved = scl_block_loss(Tensor::from({4, 3}, pert), anchors, 0.25,
                                    {1, 1, 1, 1})
                         .item();
      CHECK(moved >= base - 1e-12);
    }
  }

  SUBCASE("gradients agree with finite differences") {
    auto loss = [&] { return scl_block_loss(v, a, 0.1, {1, 1, 0, 1}); };
    CHECK(fd_check(loss, v).max_rel_err < 1e-7);
    CHECK(fd_check(loss, a).max_rel_err < 1e-7);
  }
}

TEST_CASE("scl loss rejects bad arguments") {
  Tensor v = Tensor::zeros({2, 3});
  Tensor a = Tensor::zeros({2, 3});
  CHECK_THROWS_AS(scl_block_loss(v, a, 0.0, {1, 1}), ConfigError);
  CHECK_THROWS_AS(scl_block_loss(v, a, -1.0, {1, 1}), ConfigError);
  CHECK_THROWS_AS(scl_block_loss(v, a, 0.07, {1}), DimensionError);
  CHECK_THROWS_AS(scl_block_loss(v, a, 0.07, {1, 2}), ContractError);
  CHECK_THROWS_AS(scl_block_loss(v, Tensor::zeros({2, 4}), 0.07, {1, 1}),
                  DimensionError);
}

TEST_CASE("eq9 loss follows the selected reading") {
  int C = 8;
  Rng rng(53);

  auto make_pred = [&](std::vector<double> bg, std::vector<double> fg,
                       int B) {
    Predictions p;
    p.bg_logit = Tensor::from({B}, std::move(bg), true);
    p.bg_prob = sigmoid(p.bg_logit);
    p.fg_logits = Tensor::from({B, C}, std::move(fg), true);
    return p;
  };

  SUBCASE("confident background drives the loss to zero") {
    Predictions p = make_pred({30.0}, std::vector<double>(C, 0.0), 1);
    double l = fg_bg_loss(p, {1}, {0}, "literal").item();
    CHECK(l == doctest::Approx(0.0).epsilon(1e-12).scale(1.0));
  }

  SUBCASE("uniform foreground logits give exactly log C") {
    Predictions p = make_pred({0.7}, std::vector<double>(C, 0.0), 1);
    CHECK(fg_bg_loss(p, {0}, {3}, "literal").item() == std::log(8.0));
  }

  SUBCASE("literal mode starves the background head on foreground rows") {
    Predictions p = make_pred({0.4}, std::vector<double>(C, 0.1), 1);
    backward(fg_bg_loss(p, {0}, {2}, "literal"));
    CHECK(p.bg_logit.grad()[0] == 0.0);
    Predictions q = make_pred({0.4}, std::vector<double>(C, 0.1), 1);
    backward(fg_bg_loss(q, {0}, {2}, "always_bg"));
    CHECK(q.bg_logit.grad()[0] != 0.0);
  }

  SUBCASE("mixed batch matches a scalar oracle in both modes") {
    int B = 4;
    std::vector<double> bg(B), fg(B * C);
    for (auto& x : bg) x = rng.normal();
    for (auto& x : fg) x = rng.normal();
    std::vector<int> y_b = {1, 0, 0, 1}, y_f = {0, 5, 2, 0};
    auto oracle = [&](bool literal) {
      double total = 0.0;
      for (int i = 0; i < B; ++i) {
        double z = bg[i];
        double bce = std::max(z, 0.0) - z * y_b[i] + std::log1p(std::exp(-std::abs(z)));
        double w = literal ? y_b[i] : 1.0;
        total += w * bce;
        if (y_b[i] == 0) {
          double m = fg[i * C];
          for (int j = 1; j < C; ++j) m = std::max(m, fg[i * C + j]);
          double s = 0.0;
          for (int j = 0; j < C; ++j) s += std::exp(fg[i * C + j] - m);
          total += (m - fg[i * C + y_f[i]]) + std::log(s);
        }
      }
      return total / B;
    };
    Predictions p = make_pred(bg, fg, B);
    CHECK(fg_bg_loss(p, y_b, y_f, "literal").item() ==
          doctest::Approx(oracle(true)).epsilon(1e-12));
    CHECK(fg_bg_loss(p, y_b, y_f, "always_bg").item() ==
          doctest::Approx(oracle(false)).epsilon(1e-12));
  }

  SUBCASE("gradients agree with finite differences") {
    int B = 3;
    std::vector<double> bg = {0.3, -1.2, 0.8};
    std::vector<double> fg(B * C);
    for (auto& x : fg) x = rng.normal();
    Predictions p = make_pred(bg, fg, B);
    std::vector<int> y_b = {0, 1, 0}, y_f = {1, 0, 7};
    auto loss = [&] { return fg_bg_loss(p, y_b, y_f, "always_bg"); };
    CHECK(fd_check(loss, p.bg_logit).max_rel_err < 1e-8);
    CHECK(fd_check(loss, p.fg_logits).max_rel_err < 1e-8);
  }

  SUBCASE("bad arguments are rejected") {
    Predictions p = make_pred({0.0}, std::vector<double>(C, 0.0), 1);
    CHECK_THROWS_AS(fg_bg_loss(p, {1}, {0}, "sometimes"), ConfigError);
    CHECK_THROWS_AS(fg_bg_loss(p, {2}, {0}, "literal"), ContractError);
    CHECK_THROWS_AS(fg_bg_loss(p, {0, 1}, {0, 0}, "literal"), DimensionError);
  }
}

TEST_CASE("total loss composes eq9 with gated blockwise scl") {
  RunConfig cfg = tiny_config();
  int B = 4;
  EncodedBatch eb = encode_batch(cfg, B, 71, true);
  std::vector<int> y_f = {1, 3, 0, 2};

  SUBCASE("all-foreground total equals the sum of independent calls") {
    std::vector<int> y_b(B, 0);
    LossBundle bundle = total_loss(eb.pred, eb.sa, eb.sv, y_b, y_f, cfg);
    REQUIRE(bundle.l_cnt.size() == 2);
    double want = fg_bg_loss(eb.pred, y_b, y_f, cfg.eq9_mode).item();
    std::vector<int> mask(B, 1);
    for (int k = 1; k <= cfg.depth; ++k)
      want += scl_block_loss(pool_shared(eb.sv, k), pool_shared(eb.sa, k),
                             cfg.tau, mask)
                  .item();
    CHECK(bundle.total_value == doctest::Approx(want).epsilon(1e-12));
    CHECK(bundle.bf_value + bundle.cnt_values[0] + bundle.cnt_values[1] ==
          doctest::Approx(bundle.total_value).epsilon(1e-12));
  }

  SUBCASE("all-background batch erases the contrastive terms") {
    std::vector<int> y_b(B, 1);
    cfg.eq9_mode = "always_bg";
    LossBundle bundle = total_loss(eb.pred, eb.sa, eb.sv, y_b, y_f, cfg);
    for (double c : bundle.cnt_values) CHECK(c == 0.0);
    CHECK(bundle.total_value == bundle.bf_value);

    // The gated graph must match a bg-only graph gradient-for-gradient.
    for (auto& [name, t] : bank_trainables(eb.bank)) t.clear_grad();
    backward(bundle.l_total);
    std::vector<double> gated(eb.bank.z_s[0].grad().begin(),
                              eb.bank.z_s[0].grad().end());
    std::vector<double> fg_w_grad(eb.heads.fg_w2.grad().begin(),
                                  eb.heads.fg_w2.grad().end());
    for (double g : fg_w_grad) CHECK(g == 0.0);  // no CE, no SCL

    for (auto& [name, t] : bank_trainables(eb.bank)) t.clear_grad();
    eb.heads.fg_w2.clear_grad();
    EncodedBatch eb2 = encode_batch(cfg, B, 71, true);
    backward(fg_bg_loss(eb2.pred, y_b, y_f, cfg.eq9_mode));
    std::vector<double> bf_only(eb2.bank.z_s[0].grad().begin(),
                                eb2.bank.z_s[0].grad().end());
    REQUIRE(gated.size() == bf_only.size());
    for (std::size_t i = 0; i < gated.size(); ++i)
      CHECK(gated[i] == bf_only[i]);
  }

  SUBCASE("dropping background rows keeps the contrastive sum bit-exact") {
    std::vector<int> y_b = {0, 1, 0, 0};
    LossBundle full = total_loss(eb.pred, eb.sa, eb.sv, y_b, y_f, cfg);

    // Re-encode only the foreground rows and compare term by term.
    Rng rng(71 + 3);
    Tensor pa = Tensor::randn({B, cfg.audio_patches(), cfg.d}, rng, 1.0);
    Tensor pv = Tensor::randn({B, cfg.visual_patches(), cfg.d}, rng, 1.0);
    std::vector<int> keep = {0, 2, 3};
    auto takes = [&](const Tensor& x) {
      std::vector<Tensor> rows;
      for (int i : keep) rows.push_back(slice(x, 0, i, 1));
      return concat(rows, 0);
    };
    auto [fa, fv] = encode_pair(eb.bank, eb.bb, eb.bb, takes(pa), takes(pv),
                                cfg);
    Predictions fpred = heads_forward(eb.heads, fa, fv);
    LossBundle filtered = total_loss(fpred, fa, fv, {0, 0, 0},
                                     {y_f[0], y_f[2], y_f[3]}, cfg);
    REQUIRE(full.cnt_values.size() == filtered.cnt_values.size());
    for (std::size_t k = 0; k < full.cnt_values.size(); ++k)
      CHECK(full.cnt_values[k] == filtered.cnt_values[k]);
  }

  SUBCASE("final-block mode keeps one term") {
    cfg.blockwise = false;
    std::vector<int> y_b(B, 0);
    LossBundle bundle = total_loss(eb.pred, eb.sa, eb.sv, y_b, y_f, cfg);
    REQUIRE(bundle.l_cnt.size() == 1);
    double final_term =
        scl_block_loss(pool_shared(eb.sv, cfg.depth),
                       pool_shared(eb.sa, cfg.depth), cfg.tau,
                       std::vector<int>(B, 1))
            .item();
    CHECK(bundle.cnt_values[0] == final_term);
  }

  SUBCASE("zero contrastive weight skips the scl graph") {
    cfg.contrastive_weight = 0.0;
    std::vector<int> y_b(B, 0);
    LossBundle bundle = total_loss(eb.pred, eb.sa, eb.sv, y_b, y_f, cfg);
    CHECK(bundle.l_cnt.empty());
    CHECK(bundle.total_value == bundle.bf_value);
  }

  SUBCASE("block weights scale individual terms") {
    std::vector<int> y_b(B, 0);
    LossBundle base = total_loss(eb.pred, eb.sa, eb.sv, y_b, y_f, cfg);
    LossBundle wtd =
        total_loss(eb.pred, eb.sa, eb.sv, y_b, y_f, cfg, {0.0, 1.0});
    CHECK(wtd.total_value ==
          doctest::Approx(wtd.bf_value + wtd.cnt_values[1]).epsilon(1e-12));
    CHECK(wtd.cnt_values[0] == base.cnt_values[0]);  // recorded unweighted
    CHECK_THROWS_AS(
        total_loss(eb.pred, eb.sa, eb.sv, y_b, y_f, cfg, {1.0}),
        ConfigError);
  }

  SUBCASE("non-finite terms raise a numerical error") {
    Predictions bad;
    double inf = std::numeric_limits<double>::infinity();
    std::vector<double> fg(B * cfg.classes, 0.0);
    fg[0] = inf;
    bad.bg_logit = Tensor::from({B}, std::vector<double>(B, 0.0), true);
    bad.bg_prob = sigmoid(bad.bg_logit);
    bad.fg_logits = Tensor::from({B, cfg.classes}, fg, true);
    std::vector<int> y_b(B, 0);
    CHECK_THROWS_AS(total_loss(bad, eb.sa, eb.sv, y_b, y_f, cfg),
                    NumericalError);
  }
}

TEST_CASE("saliency maps localize the driving patch") {
  RunConfig cfg = tiny_config();
  cfg.n_a = 0;
  cfg.n_v = 0;
  cfg.n_s = 0;  // keep the fake stream layout trivial
  int d = cfg.d, n = 4;

  Rng rng(83);
  Tensor ek = Tensor::randn({1, n + 2, d}, rng, 1.0, true);
  StreamState sv = fake_stream(Modality::visual, ek);

  SUBCASE("single dominant patch wins the map") {
    // Logit = sum of one patch row: gradient is 1 on that row, 0 elsewhere.
    int target = 2;  // third patch
    Tensor row = slice(ek, 1, sv.layout.patch_off + target, 1);
    Predictions p;
    p.fg_logits = reshape(sum(row), {1, 1});
    Tensor map = saliency_map(sv, p, 0, cfg);
    REQUIRE(map.shape() == Shape{2, 2});
    for (int i = 0; i < n; ++i)
      CHECK(map.at(static_cast<std::size_t>(i)) == (i == target ? 1.0 : 0.0));
  }

  SUBCASE("constant gradient field collapses to zero") {
    Tensor patches = slice(ek, 1, sv.layout.patch_off, n);
    Predictions p;
    p.fg_logits = reshape(sum(patches), {1, 1});
    Tensor map = saliency_map(sv, p, 0, cfg);
    for (std::size_t i = 0; i < map.numel(); ++i) CHECK(map.at(i) == 0.0);
  }

  SUBCASE("class index is validated") {
    Predictions p;
    p.fg_logits = reshape(sum(ek), {1, 1});
    CHECK_THROWS_AS(saliency_map(sv, p, 3, cfg), ContractError);
  }
}

TEST_CASE("saliency grid shape follows the image geometry") {
  RunConfig cfg;  // desk defaults: 32x32, patch 8 -> 4x4 grid
  TokenBank bank = init_tokens(cfg, 3);
  BackboneParams bb = init_backbone(cfg, 4);
  HeadParams heads = init_heads(cfg, 5);
  Rng hr(5);
  auto hw = heads.fg_w2.mutable_data();  // open the zero output layer
  for (auto& x : hw) x = hr.normal() * 0.2;
  Rng rng(6);
  Tensor pix = Tensor::randn({1, 3, 32, 32}, rng, 1.0);
  Tensor spec = Tensor::randn({1, 24, 32}, rng, 1.0);
  auto [sa, sv] = encode_pair(bank, bb, bb, patchify_audio(spec, bb, cfg),
                              patchify_visual(pix, bb, cfg), cfg);
  Predictions pred = heads_forward(heads, sa, sv);
  bool any = false;
  for (int c = 0; c < cfg.classes; ++c) {
    // Maps must not bleed into each other across classes.
    sv.blocks[sv.blocks.size() - 2].zero_grad();
    Tensor map = saliency_map(sv, pred, c, cfg);
    CHECK(map.shape() == Shape{4, 4});
    for (std::size_t i = 0; i < map.numel(); ++i) {
      CHECK(map.at(i) >= 0.0);
      CHECK(map.at(i) <= 1.0);
      if (map.at(i) > 0.0) any = true;
    }
  }
  CHECK(any);  // some class sees a positive gradient somewhere
}

TEST_CASE("pgm export writes the exact byte layout") {
  Tensor map = Tensor::from({2, 3}, {0.0, 0.5, 1.0, 0.25, 2.0, -1.0});
  std::string path = "saliency_test.pgm";
  write_pgm(path, map);
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  std::stringstream ss;
  ss << is.rdbuf();
  std::string bytes = ss.str();
  std::string header = "P5\n3 2\n255\n";
  REQUIRE(bytes.size() == header.size() + 6);
  CHECK(bytes.compare(0, header.size(), header) == 0);
  const unsigned char* px =
      reinterpret_cast<const unsigned char*>(bytes.data() + header.size());
  CHECK(px[0] == 0);
  CHECK(px[1] == 128);  // lround(127.5) away from zero
  CHECK(px[2] == 255);
  CHECK(px[3] == 64);
  CHECK(px[4] == 255);  // clamped from above
  CHECK(px[5] == 0);    // clamped from below
  std::remove(path.c_str());
}

TEST_CASE("head parameters round-trip through a record") {
  RunConfig cfg = tiny_config();
  HeadParams h = init_heads(cfg, 97);
  Rng rng(97);
  for (auto& [name, t] : head_trainables(h)) {
    auto d = t.mutable_data();
    for (auto& x : d) x = rng.normal();
  }
  Record rec;
  add_heads(rec, "train/heads/", h);
  HeadParams back = read_heads(rec, "train/heads/");
  for (auto [orig, copy] :
       {std::pair{h.bg_w1, back.bg_w1}, std::pair{h.bg_b1, back.bg_b1},
        std::pair{h.bg_w2, back.bg_w2}, std::pair{h.bg_b2, back.bg_b2},
        std::pair{h.fg_w1, back.fg_w1}, std::pair{h.fg_b1, back.fg_b1},
        std::pair{h.fg_w2, back.fg_w2}, std::pair{h.fg_b2, back.fg_b2}}) {
    REQUIRE(orig.shape() == copy.shape());
    for (std::size_t i = 0; i < orig.numel(); ++i)
      CHECK(orig.at(i) == copy.at(i));
    CHECK(copy.requires_grad());
  }
  CHECK_THROWS_AS(read_heads(rec, "wrong/"), FormatError);
}
