#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "mavt/errors.hpp"
#include "mavt/losses.hpp"
#include "mavt/model.hpp"
#include "mavt/rng.hpp"
#include "mavt/synthdata.hpp"
#include "mavt/tensor.hpp"
#include "mavt/trainer.hpp"

using namespace mavt;

namespace {

RunConfig tiny_cfg() {
  RunConfig cfg;
  cfg.d = 16;
  cfg.depth = 2;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.image_h = cfg.image_w = 16;
  cfg.spec_f = 8;
  cfg.spec_t = 16;
  cfg.n_a = cfg.n_v = cfg.n_s = 2;
  cfg.classes = 4;
  cfg.train_size = 48;
  cfg.test_size = 32;
  cfg.test_bg_ratio = 0.25;
  cfg.batch_size = 16;
  cfg.epochs = 6;
  cfg.eq9_mode = "always_bg";
  cfg.seed = 21;
  return cfg;
}

std::vector<std::vector<double>> parse_csv(const std::string& csv) {
  std::vector<std::vector<double>> rows;
  std::istringstream is(csv);
  std::string line;
  std::getline(is, line);  // header
  while (std::getline(is, line)) {
    std::vector<double> row;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(std::move(row));
  }
  return rows;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag)
      : path(std::filesystem::path("tmp_" + tag)) {
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const {
    return (path / name).string();
  }
};

}  // namespace

TEST_CASE("adam matches a scalar reference trajectory") {
  Tensor x = Tensor::from({1}, {1.0}, true);
  std::vector<std::pair<std::string, Tensor>> params = {{"x", x}};
  OptimState opt = init_opt(params);
  CHECK(opt.m.size() == 1);
  CHECK(opt.v.size() == 1);
  CHECK(opt.step == 0);

  double xr = 1.0, m = 0.0, v = 0.0;
  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int t = 1; t <= 5; ++t) {
    Tensor loss = mul(x, x);
    backward(loss);
    adam_step(opt, params, lr);
    x.clear_grad();

    double g = 2.0 * xr;
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g * g;
    double mh = m / (1.0 - std::pow(b1, t));
    double vh = v / (1.0 - std::pow(b2, t));
    xr -= lr * mh / (std::sqrt(vh) + eps);
    CHECK(std::abs(x.at(0) - xr) < 1e-12);
  }
  CHECK(opt.step == 5);

  SUBCASE("first step moves by almost exactly -lr") {
    Tensor y = Tensor::from({1}, {1.0}, true);
    std::vector<std::pair<std::string, Tensor>> ps = {{"y", y}};
    OptimState o = init_opt(ps);
    backward(mul(y, y));
    adam_step(o, ps, lr);
    CHECK(std::abs((1.0 - y.at(0)) - lr) < 1e-8);
  }
}

TEST_CASE("adam contract cases") {
  Tensor y = Tensor::from({3}, {1.0, -2.0, 3.0}, true);
  std::vector<std::pair<std::string, Tensor>> params = {{"y", y}};
  OptimState opt = init_opt(params);

  SUBCASE("all-zero gradients leave a fresh state unchanged") {
    backward(sum(mul(y, Tensor::zeros({3}))));  // dL/dy = 0 everywhere
    adam_step(opt, params, 0.5);
    CHECK(y.at(0) == 1.0);
    CHECK(y.at(1) == -2.0);
    CHECK(y.at(2) == 3.0);
    CHECK(opt.step == 1);
  }
  SUBCASE("missing gradient is a contract violation") {
    CHECK_THROWS_AS(adam_step(opt, params, 0.1), ContractError);
  }
  SUBCASE("state size must match the parameter list") {
    std::vector<std::pair<std::string, Tensor>> more = {
        {"y", y}, {"z", Tensor::zeros({2}, true)}};
    CHECK_THROWS_AS(adam_step(opt, more, 0.1), ContractError);
  }
}

TEST_CASE("lr schedule boundaries and shape") {
  RunConfig cfg;  // lr 1e-3, decay 0.1, step 30
  CHECK(lr_at(0, cfg) == doctest::Approx(1e-3).epsilon(1e-14));
  CHECK(lr_at(29, cfg) == doctest::Approx(1e-3).epsilon(1e-14));
  CHECK(lr_at(30, cfg) == doctest::Approx(1e-4).epsilon(1e-14));
  CHECK(lr_at(59, cfg) == doctest::Approx(1e-4).epsilon(1e-14));
  CHECK(lr_at(60, cfg) == doctest::Approx(1e-5).epsilon(1e-14));
  CHECK(lr_at(90, cfg) == doctest::Approx(1e-6).epsilon(1e-14));
  for (int e = 1; e <= 120; ++e) {
    CHECK(lr_at(e, cfg) <= lr_at(e - 1, cfg));
    CHECK(lr_at(e, cfg) == lr_at(e - (e % 30), cfg));  // piecewise constant
  }
  CHECK_THROWS_AS(lr_at(-1, cfg), ContractError);
}

TEST_CASE("batch stacking keeps sample payloads in slot order") {
  RunConfig cfg = tiny_cfg();
  SynthSpec spec = make_synth_spec(cfg);
  Dataset ds = gen_dataset(spec);
  std::vector<PairedSample> batch(ds.train.begin(), ds.train.begin() + 3);

  Tensor xv = stack_visual(batch);
  Tensor xa = stack_audio(batch);
  CHECK(xv.shape() == Shape{3, 3, 16, 16});
  CHECK(xa.shape() == Shape{3, 8, 16});
  for (int i = 0; i < 3; ++i) {
    auto src = batch[i].visual.data();
    auto dst = xv.data().subspan(i * src.size(), src.size());
    bool same = true;
    for (std::size_t j = 0; j < src.size(); ++j) same &= src[j] == dst[j];
    CHECK(same);
  }
  auto a1 = batch[1].audio.data();
  auto a1s = xa.data().subspan(a1.size(), a1.size());
  CHECK(a1s[5] == a1[5]);

  CHECK_THROWS_AS(stack_visual({}), ContractError);
  std::vector<PairedSample> bad = batch;
  bad[2].visual = Tensor::zeros({3, 8, 8});
  CHECK_THROWS_AS(stack_visual(bad), DimensionError);
}

TEST_CASE("model aggregate: counts, aliasing, determinism") {
  RunConfig cfg;  // desk defaults
  Model m = init_model(cfg);

  CHECK(trainable_count(m) == trainable_param_formula(cfg));
  CHECK(trainable_count(m) == 21737);
  CHECK(m.bb_a.patch_proj.node() == m.bb_v.patch_proj.node());

  long long frozen = frozen_count(m);
  CHECK(frozen > 0);

  SUBCASE("frozen count ignores token settings") {
    RunConfig c2 = cfg;
    c2.n_a = 0;
    c2.n_v = 1;
    c2.n_s = 7;
    c2.class_tokens = false;
    c2.lsa = false;
    CHECK(frozen_count(init_model(c2)) == frozen);
  }
  SUBCASE("separate backbones double the frozen side") {
    RunConfig c2 = cfg;
    c2.separate_backbones = true;
    Model ms = init_model(c2);
    CHECK(ms.bb_a.patch_proj.node() != ms.bb_v.patch_proj.node());
    CHECK(frozen_count(ms) == 2 * frozen);
    CHECK(trainable_count(ms) == trainable_count(m));
  }
  SUBCASE("one seed fixes the whole model") {
    Model m2 = init_model(cfg);
    CHECK(frozen_checksum(m2) == frozen_checksum(m));
    auto p1 = collect_trainables(m);
    auto p2 = collect_trainables(m2);
    REQUIRE(p1.size() == p2.size());
    for (std::size_t i = 0; i < p1.size(); ++i) {
      CHECK(p1[i].first == p2[i].first);
      auto a = p1[i].second.data();
      auto b = p2[i].second.data();
      bool same = true;
      for (std::size_t j = 0; j < a.size(); ++j) same &= a[j] == b[j];
      CHECK(same);
    }
    RunConfig c3 = cfg;
    c3.seed = 2;
    CHECK(frozen_checksum(init_model(c3)) != frozen_checksum(m));
  }
  SUBCASE("head parameters ride at the end of the trainable list") {
    auto params = collect_trainables(m);
    REQUIRE(params.size() >= 8);
    CHECK(params[params.size() - 8].first == "heads/bg_w1");
    CHECK(params.back().first == "heads/fg_b2");
  }
}

TEST_CASE("clone_model detaches storage but keeps values") {
  Model m = init_model(tiny_cfg());
  Model c = clone_model(m);
  auto pm = collect_trainables(m);
  auto pc = collect_trainables(c);
  REQUIRE(pm.size() == pc.size());
  for (std::size_t i = 0; i < pm.size(); ++i) {
    CHECK(pm[i].second.node() != pc[i].second.node());
    CHECK(pm[i].second.at(0) == pc[i].second.at(0));
  }
  double before = pc[0].second.at(0);
  pm[0].second.mutable_data()[0] += 1.0;
  CHECK(pc[0].second.at(0) == before);
  CHECK(frozen_checksum(c) == frozen_checksum(m));
}

TEST_CASE("untrained model scores at chance") {
  RunConfig cfg;  // C = 8
  cfg.train_size = 1;
  cfg.test_size = 400;
  cfg.test_bg_ratio = 0.0;
  Model m = init_model(cfg);
  Dataset ds = gen_dataset(make_synth_spec(cfg));
  REQUIRE(ds.test.size() == 400);

  EvalResult ev = evaluate(m, ds.test, "av");
  // zero heads: argmax is always class 0, so accuracy is the class-0 share
  long long zero = 0;
  for (const PairedSample& s : ds.test) zero += s.y_f == 0;
  CHECK(ev.fg_acc == doctest::Approx(static_cast<double>(zero) / 400)
                         .epsilon(1e-12));
  CHECK(std::abs(ev.fg_acc - 0.125) <= 0.06);
  // bg probability is exactly 0.5 -> every sample is called background
  CHECK(ev.bg_acc == 0.0);
  CHECK(ev.retrieval_r1 >= 0.0);
  CHECK(ev.retrieval_r1 <= 1.0);
}

TEST_CASE("hard-coded matched-filter head scores 1.0") {
  RunConfig cfg = tiny_cfg();
  cfg.classes = 2;
  cfg.noise_std = 0.0;  // every sample is exactly its prototype
  cfg.train_size = 1;
  cfg.test_size = 12;
  cfg.test_bg_ratio = 0.0;
  Model m = init_model(cfg);
  Dataset ds = gen_dataset(make_synth_spec(cfg));

  // class embeddings [v^K || a^K], one per class
  std::vector<std::vector<double>> emb;
  {
    NoGradGuard ng;
    for (int c = 0; c < 2; ++c) {
      const PairedSample* rep = nullptr;
      for (const PairedSample& s : ds.test)
        if (s.y_f == c) rep = &s;
      REQUIRE(rep != nullptr);
      Tensor pv = patchify_visual(rep->visual, m.bb_v, cfg);
      Tensor pa = patchify_audio(rep->audio, m.bb_a, cfg);
      auto [sa, sv] = encode_pair(m.bank, m.bb_a, m.bb_v, pa, pv, cfg);
      Tensor ev = class_token_output(sv, true);
      Tensor ea = class_token_output(sa, true);
      std::vector<double> e(ev.data().begin(), ev.data().end());
      e.insert(e.end(), ea.data().begin(), ea.data().end());
      emb.push_back(std::move(e));
    }
  }
  REQUIRE(emb[0] != emb[1]);

  // Matched filter in the head's hidden space: with only two distinct inputs
  // possible, logit_c(e) = h(e)·h(e_c) - ½‖h(e_c)‖² peaks at the right class.
  int d2 = 2 * cfg.d;
  auto w1 = m.heads.fg_w1.data();
  auto b1 = m.heads.fg_b1.data();
  auto gelu_s = [](double v) {
    return 0.5 * v * (1.0 + std::erf(v * 0.7071067811865475));
  };
  std::vector<std::vector<double>> hid;
  for (int c = 0; c < 2; ++c) {
    std::vector<double> h(d2);
    for (int k = 0; k < d2; ++k) {
      double pre = b1[static_cast<std::size_t>(k)];
      for (int j = 0; j < d2; ++j)
        pre += emb[c][static_cast<std::size_t>(j)] *
               w1[static_cast<std::size_t>(j) * d2 + k];
      h[static_cast<std::size_t>(k)] = gelu_s(pre);
    }
    hid.push_back(std::move(h));
  }
  REQUIRE(hid[0] != hid[1]);

  auto w = m.heads.fg_w2.mutable_data();  // [2d, C]
  auto b = m.heads.fg_b2.mutable_data();
  for (int c = 0; c < 2; ++c) {
    double sq = 0.0;
    for (int k = 0; k < d2; ++k) {
      w[static_cast<std::size_t>(k) * 2 + c] = hid[c][static_cast<std::size_t>(k)];
      sq += hid[c][static_cast<std::size_t>(k)] * hid[c][static_cast<std::size_t>(k)];
    }
    b[c] = -0.5 * sq;
  }
  EvalResult ev = evaluate(m, ds.test, "av");
  CHECK(ev.fg_acc == 1.0);
}

TEST_CASE("identical streams give perfect retrieval") {
  RunConfig cfg = tiny_cfg();
  cfg.spec_f = 16;  // audio grid == visual grid
  cfg.spec_t = 16;
  cfg.n_a = cfg.n_v = 0;  // leave only shared structure in both streams
  cfg.classes = 2;
  Model m = init_model(cfg);

  Rng rng(5);
  std::vector<PairedSample> samples;
  for (int i = 0; i < 8; ++i) {
    PairedSample s;
    std::vector<double> spec(16 * 16);
    for (double& x : spec) x = rng.normal();
    s.audio = Tensor::from({16, 16}, spec);
    std::vector<double> px = spec;
    px.insert(px.end(), spec.begin(), spec.end());
    px.insert(px.end(), spec.begin(), spec.end());
    s.visual = Tensor::from({3, 16, 16}, std::move(px));
    s.y_b = 0;
    s.y_f = i % 2;
    samples.push_back(std::move(s));
  }
  EvalResult ev = evaluate(m, samples, "av");
  CHECK(ev.retrieval_r1 == 1.0);
}

TEST_CASE("small paired run: frozen contract, determinism, checkpointing") {
  RunConfig cfg = tiny_cfg();
  SynthSpec spec = make_synth_spec(cfg);

  Model m1 = init_model(cfg);
  std::uint64_t frozen_before = frozen_checksum(m1);
  Dataset ds = gen_dataset(spec);
  TrainLog log1 = train(m1, ds);
  CHECK(frozen_checksum(m1) == frozen_before);

  auto rows = parse_csv(log1.csv);
  REQUIRE(static_cast<int>(rows.size()) == cfg.epochs);
  CHECK(log1.csv.rfind(metrics_header(), 0) == 0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    REQUIRE(rows[i].size() == 8);
    CHECK(rows[i][0] == static_cast<double>(i));
    CHECK(rows[i][1] == doctest::Approx(lr_at(static_cast<int>(i), cfg))
                            .epsilon(1e-14));
    CHECK(rows[i][5] >= 0.0);
    CHECK(rows[i][5] <= 1.0);
  }
  // the optimizer must actually reduce the training loss on this easy set
  CHECK(rows.back()[2] < rows.front()[2]);

  // best row bookkeeping
  double best_fg = -1.0;
  int best_epoch = -1;
  for (std::size_t i = 0; i < rows.size(); ++i)
    if (rows[i][5] > best_fg) {
      best_fg = rows[i][5];
      best_epoch = static_cast<int>(i);
    }
  CHECK(log1.best_epoch == best_epoch);
  CHECK(log1.best_eval.fg_acc == best_fg);
  CHECK(log1.final_eval.fg_acc == rows.back()[5]);

  SUBCASE("two identical runs produce bit-identical CSVs") {
    Model m2 = init_model(cfg);
    Dataset ds2 = gen_dataset(make_synth_spec(cfg));
    TrainLog log2 = train(m2, ds2);
    CHECK(log1.csv == log2.csv);
    EvalResult e1 = evaluate(m1, ds.test, "av");
    EvalResult e2 = evaluate(m2, ds2.test, "av");
    CHECK(e1.fg_acc == e2.fg_acc);
    CHECK(e1.bg_acc == e2.bg_acc);
    CHECK(e1.retrieval_r1 == e2.retrieval_r1);
  }

  SUBCASE("best checkpoint round-trips through disk") {
    TempDir dir("ckpt");
    std::string path = dir.file("best.mavt");
    save_checkpoint(path, log1.best_model, &log1.best_opt, log1.best_epoch);
    LoadedCheckpoint lc = load_checkpoint(path);
    CHECK(lc.epoch == log1.best_epoch);
    CHECK(lc.has_opt);
    CHECK(lc.opt.step == log1.best_opt.step);
    CHECK(dump_config(lc.model.cfg) == dump_config(cfg));
    CHECK(frozen_checksum(lc.model) == frozen_before);

    auto pa = collect_trainables(log1.best_model);
    auto pb = collect_trainables(lc.model);
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
      auto a = pa[i].second.data();
      auto b = pb[i].second.data();
      bool same = a.size() == b.size();
      for (std::size_t j = 0; same && j < a.size(); ++j) same = a[j] == b[j];
      CHECK(same);
    }

    EvalResult ev = evaluate(lc.model, ds.test, "av");
    CHECK(ev.fg_acc == log1.best_eval.fg_acc);
    CHECK(ev.bg_acc == log1.best_eval.bg_acc);
    CHECK(ev.retrieval_r1 == log1.best_eval.retrieval_r1);
  }

  SUBCASE("checkpoint without optimizer state") {
    TempDir dir("ckpt2");
    std::string path = dir.file("plain.mavt");
    save_checkpoint(path, m1, nullptr, 3);
    LoadedCheckpoint lc = load_checkpoint(path);
    CHECK(!lc.has_opt);
    CHECK(lc.epoch == 3);
    CHECK(lc.opt.m.empty());
  }

  SUBCASE("malformed checkpoints are rejected") {
    TempDir dir("ckpt3");
    CHECK_THROWS_AS(load_checkpoint(dir.file("missing.mavt")), FormatError);
    std::string trunc = dir.file("trunc.mavt");
    {
      std::ofstream os(trunc, std::ios::binary);
      os << dump_config(cfg) << "\n";
      os << "MAVT";  // record cut short
    }
    CHECK_THROWS_AS(load_checkpoint(trunc), FormatError);
    std::string headerless = dir.file("na.mavt");
    {
      std::ofstream os(headerless, std::ios::binary);
      os << "\n";
    }
    CHECK_THROWS_AS(load_checkpoint(headerless), FormatError);
  }
}

TEST_CASE("unimodal training routes one stream end to end") {
  RunConfig cfg = tiny_cfg();
  cfg.train_modality = "a";
  cfg.epochs = 2;
  Model m = init_model(cfg);
  Model init = clone_model(m);
  Dataset ds = gen_dataset(make_synth_spec(cfg));
  TrainLog log = train(m, ds);
  auto rows = parse_csv(log.csv);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0][4] == 0.0);  // no contrastive term without a paired stream
  CHECK(rows[0][7] == 0.0);  // retrieval undefined
  CHECK(rows[0][2] == rows[0][3]);
  EvalResult ev = evaluate(m, ds.test, "a");
  CHECK(ev.fg_acc == log.final_eval.fg_acc);

  // only the audio-reachable parameters may move
  auto diff = [](const Tensor& a, const Tensor& b) {
    auto da = a.data();
    auto db = b.data();
    for (std::size_t i = 0; i < da.size(); ++i)
      if (da[i] != db[i]) return true;
    return false;
  };
  CHECK(diff(m.bank.z_a[0], init.bank.z_a[0]));
  CHECK(!diff(m.bank.z_v[0], init.bank.z_v[0]));
  CHECK(!diff(m.bank.z_s[0], init.bank.z_s[0]));
  CHECK(!diff(m.bank.lsa_v.wq, init.bank.lsa_v.wq));
  CHECK(!diff(m.bank.lsa_s.wq, init.bank.lsa_s.wq));
  CHECK(diff(m.heads.fg_w2, init.heads.fg_w2));
  {
    // first-layer audio rows move, visual rows stay byte-identical
    auto now = m.heads.fg_w1.data();
    auto was = init.heads.fg_w1.data();
    int d2 = 2 * cfg.d;
    bool vis_same = true, aud_moved = false;
    for (int j = 0; j < cfg.d; ++j)
      for (int k = 0; k < d2; ++k) {
        vis_same &= now[static_cast<std::size_t>(j) * d2 + k] ==
                    was[static_cast<std::size_t>(j) * d2 + k];
        aud_moved |= now[static_cast<std::size_t>(cfg.d + j) * d2 + k] !=
                     was[static_cast<std::size_t>(cfg.d + j) * d2 + k];
      }
    CHECK(vis_same);
    CHECK(aud_moved);
  }

  SUBCASE("subset optimizer state survives a checkpoint round-trip") {
    TempDir dir("uckpt");
    std::string path = dir.file("uni.mavt");
    save_checkpoint(path, log.best_model, &log.best_opt, log.best_epoch);
    LoadedCheckpoint lc = load_checkpoint(path);
    REQUIRE(lc.has_opt);
    CHECK(lc.opt.names == log.best_opt.names);
    CHECK(lc.opt.step == log.best_opt.step);
    CHECK(lc.opt.names.size() < collect_trainables(m).size());
    EvalResult er = evaluate(lc.model, ds.test, "a");
    CHECK(er.fg_acc == log.best_eval.fg_acc);
  }
}

TEST_CASE("non-finite loss aborts with context") {
  RunConfig cfg = tiny_cfg();
  cfg.epochs = 1;
  Model m = init_model(cfg);
  m.heads.fg_b2.mutable_data()[0] = std::numeric_limits<double>::infinity();
  Dataset ds = gen_dataset(make_synth_spec(cfg));
  try {
    train(m, ds);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    std::string msg = e.what();
    CHECK(msg.find("epoch 0") != std::string::npos);
    CHECK(msg.find("step 0") != std::string::npos);
  }
}

TEST_CASE("training rejects configs without class tokens") {
  RunConfig cfg = tiny_cfg();
  Model m = init_model(cfg);
  m.cfg.class_tokens = false;
  Dataset ds = gen_dataset(make_synth_spec(cfg));
  CHECK_THROWS_AS(train(m, ds), ConfigError);
}
