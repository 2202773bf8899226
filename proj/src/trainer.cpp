#include "mavt/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "mavt/errors.hpp"
#include "mavt/losses.hpp"
#include "mavt/rng.hpp"

namespace mavt {

namespace {

constexpr std::uint64_t kOrderTag = 0x40;
constexpr std::uint64_t kMismatchTag = 0x50000;

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

Modality mod_of(const std::string& s) {
  if (s == "a") return Modality::audio;
  if (s == "v") return Modality::visual;
  throw ConfigError("unknown modality '" + s + "' (want av, a, or v)");
}

Tensor stack_samples(const std::vector<PairedSample>& batch, bool visual) {
  if (batch.empty()) throw ContractError("stack: empty batch");
  const Tensor& first = visual ? batch[0].visual : batch[0].audio;
  Shape per = first.shape();
  std::vector<double> buf;
  buf.reserve(batch.size() * first.numel());
  for (const PairedSample& s : batch) {
    const Tensor& t = visual ? s.visual : s.audio;
    if (t.shape() != per)
      throw DimensionError("stack: sample shape " + shape_str(t.shape()) +
                           " differs from " + shape_str(per));
    auto d = t.data();
    buf.insert(buf.end(), d.begin(), d.end());
  }
  Shape out = {static_cast<int>(batch.size())};
  out.insert(out.end(), per.begin(), per.end());
  return Tensor::from(out, std::move(buf));
}

OptimState clone_opt(const OptimState& o) {
  OptimState c;
  c.beta1 = o.beta1;
  c.beta2 = o.beta2;
  c.eps = o.eps;
  c.step = o.step;
  c.names = o.names;
  for (const Tensor& t : o.m) c.m.push_back(t.clone());
  for (const Tensor& t : o.v) c.v.push_back(t.clone());
  return c;
}

// Parameters the routed graph can reach: everything on the paired path; on a
// unimodal path only that stream's bag, its LSA, its class tokens, and the
// heads (shared tokens never enter a unimodal stream).
std::vector<std::pair<std::string, Tensor>> reachable_params(const Model& m,
                                                             bool paired,
                                                             Modality which) {
  auto all = collect_trainables(m);
  if (paired) return all;
  std::string bag = which == Modality::audio ? "z_a." : "z_v.";
  std::string lsa = which == Modality::audio ? "lsa_a/" : "lsa_v/";
  std::string b_cls = which == Modality::audio ? "z_b_a" : "z_b_v";
  std::string f_cls = which == Modality::audio ? "z_f_a" : "z_f_v";
  std::vector<std::pair<std::string, Tensor>> out;
  for (auto& kv : all) {
    const std::string& n = kv.first;
    bool keep = n.rfind(bag, 0) == 0 || n.rfind(lsa, 0) == 0 ||
                n.rfind("heads/", 0) == 0 || n == "z_b" || n == "z_f" ||
                n == b_cls || n == f_cls;
    if (keep) out.push_back(kv);
  }
  return out;
}

int argmax_row(std::span<const double> row) {
  int best = 0;
  for (int j = 1; j < static_cast<int>(row.size()); ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

}  // namespace

Tensor stack_visual(const std::vector<PairedSample>& batch) {
  return stack_samples(batch, true);
}

Tensor stack_audio(const std::vector<PairedSample>& batch) {
  return stack_samples(batch, false);
}

OptimState init_opt(
    const std::vector<std::pair<std::string, Tensor>>& params) {
  OptimState o;
  for (const auto& kv : params) {
    o.names.push_back(kv.first);
    o.m.push_back(Tensor::zeros(kv.second.shape()));
    o.v.push_back(Tensor::zeros(kv.second.shape()));
  }
  return o;
}

void adam_step(OptimState& opt,
               const std::vector<std::pair<std::string, Tensor>>& params,
               double lr) {
  if (opt.m.size() != params.size() || opt.v.size() != params.size())
    throw ContractError("adam_step: state does not match the parameter list");
  ++opt.step;
  double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step));
  double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].second;  // handle copy; same node
    auto g = p.grad();
    if (g.empty())
      throw ContractError("adam_step: missing gradient on " + params[i].first);
    auto th = p.mutable_data();
    auto mm = opt.m[i].mutable_data();
    auto vv = opt.v[i].mutable_data();
    for (std::size_t j = 0; j < th.size(); ++j) {
      mm[j] = opt.beta1 * mm[j] + (1.0 - opt.beta1) * g[j];
      vv[j] = opt.beta2 * vv[j] + (1.0 - opt.beta2) * g[j] * g[j];
      th[j] -= lr * (mm[j] / c1) / (std::sqrt(vv[j] / c2) + opt.eps);
    }
  }
}

double lr_at(int epoch, const RunConfig& cfg) {
  if (epoch < 0) throw ContractError("lr_at: negative epoch");
  return cfg.lr * std::pow(cfg.lr_decay, epoch / cfg.lr_step);
}

EvalResult evaluate(const Model& m, const std::vector<PairedSample>& test,
                    const std::string& modality) {
  if (test.empty()) throw ContractError("evaluate: empty test set");
  NoGradGuard ng;
  const RunConfig& cfg = m.cfg;
  bool paired = modality == "av";
  Modality which = paired ? Modality::visual : mod_of(modality);
  int B = std::max(1, cfg.batch_size);
  int n = static_cast<int>(test.size());
  long long fg_hit = 0, fg_n = 0, bg_hit = 0;
  bool pool = paired && cfg.n_s > 0;
  std::vector<std::vector<double>> pv_rows, pa_rows;  // fg pooled features

  for (int start = 0; start < n; start += B) {
    std::vector<PairedSample> chunk(test.begin() + start,
                                    test.begin() + std::min(n, start + B));
    Predictions pred;
    if (paired) {
      Tensor pv = patchify_visual(stack_visual(chunk), m.bb_v, cfg);
      Tensor pa = patchify_audio(stack_audio(chunk), m.bb_a, cfg);
      auto [sa, sv] = encode_pair(m.bank, m.bb_a, m.bb_v, pa, pv, cfg);
      pred = heads_forward(m.heads, sa, sv);
      if (pool) {
        Tensor fv = pool_shared(sv, cfg.depth);
        Tensor fa = pool_shared(sa, cfg.depth);
        auto dv = fv.data();
        auto da = fa.data();
        for (std::size_t i = 0; i < chunk.size(); ++i) {
          if (chunk[i].y_b != 0) continue;
          pv_rows.emplace_back(dv.begin() + i * cfg.d,
                               dv.begin() + (i + 1) * cfg.d);
          pa_rows.emplace_back(da.begin() + i * cfg.d,
                               da.begin() + (i + 1) * cfg.d);
        }
      }
    } else {
      Tensor patches =
          which == Modality::visual
              ? patchify_visual(stack_visual(chunk), m.bb_v, cfg)
              : patchify_audio(stack_audio(chunk), m.bb_a, cfg);
      StreamState ss = unimodal_forward(
          which, m.bank, which == Modality::visual ? m.bb_v : m.bb_a, patches,
          cfg);
      pred = unimodal_heads_forward(m.heads, ss);
    }
    auto bgp = pred.bg_prob.data();
    auto fgl = pred.fg_logits.data();
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      int guess_bg = bgp[i] >= 0.5 ? 1 : 0;
      bg_hit += guess_bg == chunk[i].y_b;
      if (chunk[i].y_b == 0) {
        ++fg_n;
        fg_hit += argmax_row(fgl.subspan(i * cfg.classes, cfg.classes)) ==
                  chunk[i].y_f;
      }
    }
  }

  EvalResult r;
  r.bg_acc = static_cast<double>(bg_hit) / n;
  r.fg_acc = fg_n ? static_cast<double>(fg_hit) / fg_n : 0.0;
  if (pool && !pv_rows.empty()) {
    auto normalize = [](std::vector<std::vector<double>>& rows) {
      for (auto& row : rows) {
        double sq = 0.0;
        for (double x : row) sq += x * x;
        double inv = 1.0 / std::max(std::sqrt(sq), 1e-8);
        for (double& x : row) x *= inv;
      }
    };
    normalize(pv_rows);
    normalize(pa_rows);
    long long hit = 0;
    for (std::size_t i = 0; i < pv_rows.size(); ++i) {
      int best = 0;
      double best_sim = -2.0;
      for (std::size_t j = 0; j < pa_rows.size(); ++j) {
        double sim = std::inner_product(pv_rows[i].begin(), pv_rows[i].end(),
                                        pa_rows[j].begin(), 0.0);
        if (sim > best_sim) {
          best_sim = sim;
          best = static_cast<int>(j);
        }
      }
      hit += best == static_cast<int>(i);
    }
    r.retrieval_r1 = static_cast<double>(hit) / pv_rows.size();
  }
  return r;
}

TrainLog train(Model& m, const Dataset& ds) {
  const RunConfig& cfg = m.cfg;
  if (!cfg.class_tokens)
    throw ConfigError("train: prediction heads need class tokens");
  bool paired = cfg.train_modality == "av";
  Modality which = paired ? Modality::visual : mod_of(cfg.train_modality);
  int B = cfg.batch_size;
  int steps = static_cast<int>(ds.train.size()) / B;
  if (steps == 0)
    throw ContractError("train: train set smaller than one batch");

  auto params = reachable_params(m, paired, which);
  OptimState opt = init_opt(params);
  Rng order(Rng::mix(cfg.seed, kOrderTag));
  std::vector<int> idx(ds.train.size());
  std::iota(idx.begin(), idx.end(), 0);

  std::ostringstream csv;
  csv << metrics_header() << "\n";
  TrainLog log;
  double best_fg = -1.0;
  long long gstep = 0;
  double prev_total = 0.0, prev_bf = 0.0, prev_cnt = 0.0;
  bool have_prev = false;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = lr_at(epoch, cfg);
    order.shuffle(idx);
    double sum_total = 0.0, sum_bf = 0.0, sum_cnt = 0.0;
    for (int s = 0; s < steps; ++s) {
      std::vector<PairedSample> batch;
      batch.reserve(B);
      for (int i = 0; i < B; ++i) batch.push_back(ds.train[idx[s * B + i]]);
      if (paired && cfg.mismatch_ratio > 0.0)
        batch = sample_mismatch(batch, cfg.mismatch_ratio,
                                Rng::mix(cfg.seed, kMismatchTag + gstep));
      std::vector<int> y_b(B), y_f(B);
      for (int i = 0; i < B; ++i) {
        y_b[i] = batch[i].y_b;
        y_f[i] = batch[i].y_f;
      }

      LossBundle bundle;
      try {
        if (paired) {
          Tensor pv = patchify_visual(stack_visual(batch), m.bb_v, cfg);
          Tensor pa = patchify_audio(stack_audio(batch), m.bb_a, cfg);
          auto [sa, sv] = encode_pair(m.bank, m.bb_a, m.bb_v, pa, pv, cfg);
          Predictions pred = heads_forward(m.heads, sa, sv);
          bundle = total_loss(pred, sa, sv, y_b, y_f, cfg);
        } else {
          Tensor patches =
              which == Modality::visual
                  ? patchify_visual(stack_visual(batch), m.bb_v, cfg)
                  : patchify_audio(stack_audio(batch), m.bb_a, cfg);
          StreamState ss = unimodal_forward(
              which, m.bank, which == Modality::visual ? m.bb_v : m.bb_a,
              patches, cfg);
          Predictions pred = unimodal_heads_forward(m.heads, ss);
          bundle.l_bf = fg_bg_loss(pred, y_b, y_f, cfg.eq9_mode);
          bundle.l_total = bundle.l_bf;
          bundle.bf_value = bundle.l_bf.item();
          bundle.total_value = bundle.bf_value;
          if (!std::isfinite(bundle.total_value))
            throw NumericalError("foreground/background loss is not finite");
        }
      } catch (const NumericalError& e) {
        std::ostringstream os;
        os << "train: " << e.what() << " (epoch " << epoch << ", step " << s
           << "); last finite losses: ";
        if (have_prev)
          os << "total=" << fmt(prev_total) << " bf=" << fmt(prev_bf)
             << " cnt_sum=" << fmt(prev_cnt);
        else
          os << "none";
        throw NumericalError(os.str());
      }

      backward(bundle.l_total);
      adam_step(opt, params, lr);
      for (auto& kv : params) kv.second.clear_grad();

      double cnt_sum = 0.0;
      for (double c : bundle.cnt_values) cnt_sum += c;
      sum_total += bundle.total_value;
      sum_bf += bundle.bf_value;
      sum_cnt += cnt_sum;
      prev_total = bundle.total_value;
      prev_bf = bundle.bf_value;
      prev_cnt = cnt_sum;
      have_prev = true;
      ++gstep;
    }

    EvalResult ev = evaluate(m, ds.test, cfg.train_modality);
    csv << epoch << "," << fmt(lr) << "," << fmt(sum_total / steps) << ","
        << fmt(sum_bf / steps) << "," << fmt(sum_cnt / steps) << ","
        << fmt(ev.fg_acc) << "," << fmt(ev.bg_acc) << ","
        << fmt(ev.retrieval_r1) << "\n";
    if (ev.fg_acc > best_fg) {
      best_fg = ev.fg_acc;
      log.best_epoch = epoch;
      log.best_eval = ev;
      log.best_model = clone_model(m);
      log.best_opt = clone_opt(opt);
    }
    log.final_eval = ev;
  }

  log.csv = csv.str();
  return log;
}

}  // namespace mavt
