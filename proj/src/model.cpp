#include "mavt/model.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "mavt/errors.hpp"
#include "mavt/rng.hpp"

namespace mavt {

namespace {

constexpr std::uint64_t kBackboneVTag = 0x01;
constexpr std::uint64_t kBackboneATag = 0x02;
constexpr std::uint64_t kTokensTag = 0x03;
constexpr std::uint64_t kHeadsTag = 0x04;

std::vector<Tensor> backbone_tensors(const BackboneParams& bb) {
  std::vector<Tensor> out = {bb.patch_proj, bb.proj_bias, bb.pos_embed};
  for (const BlockParams& b : bb.blocks) {
    for (const Tensor& t : {b.ln1_g, b.ln1_b, b.wq, b.bq, b.wk, b.bk, b.wv,
                            b.bv, b.wo, b.bo, b.ln2_g, b.ln2_b, b.w1, b.b1,
                            b.w2, b.b2})
      out.push_back(t);
  }
  return out;
}

bool separate(const Model& m) {
  return m.bb_a.patch_proj.node() != m.bb_v.patch_proj.node();
}

void copy_into(Tensor& dst, const Tensor& src, const std::string& name) {
  if (dst.shape() != src.shape())
    throw FormatError("checkpoint: shape mismatch for " + name + ": have " +
                      shape_str(src.shape()) + ", config wants " +
                      shape_str(dst.shape()));
  auto d = dst.mutable_data();
  auto s = src.data();
  std::copy(s.begin(), s.end(), d.begin());
}

}  // namespace

Model init_model(const RunConfig& cfg) {
  validate_config(cfg);
  Model m;
  m.cfg = cfg;
  m.bb_v = init_backbone(cfg, Rng::mix(cfg.seed, kBackboneVTag));
  m.bb_a = cfg.separate_backbones
               ? init_backbone(cfg, Rng::mix(cfg.seed, kBackboneATag))
               : m.bb_v;
  m.bank = init_tokens(cfg, Rng::mix(cfg.seed, kTokensTag));
  m.heads = init_heads(cfg, Rng::mix(cfg.seed, kHeadsTag));
  return m;
}

std::vector<std::pair<std::string, Tensor>> collect_trainables(const Model& m) {
  auto out = bank_trainables(m.bank);
  for (auto& [name, t] : head_trainables(m.heads))
    out.emplace_back("heads/" + name, t);
  return out;
}

long long trainable_count(const Model& m) {
  long long n = 0;
  for (const auto& kv : collect_trainables(m))
    n += static_cast<long long>(kv.second.numel());
  return n;
}

long long frozen_count(const Model& m) {
  std::set<const Node*> seen;
  long long n = 0;
  auto walk = [&](const BackboneParams& bb) {
    for (const Tensor& t : backbone_tensors(bb))
      if (seen.insert(t.node()).second) n += static_cast<long long>(t.numel());
  };
  walk(m.bb_v);
  walk(m.bb_a);
  return n;
}

std::uint64_t frozen_checksum(const Model& m) {
  Record rec;
  add_backbone(rec, "frozen/v/", m.bb_v);
  if (separate(m)) add_backbone(rec, "frozen/a/", m.bb_a);
  return record_checksum(rec, "frozen/");
}

Record model_record(const Model& m, const OptimState* opt, int epoch) {
  Record rec;
  add_backbone(rec, "frozen/v/", m.bb_v);
  if (separate(m)) add_backbone(rec, "frozen/a/", m.bb_a);
  auto params = collect_trainables(m);
  for (const auto& [name, t] : params) rec.add("train/" + name, t);
  if (opt) {
    if (opt->m.size() != opt->names.size() ||
        opt->v.size() != opt->names.size())
      throw ContractError("model_record: ragged optimizer state");
    for (std::size_t i = 0; i < opt->names.size(); ++i) {
      bool known = false;
      for (const auto& [name, t] : params) known |= name == opt->names[i];
      if (!known)
        throw ContractError("model_record: optimizer buffer '" +
                            opt->names[i] + "' matches no trainable");
      rec.add("opt/m/" + opt->names[i], opt->m[i]);
      rec.add("opt/v/" + opt->names[i], opt->v[i]);
    }
    rec.add("opt/step", Tensor::from({1}, {static_cast<double>(opt->step)}));
  }
  rec.add("meta/epoch", Tensor::from({1}, {static_cast<double>(epoch)}));
  return rec;
}

Model model_from_record(const Record& rec, const RunConfig& cfg,
                        OptimState* opt, int* epoch) {
  Model m;
  m.cfg = cfg;
  m.bb_v = read_backbone(rec, "frozen/v/", cfg.depth, cfg.heads);
  bool has_a = rec.find("frozen/a/patch_proj") != nullptr;
  if (has_a != cfg.separate_backbones)
    throw FormatError("checkpoint: frozen sections disagree with "
                      "separate_backbones");
  m.bb_a = has_a ? read_backbone(rec, "frozen/a/", cfg.depth, cfg.heads)
                 : m.bb_v;
  m.bank = init_tokens(cfg, 0);
  m.heads = init_heads(cfg, 0);
  auto params = collect_trainables(m);
  for (auto& [name, t] : params)
    copy_into(t, rec.require("train/" + name), "train/" + name);
  if (opt) {
    *opt = OptimState{};
    if (const Tensor* step = rec.find("opt/step")) {
      opt->step = static_cast<long long>(step->item());
      for (const auto& [name, t] : params) {
        const Tensor* mm = rec.find("opt/m/" + name);
        if (!mm) continue;  // parameter was outside the optimized subset
        Tensor vv = rec.require("opt/v/" + name).clone();
        if (mm->shape() != t.shape() || vv.shape() != t.shape())
          throw FormatError("checkpoint: optimizer shape mismatch for " + name);
        opt->names.push_back(name);
        opt->m.push_back(mm->clone());
        opt->v.push_back(vv);
      }
    }
  }
  if (epoch) *epoch = static_cast<int>(rec.require("meta/epoch").item());
  return m;
}

void save_checkpoint(const std::string& path, const Model& m,
                     const OptimState* opt, int epoch) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("save_checkpoint: cannot open " + path);
  os << dump_config(m.cfg) << "\n";
  write_record(os, model_record(m, opt, epoch));
  if (!os) throw FormatError("save_checkpoint: write failed for " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("load_checkpoint: cannot open " + path);
  std::string text, line;
  while (std::getline(is, line)) {
    if (line.empty()) break;
    text += line;
    text += '\n';
  }
  if (text.empty())
    throw FormatError("load_checkpoint: missing config header in " + path);
  RunConfig cfg = parse_config_text(text);
  Record rec = read_record(is);
  LoadedCheckpoint out;
  out.has_opt = rec.find("opt/step") != nullptr;
  out.model = model_from_record(rec, cfg, out.has_opt ? &out.opt : nullptr,
                                &out.epoch);
  return out;
}

Model clone_model(const Model& m) {
  return model_from_record(model_record(m, nullptr, 0), m.cfg, nullptr,
                           nullptr);
}

}  // namespace mavt
