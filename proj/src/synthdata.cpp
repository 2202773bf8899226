#include "mavt/synthdata.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mavt/rng.hpp"
#include "mavt/serialize.hpp"

namespace mavt {

namespace {

constexpr std::uint64_t kVisualTag = 0x100;
constexpr std::uint64_t kAudioTag = 0x200;
constexpr std::uint64_t kTrainTag = 0x10000;
constexpr std::uint64_t kTestTag = 0x20000;
constexpr double kTwoPi = 6.283185307179586476925286766559;

// Sum of three random 2-D cosines; `channels` amplitude sets share the
// frequency/phase of each wave.
std::vector<double> cosine_field(Rng& rng, int channels, int h, int w) {
  struct Wave {
    double fy, fx, phase;
    std::vector<double> amp;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 3; ++i) {
    Wave wv;
    wv.fy = rng.uniform(0.5, 3.0);
    wv.fx = rng.uniform(0.5, 3.0);
    wv.phase = rng.uniform(0.0, kTwoPi);
    for (int c = 0; c < channels; ++c) wv.amp.push_back(rng.uniform(0.5, 1.5));
    waves.push_back(std::move(wv));
  }
  std::vector<double> field(static_cast<std::size_t>(channels) * h * w, 0.0);
  for (int c = 0; c < channels; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double v = 0.0;
        for (const Wave& wv : waves)
          v += wv.amp[static_cast<std::size_t>(c)] *
               std::cos(kTwoPi * (wv.fy * y / h + wv.fx * x / w) + wv.phase);
        field[(static_cast<std::size_t>(c) * h + y) * w + x] = v;
      }
  return field;
}

void minmax_01(std::vector<double>& v) {
  double lo = v[0], hi = v[0];
  for (double x : v) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  if (hi > lo)
    for (double& x : v) x = (x - lo) / (hi - lo);
  else
    for (double& x : v) x = 0.0;
}

double l2_distance(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("l2 distance requires matching shapes, got " +
                         shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  auto ad = a.data(), bd = b.data();
  double s = 0.0;
  for (std::size_t i = 0; i < ad.size(); ++i) {
    double d = ad[i] - bd[i];
    s += d * d;
  }
  return std::sqrt(s);
}

Tensor noisy(const Tensor& proto, double std, Rng& rng) {
  std::vector<double> out(proto.numel());
  auto pd = proto.data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = pd[i] + std * rng.normal();
  return Tensor::from(proto.shape(), std::move(out));
}

int bg_count(const SynthSpec& spec) {
  return static_cast<int>(spec.test_bg_ratio * spec.test_size);
}

PairedSample gen_one(const SynthSpec& spec, std::uint64_t sample_seed,
                     bool background) {
  Rng rng(sample_seed);
  PairedSample s;
  int C = spec.classes;
  int vc = rng.uniform_int(C);
  int ac = vc;
  if (background) {
    ac = (vc + 1 + rng.uniform_int(C - 1)) % C;
    s.y_b = 1;
  }
  s.y_f = vc;
  s.audio_class = ac;
  s.visual = noisy(spec.visual_protos[static_cast<std::size_t>(vc)],
                   spec.noise_std, rng);
  s.audio = noisy(spec.audio_protos[static_cast<std::size_t>(ac)],
                  spec.noise_std, rng);
  return s;
}

}  // namespace

SynthSpec make_synth_spec(const RunConfig& cfg) {
  SynthSpec spec;
  spec.classes = cfg.classes;
  spec.image_h = cfg.image_h;
  spec.image_w = cfg.image_w;
  spec.spec_f = cfg.spec_f;
  spec.spec_t = cfg.spec_t;
  spec.noise_std = cfg.noise_std;
  spec.train_size = cfg.train_size;
  spec.test_size = cfg.test_size;
  spec.test_bg_ratio = cfg.test_bg_ratio;
  spec.seed = cfg.seed;
  if (spec.classes < 2)
    throw ConfigError("make_synth_spec: need at least 2 classes");
  for (int c = 0; c < spec.classes; ++c) {
    Rng rv(Rng::mix(spec.seed, kVisualTag + static_cast<std::uint64_t>(c)));
    std::vector<double> vf = cosine_field(rv, 3, spec.image_h, spec.image_w);
    minmax_01(vf);
    spec.visual_protos.push_back(
        Tensor::from({3, spec.image_h, spec.image_w}, std::move(vf)));
    Rng ra(Rng::mix(spec.seed, kAudioTag + static_cast<std::uint64_t>(c)));
    spec.audio_protos.push_back(Tensor::from(
        {spec.spec_f, spec.spec_t},
        cosine_field(ra, 1, spec.spec_f, spec.spec_t)));
  }
  double floor_dist = 10.0 * spec.noise_std;
  for (int i = 0; i < spec.classes; ++i)
    for (int j = i + 1; j < spec.classes; ++j) {
      double dv = l2_distance(spec.visual_protos[static_cast<std::size_t>(i)],
                              spec.visual_protos[static_cast<std::size_t>(j)]);
      double da = l2_distance(spec.audio_protos[static_cast<std::size_t>(i)],
                              spec.audio_protos[static_cast<std::size_t>(j)]);
      if (dv <= floor_dist || da <= floor_dist)
        throw SamplingError(
            "make_synth_spec: prototypes " + std::to_string(i) + " and " +
            std::to_string(j) + " are closer than 10x the noise scale (" +
            std::to_string(std::min(dv, da)) + " vs " +
            std::to_string(floor_dist) + "); lower noise_std or reseed");
    }
  return spec;
}

Dataset gen_dataset(const SynthSpec& spec) {
  Dataset ds;
  for (int i = 0; i < spec.train_size; ++i)
    ds.train.push_back(gen_one(
        spec, Rng::mix(spec.seed, kTrainTag + static_cast<std::uint64_t>(i)),
        false));
  int n_bg = bg_count(spec);
  for (int i = 0; i < spec.test_size; ++i)
    ds.test.push_back(gen_one(
        spec, Rng::mix(spec.seed, kTestTag + static_cast<std::uint64_t>(i)),
        i < n_bg));
  return ds;
}

std::vector<PairedSample> sample_mismatch(
    const std::vector<PairedSample>& batch, double ratio, std::uint64_t seed) {
  if (ratio < 0.0 || ratio > 1.0)
    throw ConfigError("sample_mismatch: ratio must lie in [0,1], got " +
                      std::to_string(ratio));
  for (const PairedSample& s : batch)
    if (s.y_b != 0)
      throw ContractError("sample_mismatch: input batch must be foreground");
  std::vector<PairedSample> out = batch;
  int B = static_cast<int>(batch.size());
  int n_swap = static_cast<int>(ratio * B);
  if (ratio > 0.0) {
    bool multi_class = false;
    for (const PairedSample& s : batch)
      if (s.y_f != batch[0].y_f) {
        multi_class = true;
        break;
      }
    if (!multi_class)
      throw SamplingError(
          "sample_mismatch: batch holds a single class; no cross-class donor "
          "exists");
  }
  if (n_swap == 0) return out;
  Rng rng(seed);
  std::vector<int> order(static_cast<std::size_t>(B));
  for (int i = 0; i < B; ++i) order[static_cast<std::size_t>(i)] = i;
  rng.shuffle(order);
  for (int k = 0; k < n_swap; ++k) {
    int i = order[static_cast<std::size_t>(k)];
    int donor;
    do {
      donor = rng.uniform_int(B);
    } while (batch[static_cast<std::size_t>(donor)].y_f ==
             batch[static_cast<std::size_t>(i)].y_f);
    PairedSample& s = out[static_cast<std::size_t>(i)];
    s.audio = batch[static_cast<std::size_t>(donor)].audio;
    s.audio_class = batch[static_cast<std::size_t>(donor)].y_f;
    s.y_b = 1;
  }
  return out;
}

void save_sample(const std::string& path, const PairedSample& s) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("save_sample: cannot open " + path);
  os << s.y_b << "," << s.y_f << "\n";
  Record rec;
  rec.add("visual", s.visual);
  rec.add("audio", s.audio);
  write_record(os, rec);
  if (!os) throw FormatError("save_sample: write failed for " + path);
}

PairedSample load_sample(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("load_sample: cannot open " + path);
  std::string header;
  if (!std::getline(is, header))
    throw FormatError("load_sample: missing label header in " + path);
  PairedSample s;
  char comma = 0;
  std::istringstream hs(header);
  if (!(hs >> s.y_b >> comma >> s.y_f) || comma != ',' ||
      (s.y_b != 0 && s.y_b != 1) || s.y_f < 0)
    throw FormatError("load_sample: bad label header '" + header + "' in " +
                      path);
  Record rec = read_record(is);
  s.visual = rec.require("visual");
  s.audio = rec.require("audio");
  s.audio_class = s.y_f;  // source class is not persisted
  return s;
}

void write_dataset(const std::string& root, const Dataset& ds) {
  namespace fs = std::filesystem;
  auto write_split = [&](const std::string& name,
                         const std::vector<PairedSample>& split) {
    fs::path dir = fs::path(root) / name;
    fs::create_directories(dir);
    std::ofstream manifest(dir / "manifest.csv");
    if (!manifest)
      throw FormatError("write_dataset: cannot open manifest in " +
                        dir.string());
    manifest << "idx,y_b,y_f\n";
    for (std::size_t i = 0; i < split.size(); ++i) {
      save_sample((dir / (std::to_string(i) + ".mavt")).string(), split[i]);
      manifest << i << "," << split[i].y_b << "," << split[i].y_f << "\n";
    }
  };
  write_split("train", ds.train);
  write_split("test", ds.test);
}

Dataset read_dataset(const std::string& root) {
  namespace fs = std::filesystem;
  auto read_split = [&](const std::string& name) {
    fs::path dir = fs::path(root) / name;
    std::ifstream manifest(dir / "manifest.csv");
    if (!manifest)
      throw FormatError("read_dataset: missing manifest in " + dir.string());
    std::string line;
    if (!std::getline(manifest, line) || line != "idx,y_b,y_f")
      throw FormatError("read_dataset: bad manifest header in " +
                        dir.string());
    std::vector<PairedSample> split;
    while (std::getline(manifest, line)) {
      if (line.empty()) continue;
      std::istringstream ls(line);
      long long idx;
      int y_b, y_f;
      char c1, c2;
      if (!(ls >> idx >> c1 >> y_b >> c2 >> y_f) || c1 != ',' || c2 != ',' ||
          idx != static_cast<long long>(split.size()))
        throw FormatError("read_dataset: bad manifest line '" + line +
                          "' in " + dir.string());
      PairedSample s =
          load_sample((dir / (std::to_string(idx) + ".mavt")).string());
      if (s.y_b != y_b || s.y_f != y_f)
        throw FormatError("read_dataset: manifest disagrees with sample " +
                          std::to_string(idx) + " in " + dir.string());
      split.push_back(std::move(s));
    }
    return split;
  };
  Dataset ds;
  ds.train = read_split("train");
  ds.test = read_split("test");
  return ds;
}

std::uint64_t dataset_digest(const Dataset& ds) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto fold = [&](const std::vector<PairedSample>& split) {
    for (const PairedSample& s : split) {
      std::int32_t label[2] = {s.y_b, s.y_f};
      h = fnv1a64(label, sizeof label, h);
      auto vd = s.visual.data();
      h = fnv1a64(vd.data(), vd.size() * sizeof(double), h);
      auto ad = s.audio.data();
      h = fnv1a64(ad.data(), ad.size() * sizeof(double), h);
    }
  };
  fold(ds.train);
  fold(ds.test);
  return h;
}

int nearest_prototype(const SynthSpec& spec, const Tensor& x, bool visual) {
  const std::vector<Tensor>& protos =
      visual ? spec.visual_protos : spec.audio_protos;
  int best = 0;
  double best_d = l2_distance(x, protos[0]);
  for (int c = 1; c < spec.classes; ++c) {
    double d = l2_distance(x, protos[static_cast<std::size_t>(c)]);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

}  // namespace mavt
