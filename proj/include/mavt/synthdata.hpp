#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mavt/config.hpp"
#include "mavt/tensor.hpp"

namespace mavt {

// Reference STFT geometry of the real pipeline this stands in for; the
// generator never computes one.
inline constexpr int kStftWindow = 512;
inline constexpr int kStftOverlap = 353;

// Per-class prototypes plus the sampling knobs. Prototypes are sums of three
// seeded 2-D cosines — low-frequency structure that patch attention can
// exploit — with the visual field min-max normalized to [0,1] and the audio
// field left unclamped like a log-spectrogram.
struct SynthSpec {
  int classes = 0;
  int image_h = 0, image_w = 0;
  int spec_f = 0, spec_t = 0;
  double noise_std = 0.0;
  int train_size = 0, test_size = 0;
  double test_bg_ratio = 0.0;
  std::uint64_t seed = 0;
  std::vector<Tensor> visual_protos;  // each [3, H, W]
  std::vector<Tensor> audio_protos;   // each [F, T]
};

// Builds prototypes and enforces the separation invariant: every pairwise
// prototype distance must exceed 10x the noise scale, else SamplingError.
SynthSpec make_synth_spec(const RunConfig& cfg);

struct PairedSample {
  Tensor visual;  // [3, H, W]
  Tensor audio;   // [F, T]
  int y_b = 0;
  int y_f = 0;          // visual source class
  int audio_class = 0;  // audio source class; not persisted
};

struct Dataset {
  std::vector<PairedSample> train;  // foreground only
  std::vector<PairedSample> test;   // leading floor(ratio x size) are y_b=1
};

// Deterministic per-sample generation: each sample draws from an Rng seeded
// by mix(spec.seed, split tag + index), so splits never share noise.
Dataset gen_dataset(const SynthSpec& spec);

// Replaces floor(ratio x B) samples' audio with a donor from a different
// class, labeling them y_b=1 (synthetic background pairs). Input batch must
// be foreground; a single-class batch cannot host a swap.
std::vector<PairedSample> sample_mismatch(
    const std::vector<PairedSample>& batch, double ratio, std::uint64_t seed);

// One text line "y_b,y_f" followed by the binary tensor record.
void save_sample(const std::string& path, const PairedSample& s);
PairedSample load_sample(const std::string& path);

// <root>/{train,test}/<idx>.mavt plus a per-split manifest.csv of
// "idx,y_b,y_f" lines.
void write_dataset(const std::string& root, const Dataset& ds);
Dataset read_dataset(const std::string& root);

// 64-bit digest over every payload and label, in storage order.
std::uint64_t dataset_digest(const Dataset& ds);

// Index of the nearest prototype in raw L2 distance (the learnability
// ceiling any trained model is judged against).
int nearest_prototype(const SynthSpec& spec, const Tensor& x, bool visual);

}  // namespace mavt
