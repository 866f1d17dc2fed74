#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "avm/tensor.hpp"

namespace avm {

enum class Modality : std::uint8_t { audio = 0, video = 1 };

const char* modality_name(Modality m);

// One clip's per-frame features for one modality, row-major (frames, width).
struct FeatureSequence {
  std::string clip_id;
  Modality modality = Modality::audio;
  std::size_t frames = 0;
  std::size_t width = 0;
  std::vector<float> values;

  Tensor to_tensor() const;
  bool operator==(const FeatureSequence&) const = default;
};

struct ClipPair {
  std::string clip_id;
  std::string song_id;
  FeatureSequence audio;
  FeatureSequence video;
};

struct ManifestRecord {
  std::string clip_id;
  std::string song_id;
  std::string audio_path;
  std::string video_path;
};

using Manifest = std::vector<ManifestRecord>;

struct DatasetSplit {
  std::vector<ClipPair> train, val, test;
  std::array<double, 3> ratios{0.8, 0.1, 0.1};
};

// CMF1 feature files: "CMF1", u16 version (1), u8 modality, u32 frames,
// u32 width, then frames*width little-endian float32 values, row-major.
void write_feature_file(const FeatureSequence& seq, const std::filesystem::path& path);
// The file carries no clip id; it defaults to the file stem.
FeatureSequence read_feature_file(const std::filesystem::path& path, std::string clip_id = {});

// Tab-separated clip_id, song_id, audio_path, video_path; '#' lines are
// comments. Relative paths resolve against the manifest's directory.
Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);
// Rejects duplicate clip ids and paths that do not exist under base_dir.
void validate_manifest(const Manifest& manifest, const std::filesystem::path& base_dir);
// Validates, then reads every referenced file.
std::vector<ClipPair> load_pairs(const std::filesystem::path& manifest_path);

// Songs are shuffled by seed and assigned one at a time to the split with the
// largest remaining pair-count deficit (ties to the earlier split).
DatasetSplit split_by_song(const std::vector<ClipPair>& pairs, std::array<double, 3> ratios, std::uint64_t seed);

// Seeded shuffle into fixed-size batches of indices into `pairs`.
std::vector<std::vector<std::size_t>> make_batches(const std::vector<ClipPair>& pairs, std::size_t batch_size,
                                                   std::uint64_t seed, bool drop_last);

struct SynthOptions {
  std::size_t songs = 40;
  std::size_t clips_per_song = 8;
  std::size_t frames = 15;
  std::size_t vocab = 8;
  std::size_t audio_dim = 128;
  std::size_t video_dim = 1000;
  double noise = 0.1;
  bool order_critical = true;
  std::uint64_t seed = 0;
};

struct SynthDataset {
  std::vector<ClipPair> pairs;
  Manifest manifest;  // paths relative to the dataset directory
  std::vector<std::vector<std::size_t>> events;  // per clip, per frame
  std::vector<float> audio_mixing;  // row-major (audio_dim, vocab)
  std::vector<float> video_mixing;  // row-major (video_dim, vocab)
};

// Paired sequences driven by a shared event sequence: frame t of each
// modality is its mixing matrix applied to onehot(e_t) plus Gaussian noise.
// With order_critical every clip of a song permutes one event multiset.
SynthDataset synth_generate(const SynthOptions& options);

// Writes audio/ and video/ CMF1 files plus manifest.tsv under `dir`.
std::filesystem::path write_dataset(const SynthDataset& dataset, const std::filesystem::path& dir);

}  // namespace avm
