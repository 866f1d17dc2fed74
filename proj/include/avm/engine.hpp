#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "avm/model.hpp"

namespace avm {

enum class Direction { video_to_audio, audio_to_video };

const char* direction_name(Direction d);  // "video->audio"
// Accepts "video->audio", "v2a", "audio->video", "a2v".
Direction parse_direction(const std::string& text);

inline const std::vector<std::size_t> kDefaultKs{1, 5, 10, 25, 50};

struct RecallReport {
  Direction direction = Direction::video_to_audio;
  std::size_t candidates = 0;
  std::vector<std::size_t> ks;
  std::vector<double> recall;  // fraction of queries, per k
  std::vector<double> random;  // k / N, per k

  // Throws ParameterError if k was not evaluated.
  double at(std::size_t k) const;
};

// Probability that the positive lands in a uniformly random top-k of n.
double random_baseline(std::size_t k, std::size_t n);

// Row i of `audio` and `video` is an aligned pair. Queries come from the
// direction's source modality; candidates are ranked by cosine similarity,
// ties to the lower index.
template <typename S>
RecallReport evaluate_topk_recall(const BasicTensor<S>& audio, const BasicTensor<S>& video,
                                  const std::vector<std::size_t>& ks, Direction direction);
RecallReport evaluate_topk_recall(const EmbeddingBatch& batch, const std::vector<std::size_t>& ks,
                                  Direction direction);

// The default grid restricted to k <= n.
std::vector<std::size_t> ks_up_to(std::size_t n, const std::vector<std::size_t>& ks = kDefaultKs);

// Embeds every pair in eval mode.
EmbeddingBatch embed_all(DualBranchModel<float>& model, const std::vector<ClipPair>& pairs);

template <typename S>
struct BasicTrainerState {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  NamedTensors<S> m, v;  // same names and shapes as the parameters
  std::string rng_state;
  double best_val_recall = -1.0;
};
using TrainerState = BasicTrainerState<float>;

// One bias-corrected Adam update. Moments are created on the first call.
template <typename S>
void adam_step(BasicTrainerState<S>& state, NamedTensors<S>& params);

struct Checkpoint {
  static constexpr std::uint16_t kVersion = 1;

  ModelConfig config;
  NamedTensors<float> tensors;  // parameters, then batchnorm buffers
  std::optional<TrainerState> trainer;
};

Checkpoint make_checkpoint(const DualBranchModel<float>& model, const TrainerState* trainer = nullptr);
// Rebuilds the model and copies every tensor in. Missing, extra, or
// misshapen tensors raise CorruptionError.
DualBranchModel<float> restore_model(const Checkpoint& checkpoint);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct EpochLog {
  std::size_t epoch = 0;          // 0 is the initial evaluation
  double train_loss = 0.0;        // mean over batches; 0 for epoch 0
  std::optional<RecallReport> val;
};

struct TrainOptions {
  std::size_t epochs = 10;
  std::size_t batch_size = 128;  // clipped to the training set size
  std::uint64_t seed = 0;        // model init and batch order
  double lr = 1e-4;
  Direction direction = Direction::video_to_audio;
  std::size_t select_k = 10;     // validation recall@k used for model selection
  std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
  // Highest validation recall@select_k, ties to the higher mean recall over
  // the k grid; the last checkpoint when there is no validation set.
  Checkpoint best;
  Checkpoint last;
  std::vector<EpochLog> log;
  std::vector<double> step_losses;
};

TrainResult train(const ModelConfig& config, const DatasetSplit& split, const TrainOptions& options);

struct Recommendation {
  std::string clip_id;
  double similarity = 0.0;
};

// Ranks audio candidates for a video query in eval mode.
std::vector<Recommendation> recommend(DualBranchModel<float>& model, const FeatureSequence& query,
                                      const std::vector<FeatureSequence>& candidates, std::size_t top_k);

// One JSON object per run.
std::string report_json(const RecallReport& report, const std::string& preset, std::uint64_t seed);

}  // namespace avm
