#pragma once

#include <string>
#include <vector>

#include "avm/config.hpp"
#include "avm/data.hpp"
#include "avm/layers.hpp"

namespace avm {

// mean -> [D], mean_std -> [2D] (mean then population std), raw -> [T, D].
Tensor aggregate_features(const FeatureSequence& seq, Aggregation mode);

// Stacks a batch of same-shaped sequences into a branch input: [N, D] or
// [N, 2D] for the aggregated modes, clip-major [N*T, D] for raw.
template <typename S>
BasicTensor<S> branch_input(const std::vector<const FeatureSequence*>& seqs, Aggregation mode);

template <typename S>
struct BasicEmbeddingBatch {
  BasicTensor<S> audio;  // [N, embed_dim], unit rows
  BasicTensor<S> video;
  std::vector<std::string> clip_ids;
};
using EmbeddingBatch = BasicEmbeddingBatch<float>;

// Two independent branches mapping audio and video features into one
// L2-normalized embedding space.
//
// Without an encoder each branch is a stack of linear -> batchnorm -> ReLU ->
// dropout blocks over the hidden widths followed by a linear projection to
// embed_dim; raw sequences go through that stack frame by frame and are
// max-pooled over time. With an encoder the frames are projected to the
// encoder width, encoded, max-pooled, and passed through a linear -> ReLU ->
// dropout head.
template <typename S>
class DualBranchModel {
 public:
  explicit DualBranchModel(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  // Expected column count of branch_forward's input.
  std::size_t input_width(Modality m) const;

  BasicTensor<S> branch_forward(const BasicTensor<S>& x, Modality m, bool training, Rng& rng);

  NamedTensors<S> parameters() const;
  // Non-trainable state (batchnorm running statistics).
  NamedTensors<S> buffers() const;
  void collect(const std::string& prefix, NamedTensors<S>& params) const;

 private:
  struct Branch {
    std::vector<Linear<S>> hidden;
    std::vector<BatchNorm<S>> norms;
    Linear<S> output;
    Linear<S> projection;
    TransformerEncoder<S> transformer;
    BiLstmStack<S> lstm;
    Linear<S> head;
  };

  Branch make_branch(std::size_t feature_width, Rng& rng) const;
  void collect_branch(const Branch& b, const std::string& prefix, NamedTensors<S>& params) const;
  BasicTensor<S> fc_stack(Branch& b, const BasicTensor<S>& x, bool training, Rng& rng);

  ModelConfig config_;
  Branch audio_, video_;
};

template <typename S>
BasicEmbeddingBatch<S> embed_pair_batch(DualBranchModel<S>& model, const std::vector<const ClipPair*>& pairs,
                                        bool training, Rng& rng);

// Embeds sequences of one modality in eval mode.
template <typename S>
BasicTensor<S> embed_sequences(DualBranchModel<S>& model, const std::vector<const FeatureSequence*>& seqs,
                               Modality m);

// Embeds the batch and applies the configured objective. Structure terms use
// mean-aggregated features as the neighbour space, with K capped at N-1.
template <typename S>
BasicTensor<S> batch_loss(DualBranchModel<S>& model, const std::vector<const ClipPair*>& pairs, bool training,
                          Rng& rng);

}  // namespace avm
