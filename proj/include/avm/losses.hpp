#pragma once

#include <cstddef>
#include <vector>

#include "avm/tensor.hpp"

namespace avm {

struct LossConfig {
  double temperature = 0.07;
  bool symmetric = true;
  double margin = 0.2;
  std::size_t top_q = 200;
  std::size_t intra_k = 10;
  double structure_weight = 1.0;

  bool operator==(const LossConfig&) const = default;
};

// Entry (i, j) = <u_i, v_j> / (|u_i| |v_j|). Rows are the first modality.
template <typename S>
BasicTensor<S> cosine_similarity_matrix(const BasicTensor<S>& u, const BasicTensor<S>& v);

// Mean over rows of -log softmax(sim / tau)[i, i]. Symmetric mode averages the
// row-wise and column-wise losses.
template <typename S>
BasicTensor<S> infonce_loss(const BasicTensor<S>& sim, double temperature, bool symmetric);

// Hinge violations max(0, margin - s_ii + s_ij) for j != i, in both
// directions (rows: first->second, columns: second->first). Each direction
// averages its top_q largest positive violations (at least one term), and the
// loss is the mean of the two directions.
template <typename S>
BasicTensor<S> triplet_loss_mined(const BasicTensor<S>& sim, double margin, std::size_t top_q);

// Ranking hinge that preserves each anchor's K-nearest-neighbour ordering
// from input space. For anchor i and neighbours j, k with d_in(i,j) <
// d_in(i,k): max(0, d_emb(i,j) - d_emb(i,k)), averaged over all such terms.
// `inputs` carries no gradient; distances are Euclidean.
template <typename S>
BasicTensor<S> intra_modal_structure_loss(const BasicTensor<S>& inputs, const BasicTensor<S>& embeddings,
                                          std::size_t k);

// Distance-level form of the same hinge: both matrices are N x N pairwise
// distances (row-major). Exposed for oracle tests.
double structure_hinge_from_distances(const std::vector<double>& input_dist, const std::vector<double>& emb_dist,
                                      std::size_t n, std::size_t k);

// Triplet loss plus structure_weight times the two intra-modal terms.
template <typename S>
BasicTensor<S> vmnet_combined_loss(const BasicTensor<S>& sim, const BasicTensor<S>& audio_inputs,
                                   const BasicTensor<S>& video_inputs, const BasicTensor<S>& audio_emb,
                                   const BasicTensor<S>& video_emb, const LossConfig& cfg);

}  // namespace avm
