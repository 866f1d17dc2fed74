#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "avm/tensor.hpp"

namespace avm {

using Rng = std::mt19937_64;

enum class Reduction { mean, std, max };

// Linear algebra
template <typename S> BasicTensor<S> matmul(const BasicTensor<S>& a, const BasicTensor<S>& b);
template <typename S> BasicTensor<S> transpose(const BasicTensor<S>& a);

// Elementwise (operands must have identical shapes)
template <typename S> BasicTensor<S> add(const BasicTensor<S>& a, const BasicTensor<S>& b);
template <typename S> BasicTensor<S> sub(const BasicTensor<S>& a, const BasicTensor<S>& b);
template <typename S> BasicTensor<S> mul(const BasicTensor<S>& a, const BasicTensor<S>& b);
template <typename S> BasicTensor<S> scale(const BasicTensor<S>& a, S factor);
// x[N,D] + b[D] broadcast over rows.
template <typename S> BasicTensor<S> add_row(const BasicTensor<S>& x, const BasicTensor<S>& b);

template <typename S> BasicTensor<S> relu(const BasicTensor<S>& x);
template <typename S> BasicTensor<S> sigmoid(const BasicTensor<S>& x);
template <typename S> BasicTensor<S> tanh(const BasicTensor<S>& x);
template <typename S> BasicTensor<S> square(const BasicTensor<S>& x);

// Reductions to a scalar of shape (1).
template <typename S> BasicTensor<S> sum(const BasicTensor<S>& x);
template <typename S> BasicTensor<S> mean(const BasicTensor<S>& x);

// Row-wise softmax of x / temperature, stabilized by row-max subtraction.
template <typename S> BasicTensor<S> softmax_rows(const BasicTensor<S>& x, S temperature);
template <typename S> BasicTensor<S> log_softmax_rows(const BasicTensor<S>& x, S temperature);

// Rows with norm below 1e-12 pass through unchanged.
template <typename S> BasicTensor<S> l2_normalize_rows(const BasicTensor<S>& x);

// Statistic over time of a single sequence x[T,D] -> [D]. std uses the
// population denominator T and requires T >= 2.
template <typename S> BasicTensor<S> reduce(const BasicTensor<S>& x, Reduction kind);
// Clip-major batch of sequences x[N*T,D] (row n*T+t) -> [N,D].
template <typename S> BasicTensor<S> pool_time(const BasicTensor<S>& x, std::size_t seq_len, Reduction kind);

// Inverted dropout; identity when !training or p == 0.
template <typename S> BasicTensor<S> dropout(const BasicTensor<S>& x, double p, bool training, Rng& rng);

// Structural ops
template <typename S> BasicTensor<S> reshape(const BasicTensor<S>& x, Shape shape);
template <typename S> BasicTensor<S> select_rows(const BasicTensor<S>& x, const std::vector<std::size_t>& rows);
template <typename S> BasicTensor<S> concat_rows(const std::vector<BasicTensor<S>>& parts);
template <typename S> BasicTensor<S> concat_cols(const std::vector<BasicTensor<S>>& parts);
template <typename S> BasicTensor<S> slice_cols(const BasicTensor<S>& x, std::size_t begin, std::size_t end);
template <typename S> BasicTensor<S> diagonal(const BasicTensor<S>& x);

// Normalization
template <typename S>
BasicTensor<S> layer_norm_rows(const BasicTensor<S>& x, const BasicTensor<S>& gamma, const BasicTensor<S>& beta,
                               S eps);
// Normalizes columns by batch statistics; writes the batch mean and
// population variance to the out-params.
template <typename S>
BasicTensor<S> batch_norm_train(const BasicTensor<S>& x, const BasicTensor<S>& gamma, const BasicTensor<S>& beta,
                                S eps, std::vector<S>& batch_mean, std::vector<S>& batch_var);
template <typename S>
BasicTensor<S> batch_norm_eval(const BasicTensor<S>& x, const BasicTensor<S>& gamma, const BasicTensor<S>& beta,
                               const std::vector<S>& running_mean, const std::vector<S>& running_var, S eps);

// Multi-head attention over clip-major sequence batches.
// q, k: [N*T, d]. Returns scaled scores [N*heads*T, T], row (n*heads+h)*T+i
// holding q_i . k_j / sqrt(d/heads) for head h of sequence n.
template <typename S>
BasicTensor<S> attention_scores(const BasicTensor<S>& q, const BasicTensor<S>& k, std::size_t seq_len,
                                std::size_t heads);
// weights: [N*heads*T, T], v: [N*T, d] -> concatenated head outputs [N*T, d].
template <typename S>
BasicTensor<S> attention_apply(const BasicTensor<S>& weights, const BasicTensor<S>& v, std::size_t seq_len,
                               std::size_t heads);

}  // namespace avm
