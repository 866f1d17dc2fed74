#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "avm/ops.hpp"
#include "avm/tensor.hpp"

namespace avm {

template <typename S>
struct NamedTensor {
  std::string name;
  BasicTensor<S> tensor;
};

template <typename S>
using NamedTensors = std::vector<NamedTensor<S>>;

template <typename S>
std::size_t count_scalars(const NamedTensors<S>& tensors) {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.tensor.numel();
  return n;
}

// Uniform(-sqrt(6/(in+out)), +sqrt(6/(in+out))) weights and zero bias.
template <typename S>
struct Linear {
  BasicTensor<S> weight;  // [in, out]
  BasicTensor<S> bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng);

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  BasicTensor<S> forward(const BasicTensor<S>& x) const;
  void collect(const std::string& prefix, NamedTensors<S>& params) const;
};

template <typename S>
struct BatchNorm {
  BasicTensor<S> gamma, beta;
  // Running statistics are buffers: serialized, never trained.
  BasicTensor<S> running_mean, running_var;
  S momentum = S(0.1);
  S eps = S(1e-5);

  BatchNorm() = default;
  explicit BatchNorm(std::size_t width, S momentum = S(0.1), S eps = S(1e-5));

  // Training mode normalizes by batch statistics and folds them into the
  // running estimates: r <- (1 - momentum) r + momentum * batch, with the
  // unbiased batch variance.
  BasicTensor<S> forward(const BasicTensor<S>& x, bool training);
  void collect(const std::string& prefix, NamedTensors<S>& params) const;
  void collect_buffers(const std::string& prefix, NamedTensors<S>& buffers) const;
};

template <typename S>
struct LayerNorm {
  BasicTensor<S> gamma, beta;
  S eps = S(1e-5);

  LayerNorm() = default;
  explicit LayerNorm(std::size_t width);

  BasicTensor<S> forward(const BasicTensor<S>& x) const { return layer_norm_rows(x, gamma, beta, eps); }
  void collect(const std::string& prefix, NamedTensors<S>& params) const;
};

// Sinusoidal table: PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(...).
template <typename S>
BasicTensor<S> positional_encoding(std::size_t length, std::size_t width);

template <typename S>
struct MultiHeadAttention {
  std::size_t heads = 1;
  Linear<S> query, key, value, output;

  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t width, std::size_t heads, Rng& rng);

  // Full bidirectional self-attention within each length-`seq_len` clip of
  // the clip-major batch x[N*T, d]. If `weights` is non-null it receives the
  // softmaxed attention rows [N*heads*T, T].
  BasicTensor<S> forward(const BasicTensor<S>& x, std::size_t seq_len, BasicTensor<S>* weights = nullptr) const;
  void collect(const std::string& prefix, NamedTensors<S>& params) const;
};

// Post-norm encoder block: LN(x + drop(attn(x))), then LN(h + drop(ff(h))).
template <typename S>
struct TransformerEncoderLayer {
  MultiHeadAttention<S> attention;
  Linear<S> ff_in, ff_out;
  LayerNorm<S> norm1, norm2;
  double dropout = 0.1;

  TransformerEncoderLayer() = default;
  TransformerEncoderLayer(std::size_t width, std::size_t heads, std::size_t ff_width, double dropout, Rng& rng);

  BasicTensor<S> forward(const BasicTensor<S>& x, std::size_t seq_len, bool training, Rng& rng) const;
  void collect(const std::string& prefix, NamedTensors<S>& params) const;
};

template <typename S>
struct TransformerEncoder {
  std::vector<TransformerEncoderLayer<S>> layers;
  bool positional = true;

  TransformerEncoder() = default;
  TransformerEncoder(std::size_t num_layers, std::size_t width, std::size_t heads, std::size_t ff_width,
                     double dropout, Rng& rng);

  // Adds the positional table once, then runs every layer.
  BasicTensor<S> forward(const BasicTensor<S>& x, std::size_t seq_len, bool training, Rng& rng) const;
  void collect(const std::string& prefix, NamedTensors<S>& params) const;
};

// One recurrent direction. Gate column blocks are ordered input, forget,
// candidate, output; the forget block of the bias starts at 1.
template <typename S>
struct LstmDirection {
  Linear<S> input;          // [in, 4h] with bias
  BasicTensor<S> recurrent;  // [h, 4h]

  LstmDirection() = default;
  LstmDirection(std::size_t in, std::size_t hidden, Rng& rng);

  std::size_t hidden() const { return recurrent.dim(0); }
  // Returns hidden states [N*T, h] in clip-major order.
  BasicTensor<S> forward(const BasicTensor<S>& x, std::size_t seq_len, bool reverse) const;
  void collect(const std::string& prefix, NamedTensors<S>& params) const;
};

template <typename S>
struct BiLstmLayer {
  LstmDirection<S> forward_dir, backward_dir;

  BasicTensor<S> forward(const BasicTensor<S>& x, std::size_t seq_len) const;
};

template <typename S>
struct BiLstmStack {
  std::vector<BiLstmLayer<S>> layers;
  double dropout = 0.1;

  BiLstmStack() = default;
  BiLstmStack(std::size_t in, std::size_t hidden, std::size_t num_layers, double dropout, Rng& rng);

  std::size_t input_width() const { return layers.front().forward_dir.input.in_features(); }
  std::size_t output_width() const { return 2 * layers.front().forward_dir.hidden(); }
  // x[N*T, in] -> [N*T, 2h]; dropout between layers in training mode.
  BasicTensor<S> forward(const BasicTensor<S>& x, std::size_t seq_len, bool training, Rng& rng) const;
  void collect(const std::string& prefix, NamedTensors<S>& params) const;
};

// Exact count of trainable scalars of anything exposing collect().
template <template <typename> class Layer, typename S>
std::size_t param_count(const Layer<S>& layer) {
  NamedTensors<S> params;
  layer.collect("", params);
  return count_scalars(params);
}

}  // namespace avm
