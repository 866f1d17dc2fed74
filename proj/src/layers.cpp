#include "avm/layers.hpp"

#include <cmath>

namespace avm {

namespace {

template <typename S>
BasicTensor<S> uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::vector<S> values(shape_numel(shape));
  for (auto& v : values) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    v = static_cast<S>((2.0 * u - 1.0) * bound);
  }
  return BasicTensor<S>(std::move(shape), std::move(values), true);
}

std::string join(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

}  // namespace

template <typename S>
Linear<S>::Linear(std::size_t in, std::size_t out, Rng& rng)
    : weight(uniform_tensor<S>({in, out}, std::sqrt(6.0 / static_cast<double>(in + out)), rng)),
      bias(BasicTensor<S>::zeros({out}, true)) {}

template <typename S>
BasicTensor<S> Linear<S>::forward(const BasicTensor<S>& x) const {
  if (x.rank() != 2 || x.dim(1) != in_features()) {
    throw DimensionError("linear layer expects width " + std::to_string(in_features()) + ", got input " +
                         shape_str(x.shape()));
  }
  return add_row(matmul(x, weight), bias);
}

template <typename S>
void Linear<S>::collect(const std::string& prefix, NamedTensors<S>& params) const {
  params.push_back({join(prefix, "weight"), weight});
  params.push_back({join(prefix, "bias"), bias});
}

template <typename S>
BatchNorm<S>::BatchNorm(std::size_t width, S momentum_, S eps_)
    : gamma(BasicTensor<S>::full({width}, S(1), true)),
      beta(BasicTensor<S>::zeros({width}, true)),
      running_mean(BasicTensor<S>::zeros({width})),
      running_var(BasicTensor<S>::full({width}, S(1))),
      momentum(momentum_),
      eps(eps_) {}

template <typename S>
BasicTensor<S> BatchNorm<S>::forward(const BasicTensor<S>& x, bool training) {
  if (!training) {
    const std::vector<S> rm(running_mean.data().begin(), running_mean.data().end());
    const std::vector<S> rv(running_var.data().begin(), running_var.data().end());
    return batch_norm_eval(x, gamma, beta, rm, rv, eps);
  }
  std::vector<S> batch_mean, batch_var;
  auto out = batch_norm_train(x, gamma, beta, eps, batch_mean, batch_var);
  const S n = static_cast<S>(x.dim(0));
  auto rm = running_mean.mutable_data();
  auto rv = running_var.mutable_data();
  for (std::size_t c = 0; c < rm.size(); ++c) {
    rm[c] = (S(1) - momentum) * rm[c] + momentum * batch_mean[c];
    rv[c] = (S(1) - momentum) * rv[c] + momentum * batch_var[c] * n / (n - S(1));
  }
  return out;
}

template <typename S>
void BatchNorm<S>::collect(const std::string& prefix, NamedTensors<S>& params) const {
  params.push_back({join(prefix, "gamma"), gamma});
  params.push_back({join(prefix, "beta"), beta});
}

template <typename S>
void BatchNorm<S>::collect_buffers(const std::string& prefix, NamedTensors<S>& buffers) const {
  buffers.push_back({join(prefix, "running_mean"), running_mean});
  buffers.push_back({join(prefix, "running_var"), running_var});
}

template <typename S>
LayerNorm<S>::LayerNorm(std::size_t width)
    : gamma(BasicTensor<S>::full({width}, S(1), true)), beta(BasicTensor<S>::zeros({width}, true)) {}

template <typename S>
void LayerNorm<S>::collect(const std::string& prefix, NamedTensors<S>& params) const {
  params.push_back({join(prefix, "gamma"), gamma});
  params.push_back({join(prefix, "beta"), beta});
}

template <typename S>
BasicTensor<S> positional_encoding(std::size_t length, std::size_t width) {
  if (width == 0 || width % 2 != 0) {
    throw ParameterError("positional encoding needs an even model width, got " + std::to_string(width));
  }
  if (length == 0) throw ParameterError("positional encoding needs a positive length");
  std::vector<S> table(length * width);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < width / 2; ++i) {
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(width));
      table[pos * width + 2 * i] = static_cast<S>(std::sin(angle));
      table[pos * width + 2 * i + 1] = static_cast<S>(std::cos(angle));
    }
  }
  return BasicTensor<S>({length, width}, std::move(table));
}

template <typename S>
MultiHeadAttention<S>::MultiHeadAttention(std::size_t width, std::size_t heads_, Rng& rng) : heads(heads_) {
  if (heads == 0 || width % heads != 0) {
    throw ParameterError("attention width " + std::to_string(width) + " is not divisible by " +
                         std::to_string(heads) + " heads");
  }
  query = Linear<S>(width, width, rng);
  key = Linear<S>(width, width, rng);
  value = Linear<S>(width, width, rng);
  output = Linear<S>(width, width, rng);
}

template <typename S>
BasicTensor<S> MultiHeadAttention<S>::forward(const BasicTensor<S>& x, std::size_t seq_len,
                                              BasicTensor<S>* weights) const {
  auto q = query.forward(x);
  auto k = key.forward(x);
  auto v = value.forward(x);
  auto attn = softmax_rows(attention_scores(q, k, seq_len, heads), S(1));
  if (weights) *weights = attn;
  return output.forward(attention_apply(attn, v, seq_len, heads));
}

template <typename S>
void MultiHeadAttention<S>::collect(const std::string& prefix, NamedTensors<S>& params) const {
  query.collect(join(prefix, "query"), params);
  key.collect(join(prefix, "key"), params);
  value.collect(join(prefix, "value"), params);
  output.collect(join(prefix, "output"), params);
}

template <typename S>
TransformerEncoderLayer<S>::TransformerEncoderLayer(std::size_t width, std::size_t heads, std::size_t ff_width,
                                                    double dropout_, Rng& rng)
    : attention(width, heads, rng),
      ff_in(width, ff_width, rng),
      ff_out(ff_width, width, rng),
      norm1(width),
      norm2(width),
      dropout(dropout_) {}

template <typename S>
BasicTensor<S> TransformerEncoderLayer<S>::forward(const BasicTensor<S>& x, std::size_t seq_len, bool training,
                                                   Rng& rng) const {
  auto attended = avm::dropout(attention.forward(x, seq_len), dropout, training, rng);
  auto h = norm1.forward(add(x, attended));
  auto inner = avm::dropout(relu(ff_in.forward(h)), dropout, training, rng);
  auto ff = avm::dropout(ff_out.forward(inner), dropout, training, rng);
  return norm2.forward(add(h, ff));
}

template <typename S>
void TransformerEncoderLayer<S>::collect(const std::string& prefix, NamedTensors<S>& params) const {
  attention.collect(join(prefix, "attn"), params);
  ff_in.collect(join(prefix, "ff_in"), params);
  ff_out.collect(join(prefix, "ff_out"), params);
  norm1.collect(join(prefix, "norm1"), params);
  norm2.collect(join(prefix, "norm2"), params);
}

template <typename S>
TransformerEncoder<S>::TransformerEncoder(std::size_t num_layers, std::size_t width, std::size_t heads,
                                          std::size_t ff_width, double dropout, Rng& rng) {
  if (width % 2 != 0) {
    throw ParameterError("transformer width must be even for positional encoding, got " + std::to_string(width));
  }
  layers.reserve(num_layers);
  for (std::size_t i = 0; i < num_layers; ++i) layers.emplace_back(width, heads, ff_width, dropout, rng);
}

template <typename S>
BasicTensor<S> TransformerEncoder<S>::forward(const BasicTensor<S>& x, std::size_t seq_len, bool training,
                                              Rng& rng) const {
  if (x.rank() != 2 || seq_len == 0 || x.dim(0) % seq_len != 0) {
    throw DimensionError("transformer input " + shape_str(x.shape()) + " is not a batch of length-" +
                         std::to_string(seq_len) + " sequences");
  }
  auto h = x;
  if (positional) {
    const auto width = x.dim(1);
    const auto table = positional_encoding<S>(seq_len, width);
    const auto clips = x.dim(0) / seq_len;
    std::vector<S> tiled;
    tiled.reserve(x.numel());
    for (std::size_t n = 0; n < clips; ++n) tiled.insert(tiled.end(), table.data().begin(), table.data().end());
    h = add(h, BasicTensor<S>(x.shape(), std::move(tiled)));
  }
  for (const auto& layer : layers) h = layer.forward(h, seq_len, training, rng);
  return h;
}

template <typename S>
void TransformerEncoder<S>::collect(const std::string& prefix, NamedTensors<S>& params) const {
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(join(prefix, "layer" + std::to_string(i)), params);
}

template <typename S>
LstmDirection<S>::LstmDirection(std::size_t in, std::size_t hidden, Rng& rng) : input(in, 4 * hidden, rng) {
  recurrent = uniform_tensor<S>({hidden, 4 * hidden}, std::sqrt(6.0 / static_cast<double>(5 * hidden)), rng);
  auto b = input.bias.mutable_data();
  for (std::size_t j = hidden; j < 2 * hidden; ++j) b[j] = S(1);
}

template <typename S>
BasicTensor<S> LstmDirection<S>::forward(const BasicTensor<S>& x, std::size_t seq_len, bool reverse) const {
  if (x.rank() != 2 || seq_len == 0 || x.dim(0) % seq_len != 0) {
    throw DimensionError("LSTM input " + shape_str(x.shape()) + " is not a batch of length-" +
                         std::to_string(seq_len) + " sequences");
  }
  const auto T = seq_len, clips = x.dim(0) / T, h = hidden();
  auto projected = input.forward(x);  // [N*T, 4h]

  std::vector<BasicTensor<S>> states(T);
  BasicTensor<S> h_prev, c_prev;
  for (std::size_t step = 0; step < T; ++step) {
    const std::size_t t = reverse ? T - 1 - step : step;
    std::vector<std::size_t> rows(clips);
    for (std::size_t n = 0; n < clips; ++n) rows[n] = n * T + t;
    auto gates = select_rows(projected, rows);
    if (step > 0) gates = add(gates, matmul(h_prev, recurrent));
    auto in_gate = sigmoid(slice_cols(gates, 0, h));
    auto forget_gate = sigmoid(slice_cols(gates, h, 2 * h));
    auto candidate = tanh(slice_cols(gates, 2 * h, 3 * h));
    auto out_gate = sigmoid(slice_cols(gates, 3 * h, 4 * h));
    auto c = mul(in_gate, candidate);
    if (step > 0) c = add(mul(forget_gate, c_prev), c);
    h_prev = mul(out_gate, tanh(c));
    c_prev = c;
    states[t] = h_prev;
  }
  // states are time-major (row t*N+n); restore clip-major order.
  auto stacked = concat_rows(states);
  std::vector<std::size_t> order(clips * T);
  for (std::size_t n = 0; n < clips; ++n)
    for (std::size_t t = 0; t < T; ++t) order[n * T + t] = t * clips + n;
  return select_rows(stacked, order);
}

template <typename S>
void LstmDirection<S>::collect(const std::string& prefix, NamedTensors<S>& params) const {
  input.collect(join(prefix, "input"), params);
  params.push_back({join(prefix, "recurrent"), recurrent});
}

template <typename S>
BasicTensor<S> BiLstmLayer<S>::forward(const BasicTensor<S>& x, std::size_t seq_len) const {
  return concat_cols<S>({forward_dir.forward(x, seq_len, false), backward_dir.forward(x, seq_len, true)});
}

template <typename S>
BiLstmStack<S>::BiLstmStack(std::size_t in, std::size_t hidden, std::size_t num_layers, double dropout_, Rng& rng)
    : dropout(dropout_) {
  if (num_layers == 0) throw ParameterError("LSTM stack needs at least one layer");
  for (std::size_t i = 0; i < num_layers; ++i) {
    const std::size_t width = i == 0 ? in : 2 * hidden;
    BiLstmLayer<S> layer;
    layer.forward_dir = LstmDirection<S>(width, hidden, rng);
    layer.backward_dir = LstmDirection<S>(width, hidden, rng);
    layers.push_back(std::move(layer));
  }
}

template <typename S>
BasicTensor<S> BiLstmStack<S>::forward(const BasicTensor<S>& x, std::size_t seq_len, bool training, Rng& rng) const {
  if (x.rank() != 2 || x.dim(1) != input_width()) {
    throw DimensionError("LSTM stack expects width " + std::to_string(input_width()) + ", got " +
                         shape_str(x.shape()));
  }
  auto h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i > 0) h = avm::dropout(h, dropout, training, rng);
    h = layers[i].forward(h, seq_len);
  }
  return h;
}

template <typename S>
void BiLstmStack<S>::collect(const std::string& prefix, NamedTensors<S>& params) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].forward_dir.collect(join(prefix, "layer" + std::to_string(i) + ".fwd"), params);
    layers[i].backward_dir.collect(join(prefix, "layer" + std::to_string(i) + ".bwd"), params);
  }
}

#define AVM_INSTANTIATE_LAYERS(S)                                          \
  template struct Linear<S>;                                               \
  template struct BatchNorm<S>;                                            \
  template struct LayerNorm<S>;                                            \
  template BasicTensor<S> positional_encoding<S>(std::size_t, std::size_t); \
  template struct MultiHeadAttention<S>;                                   \
  template struct TransformerEncoderLayer<S>;                              \
  template struct TransformerEncoder<S>;                                   \
  template struct LstmDirection<S>;                                        \
  template struct BiLstmLayer<S>;                                          \
  template struct BiLstmStack<S>;

AVM_INSTANTIATE_LAYERS(float)
AVM_INSTANTIATE_LAYERS(double)
AVM_INSTANTIATE_LAYERS(long double)

}  // namespace avm
