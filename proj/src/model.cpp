#include "avm/model.hpp"

#include <algorithm>

namespace avm {

Tensor aggregate_features(const FeatureSequence& seq, Aggregation mode) {
  if (seq.frames == 0 || seq.width == 0) throw ShapeError("cannot aggregate an empty feature sequence");
  NoGradGuard no_grad;
  const auto x = seq.to_tensor();
  switch (mode) {
    case Aggregation::mean:
      return reduce(x, Reduction::mean);
    case Aggregation::mean_std: {
      auto mu = reduce(x, Reduction::mean);
      auto sd = reduce(x, Reduction::std);
      std::vector<float> both(mu.data().begin(), mu.data().end());
      both.insert(both.end(), sd.data().begin(), sd.data().end());
      return Tensor({2 * seq.width}, std::move(both));
    }
    case Aggregation::raw:
      return x;
  }
  return x;
}

template <typename S>
BasicTensor<S> branch_input(const std::vector<const FeatureSequence*>& seqs, Aggregation mode) {
  if (seqs.empty()) throw ShapeError("cannot build a branch input from an empty batch");
  const auto T = seqs[0]->frames, D = seqs[0]->width;
  std::vector<S> stacked;
  stacked.reserve(seqs.size() * T * D);
  for (const auto* s : seqs) {
    if (s->frames != T || s->width != D) {
      throw ShapeError("ragged batch: clip '" + s->clip_id + "' has shape (" + std::to_string(s->frames) + ", " +
                       std::to_string(s->width) + "), expected (" + std::to_string(T) + ", " + std::to_string(D) +
                       ")");
    }
    stacked.insert(stacked.end(), s->values.begin(), s->values.end());
  }
  BasicTensor<S> raw({seqs.size() * T, D}, std::move(stacked));
  if (mode == Aggregation::raw) return raw;
  NoGradGuard no_grad;
  auto mu = pool_time(raw, T, Reduction::mean);
  if (mode == Aggregation::mean) return mu;
  return concat_cols<S>({mu, pool_time(raw, T, Reduction::std)});
}

template <typename S>
DualBranchModel<S>::DualBranchModel(const ModelConfig& config) : config_(config) {
  if (config_.embed_dim == 0 || config_.seq_len == 0) throw ConfigError("model widths must be positive");
  Rng rng(config_.seed);
  audio_ = make_branch(config_.audio_dim, rng);
  video_ = make_branch(config_.video_dim, rng);
}

template <typename S>
std::size_t DualBranchModel<S>::input_width(Modality m) const {
  const auto d = m == Modality::audio ? config_.audio_dim : config_.video_dim;
  return config_.aggregation == Aggregation::mean_std ? 2 * d : d;
}

template <typename S>
typename DualBranchModel<S>::Branch DualBranchModel<S>::make_branch(std::size_t feature_width, Rng& rng) const {
  Branch b;
  const auto& c = config_;
  const std::size_t in = c.aggregation == Aggregation::mean_std ? 2 * feature_width : feature_width;
  switch (c.encoder) {
    case EncoderKind::none: {
      std::size_t width = in;
      for (auto h : c.hidden_widths) {
        b.hidden.emplace_back(width, h, rng);
        b.norms.emplace_back(h, static_cast<S>(c.bn_momentum));
        width = h;
      }
      b.output = Linear<S>(width, c.embed_dim, rng);
      break;
    }
    case EncoderKind::transformer:
      b.projection = Linear<S>(in, c.encoder_width, rng);
      b.transformer = TransformerEncoder<S>(c.encoder_layers, c.encoder_width, c.heads, c.ff_width, c.dropout, rng);
      b.head = Linear<S>(c.encoder_width, c.embed_dim, rng);
      break;
    case EncoderKind::lstm:
      b.projection = Linear<S>(in, c.encoder_width, rng);
      b.lstm = BiLstmStack<S>(c.encoder_width, c.lstm_hidden, c.lstm_layers, c.dropout, rng);
      b.head = Linear<S>(2 * c.lstm_hidden, c.embed_dim, rng);
      break;
  }
  return b;
}

template <typename S>
BasicTensor<S> DualBranchModel<S>::fc_stack(Branch& b, const BasicTensor<S>& x, bool training, Rng& rng) {
  auto h = x;
  for (std::size_t i = 0; i < b.hidden.size(); ++i) {
    h = b.norms[i].forward(b.hidden[i].forward(h), training);
    h = dropout(relu(h), config_.dropout, training, rng);
  }
  return b.output.forward(h);
}

template <typename S>
BasicTensor<S> DualBranchModel<S>::branch_forward(const BasicTensor<S>& x, Modality m, bool training, Rng& rng) {
  const auto want = input_width(m);
  if (x.rank() != 2 || x.dim(1) != want) {
    throw DimensionError(std::string(modality_name(m)) + " branch expects width " + std::to_string(want) +
                         ", got input " + shape_str(x.shape()));
  }
  auto& b = m == Modality::audio ? audio_ : video_;
  const auto T = config_.seq_len;
  if (config_.aggregation == Aggregation::raw && x.dim(0) % T != 0) {
    throw DimensionError("raw input " + shape_str(x.shape()) + " is not a batch of length-" + std::to_string(T) +
                         " sequences");
  }
  BasicTensor<S> pooled;
  switch (config_.encoder) {
    case EncoderKind::none: {
      auto out = fc_stack(b, x, training, rng);
      pooled = config_.aggregation == Aggregation::raw ? pool_time(out, T, Reduction::max) : out;
      break;
    }
    case EncoderKind::transformer:
    case EncoderKind::lstm: {
      auto h = b.projection.forward(x);
      h = config_.encoder == EncoderKind::transformer ? b.transformer.forward(h, T, training, rng)
                                                      : b.lstm.forward(h, T, training, rng);
      h = pool_time(h, T, Reduction::max);
      pooled = dropout(relu(b.head.forward(h)), config_.dropout, training, rng);
      break;
    }
  }
  return l2_normalize_rows(pooled);
}

template <typename S>
void DualBranchModel<S>::collect_branch(const Branch& b, const std::string& prefix, NamedTensors<S>& params) const {
  for (std::size_t i = 0; i < b.hidden.size(); ++i) {
    b.hidden[i].collect(prefix + ".fc" + std::to_string(i), params);
    b.norms[i].collect(prefix + ".bn" + std::to_string(i), params);
  }
  switch (config_.encoder) {
    case EncoderKind::none:
      b.output.collect(prefix + ".out", params);
      break;
    case EncoderKind::transformer:
      b.projection.collect(prefix + ".proj", params);
      b.transformer.collect(prefix + ".transformer", params);
      b.head.collect(prefix + ".head", params);
      break;
    case EncoderKind::lstm:
      b.projection.collect(prefix + ".proj", params);
      b.lstm.collect(prefix + ".lstm", params);
      b.head.collect(prefix + ".head", params);
      break;
  }
}

template <typename S>
void DualBranchModel<S>::collect(const std::string& prefix, NamedTensors<S>& params) const {
  const std::string p = prefix.empty() ? "" : prefix + ".";
  collect_branch(audio_, p + "audio", params);
  collect_branch(video_, p + "video", params);
}

template <typename S>
NamedTensors<S> DualBranchModel<S>::parameters() const {
  NamedTensors<S> params;
  collect("", params);
  return params;
}

template <typename S>
NamedTensors<S> DualBranchModel<S>::buffers() const {
  NamedTensors<S> out;
  for (const auto* b : {&audio_, &video_}) {
    const std::string prefix = b == &audio_ ? "audio" : "video";
    for (std::size_t i = 0; i < b->norms.size(); ++i) b->norms[i].collect_buffers(prefix + ".bn" + std::to_string(i), out);
  }
  return out;
}

namespace {

template <typename S>
void check_frames(const DualBranchModel<S>& model, const FeatureSequence& s) {
  const auto& c = model.config();
  const auto want_width = s.modality == Modality::audio ? c.audio_dim : c.video_dim;
  if (s.width != want_width) {
    throw ConfigError("clip '" + s.clip_id + "': " + modality_name(s.modality) + " width " + std::to_string(s.width) +
                      " does not match the model's " + std::to_string(want_width));
  }
  if (c.aggregation == Aggregation::raw && s.frames != c.seq_len) {
    throw ConfigError("clip '" + s.clip_id + "': " + std::to_string(s.frames) + " frames, model expects " +
                      std::to_string(c.seq_len));
  }
}

}  // namespace

template <typename S>
BasicEmbeddingBatch<S> embed_pair_batch(DualBranchModel<S>& model, const std::vector<const ClipPair*>& pairs,
                                        bool training, Rng& rng) {
  if (pairs.empty()) throw ShapeError("cannot embed an empty batch");
  std::vector<const FeatureSequence*> audio, video;
  BasicEmbeddingBatch<S> out;
  for (const auto* p : pairs) {
    check_frames(model, p->audio);
    check_frames(model, p->video);
    audio.push_back(&p->audio);
    video.push_back(&p->video);
    out.clip_ids.push_back(p->clip_id);
  }
  const auto mode = model.config().aggregation;
  out.audio = model.branch_forward(branch_input<S>(audio, mode), Modality::audio, training, rng);
  out.video = model.branch_forward(branch_input<S>(video, mode), Modality::video, training, rng);
  return out;
}

template <typename S>
BasicTensor<S> embed_sequences(DualBranchModel<S>& model, const std::vector<const FeatureSequence*>& seqs,
                               Modality m) {
  for (const auto* s : seqs) {
    if (s->modality != m) {
      throw ConfigError("clip '" + s->clip_id + "' is " + modality_name(s->modality) + ", expected " +
                        modality_name(m));
    }
    check_frames(model, *s);
  }
  NoGradGuard no_grad;
  Rng unused(0);
  return model.branch_forward(branch_input<S>(seqs, model.config().aggregation), m, false, unused);
}

template <typename S>
BasicTensor<S> batch_loss(DualBranchModel<S>& model, const std::vector<const ClipPair*>& pairs, bool training,
                          Rng& rng) {
  const auto batch = embed_pair_batch(model, pairs, training, rng);
  const auto sim = cosine_similarity_matrix(batch.audio, batch.video);
  const auto& cfg = model.config();
  if (cfg.loss_kind == LossKind::infonce) return infonce_loss(sim, cfg.loss.temperature, cfg.loss.symmetric);

  std::vector<const FeatureSequence*> audio, video;
  for (const auto* p : pairs) {
    audio.push_back(&p->audio);
    video.push_back(&p->video);
  }
  LossConfig loss = cfg.loss;
  loss.intra_k = std::min(loss.intra_k, pairs.size() - 1);
  if (loss.intra_k == 0) loss.structure_weight = 0.0;
  return vmnet_combined_loss(sim, branch_input<S>(audio, Aggregation::mean), branch_input<S>(video, Aggregation::mean),
                             batch.audio, batch.video, loss);
}

#define AVM_INSTANTIATE_MODEL(S)                                                                                   \
  template BasicTensor<S> branch_input<S>(const std::vector<const FeatureSequence*>&, Aggregation);               \
  template class DualBranchModel<S>;                                                                              \
  template BasicEmbeddingBatch<S> embed_pair_batch(DualBranchModel<S>&, const std::vector<const ClipPair*>&, bool, \
                                                   Rng&);                                                         \
  template BasicTensor<S> embed_sequences(DualBranchModel<S>&, const std::vector<const FeatureSequence*>&,         \
                                          Modality);                                                              \
  template BasicTensor<S> batch_loss(DualBranchModel<S>&, const std::vector<const ClipPair*>&, bool, Rng&);

AVM_INSTANTIATE_MODEL(float)
AVM_INSTANTIATE_MODEL(double)
AVM_INSTANTIATE_MODEL(long double)

}  // namespace avm
