#include "avm/engine.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <numeric>
#include <sstream>

namespace avm {

const char* direction_name(Direction d) {
  return d == Direction::video_to_audio ? "video->audio" : "audio->video";
}

Direction parse_direction(const std::string& text) {
  if (text == "video->audio" || text == "v2a") return Direction::video_to_audio;
  if (text == "audio->video" || text == "a2v") return Direction::audio_to_video;
  throw ConfigError("unknown direction '" + text + "'; use video->audio (v2a) or audio->video (a2v)");
}

double RecallReport::at(std::size_t k) const {
  for (std::size_t i = 0; i < ks.size(); ++i)
    if (ks[i] == k) return recall[i];
  throw ParameterError("recall@" + std::to_string(k) + " was not evaluated");
}

double random_baseline(std::size_t k, std::size_t n) {
  if (k < 1 || k > n) {
    throw ParameterError("k must lie in [1, N]; got k=" + std::to_string(k) + ", N=" + std::to_string(n));
  }
  return static_cast<double>(k) / static_cast<double>(n);
}

std::vector<std::size_t> ks_up_to(std::size_t n, const std::vector<std::size_t>& ks) {
  std::vector<std::size_t> out;
  for (auto k : ks)
    if (k >= 1 && k <= n) out.push_back(k);
  return out;
}

template <typename S>
RecallReport evaluate_topk_recall(const BasicTensor<S>& audio, const BasicTensor<S>& video,
                                  const std::vector<std::size_t>& ks, Direction direction) {
  if (audio.rank() != 2 || audio.shape() != video.shape()) {
    throw ShapeError("recall needs aligned [N, D] embeddings, got " + shape_str(audio.shape()) + " and " +
                     shape_str(video.shape()));
  }
  const std::size_t n = audio.dim(0);
  if (ks.empty()) throw ParameterError("no k values to evaluate");
  RecallReport report;
  report.direction = direction;
  report.candidates = n;
  report.ks = ks;
  for (auto k : ks) report.random.push_back(random_baseline(k, n));

  NoGradGuard no_grad;
  const auto& queries = direction == Direction::video_to_audio ? video : audio;
  const auto& candidates = direction == Direction::video_to_audio ? audio : video;
  const auto sim = cosine_similarity_matrix(queries, candidates);
  const auto s = sim.data();

  // Rank of the positive: strictly better candidates, plus equal ones that
  // sit at a lower index.
  std::vector<std::size_t> hits(ks.size(), 0);
  for (std::size_t q = 0; q < n; ++q) {
    const S pos = s[q * n + q];
    std::size_t rank = 0;
    for (std::size_t c = 0; c < n; ++c) {
      const S v = s[q * n + c];
      if (v > pos || (v == pos && c < q)) ++rank;
    }
    for (std::size_t i = 0; i < ks.size(); ++i)
      if (rank < ks[i]) ++hits[i];
  }
  for (auto h : hits) report.recall.push_back(static_cast<double>(h) / static_cast<double>(n));
  return report;
}

RecallReport evaluate_topk_recall(const EmbeddingBatch& batch, const std::vector<std::size_t>& ks,
                                  Direction direction) {
  return evaluate_topk_recall(batch.audio, batch.video, ks, direction);
}

EmbeddingBatch embed_all(DualBranchModel<float>& model, const std::vector<ClipPair>& pairs) {
  std::vector<const ClipPair*> ptrs;
  for (const auto& p : pairs) ptrs.push_back(&p);
  NoGradGuard no_grad;
  Rng unused(0);
  return embed_pair_batch(model, ptrs, false, unused);
}

template <typename S>
void adam_step(BasicTrainerState<S>& state, NamedTensors<S>& params) {
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto& p : params) {
      state.m.push_back({p.name, BasicTensor<S>::zeros(p.tensor.shape())});
      state.v.push_back({p.name, BasicTensor<S>::zeros(p.tensor.shape())});
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].tensor.has_grad()) throw TrainingError("parameter '" + params[i].name + "' has no gradient");
    if (state.m[i].name != params[i].name || state.m[i].tensor.shape() != params[i].tensor.shape()) {
      throw TrainingError("optimizer moments do not match parameter '" + params[i].name + "'");
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].tensor.mutable_data();
    const auto g = params[i].tensor.grad();
    auto m = state.m[i].tensor.mutable_data();
    auto v = state.v[i].tensor.mutable_data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j];
      m[j] = static_cast<S>(state.beta1 * m[j] + (1.0 - state.beta1) * gj);
      v[j] = static_cast<S>(state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj);
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] = static_cast<S>(w[j] - state.lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

template void adam_step(BasicTrainerState<float>&, NamedTensors<float>&);
template void adam_step(BasicTrainerState<double>&, NamedTensors<double>&);

namespace {

std::string rng_text(const Rng& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

// Selection score: recall@k on the validation set, k clipped to its size.
std::optional<RecallReport> validate(DualBranchModel<float>& model, const std::vector<ClipPair>& val,
                                     const TrainOptions& o) {
  if (val.size() < 2) return std::nullopt;
  auto ks = ks_up_to(val.size());
  const auto select = std::min(o.select_k, val.size());
  if (std::find(ks.begin(), ks.end(), select) == ks.end()) {
    ks.push_back(select);
    std::sort(ks.begin(), ks.end());
  }
  return evaluate_topk_recall(embed_all(model, val), ks, o.direction);
}

double selection_score(const std::optional<RecallReport>& r, const TrainOptions& o) {
  return r ? r->at(std::min(o.select_k, r->candidates)) : -1.0;
}

// Breaks selection ties once recall@k saturates on a small validation set.
double tie_break_score(const std::optional<RecallReport>& r) {
  if (!r || r->recall.empty()) return -1.0;
  return std::accumulate(r->recall.begin(), r->recall.end(), 0.0) / static_cast<double>(r->recall.size());
}

}  // namespace

TrainResult train(const ModelConfig& config, const DatasetSplit& split, const TrainOptions& o) {
  if (split.train.size() < 2) {
    throw ConfigError("training needs at least 2 pairs, got " + std::to_string(split.train.size()));
  }
  if (o.batch_size < 2) throw ConfigError("batch size must be at least 2, got " + std::to_string(o.batch_size));
  ModelConfig cfg = config;
  cfg.seed = o.seed;
  DualBranchModel<float> model(cfg);
  auto params = model.parameters();

  TrainerState state;
  state.lr = o.lr;
  Rng rng(o.seed ^ 0x5bd1e995ULL);
  const std::size_t batch_size = std::min(o.batch_size, split.train.size());

  TrainResult result;
  auto record = [&](EpochLog entry) {
    if (o.on_epoch) o.on_epoch(entry);
    result.log.push_back(std::move(entry));
  };

  EpochLog initial;
  initial.val = validate(model, split.val, o);
  state.best_val_recall = selection_score(initial.val, o);
  double best_tie_break = tie_break_score(initial.val);
  state.rng_state = rng_text(rng);
  result.best = make_checkpoint(model, &state);
  record(std::move(initial));

  for (std::size_t epoch = 1; epoch <= o.epochs; ++epoch) {
    const auto batches = make_batches(split.train, batch_size, o.seed * 1000003ULL + epoch, false);
    double total = 0.0;
    std::size_t used = 0;
    for (const auto& batch : batches) {
      if (batch.size() < 2) continue;  // no negatives, and batchnorm needs two rows
      std::vector<const ClipPair*> ptrs;
      for (auto i : batch) ptrs.push_back(&split.train[i]);
      for (auto& p : params) p.tensor.zero_grad();
      const auto loss = batch_loss(model, ptrs, true, rng);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw TrainingError("loss diverged at step " + std::to_string(state.step + 1) + " (epoch " +
                            std::to_string(epoch) + ")");
      }
      loss.backward();
      adam_step(state, params);
      result.step_losses.push_back(value);
      total += value;
      ++used;
    }
    state.epoch = epoch;
    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = used ? total / static_cast<double>(used) : 0.0;
    entry.val = validate(model, split.val, o);
    const double score = selection_score(entry.val, o);
    const double tie_break = tie_break_score(entry.val);
    state.rng_state = rng_text(rng);
    if (entry.val && (score > state.best_val_recall || (score == state.best_val_recall && tie_break > best_tie_break))) {
      state.best_val_recall = score;
      best_tie_break = tie_break;
      result.best = make_checkpoint(model, &state);
    }
    record(std::move(entry));
  }
  result.last = make_checkpoint(model, &state);
  if (split.val.size() < 2) result.best = result.last;
  return result;
}

std::vector<Recommendation> recommend(DualBranchModel<float>& model, const FeatureSequence& query,
                                      const std::vector<FeatureSequence>& candidates, std::size_t top_k) {
  if (query.modality != Modality::video) throw ConfigError("recommendation queries must be video clips");
  if (top_k < 1 || top_k > candidates.size()) {
    throw ParameterError("top_k must lie in [1, " + std::to_string(candidates.size()) + "], got " +
                         std::to_string(top_k));
  }
  const auto q = embed_sequences(model, {&query}, Modality::video);
  std::vector<double> sims;
  const auto qd = q.data();
  for (const auto& c : candidates) {
    // One at a time: eval mode is row-independent and clip lengths may differ.
    const auto e = embed_sequences(model, {&c}, Modality::audio);
    const auto ed = e.data();
    double dot = 0.0, nq = 0.0, ne = 0.0;
    for (std::size_t j = 0; j < ed.size(); ++j) {
      dot += static_cast<double>(qd[j]) * ed[j];
      nq += static_cast<double>(qd[j]) * qd[j];
      ne += static_cast<double>(ed[j]) * ed[j];
    }
    const double denom = std::sqrt(nq) * std::sqrt(ne);
    sims.push_back(denom > 0.0 ? dot / denom : 0.0);
  }
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sims[a] > sims[b]; });
  std::vector<Recommendation> out;
  for (std::size_t i = 0; i < top_k; ++i) out.push_back({candidates[order[i]].clip_id, sims[order[i]]});
  return out;
}

std::string report_json(const RecallReport& r, const std::string& preset, std::uint64_t seed) {
  nlohmann::json j;
  j["preset"] = preset;
  j["seed"] = seed;
  j["direction"] = direction_name(r.direction);
  j["candidates"] = r.candidates;
  nlohmann::json recall = nlohmann::json::object(), random = nlohmann::json::object();
  for (std::size_t i = 0; i < r.ks.size(); ++i) {
    recall[std::to_string(r.ks[i])] = r.recall[i];
    random[std::to_string(r.ks[i])] = r.random[i];
  }
  j["recall"] = recall;
  j["random_baseline"] = random;
  return j.dump();
}

template RecallReport evaluate_topk_recall(const BasicTensor<float>&, const BasicTensor<float>&,
                                           const std::vector<std::size_t>&, Direction);
template RecallReport evaluate_topk_recall(const BasicTensor<double>&, const BasicTensor<double>&,
                                           const std::vector<std::size_t>&, Direction);

}  // namespace avm
