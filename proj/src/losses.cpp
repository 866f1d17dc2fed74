#include "avm/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>
#include <type_traits>

#include "avm/ops.hpp"

namespace avm {

namespace {

// Fused losses accumulate in at least double precision.
template <typename S>
using Acc = std::common_type_t<S, double>;

}  // namespace

template <typename S>
BasicTensor<S> cosine_similarity_matrix(const BasicTensor<S>& u, const BasicTensor<S>& v) {
  if (u.rank() != 2 || v.rank() != 2 || u.dim(1) != v.dim(1)) {
    throw DimensionError("cosine similarity needs equal embedding widths, got " + shape_str(u.shape()) + " and " +
                         shape_str(v.shape()));
  }
  return matmul(l2_normalize_rows(u), transpose(l2_normalize_rows(v)));
}

template <typename S>
BasicTensor<S> infonce_loss(const BasicTensor<S>& sim, double temperature, bool symmetric) {
  if (sim.rank() != 2 || sim.dim(0) != sim.dim(1)) {
    throw ShapeError("InfoNCE needs a square similarity matrix, got " + shape_str(sim.shape()));
  }
  if (!(temperature > 0)) throw ParameterError("InfoNCE temperature must be positive");
  const S tau = static_cast<S>(temperature);
  auto rows = scale(mean(diagonal(log_softmax_rows(sim, tau))), S(-1));
  if (!symmetric) return rows;
  auto cols = scale(mean(diagonal(log_softmax_rows(transpose(sim), tau))), S(-1));
  return scale(add(rows, cols), S(0.5));
}

template <typename S>
BasicTensor<S> triplet_loss_mined(const BasicTensor<S>& sim, double margin, std::size_t top_q) {
  if (sim.rank() != 2 || sim.dim(0) != sim.dim(1)) {
    throw ShapeError("triplet loss needs a square similarity matrix, got " + shape_str(sim.shape()));
  }
  const auto n = sim.dim(0);
  if (n < 2) throw DegenerateInputError("triplet loss needs at least 2 pairs for in-batch negatives");
  if (top_q == 0) throw ParameterError("triplet loss top_q must be at least 1");

  using A = Acc<S>;
  struct Term {
    A value;
    std::size_t anchor_pos;  // flat index of s_ii
    std::size_t negative;    // flat index of the negative similarity
  };
  const auto s = sim.data();
  const std::size_t q = std::min(top_q, n * (n - 1));
  std::vector<Term> selected;
  A loss = 0;
  for (int direction = 0; direction < 2; ++direction) {
    std::vector<Term> terms;
    terms.reserve(n * (n - 1));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        const std::size_t neg = direction == 0 ? i * n + j : j * n + i;
        const A v = std::max(A(0), static_cast<A>(margin) - static_cast<A>(s[i * n + i]) + static_cast<A>(s[neg]));
        terms.push_back({v, i * n + i, neg});
      }
    std::stable_sort(terms.begin(), terms.end(), [](const Term& a, const Term& b) { return a.value > b.value; });
    A total = 0;
    for (std::size_t t = 0; t < q; ++t) {
      total += terms[t].value;
      if (terms[t].value > 0) selected.push_back(terms[t]);
    }
    loss += A(0.5) * total / static_cast<A>(q);
  }
  const S weight = static_cast<S>(A(0.5) / static_cast<A>(q));
  return detail::make_result<S>({1}, {static_cast<S>(loss)}, {sim}, [selected, weight](detail::Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (const auto& t : selected) {
      g[t.negative] += self.grad[0] * weight;
      g[t.anchor_pos] -= self.grad[0] * weight;
    }
  });
}

namespace {

// (anchor, closer, farther) triples over each anchor's K nearest neighbours,
// keeping only strictly ordered neighbour pairs.
template <typename A>
std::vector<std::tuple<std::size_t, std::size_t, std::size_t>> ordered_neighbor_pairs(const std::vector<A>& input_dist,
                                                                                    std::size_t n, std::size_t k) {
  if (k == 0 || n <= k) {
    throw ParameterError("intra-modal structure loss needs N > K >= 1, got N=" + std::to_string(n) +
                         " K=" + std::to_string(k));
  }
  std::vector<std::tuple<std::size_t, std::size_t, std::size_t>> triples;
  std::vector<std::size_t> others;
  for (std::size_t i = 0; i < n; ++i) {
    others.clear();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) others.push_back(j);
    const A* row = input_dist.data() + i * n;
    std::stable_sort(others.begin(), others.end(), [row](std::size_t a, std::size_t b) { return row[a] < row[b]; });
    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t b = a + 1; b < k; ++b)
        if (row[others[a]] < row[others[b]]) triples.emplace_back(i, others[a], others[b]);
  }
  return triples;
}

template <typename S>
std::vector<Acc<S>> pairwise_distances(std::span<const S> x, std::size_t n, std::size_t d) {
  using A = Acc<S>;
  std::vector<A> dist(n * n, A(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      A sq = 0;
      for (std::size_t c = 0; c < d; ++c) {
        const A diff = static_cast<A>(x[i * d + c]) - static_cast<A>(x[j * d + c]);
        sq += diff * diff;
      }
      dist[i * n + j] = dist[j * n + i] = std::sqrt(sq);
    }
  return dist;
}

}  // namespace

double structure_hinge_from_distances(const std::vector<double>& input_dist, const std::vector<double>& emb_dist,
                                      std::size_t n, std::size_t k) {
  if (input_dist.size() != n * n || emb_dist.size() != n * n) {
    throw DimensionError("distance matrices must be " + std::to_string(n) + " x " + std::to_string(n));
  }
  const auto triples = ordered_neighbor_pairs(input_dist, n, k);
  if (triples.empty()) return 0.0;
  double total = 0.0;
  for (auto [i, j, l] : triples) total += std::max(0.0, emb_dist[i * n + j] - emb_dist[i * n + l]);
  return total / static_cast<double>(triples.size());
}

template <typename S>
BasicTensor<S> intra_modal_structure_loss(const BasicTensor<S>& inputs, const BasicTensor<S>& embeddings,
                                          std::size_t k) {
  if (inputs.rank() != 2 || embeddings.rank() != 2 || inputs.dim(0) != embeddings.dim(0)) {
    throw DimensionError("structure loss: inputs " + shape_str(inputs.shape()) + " and embeddings " +
                         shape_str(embeddings.shape()) + " must have the same number of rows");
  }
  const auto n = inputs.dim(0), d = embeddings.dim(1);
  const auto triples = ordered_neighbor_pairs(pairwise_distances(inputs.data(), n, inputs.dim(1)), n, k);
  const auto emb_dist = pairwise_distances(embeddings.data(), n, d);

  using A = Acc<S>;
  struct Active {
    std::size_t anchor, closer, farther;
  };
  std::vector<Active> active;
  A total = 0;
  for (auto [i, j, l] : triples) {
    const A v = emb_dist[i * n + j] - emb_dist[i * n + l];
    if (v > 0) {
      total += v;
      active.push_back({i, j, l});
    }
  }
  const A count = static_cast<A>(std::max<std::size_t>(triples.size(), 1));
  const S weight = static_cast<S>(A(1) / count);
  return detail::make_result<S>(
      {1}, {static_cast<S>(total / count)}, {embeddings},
      [active, emb_dist, n, d, weight](detail::Node<S>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.grad_buffer();
        const S scale = self.grad[0] * weight;
        // d|e_a - e_b| / de_a = (e_a - e_b) / |e_a - e_b|
        auto accumulate = [&](std::size_t a, std::size_t b, S sign) {
          const A dist = emb_dist[a * n + b];
          if (dist <= 0) return;
          for (std::size_t c = 0; c < d; ++c) {
            const S unit = static_cast<S>((p.data[a * d + c] - p.data[b * d + c]) / dist);
            g[a * d + c] += sign * scale * unit;
            g[b * d + c] -= sign * scale * unit;
          }
        };
        for (const auto& t : active) {
          accumulate(t.anchor, t.closer, S(1));
          accumulate(t.anchor, t.farther, S(-1));
        }
      });
}

template <typename S>
BasicTensor<S> vmnet_combined_loss(const BasicTensor<S>& sim, const BasicTensor<S>& audio_inputs,
                                   const BasicTensor<S>& video_inputs, const BasicTensor<S>& audio_emb,
                                   const BasicTensor<S>& video_emb, const LossConfig& cfg) {
  auto loss = triplet_loss_mined(sim, cfg.margin, cfg.top_q);
  if (cfg.structure_weight == 0.0) return loss;
  auto structure = add(intra_modal_structure_loss(audio_inputs, audio_emb, cfg.intra_k),
                       intra_modal_structure_loss(video_inputs, video_emb, cfg.intra_k));
  return add(loss, scale(structure, static_cast<S>(cfg.structure_weight)));
}

#define AVM_INSTANTIATE_LOSSES(S)                                                                                \
  template BasicTensor<S> cosine_similarity_matrix(const BasicTensor<S>&, const BasicTensor<S>&);              \
  template BasicTensor<S> infonce_loss(const BasicTensor<S>&, double, bool);                                   \
  template BasicTensor<S> triplet_loss_mined(const BasicTensor<S>&, double, std::size_t);                      \
  template BasicTensor<S> intra_modal_structure_loss(const BasicTensor<S>&, const BasicTensor<S>&, std::size_t); \
  template BasicTensor<S> vmnet_combined_loss(const BasicTensor<S>&, const BasicTensor<S>&, const BasicTensor<S>&, \
                                              const BasicTensor<S>&, const BasicTensor<S>&, const LossConfig&);

AVM_INSTANTIATE_LOSSES(float)
AVM_INSTANTIATE_LOSSES(double)
AVM_INSTANTIATE_LOSSES(long double)

}  // namespace avm
