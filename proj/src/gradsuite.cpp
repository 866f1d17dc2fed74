#include "avm/gradsuite.hpp"

#include <cstdio>
#include <functional>
#include <limits>
#include <memory>
#include <random>

#include "avm/gradcheck.hpp"
#include "avm/layers.hpp"
#include "avm/losses.hpp"
#include "avm/model.hpp"

namespace avm {

namespace {

using T64 = Tensor64;

using TExt = TensorExt;

// Composites are differenced in extended precision. In 64-bit, coordinates
// whose true gradient is exactly zero (a bias feeding batchnorm, attention
// key biases) read as ~20 ulp(f) / eps, which the 1e-8 floor of the error
// measure turns into ~1e-3; the smaller step also keeps the probe clear of
// ReLU, max-pool and hinge kinks.
constexpr double kPrimitiveEps = 1e-5;
constexpr double kCompositeEps = 1e-6;

// Entries in +-[0.2, 1.0]: clear of the ReLU kink and of exact ties. Draws
// are made in double so both precisions see identical values.
template <typename S = double>
BasicTensor<S> draw(Shape shape, Rng& rng, bool positive = false) {
  std::uniform_real_distribution<double> mag(0.2, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<S> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<S>((positive || sign(rng)) ? mag(rng) : -mag(rng));
  return BasicTensor<S>(std::move(shape), std::move(v), true);
}

// Random projection to a scalar so no gradient is trivially uniform.
template <typename S = double>
std::function<BasicTensor<S>(const BasicTensor<S>&)> probe(Shape shape, Rng& rng) {
  auto w = draw<S>(std::move(shape), rng);
  w.set_requires_grad(false);
  return [w](const BasicTensor<S>& y) { return sum(mul(y, w)); };
}

template <typename S>
struct Case {
  std::vector<BasicTensor<S>> inputs;
  std::function<BasicTensor<S>()> loss;
  std::shared_ptr<void> owner;  // keeps layers and models alive
};

template <typename S, typename Layer>
std::vector<BasicTensor<S>> params_of(const Layer& layer) {
  NamedTensors<S> named;
  layer.collect("", named);
  std::vector<BasicTensor<S>> out;
  for (auto& n : named) out.push_back(n.tensor);
  return out;
}

class Suite {
 public:
  explicit Suite(std::uint64_t seed) : rng_(seed) {}

  // Unary op checked through a random probe of its output.
  void unary(const std::string& name, Shape in, const std::function<T64(const T64&)>& op, bool positive = false) {
    auto x = draw(in, rng_, positive);
    Shape out;
    {
      NoGradGuard g;
      out = op(x).shape();
    }
    auto p = probe(out, rng_);
    add(name, false, finite_diff_report([&] { return p(op(x)); }, {x}, kPrimitiveEps));
  }

  // Several inputs, gradients checked for all of them.
  void multi(const std::string& name, std::vector<T64> inputs, const std::function<T64()>& f) {
    add(name, false, finite_diff_report(f, std::move(inputs), kPrimitiveEps));
  }

  // `build(tag, rng)` returns a Case over decltype(tag); it is called once
  // per precision from the same generator state.
  template <typename Build>
  void composite(const std::string& name, Build build, std::size_t max_coords = 0) {
    Rng twin = rng_;
    Case<double> c = build(double{}, rng_);
    Case<long double> e = build((long double){}, twin);
    // A check against an identically zero gradient proves nothing; that
    // happens at degenerate points (every ReLU dead, duplicated rows).
    bool live = false;
    for (auto& x : c.inputs) {
      x.set_requires_grad(true);
      x.zero_grad();
    }
    c.loss().backward();
    for (auto& x : c.inputs) {
      for (double g : x.grad()) live = live || g != 0.0;
      x.zero_grad();
    }
    auto report = finite_diff_report_extended(c.loss, c.inputs, e.loss, e.inputs, kCompositeEps, max_coords);
    if (!live) report.error = std::numeric_limits<double>::infinity();
    add(live ? name : name + " (zero gradient)", true, report);
  }

  void add(const std::string& name, bool composite, const FiniteDiffReport& r) {
    char where[160];
    std::snprintf(where, sizeof where, "input %zu [%zu]: analytic %.6e, numeric %.6e", r.param, r.coord, r.analytic,
                  r.numeric);
    results_.push_back(
        {name, composite, r.error, composite ? kCompositeGradTolerance : kPrimitiveGradTolerance, where});
  }

  Rng& rng() { return rng_; }
  std::vector<GradCheckResult> take() { return std::move(results_); }

 private:
  Rng rng_;
  std::vector<GradCheckResult> results_;
};

void primitive_ops(Suite& s) {
  auto& rng = s.rng();
  {
    auto a = draw({3, 4}, rng), b = draw({4, 2}, rng);
    auto p = probe({3, 2}, rng);
    s.multi("matmul", {a, b}, [=] { return p(matmul(a, b)); });
  }
  s.unary("transpose", {3, 5}, [](const T64& x) { return transpose(x); });
  for (const char* which : {"add", "sub", "mul"}) {
    auto a = draw({3, 4}, rng), b = draw({3, 4}, rng);
    auto p = probe({3, 4}, rng);
    const std::string op = which;
    s.multi(op, {a, b}, [=] {
      return p(op == "add" ? add(a, b) : op == "sub" ? sub(a, b) : mul(a, b));
    });
  }
  s.unary("scale", {2, 3}, [](const T64& x) { return scale(x, 0.37); });
  {
    auto x = draw({4, 3}, rng), b = draw({3}, rng);
    auto p = probe({4, 3}, rng);
    s.multi("add_row", {x, b}, [=] { return p(add_row(x, b)); });
  }
  s.unary("relu", {4, 5}, [](const T64& x) { return relu(x); });
  s.unary("sigmoid", {4, 5}, [](const T64& x) { return sigmoid(x); });
  s.unary("tanh", {4, 5}, [](const T64& x) { return tanh(x); });
  s.unary("square", {4, 5}, [](const T64& x) { return square(x); });
  s.unary("sum", {3, 4}, [](const T64& x) { return sum(x); });
  s.unary("mean", {3, 4}, [](const T64& x) { return mean(x); });
  s.unary("softmax_rows", {3, 5}, [](const T64& x) { return softmax_rows(x, 0.5); });
  s.unary("log_softmax_rows", {3, 5}, [](const T64& x) { return log_softmax_rows(x, 0.07); });
  s.unary("l2_normalize_rows", {4, 3}, [](const T64& x) { return l2_normalize_rows(x); });
  s.unary("reduce_mean", {5, 3}, [](const T64& x) { return reduce(x, Reduction::mean); });
  s.unary("reduce_std", {5, 3}, [](const T64& x) { return reduce(x, Reduction::std); });
  s.unary("reduce_max", {5, 3}, [](const T64& x) { return reduce(x, Reduction::max); });
  s.unary("pool_time_mean", {8, 3}, [](const T64& x) { return pool_time(x, 4, Reduction::mean); });
  s.unary("pool_time_std", {8, 3}, [](const T64& x) { return pool_time(x, 4, Reduction::std); });
  s.unary("pool_time_max", {8, 3}, [](const T64& x) { return pool_time(x, 4, Reduction::max); });
  s.unary("dropout", {4, 6}, [](const T64& x) {
    Rng fixed(11);
    return dropout(x, 0.3, true, fixed);
  });
  s.unary("reshape", {4, 6}, [](const T64& x) { return reshape(x, {6, 4}); });
  s.unary("select_rows", {4, 3}, [](const T64& x) { return select_rows(x, {2, 0, 2, 3}); });
  {
    auto a = draw({2, 3}, rng), b = draw({3, 3}, rng);
    auto p = probe({5, 3}, rng);
    s.multi("concat_rows", {a, b}, [=] { return p(concat_rows<double>({a, b})); });
  }
  {
    auto a = draw({3, 2}, rng), b = draw({3, 4}, rng);
    auto p = probe({3, 6}, rng);
    s.multi("concat_cols", {a, b}, [=] { return p(concat_cols<double>({a, b})); });
  }
  s.unary("slice_cols", {3, 6}, [](const T64& x) { return slice_cols(x, 1, 4); });
  s.unary("diagonal", {4, 4}, [](const T64& x) { return diagonal(x); });
  {
    auto x = draw({4, 5}, rng), g = draw({5}, rng), b = draw({5}, rng);
    auto p = probe({4, 5}, rng);
    s.multi("layer_norm_rows", {x, g, b}, [=] { return p(layer_norm_rows(x, g, b, 1e-5)); });
  }
  {
    auto x = draw({5, 3}, rng), g = draw({3}, rng), b = draw({3}, rng);
    auto p = probe({5, 3}, rng);
    s.multi("batch_norm_train", {x, g, b}, [=] {
      std::vector<double> m, v;
      return p(batch_norm_train(x, g, b, 1e-5, m, v));
    });
  }
  {
    auto x = draw({5, 3}, rng), g = draw({3}, rng), b = draw({3}, rng);
    auto p = probe({5, 3}, rng);
    const std::vector<double> rm{0.1, -0.2, 0.3}, rv{0.5, 1.5, 0.8};
    s.multi("batch_norm_eval", {x, g, b}, [=] { return p(batch_norm_eval(x, g, b, rm, rv, 1e-5)); });
  }
  {
    auto q = draw({6, 4}, rng), k = draw({6, 4}, rng);
    auto p = probe({12, 3}, rng);
    s.multi("attention_scores", {q, k}, [=] { return p(attention_scores(q, k, 3, 2)); });
  }
  {
    auto w = draw({12, 3}, rng, true), v = draw({6, 4}, rng);
    auto p = probe({6, 4}, rng);
    s.multi("attention_apply", {w, v}, [=] { return p(attention_apply(w, v, 3, 2)); });
  }
}

void losses(Suite& s) {
  s.composite("cosine_similarity_matrix", [](auto tag, Rng& rng) {
    using S = decltype(tag);
    auto u = draw<S>({4, 3}, rng), v = draw<S>({4, 3}, rng);
    auto p = probe<S>({4, 4}, rng);
    return Case<S>{{u, v}, [=] { return p(cosine_similarity_matrix(u, v)); }, nullptr};
  });
  for (bool sym : {false, true}) {
    s.composite(sym ? "infonce_symmetric" : "infonce_one_way", [sym](auto tag, Rng& rng) {
      using S = decltype(tag);
      // Cosine-scale similarities. At |s| ~ 1 with tau = 0.07 the far
      // off-diagonal gradients shrink to ~1e-10, under any quotient's noise.
      auto sim = draw<S>({5, 5}, rng);
      for (auto& x : sim.mutable_data()) x *= S(0.2);
      return Case<S>{{sim}, [=] { return infonce_loss(sim, 0.07, sym); }, nullptr};
    });
  }
  s.composite("triplet_loss_mined", [](auto tag, Rng& rng) {
    using S = decltype(tag);
    // Similarities spread so that several pairs violate the margin.
    auto sim = draw<S>({5, 5}, rng);
    for (std::size_t i = 0; i < 5; ++i) sim.mutable_data()[i * 5 + i] = S(0.1) * static_cast<S>(i + 1);
    return Case<S>{{sim}, [=] { return triplet_loss_mined(sim, 0.2, 7); }, nullptr};
  });
  s.composite("intra_modal_structure_loss", [](auto tag, Rng& rng) {
    using S = decltype(tag);
    auto in = draw<S>({6, 4}, rng);
    in.set_requires_grad(false);
    auto emb = draw<S>({6, 3}, rng);
    return Case<S>{{emb}, [=] { return intra_modal_structure_loss(in, emb, 3); }, nullptr};
  });
}

void layers(Suite& s) {
  s.composite("linear", [](auto tag, Rng& rng) {
    using S = decltype(tag);
    auto lin = std::make_shared<Linear<S>>(4, 3, rng);
    auto x = draw<S>({5, 4}, rng);
    auto p = probe<S>({5, 3}, rng);
    auto ps = params_of<S>(*lin);
    ps.push_back(x);
    return Case<S>{ps, [=] { return p(lin->forward(x)); }, lin};
  });
  s.composite("multi_head_attention", [](auto tag, Rng& rng) {
    using S = decltype(tag);
    auto mha = std::make_shared<MultiHeadAttention<S>>(4, 2, rng);
    auto x = draw<S>({6, 4}, rng);
    auto p = probe<S>({6, 4}, rng);
    auto ps = params_of<S>(*mha);
    ps.push_back(x);
    return Case<S>{ps, [=] { return p(mha->forward(x, 3)); }, mha};
  });
  s.composite("transformer_encoder", [](auto tag, Rng& rng) {
    using S = decltype(tag);
    auto enc = std::make_shared<TransformerEncoder<S>>(1, 4, 2, 6, 0.1, rng);
    auto x = draw<S>({6, 4}, rng);
    auto p = probe<S>({6, 4}, rng);
    auto ps = params_of<S>(*enc);
    ps.push_back(x);
    return Case<S>{ps, [=] {
                     Rng fixed(5);
                     return p(enc->forward(x, 3, true, fixed));
                   },
                   enc};
  });
  s.composite("bilstm_stack", [](auto tag, Rng& rng) {
    using S = decltype(tag);
    auto lstm = std::make_shared<BiLstmStack<S>>(3, 2, 2, 0.1, rng);
    auto x = draw<S>({8, 3}, rng);
    auto p = probe<S>({8, 4}, rng);
    auto ps = params_of<S>(*lstm);
    ps.push_back(x);
    return Case<S>{ps, [=] {
                     Rng fixed(5);
                     return p(lstm->forward(x, 4, true, fixed));
                   },
                   lstm};
  });
}

void presets(Suite& s, std::uint64_t seed) {
  SynthOptions o;
  o.songs = 2;
  o.clips_per_song = 2;
  o.frames = 4;
  o.vocab = 3;
  o.audio_dim = 6;
  o.video_dim = 7;
  o.seed = seed;
  auto ds = std::make_shared<SynthDataset>(synth_generate(o));

  for (auto preset : all_presets()) {
    auto cfg = scaled(build_preset(preset), Scale::micro);
    cfg.audio_dim = o.audio_dim;
    cfg.video_dim = o.video_dim;
    cfg.seq_len = o.frames;
    cfg.seed = seed;
    s.composite(
        "preset " + preset_name(preset),
        [&](auto tag, Rng&) {
          using S = decltype(tag);
          auto model = std::make_shared<DualBranchModel<S>>(cfg);
          std::vector<BasicTensor<S>> ps;
          for (auto& n : model->parameters()) ps.push_back(n.tensor);
          std::vector<const ClipPair*> batch;
          for (const auto& p : ds->pairs) batch.push_back(&p);
          auto loss = [model, batch, ds] {
            Rng fixed(3);
            return batch_loss(*model, batch, true, fixed);
          };
          return Case<S>{ps, loss, model};
        },
        24);
  }
}

}  // namespace

std::vector<GradCheckResult> run_gradient_suite(std::uint64_t seed) {
  Suite s(seed);
  primitive_ops(s);
  losses(s);
  layers(s);
  presets(s, seed);
  return s.take();
}

}  // namespace avm
