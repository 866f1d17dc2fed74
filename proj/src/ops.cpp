#include "avm/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace avm {

namespace {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapMat = Eigen::Map<Mat<S>>;
template <typename S>
using ConstMapMat = Eigen::Map<const Mat<S>>;
template <typename S>
using StridedMap = Eigen::Map<Mat<S>, 0, Eigen::OuterStride<>>;
template <typename S>
using ConstStridedMap = Eigen::Map<const Mat<S>, 0, Eigen::OuterStride<>>;

using detail::Node;

template <typename S>
void require_matrix(const BasicTensor<S>& x, const char* op) {
  if (x.rank() != 2) {
    throw ShapeError(std::string(op) + " expects a matrix, got shape " + shape_str(x.shape()));
  }
}

template <typename S>
void require_same_shape(const BasicTensor<S>& a, const BasicTensor<S>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// Elementwise unary op; deriv(x, y) gives dy/dx.
template <typename S, typename F, typename D>
BasicTensor<S> unary(const BasicTensor<S>& x, F f, D deriv) {
  auto in = x.data();
  std::vector<S> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return detail::make_result<S>(x.shape(), std::move(out), {x}, [deriv](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& gx = p.grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * deriv(p.data[i], self.data[i]);
  });
}

}  // namespace

template <typename S>
BasicTensor<S> matmul(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  // Blocked GEMM routes leftover rows through a different kernel, so a row's
  // result would depend on where it sits in the batch. Zero-padding the row
  // count to a multiple of the widest micro-kernel keeps every row on the
  // same path: a clip embeds to the same bits whatever its batch position.
  constexpr std::size_t kRowBlock = 16;
  const auto mp = (m + kRowBlock - 1) / kRowBlock * kRowBlock;
  std::vector<S> out(mp * n);
  if (mp == m) {
    MapMat<S>(out.data(), m, n).noalias() =
        ConstMapMat<S>(a.data().data(), m, k) * ConstMapMat<S>(b.data().data(), k, n);
  } else {
    std::vector<S> padded(mp * k, S(0));
    std::copy(a.data().begin(), a.data().end(), padded.begin());
    MapMat<S>(out.data(), mp, n).noalias() =
        ConstMapMat<S>(padded.data(), mp, k) * ConstMapMat<S>(b.data().data(), k, n);
  }
  out.resize(m * n);
  return detail::make_result<S>({m, n}, std::move(out), {a, b}, [m, k, n](Node<S>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    ConstMapMat<S> g(self.grad.data(), m, n);
    if (pa.requires_grad) {
      MapMat<S>(pa.grad_buffer().data(), m, k).noalias() += g * ConstMapMat<S>(pb.data.data(), k, n).transpose();
    }
    if (pb.requires_grad) {
      MapMat<S>(pb.grad_buffer().data(), k, n).noalias() += ConstMapMat<S>(pa.data.data(), m, k).transpose() * g;
    }
  });
}

template <typename S>
BasicTensor<S> transpose(const BasicTensor<S>& a) {
  require_matrix(a, "transpose");
  const auto m = a.dim(0), n = a.dim(1);
  std::vector<S> out(m * n);
  MapMat<S>(out.data(), n, m) = ConstMapMat<S>(a.data().data(), m, n).transpose();
  return detail::make_result<S>({n, m}, std::move(out), {a}, [m, n](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    MapMat<S>(p.grad_buffer().data(), m, n) += ConstMapMat<S>(self.grad.data(), n, m).transpose();
  });
}

template <typename S>
BasicTensor<S> add(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  require_same_shape(a, b, "add");
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_result<S>(a.shape(), std::move(out), {a, b}, [](Node<S>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename S>
BasicTensor<S> sub(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  require_same_shape(a, b, "sub");
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::make_result<S>(a.shape(), std::move(out), {a, b}, [](Node<S>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto& p = *self.parents[k];
      if (!p.requires_grad) continue;
      const S sign = k == 0 ? S(1) : S(-1);
      auto& g = p.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
    }
  });
}

template <typename S>
BasicTensor<S> mul(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  require_same_shape(a, b, "mul");
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_result<S>(a.shape(), std::move(out), {a, b}, [](Node<S>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
    }
  });
}

template <typename S>
BasicTensor<S> scale(const BasicTensor<S>& a, S factor) {
  return unary(a, [factor](S v) { return v * factor; }, [factor](S, S) { return factor; });
}

template <typename S>
BasicTensor<S> add_row(const BasicTensor<S>& x, const BasicTensor<S>& b) {
  require_matrix(x, "add_row");
  const auto n = x.dim(0), d = x.dim(1);
  if (b.numel() != d) {
    throw DimensionError("add_row: bias " + shape_str(b.shape()) + " does not match " + shape_str(x.shape()));
  }
  std::vector<S> out(x.numel());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = x.data()[r * d + c] + b.data()[c];
  return detail::make_result<S>(x.shape(), std::move(out), {x, b}, [n, d](Node<S>& self) {
    auto& px = *self.parents[0];
    auto& pb = *self.parents[1];
    if (px.requires_grad) {
      auto& g = px.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) g[c] += self.grad[r * d + c];
    }
  });
}

template <typename S>
BasicTensor<S> relu(const BasicTensor<S>& x) {
  return unary(x, [](S v) { return v > S(0) ? v : S(0); }, [](S v, S) { return v > S(0) ? S(1) : S(0); });
}

template <typename S>
BasicTensor<S> sigmoid(const BasicTensor<S>& x) {
  return unary(
      x,
      [](S v) {
        if (v >= S(0)) return S(1) / (S(1) + std::exp(-v));
        const S e = std::exp(v);
        return e / (S(1) + e);
      },
      [](S, S y) { return y * (S(1) - y); });
}

template <typename S>
BasicTensor<S> tanh(const BasicTensor<S>& x) {
  return unary(x, [](S v) { return std::tanh(v); }, [](S, S y) { return S(1) - y * y; });
}

template <typename S>
BasicTensor<S> square(const BasicTensor<S>& x) {
  return unary(x, [](S v) { return v * v; }, [](S v, S) { return S(2) * v; });
}

template <typename S>
BasicTensor<S> sum(const BasicTensor<S>& x) {
  S total = 0;
  for (auto v : x.data()) total += v;
  return detail::make_result<S>({1}, {total}, {x}, [](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename S>
BasicTensor<S> mean(const BasicTensor<S>& x) {
  return scale(sum(x), S(1) / static_cast<S>(x.numel()));
}

template <typename S>
BasicTensor<S> softmax_rows(const BasicTensor<S>& x, S temperature) {
  require_matrix(x, "softmax_rows");
  if (!(temperature > S(0))) throw ParameterError("softmax_rows: temperature must be positive");
  const auto n = x.dim(0), m = x.dim(1);
  std::vector<S> out(x.numel());
  for (std::size_t r = 0; r < n; ++r) {
    const S* row = x.data().data() + r * m;
    S* y = out.data() + r * m;
    const S peak = *std::max_element(row, row + m);
    S total = 0;
    for (std::size_t c = 0; c < m; ++c) total += (y[c] = std::exp((row[c] - peak) / temperature));
    for (std::size_t c = 0; c < m; ++c) y[c] /= total;
  }
  return detail::make_result<S>(x.shape(), std::move(out), {x}, [n, m, temperature](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& gx = p.grad_buffer();
    for (std::size_t r = 0; r < n; ++r) {
      const S* y = self.data.data() + r * m;
      const S* g = self.grad.data() + r * m;
      S dot = 0;
      for (std::size_t c = 0; c < m; ++c) dot += g[c] * y[c];
      for (std::size_t c = 0; c < m; ++c) gx[r * m + c] += y[c] * (g[c] - dot) / temperature;
    }
  });
}

template <typename S>
BasicTensor<S> log_softmax_rows(const BasicTensor<S>& x, S temperature) {
  require_matrix(x, "log_softmax_rows");
  if (!(temperature > S(0))) throw ParameterError("log_softmax_rows: temperature must be positive");
  const auto n = x.dim(0), m = x.dim(1);
  std::vector<S> out(x.numel());
  for (std::size_t r = 0; r < n; ++r) {
    const S* row = x.data().data() + r * m;
    S* y = out.data() + r * m;
    const S peak = *std::max_element(row, row + m);
    S total = 0;
    for (std::size_t c = 0; c < m; ++c) total += std::exp((row[c] - peak) / temperature);
    const S lse = std::log(total);
    for (std::size_t c = 0; c < m; ++c) y[c] = (row[c] - peak) / temperature - lse;
  }
  return detail::make_result<S>(x.shape(), std::move(out), {x}, [n, m, temperature](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& gx = p.grad_buffer();
    for (std::size_t r = 0; r < n; ++r) {
      const S* y = self.data.data() + r * m;
      const S* g = self.grad.data() + r * m;
      S gsum = 0;
      for (std::size_t c = 0; c < m; ++c) gsum += g[c];
      for (std::size_t c = 0; c < m; ++c) gx[r * m + c] += (g[c] - std::exp(y[c]) * gsum) / temperature;
    }
  });
}

template <typename S>
BasicTensor<S> l2_normalize_rows(const BasicTensor<S>& x) {
  require_matrix(x, "l2_normalize_rows");
  const auto n = x.dim(0), d = x.dim(1);
  std::vector<S> out(x.numel());
  std::vector<S> norms(n);
  for (std::size_t r = 0; r < n; ++r) {
    const S* row = x.data().data() + r * d;
    S sq = 0;
    for (std::size_t c = 0; c < d; ++c) sq += row[c] * row[c];
    const S norm = std::sqrt(sq);
    norms[r] = norm;
    const S inv = norm < S(1e-12) ? S(1) : S(1) / norm;
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = row[c] * inv;
  }
  return detail::make_result<S>(x.shape(), std::move(out), {x}, [n, d, norms](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& gx = p.grad_buffer();
    for (std::size_t r = 0; r < n; ++r) {
      const S* g = self.grad.data() + r * d;
      if (norms[r] < S(1e-12)) {
        for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += g[c];
        continue;
      }
      const S* y = self.data.data() + r * d;
      S dot = 0;
      for (std::size_t c = 0; c < d; ++c) dot += g[c] * y[c];
      for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += (g[c] - y[c] * dot) / norms[r];
    }
  });
}

template <typename S>
BasicTensor<S> pool_time(const BasicTensor<S>& x, std::size_t seq_len, Reduction kind) {
  require_matrix(x, "pool_time");
  if (seq_len == 0 || x.dim(0) % seq_len != 0) {
    throw DimensionError("pool_time: " + std::to_string(x.dim(0)) + " rows are not a whole number of length-" +
                         std::to_string(seq_len) + " sequences");
  }
  if (kind == Reduction::std && seq_len < 2) {
    throw DegenerateInputError("standard deviation over time needs at least 2 frames");
  }
  const auto T = seq_len, d = x.dim(1), n = x.dim(0) / seq_len;
  const S* in = x.data().data();
  std::vector<S> out(n * d);
  // For max: winning time index per output; for std: the per-output mean.
  std::vector<S> aux(kind == Reduction::std ? n * d : 0);
  std::vector<std::size_t> argmax(kind == Reduction::max ? n * d : 0);
  std::vector<S> sorted(T);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t c = 0; c < d; ++c) {
      const S* col = in + s * T * d + c;
      if (kind == Reduction::max) {
        std::size_t best = 0;
        for (std::size_t t = 1; t < T; ++t)
          if (col[t * d] > col[best * d]) best = t;
        argmax[s * d + c] = best;
        out[s * d + c] = col[best * d];
      } else {
        // Summing in sorted order makes the statistics exactly invariant to
        // the order of the frames.
        for (std::size_t t = 0; t < T; ++t) sorted[t] = col[t * d];
        std::sort(sorted.begin(), sorted.end());
        S total = 0;
        for (auto v : sorted) total += v;
        const S mu = total / static_cast<S>(T);
        if (kind == Reduction::mean) {
          out[s * d + c] = mu;
        } else {
          S var = 0;
          for (auto v : sorted) var += (v - mu) * (v - mu);
          out[s * d + c] = std::sqrt(var / static_cast<S>(T));
          aux[s * d + c] = mu;
        }
      }
    }
  }
  return detail::make_result<S>({n, d}, std::move(out), {x}, [n, T, d, kind, aux, argmax](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& gx = p.grad_buffer();
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t c = 0; c < d; ++c) {
        const S g = self.grad[s * d + c];
        const std::size_t base = s * T * d + c;
        switch (kind) {
          case Reduction::max:
            gx[base + argmax[s * d + c] * d] += g;
            break;
          case Reduction::mean:
            for (std::size_t t = 0; t < T; ++t) gx[base + t * d] += g / static_cast<S>(T);
            break;
          case Reduction::std: {
            const S sd = self.data[s * d + c];
            if (sd <= S(0)) break;  // subgradient 0 at a constant column
            const S mu = aux[s * d + c];
            for (std::size_t t = 0; t < T; ++t)
              gx[base + t * d] += g * (p.data[base + t * d] - mu) / (static_cast<S>(T) * sd);
            break;
          }
        }
      }
    }
  });
}

template <typename S>
BasicTensor<S> reduce(const BasicTensor<S>& x, Reduction kind) {
  require_matrix(x, "reduce");
  auto pooled = pool_time(x, x.dim(0), kind);
  return reshape(pooled, Shape{x.dim(1)});
}

template <typename S>
BasicTensor<S> dropout(const BasicTensor<S>& x, double p, bool training, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ParameterError("dropout: probability must lie in [0, 1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
  std::vector<S> mask(x.numel());
  for (auto& m : mask) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    m = u < p ? S(0) : keep_scale;
  }
  std::vector<S> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * mask[i];
  return detail::make_result<S>(x.shape(), std::move(out), {x}, [mask = std::move(mask)](Node<S>& self) {
    auto& px = *self.parents[0];
    if (!px.requires_grad) return;
    auto& g = px.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

template <typename S>
BasicTensor<S> reshape(const BasicTensor<S>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<S> out(x.data().begin(), x.data().end());
  return detail::make_result<S>(std::move(shape), std::move(out), {x}, [](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename S>
BasicTensor<S> select_rows(const BasicTensor<S>& x, const std::vector<std::size_t>& rows) {
  require_matrix(x, "select_rows");
  if (rows.empty()) throw ShapeError("select_rows: empty row list");
  const auto d = x.dim(1);
  std::vector<S> out(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.dim(0)) {
      throw DimensionError("select_rows: row " + std::to_string(rows[i]) + " out of range for " +
                           shape_str(x.shape()));
    }
    std::copy_n(x.data().data() + rows[i] * d, d, out.data() + i * d);
  }
  return detail::make_result<S>({rows.size(), d}, std::move(out), {x}, [rows, d](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) g[rows[i] * d + c] += self.grad[i * d + c];
  });
}

template <typename S>
BasicTensor<S> concat_rows(const std::vector<BasicTensor<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  const auto d = parts[0].dim(1);
  std::size_t rows = 0;
  for (auto& p : parts) {
    require_matrix(p, "concat_rows");
    if (p.dim(1) != d) {
      throw DimensionError("concat_rows: width mismatch " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    rows += p.dim(0);
  }
  std::vector<S> out;
  out.reserve(rows * d);
  for (auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return detail::make_result<S>({rows, d}, std::move(out), parts, [](Node<S>& self) {
    std::size_t offset = 0;
    for (auto& p : self.parents) {
      if (p->requires_grad) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offset + i];
      }
      offset += p->data.size();
    }
  });
}

template <typename S>
BasicTensor<S> concat_cols(const std::vector<BasicTensor<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: nothing to concatenate");
  const auto n = parts[0].dim(0);
  std::size_t width = 0;
  for (auto& p : parts) {
    require_matrix(p, "concat_cols");
    if (p.dim(0) != n) {
      throw DimensionError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    width += p.dim(1);
  }
  std::vector<S> out(n * width);
  std::size_t offset = 0;
  for (auto& p : parts) {
    const auto w = p.dim(1);
    for (std::size_t r = 0; r < n; ++r) std::copy_n(p.data().data() + r * w, w, out.data() + r * width + offset);
    offset += w;
  }
  return detail::make_result<S>({n, width}, std::move(out), parts, [n, width](Node<S>& self) {
    std::size_t offset = 0;
    for (auto& p : self.parents) {
      const auto w = p->shape[1];
      if (p->requires_grad) {
        auto& g = p->grad_buffer();
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < w; ++c) g[r * w + c] += self.grad[r * width + offset + c];
      }
      offset += w;
    }
  });
}

template <typename S>
BasicTensor<S> slice_cols(const BasicTensor<S>& x, std::size_t begin, std::size_t end) {
  require_matrix(x, "slice_cols");
  if (begin >= end || end > x.dim(1)) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") invalid for " + shape_str(x.shape()));
  }
  const auto n = x.dim(0), d = x.dim(1), w = end - begin;
  std::vector<S> out(n * w);
  for (std::size_t r = 0; r < n; ++r) std::copy_n(x.data().data() + r * d + begin, w, out.data() + r * w);
  return detail::make_result<S>({n, w}, std::move(out), {x}, [n, d, w, begin](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < w; ++c) g[r * d + begin + c] += self.grad[r * w + c];
  });
}

template <typename S>
BasicTensor<S> diagonal(const BasicTensor<S>& x) {
  require_matrix(x, "diagonal");
  if (x.dim(0) != x.dim(1)) throw ShapeError("diagonal: matrix is not square: " + shape_str(x.shape()));
  const auto n = x.dim(0);
  std::vector<S> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = x.data()[i * n + i];
  return detail::make_result<S>({n}, std::move(out), {x}, [n](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < n; ++i) g[i * n + i] += self.grad[i];
  });
}

template <typename S>
BasicTensor<S> layer_norm_rows(const BasicTensor<S>& x, const BasicTensor<S>& gamma, const BasicTensor<S>& beta,
                               S eps) {
  require_matrix(x, "layer_norm_rows");
  const auto n = x.dim(0), d = x.dim(1);
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm_rows: affine parameters do not match width of " + shape_str(x.shape()));
  }
  std::vector<S> out(x.numel()), xhat(x.numel()), rstd(n);
  for (std::size_t r = 0; r < n; ++r) {
    const S* row = x.data().data() + r * d;
    S mu = 0;
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<S>(d);
    S var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<S>(d);
    rstd[r] = S(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat[r * d + c] = (row[c] - mu) * rstd[r];
      out[r * d + c] = xhat[r * d + c] * gamma.data()[c] + beta.data()[c];
    }
  }
  return detail::make_result<S>(x.shape(), std::move(out), {x, gamma, beta}, [n, d, xhat, rstd](Node<S>& self) {
    auto& px = *self.parents[0];
    auto& pg = *self.parents[1];
    auto& pb = *self.parents[2];
    if (pg.requires_grad) {
      auto& g = pg.grad_buffer();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) g[c] += self.grad[r * d + c] * xhat[r * d + c];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) g[c] += self.grad[r * d + c];
    }
    if (px.requires_grad) {
      auto& gx = px.grad_buffer();
      std::vector<S> dxhat(d);
      for (std::size_t r = 0; r < n; ++r) {
        S m1 = 0, m2 = 0;
        for (std::size_t c = 0; c < d; ++c) {
          dxhat[c] = self.grad[r * d + c] * pg.data[c];
          m1 += dxhat[c];
          m2 += dxhat[c] * xhat[r * d + c];
        }
        m1 /= static_cast<S>(d);
        m2 /= static_cast<S>(d);
        for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += rstd[r] * (dxhat[c] - m1 - xhat[r * d + c] * m2);
      }
    }
  });
}

template <typename S>
BasicTensor<S> batch_norm_train(const BasicTensor<S>& x, const BasicTensor<S>& gamma, const BasicTensor<S>& beta,
                                S eps, std::vector<S>& batch_mean, std::vector<S>& batch_var) {
  require_matrix(x, "batch_norm_train");
  const auto n = x.dim(0), d = x.dim(1);
  if (n < 2) throw DegenerateInputError("batch normalization in training mode needs at least 2 rows");
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("batch_norm_train: affine parameters do not match width of " + shape_str(x.shape()));
  }
  batch_mean.assign(d, S(0));
  batch_var.assign(d, S(0));
  const S* in = x.data().data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) batch_mean[c] += in[r * d + c];
  for (auto& m : batch_mean) m /= static_cast<S>(n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) {
      const S dev = in[r * d + c] - batch_mean[c];
      batch_var[c] += dev * dev;
    }
  for (auto& v : batch_var) v /= static_cast<S>(n);
  std::vector<S> rstd(d), xhat(x.numel()), out(x.numel());
  for (std::size_t c = 0; c < d; ++c) rstd[c] = S(1) / std::sqrt(batch_var[c] + eps);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) {
      xhat[r * d + c] = (in[r * d + c] - batch_mean[c]) * rstd[c];
      out[r * d + c] = xhat[r * d + c] * gamma.data()[c] + beta.data()[c];
    }
  return detail::make_result<S>(x.shape(), std::move(out), {x, gamma, beta}, [n, d, xhat, rstd](Node<S>& self) {
    auto& px = *self.parents[0];
    auto& pg = *self.parents[1];
    auto& pb = *self.parents[2];
    std::vector<S> gsum(d, S(0)), gxhat(d, S(0));
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) {
        gsum[c] += self.grad[r * d + c];
        gxhat[c] += self.grad[r * d + c] * xhat[r * d + c];
      }
    if (pg.requires_grad) {
      auto& g = pg.grad_buffer();
      for (std::size_t c = 0; c < d; ++c) g[c] += gxhat[c];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t c = 0; c < d; ++c) g[c] += gsum[c];
    }
    if (px.requires_grad) {
      auto& gx = px.grad_buffer();
      const S inv_n = S(1) / static_cast<S>(n);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) {
          const S dxh = self.grad[r * d + c];
          gx[r * d + c] +=
              pg.data[c] * rstd[c] * (dxh - gsum[c] * inv_n - xhat[r * d + c] * gxhat[c] * inv_n);
        }
    }
  });
}

template <typename S>
BasicTensor<S> batch_norm_eval(const BasicTensor<S>& x, const BasicTensor<S>& gamma, const BasicTensor<S>& beta,
                               const std::vector<S>& running_mean, const std::vector<S>& running_var, S eps) {
  require_matrix(x, "batch_norm_eval");
  const auto n = x.dim(0), d = x.dim(1);
  if (gamma.numel() != d || beta.numel() != d || running_mean.size() != d || running_var.size() != d) {
    throw DimensionError("batch_norm_eval: statistics do not match width of " + shape_str(x.shape()));
  }
  std::vector<S> rstd(d), xhat(x.numel()), out(x.numel());
  for (std::size_t c = 0; c < d; ++c) rstd[c] = S(1) / std::sqrt(running_var[c] + eps);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) {
      xhat[r * d + c] = (x.data()[r * d + c] - running_mean[c]) * rstd[c];
      out[r * d + c] = xhat[r * d + c] * gamma.data()[c] + beta.data()[c];
    }
  return detail::make_result<S>(x.shape(), std::move(out), {x, gamma, beta}, [n, d, xhat, rstd](Node<S>& self) {
    auto& px = *self.parents[0];
    auto& pg = *self.parents[1];
    auto& pb = *self.parents[2];
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) {
        const S g = self.grad[r * d + c];
        if (px.requires_grad) px.grad_buffer()[r * d + c] += g * pg.data[c] * rstd[c];
        if (pg.requires_grad) pg.grad_buffer()[c] += g * xhat[r * d + c];
        if (pb.requires_grad) pb.grad_buffer()[c] += g;
      }
  });
}

namespace {

template <typename S>
void check_attention_shapes(const BasicTensor<S>& a, const BasicTensor<S>& b, std::size_t seq_len,
                            std::size_t heads, const char* op) {
  require_matrix(a, op);
  require_matrix(b, op);
  if (heads == 0 || b.dim(1) % heads != 0) {
    throw ParameterError(std::string(op) + ": model width " + std::to_string(b.dim(1)) +
                         " is not divisible by " + std::to_string(heads) + " heads");
  }
  if (seq_len == 0 || b.dim(0) % seq_len != 0) {
    throw DimensionError(std::string(op) + ": rows are not a whole number of length-" + std::to_string(seq_len) +
                         " sequences");
  }
}

}  // namespace

template <typename S>
BasicTensor<S> attention_scores(const BasicTensor<S>& q, const BasicTensor<S>& k, std::size_t seq_len,
                                std::size_t heads) {
  check_attention_shapes(q, k, seq_len, heads, "attention_scores");
  if (q.shape() != k.shape()) {
    throw DimensionError("attention_scores: query " + shape_str(q.shape()) + " vs key " + shape_str(k.shape()));
  }
  const auto T = seq_len, d = q.dim(1), dh = d / heads, n = q.dim(0) / T;
  const S factor = S(1) / std::sqrt(static_cast<S>(dh));
  std::vector<S> out(n * heads * T * T);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t h = 0; h < heads; ++h) {
      ConstStridedMap<S> qb(q.data().data() + s * T * d + h * dh, T, dh, Eigen::OuterStride<>(d));
      ConstStridedMap<S> kb(k.data().data() + s * T * d + h * dh, T, dh, Eigen::OuterStride<>(d));
      MapMat<S>(out.data() + (s * heads + h) * T * T, T, T).noalias() = factor * (qb * kb.transpose());
    }
  return detail::make_result<S>(
      {n * heads * T, T}, std::move(out), {q, k}, [n, heads, T, d, dh, factor](Node<S>& self) {
        auto& pq = *self.parents[0];
        auto& pk = *self.parents[1];
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t h = 0; h < heads; ++h) {
            ConstMapMat<S> g(self.grad.data() + (s * heads + h) * T * T, T, T);
            const std::size_t off = s * T * d + h * dh;
            if (pq.requires_grad) {
              StridedMap<S> gq(pq.grad_buffer().data() + off, T, dh, Eigen::OuterStride<>(d));
              gq.noalias() += factor * (g * ConstStridedMap<S>(pk.data.data() + off, T, dh, Eigen::OuterStride<>(d)));
            }
            if (pk.requires_grad) {
              StridedMap<S> gk(pk.grad_buffer().data() + off, T, dh, Eigen::OuterStride<>(d));
              gk.noalias() +=
                  factor * (g.transpose() * ConstStridedMap<S>(pq.data.data() + off, T, dh, Eigen::OuterStride<>(d)));
            }
          }
      });
}

template <typename S>
BasicTensor<S> attention_apply(const BasicTensor<S>& weights, const BasicTensor<S>& v, std::size_t seq_len,
                               std::size_t heads) {
  check_attention_shapes(weights, v, seq_len, heads, "attention_apply");
  const auto T = seq_len, d = v.dim(1), dh = d / heads, n = v.dim(0) / T;
  if (weights.dim(0) != n * heads * T || weights.dim(1) != T) {
    throw DimensionError("attention_apply: weights " + shape_str(weights.shape()) + " do not match values " +
                         shape_str(v.shape()));
  }
  std::vector<S> out(n * T * d);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t h = 0; h < heads; ++h) {
      ConstMapMat<S> w(weights.data().data() + (s * heads + h) * T * T, T, T);
      const std::size_t off = s * T * d + h * dh;
      StridedMap<S>(out.data() + off, T, dh, Eigen::OuterStride<>(d)).noalias() =
          w * ConstStridedMap<S>(v.data().data() + off, T, dh, Eigen::OuterStride<>(d));
    }
  return detail::make_result<S>({n * T, d}, std::move(out), {weights, v}, [n, heads, T, d, dh](Node<S>& self) {
    auto& pw = *self.parents[0];
    auto& pv = *self.parents[1];
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = s * T * d + h * dh;
        ConstStridedMap<S> g(self.grad.data() + off, T, dh, Eigen::OuterStride<>(d));
        if (pw.requires_grad) {
          MapMat<S> gw(pw.grad_buffer().data() + (s * heads + h) * T * T, T, T);
          gw.noalias() += g * ConstStridedMap<S>(pv.data.data() + off, T, dh, Eigen::OuterStride<>(d)).transpose();
        }
        if (pv.requires_grad) {
          StridedMap<S> gv(pv.grad_buffer().data() + off, T, dh, Eigen::OuterStride<>(d));
          gv.noalias() += ConstMapMat<S>(pw.data.data() + (s * heads + h) * T * T, T, T).transpose() * g;
        }
      }
  });
}

#define AVM_INSTANTIATE_OPS(S)                                                                                    \
  template BasicTensor<S> matmul(const BasicTensor<S>&, const BasicTensor<S>&);                                 \
  template BasicTensor<S> transpose(const BasicTensor<S>&);                                                     \
  template BasicTensor<S> add(const BasicTensor<S>&, const BasicTensor<S>&);                                    \
  template BasicTensor<S> sub(const BasicTensor<S>&, const BasicTensor<S>&);                                    \
  template BasicTensor<S> mul(const BasicTensor<S>&, const BasicTensor<S>&);                                    \
  template BasicTensor<S> scale(const BasicTensor<S>&, S);                                                      \
  template BasicTensor<S> add_row(const BasicTensor<S>&, const BasicTensor<S>&);                                \
  template BasicTensor<S> relu(const BasicTensor<S>&);                                                          \
  template BasicTensor<S> sigmoid(const BasicTensor<S>&);                                                       \
  template BasicTensor<S> tanh(const BasicTensor<S>&);                                                          \
  template BasicTensor<S> square(const BasicTensor<S>&);                                                        \
  template BasicTensor<S> sum(const BasicTensor<S>&);                                                           \
  template BasicTensor<S> mean(const BasicTensor<S>&);                                                          \
  template BasicTensor<S> softmax_rows(const BasicTensor<S>&, S);                                               \
  template BasicTensor<S> log_softmax_rows(const BasicTensor<S>&, S);                                           \
  template BasicTensor<S> l2_normalize_rows(const BasicTensor<S>&);                                             \
  template BasicTensor<S> reduce(const BasicTensor<S>&, Reduction);                                             \
  template BasicTensor<S> pool_time(const BasicTensor<S>&, std::size_t, Reduction);                             \
  template BasicTensor<S> dropout(const BasicTensor<S>&, double, bool, Rng&);                                   \
  template BasicTensor<S> reshape(const BasicTensor<S>&, Shape);                                                \
  template BasicTensor<S> select_rows(const BasicTensor<S>&, const std::vector<std::size_t>&);                  \
  template BasicTensor<S> concat_rows(const std::vector<BasicTensor<S>>&);                                      \
  template BasicTensor<S> concat_cols(const std::vector<BasicTensor<S>>&);                                      \
  template BasicTensor<S> slice_cols(const BasicTensor<S>&, std::size_t, std::size_t);                          \
  template BasicTensor<S> diagonal(const BasicTensor<S>&);                                                      \
  template BasicTensor<S> layer_norm_rows(const BasicTensor<S>&, const BasicTensor<S>&, const BasicTensor<S>&,  \
                                          S);                                                                   \
  template BasicTensor<S> batch_norm_train(const BasicTensor<S>&, const BasicTensor<S>&, const BasicTensor<S>&, \
                                           S, std::vector<S>&, std::vector<S>&);                                \
  template BasicTensor<S> batch_norm_eval(const BasicTensor<S>&, const BasicTensor<S>&, const BasicTensor<S>&,  \
                                          const std::vector<S>&, const std::vector<S>&, S);                     \
  template BasicTensor<S> attention_scores(const BasicTensor<S>&, const BasicTensor<S>&, std::size_t,           \
                                           std::size_t);                                                        \
  template BasicTensor<S> attention_apply(const BasicTensor<S>&, const BasicTensor<S>&, std::size_t, std::size_t);

AVM_INSTANTIATE_OPS(float)
AVM_INSTANTIATE_OPS(double)
AVM_INSTANTIATE_OPS(long double)

#undef AVM_INSTANTIATE_OPS

}  // namespace avm
