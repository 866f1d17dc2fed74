#pragma once

// Reference computations written without the library's ops, used to check
// its results. Everything runs in long double over plain vectors.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <random>
#include <span>
#include <vector>

namespace oracle {

using Real = long double;
using Matrix = std::vector<std::vector<Real>>;

template <typename T>
Matrix to_matrix(std::span<const T> data, std::size_t rows, std::size_t cols) {
  Matrix m(rows, std::vector<Real>(cols));
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) m[i][j] = static_cast<Real>(data[i * cols + j]);
  return m;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.size(), std::vector<Real>(b[0].size(), 0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

inline Real norm(const std::vector<Real>& v) {
  Real s = 0;
  for (auto x : v) s += x * x;
  return std::sqrt(s);
}

inline Real dist(const std::vector<Real>& a, const std::vector<Real>& b) {
  Real s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

inline Matrix cosine(const Matrix& u, const Matrix& v) {
  Matrix s(u.size(), std::vector<Real>(v.size()));
  for (std::size_t i = 0; i < u.size(); ++i)
    for (std::size_t j = 0; j < v.size(); ++j) {
      Real dot = 0;
      for (std::size_t c = 0; c < u[i].size(); ++c) dot += u[i][c] * v[j][c];
      s[i][j] = dot / (std::max(norm(u[i]), Real(1e-12)) * std::max(norm(v[j]), Real(1e-12)));
    }
  return s;
}

// -log of the diagonal softmax entry, averaged over rows.
inline Real infonce_rows(const Matrix& s, Real tau) {
  Real total = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    Real denom = 0;
    for (auto x : s[i]) denom += std::exp(x / tau);
    total += -std::log(std::exp(s[i][i] / tau) / denom);
  }
  return total / static_cast<Real>(s.size());
}

inline Matrix transposed(const Matrix& s) {
  Matrix t(s[0].size(), std::vector<Real>(s.size()));
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s[0].size(); ++j) t[j][i] = s[i][j];
  return t;
}

inline Real infonce(const Matrix& s, Real tau, bool symmetric) {
  const Real rows = infonce_rows(s, tau);
  return symmetric ? (rows + infonce_rows(transposed(s), tau)) / 2 : rows;
}

// Every hinge of one direction, largest first; mean of the first q.
inline Real triplet(const Matrix& s, Real margin, std::size_t top_q) {
  const std::size_t n = s.size();
  Real loss = 0;
  for (int direction = 0; direction < 2; ++direction) {
    std::vector<Real> hinges;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) {
          const Real neg = direction == 0 ? s[i][j] : s[j][i];
          hinges.push_back(std::max(Real(0), margin - s[i][i] + neg));
        }
    std::sort(hinges.rbegin(), hinges.rend());
    const std::size_t q = std::min(top_q, hinges.size());
    loss += std::accumulate(hinges.begin(), hinges.begin() + static_cast<long>(q), Real(0)) / static_cast<Real>(q);
  }
  return loss / 2;
}

// Brute force over every anchor and every ordered neighbour pair.
inline Real structure(const Matrix& inputs, const Matrix& emb, std::size_t k) {
  const std::size_t n = inputs.size();
  Real total = 0;
  std::size_t terms = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> others;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) others.push_back(j);
    std::stable_sort(others.begin(), others.end(), [&](std::size_t a, std::size_t b) {
      return dist(inputs[i], inputs[a]) < dist(inputs[i], inputs[b]);
    });
    others.resize(k);
    for (auto j : others)
      for (auto l : others)
        if (dist(inputs[i], inputs[j]) < dist(inputs[i], inputs[l])) {
          total += std::max(Real(0), dist(emb[i], emb[j]) - dist(emb[i], emb[l]));
          ++terms;
        }
  }
  return terms ? total / static_cast<Real>(terms) : 0;
}

// Rank of each aligned positive after a stable descending sort of its row.
inline std::vector<std::size_t> positive_ranks(const Matrix& s) {
  std::vector<std::size_t> ranks;
  for (std::size_t q = 0; q < s.size(); ++q) {
    std::vector<std::size_t> order(s.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[q][a] > s[q][b]; });
    ranks.push_back(static_cast<std::size_t>(std::find(order.begin(), order.end(), q) - order.begin()));
  }
  return ranks;
}

inline Real sigmoid(Real x) { return 1 / (1 + std::exp(-x)); }

// One LSTM direction, gate blocks [i, f, g, o] of width h.
inline Matrix lstm(const Matrix& x, const Matrix& w_in, const std::vector<Real>& b, const Matrix& w_rec, bool reverse) {
  const std::size_t T = x.size(), h = w_rec.size();
  Matrix out(T, std::vector<Real>(h, 0));
  std::vector<Real> hid(h, 0), cell(h, 0);
  for (std::size_t step = 0; step < T; ++step) {
    const std::size_t t = reverse ? T - 1 - step : step;
    std::vector<Real> z(b);
    for (std::size_t c = 0; c < 4 * h; ++c) {
      for (std::size_t r = 0; r < x[t].size(); ++r) z[c] += x[t][r] * w_in[r][c];
      for (std::size_t r = 0; r < h; ++r) z[c] += hid[r] * w_rec[r][c];
    }
    for (std::size_t u = 0; u < h; ++u) {
      const Real i = sigmoid(z[u]), f = sigmoid(z[h + u]), g = std::tanh(z[2 * h + u]), o = sigmoid(z[3 * h + u]);
      cell[u] = f * cell[u] + i * g;
      hid[u] = o * std::tanh(cell[u]);
    }
    out[t] = hid;
  }
  return out;
}

inline std::vector<double> random_values(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

}  // namespace oracle
