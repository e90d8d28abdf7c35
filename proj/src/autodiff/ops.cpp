#include "osm/autodiff/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "osm/autodiff/kernels.hpp"
#include "osm/autodiff/rng.hpp"
#include "osm/errors.hpp"

namespace osm::ad {
namespace {

thread_local MacCounter* t_counter = nullptr;

template <typename T>
std::string dims(const Tensor<T>& t) {
  return t.shape_string();
}

enum class Broadcast { same, row, scalar };

template <typename T>
Broadcast classify(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return Broadcast::same;
  if (b.size() == 1) return Broadcast::scalar;
  if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::row;
  throw DimensionError(std::string(op) + ": cannot combine " + dims(a) + " with " + dims(b));
}

template <typename T>
void accumulate(Tape<T>& tape, std::uint32_t id, const T* src) {
  if (!tape.requires_grad(id)) return;
  const auto n = tape.value(id).size();
  kernels::active<T>().add_inplace(n, src, tape.grad_buffer(id));
}

// Adds g (R x C) into the gradient of an operand broadcast as `mode`.
template <typename T>
void accumulate_broadcast(Tape<T>& tape, std::uint32_t id, const Tensor<T>& g, Broadcast mode) {
  if (!tape.requires_grad(id)) return;
  T* dst = tape.grad_buffer(id);
  const std::size_t r = g.rows(), c = g.cols();
  switch (mode) {
    case Broadcast::same:
      kernels::active<T>().add_inplace(g.size(), g.data(), dst);
      break;
    case Broadcast::row:
      for (std::size_t i = 0; i < r; ++i) kernels::active<T>().add_inplace(c, g.data() + i * c, dst);
      break;
    case Broadcast::scalar: {
      T s = 0;
      for (std::size_t i = 0; i < g.size(); ++i) s += g[i];
      dst[0] += s;
      break;
    }
  }
}

template <typename T>
T broadcast_at(const Tensor<T>& b, Broadcast mode, std::size_t i, std::size_t cols) {
  switch (mode) {
    case Broadcast::same:
      return b[i];
    case Broadcast::row:
      return b[i % cols];
    case Broadcast::scalar:
      return b[0];
  }
  return T(0);
}

template <typename T>
Tensor<T> transpose_value(const Tensor<T>& a) {
  const std::size_t r = a.rows(), c = a.cols();
  Tensor<T> out(c, r);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(j, i) = a(i, j);
  return out;
}

template <typename T>
T sigmoid_value(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T, typename Fwd, typename Deriv>
Var<T> unary(Var<T> a, Fwd fwd, Deriv deriv) {
  const Tensor<T>& av = a.value();
  Tensor<T> out(av.shape(), std::vector<T>(av.size()));
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  const auto ai = a.id;
  return a.tape->record(std::move(out), {a}, [ai, deriv](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& x = t.value(ai);
    const Tensor<T>& y = t.value(self);
    const Tensor<T>& g = t.grad(self);
    T* dx = t.grad_buffer(ai);
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] += g[i] * deriv(x[i], y[i]);
  });
}

}  // namespace

MacCounter::MacCounter() : parent_(t_counter) { t_counter = this; }

MacCounter::~MacCounter() {
  t_counter = parent_;
  if (parent_) parent_->count_ += count_;
}

void MacCounter::charge(std::uint64_t n) {
  if (t_counter) t_counter->count_ += n;
}

namespace {
void charge(std::uint64_t n) { MacCounter::charge(n); }
}  // namespace

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions differ, " + dims(av) + " x " + dims(bv));
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor<T> out(m, n);
  kernels::active<T>().gemm_nn(av.data(), bv.data(), out.data(), m, k, n, false);
  charge(static_cast<std::uint64_t>(m) * k * n);
  const auto ai = a.id, bi = b.id;
  return a.tape->record(std::move(out), {a, b}, [ai, bi, m, k, n](Tape<T>& t, std::uint32_t self) {
    const auto& kt = kernels::active<T>();
    const Tensor<T>& g = t.grad(self);
    if (t.requires_grad(ai)) {
      const Tensor<T> bt = transpose_value(t.value(bi));
      kt.gemm_nn(g.data(), bt.data(), t.grad_buffer(ai), m, n, k, true);
    }
    if (t.requires_grad(bi)) {
      const Tensor<T> at = transpose_value(t.value(ai));
      kt.gemm_nn(at.data(), g.data(), t.grad_buffer(bi), k, m, n, true);
    }
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  const auto ai = a.id;
  return a.tape->record(transpose_value(a.value()), {a}, [ai](Tape<T>& t, std::uint32_t self) {
    const Tensor<T> gt = transpose_value(t.grad(self));
    accumulate(t, ai, gt.data());
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const Broadcast mode = classify(av, bv, "add");
  Tensor<T> out = av;
  const std::size_t c = av.cols();
  if (mode == Broadcast::same) {
    kernels::active<T>().add_inplace(out.size(), bv.data(), out.data());
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] + broadcast_at(bv, mode, i, c);
  }
  const auto ai = a.id, bi = b.id;
  return a.tape->record(std::move(out), {a, b}, [ai, bi, mode](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad(self);
    accumulate(t, ai, g.data());
    accumulate_broadcast(t, bi, g, mode);
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const Broadcast mode = classify(av, bv, "sub");
  Tensor<T> out = av;
  const std::size_t c = av.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] - broadcast_at(bv, mode, i, c);
  const auto ai = a.id, bi = b.id;
  return a.tape->record(std::move(out), {a, b}, [ai, bi, mode](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad(self);
    accumulate(t, ai, g.data());
    if (t.requires_grad(bi)) {
      Tensor<T> neg = g;
      for (auto& v : neg.storage()) v = -v;
      accumulate_broadcast(t, bi, neg, mode);
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const Broadcast mode = classify(av, bv, "mul");
  Tensor<T> out(av.shape(), std::vector<T>(av.size()));
  const std::size_t c = av.cols();
  if (mode == Broadcast::same) {
    kernels::active<T>().mul(out.size(), av.data(), bv.data(), out.data());
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * broadcast_at(bv, mode, i, c);
  }
  const auto ai = a.id, bi = b.id;
  return a.tape->record(std::move(out), {a, b}, [ai, bi, mode, c](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& x = t.value(ai);
    const Tensor<T>& y = t.value(bi);
    if (t.requires_grad(ai)) {
      T* dx = t.grad_buffer(ai);
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * broadcast_at(y, mode, i, c);
    }
    if (t.requires_grad(bi)) {
      Tensor<T> gx(g.shape(), std::vector<T>(g.size()));
      kernels::active<T>().mul(g.size(), g.data(), x.data(), gx.data());
      accumulate_broadcast(t, bi, gx, mode);
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v *= s;
  const auto ai = a.id;
  return a.tape->record(std::move(out), {a}, [ai, s](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad(self);
    if (t.requires_grad(ai)) kernels::active<T>().axpy(g.size(), s, g.data(), t.grad_buffer(ai));
  });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v += s;
  const auto ai = a.id;
  return a.tape->record(std::move(out), {a}, [ai](Tape<T>& t, std::uint32_t self) {
    accumulate(t, ai, t.grad(self).data());
  });
}

template <typename T>
Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t end) {
  const Tensor<T>& av = a.value();
  if (begin > end || end > av.cols()) {
    throw DimensionError("slice_cols [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of range for " + dims(av));
  }
  const std::size_t r = av.rows(), c = av.cols(), w = end - begin;
  Tensor<T> out(r, w);
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(av.data() + i * c + begin, w, out.data() + i * w);
  const auto ai = a.id;
  return a.tape->record(std::move(out), {a}, [ai, r, c, w, begin](Tape<T>& t, std::uint32_t self) {
    if (!t.requires_grad(ai)) return;
    const Tensor<T>& g = t.grad(self);
    T* dx = t.grad_buffer(ai);
    for (std::size_t i = 0; i < r; ++i)
      kernels::active<T>().add_inplace(w, g.data() + i * w, dx + i * c + begin);
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols of zero tensors");
  const std::size_t r = parts[0].rows();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    if (p.rows() != r) {
      throw DimensionError("concat_cols: row mismatch " + dims(parts[0].value()) + " vs " +
                           dims(p.value()));
    }
    widths.push_back(p.cols());
    total += p.cols();
  }
  Tensor<T> out(r, total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor<T>& v = parts[k].value();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(v.data() + i * widths[k], widths[k], out.data() + i * total + off);
    off += widths[k];
  }
  std::vector<std::uint32_t> ids;
  for (const auto& p : parts) ids.push_back(p.id);
  return parts[0].tape->record(
      std::move(out), parts, [ids, widths, r, total](Tape<T>& t, std::uint32_t self) {
        const Tensor<T>& g = t.grad(self);
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (t.requires_grad(ids[k])) {
            T* dx = t.grad_buffer(ids[k]);
            for (std::size_t i = 0; i < r; ++i)
              kernels::active<T>().add_inplace(widths[k], g.data() + i * total + off,
                                               dx + i * widths[k]);
          }
          off += widths[k];
        }
      });
}

template <typename T>
Var<T> slice_rows(Var<T> a, std::size_t begin, std::size_t end) {
  const Tensor<T>& av = a.value();
  if (begin > end || end > av.rows()) {
    throw DimensionError("slice_rows [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of range for " + dims(av));
  }
  const std::size_t c = av.cols();
  Tensor<T> out(end - begin, c);
  std::copy_n(av.data() + begin * c, (end - begin) * c, out.data());
  const auto ai = a.id;
  return a.tape->record(std::move(out), {a}, [ai, begin, c](Tape<T>& t, std::uint32_t self) {
    if (!t.requires_grad(ai)) return;
    const Tensor<T>& g = t.grad(self);
    kernels::active<T>().add_inplace(g.size(), g.data(), t.grad_buffer(ai) + begin * c);
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows of zero tensors");
  const std::size_t c = parts[0].cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) {
      throw DimensionError("concat_rows: column mismatch " + dims(parts[0].value()) + " vs " +
                           dims(p.value()));
    }
    total += p.rows();
  }
  Tensor<T> out(total, c);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy_n(p.value().data(), p.value().size(), out.data() + off);
    off += p.value().size();
  }
  std::vector<std::uint32_t> ids;
  for (const auto& p : parts) ids.push_back(p.id);
  return parts[0].tape->record(std::move(out), parts, [ids](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad(self);
    std::size_t off = 0;
    for (auto id : ids) {
      const std::size_t n = t.value(id).size();
      if (t.requires_grad(id)) kernels::active<T>().add_inplace(n, g.data() + off, t.grad_buffer(id));
      off += n;
    }
  });
}

template <typename T>
Var<T> take_cols(Var<T> a, std::span<const int> index, T fill) {
  const Tensor<T>& av = a.value();
  const std::size_t r = av.rows(), c = av.cols(), w = index.size();
  for (int j : index) {
    if (j >= static_cast<int>(c)) {
      throw DimensionError("take_cols: index " + std::to_string(j) + " out of range for " +
                           dims(av));
    }
  }
  Tensor<T> out(r, w);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j)
      out(i, j) = index[j] >= 0 ? av(i, static_cast<std::size_t>(index[j])) : fill;
  const auto ai = a.id;
  std::vector<int> idx(index.begin(), index.end());
  return a.tape->record(std::move(out), {a}, [ai, idx, r, c](Tape<T>& t, std::uint32_t self) {
    if (!t.requires_grad(ai)) return;
    const Tensor<T>& g = t.grad(self);
    T* dx = t.grad_buffer(ai);
    const std::size_t w = idx.size();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j)
        if (idx[j] >= 0) dx[i * c + static_cast<std::size_t>(idx[j])] += g[i * w + j];
  });
}

template <typename T>
Var<T> gather_rows(Var<T> a, std::span<const int> index) {
  const Tensor<T>& av = a.value();
  const std::size_t c = av.cols();
  for (int i : index) {
    if (i >= static_cast<int>(av.rows())) {
      throw DimensionError("gather_rows: index " + std::to_string(i) + " out of range for " +
                           dims(av));
    }
  }
  Tensor<T> out(index.size(), c);
  for (std::size_t i = 0; i < index.size(); ++i)
    if (index[i] >= 0) std::copy_n(av.data() + static_cast<std::size_t>(index[i]) * c, c, out.data() + i * c);
  const auto ai = a.id;
  std::vector<int> idx(index.begin(), index.end());
  return a.tape->record(std::move(out), {a}, [ai, idx, c](Tape<T>& t, std::uint32_t self) {
    if (!t.requires_grad(ai)) return;
    const Tensor<T>& g = t.grad(self);
    T* dx = t.grad_buffer(ai);
    for (std::size_t i = 0; i < idx.size(); ++i)
      if (idx[i] >= 0)
        kernels::active<T>().add_inplace(c, g.data() + i * c, dx + static_cast<std::size_t>(idx[i]) * c);
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  return unary<T>(
      a, [](T x) { return x > 0 ? x : T(0); }, [](T x, T) { return x > 0 ? T(1) : T(0); });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  return unary<T>(a, [](T x) { return sigmoid_value(x); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> swish(Var<T> a) {
  return unary<T>(
      a, [](T x) { return x * sigmoid_value(x); },
      [](T x, T) {
        const T s = sigmoid_value(x);
        return s * (T(1) + x * (T(1) - s));
      });
}

template <typename T>
Var<T> sqrt(Var<T> a) {
  for (T v : a.value().values()) {
    if (v < 0) throw DomainError("sqrt of negative value");
  }
  // The derivative is unbounded at 0; zero is used as the subgradient there.
  return unary<T>(
      a, [](T x) { return std::sqrt(x); }, [](T, T y) { return y > 0 ? T(0.5) / y : T(0); });
}

template <typename T>
Var<T> clamp(Var<T> a, T lo, T hi) {
  if (lo > hi) throw DomainError("clamp: lo > hi");
  return unary<T>(
      a, [lo, hi](T x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& gv = gamma.value();
  const Tensor<T>& bv = beta.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  if (gv.size() != c || bv.size() != c) {
    throw DimensionError("layer_norm: scale/shift " + dims(gv) + "/" + dims(bv) +
                         " do not match input " + dims(xv));
  }
  Tensor<T> out(r, c);
  Tensor<T> xhat(r, c);
  std::vector<T> rstd(r);
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = xv.data() + i * c;
    T mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<T>(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(c);
    rstd[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat(i, j) = (row[j] - mu) * rstd[i];
      out(i, j) = xhat(i, j) * gv[j] + bv[j];
    }
  }
  const auto xi = x.id, gi = gamma.id, bi = beta.id;
  return x.tape->record(
      std::move(out), {x, gamma, beta},
      [xi, gi, bi, r, c, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t,
                                                                         std::uint32_t self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& gam = t.value(gi);
        if (t.requires_grad(gi)) {
          T* dg = t.grad_buffer(gi);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) dg[j] += g(i, j) * xhat(i, j);
        }
        if (t.requires_grad(bi)) {
          T* db = t.grad_buffer(bi);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) db[j] += g(i, j);
        }
        if (t.requires_grad(xi)) {
          T* dx = t.grad_buffer(xi);
          std::vector<T> dxhat(c);
          for (std::size_t i = 0; i < r; ++i) {
            T m1 = 0, m2 = 0;
            for (std::size_t j = 0; j < c; ++j) {
              dxhat[j] = g(i, j) * gam[j];
              m1 += dxhat[j];
              m2 += dxhat[j] * xhat(i, j);
            }
            m1 /= static_cast<T>(c);
            m2 /= static_cast<T>(c);
            for (std::size_t j = 0; j < c; ++j)
              dx[i * c + j] += rstd[i] * (dxhat[j] - m1 - xhat(i, j) * m2);
          }
        }
      });
}

template <typename T>
Var<T> dropout(Var<T> x, double p, std::uint64_t key) {
  if (p < 0.0 || p >= 1.0) throw DomainError("dropout probability must be in [0, 1)");
  if (p == 0.0) return x;
  const Tensor<T>& xv = x.value();
  Tensor<T> keep(xv.shape(), std::vector<T>(xv.size()));
  const T s = static_cast<T>(1.0 / (1.0 - p));
  for (std::size_t i = 0; i < xv.size(); ++i)
    keep[i] = CounterRng::to_unit(CounterRng::at(key, i)) >= p ? s : T(0);
  Tensor<T> out(xv.shape(), std::vector<T>(xv.size()));
  kernels::active<T>().mul(xv.size(), xv.data(), keep.data(), out.data());
  const auto xi = x.id;
  return x.tape->record(std::move(out), {x}, [xi, keep = std::move(keep)](Tape<T>& t, std::uint32_t self) {
    if (!t.requires_grad(xi)) return;
    const Tensor<T>& g = t.grad(self);
    T* dx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * keep[i];
  });
}

template <typename T>
Tensor<T> softmax_rows_value(const Tensor<T>& s, T temperature) {
  if (!(temperature > 0)) throw DomainError("softmax temperature must be positive");
  const std::size_t r = s.rows(), c = s.cols();
  Tensor<T> out(r, c);
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = s.data() + i * c;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, row[j]);
    T z = 0;
    for (std::size_t j = 0; j < c; ++j) {
      out(i, j) = std::exp((row[j] - mx) / temperature);
      z += out(i, j);
    }
    for (std::size_t j = 0; j < c; ++j) out(i, j) /= z;
  }
  return out;
}

template <typename T>
Var<T> softmax_rows(Var<T> s, T temperature) {
  Tensor<T> out = softmax_rows_value(s.value(), temperature);
  const auto si = s.id;
  const std::size_t r = out.rows(), c = out.cols();
  return s.tape->record(std::move(out), {s}, [si, r, c, temperature](Tape<T>& t, std::uint32_t self) {
    if (!t.requires_grad(si)) return;
    const Tensor<T>& y = t.value(self);
    const Tensor<T>& g = t.grad(self);
    T* ds = t.grad_buffer(si);
    for (std::size_t i = 0; i < r; ++i) {
      T dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < c; ++j) ds[i * c + j] += y(i, j) * (g(i, j) - dot) / temperature;
    }
  });
}

template <typename T>
Var<T> log_softmax_rows(Var<T> x) {
  const Tensor<T>& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  Tensor<T> out(r, c);
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = xv.data() + i * c;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, row[j]);
    T z = 0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const T lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) out(i, j) = row[j] - lse;
  }
  const auto xi = x.id;
  return x.tape->record(std::move(out), {x}, [xi, r, c](Tape<T>& t, std::uint32_t self) {
    if (!t.requires_grad(xi)) return;
    const Tensor<T>& y = t.value(self);
    const Tensor<T>& g = t.grad(self);
    T* dx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < r; ++i) {
      T gs = 0;
      for (std::size_t j = 0; j < c; ++j) gs += g(i, j);
      for (std::size_t j = 0; j < c; ++j) dx[i * c + j] += g(i, j) - std::exp(y(i, j)) * gs;
    }
  });
}

template <typename T>
Var<T> logsumexp(Var<T> x, int axis) {
  const Tensor<T>& xv = x.value();
  if (axis != 0 && axis != 1) throw DimensionError("logsumexp: axis must be 0 or 1");
  const std::size_t r = xv.rows(), c = xv.cols();
  if ((axis == 0 && r == 0) || (axis == 1 && c == 0) || xv.size() == 0) {
    throw DimensionError("logsumexp over an empty axis of " + dims(xv));
  }
  const std::size_t outer = axis == 0 ? c : r;
  const std::size_t inner = axis == 0 ? r : c;
  auto at = [&](const Tensor<T>& t, std::size_t o, std::size_t i) -> T {
    return axis == 0 ? t(i, o) : t(o, i);
  };
  Tensor<T> out = axis == 0 ? Tensor<T>(1, c) : Tensor<T>(r, 1);
  constexpr T ninf = -std::numeric_limits<T>::infinity();
  for (std::size_t o = 0; o < outer; ++o) {
    T mx = ninf;
    for (std::size_t i = 0; i < inner; ++i) mx = std::max(mx, at(xv, o, i));
    if (mx == ninf) {
      out[o] = ninf;
      continue;
    }
    T z = 0;
    for (std::size_t i = 0; i < inner; ++i) z += std::exp(at(xv, o, i) - mx);
    out[o] = mx + std::log(z);
  }
  const auto xi = x.id;
  return x.tape->record(std::move(out), {x}, [xi, axis, r, c, outer, inner](Tape<T>& t, std::uint32_t self) {
    if (!t.requires_grad(xi)) return;
    const Tensor<T>& xv = t.value(xi);
    const Tensor<T>& y = t.value(self);
    const Tensor<T>& g = t.grad(self);
    T* dx = t.grad_buffer(xi);
    for (std::size_t o = 0; o < outer; ++o) {
      if (std::isinf(y[o]) && y[o] < 0) continue;
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t idx = axis == 0 ? i * c + o : o * c + i;
        dx[idx] += g[o] * std::exp(xv[idx] - y[o]);
      }
    }
    (void)r;
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  T s = 0;
  for (T v : x.value().values()) s += v;
  const auto xi = x.id;
  return x.tape->record(Tensor<T>::scalar(s), {x}, [xi](Tape<T>& t, std::uint32_t self) {
    if (!t.requires_grad(xi)) return;
    const T g = t.grad(self)[0];
    T* dx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < t.value(xi).size(); ++i) dx[i] += g;
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(n));
}

template <typename T>
Var<T> sum_axis(Var<T> x, int axis) {
  const Tensor<T>& xv = x.value();
  if (axis != 0 && axis != 1) throw DimensionError("sum_axis: axis must be 0 or 1");
  const std::size_t r = xv.rows(), c = xv.cols();
  Tensor<T> out = axis == 0 ? Tensor<T>(1, c) : Tensor<T>(r, 1);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[axis == 0 ? j : i] += xv(i, j);
  const auto xi = x.id;
  return x.tape->record(std::move(out), {x}, [xi, axis, r, c](Tape<T>& t, std::uint32_t self) {
    if (!t.requires_grad(xi)) return;
    const Tensor<T>& g = t.grad(self);
    T* dx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) dx[i * c + j] += g[axis == 0 ? j : i];
  });
}

template <typename T>
Var<T> depthwise_conv1d(Var<T> x, Var<T> w, Var<T> b) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  const Tensor<T>& bv = b.value();
  const std::size_t len = xv.rows(), c = xv.cols(), k = wv.rows();
  if (wv.cols() != c || bv.size() != c || k % 2 == 0) {
    throw DimensionError("depthwise_conv1d: input " + dims(xv) + ", kernel " + dims(wv) +
                         ", bias " + dims(bv));
  }
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  Tensor<T> out(len, c);
  for (std::size_t t = 0; t < len; ++t) {
    T* orow = out.data() + t * c;
    std::copy_n(bv.data(), c, orow);
    for (std::size_t q = 0; q < k; ++q) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + q) - pad;
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
      const T* xrow = xv.data() + static_cast<std::size_t>(src) * c;
      const T* wrow = wv.data() + q * c;
      for (std::size_t j = 0; j < c; ++j) orow[j] = orow[j] + wrow[j] * xrow[j];
    }
  }
  charge(static_cast<std::uint64_t>(len) * c * k);
  const auto xi = x.id, wi = w.id, bi = b.id;
  return x.tape->record(std::move(out), {x, w, b}, [xi, wi, bi, len, c, k, pad](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& xv = t.value(xi);
    const Tensor<T>& wv = t.value(wi);
    T* dx = t.requires_grad(xi) ? t.grad_buffer(xi) : nullptr;
    T* dw = t.requires_grad(wi) ? t.grad_buffer(wi) : nullptr;
    for (std::size_t tt = 0; tt < len; ++tt) {
      const T* grow = g.data() + tt * c;
      for (std::size_t q = 0; q < k; ++q) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(tt + q) - pad;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
        const std::size_t s = static_cast<std::size_t>(src);
        for (std::size_t j = 0; j < c; ++j) {
          if (dx) dx[s * c + j] += wv[q * c + j] * grow[j];
          if (dw) dw[q * c + j] += xv[s * c + j] * grow[j];
        }
      }
    }
    if (t.requires_grad(bi)) {
      T* db = t.grad_buffer(bi);
      for (std::size_t tt = 0; tt < len; ++tt)
        for (std::size_t j = 0; j < c; ++j) db[j] += g[tt * c + j];
    }
  });
}

template <typename T>
Var<T> straight_through(Var<T> a, Tensor<T> forward_value) {
  if (forward_value.size() != a.value().size()) {
    throw DimensionError("straight_through: value " + dims(forward_value) + " vs input " +
                         dims(a.value()));
  }
  Tensor<T> out(a.value().shape(), forward_value.storage());
  const auto ai = a.id;
  return a.tape->record(std::move(out), {a}, [ai](Tape<T>& t, std::uint32_t self) {
    accumulate(t, ai, t.grad(self).data());
  });
}

#define OSM_INSTANTIATE_OPS(T)                                                   \
  template Var<T> matmul(Var<T>, Var<T>);                                        \
  template Var<T> transpose(Var<T>);                                             \
  template Var<T> add(Var<T>, Var<T>);                                           \
  template Var<T> sub(Var<T>, Var<T>);                                           \
  template Var<T> mul(Var<T>, Var<T>);                                           \
  template Var<T> scale(Var<T>, T);                                              \
  template Var<T> add_scalar(Var<T>, T);                                         \
  template Var<T> slice_cols(Var<T>, std::size_t, std::size_t);                  \
  template Var<T> concat_cols(const std::vector<Var<T>>&);                       \
  template Var<T> slice_rows(Var<T>, std::size_t, std::size_t);                  \
  template Var<T> concat_rows(const std::vector<Var<T>>&);                       \
  template Var<T> take_cols(Var<T>, std::span<const int>, T);                    \
  template Var<T> gather_rows(Var<T>, std::span<const int>);                     \
  template Var<T> relu(Var<T>);                                                  \
  template Var<T> sigmoid(Var<T>);                                               \
  template Var<T> swish(Var<T>);                                                 \
  template Var<T> sqrt(Var<T>);                                                  \
  template Var<T> clamp(Var<T>, T, T);                                           \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                         \
  template Var<T> dropout(Var<T>, double, std::uint64_t);                        \
  template Var<T> softmax_rows(Var<T>, T);                                       \
  template Var<T> log_softmax_rows(Var<T>);                                      \
  template Var<T> logsumexp(Var<T>, int);                                        \
  template Var<T> sum(Var<T>);                                                   \
  template Var<T> mean(Var<T>);                                                  \
  template Var<T> sum_axis(Var<T>, int);                                         \
  template Var<T> depthwise_conv1d(Var<T>, Var<T>, Var<T>);                      \
  template Var<T> straight_through(Var<T>, Tensor<T>);                           \
  template Tensor<T> softmax_rows_value(const Tensor<T>&, T);

OSM_INSTANTIATE_OPS(float)
OSM_INSTANTIATE_OPS(double)

}  // namespace osm::ad
