#pragma once

// Dense-tensor numeric core with tape-based reverse-mode differentiation.
// Everything is templated on the scalar type: float for training, double
// when gradients have to survive a central-difference comparison.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "uld/errors.hpp"
#include "uld/rng.hpp"

namespace uld {

namespace detail {

template <typename T>
struct TensorNode {
  std::vector<std::size_t> shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily, same length as value once present
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

}  // namespace detail

template <typename T>
class Tape;

template <typename T>
class Tensor {
 public:
  using Node = detail::TensorNode<T>;

  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, T fill = T(0)) : node_(std::make_shared<Node>()) {
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive");
    }
    node_->shape = std::move(shape);
    node_->value.assign(detail::shape_numel(node_->shape), fill);
  }

  Tensor(std::vector<std::size_t> shape, std::vector<T> data) : node_(std::make_shared<Node>()) {
    if (detail::shape_numel(shape) != data.size()) {
      throw ShapeError("data length does not match shape");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(data);
  }

  static Tensor scalar(T v) { return Tensor({}, std::vector<T>{v}); }

  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix initializer");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor vector(std::vector<T> data) {
    const std::size_t n = data.size();
    return Tensor({n}, std::move(data));
  }

  static Tensor randn(std::vector<std::size_t> shape, Rng& rng, T stddev) {
    Tensor t(std::move(shape));
    for (auto& v : t.node_->value) v = static_cast<T>(rng.normal()) * stddev;
    return t;
  }

  bool defined() const { return node_ != nullptr; }

  const std::vector<std::size_t>& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  std::size_t rows() const {
    if (rank() != 2) throw ShapeError("rows(): tensor is not rank-2");
    return node_->shape[0];
  }
  std::size_t cols() const {
    if (rank() != 2) throw ShapeError("cols(): tensor is not rank-2");
    return node_->shape[1];
  }

  // A Tensor is a shared handle: const protects the handle, not the buffer.
  T* data() const { return node_->value.data(); }
  std::vector<T>& values() const { return node_->value; }

  T& operator[](std::size_t i) const { return node_->value[i]; }
  T& at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

  T item() const {
    if (numel() != 1) throw ContractError("item(): tensor is not scalar");
    return node_->value[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool flag) const { node_->requires_grad = flag; }

  std::vector<T>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() const {
    if (node_) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  Tensor clone() const {
    Tensor out(node_->shape, node_->value);
    return out;
  }

  bool finite() const {
    for (const T v : node_->value) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Ordered record of executed operations. Ops append themselves while a tape
// is active; backward() replays the record once in reverse, so every node is
// visited exactly once. Leaf gradients accumulate across backward() calls;
// interior gradients are rebuilt on each call.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return steps_.size(); }
  void reset() { steps_.clear(); }

  void record(const Tensor<T>& out, std::function<void()> pull) {
    steps_.push_back(Step{out.node(), std::move(pull)});
  }

  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) throw ContractError("backward: loss must be scalar");
    bool on_tape = false;
    for (auto& step : steps_) {
      step.out->ensure_grad();
      std::fill(step.out->grad.begin(), step.out->grad.end(), T(0));
      if (step.out == loss.node()) on_tape = true;
    }
    loss.node()->ensure_grad();
    if (on_tape) {
      loss.node()->grad[0] = T(1);
    } else {
      loss.node()->grad[0] += T(1);  // loss is itself a leaf
    }
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) it->pull();
  }

  static Tape*& active_slot() {
    thread_local Tape* active = nullptr;
    return active;
  }
  static Tape* active() { return active_slot(); }

  // RAII activation; pass nullptr to suspend recording.
  class Scope {
   public:
    explicit Scope(Tape* tape) : previous_(active_slot()) { active_slot() = tape; }
    ~Scope() { active_slot() = previous_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

 private:
  struct Step {
    std::shared_ptr<detail::TensorNode<T>> out;
    std::function<void()> pull;
  };
  std::vector<Step> steps_;
};

namespace detail {

template <typename T>
bool tracked(const Tensor<T>& t) {
  return Tape<T>::active() != nullptr && t.requires_grad();
}

template <typename T, typename Fn>
void maybe_record(Tensor<T>& out, bool track, Fn&& pull) {
  if (track) {
    out.set_requires_grad(true);
    Tape<T>::active()->record(out, std::forward<Fn>(pull));
  }
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) throw ShapeError(std::string(op) + ": shape mismatch");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
  const bool track = detail::tracked(a) || detail::tracked(b);
  detail::maybe_record(out, track, [a, b, out]() mutable {
    const auto& g = out.grad();
    if (a.requires_grad()) {
      auto& ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
  const bool track = detail::tracked(a) || detail::tracked(b);
  detail::maybe_record(out, track, [a, b, out]() mutable {
    const auto& g = out.grad();
    if (a.requires_grad()) {
      auto& ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
  const bool track = detail::tracked(a) || detail::tracked(b);
  detail::maybe_record(out, track, [a, b, out]() mutable {
    const auto& g = out.grad();
    if (a.requires_grad()) {
      auto& ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * factor;
  detail::maybe_record(out, detail::tracked(a), [a, out, factor]() mutable {
    const auto& g = out.grad();
    auto& ga = a.grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
  return out;
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return scale(a, T(-1));
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const T s = T(1) / (T(1) + std::exp(-a[i]));
    out[i] = a[i] * s;
  }
  detail::maybe_record(out, detail::tracked(a), [a, out]() mutable {
    const auto& g = out.grad();
    auto& ga = a.grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = T(1) / (T(1) + std::exp(-a[i]));
      ga[i] += g[i] * (s * (T(1) + a[i] * (T(1) - s)));
    }
  });
  return out;
}

// log(sigmoid(x)), computed through softplus for stability at both tails.
template <typename T>
Tensor<T> logsigmoid(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const T x = a[i];
    out[i] = x < T(0) ? x - std::log1p(std::exp(x)) : -std::log1p(std::exp(-x));
  }
  detail::maybe_record(out, detail::tracked(a), [a, out]() mutable {
    const auto& g = out.grad();
    auto& ga = a.grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i] / (T(1) + std::exp(a[i]));  // sigmoid(-x)
    }
  });
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T(0);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) total += a[i];
  Tensor<T> out = Tensor<T>::scalar(total);
  detail::maybe_record(out, detail::tracked(a), [a, out]() mutable {
    const T g = out.grad()[0];
    auto& ga = a.grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
  return out;
}

// ---------------------------------------------------------------------------
// matrix ops

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions disagree");
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor<T> out({m, n});
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T av = pa[i * k + kk];
      const T* brow = pb + kk * n;
      T* orow = po + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  const bool track = detail::tracked(a) || detail::tracked(b);
  detail::maybe_record(out, track, [a, b, out, m, k, n]() mutable {
    const T* g = out.grad().data();
    if (a.requires_grad()) {
      auto& ga = a.grad();
      const T* pb = b.data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          const T gv = g[i * n + j];
          const T* brow = pb + j;  // column j of b, strided
          for (std::size_t kk = 0; kk < k; ++kk) ga[i * k + kk] += gv * brow[kk * n];
        }
      }
    }
    if (b.requires_grad()) {
      auto& gb = b.grad();
      const T* pa = a.data();
      for (std::size_t kk = 0; kk < k; ++kk) {
        for (std::size_t i = 0; i < m; ++i) {
          const T av = pa[i * k + kk];
          const T* grow = g + i * n;
          for (std::size_t j = 0; j < n; ++j) gb[kk * n + j] += av * grow[j];
        }
      }
    }
  });
  return out;
}

// a [m x k] times b-transpose where b is [n x k]; result [m x n].
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: inner dimensions disagree");
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor<T> out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = T(0);
      const T* arow = a.data() + i * k;
      const T* brow = b.data() + j * k;
      for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      out.at(i, j) = acc;
    }
  }
  const bool track = detail::tracked(a) || detail::tracked(b);
  detail::maybe_record(out, track, [a, b, out, m, k, n]() mutable {
    const T* g = out.grad().data();
    if (a.requires_grad()) {
      auto& ga = a.grad();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          const T gv = g[i * n + j];
          const T* brow = b.data() + j * k;
          for (std::size_t kk = 0; kk < k; ++kk) ga[i * k + kk] += gv * brow[kk];
        }
      }
    }
    if (b.requires_grad()) {
      auto& gb = b.grad();
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i < m; ++i) {
          const T gv = g[i * n + j];
          const T* arow = a.data() + i * k;
          for (std::size_t kk = 0; kk < k; ++kk) gb[j * k + kk] += gv * arow[kk];
        }
      }
    }
  });
  return out;
}

namespace detail {

// Rows of a rank-1 tensor: one row spanning the whole buffer.
template <typename T>
std::pair<std::size_t, std::size_t> row_view(const Tensor<T>& t, const char* op) {
  if (t.rank() == 1) return {1, t.shape()[0]};
  if (t.rank() == 2) return {t.shape()[0], t.shape()[1]};
  throw ShapeError(std::string(op) + ": expected rank-1 or rank-2 tensor");
}

}  // namespace detail

// Numerically stable softmax over the last dimension.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  const auto [rows, cols] = detail::row_view(x, "softmax");
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * cols;
    T* o = out.data() + r * cols;
    T mx = in[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
    T denom = T(0);
    for (std::size_t c = 0; c < cols; ++c) {
      o[c] = std::exp(in[c] - mx);
      denom += o[c];
    }
    const T inv = T(1) / denom;
    for (std::size_t c = 0; c < cols; ++c) o[c] *= inv;
  }
  detail::maybe_record(out, detail::tracked(x), [x, out, rows = rows, cols = cols]() mutable {
    const T* g = out.grad().data();
    auto& gx = x.grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = out.data() + r * cols;
      const T* gr = g + r * cols;
      T dot = T(0);
      for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * y[c];
      for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += y[c] * (gr[c] - dot);
    }
  });
  return out;
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x) {
  const auto [rows, cols] = detail::row_view(x, "log_softmax");
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * cols;
    T* o = out.data() + r * cols;
    T mx = in[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
    T denom = T(0);
    for (std::size_t c = 0; c < cols; ++c) denom += std::exp(in[c] - mx);
    const T lse = mx + std::log(denom);
    for (std::size_t c = 0; c < cols; ++c) o[c] = in[c] - lse;
  }
  detail::maybe_record(out, detail::tracked(x), [x, out, rows = rows, cols = cols]() mutable {
    const T* g = out.grad().data();
    auto& gx = x.grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* lp = out.data() + r * cols;
      const T* gr = g + r * cols;
      T gsum = T(0);
      for (std::size_t c = 0; c < cols; ++c) gsum += gr[c];
      for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += gr[c] - std::exp(lp[c]) * gsum;
    }
  });
  return out;
}

inline constexpr double kRmsNormEps = 1e-5;

// x / sqrt(mean(x^2) + eps) * gain, row-wise; gain has the row width.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain) {
  const auto [rows, cols] = detail::row_view(x, "rms_norm");
  if (gain.rank() != 1 || gain.shape()[0] != cols) throw ShapeError("rms_norm: gain width mismatch");
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * cols;
    T* o = out.data() + r * cols;
    T msq = T(0);
    for (std::size_t c = 0; c < cols; ++c) msq += in[c] * in[c];
    msq /= static_cast<T>(cols);
    const T inv = T(1) / std::sqrt(msq + static_cast<T>(kRmsNormEps));
    for (std::size_t c = 0; c < cols; ++c) o[c] = in[c] * inv * gain[c];
  }
  const bool track = detail::tracked(x) || detail::tracked(gain);
  detail::maybe_record(out, track, [x, gain, out, rows = rows, cols = cols]() mutable {
    const T* g = out.grad().data();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* in = x.data() + r * cols;
      const T* gr = g + r * cols;
      T msq = T(0);
      for (std::size_t c = 0; c < cols; ++c) msq += in[c] * in[c];
      msq /= static_cast<T>(cols);
      const T s = std::sqrt(msq + static_cast<T>(kRmsNormEps));
      const T inv = T(1) / s;
      if (x.requires_grad()) {
        auto& gx = x.grad();
        T dot = T(0);  // sum_i g_i * gain_i * x_i
        for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * gain[c] * in[c];
        const T coef = dot / (static_cast<T>(cols) * s * s * s);
        for (std::size_t c = 0; c < cols; ++c) {
          gx[r * cols + c] += gr[c] * gain[c] * inv - in[c] * coef;
        }
      }
      if (gain.requires_grad()) {
        auto& gg = gain.grad();
        for (std::size_t c = 0; c < cols; ++c) gg[c] += gr[c] * in[c] * inv;
      }
    }
  });
  return out;
}

// Token-id row gather from an embedding table.
template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const int> ids) {
  if (table.rank() != 2) throw ShapeError("embedding_lookup: table must be rank-2");
  const std::size_t vocab = table.rows(), dim = table.cols();
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw std::out_of_range("embedding_lookup: token id out of range");
    }
  }
  Tensor<T> out({ids.size(), dim});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const T* src = table.data() + static_cast<std::size_t>(ids[i]) * dim;
    std::copy(src, src + dim, out.data() + i * dim);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  detail::maybe_record(out, detail::tracked(table), [table, out, idv, dim]() mutable {
    const T* g = out.grad().data();
    auto& gt = table.grad();
    for (std::size_t i = 0; i < idv.size(); ++i) {
      T* dst = gt.data() + static_cast<std::size_t>(idv[i]) * dim;
      const T* src = g + i * dim;
      for (std::size_t c = 0; c < dim; ++c) dst[c] += src[c];
    }
  });
  return out;
}

// Rotary position mixing applied per head to a [seq x width] activation;
// row index is the absolute position.
template <typename T>
Tensor<T> rope(const Tensor<T>& x, std::size_t n_heads, T base = T(10000)) {
  if (x.rank() != 2) throw ShapeError("rope: expected rank-2 tensor");
  const std::size_t seq = x.rows(), width = x.cols();
  if (n_heads == 0 || width % n_heads != 0) throw ShapeError("rope: width not divisible by heads");
  const std::size_t head_dim = width / n_heads;
  if (head_dim % 2 != 0) throw ShapeError("rope: head dimension must be even");
  Tensor<T> out(x.shape());
  auto rotate = [n_heads, head_dim, base](const T* in, T* o, std::size_t pos, T sign) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t base_col = h * head_dim;
      for (std::size_t i = 0; i < head_dim / 2; ++i) {
        const T theta = sign * static_cast<T>(pos) *
                        std::pow(base, -static_cast<T>(2 * i) / static_cast<T>(head_dim));
        const T c = std::cos(theta), s = std::sin(theta);
        const T a = in[base_col + 2 * i], b = in[base_col + 2 * i + 1];
        o[base_col + 2 * i] = a * c - b * s;
        o[base_col + 2 * i + 1] = a * s + b * c;
      }
    }
  };
  for (std::size_t p = 0; p < seq; ++p) rotate(x.data() + p * width, out.data() + p * width, p, T(1));
  detail::maybe_record(out, detail::tracked(x), [x, out, seq, width, rotate]() mutable {
    auto& gx = x.grad();
    std::vector<T> tmp(width);
    for (std::size_t p = 0; p < seq; ++p) {
      rotate(out.grad().data() + p * width, tmp.data(), p, T(-1));  // inverse rotation
      for (std::size_t c = 0; c < width; ++c) gx[p * width + c] += tmp[c];
    }
  });
  return out;
}

inline constexpr double kCausalMaskValue = -1e9;

// Replaces strictly-upper-triangle scores so the softmax assigns them no mass.
template <typename T>
Tensor<T> causal_mask(const Tensor<T>& scores) {
  if (scores.rank() != 2 || scores.rows() != scores.cols()) {
    throw ShapeError("causal_mask: expected square score matrix");
  }
  const std::size_t n = scores.rows();
  Tensor<T> out(scores.shape());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      out.at(i, j) = j <= i ? scores.at(i, j) : static_cast<T>(kCausalMaskValue);
    }
  }
  detail::maybe_record(out, detail::tracked(scores), [scores, out, n]() mutable {
    const T* g = out.grad().data();
    auto& gs = scores.grad();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j <= i; ++j) gs[i * n + j] += g[i * n + j];
    }
  });
  return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t first, std::size_t count) {
  if (x.rank() != 2) throw ShapeError("slice_cols: expected rank-2 tensor");
  const std::size_t rows = x.rows(), cols = x.cols();
  if (first + count > cols || count == 0) throw ShapeError("slice_cols: range out of bounds");
  Tensor<T> out({rows, count});
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = x.data() + r * cols + first;
    std::copy(src, src + count, out.data() + r * count);
  }
  detail::maybe_record(out, detail::tracked(x), [x, out, rows, cols, first, count]() mutable {
    const T* g = out.grad().data();
    auto& gx = x.grad();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < count; ++c) gx[r * cols + first + c] += g[r * count + c];
    }
  });
  return out;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts.front().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.rows() != rows) throw ShapeError("concat_cols: row mismatch");
    total += p.cols();
  }
  Tensor<T> out({rows, total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(p.data() + r * p.cols(), p.data() + (r + 1) * p.cols(),
                out.data() + r * total + off);
    }
    off += p.cols();
  }
  bool track = false;
  for (const auto& p : parts) track = track || detail::tracked(p);
  detail::maybe_record(out, track, [parts, out, rows, total]() mutable {
    const T* g = out.grad().data();
    std::size_t off = 0;
    for (auto& p : parts) {
      if (p.requires_grad()) {
        auto& gp = p.grad();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < p.cols(); ++c) gp[r * p.cols() + c] += g[r * total + off + c];
        }
      }
      off += p.cols();
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// fused loss kernels (log-sum-exp path; probabilities are never materialized
// in the forward value)

namespace detail {

template <typename T>
T row_logsumexp(const T* row, std::size_t n) {
  T mx = row[0];
  for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, row[c]);
  T denom = T(0);
  for (std::size_t c = 0; c < n; ++c) denom += std::exp(row[c] - mx);
  return mx + std::log(denom);
}

}  // namespace detail

// -log softmax(logits)[target] for a single logit row.
template <typename T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits, int target) {
  if (logits.rank() != 1) throw ShapeError("cross_entropy_logits: expected rank-1 logits");
  const std::size_t vocab = logits.shape()[0];
  if (target < 0 || static_cast<std::size_t>(target) >= vocab) {
    throw std::out_of_range("cross_entropy_logits: target out of range");
  }
  const T lse = detail::row_logsumexp(logits.data(), vocab);
  Tensor<T> out = Tensor<T>::scalar(lse - logits[static_cast<std::size_t>(target)]);
  detail::maybe_record(out, detail::tracked(logits), [logits, out, target, vocab]() mutable {
    const T g = out.grad()[0];
    const T lse = detail::row_logsumexp(logits.data(), vocab);
    auto& gl = logits.grad();
    for (std::size_t c = 0; c < vocab; ++c) {
      T d = std::exp(logits[c] - lse);
      if (c == static_cast<std::size_t>(target)) d -= T(1);
      gl[c] += g * d;
    }
  });
  return out;
}

// Sum over rows with targets[r] >= 0 of -log softmax(logits[r])[targets[r]].
// targets.size() must equal the number of logit rows; -1 skips a row.
template <typename T>
Tensor<T> masked_ce_sum(const Tensor<T>& logits, const std::vector<int>& targets) {
  if (logits.rank() != 2) throw ShapeError("masked_ce_sum: expected rank-2 logits");
  const std::size_t rows = logits.rows(), vocab = logits.cols();
  if (targets.size() != rows) throw ShapeError("masked_ce_sum: target length mismatch");
  T total = T(0);
  for (std::size_t r = 0; r < rows; ++r) {
    const int t = targets[r];
    if (t < 0) continue;
    if (static_cast<std::size_t>(t) >= vocab) {
      throw std::out_of_range("masked_ce_sum: target out of range");
    }
    const T* row = logits.data() + r * vocab;
    total += detail::row_logsumexp(row, vocab) - row[t];
  }
  Tensor<T> out = Tensor<T>::scalar(total);
  detail::maybe_record(out, detail::tracked(logits), [logits, out, targets, rows, vocab]() mutable {
    const T g = out.grad()[0];
    auto& gl = logits.grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const int t = targets[r];
      if (t < 0) continue;
      const T* row = logits.data() + r * vocab;
      const T lse = detail::row_logsumexp(row, vocab);
      for (std::size_t c = 0; c < vocab; ++c) {
        T d = std::exp(row[c] - lse);
        if (c == static_cast<std::size_t>(t)) d -= T(1);
        gl[r * vocab + c] += g * d;
      }
    }
  });
  return out;
}

// Sum over masked rows of the cross-entropy between softmax(logits[r]) and
// the uniform distribution: logsumexp(row) - mean(row). Minimum ln(V).
template <typename T>
Tensor<T> uniform_ce_sum(const Tensor<T>& logits, const std::vector<bool>& mask) {
  if (logits.rank() != 2) throw ShapeError("uniform_ce_sum: expected rank-2 logits");
  const std::size_t rows = logits.rows(), vocab = logits.cols();
  if (mask.size() != rows) throw ShapeError("uniform_ce_sum: mask length mismatch");
  T total = T(0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    const T* row = logits.data() + r * vocab;
    T mean = T(0);
    for (std::size_t c = 0; c < vocab; ++c) mean += row[c];
    mean /= static_cast<T>(vocab);
    total += detail::row_logsumexp(row, vocab) - mean;
  }
  Tensor<T> out = Tensor<T>::scalar(total);
  detail::maybe_record(out, detail::tracked(logits), [logits, out, mask, rows, vocab]() mutable {
    const T g = out.grad()[0];
    auto& gl = logits.grad();
    const T inv_v = T(1) / static_cast<T>(vocab);
    for (std::size_t r = 0; r < rows; ++r) {
      if (!mask[r]) continue;
      const T* row = logits.data() + r * vocab;
      const T lse = detail::row_logsumexp(row, vocab);
      for (std::size_t c = 0; c < vocab; ++c) {
        gl[r * vocab + c] += g * (std::exp(row[c] - lse) - inv_v);
      }
    }
  });
  return out;
}

// Sum over masked rows of KL(softmax(logits[r]) || softmax(ref[r])). The
// reference logits are a constant; gradients flow into `logits` only.
template <typename T>
Tensor<T> kl_divergence_sum(const Tensor<T>& logits, const Tensor<T>& ref,
                            const std::vector<bool>& mask) {
  if (logits.rank() != 2 || ref.rank() != 2 || logits.shape() != ref.shape()) {
    throw ShapeError("kl_divergence_sum: shape mismatch");
  }
  const std::size_t rows = logits.rows(), vocab = logits.cols();
  if (mask.size() != rows) throw ShapeError("kl_divergence_sum: mask length mismatch");
  T total = T(0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    const T* p_row = logits.data() + r * vocab;
    const T* q_row = ref.data() + r * vocab;
    const T p_lse = detail::row_logsumexp(p_row, vocab);
    const T q_lse = detail::row_logsumexp(q_row, vocab);
    for (std::size_t c = 0; c < vocab; ++c) {
      const T lp = p_row[c] - p_lse;
      const T lq = q_row[c] - q_lse;
      total += std::exp(lp) * (lp - lq);
    }
  }
  Tensor<T> out = Tensor<T>::scalar(total);
  detail::maybe_record(out, detail::tracked(logits), [logits, ref, out, mask, rows, vocab]() mutable {
    const T g = out.grad()[0];
    auto& gl = logits.grad();
    for (std::size_t r = 0; r < rows; ++r) {
      if (!mask[r]) continue;
      const T* p_row = logits.data() + r * vocab;
      const T* q_row = ref.data() + r * vocab;
      const T p_lse = detail::row_logsumexp(p_row, vocab);
      const T q_lse = detail::row_logsumexp(q_row, vocab);
      T kl = T(0);
      for (std::size_t c = 0; c < vocab; ++c) {
        const T lp = p_row[c] - p_lse;
        kl += std::exp(lp) * (lp - (q_row[c] - q_lse));
      }
      for (std::size_t c = 0; c < vocab; ++c) {
        const T lp = p_row[c] - p_lse;
        const T lq = q_row[c] - q_lse;
        gl[r * vocab + c] += g * std::exp(lp) * ((lp - lq) - kl);
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// gradient verification

// Max over coordinates of |analytic - central difference| relative error for
// a scalar-valued function of one tensor. The analytic side runs on a private
// tape; the numeric side perturbs x in place with recording suspended.
template <typename T, typename F>
T finite_diff_check(F&& f, Tensor<T>& x, T h) {
  x.set_requires_grad(true);
  x.zero_grad();
  std::vector<T> analytic;
  {
    Tape<T> tape;
    typename Tape<T>::Scope scope(&tape);
    Tensor<T> loss = f(x);
    tape.backward(loss);
    analytic = x.grad();
  }
  T worst = T(0);
  typename Tape<T>::Scope no_grad(nullptr);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T saved = x[i];
    x[i] = saved + h;
    const T up = f(x).item();
    x[i] = saved - h;
    const T down = f(x).item();
    x[i] = saved;
    const T numeric = (up - down) / (T(2) * h);
    const T err = std::abs(analytic[i] - numeric) /
                  (std::abs(analytic[i]) + std::abs(numeric) + static_cast<T>(1e-12));
    worst = std::max(worst, err);
  }
  return worst;
}

// Same check across a set of parameter tensors feeding a nullary loss.
template <typename T, typename F>
T finite_diff_check_params(F&& f, const std::vector<Tensor<T>>& params, T h) {
  for (auto p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  std::vector<std::vector<T>> analytic;
  {
    Tape<T> tape;
    typename Tape<T>::Scope scope(&tape);
    Tensor<T> loss = f();
    tape.backward(loss);
    for (const auto& p : params) analytic.push_back(p.grad());
  }
  T worst = T(0);
  typename Tape<T>::Scope no_grad(nullptr);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<T> p = params[pi];
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const T saved = p[i];
      p[i] = saved + h;
      const T up = f().item();
      p[i] = saved - h;
      const T down = f().item();
      p[i] = saved;
      const T numeric = (up - down) / (T(2) * h);
      const T err = std::abs(analytic[pi][i] - numeric) /
                    (std::abs(analytic[pi][i]) + std::abs(numeric) + static_cast<T>(1e-12));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace uld
