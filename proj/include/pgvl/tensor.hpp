// Dense array substrate with reverse-mode differentiation.
//
// Arrays are 2-D (rows x cols) or scalar (1x1); a dynamic record of the
// forward pass is kept through shared_ptr parent links and per-node
// backprop closures. matmul is routed through BLAS, everything else is
// plain loops.
#pragma once

#include <cblas.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace pgvl {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Finiteness checking after each op. On by default; training loops turn it
// off and watch the loss instead.
inline std::atomic<bool>& check_finite_flag() {
  static std::atomic<bool> f{true};
  return f;
}
inline void set_check_finite(bool on) { check_finite_flag().store(on); }

// When grad mode is off, ops do not record parents or closures. Used for
// evaluation passes.
inline bool& grad_mode() {
  thread_local bool on = true;
  return on;
}
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
};

template <typename T>
struct Tensor;
template <typename T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

template <typename T>
struct Tensor : std::enable_shared_from_this<Tensor<T>> {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<T> data;
  bool needs_grad = false;   // this node or an ancestor requires grad
  bool is_leaf_param = false;
  std::vector<T> grad;       // allocated lazily during backward / for params
  std::vector<TensorPtr<T>> parents;
  std::function<void(Tensor<T>&)> backprop;

  int64_t numel() const { return rows * cols; }

  void ensure_grad() {
    if (grad.empty()) grad.assign(static_cast<size_t>(numel()), T(0));
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

namespace detail {

template <typename T>
inline void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, T alpha,
                 const T* a, int64_t lda, const T* b, int64_t ldb, T beta,
                 T* c, int64_t ldc) {
  if constexpr (std::is_same_v<T, float>) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
                tb ? CblasTrans : CblasNoTrans, (int)m, (int)n, (int)k, alpha,
                a, (int)lda, b, (int)ldb, beta, c, (int)ldc);
  } else {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
                tb ? CblasTrans : CblasNoTrans, (int)m, (int)n, (int)k, alpha,
                a, (int)lda, b, (int)ldb, beta, c, (int)ldc);
  }
}

template <typename T>
inline void check_out(const TensorPtr<T>& t, const char* op) {
  if (!check_finite_flag().load(std::memory_order_relaxed)) return;
  for (T v : t->data) {
    if (!std::isfinite((double)v)) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
}

inline std::string shape_str(int64_t r, int64_t c) {
  std::ostringstream os;
  os << r << "x" << c;
  return os.str();
}

}  // namespace detail

template <typename T>
TensorPtr<T> make_tensor(int64_t rows, int64_t cols, std::vector<T> data,
                         bool requires_grad = false) {
  if ((int64_t)data.size() != rows * cols)
    throw ShapeError("make_tensor: data size does not match shape " +
                     detail::shape_str(rows, cols));
  auto t = std::make_shared<Tensor<T>>();
  t->rows = rows;
  t->cols = cols;
  t->data = std::move(data);
  t->needs_grad = requires_grad;
  t->is_leaf_param = requires_grad;
  if (requires_grad) t->ensure_grad();
  return t;
}

template <typename T>
TensorPtr<T> zeros(int64_t rows, int64_t cols, bool requires_grad = false) {
  return make_tensor<T>(rows, cols, std::vector<T>((size_t)(rows * cols), T(0)),
                        requires_grad);
}

template <typename T>
TensorPtr<T> full_like_value(int64_t rows, int64_t cols, T v) {
  return make_tensor<T>(rows, cols, std::vector<T>((size_t)(rows * cols), v));
}

template <typename T, typename... Parents>
TensorPtr<T> make_result(int64_t rows, int64_t cols,
                         std::function<void(Tensor<T>&)> bp,
                         Parents... parents) {
  auto t = std::make_shared<Tensor<T>>();
  t->rows = rows;
  t->cols = cols;
  t->data.assign((size_t)(rows * cols), T(0));
  bool ng = grad_mode() && (... || parents->needs_grad);
  t->needs_grad = ng;
  if (ng) {
    (t->parents.push_back(parents), ...);
    t->backprop = std::move(bp);
  }
  return t;
}

// ---------------------------------------------------------------------------
// primitives

template <typename T>
TensorPtr<T> matmul(const TensorPtr<T>& a, const TensorPtr<T>& b) {
  if (a->cols != b->rows)
    throw ShapeError("matmul: inner dimensions differ, " +
                     detail::shape_str(a->rows, a->cols) + " vs " +
                     detail::shape_str(b->rows, b->cols));
  int64_t m = a->rows, k = a->cols, n = b->cols;
  auto out = make_result<T>(
      m, n,
      [a, b, m, k, n](Tensor<T>& self) {
        if (a->needs_grad) {
          a->ensure_grad();
          // dA += G * B^T
          detail::gemm<T>(false, true, m, k, n, T(1), self.grad.data(), n,
                          b->data.data(), n, T(1), a->grad.data(), k);
        }
        if (b->needs_grad) {
          b->ensure_grad();
          // dB += A^T * G
          detail::gemm<T>(true, false, k, n, m, T(1), a->data.data(), k,
                          self.grad.data(), n, T(1), b->grad.data(), n);
        }
      },
      a, b);
  if (m * n * k != 0)
    detail::gemm<T>(false, false, m, n, k, T(1), a->data.data(), k,
                    b->data.data(), n, T(0), out->data.data(), n);
  detail::check_out(out, "matmul");
  return out;
}

template <typename T>
TensorPtr<T> add(const TensorPtr<T>& a, const TensorPtr<T>& b) {
  if (a->rows != b->rows || a->cols != b->cols)
    throw ShapeError("add: shape mismatch " +
                     detail::shape_str(a->rows, a->cols) + " vs " +
                     detail::shape_str(b->rows, b->cols));
  auto out = make_result<T>(
      a->rows, a->cols,
      [a, b](Tensor<T>& self) {
        if (a->needs_grad) {
          a->ensure_grad();
          for (size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += self.grad[i];
        }
        if (b->needs_grad) {
          b->ensure_grad();
          for (size_t i = 0; i < self.grad.size(); ++i) b->grad[i] += self.grad[i];
        }
      },
      a, b);
  for (size_t i = 0; i < out->data.size(); ++i)
    out->data[i] = a->data[i] + b->data[i];
  detail::check_out(out, "add");
  return out;
}

template <typename T>
TensorPtr<T> mul(const TensorPtr<T>& a, const TensorPtr<T>& b) {
  if (a->rows != b->rows || a->cols != b->cols)
    throw ShapeError("mul: shape mismatch " +
                     detail::shape_str(a->rows, a->cols) + " vs " +
                     detail::shape_str(b->rows, b->cols));
  auto out = make_result<T>(
      a->rows, a->cols,
      [a, b](Tensor<T>& self) {
        if (a->needs_grad) {
          a->ensure_grad();
          for (size_t i = 0; i < self.grad.size(); ++i)
            a->grad[i] += self.grad[i] * b->data[i];
        }
        if (b->needs_grad) {
          b->ensure_grad();
          for (size_t i = 0; i < self.grad.size(); ++i)
            b->grad[i] += self.grad[i] * a->data[i];
        }
      },
      a, b);
  for (size_t i = 0; i < out->data.size(); ++i)
    out->data[i] = a->data[i] * b->data[i];
  detail::check_out(out, "mul");
  return out;
}

template <typename T>
TensorPtr<T> scale(const TensorPtr<T>& a, T c) {
  auto out = make_result<T>(
      a->rows, a->cols,
      [a, c](Tensor<T>& self) {
        if (a->needs_grad) {
          a->ensure_grad();
          for (size_t i = 0; i < self.grad.size(); ++i)
            a->grad[i] += self.grad[i] * c;
        }
      },
      a);
  for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] * c;
  detail::check_out(out, "scale");
  return out;
}

template <typename T>
TensorPtr<T> sub(const TensorPtr<T>& a, const TensorPtr<T>& b) {
  return add(a, scale(b, T(-1)));
}

template <typename T>
TensorPtr<T> transpose(const TensorPtr<T>& a) {
  int64_t r = a->rows, c = a->cols;
  auto out = make_result<T>(
      c, r,
      [a, r, c](Tensor<T>& self) {
        if (!a->needs_grad) return;
        a->ensure_grad();
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j)
            a->grad[i * c + j] += self.grad[j * r + i];
      },
      a);
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out->data[j * r + i] = a->data[i * c + j];
  return out;
}

// xW + b; b is 1 x n and optional (pass nullptr).
template <typename T>
TensorPtr<T> linear(const TensorPtr<T>& x, const TensorPtr<T>& w,
                    const TensorPtr<T>& b = nullptr) {
  auto y = matmul(x, w);
  if (!b) return y;
  if (b->rows != 1 || b->cols != w->cols)
    throw ShapeError("linear: bias must be 1x" + std::to_string(w->cols));
  int64_t m = y->rows, n = y->cols;
  auto out = make_result<T>(
      m, n,
      [y, b, m, n](Tensor<T>& self) {
        if (y->needs_grad) {
          y->ensure_grad();
          for (size_t i = 0; i < self.grad.size(); ++i) y->grad[i] += self.grad[i];
        }
        if (b->needs_grad) {
          b->ensure_grad();
          for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) b->grad[j] += self.grad[i * n + j];
        }
      },
      y, b);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j)
      out->data[i * n + j] = y->data[i * n + j] + b->data[j];
  detail::check_out(out, "linear");
  return out;
}

// x + b with b broadcast over rows; b is 1 x n.
template <typename T>
TensorPtr<T> add_rowvec(const TensorPtr<T>& x, const TensorPtr<T>& b) {
  if (b->rows != 1 || b->cols != x->cols)
    throw ShapeError("add_rowvec: need a 1x" + std::to_string(x->cols) +
                     " row vector");
  int64_t m = x->rows, n = x->cols;
  auto out = make_result<T>(
      m, n,
      [x, b, m, n](Tensor<T>& self) {
        if (x->needs_grad) {
          x->ensure_grad();
          for (size_t i = 0; i < self.grad.size(); ++i) x->grad[i] += self.grad[i];
        }
        if (b->needs_grad) {
          b->ensure_grad();
          for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) b->grad[j] += self.grad[i * n + j];
        }
      },
      x, b);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j)
      out->data[i * n + j] = x->data[i * n + j] + b->data[j];
  detail::check_out(out, "add_rowvec");
  return out;
}

template <typename T>
TensorPtr<T> softmax_rows(const TensorPtr<T>& a) {
  int64_t r = a->rows, c = a->cols;
  if (c == 0) throw ShapeError("softmax_rows: empty rows");
  auto out = make_result<T>(
      r, c,
      [a, r, c](Tensor<T>& self) {
        if (!a->needs_grad) return;
        a->ensure_grad();
        for (int64_t i = 0; i < r; ++i) {
          const T* y = self.data.data() + i * c;
          const T* g = self.grad.data() + i * c;
          T dot = 0;
          for (int64_t j = 0; j < c; ++j) dot += g[j] * y[j];
          T* ga = a->grad.data() + i * c;
          for (int64_t j = 0; j < c; ++j) ga[j] += y[j] * (g[j] - dot);
        }
      },
      a);
  for (int64_t i = 0; i < r; ++i) {
    const T* x = a->data.data() + i * c;
    T* y = out->data.data() + i * c;
    T mx = x[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    T sum = 0;
    for (int64_t j = 0; j < c; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    T inv = T(1) / sum;
    for (int64_t j = 0; j < c; ++j) y[j] *= inv;
  }
  detail::check_out(out, "softmax_rows");
  return out;
}

enum class Axis { Rows = 0, Cols = 1 };

template <typename T>
TensorPtr<T> concat(const std::vector<TensorPtr<T>>& parts, Axis axis) {
  if (parts.empty()) throw ShapeError("concat: no parts");
  int64_t rows = parts[0]->rows, cols = parts[0]->cols;
  int64_t total = 0;
  for (auto& p : parts) {
    if (axis == Axis::Rows) {
      if (p->cols != cols)
        throw ShapeError("concat: column mismatch " +
                         detail::shape_str(p->rows, p->cols));
      total += p->rows;
    } else {
      if (p->rows != rows)
        throw ShapeError("concat: row mismatch " +
                         detail::shape_str(p->rows, p->cols));
      total += p->cols;
    }
  }
  int64_t orows = axis == Axis::Rows ? total : rows;
  int64_t ocols = axis == Axis::Rows ? cols : total;

  auto out = std::make_shared<Tensor<T>>();
  out->rows = orows;
  out->cols = ocols;
  out->data.assign((size_t)(orows * ocols), T(0));
  bool ng = false;
  for (auto& p : parts) ng = ng || p->needs_grad;
  ng = ng && grad_mode();
  out->needs_grad = ng;
  if (ng) {
    out->parents.assign(parts.begin(), parts.end());
    auto ps = parts;
    out->backprop = [ps, axis, orows, ocols](Tensor<T>& self) {
      int64_t off = 0;
      for (auto& p : ps) {
        if (p->needs_grad) {
          p->ensure_grad();
          if (axis == Axis::Rows) {
            for (int64_t i = 0; i < p->numel(); ++i)
              p->grad[i] += self.grad[off * ocols + i];
          } else {
            for (int64_t i = 0; i < p->rows; ++i)
              for (int64_t j = 0; j < p->cols; ++j)
                p->grad[i * p->cols + j] +=
                    self.grad[i * ocols + off + j];
          }
        }
        off += axis == Axis::Rows ? p->rows : p->cols;
      }
    };
  }
  int64_t off = 0;
  for (auto& p : parts) {
    if (axis == Axis::Rows) {
      std::copy(p->data.begin(), p->data.end(),
                out->data.begin() + off * ocols);
      off += p->rows;
    } else {
      for (int64_t i = 0; i < p->rows; ++i)
        std::copy(p->data.begin() + i * p->cols,
                  p->data.begin() + (i + 1) * p->cols,
                  out->data.begin() + i * ocols + off);
      off += p->cols;
    }
  }
  return out;
}

// Contiguous slice along an axis; building block of split.
template <typename T>
TensorPtr<T> slice(const TensorPtr<T>& a, Axis axis, int64_t begin,
                   int64_t end) {
  int64_t len = axis == Axis::Rows ? a->rows : a->cols;
  if (begin < 0 || end > len || begin >= end)
    throw ShapeError("slice: range [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") invalid for axis length " +
                     std::to_string(len));
  int64_t orows = axis == Axis::Rows ? end - begin : a->rows;
  int64_t ocols = axis == Axis::Rows ? a->cols : end - begin;
  auto out = make_result<T>(
      orows, ocols,
      [a, axis, begin, orows, ocols](Tensor<T>& self) {
        if (!a->needs_grad) return;
        a->ensure_grad();
        if (axis == Axis::Rows) {
          for (int64_t i = 0; i < orows * ocols; ++i)
            a->grad[begin * ocols + i] += self.grad[i];
        } else {
          for (int64_t i = 0; i < orows; ++i)
            for (int64_t j = 0; j < ocols; ++j)
              a->grad[i * a->cols + begin + j] += self.grad[i * ocols + j];
        }
      },
      a);
  if (axis == Axis::Rows) {
    std::copy(a->data.begin() + begin * a->cols,
              a->data.begin() + end * a->cols, out->data.begin());
  } else {
    for (int64_t i = 0; i < orows; ++i)
      std::copy(a->data.begin() + i * a->cols + begin,
                a->data.begin() + i * a->cols + end,
                out->data.begin() + i * ocols);
  }
  return out;
}

template <typename T>
std::vector<TensorPtr<T>> split(const TensorPtr<T>& a,
                                const std::vector<int64_t>& sizes, Axis axis) {
  int64_t len = axis == Axis::Rows ? a->rows : a->cols;
  int64_t sum = std::accumulate(sizes.begin(), sizes.end(), int64_t(0));
  if (sum != len)
    throw ShapeError("split: sizes sum to " + std::to_string(sum) +
                     " but axis length is " + std::to_string(len));
  std::vector<TensorPtr<T>> out;
  int64_t off = 0;
  for (int64_t s : sizes) {
    out.push_back(slice(a, axis, off, off + s));
    off += s;
  }
  return out;
}

template <typename T>
TensorPtr<T> gather_rows(const TensorPtr<T>& a,
                         const std::vector<int64_t>& rows) {
  for (int64_t r : rows)
    if (r < 0 || r >= a->rows)
      throw ShapeError("gather_rows: index " + std::to_string(r) +
                       " out of range for " + std::to_string(a->rows) +
                       " rows");
  int64_t m = (int64_t)rows.size(), c = a->cols;
  auto out = make_result<T>(
      m, c,
      [a, rows, m, c](Tensor<T>& self) {
        if (!a->needs_grad) return;
        a->ensure_grad();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < c; ++j)
            a->grad[rows[i] * c + j] += self.grad[i * c + j];
      },
      a);
  for (int64_t i = 0; i < m; ++i)
    std::copy(a->data.begin() + rows[i] * c, a->data.begin() + (rows[i] + 1) * c,
              out->data.begin() + i * c);
  return out;
}

// Multiply row i by w[i].
template <typename T>
TensorPtr<T> scale_rows(const TensorPtr<T>& a, const std::vector<T>& w) {
  if ((int64_t)w.size() != a->rows)
    throw ShapeError("scale_rows: weight count mismatch");
  int64_t r = a->rows, c = a->cols;
  auto out = make_result<T>(
      r, c,
      [a, w, r, c](Tensor<T>& self) {
        if (!a->needs_grad) return;
        a->ensure_grad();
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j)
            a->grad[i * c + j] += self.grad[i * c + j] * w[i];
      },
      a);
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out->data[i * c + j] = a->data[i * c + j] * w[i];
  return out;
}

template <typename T>
TensorPtr<T> sum(const TensorPtr<T>& a) {
  auto out = make_result<T>(
      1, 1,
      [a](Tensor<T>& self) {
        if (!a->needs_grad) return;
        a->ensure_grad();
        for (auto& g : a->grad) g += self.grad[0];
      },
      a);
  T s = 0;
  for (T v : a->data) s += v;
  out->data[0] = s;
  detail::check_out(out, "sum");
  return out;
}

// Mean squared error against a (usually constant) target, averaged over all
// elements.
template <typename T>
TensorPtr<T> mse(const TensorPtr<T>& a, const TensorPtr<T>& b) {
  if (a->rows != b->rows || a->cols != b->cols)
    throw ShapeError("mse: shape mismatch " +
                     detail::shape_str(a->rows, a->cols) + " vs " +
                     detail::shape_str(b->rows, b->cols));
  int64_t n = a->numel();
  auto out = make_result<T>(
      1, 1,
      [a, b, n](Tensor<T>& self) {
        T c = self.grad[0] * T(2) / T(n);
        if (a->needs_grad) {
          a->ensure_grad();
          for (int64_t i = 0; i < n; ++i)
            a->grad[i] += c * (a->data[i] - b->data[i]);
        }
        if (b->needs_grad) {
          b->ensure_grad();
          for (int64_t i = 0; i < n; ++i)
            b->grad[i] -= c * (a->data[i] - b->data[i]);
        }
      },
      a, b);
  T s = 0;
  for (int64_t i = 0; i < n; ++i) {
    T d = a->data[i] - b->data[i];
    s += d * d;
  }
  out->data[0] = s / T(n);
  detail::check_out(out, "mse");
  return out;
}

// Row-wise softmax cross entropy with integer targets, averaged over rows.
template <typename T>
TensorPtr<T> cross_entropy_rows(const TensorPtr<T>& logits,
                                const std::vector<int64_t>& target) {
  int64_t r = logits->rows, c = logits->cols;
  if ((int64_t)target.size() != r)
    throw ShapeError("cross_entropy_rows: target count mismatch");
  for (int64_t t : target)
    if (t < 0 || t >= c) throw ShapeError("cross_entropy_rows: target out of range");
  // cache the row softmax for backward
  auto probs = std::make_shared<std::vector<T>>((size_t)(r * c));
  auto out = make_result<T>(
      1, 1,
      [logits, target, probs, r, c](Tensor<T>& self) {
        if (!logits->needs_grad) return;
        logits->ensure_grad();
        T s = self.grad[0] / T(r);
        for (int64_t i = 0; i < r; ++i) {
          for (int64_t j = 0; j < c; ++j)
            logits->grad[i * c + j] += s * (*probs)[i * c + j];
          logits->grad[i * c + target[i]] -= s;
        }
      },
      logits);
  T loss = 0;
  for (int64_t i = 0; i < r; ++i) {
    const T* x = logits->data.data() + i * c;
    T mx = x[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    T sum = 0;
    for (int64_t j = 0; j < c; ++j) {
      T e = std::exp(x[j] - mx);
      (*probs)[i * c + j] = e;
      sum += e;
    }
    T inv = T(1) / sum;
    for (int64_t j = 0; j < c; ++j) (*probs)[i * c + j] *= inv;
    loss += std::log(sum) + mx - x[target[i]];
  }
  out->data[0] = loss / T(r);
  detail::check_out(out, "cross_entropy_rows");
  return out;
}

// ---------------------------------------------------------------------------
// backward

template <typename T>
void backward(const TensorPtr<T>& loss) {
  if (loss->numel() != 1)
    throw ShapeError("backward: loss must be a scalar, got " +
                     detail::shape_str(loss->rows, loss->cols));
  // topological order over the recorded graph
  std::vector<Tensor<T>*> order;
  std::unordered_set<Tensor<T>*> seen;
  std::vector<std::pair<Tensor<T>*, size_t>> stack;
  stack.emplace_back(loss.get(), 0);
  seen.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Tensor<T>* p = node->parents[idx++].get();
      if (p->needs_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss->ensure_grad();
  loss->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Tensor<T>* n = *it;
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
  }
}

}  // namespace pgvl
