#include "stylefed/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "stylefed/errors.hpp"

namespace stylefed::ops {

namespace {

using detail::Node;

// Parent gradient buffer, or nullptr when that parent needs no gradient.
Tensor* pgrad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  return p.requires_grad ? &p.grad_buffer() : nullptr;
}

const Tensor& pval(Node& self, std::size_t i) { return self.parents[i]->value; }

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + t.shape_string());
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  require_rank2(a, op);
  if (!a.same_shape(b)) throw ShapeError(std::string(op) + ": shape " + a.shape_string() + " vs " + b.shape_string());
}

void require_row(const Tensor& a, const Tensor& row, const char* op) {
  require_rank2(a, op);
  if (row.rank() != 2 || row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError(std::string(op) + ": expected (1x" + std::to_string(a.cols()) + ") row, got " + row.shape_string());
  }
}

void require_col(const Tensor& a, const Tensor& col, const char* op) {
  require_rank2(a, op);
  if (col.rank() != 2 || col.cols() != 1 || col.rows() != a.rows()) {
    throw ShapeError(std::string(op) + ": expected (" + std::to_string(a.rows()) + "x1) column, got " +
                     col.shape_string());
  }
}

// out = a * b (+= when accumulate) with optional transposes.
void gemm(const Tensor& a, bool ta, const Tensor& b, bool tb, Tensor& out) {
  const std::size_t n = ta ? a.cols() : a.rows();
  const std::size_t k = ta ? a.rows() : a.cols();
  const std::size_t m = tb ? b.rows() : b.cols();
  const std::size_t lda = a.cols(), ldb = b.cols();
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* O = out.data().data();
  if (tb) {
    // out(i, j) += sum_p a(i, p) b(j, p): contiguous dot products.
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        double acc = 0.0;
        const double* brow = B + j * ldb;
        if (ta) {
          for (std::size_t p = 0; p < k; ++p) acc += A[p * lda + i] * brow[p];
        } else {
          const double* arow = A + i * lda;
          for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        }
        O[i * m + j] += acc;
      }
    }
    return;
  }
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = O + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ta ? A[p * lda + i] : A[i * lda + p];
      if (av == 0.0) continue;
      const double* brow = B + p * ldb;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
}

template <typename F, typename DF>
Var unary(const Var& a, F f, DF df) {
  Tensor out(a.value().shape());
  const auto x = a.value().data();
  auto y = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return Var::make(std::move(out), {a}, [df](Node& self) {
    if (Tensor* ga = pgrad(self, 0)) {
      const auto x = pval(self, 0).data();
      const auto y = self.value.data();
      const auto g = self.grad.data();
      auto d = ga->data();
      for (std::size_t i = 0; i < x.size(); ++i) d[i] += g[i] * df(x[i], y[i]);
    }
  });
}

}  // namespace

Var constant(Tensor t) { return Var(std::move(t), false); }

Var matmul(const Var& a, const Var& b) {
  require_rank2(a.value(), "matmul");
  require_rank2(b.value(), "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + a.value().shape_string() + " x " + b.value().shape_string());
  }
  Tensor out = Tensor::zeros(a.rows(), b.cols());
  gemm(a.value(), false, b.value(), false, out);
  return Var::make(std::move(out), {a, b}, [](Node& self) {
    if (Tensor* ga = pgrad(self, 0)) gemm(self.grad, false, pval(self, 1), true, *ga);
    if (Tensor* gb = pgrad(self, 1)) gemm(pval(self, 0), true, self.grad, false, *gb);
  });
}

Var transpose(const Var& a) {
  require_rank2(a.value(), "transpose");
  const Tensor& x = a.value();
  Tensor out = Tensor::zeros(x.cols(), x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(j, i) = x(i, j);
  return Var::make(std::move(out), {a}, [](Node& self) {
    if (Tensor* ga = pgrad(self, 0)) {
      for (std::size_t i = 0; i < ga->rows(); ++i)
        for (std::size_t j = 0; j < ga->cols(); ++j) (*ga)(i, j) += self.grad(j, i);
    }
  });
}

Var add(const Var& a, const Var& b) {
  require_same(a.value(), b.value(), "add");
  Tensor out = a.value();
  auto y = out.data();
  const auto x = b.value().data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += x[i];
  return Var::make(std::move(out), {a, b}, [](Node& self) {
    const auto g = self.grad.data();
    for (std::size_t p = 0; p < 2; ++p) {
      if (Tensor* gp = pgrad(self, p)) {
        auto d = gp->data();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a.value(), b.value(), "sub");
  Tensor out = a.value();
  auto y = out.data();
  const auto x = b.value().data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= x[i];
  return Var::make(std::move(out), {a, b}, [](Node& self) {
    const auto g = self.grad.data();
    if (Tensor* ga = pgrad(self, 0)) {
      auto d = ga->data();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (Tensor* gb = pgrad(self, 1)) {
      auto d = gb->data();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a.value(), b.value(), "mul");
  Tensor out = a.value();
  auto y = out.data();
  const auto x = b.value().data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= x[i];
  return Var::make(std::move(out), {a, b}, [](Node& self) {
    const auto g = self.grad.data();
    const auto av = pval(self, 0).data();
    const auto bv = pval(self, 1).data();
    if (Tensor* ga = pgrad(self, 0)) {
      auto d = ga->data();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * bv[i];
    }
    if (Tensor* gb = pgrad(self, 1)) {
      auto d = gb->data();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * av[i];
    }
  });
}

Var add_row(const Var& a, const Var& b) {
  require_row(a.value(), b.value(), "add_row");
  Tensor out = a.value();
  const std::size_t n = out.rows(), m = out.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out(i, j) += b.value()(0, j);
  return Var::make(std::move(out), {a, b}, [n, m](Node& self) {
    if (Tensor* ga = pgrad(self, 0)) {
      auto d = ga->data();
      const auto g = self.grad.data();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (Tensor* gb = pgrad(self, 1)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) (*gb)(0, j) += self.grad(i, j);
    }
  });
}

Var mul_row(const Var& a, const Var& b) {
  require_row(a.value(), b.value(), "mul_row");
  Tensor out = a.value();
  const std::size_t n = out.rows(), m = out.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out(i, j) *= b.value()(0, j);
  return Var::make(std::move(out), {a, b}, [n, m](Node& self) {
    const Tensor& av = pval(self, 0);
    const Tensor& bv = pval(self, 1);
    if (Tensor* ga = pgrad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) (*ga)(i, j) += self.grad(i, j) * bv(0, j);
    }
    if (Tensor* gb = pgrad(self, 1)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) (*gb)(0, j) += self.grad(i, j) * av(i, j);
    }
  });
}

Var mul_col(const Var& a, const Var& c) {
  require_col(a.value(), c.value(), "mul_col");
  Tensor out = a.value();
  const std::size_t n = out.rows(), m = out.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out(i, j) *= c.value()(i, 0);
  return Var::make(std::move(out), {a, c}, [n, m](Node& self) {
    const Tensor& av = pval(self, 0);
    const Tensor& cv = pval(self, 1);
    if (Tensor* ga = pgrad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) (*ga)(i, j) += self.grad(i, j) * cv(i, 0);
    }
    if (Tensor* gc = pgrad(self, 1)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) (*gc)(i, 0) += self.grad(i, j) * av(i, j);
    }
  });
}

Var scale(const Var& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(const Var& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var tanh(const Var& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(const Var& a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var gelu(const Var& a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::tanh(k * (x + c * x * x * x))); },
      [](double x, double) {
        const double t = std::tanh(k * (x + c * x * x * x));
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * c * x * x);
      });
}

Var abs(const Var& a) {
  return unary(
      a, [](double x) { return std::fabs(x); }, [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var reciprocal(const Var& a) {
  return unary(a, [](double x) { return 1.0 / x; }, [](double, double y) { return -y * y; });
}

Var clamp_min(const Var& a, double lo) {
  return unary(a, [lo](double x) { return std::max(x, lo); }, [lo](double x, double) { return x > lo ? 1.0 : 0.0; });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double x : a.value().data()) s += x;
  return Var::make(Tensor::filled(1, 1, s), {a}, [](Node& self) {
    if (Tensor* ga = pgrad(self, 0)) {
      const double g = self.grad[0];
      for (double& d : ga->data()) d += g;
    }
  });
}

Var mean(const Var& a) {
  if (a.value().size() == 0) throw DomainError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var row_sum(const Var& a) {
  require_rank2(a.value(), "row_sum");
  const std::size_t n = a.rows(), m = a.cols();
  Tensor out = Tensor::zeros(n, 1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out(i, 0) += a.value()(i, j);
  return Var::make(std::move(out), {a}, [n, m](Node& self) {
    if (Tensor* ga = pgrad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) (*ga)(i, j) += self.grad(i, 0);
    }
  });
}

Var rowdot(const Var& a, const Var& b) {
  require_same(a.value(), b.value(), "rowdot");
  const std::size_t n = a.rows();
  Tensor out = Tensor::zeros(n, 1);
  for (std::size_t i = 0; i < n; ++i) out(i, 0) = dot(a.value().row_span(i), b.value().row_span(i));
  return Var::make(std::move(out), {a, b}, [n](Node& self) {
    const Tensor& av = pval(self, 0);
    const Tensor& bv = pval(self, 1);
    const std::size_t m = av.cols();
    if (Tensor* ga = pgrad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) (*ga)(i, j) += self.grad(i, 0) * bv(i, j);
    }
    if (Tensor* gb = pgrad(self, 1)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) (*gb)(i, j) += self.grad(i, 0) * av(i, j);
    }
  });
}

Var row_norm(const Var& a) {
  require_rank2(a.value(), "row_norm");
  const std::size_t n = a.rows();
  Tensor out = Tensor::zeros(n, 1);
  for (std::size_t i = 0; i < n; ++i) out(i, 0) = std::sqrt(squared_norm(a.value().row_span(i)));
  return Var::make(std::move(out), {a}, [n](Node& self) {
    if (Tensor* ga = pgrad(self, 0)) {
      const Tensor& av = pval(self, 0);
      for (std::size_t i = 0; i < n; ++i) {
        const double norm = self.value(i, 0);
        if (norm == 0.0) continue;
        const double g = self.grad(i, 0) / norm;
        for (std::size_t j = 0; j < av.cols(); ++j) (*ga)(i, j) += g * av(i, j);
      }
    }
  });
}

Var gather_rows(const Var& a, std::span<const std::size_t> index) {
  require_rank2(a.value(), "gather_rows");
  const std::size_t m = a.cols();
  Tensor out = Tensor::zeros(index.size(), m);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= a.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(index[i]) + " out of " + std::to_string(a.rows()));
    }
    std::copy_n(a.value().row_span(index[i]).begin(), m, out.row_span(i).begin());
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return Var::make(std::move(out), {a}, [idx = std::move(idx), m](Node& self) {
    if (Tensor* ga = pgrad(self, 0)) {
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < m; ++j) (*ga)(idx[i], j) += self.grad(i, j);
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t m = parts.front().cols();
  std::size_t n = 0;
  for (const auto& p : parts) {
    require_rank2(p.value(), "concat_rows");
    if (p.cols() != m) throw ShapeError("concat_rows: column mismatch");
    n += p.rows();
  }
  Tensor out = Tensor::zeros(n, m);
  std::size_t r = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(r * m));
    r += p.rows();
  }
  return Var::make(std::move(out), parts, [](Node& self) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      const std::size_t len = self.parents[p]->value.size();
      if (Tensor* gp = pgrad(self, p)) {
        auto d = gp->data();
        for (std::size_t i = 0; i < len; ++i) d[i] += self.grad[offset + i];
      }
      offset += len;
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t n = parts.front().rows();
  std::size_t m = 0;
  for (const auto& p : parts) {
    require_rank2(p.value(), "concat_cols");
    if (p.rows() != n) throw ShapeError("concat_cols: row mismatch");
    m += p.cols();
  }
  Tensor out = Tensor::zeros(n, m);
  std::size_t c0 = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out(i, c0 + j) = p.value()(i, j);
    c0 += p.cols();
  }
  return Var::make(std::move(out), parts, [n](Node& self) {
    std::size_t c0 = 0;
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      const std::size_t w = self.parents[p]->value.cols();
      if (Tensor* gp = pgrad(self, p)) {
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < w; ++j) (*gp)(i, j) += self.grad(i, c0 + j);
      }
      c0 += w;
    }
  });
}

Var slice_cols(const Var& a, std::size_t start, std::size_t count) {
  require_rank2(a.value(), "slice_cols");
  if (start + count > a.cols()) throw ShapeError("slice_cols: range exceeds columns");
  const std::size_t n = a.rows();
  Tensor out = Tensor::zeros(n, count);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = a.value()(i, start + j);
  return Var::make(std::move(out), {a}, [n, start, count](Node& self) {
    if (Tensor* ga = pgrad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < count; ++j) (*ga)(i, start + j) += self.grad(i, j);
    }
  });
}

Var softmax_rows(const Var& a) {
  require_rank2(a.value(), "softmax_rows");
  if (a.cols() == 0) throw DomainError("softmax of empty score vector");
  const std::size_t n = a.rows(), m = a.cols();
  Tensor out = a.value();
  for (std::size_t i = 0; i < n; ++i) {
    auto r = out.row_span(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double z = 0.0;
    for (double& x : r) z += (x = std::exp(x - mx));
    for (double& x : r) x /= z;
  }
  return Var::make(std::move(out), {a}, [n, m](Node& self) {
    if (Tensor* ga = pgrad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) s += self.grad(i, j) * self.value(i, j);
        for (std::size_t j = 0; j < m; ++j) (*ga)(i, j) += self.value(i, j) * (self.grad(i, j) - s);
      }
    }
  });
}

Var log_softmax_rows(const Var& a) {
  require_rank2(a.value(), "log_softmax_rows");
  if (a.cols() == 0) throw DomainError("log_softmax of empty score vector");
  const std::size_t n = a.rows(), m = a.cols();
  Tensor out = a.value();
  for (std::size_t i = 0; i < n; ++i) {
    auto r = out.row_span(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double z = 0.0;
    for (double x : r) z += std::exp(x - mx);
    const double lse = mx + std::log(z);
    for (double& x : r) x -= lse;
  }
  return Var::make(std::move(out), {a}, [n, m](Node& self) {
    if (Tensor* ga = pgrad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) {
        double gs = 0.0;
        for (std::size_t j = 0; j < m; ++j) gs += self.grad(i, j);
        for (std::size_t j = 0; j < m; ++j) (*ga)(i, j) += self.grad(i, j) - std::exp(self.value(i, j)) * gs;
      }
    }
  });
}

Var cross_entropy(const Var& logits, std::span<const std::size_t> labels) {
  require_rank2(logits.value(), "cross_entropy");
  if (labels.size() != logits.rows()) throw ShapeError("cross_entropy: label count does not match rows");
  if (labels.empty()) throw DomainError("cross_entropy: empty batch");
  const std::size_t n = logits.rows(), m = logits.cols();
  Var logp = log_softmax_rows(logits);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= m) throw ShapeError("cross_entropy: label out of range");
    total -= logp.value()(i, labels[i]);
  }
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return Var::make(Tensor::filled(1, 1, total / static_cast<double>(n)), {logp},
                   [lab = std::move(lab), n](Node& self) {
                     if (Tensor* g = pgrad(self, 0)) {
                       const double w = self.grad[0] / static_cast<double>(n);
                       for (std::size_t i = 0; i < n; ++i) (*g)(i, lab[i]) -= w;
                     }
                   });
}

Var proto_logits(const Var& h, const Var& prototypes) {
  require_rank2(h.value(), "proto_logits");
  require_rank2(prototypes.value(), "proto_logits");
  if (h.cols() != prototypes.cols()) {
    throw ShapeError("proto_logits: feature dim " + std::to_string(h.cols()) + " vs prototype dim " +
                     std::to_string(prototypes.cols()));
  }
  const std::size_t n = h.rows(), c = prototypes.rows(), d = h.cols();
  Tensor out = Tensor::zeros(n, c);
  for (std::size_t i = 0; i < n; ++i) {
    const auto hi = h.value().row_span(i);
    for (std::size_t k = 0; k < c; ++k) {
      const auto pk = prototypes.value().row_span(k);
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = hi[j] - pk[j];
        s += diff * diff;
      }
      out(i, k) = -s;
    }
  }
  return Var::make(std::move(out), {h, prototypes}, [n, c, d](Node& self) {
    const Tensor& hv = pval(self, 0);
    const Tensor& pv = pval(self, 1);
    Tensor* gh = pgrad(self, 0);
    Tensor* gp = pgrad(self, 1);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < c; ++k) {
        const double g = 2.0 * self.grad(i, k);
        if (g == 0.0) continue;
        for (std::size_t j = 0; j < d; ++j) {
          const double diff = hv(i, j) - pv(k, j);
          if (gh) (*gh)(i, j) -= g * diff;
          if (gp) (*gp)(k, j) += g * diff;
        }
      }
    }
  });
}

Var modulated_proto_logits(const Var& h, const Var& scale, const Var& shift, const Var& prototypes) {
  require_rank2(h.value(), "modulated_proto_logits");
  require_same(scale.value(), prototypes.value(), "modulated_proto_logits");
  require_same(shift.value(), prototypes.value(), "modulated_proto_logits");
  if (h.cols() != prototypes.cols()) throw ShapeError("modulated_proto_logits: feature dim mismatch");
  const std::size_t n = h.rows(), c = prototypes.rows(), d = h.cols();
  Tensor out = Tensor::zeros(n, c);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < c; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double r = h.value()(i, j) * scale.value()(k, j) + shift.value()(k, j) - prototypes.value()(k, j);
        s += r * r;
      }
      out(i, k) = -s;
    }
  }
  return Var::make(std::move(out), {h, scale, shift, prototypes}, [n, c, d](Node& self) {
    const Tensor& hv = pval(self, 0);
    const Tensor& av = pval(self, 1);
    const Tensor& bv = pval(self, 2);
    const Tensor& pv = pval(self, 3);
    Tensor* gh = pgrad(self, 0);
    Tensor* ga = pgrad(self, 1);
    Tensor* gb = pgrad(self, 2);
    Tensor* gp = pgrad(self, 3);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < c; ++k) {
        const double g = 2.0 * self.grad(i, k);
        if (g == 0.0) continue;
        for (std::size_t j = 0; j < d; ++j) {
          const double r = hv(i, j) * av(k, j) + bv(k, j) - pv(k, j);
          if (gh) (*gh)(i, j) -= g * r * av(k, j);
          if (ga) (*ga)(k, j) -= g * r * hv(i, j);
          if (gb) (*gb)(k, j) -= g * r;
          if (gp) (*gp)(k, j) += g * r;
        }
      }
    }
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  require_row(x.value(), gain.value(), "layer_norm");
  require_row(x.value(), bias.value(), "layer_norm");
  const std::size_t n = x.rows(), d = x.cols();
  if (d < 2) throw DomainError("layer_norm needs at least 2 features, got " + std::to_string(d));
  if (!(eps > 0)) throw DomainError("layer_norm eps must be positive");
  Tensor xhat = Tensor::zeros(n, d);
  Tensor inv_std = Tensor::zeros(n, 1);
  Tensor out = Tensor::zeros(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = x.value().row_span(i);
    double mu = 0.0;
    for (double v : r) mu += v;
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (double v : r) var += (v - mu) * (v - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std(i, 0) = is;
    for (std::size_t j = 0; j < d; ++j) {
      xhat(i, j) = (r[j] - mu) * is;
      out(i, j) = xhat(i, j) * gain.value()(0, j) + bias.value()(0, j);
    }
  }
  return Var::make(std::move(out), {x, gain, bias},
                   [n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                     const Tensor& gv = pval(self, 1);
                     if (Tensor* gx = pgrad(self, 0)) {
                       for (std::size_t i = 0; i < n; ++i) {
                         double m1 = 0.0, m2 = 0.0;
                         for (std::size_t j = 0; j < d; ++j) {
                           const double gy = self.grad(i, j) * gv(0, j);
                           m1 += gy;
                           m2 += gy * xhat(i, j);
                         }
                         m1 /= static_cast<double>(d);
                         m2 /= static_cast<double>(d);
                         for (std::size_t j = 0; j < d; ++j) {
                           const double gy = self.grad(i, j) * gv(0, j);
                           (*gx)(i, j) += inv_std(i, 0) * (gy - m1 - xhat(i, j) * m2);
                         }
                       }
                     }
                     if (Tensor* gg = pgrad(self, 1)) {
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < d; ++j) (*gg)(0, j) += self.grad(i, j) * xhat(i, j);
                     }
                     if (Tensor* gb = pgrad(self, 2)) {
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < d; ++j) (*gb)(0, j) += self.grad(i, j);
                     }
                   });
}

Var cosine_rows(const Var& a, const Var& b, double eps) {
  require_same(a.value(), b.value(), "cosine_rows");
  const Var na = reciprocal(clamp_min(row_norm(a), eps));
  const Var nb = reciprocal(clamp_min(row_norm(b), eps));
  return mul(mul(rowdot(a, b), na), nb);
}

}  // namespace stylefed::ops
