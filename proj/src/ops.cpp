#include "bevkd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>

#include "bevkd/errors.hpp"

namespace bevkd::ops {
namespace {

using detail::Node;
using BackwardFn = std::function<void(Node&)>;

Tensor make_op(const char* op, Shape shape, std::vector<double> data,
               std::initializer_list<const Tensor*> inputs, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool needs = false;
  if (grad_enabled()) {
    for (const Tensor* t : inputs) needs = needs || t->requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor* t : inputs) node->inputs.push_back(t->node());
    node->backward = std::move(fn);
  }
  return Tensor(std::move(node));
}

Tensor make_op_n(const char* op, Shape shape, std::vector<double> data, std::span<const Tensor> inputs,
                 BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool needs = false;
  if (grad_enabled()) {
    for (const Tensor& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(fn);
  }
  return Tensor(std::move(node));
}

// Grad buffer of input i, or nullptr if that input does not need one.
std::vector<double>* grad_of(Node& self, std::size_t i) {
  Node& in = *self.inputs[i];
  return in.requires_grad ? &in.ensure_grad() : nullptr;
}

const std::vector<double>& data_of(Node& self, std::size_t i) { return self.inputs[i]->data; }

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <class F, class DF>
Tensor unary(const char* op, const Tensor& a, F f, DF df) {
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return make_op(op, a.shape(), std::move(out), {&a}, [df](Node& self) {
    auto* g = grad_of(self, 0);
    if (!g) return;
    const auto& x = data_of(self, 0);
    for (std::size_t i = 0; i < x.size(); ++i) (*g)[i] += self.grad[i] * df(x[i], self.data[i]);
  });
}

}  // namespace

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_op("reshape", std::move(shape), std::move(out), {&a}, [](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  const auto x = a.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return make_op("transpose", Shape{n, m}, std::move(out), {&a}, [m, n](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += self.grad[j * m + i];
    }
  });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  require_rank(a, 2, "gather_rows");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  const auto x = a.data();
  std::vector<double> out(idx.size() * n);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= m) throw ContractError("gather_rows: row index out of range");
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(idx[r] * n), n, out.begin() + static_cast<std::ptrdiff_t>(r * n));
  }
  const std::size_t k = idx.size();
  return make_op("gather_rows", Shape{k, n}, std::move(out), {&a}, [idx = std::move(idx), n](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t j = 0; j < n; ++j) (*g)[idx[r] * n + j] += self.grad[r * n + j];
    }
  });
}

Tensor scatter_add_rows(const Tensor& src, std::span<const std::size_t> rows, std::size_t out_rows) {
  require_rank(src, 2, "scatter_add_rows");
  if (rows.size() != src.dim(0)) throw DimensionError("scatter_add_rows: index count does not match rows");
  const std::size_t n = src.dim(1);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  const auto x = src.data();
  std::vector<double> out(out_rows * n, 0.0);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= out_rows) throw ContractError("scatter_add_rows: row index out of range");
    for (std::size_t j = 0; j < n; ++j) out[idx[r] * n + j] += x[r * n + j];
  }
  return make_op("scatter_add_rows", Shape{out_rows, n}, std::move(out), {&src},
                 [idx = std::move(idx), n](Node& self) {
                   if (auto* g = grad_of(self, 0)) {
                     for (std::size_t r = 0; r < idx.size(); ++r)
                       for (std::size_t j = 0; j < n; ++j) (*g)[r * n + j] += self.grad[idx[r] * n + j];
                   }
                 });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t m = parts[0].dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.dim(0) != m) throw DimensionError("concat_cols: row counts differ");
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  std::vector<double> out(m * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto x = parts[k].data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * total + off + j] = x[i * widths[k] + j];
    off += widths[k];
  }
  return make_op_n("concat_cols", Shape{m, total}, std::move(out), parts, [m, total, widths](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (auto* g = grad_of(self, k)) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) (*g)[i * widths[k] + j] += self.grad[i * total + off + j];
      }
      off += widths[k];
    }
  });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank(a, 2, "slice_cols");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (begin > end || end > n) throw ContractError("slice_cols: invalid column range");
  const std::size_t w = end - begin;
  const auto x = a.data();
  std::vector<double> out(m * w);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x[i * n + begin + j];
  return make_op("slice_cols", Shape{m, w}, std::move(out), {&a}, [m, n, w, begin](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) (*g)[i * n + begin + j] += self.grad[i * w + j];
    }
  });
}

Tensor tile_cols(const Tensor& a, std::size_t times) {
  require_rank(a, 2, "tile_cols");
  const std::size_t m = a.dim(0), n = a.dim(1);
  const auto x = a.data();
  std::vector<double> out(m * n * times);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t t = 0; t < times; ++t)
      for (std::size_t j = 0; j < n; ++j) out[(i * times + t) * n + j] = x[i * n + j];
  return make_op("tile_cols", Shape{m, n * times}, std::move(out), {&a}, [m, n, times](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t t = 0; t < times; ++t)
          for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += self.grad[(i * times + t) * n + j];
    }
  });
}

Tensor select_rows(std::span<const std::uint8_t> mask, const Tensor& when_true, const Tensor& when_false) {
  require_rank(when_true, 2, "select_rows");
  require_same_shape(when_true, when_false, "select_rows");
  const std::size_t m = when_true.dim(0), n = when_true.dim(1);
  if (mask.size() != m) throw DimensionError("select_rows: mask length does not match row count");
  std::vector<std::uint8_t> keep(mask.begin(), mask.end());
  const auto a = when_true.data();
  const auto b = when_false.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const auto& src = keep[i] ? a : b;
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(i * n), n, out.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  return make_op("select_rows", Shape{m, n}, std::move(out), {&when_true, &when_false},
                 [keep = std::move(keep), n](Node& self) {
                   auto* ga = grad_of(self, 0);
                   auto* gb = grad_of(self, 1);
                   for (std::size_t i = 0; i < keep.size(); ++i) {
                     auto* g = keep[i] ? ga : gb;
                     if (!g) continue;
                     for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += self.grad[i * n + j];
                   }
                 });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = x[i * k + p];
      if (av == 0.0) continue;
      const double* brow = y.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return make_op("matmul", Shape{m, n}, std::move(out), {&a, &b}, [m, k, n](Node& self) {
    const auto& x = data_of(self, 0);
    const auto& y = data_of(self, 1);
    if (auto* ga = grad_of(self, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          const double* grow = self.grad.data() + i * n;
          const double* brow = y.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          (*ga)[i * k + p] += acc;
        }
    }
    if (auto* gb = grad_of(self, 1)) {
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = self.grad.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = x[i * k + p];
          if (av == 0.0) continue;
          double* gbrow = gb->data() + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
      }
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return make_op("add", a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (auto* g = grad_of(self, k))
        for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  return make_op("sub", a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    if (auto* g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = grad_of(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return make_op("mul", a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    const auto& x = data_of(self, 0);
    const auto& y = data_of(self, 1);
    if (auto* g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * y[i];
    if (auto* g = grad_of(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * x[i];
  });
}

Tensor scale(const Tensor& a, double factor) {
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * factor;
  return make_op("scale", a.shape(), std::move(out), {&a}, [factor](Node& self) {
    if (auto* g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * factor;
  });
}

Tensor add_scalar(const Tensor& a, double value) {
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + value;
  return make_op("add_scalar", a.shape(), std::move(out), {&a}, [](Node& self) {
    if (auto* g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
  });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  require_rank(a, 2, "add_bias");
  require_rank(bias, 1, "add_bias");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (bias.dim(0) != n) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not fit " + shape_str(a.shape()));
  }
  const auto x = a.data();
  const auto b = bias.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + b[j];
  return make_op("add_bias", Shape{m, n}, std::move(out), {&a, &bias}, [m, n](Node& self) {
    if (auto* g = grad_of(self, 0))
      for (std::size_t i = 0; i < m * n; ++i) (*g)[i] += self.grad[i];
    if (auto* g = grad_of(self, 1))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[j] += self.grad[i * n + j];
  });
}

Tensor scale_rows(const Tensor& a, std::span<const double> factors) {
  require_rank(a, 2, "scale_rows");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (factors.size() != m) throw DimensionError("scale_rows: factor count does not match rows");
  std::vector<double> f(factors.begin(), factors.end());
  const auto x = a.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] * f[i];
  return make_op("scale_rows", Shape{m, n}, std::move(out), {&a}, [f = std::move(f), n](Node& self) {
    if (auto* g = grad_of(self, 0))
      for (std::size_t i = 0; i < f.size(); ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += self.grad[i * n + j] * f[i];
  });
}

Tensor group_weighted_sum(const Tensor& weights, const Tensor& values) {
  require_rank(weights, 2, "group_weighted_sum");
  require_rank(values, 2, "group_weighted_sum");
  const std::size_t rows = weights.dim(0), k = weights.dim(1), c = values.dim(1);
  if (values.dim(0) != rows * k) {
    throw DimensionError("group_weighted_sum: weights " + shape_str(weights.shape()) + " vs values " +
                         shape_str(values.shape()));
  }
  const auto w = weights.data();
  const auto v = values.data();
  std::vector<double> out(rows * c, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t q = 0; q < k; ++q) {
      const double wq = w[r * k + q];
      const double* vrow = v.data() + (r * k + q) * c;
      for (std::size_t j = 0; j < c; ++j) out[r * c + j] += wq * vrow[j];
    }
  return make_op("group_weighted_sum", Shape{rows, c}, std::move(out), {&weights, &values},
                 [rows, k, c](Node& self) {
                   const auto& w = data_of(self, 0);
                   const auto& v = data_of(self, 1);
                   auto* gw = grad_of(self, 0);
                   auto* gv = grad_of(self, 1);
                   for (std::size_t r = 0; r < rows; ++r)
                     for (std::size_t q = 0; q < k; ++q) {
                       const double* grow = self.grad.data() + r * c;
                       const std::size_t vr = (r * k + q) * c;
                       if (gw) {
                         double acc = 0.0;
                         for (std::size_t j = 0; j < c; ++j) acc += grow[j] * v[vr + j];
                         (*gw)[r * k + q] += acc;
                       }
                       if (gv) {
                         const double wq = w[r * k + q];
                         for (std::size_t j = 0; j < c; ++j) (*gv)[vr + j] += wq * grow[j];
                       }
                     }
                 });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_op("sum", Shape{}, {s}, {&a}, [](Node& self) {
    if (auto* g = grad_of(self, 0))
      for (double& v : *g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  const std::size_t n = a.numel();
  if (n == 0) throw ContractError("mean of an empty tensor");
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_op("mean", Shape{}, {s / static_cast<double>(n)}, {&a}, [n](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      const double d = self.grad[0] / static_cast<double>(n);
      for (double& v : *g) v += d;
    }
  });
}

Tensor mean_last_axis(const Tensor& a) {
  if (a.rank() == 0) throw DimensionError("mean_last_axis on a scalar");
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  const std::size_t c = a.shape().back();
  const std::size_t rows = c ? a.numel() / c : 0;
  const auto x = a.data();
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += x[r * c + j];
    out[r] = s / static_cast<double>(c);
  }
  return make_op("mean_last_axis", std::move(out_shape), std::move(out), {&a}, [rows, c](Node& self) {
    if (auto* g = grad_of(self, 0))
      for (std::size_t r = 0; r < rows; ++r) {
        const double d = self.grad[r] / static_cast<double>(c);
        for (std::size_t j = 0; j < c; ++j) (*g)[r * c + j] += d;
      }
  });
}

Tensor tanh(const Tensor& a) {
  return unary("tanh", a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary("sigmoid", a,
               [](double x) {
                 if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
                 const double e = std::exp(x);
                 return e / (1.0 + e);
               },
               [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
  return unary("softplus", a, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
               [](double x, double) {
                 if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
                 const double e = std::exp(x);
                 return e / (1.0 + e);
               });
}

Tensor abs(const Tensor& a) {
  return unary("abs", a, [](double x) { return std::abs(x); },
               [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor logit(const Tensor& a) {
  for (double v : a.data()) {
    if (!(v > 0.0 && v < 1.0)) throw ContractError("logit: argument outside (0, 1)");
  }
  return unary("logit", a, [](double p) { return std::log(p / (1.0 - p)); },
               [](double p, double) { return 1.0 / (p * (1.0 - p)); });
}

Tensor atan2(const Tensor& y, const Tensor& x) {
  require_same_shape(y, x, "atan2");
  const auto yd = y.data();
  const auto xd = x.data();
  std::vector<double> out(yd.size());
  for (std::size_t i = 0; i < yd.size(); ++i) out[i] = std::atan2(yd[i], xd[i]);
  return make_op("atan2", y.shape(), std::move(out), {&y, &x}, [](Node& self) {
    const auto& yd = data_of(self, 0);
    const auto& xd = data_of(self, 1);
    auto* gy = grad_of(self, 0);
    auto* gx = grad_of(self, 1);
    for (std::size_t i = 0; i < yd.size(); ++i) {
      const double r2 = xd[i] * xd[i] + yd[i] * yd[i];
      if (r2 == 0.0) continue;
      if (gy) (*gy)[i] += self.grad[i] * xd[i] / r2;
      if (gx) (*gx)[i] -= self.grad[i] * yd[i] / r2;
    }
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ContractError("softmax: axis " + std::to_string(axis) + " out of range for shape " + shape_str(x.shape()));
  }
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t q = 0; q < inner; ++q) {
      const std::size_t base = o * n * inner + q;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, in[base + i * inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double e = std::exp(in[base + i * inner] - mx);
        out[base + i * inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < n; ++i) out[base + i * inner] /= z;
    }
  return make_op("softmax", s, std::move(out), {&x}, [outer, inner, n](Node& self) {
    auto* g = grad_of(self, 0);
    if (!g) return;
    const auto& y = self.data;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t q = 0; q < inner; ++q) {
        const std::size_t base = o * n * inner + q;
        double dot = 0.0;
        for (std::size_t i = 0; i < n; ++i) dot += self.grad[base + i * inner] * y[base + i * inner];
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t idx = base + i * inner;
          (*g)[idx] += y[idx] * (self.grad[idx] - dot);
        }
      }
  });
}

Tensor l2_loss(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "l2_loss");
  const std::size_t n = a.numel();
  if (n == 0) throw ContractError("l2_loss on empty tensors");
  const auto x = a.data();
  const auto y = b.data();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = x[i] - y[i];
    s += d * d;
  }
  return make_op("l2_loss", Shape{}, {s / static_cast<double>(n)}, {&a, &b}, [n](Node& self) {
    const auto& x = data_of(self, 0);
    const auto& y = data_of(self, 1);
    const double c = 2.0 * self.grad[0] / static_cast<double>(n);
    if (auto* g = grad_of(self, 0))
      for (std::size_t i = 0; i < n; ++i) (*g)[i] += c * (x[i] - y[i]);
    if (auto* g = grad_of(self, 1))
      for (std::size_t i = 0; i < n; ++i) (*g)[i] -= c * (x[i] - y[i]);
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, std::span<const double> weights) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  if (targets.size() != rows) throw DimensionError("cross_entropy: target count does not match rows");
  if (!weights.empty() && weights.size() != rows) throw DimensionError("cross_entropy: weight count mismatch");
  std::vector<int> t(targets.begin(), targets.end());
  std::vector<double> w = weights.empty() ? std::vector<double>(rows, 1.0)
                                          : std::vector<double>(weights.begin(), weights.end());
  double wsum = 0.0;
  for (double v : w) wsum += v;
  if (rows == 0 || wsum <= 0.0) throw ContractError("cross_entropy: empty batch or zero total weight");
  const auto x = logits.data();
  std::vector<double> probs(rows * k);
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (t[r] < 0 || static_cast<std::size_t>(t[r]) >= k) throw ContractError("cross_entropy: target out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, x[r * k + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      probs[r * k + j] = std::exp(x[r * k + j] - mx);
      z += probs[r * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) probs[r * k + j] /= z;
    loss += w[r] * -(x[r * k + static_cast<std::size_t>(t[r])] - mx - std::log(z));
  }
  loss /= wsum;
  return make_op("cross_entropy", Shape{}, {loss}, {&logits},
                 [t = std::move(t), w = std::move(w), probs = std::move(probs), rows, k, wsum](Node& self) {
                   auto* g = grad_of(self, 0);
                   if (!g) return;
                   for (std::size_t r = 0; r < rows; ++r) {
                     const double c = self.grad[0] * w[r] / wsum;
                     for (std::size_t j = 0; j < k; ++j) {
                       const double onehot = static_cast<std::size_t>(t[r]) == j ? 1.0 : 0.0;
                       (*g)[r * k + j] += c * (probs[r * k + j] - onehot);
                     }
                   }
                 });
}

Tensor bilinear_sample(const Tensor& map, const Tensor& coords) {
  require_rank(map, 3, "bilinear_sample");
  require_rank(coords, 2, "bilinear_sample");
  if (coords.dim(1) != 2) throw DimensionError("bilinear_sample: coords must be [N x 2]");
  const std::size_t c = map.dim(0), h = map.dim(1), w = map.dim(2), n = coords.dim(0);
  const auto m = map.data();
  const auto uv = coords.data();
  std::vector<double> out(n * c, 0.0);
  const double umax = static_cast<double>(w) - 1.0, vmax = static_cast<double>(h) - 1.0;
  const std::size_t plane = h * w;
  for (std::size_t s = 0; s < n; ++s) {
    const double u = uv[2 * s], v = uv[2 * s + 1];
    if (!(u >= 0.0 && u <= umax && v >= 0.0 && v <= vmax)) continue;
    const auto x0 = static_cast<std::size_t>(u), y0 = static_cast<std::size_t>(v);
    const std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
    const double fx = u - static_cast<double>(x0), fy = v - static_cast<double>(y0);
    const double w00 = (1 - fx) * (1 - fy), w01 = fx * (1 - fy), w10 = (1 - fx) * fy, w11 = fx * fy;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* p = m.data() + ch * plane;
      out[s * c + ch] = w00 * p[y0 * w + x0] + w01 * p[y0 * w + x1] + w10 * p[y1 * w + x0] + w11 * p[y1 * w + x1];
    }
  }
  return make_op("bilinear_sample", Shape{n, c}, std::move(out), {&map, &coords},
                 [c, h, w, n, umax, vmax, plane](Node& self) {
                   const auto& m = data_of(self, 0);
                   const auto& uv = data_of(self, 1);
                   auto* gm = grad_of(self, 0);
                   auto* gc = grad_of(self, 1);
                   for (std::size_t s = 0; s < n; ++s) {
                     const double u = uv[2 * s], v = uv[2 * s + 1];
                     if (!(u >= 0.0 && u <= umax && v >= 0.0 && v <= vmax)) continue;
                     const auto x0 = static_cast<std::size_t>(u), y0 = static_cast<std::size_t>(v);
                     const std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
                     const double fx = u - static_cast<double>(x0), fy = v - static_cast<double>(y0);
                     double du = 0.0, dv = 0.0;
                     for (std::size_t ch = 0; ch < c; ++ch) {
                       const double go = self.grad[s * c + ch];
                       if (go == 0.0) continue;
                       const std::size_t base = ch * plane;
                       const double p00 = m[base + y0 * w + x0], p01 = m[base + y0 * w + x1];
                       const double p10 = m[base + y1 * w + x0], p11 = m[base + y1 * w + x1];
                       if (gm) {
                         (*gm)[base + y0 * w + x0] += go * (1 - fx) * (1 - fy);
                         (*gm)[base + y0 * w + x1] += go * fx * (1 - fy);
                         (*gm)[base + y1 * w + x0] += go * (1 - fx) * fy;
                         (*gm)[base + y1 * w + x1] += go * fx * fy;
                       }
                       du += go * ((1 - fy) * (p01 - p00) + fy * (p11 - p10));
                       dv += go * ((1 - fx) * (p10 - p00) + fx * (p11 - p01));
                     }
                     if (gc) {
                       (*gc)[2 * s] += du;
                       (*gc)[2 * s + 1] += dv;
                     }
                   }
                 });
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride) {
  require_rank(input, 3, "conv2d");
  require_rank(kernel, 4, "conv2d");
  const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t cout = kernel.dim(0), ks = kernel.dim(2);
  if (kernel.dim(1) != cin) {
    throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) + " expects " +
                         std::to_string(kernel.dim(1)) + " input channels, input " + shape_str(input.shape()) +
                         " has " + std::to_string(cin));
  }
  if (kernel.dim(3) != ks || ks % 2 == 0) throw DimensionError("conv2d: kernel must be square with odd size");
  if (h < ks || w < ks) throw DimensionError("conv2d: input smaller than kernel");
  if (stride == 0) throw ContractError("conv2d: stride must be positive");
  const auto pad = static_cast<std::ptrdiff_t>(ks / 2);
  const std::size_t ho = (h - 1) / stride + 1, wo = (w - 1) / stride + 1;
  const auto x = input.data();
  const auto k = kernel.data();
  std::vector<double> out(cout * ho * wo, 0.0);

  // Visits every in-bounds (output row segment, input row segment, kernel
  // tap). `row(out_idx, in_idx, count, k_idx)`; the input advances by `stride`.
  auto for_each_row = [=](auto&& row) {
    const auto sp = static_cast<std::ptrdiff_t>(stride);
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t ci = 0; ci < cin; ++ci)
        for (std::size_t kh = 0; kh < ks; ++kh)
          for (std::size_t kw = 0; kw < ks; ++kw) {
            const std::size_t kidx = ((co * cin + ci) * ks + kh) * ks + kw;
            const auto shift = static_cast<std::ptrdiff_t>(kw) - pad;
            // ow * stride + shift must land in [0, w).
            const std::ptrdiff_t lo = shift >= 0 ? 0 : (-shift + sp - 1) / sp;
            const std::ptrdiff_t hi =
                std::min(static_cast<std::ptrdiff_t>(wo), (static_cast<std::ptrdiff_t>(w) - 1 - shift) / sp + 1);
            if (hi <= lo) continue;
            for (std::size_t oh = 0; oh < ho; ++oh) {
              const auto ih = static_cast<std::ptrdiff_t>(oh * stride + kh) - pad;
              if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
              const std::size_t in_row = (ci * h + static_cast<std::size_t>(ih)) * w;
              const std::size_t out_row = (co * ho + oh) * wo;
              row(out_row + static_cast<std::size_t>(lo), in_row + static_cast<std::size_t>(lo * sp + shift),
                  static_cast<std::size_t>(hi - lo), kidx);
            }
          }
  };
  for_each_row([&](std::size_t o, std::size_t i, std::size_t n, std::size_t kk) {
    const double kv = k[kk];
    for (std::size_t t = 0; t < n; ++t) out[o + t] += kv * x[i + t * stride];
  });

  return make_op("conv2d", Shape{cout, ho, wo}, std::move(out), {&input, &kernel}, [for_each_row, stride](Node& self) {
    const auto& x = data_of(self, 0);
    const auto& k = data_of(self, 1);
    auto* gx = grad_of(self, 0);
    auto* gk = grad_of(self, 1);
    const auto& go = self.grad;
    if (gx) {
      for_each_row([&](std::size_t o, std::size_t i, std::size_t n, std::size_t kk) {
        const double kv = k[kk];
        for (std::size_t t = 0; t < n; ++t) (*gx)[i + t * stride] += kv * go[o + t];
      });
    }
    if (gk) {
      for_each_row([&](std::size_t o, std::size_t i, std::size_t n, std::size_t kk) {
        double acc = 0.0;
        for (std::size_t t = 0; t < n; ++t) acc += x[i + t * stride] * go[o + t];
        (*gk)[kk] += acc;
      });
    }
  });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 3, "add_channel_bias");
  require_rank(bias, 1, "add_channel_bias");
  const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
  if (bias.dim(0) != c) throw DimensionError("add_channel_bias: channel mismatch");
  const auto in = x.data();
  const auto b = bias.data();
  std::vector<double> out(in.size());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < plane; ++i) out[ch * plane + i] = in[ch * plane + i] + b[ch];
  return make_op("add_channel_bias", x.shape(), std::move(out), {&x, &bias}, [c, plane](Node& self) {
    if (auto* g = grad_of(self, 0))
      for (std::size_t i = 0; i < c * plane; ++i) (*g)[i] += self.grad[i];
    if (auto* g = grad_of(self, 1))
      for (std::size_t ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (std::size_t i = 0; i < plane; ++i) s += self.grad[ch * plane + i];
        (*g)[ch] += s;
      }
  });
}

}  // namespace bevkd::ops
