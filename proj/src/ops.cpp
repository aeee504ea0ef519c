#include "msda/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <mutex>
#include <numeric>
#include <string>

#include <cblas.h>

namespace msda {

using detail::make_result;
using detail::Node;

namespace {

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n,
          std::size_t k, double alpha, const double* a, const double* b,
          double beta, double* c) {
  static std::once_flag single_thread;
  std::call_once(single_thread, [] { openblas_set_num_threads(1); });
  const auto lda = static_cast<int>(trans_a ? m : k);
  const auto ldb = static_cast<int>(trans_b ? k : n);
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), alpha, a, lda, b, ldb,
              beta, c, static_cast<int>(n));
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got shape " +
                         shape_str(t.shape()));
  }
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_scalar(const char* op, const Tensor& s) {
  if (s.numel() != 1) {
    throw DimensionError(std::string(op) + ": expected a scalar, got shape " +
                         shape_str(s.shape()));
  }
}

Node& input(Node& self, std::size_t k) { return *self.inputs[k]; }

// Shared body of unary elementwise ops: d(in) += d(out) * local(in, out).
template <typename Fwd, typename Local>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Local local) {
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  return make_result(a.shape(), std::move(out), {a}, op, [local](Node& self) {
    Node& in = input(self, 0);
    if (!in.requires_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      in.grad[i] += self.grad[i] * local(in.value[i], self.value[i]);
    }
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  if (b.size(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree, " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  if (m && n && k) {
    gemm(false, false, m, n, k, 1.0, a.data().data(), b.data().data(), 0.0,
         out.data());
  }
  return make_result({m, n}, std::move(out), {a, b}, "matmul",
                     [m, n, k](Node& self) {
                       Node& a = input(self, 0);
                       Node& b = input(self, 1);
                       if (!(m && n && k)) return;
                       if (a.requires_grad) {
                         gemm(false, true, m, k, n, 1.0, self.grad.data(),
                              b.value.data(), 1.0, a.grad.data());
                       }
                       if (b.requires_grad) {
                         gemm(true, false, k, n, m, 1.0, a.value.data(),
                              self.grad.data(), 1.0, b.grad.data());
                       }
                     });
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  const std::size_t m = a.size(0), n = a.size(1);
  std::vector<double> out(m * n);
  const auto x = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return make_result({n, m}, std::move(out), {a}, "transpose",
                     [m, n](Node& self) {
                       Node& in = input(self, 0);
                       if (!in.requires_grad) return;
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < n; ++j)
                           in.grad[i * n + j] += self.grad[j * m + i];
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_result(a.shape(), std::move(out), {a, b}, "add", [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      Node& in = input(self, k);
      if (!in.requires_grad) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        in.grad[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_result(a.shape(), std::move(out), {a, b}, "sub", [](Node& self) {
    Node& a = input(self, 0);
    Node& b = input(self, 1);
    if (a.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        a.grad[i] += self.grad[i];
    if (b.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        b.grad[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result(a.shape(), std::move(out), {a, b}, "mul", [](Node& self) {
    Node& a = input(self, 0);
    Node& b = input(self, 1);
    if (a.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        a.grad[i] += self.grad[i] * b.value[i];
    if (b.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        b.grad[i] += self.grad[i] * a.value[i];
  });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return x * factor; },
      [factor](double, double) { return factor; });
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  require_scalar("mul_scalar", s);
  const double c = s.item();
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * c;
  return make_result(a.shape(), std::move(out), {a, s}, "mul_scalar",
                     [](Node& self) {
                       Node& a = input(self, 0);
                       Node& s = input(self, 1);
                       if (a.requires_grad)
                         for (std::size_t i = 0; i < self.grad.size(); ++i)
                           a.grad[i] += self.grad[i] * s.value[0];
                       if (s.requires_grad) {
                         double acc = 0.0;
                         for (std::size_t i = 0; i < self.grad.size(); ++i)
                           acc += self.grad[i] * a.value[i];
                         s.grad[0] += acc;
                       }
                     });
}

Tensor reciprocal(const Tensor& a) {
  return unary(
      "reciprocal", a, [](double x) { return 1.0 / x; },
      [](double, double y) { return -y * y; });
}

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor square(const Tensor& a) {
  return unary(
      "square", a, [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

Tensor abs(const Tensor& a) {
  return unary(
      "abs", a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor relu(const Tensor& a) {
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank("add_row_bias", x, 2);
  const std::size_t m = x.size(0), n = x.size(1);
  if (bias.numel() != n || bias.rank() > 2 ||
      (bias.rank() == 2 && bias.size(0) != 1)) {
    throw DimensionError("add_row_bias: bias " + shape_str(bias.shape()) +
                         " does not match rows of " + shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto b = bias.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b[j];
  return make_result(x.shape(), std::move(out), {x, bias}, "add_row_bias",
                     [m, n](Node& self) {
                       Node& x = input(self, 0);
                       Node& b = input(self, 1);
                       if (x.requires_grad)
                         for (std::size_t i = 0; i < m * n; ++i)
                           x.grad[i] += self.grad[i];
                       if (b.requires_grad)
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j)
                             b.grad[j] += self.grad[i * n + j];
                     });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  require_rank("add_channel_bias", x, 4);
  const std::size_t batch = x.size(0), channels = x.size(1);
  const std::size_t plane = x.size(2) * x.size(3);
  if (bias.rank() != 1 || bias.size(0) != channels) {
    throw DimensionError("add_channel_bias: bias " + shape_str(bias.shape()) +
                         " does not match channels of " + shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto b = bias.data();
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < channels; ++c) {
      double* row = out.data() + (n * channels + c) * plane;
      for (std::size_t p = 0; p < plane; ++p) row[p] += b[c];
    }
  return make_result(
      x.shape(), std::move(out), {x, bias}, "add_channel_bias",
      [batch, channels, plane](Node& self) {
        Node& x = input(self, 0);
        Node& b = input(self, 1);
        if (x.requires_grad)
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            x.grad[i] += self.grad[i];
        if (b.requires_grad)
          for (std::size_t n = 0; n < batch; ++n)
            for (std::size_t c = 0; c < channels; ++c) {
              const double* g = self.grad.data() + (n * channels + c) * plane;
              double acc = 0.0;
              for (std::size_t p = 0; p < plane; ++p) acc += g[p];
              b.grad[c] += acc;
            }
      });
}

Tensor sum(const Tensor& a) {
  const auto x = a.data();
  const double total = std::accumulate(x.begin(), x.end(), 0.0);
  return make_result({}, {total}, {a}, "sum", [](Node& self) {
    Node& in = input(self, 0);
    if (!in.requires_grad) return;
    for (auto& g : in.grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ContractError("mean of an empty tensor");
  const auto x = a.data();
  const double n = static_cast<double>(x.size());
  const double total = std::accumulate(x.begin(), x.end(), 0.0);
  return make_result({}, {total / n}, {a}, "mean", [n](Node& self) {
    Node& in = input(self, 0);
    if (!in.requires_grad) return;
    const double g = self.grad[0] / n;
    for (auto& v : in.grad) v += g;
  });
}

Tensor column_sums(const Tensor& a) {
  require_rank("column_sums", a, 2);
  const std::size_t m = a.size(0), n = a.size(1);
  std::vector<double> out(n, 0.0);
  const auto x = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += x[i * n + j];
  return make_result({1, n}, std::move(out), {a}, "column_sums",
                     [m, n](Node& self) {
                       Node& in = input(self, 0);
                       if (!in.requires_grad) return;
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < n; ++j)
                           in.grad[i * n + j] += self.grad[j];
                     });
}

Tensor softmax_rows(const Tensor& x) {
  require_rank("softmax_rows", x, 2);
  const std::size_t m = x.size(0), c = x.size(1);
  if (c < 1) throw DimensionError("softmax_rows: needs at least one column");
  std::vector<double> out(m * c);
  const auto v = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = v.data() + i * c;
    double* o = out.data() + i * c;
    const double top = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (o[j] = std::exp(row[j] - top));
    for (std::size_t j = 0; j < c; ++j) o[j] /= z;
  }
  return make_result(x.shape(), std::move(out), {x}, "softmax_rows",
                     [m, c](Node& self) {
                       Node& in = input(self, 0);
                       if (!in.requires_grad) return;
                       for (std::size_t i = 0; i < m; ++i) {
                         const double* y = self.value.data() + i * c;
                         const double* g = self.grad.data() + i * c;
                         double dot = 0.0;
                         for (std::size_t j = 0; j < c; ++j) dot += g[j] * y[j];
                         for (std::size_t j = 0; j < c; ++j)
                           in.grad[i * c + j] += y[j] * (g[j] - dot);
                       }
                     });
}

Tensor log_softmax_rows(const Tensor& x) {
  require_rank("log_softmax_rows", x, 2);
  const std::size_t m = x.size(0), c = x.size(1);
  if (c < 1) throw DimensionError("log_softmax_rows: needs at least one column");
  std::vector<double> out(m * c);
  const auto v = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = v.data() + i * c;
    const double top = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - top);
    const double lse = top + std::log(z);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[j] - lse;
  }
  return make_result(x.shape(), std::move(out), {x}, "log_softmax_rows",
                     [m, c](Node& self) {
                       Node& in = input(self, 0);
                       if (!in.requires_grad) return;
                       for (std::size_t i = 0; i < m; ++i) {
                         const double* y = self.value.data() + i * c;
                         const double* g = self.grad.data() + i * c;
                         double total = 0.0;
                         for (std::size_t j = 0; j < c; ++j) total += g[j];
                         for (std::size_t j = 0; j < c; ++j)
                           in.grad[i * c + j] += g[j] - std::exp(y[j]) * total;
                       }
                     });
}

Tensor select_per_row(const Tensor& x, std::span<const int> index) {
  require_rank("select_per_row", x, 2);
  const std::size_t m = x.size(0), c = x.size(1);
  if (index.size() != m) {
    throw DimensionError("select_per_row: " + std::to_string(index.size()) +
                         " indices for " + shape_str(x.shape()));
  }
  std::vector<std::size_t> cols(m);
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (index[i] < 0 || static_cast<std::size_t>(index[i]) >= c) {
      throw ContractError("select_per_row: index " + std::to_string(index[i]) +
                          " outside [0, " + std::to_string(c) + ")");
    }
    cols[i] = static_cast<std::size_t>(index[i]);
    out[i] = x.data()[i * c + cols[i]];
  }
  return make_result({m}, std::move(out), {x}, "select_per_row",
                     [c, cols = std::move(cols)](Node& self) {
                       Node& in = input(self, 0);
                       if (!in.requires_grad) return;
                       for (std::size_t i = 0; i < cols.size(); ++i)
                         in.grad[i * c + cols[i]] += self.grad[i];
                     });
}

Tensor conv2d(const Tensor& input_t, const Tensor& kernel, std::size_t stride) {
  require_rank("conv2d", input_t, 4);
  require_rank("conv2d", kernel, 4);
  if (stride == 0) throw ContractError("conv2d: stride must be positive");
  const std::size_t batch = input_t.size(0), cin = input_t.size(1);
  const std::size_t h = input_t.size(2), w = input_t.size(3);
  const std::size_t cout = kernel.size(0), kh = kernel.size(2),
                    kw = kernel.size(3);
  if (kernel.size(1) != cin) {
    throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) +
                         " does not match input channels of " +
                         shape_str(input_t.shape()));
  }
  if (kh > h || kw > w || kh == 0 || kw == 0) {
    throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) +
                         " larger than input " + shape_str(input_t.shape()));
  }
  const std::size_t oh = (h - kh) / stride + 1, ow = (w - kw) / stride + 1;
  const std::size_t rows = cin * kh * kw;  // im2col rows
  const std::size_t plane = oh * ow;
  const std::size_t cols_n = batch * plane;

  // cols[r, n*plane + p] = input[n, ci, oy*stride + ki, ox*stride + kj]
  auto cols = std::make_shared<std::vector<double>>(rows * cols_n);
  const double* x = input_t.data().data();
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        double* dst = cols->data() + ((ci * kh + ki) * kw + kj) * cols_n;
        for (std::size_t n = 0; n < batch; ++n) {
          const double* src = x + (n * cin + ci) * h * w;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const double* line = src + (oy * stride + ki) * w + kj;
            double* out_line = dst + n * plane + oy * ow;
            for (std::size_t ox = 0; ox < ow; ++ox)
              out_line[ox] = line[ox * stride];
          }
        }
      }

  std::vector<double> staged(cout * cols_n);
  gemm(false, false, cout, cols_n, rows, 1.0, kernel.data().data(),
       cols->data(), 0.0, staged.data());
  std::vector<double> out(batch * cout * plane);
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t co = 0; co < cout; ++co)
      std::copy_n(staged.data() + co * cols_n + n * plane, plane,
                  out.data() + (n * cout + co) * plane);

  return make_result(
      {batch, cout, oh, ow}, std::move(out), {input_t, kernel}, "conv2d",
      [=](Node& self) {
        Node& in = input(self, 0);
        Node& k = input(self, 1);
        std::vector<double> g(cout * cols_n);
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t co = 0; co < cout; ++co)
            std::copy_n(self.grad.data() + (n * cout + co) * plane, plane,
                        g.data() + co * cols_n + n * plane);
        if (k.requires_grad) {
          gemm(false, true, cout, rows, cols_n, 1.0, g.data(), cols->data(),
               1.0, k.grad.data());
        }
        if (in.requires_grad) {
          std::vector<double> dcols(rows * cols_n);
          gemm(true, false, rows, cols_n, cout, 1.0, k.value.data(), g.data(),
               0.0, dcols.data());
          for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t ki = 0; ki < kh; ++ki)
              for (std::size_t kj = 0; kj < kw; ++kj) {
                const double* src =
                    dcols.data() + ((ci * kh + ki) * kw + kj) * cols_n;
                for (std::size_t n = 0; n < batch; ++n) {
                  double* dst = in.grad.data() + (n * cin + ci) * h * w;
                  for (std::size_t oy = 0; oy < oh; ++oy) {
                    double* line = dst + (oy * stride + ki) * w + kj;
                    const double* g_line = src + n * plane + oy * ow;
                    for (std::size_t ox = 0; ox < ow; ++ox)
                      line[ox * stride] += g_line[ox];
                  }
                }
              }
        }
      });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank("global_avg_pool", x, 4);
  const std::size_t batch = x.size(0), channels = x.size(1);
  const std::size_t plane = x.size(2) * x.size(3);
  if (plane == 0) throw DimensionError("global_avg_pool: empty spatial extent");
  std::vector<double> out(batch * channels);
  const auto v = x.data();
  for (std::size_t i = 0; i < batch * channels; ++i) {
    const double* p = v.data() + i * plane;
    out[i] = std::accumulate(p, p + plane, 0.0) / static_cast<double>(plane);
  }
  return make_result({batch, channels}, std::move(out), {x}, "global_avg_pool",
                     [plane](Node& self) {
                       Node& in = input(self, 0);
                       if (!in.requires_grad) return;
                       const double inv = 1.0 / static_cast<double>(plane);
                       for (std::size_t i = 0; i < self.grad.size(); ++i) {
                         const double g = self.grad[i] * inv;
                         double* p = in.grad.data() + i * plane;
                         for (std::size_t q = 0; q < plane; ++q) p[q] += g;
                       }
                     });
}

Tensor pairwise_sq_dist(const Tensor& x, const Tensor& y) {
  require_rank("pairwise_sq_dist", x, 2);
  require_rank("pairwise_sq_dist", y, 2);
  const std::size_t a = x.size(0), b = y.size(0), d = x.size(1);
  if (y.size(1) != d) {
    throw DimensionError("pairwise_sq_dist: feature dimension mismatch " +
                         shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  }
  std::vector<double> out(a * b);
  const auto xv = x.data(), yv = y.data();
  for (std::size_t i = 0; i < a; ++i)
    for (std::size_t j = 0; j < b; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = xv[i * d + k] - yv[j * d + k];
        acc += diff * diff;
      }
      out[i * b + j] = acc;
    }
  return make_result({a, b}, std::move(out), {x, y}, "pairwise_sq_dist",
                     [a, b, d](Node& self) {
                       Node& x = input(self, 0);
                       Node& y = input(self, 1);
                       for (std::size_t i = 0; i < a; ++i)
                         for (std::size_t j = 0; j < b; ++j) {
                           const double g = 2.0 * self.grad[i * b + j];
                           if (g == 0.0) continue;
                           for (std::size_t k = 0; k < d; ++k) {
                             const double diff =
                                 x.value[i * d + k] - y.value[j * d + k];
                             if (x.requires_grad) x.grad[i * d + k] += g * diff;
                             if (y.requires_grad) y.grad[j * d + k] -= g * diff;
                           }
                         }
                     });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  require_rank("concat_rows", parts[0], 2);
  const std::size_t d = parts[0].size(1);
  std::size_t rows = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    require_rank("concat_rows", p, 2);
    if (p.size(1) != d) {
      throw DimensionError("concat_rows: column mismatch " +
                           shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    offsets.push_back(rows * d);
    rows += p.size(0);
  }
  std::vector<double> out;
  out.reserve(rows * d);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_result({rows, d}, std::move(out), std::move(inputs), "concat_rows",
                     [offsets = std::move(offsets)](Node& self) {
                       for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                         Node& in = input(self, k);
                         if (!in.requires_grad) continue;
                         for (std::size_t i = 0; i < in.grad.size(); ++i)
                           in.grad[i] += self.grad[offsets[k] + i];
                       }
                     });
}

Tensor upper_triangle(const Tensor& square_t) {
  require_rank("upper_triangle", square_t, 2);
  const std::size_t n = square_t.size(0);
  if (square_t.size(1) != n) {
    throw DimensionError("upper_triangle: not square " +
                         shape_str(square_t.shape()));
  }
  std::vector<double> out;
  out.reserve(n * (n - (n ? 1 : 0)) / 2);
  const auto v = square_t.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) out.push_back(v[i * n + j]);
  const std::size_t count = out.size();
  return make_result({count}, std::move(out), {square_t}, "upper_triangle",
                     [n](Node& self) {
                       Node& in = input(self, 0);
                       if (!in.requires_grad) return;
                       std::size_t q = 0;
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = i + 1; j < n; ++j)
                           in.grad[i * n + j] += self.grad[q++];
                     });
}

Tensor median(const Tensor& values) {
  const std::size_t n = values.numel();
  if (n == 0) throw ContractError("median of an empty tensor");
  const auto v = values.data();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<std::size_t> picked;
  double result;
  if (n % 2 == 1) {
    picked = {order[n / 2]};
    result = v[picked[0]];
  } else {
    picked = {order[n / 2 - 1], order[n / 2]};
    result = 0.5 * (v[picked[0]] + v[picked[1]]);
  }
  return make_result({}, {result}, {values}, "median",
                     [picked = std::move(picked)](Node& self) {
                       Node& in = input(self, 0);
                       if (!in.requires_grad) return;
                       const double share =
                           self.grad[0] / static_cast<double>(picked.size());
                       for (auto idx : picked) in.grad[idx] += share;
                     });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  if (x.rank() == 0) throw DimensionError("gather_rows: needs a batch axis");
  const std::size_t n = x.size(0);
  const std::size_t stride = n ? x.numel() / n : 0;
  std::vector<double> out(rows.size() * stride);
  const auto v = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) {
      throw DimensionError("gather_rows: row " + std::to_string(rows[i]) +
                           " out of range for " + shape_str(x.shape()));
    }
    std::copy_n(v.data() + rows[i] * stride, stride, out.data() + i * stride);
  }
  Shape shape = x.shape();
  shape[0] = rows.size();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result(std::move(shape), std::move(out), {x}, "gather_rows",
                     [stride, idx = std::move(idx)](Node& self) {
                       Node& in = input(self, 0);
                       if (!in.requires_grad) return;
                       for (std::size_t i = 0; i < idx.size(); ++i)
                         for (std::size_t k = 0; k < stride; ++k)
                           in.grad[idx[i] * stride + k] +=
                               self.grad[i * stride + k];
                     });
}

}  // namespace msda
