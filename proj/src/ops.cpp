#include "tic/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "gemm.hpp"

namespace tic::ops {

using detail::idx;
using detail::Node;

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

int norm_axis(int axis, int ndim, const char* op) {
  if (axis < 0) axis += ndim;
  if (axis < 0 || axis >= ndim) throw ShapeError(std::string(op) + ": axis out of range");
  return axis;
}

struct AxisSplit {
  idx outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<std::size_t>(i)];
  r.n = s[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double std_normal_cdf(double x) { return 0.5 * std::erfc(-x * kInvSqrt2); }
double std_normal_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }
double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <class F, class D>
Tensor unary(const Tensor& x, F f, D dfdx) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = f(v);
  return Tensor::make_result(x.shape(), std::move(out), {x}, [dfdx](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      p.grad[i] += self.grad[i] * dfdx(p.value[i], self.value[i]);
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  std::vector<double> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (int k = 0; k < 2; ++k) {
      if (!self.parent_needs_grad(k)) continue;
      auto& g = self.parents[k]->grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  std::vector<double> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (self.parent_needs_grad(0)) {
      auto& g = self.parents[0]->grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parent_needs_grad(1)) {
      auto& g = self.parents[1]->grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  std::vector<double> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.value[i];
    if (pb.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.value[i];
  });
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor add_channel(const Tensor& x, const Tensor& b, int axis) {
  axis = norm_axis(axis, x.ndim(), "add_channel");
  const AxisSplit sp = split_at(x.shape(), axis);
  if (b.numel() != sp.n) {
    throw ShapeError("add_channel: bias " + shape_str(b.shape()) + " does not match axis " +
                     std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  auto bd = b.data();
  for (idx o = 0; o < sp.outer; ++o)
    for (idx c = 0; c < sp.n; ++c) {
      double* p = out.data() + (o * sp.n + c) * sp.inner;
      for (idx i = 0; i < sp.inner; ++i) p[i] += bd[c];
    }
  return Tensor::make_result(x.shape(), std::move(out), {x, b}, [sp](Node& self) {
    if (self.parent_needs_grad(0)) {
      auto& g = self.parents[0]->grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parent_needs_grad(1)) {
      auto& g = self.parents[1]->grad;
      for (idx o = 0; o < sp.outer; ++o)
        for (idx c = 0; c < sp.n; ++c) {
          const double* p = self.grad.data() + (o * sp.n + c) * sp.inner;
          double s = 0.0;
          for (idx i = 0; i < sp.inner; ++i) s += p[i];
          g[c] += s;
        }
    }
  });
}

Tensor mul_channel(const Tensor& x, const Tensor& b, int axis) {
  axis = norm_axis(axis, x.ndim(), "mul_channel");
  const AxisSplit sp = split_at(x.shape(), axis);
  if (b.numel() != sp.n) {
    throw ShapeError("mul_channel: scale " + shape_str(b.shape()) + " does not match axis " +
                     std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  auto bd = b.data();
  for (idx o = 0; o < sp.outer; ++o)
    for (idx c = 0; c < sp.n; ++c) {
      double* p = out.data() + (o * sp.n + c) * sp.inner;
      for (idx i = 0; i < sp.inner; ++i) p[i] *= bd[c];
    }
  return Tensor::make_result(x.shape(), std::move(out), {x, b}, [sp](Node& self) {
    Node& px = *self.parents[0];
    Node& pb = *self.parents[1];
    for (idx o = 0; o < sp.outer; ++o)
      for (idx c = 0; c < sp.n; ++c) {
        const idx base = (o * sp.n + c) * sp.inner;
        double s = 0.0;
        for (idx i = 0; i < sp.inner; ++i) {
          const double g = self.grad[static_cast<std::size_t>(base + i)];
          if (px.requires_grad) px.grad[static_cast<std::size_t>(base + i)] += g * pb.value[static_cast<std::size_t>(c)];
          s += g * px.value[static_cast<std::size_t>(base + i)];
        }
        if (pb.requires_grad) pb.grad[static_cast<std::size_t>(c)] += s;
      }
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return Tensor::make_result({}, {s}, {x}, [](Node& self) {
    auto& g = self.parents[0]->grad;
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mse");
  const auto n = static_cast<double>(a.numel());
  auto ad = a.data();
  auto bd = b.data();
  double s = 0.0;
  for (std::size_t i = 0; i < ad.size(); ++i) {
    const double d = ad[i] - bd[i];
    s += d * d;
  }
  return Tensor::make_result({}, {s / n}, {a, b}, [n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const double g = self.grad[0] * 2.0 / n;
    for (std::size_t i = 0; i < pa.value.size(); ++i) {
      const double d = g * (pa.value[i] - pb.value[i]);
      if (pa.requires_grad) pa.grad[i] += d;
      if (pb.requires_grad) pb.grad[i] -= d;
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const idx M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(M * N), 0.0);
  detail::gemm_nn(M, N, K, a.data().data(), b.data().data(), out.data());
  return Tensor::make_result({M, N}, std::move(out), {a, b}, [M, N, K](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) detail::gemm_nt(M, K, N, self.grad.data(), pb.value.data(), pa.grad.data());
    if (pb.requires_grad) detail::gemm_tn(K, N, M, pa.value.data(), self.grad.data(), pb.grad.data());
  });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  const bool ok = a.ndim() == 3 && b.ndim() == 3 && a.dim(0) == b.dim(0) &&
                  a.dim(2) == (transpose_b ? b.dim(2) : b.dim(1));
  if (!ok) {
    throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + (transpose_b ? " (b transposed)" : ""));
  }
  const idx B = a.dim(0), M = a.dim(1), K = a.dim(2);
  const idx N = transpose_b ? b.dim(1) : b.dim(2);
  std::vector<double> out(static_cast<std::size_t>(B * M * N), 0.0);
  for (idx s = 0; s < B; ++s) {
    const double* A = a.data().data() + s * M * K;
    const double* Bp = b.data().data() + s * K * N;
    double* C = out.data() + s * M * N;
    if (transpose_b)
      detail::gemm_nt(M, N, K, A, Bp, C);
    else
      detail::gemm_nn(M, N, K, A, Bp, C);
  }
  return Tensor::make_result({B, M, N}, std::move(out), {a, b}, [B, M, N, K, transpose_b](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    for (idx s = 0; s < B; ++s) {
      const double* G = self.grad.data() + s * M * N;
      const double* A = pa.value.data() + s * M * K;
      const double* Bp = pb.value.data() + s * K * N;
      if (pa.requires_grad) {
        double* dA = pa.grad.data() + s * M * K;
        if (transpose_b)
          detail::gemm_nn(M, K, N, G, Bp, dA);  // dA = G * B, B is [N,K]
        else
          detail::gemm_nt(M, K, N, G, Bp, dA);  // dA = G * B^T, B is [K,N]
      }
      if (pb.requires_grad) {
        double* dB = pb.grad.data() + s * K * N;
        if (transpose_b)
          detail::gemm_tn(N, K, M, G, A, dB);  // dB = G^T * A, [N,K]
        else
          detail::gemm_tn(K, N, M, A, G, dB);  // dB = A^T * G, [K,N]
      }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.ndim() != 2 || x.ndim() < 1 || x.dim(-1) != weight.dim(1)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  const idx in = weight.dim(1), outc = weight.dim(0);
  if (bias.defined() && bias.numel() != outc) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " for weight " + shape_str(weight.shape()));
  }
  const idx T = x.numel() / in;
  std::vector<double> wt(static_cast<std::size_t>(in * outc));
  auto wd = weight.data();
  for (idx o = 0; o < outc; ++o)
    for (idx i = 0; i < in; ++i) wt[static_cast<std::size_t>(i * outc + o)] = wd[static_cast<std::size_t>(o * in + i)];
  std::vector<double> out(static_cast<std::size_t>(T * outc), 0.0);
  if (bias.defined()) {
    auto bd = bias.data();
    for (idx t = 0; t < T; ++t) std::copy(bd.begin(), bd.end(), out.begin() + t * outc);
  }
  detail::gemm_nn(T, outc, in, x.data().data(), wt.data(), out.data());
  Shape os = x.shape();
  os.back() = outc;
  std::vector<Tensor> inputs{x, weight};
  const bool has_bias = bias.defined();
  if (has_bias) inputs.push_back(bias);
  return Tensor::make_result(std::move(os), std::move(out), std::move(inputs),
                             [T, in, outc, has_bias](Node& self) {
                               Node& px = *self.parents[0];
                               Node& pw = *self.parents[1];
                               if (px.requires_grad)
                                 detail::gemm_nn(T, in, outc, self.grad.data(), pw.value.data(), px.grad.data());
                               if (pw.requires_grad)
                                 detail::gemm_tn(outc, in, T, self.grad.data(), px.value.data(), pw.grad.data());
                               if (has_bias && self.parents[2]->requires_grad) {
                                 auto& gb = self.parents[2]->grad;
                                 for (idx t = 0; t < T; ++t)
                                   for (idx o = 0; o < outc; ++o) gb[static_cast<std::size_t>(o)] += self.grad[static_cast<std::size_t>(t * outc + o)];
                               }
                             });
}

Tensor softmax(const Tensor& x, int axis) {
  axis = norm_axis(axis, x.ndim(), "softmax");
  const AxisSplit sp = split_at(x.shape(), axis);
  std::vector<double> out(x.data().begin(), x.data().end());
  for (idx o = 0; o < sp.outer; ++o)
    for (idx i = 0; i < sp.inner; ++i) {
      double* base = out.data() + o * sp.n * sp.inner + i;
      double m = base[0];
      for (idx k = 1; k < sp.n; ++k) m = std::max(m, base[k * sp.inner]);
      double s = 0.0;
      for (idx k = 0; k < sp.n; ++k) {
        double& v = base[k * sp.inner];
        v = std::exp(v - m);
        s += v;
      }
      const double inv = 1.0 / s;
      for (idx k = 0; k < sp.n; ++k) base[k * sp.inner] *= inv;
    }
  return Tensor::make_result(x.shape(), std::move(out), {x}, [sp](Node& self) {
    auto& g = self.parents[0]->grad;
    for (idx o = 0; o < sp.outer; ++o)
      for (idx i = 0; i < sp.inner; ++i) {
        const idx base = o * sp.n * sp.inner + i;
        double dot = 0.0;
        for (idx k = 0; k < sp.n; ++k) {
          const auto j = static_cast<std::size_t>(base + k * sp.inner);
          dot += self.grad[j] * self.value[j];
        }
        for (idx k = 0; k < sp.n; ++k) {
          const auto j = static_cast<std::size_t>(base + k * sp.inner);
          g[j] += self.value[j] * (self.grad[j] - dot);
        }
      }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const idx C = x.dim(-1);
  if (gain.numel() != C || bias.numel() != C) {
    throw ShapeError("layer_norm: affine parameters do not match last axis of " + shape_str(x.shape()));
  }
  const idx T = x.numel() / C;
  auto xd = x.data();
  auto gd = gain.data();
  auto bd = bias.data();
  auto xhat = std::make_shared<std::vector<double>>(xd.size());
  auto rstd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(T));
  std::vector<double> out(xd.size());
  for (idx t = 0; t < T; ++t) {
    const double* r = xd.data() + t * C;
    double m = 0.0;
    for (idx c = 0; c < C; ++c) m += r[c];
    m /= static_cast<double>(C);
    double v = 0.0;
    for (idx c = 0; c < C; ++c) v += (r[c] - m) * (r[c] - m);
    v /= static_cast<double>(C);
    const double rs = 1.0 / std::sqrt(v + eps);
    (*rstd)[static_cast<std::size_t>(t)] = rs;
    for (idx c = 0; c < C; ++c) {
      const auto j = static_cast<std::size_t>(t * C + c);
      (*xhat)[j] = (r[c] - m) * rs;
      out[j] = (*xhat)[j] * gd[static_cast<std::size_t>(c)] + bd[static_cast<std::size_t>(c)];
    }
  }
  return Tensor::make_result(x.shape(), std::move(out), {x, gain, bias}, [T, C, xhat, rstd](Node& self) {
    Node& px = *self.parents[0];
    Node& pg = *self.parents[1];
    Node& pb = *self.parents[2];
    std::vector<double> dxhat(static_cast<std::size_t>(C));
    for (idx t = 0; t < T; ++t) {
      double m1 = 0.0, m2 = 0.0;
      for (idx c = 0; c < C; ++c) {
        const auto j = static_cast<std::size_t>(t * C + c);
        const double g = self.grad[j];
        if (pg.requires_grad) pg.grad[static_cast<std::size_t>(c)] += g * (*xhat)[j];
        if (pb.requires_grad) pb.grad[static_cast<std::size_t>(c)] += g;
        dxhat[static_cast<std::size_t>(c)] = g * pg.value[static_cast<std::size_t>(c)];
        m1 += dxhat[static_cast<std::size_t>(c)];
        m2 += dxhat[static_cast<std::size_t>(c)] * (*xhat)[j];
      }
      if (!px.requires_grad) continue;
      m1 /= static_cast<double>(C);
      m2 /= static_cast<double>(C);
      const double rs = (*rstd)[static_cast<std::size_t>(t)];
      for (idx c = 0; c < C; ++c) {
        const auto j = static_cast<std::size_t>(t * C + c);
        px.grad[j] += rs * (dxhat[static_cast<std::size_t>(c)] - m1 - (*xhat)[j] * m2);
      }
    }
  });
}

Tensor leaky_relu(const Tensor& x, double slope) {
  return unary(
      x, [slope](double v) { return v >= 0 ? v : slope * v; },
      [slope](double v, double) { return v >= 0 ? 1.0 : slope; });
}

Tensor gelu(const Tensor& x) {
  return unary(
      x, [](double v) { return v * std_normal_cdf(v); },
      [](double v, double) { return std_normal_cdf(v) + v * std_normal_pdf(v); });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, [](double v) { return sigmoid_scalar(v); }, [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& x) {
  return unary(
      x, [](double v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
      [](double v, double) { return sigmoid_scalar(v); });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return Tensor::make_result(std::move(shape), std::move(out), {x}, [](Node& self) {
    auto& g = self.parents[0]->grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor gather(const Tensor& x, Shape out_shape, std::shared_ptr<const std::vector<std::int64_t>> index) {
  if (numel_of(out_shape) != static_cast<std::int64_t>(index->size())) {
    throw ShapeError("gather: index length does not match output shape " + shape_str(out_shape));
  }
  auto xd = x.data();
  std::vector<double> out(index->size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto k = (*index)[i];
    if (k >= static_cast<std::int64_t>(xd.size())) throw ShapeError("gather: index out of range");
    out[i] = k < 0 ? 0.0 : xd[static_cast<std::size_t>(k)];
  }
  return Tensor::make_result(std::move(out_shape), std::move(out), {x}, [index](Node& self) {
    auto& g = self.parents[0]->grad;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const auto k = (*index)[i];
      if (k >= 0) g[static_cast<std::size_t>(k)] += self.grad[i];
    }
  });
}

Tensor narrow(const Tensor& x, int axis, std::int64_t start, std::int64_t length) {
  axis = norm_axis(axis, x.ndim(), "narrow");
  const AxisSplit sp = split_at(x.shape(), axis);
  if (start < 0 || length < 0 || start + length > sp.n) {
    throw ShapeError("narrow: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") outside axis of " + shape_str(x.shape()));
  }
  Shape os = x.shape();
  os[static_cast<std::size_t>(axis)] = length;
  auto index = std::make_shared<std::vector<std::int64_t>>();
  index->reserve(static_cast<std::size_t>(sp.outer * length * sp.inner));
  for (idx o = 0; o < sp.outer; ++o)
    for (idx k = 0; k < length; ++k)
      for (idx i = 0; i < sp.inner; ++i) index->push_back((o * sp.n + start + k) * sp.inner + i);
  return gather(x, std::move(os), std::move(index));
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  axis = norm_axis(axis, xs[0].ndim(), "concat");
  Shape os = xs[0].shape();
  idx total = 0;
  for (const auto& t : xs) {
    Shape s = t.shape();
    if (s.size() != os.size()) throw ShapeError("concat: rank mismatch");
    s[static_cast<std::size_t>(axis)] = os[static_cast<std::size_t>(axis)];
    if (s != os) throw ShapeError("concat: incompatible " + shape_str(xs[0].shape()) + " and " + shape_str(t.shape()));
    total += t.dim(axis);
  }
  os[static_cast<std::size_t>(axis)] = total;
  const AxisSplit sp = split_at(os, axis);
  std::vector<double> out(static_cast<std::size_t>(numel_of(os)));
  std::vector<idx> offsets;
  idx off = 0;
  for (const auto& t : xs) {
    offsets.push_back(off);
    const idx n = t.dim(axis);
    auto d = t.data();
    for (idx o = 0; o < sp.outer; ++o)
      std::copy_n(d.begin() + o * n * sp.inner, n * sp.inner, out.begin() + (o * total + off) * sp.inner);
    off += n;
  }
  return Tensor::make_result(std::move(os), std::move(out), xs, [sp, total, offsets](Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      Node& p = *self.parents[k];
      if (!p.requires_grad) continue;
      const idx n = static_cast<idx>(p.value.size()) / (sp.outer * sp.inner);
      for (idx o = 0; o < sp.outer; ++o)
        for (idx j = 0; j < n * sp.inner; ++j)
          p.grad[static_cast<std::size_t>(o * n * sp.inner + j)] +=
              self.grad[static_cast<std::size_t>((o * total + offsets[k]) * sp.inner + j)];
    }
  });
}

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  const int nd = x.ndim();
  if (static_cast<int>(perm.size()) != nd) throw ShapeError("permute: rank mismatch");
  std::vector<idx> in_strides(static_cast<std::size_t>(nd), 1);
  for (int i = nd - 2; i >= 0; --i) in_strides[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(i + 1)] * x.dim(i + 1);
  Shape os(static_cast<std::size_t>(nd));
  std::vector<bool> used(static_cast<std::size_t>(nd), false);
  for (int i = 0; i < nd; ++i) {
    const int p = perm[static_cast<std::size_t>(i)];
    if (p < 0 || p >= nd || used[static_cast<std::size_t>(p)]) throw ShapeError("permute: invalid permutation");
    used[static_cast<std::size_t>(p)] = true;
    os[static_cast<std::size_t>(i)] = x.dim(p);
  }
  const idx n = x.numel();
  auto index = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(n));
  std::vector<idx> counter(static_cast<std::size_t>(nd), 0);
  for (idx lin = 0; lin < n; ++lin) {
    idx src = 0;
    for (int i = 0; i < nd; ++i) src += counter[static_cast<std::size_t>(i)] * in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    (*index)[static_cast<std::size_t>(lin)] = src;
    for (int i = nd - 1; i >= 0; --i) {
      if (++counter[static_cast<std::size_t>(i)] < os[static_cast<std::size_t>(i)]) break;
      counter[static_cast<std::size_t>(i)] = 0;
    }
  }
  return gather(x, std::move(os), std::move(index));
}

namespace {

struct ConvGeom {
  idx C, H, W;     // image side of im2col
  idx k, s, p;
  idx Ho, Wo;      // grid side of im2col
};

void im2col(const double* img, const ConvGeom& g, double* cols) {
  const idx P = g.Ho * g.Wo;
  for (idx c = 0; c < g.C; ++c)
    for (idx ki = 0; ki < g.k; ++ki)
      for (idx kj = 0; kj < g.k; ++kj) {
        double* row = cols + ((c * g.k + ki) * g.k + kj) * P;
        for (idx oh = 0; oh < g.Ho; ++oh) {
          const idx ih = oh * g.s - g.p + ki;
          for (idx ow = 0; ow < g.Wo; ++ow) {
            const idx iw = ow * g.s - g.p + kj;
            row[oh * g.Wo + ow] =
                (ih >= 0 && ih < g.H && iw >= 0 && iw < g.W) ? img[(c * g.H + ih) * g.W + iw] : 0.0;
          }
        }
      }
}

void col2im(const double* cols, const ConvGeom& g, double* img) {
  const idx P = g.Ho * g.Wo;
  for (idx c = 0; c < g.C; ++c)
    for (idx ki = 0; ki < g.k; ++ki)
      for (idx kj = 0; kj < g.k; ++kj) {
        const double* row = cols + ((c * g.k + ki) * g.k + kj) * P;
        for (idx oh = 0; oh < g.Ho; ++oh) {
          const idx ih = oh * g.s - g.p + ki;
          if (ih < 0 || ih >= g.H) continue;
          for (idx ow = 0; ow < g.Wo; ++ow) {
            const idx iw = ow * g.s - g.p + kj;
            if (iw < 0 || iw >= g.W) continue;
            img[(c * g.H + ih) * g.W + iw] += row[oh * g.Wo + ow];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
  if (x.ndim() != 4 || w.ndim() != 4 || w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3)) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " incompatible with kernel " + shape_str(w.shape()));
  }
  if (stride < 1 || pad < 0) throw ContractError("conv2d: stride must be positive and padding nonnegative");
  const idx N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const idx Co = w.dim(0), k = w.dim(2);
  if (H + 2 * pad < k || W + 2 * pad < k) throw ShapeError("conv2d: input " + shape_str(x.shape()) + " smaller than kernel");
  if (bias.defined() && bias.numel() != Co) throw ShapeError("conv2d: bias does not match output channels");
  const ConvGeom g{Ci, H, W, k, stride, pad, (H + 2 * pad - k) / stride + 1, (W + 2 * pad - k) / stride + 1};
  const idx P = g.Ho * g.Wo, CK = Ci * k * k;
  std::vector<double> out(static_cast<std::size_t>(N * Co * P), 0.0);
  std::vector<double> cols(static_cast<std::size_t>(CK * P));
  for (idx n = 0; n < N; ++n) {
    im2col(x.data().data() + n * Ci * H * W, g, cols.data());
    double* o = out.data() + n * Co * P;
    if (bias.defined())
      for (idx c = 0; c < Co; ++c) std::fill_n(o + c * P, P, bias.data()[static_cast<std::size_t>(c)]);
    detail::gemm_nn(Co, P, CK, w.data().data(), cols.data(), o);
  }
  std::vector<Tensor> inputs{x, w};
  const bool has_bias = bias.defined();
  if (has_bias) inputs.push_back(bias);
  return Tensor::make_result({N, Co, g.Ho, g.Wo}, std::move(out), std::move(inputs), [g, N, Co, has_bias](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    const idx P = g.Ho * g.Wo, CK = g.C * g.k * g.k;
    std::vector<double> cols(static_cast<std::size_t>(CK * P));
    for (idx n = 0; n < N; ++n) {
      const double* G = self.grad.data() + n * Co * P;
      if (pw.requires_grad) {
        im2col(px.value.data() + n * g.C * g.H * g.W, g, cols.data());
        detail::gemm_nt(Co, CK, P, G, cols.data(), pw.grad.data());
      }
      if (px.requires_grad) {
        std::fill(cols.begin(), cols.end(), 0.0);
        detail::gemm_tn(CK, P, Co, pw.value.data(), G, cols.data());
        col2im(cols.data(), g, px.grad.data() + n * g.C * g.H * g.W);
      }
      if (has_bias && self.parents[2]->requires_grad) {
        auto& gb = self.parents[2]->grad;
        for (idx c = 0; c < Co; ++c) {
          double s = 0.0;
          for (idx p = 0; p < P; ++p) s += G[c * P + p];
          gb[static_cast<std::size_t>(c)] += s;
        }
      }
    }
  });
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad, int output_pad) {
  if (x.ndim() != 4 || w.ndim() != 4 || w.dim(0) != x.dim(1) || w.dim(2) != w.dim(3)) {
    throw ShapeError("conv_transpose2d: input " + shape_str(x.shape()) + " incompatible with kernel " +
                     shape_str(w.shape()));
  }
  if (stride < 1 || pad < 0 || output_pad < 0 || output_pad >= stride) {
    throw ContractError("conv_transpose2d: invalid stride/padding");
  }
  const idx N = x.dim(0), Ci = x.dim(1), Hi = x.dim(2), Wi = x.dim(3);
  const idx Co = w.dim(1), k = w.dim(2);
  const idx Ho = (Hi - 1) * stride - 2 * pad + k + output_pad;
  const idx Wo = (Wi - 1) * stride - 2 * pad + k + output_pad;
  if (bias.defined() && bias.numel() != Co) throw ShapeError("conv_transpose2d: bias does not match output channels");
  // im2col geometry of the forward conv this op is the adjoint of.
  const ConvGeom g{Co, Ho, Wo, k, stride, pad, Hi, Wi};
  if ((Ho + 2 * pad - k) / stride + 1 != Hi || (Wo + 2 * pad - k) / stride + 1 != Wi) {
    throw ShapeError("conv_transpose2d: geometry is not invertible for " + shape_str(x.shape()));
  }
  const idx P = Hi * Wi, CK = Co * k * k;
  std::vector<double> out(static_cast<std::size_t>(N * Co * Ho * Wo), 0.0);
  std::vector<double> cols(static_cast<std::size_t>(CK * P));
  for (idx n = 0; n < N; ++n) {
    std::fill(cols.begin(), cols.end(), 0.0);
    detail::gemm_tn(CK, P, Ci, w.data().data(), x.data().data() + n * Ci * P, cols.data());
    double* o = out.data() + n * Co * Ho * Wo;
    col2im(cols.data(), g, o);
    if (bias.defined())
      for (idx c = 0; c < Co; ++c)
        for (idx p = 0; p < Ho * Wo; ++p) o[c * Ho * Wo + p] += bias.data()[static_cast<std::size_t>(c)];
  }
  std::vector<Tensor> inputs{x, w};
  const bool has_bias = bias.defined();
  if (has_bias) inputs.push_back(bias);
  return Tensor::make_result({N, Co, Ho, Wo}, std::move(out), std::move(inputs), [g, N, Ci, has_bias](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    const idx P = g.Ho * g.Wo, CK = g.C * g.k * g.k, HW = g.H * g.W;
    std::vector<double> cols(static_cast<std::size_t>(CK * P));
    for (idx n = 0; n < N; ++n) {
      const double* G = self.grad.data() + n * g.C * HW;
      im2col(G, g, cols.data());
      if (px.requires_grad) detail::gemm_nn(Ci, P, CK, pw.value.data(), cols.data(), px.grad.data() + n * Ci * P);
      if (pw.requires_grad) detail::gemm_nt(Ci, CK, P, px.value.data() + n * Ci * P, cols.data(), pw.grad.data());
      if (has_bias && self.parents[2]->requires_grad) {
        auto& gb = self.parents[2]->grad;
        for (idx c = 0; c < g.C; ++c) {
          double s = 0.0;
          for (idx p = 0; p < HW; ++p) s += G[c * HW + p];
          gb[static_cast<std::size_t>(c)] += s;
        }
      }
    }
  });
}

Tensor gdn(const Tensor& x, const Tensor& beta, const Tensor& gamma, bool inverse) {
  if (x.ndim() != 4) throw ShapeError("gdn: expected NCHW input, got " + shape_str(x.shape()));
  const idx N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  if (beta.numel() != C || gamma.ndim() != 2 || gamma.dim(0) != C || gamma.dim(1) != C) {
    throw ShapeError("gdn: parameters do not match " + std::to_string(C) + " channels");
  }
  auto xd = x.data();
  auto norm = std::make_shared<std::vector<double>>(xd.size(), 0.0);
  std::vector<double> sq(static_cast<std::size_t>(C * P));
  for (idx n = 0; n < N; ++n) {
    const double* xs = xd.data() + n * C * P;
    for (idx i = 0; i < C * P; ++i) sq[static_cast<std::size_t>(i)] = xs[i] * xs[i];
    double* nr = norm->data() + n * C * P;
    for (idx c = 0; c < C; ++c) std::fill_n(nr + c * P, P, beta.data()[static_cast<std::size_t>(c)]);
    detail::gemm_nn(C, P, C, gamma.data().data(), sq.data(), nr);
  }
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double s = std::sqrt((*norm)[i]);
    out[i] = inverse ? xd[i] * s : xd[i] / s;
  }
  return Tensor::make_result(x.shape(), std::move(out), {x, beta, gamma}, [N, C, P, norm, inverse](Node& self) {
    Node& px = *self.parents[0];
    Node& pb = *self.parents[1];
    Node& pg = *self.parents[2];
    std::vector<double> dnorm(static_cast<std::size_t>(C * P));
    std::vector<double> tmp(static_cast<std::size_t>(C * P));
    std::vector<double> sq(static_cast<std::size_t>(C * P));
    for (idx n = 0; n < N; ++n) {
      const idx base = n * C * P;
      for (idx i = 0; i < C * P; ++i) {
        const auto j = static_cast<std::size_t>(base + i);
        const double nv = (*norm)[j];
        const double xv = px.value[j];
        const double g = self.grad[j];
        const double s = std::sqrt(nv);
        if (inverse) {
          if (px.requires_grad) px.grad[j] += g * s;
          dnorm[static_cast<std::size_t>(i)] = g * xv * 0.5 / s;
        } else {
          if (px.requires_grad) px.grad[j] += g / s;
          dnorm[static_cast<std::size_t>(i)] = -0.5 * g * xv / (nv * s);
        }
        sq[static_cast<std::size_t>(i)] = xv * xv;
      }
      if (pb.requires_grad)
        for (idx c = 0; c < C; ++c) {
          double s = 0.0;
          for (idx p = 0; p < P; ++p) s += dnorm[static_cast<std::size_t>(c * P + p)];
          pb.grad[static_cast<std::size_t>(c)] += s;
        }
      if (pg.requires_grad) detail::gemm_nt(C, C, P, dnorm.data(), sq.data(), pg.grad.data());
      if (px.requires_grad) {
        std::fill(tmp.begin(), tmp.end(), 0.0);
        detail::gemm_tn(C, P, C, pg.value.data(), dnorm.data(), tmp.data());
        for (idx i = 0; i < C * P; ++i) {
          const auto j = static_cast<std::size_t>(base + i);
          px.grad[j] += 2.0 * px.value[j] * tmp[static_cast<std::size_t>(i)];
        }
      }
    }
  });
}

Tensor gaussian_likelihood(const Tensor& v, const Tensor& mu, const Tensor& sigma) {
  require_same(v, mu, "gaussian_likelihood");
  require_same(v, sigma, "gaussian_likelihood");
  auto vd = v.data();
  auto md = mu.data();
  auto sd = sigma.data();
  std::vector<double> out(vd.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    // NaN passes through so training can report which term diverged.
    if (sd[i] <= 0) throw ContractError("gaussian_likelihood: sigma must be positive");
    // Evaluate on the negative side where the CDF keeps full relative precision.
    const double a = std::abs(vd[i] - md[i]);
    out[i] = std_normal_cdf((0.5 - a) / sd[i]) - std_normal_cdf((-0.5 - a) / sd[i]);
  }
  return Tensor::make_result(v.shape(), std::move(out), {v, mu, sigma}, [](Node& self) {
    Node& pv = *self.parents[0];
    Node& pm = *self.parents[1];
    Node& ps = *self.parents[2];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double s = ps.value[i];
      const double d = pv.value[i] - pm.value[i];
      const double u = (d + 0.5) / s, l = (d - 0.5) / s;
      const double pu = std_normal_pdf(u), pl = std_normal_pdf(l);
      const double dd = (pu - pl) / s;
      const double g = self.grad[i];
      if (pv.requires_grad) pv.grad[i] += g * dd;
      if (pm.requires_grad) pm.grad[i] -= g * dd;
      if (ps.requires_grad) ps.grad[i] -= g * (u * pu - l * pl) / s;
    }
  });
}

Tensor logistic_interval(const Tensor& lower, const Tensor& upper) {
  require_same(lower, upper, "logistic_interval");
  auto ld = lower.data();
  auto ud = upper.data();
  std::vector<double> out(ld.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double s = (ld[i] + ud[i] > 0) ? -1.0 : 1.0;
    out[i] = s * (sigmoid_scalar(s * ud[i]) - sigmoid_scalar(s * ld[i]));
  }
  return Tensor::make_result(lower.shape(), std::move(out), {lower, upper}, [](Node& self) {
    Node& pl = *self.parents[0];
    Node& pu = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double g = self.grad[i];
      if (pu.requires_grad) {
        const double a = pu.value[i];
        pu.grad[i] += g * sigmoid_scalar(a) * sigmoid_scalar(-a);
      }
      if (pl.requires_grad) {
        const double b = pl.value[i];
        pl.grad[i] -= g * sigmoid_scalar(b) * sigmoid_scalar(-b);
      }
    }
  });
}

Tensor neg_log2_sum(const Tensor& p, double floor) {
  double s = 0.0;
  for (double v : p.data()) s -= std::log2(std::max(v, floor));
  return Tensor::make_result({}, {s}, {p}, [floor](Node& self) {
    Node& pp = *self.parents[0];
    const double g = self.grad[0] / std::numbers::ln2;
    for (std::size_t i = 0; i < pp.grad.size(); ++i) pp.grad[i] -= g / std::max(pp.value[i], floor);
  });
}

}  // namespace tic::ops
