#include "threemt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "kernels.hpp"

namespace threemt::ops {
namespace {

template <typename T>
void require_same_tape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.tape() != b.tape()) throw ContractError(std::string(op) + ": operands live on different tapes");
}

template <typename T>
void require_matrix(const Var<T>& x, const char* op) {
  if (x.value().rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_str(x.shape()));
  }
}

template <typename T>
void accumulate(Tensor<T>* dst, const Tensor<T>& src) {
  if (dst == nullptr) return;
  T* d = dst->raw();
  const T* s = src.raw();
  for (std::size_t i = 0; i < src.numel(); ++i) d[i] += s[i];
}

// Shared kernel for row layer norm and channel norm. Element (o, ch, i) sits
// at (o * c + ch) * inner + i; statistics run over ch for each (o, i).
template <typename T>
struct NormStats {
  std::vector<T> mean;
  std::vector<T> rstd;
};

template <typename T>
Tensor<T> norm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       std::size_t outer, std::size_t c, std::size_t inner, T eps,
                       NormStats<T>& stats) {
  Tensor<T> y(x.shape());
  stats.mean.assign(outer * inner, T(0));
  stats.rstd.assign(outer * inner, T(0));
  const T* xv = x.raw();
  T* yv = y.raw();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * c * inner + i;
      T mean = 0;
      for (std::size_t ch = 0; ch < c; ++ch) mean += xv[base + ch * inner];
      mean /= static_cast<T>(c);
      T var = 0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T dx = xv[base + ch * inner] - mean;
        var += dx * dx;
      }
      var /= static_cast<T>(c);
      const T rstd = T(1) / std::sqrt(var + eps);
      stats.mean[o * inner + i] = mean;
      stats.rstd[o * inner + i] = rstd;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t at = base + ch * inner;
        yv[at] = (xv[at] - mean) * rstd * gamma[ch] + beta[ch];
      }
    }
  }
  return y;
}

template <typename T>
void norm_backward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& dy,
                   std::size_t outer, std::size_t c, std::size_t inner, const NormStats<T>& stats,
                   Tensor<T>* dx, Tensor<T>* dgamma, Tensor<T>* dbeta) {
  const T* xv = x.raw();
  const T* g = dy.raw();
  std::vector<T> xhat(c);
  std::vector<T> dxhat(c);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * c * inner + i;
      const T mean = stats.mean[o * inner + i];
      const T rstd = stats.rstd[o * inner + i];
      T sum_dxhat = 0;
      T sum_dxhat_xhat = 0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t at = base + ch * inner;
        xhat[ch] = (xv[at] - mean) * rstd;
        dxhat[ch] = g[at] * gamma[ch];
        sum_dxhat += dxhat[ch];
        sum_dxhat_xhat += dxhat[ch] * xhat[ch];
        if (dgamma) (*dgamma)[ch] += g[at] * xhat[ch];
        if (dbeta) (*dbeta)[ch] += g[at];
      }
      if (dx) {
        const T inv_c = T(1) / static_cast<T>(c);
        for (std::size_t ch = 0; ch < c; ++ch) {
          (*dx)[base + ch * inner] +=
              rstd * (dxhat[ch] - sum_dxhat * inv_c - xhat[ch] * sum_dxhat_xhat * inv_c);
        }
      }
    }
  }
}

template <typename T>
Var<T> norm_op(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, std::size_t outer,
               std::size_t c, std::size_t inner, T eps) {
  require_same_tape(x, gamma, "norm");
  require_same_tape(x, beta, "norm");
  if (gamma.value().numel() != c || beta.value().numel() != c) {
    throw ShapeError("norm: gamma/beta length must be " + std::to_string(c) + ", got " +
                     shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  }
  NormStats<T> stats;
  Tensor<T> y = norm_forward(x.value(), gamma.value(), beta.value(), outer, c, inner, eps, stats);
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape()->record(std::move(y), {ix, ig, ib},
                          [=, stats = std::move(stats)](Tape<T>& tape, std::size_t self) {
                            norm_backward(tape.value(ix), tape.value(ig), tape.grad_of(self),
                                          outer, c, inner, stats, tape.grad_sink(ix),
                                          tape.grad_sink(ig), tape.grad_sink(ib));
                          });
}

struct ConvGeometry {
  std::size_t batch, c_in, c_out, k, pad, stride;
  std::size_t d, h, w;
  std::size_t od, oh, ow;
  std::size_t in_vox() const { return d * h * w; }
  std::size_t out_vox() const { return od * oh * ow; }
  std::size_t patch() const { return c_in * k * k * k; }
};

// cols (c_in*k^3 x out_vox) for one sample.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  const std::size_t n = g.out_vox();
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < g.c_in; ++ci) {
    const T* xc = x + ci * g.in_vox();
    for (std::size_t kz = 0; kz < g.k; ++kz) {
      for (std::size_t ky = 0; ky < g.k; ++ky) {
        for (std::size_t kx = 0; kx < g.k; ++kx, ++row) {
          T* dst = cols + row * n;
          for (std::size_t oz = 0; oz < g.od; ++oz) {
            const std::ptrdiff_t iz = static_cast<std::ptrdiff_t>(oz * g.stride + kz) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            for (std::size_t oy = 0; oy < g.oh; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                        static_cast<std::ptrdiff_t>(g.pad);
              T* out = dst + (oz * g.oh + oy) * g.ow;
              if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(g.d) || iy < 0 ||
                  iy >= static_cast<std::ptrdiff_t>(g.h)) {
                std::fill(out, out + g.ow, T(0));
                continue;
              }
              const T* src = xc + (static_cast<std::size_t>(iz) * g.h + static_cast<std::size_t>(iy)) * g.w;
              // valid ox: 0 <= ox * stride + kx - pad < w
              const std::size_t lo = kx >= g.pad ? 0 : (g.pad - kx + g.stride - 1) / g.stride;
              const std::size_t hi =
                  g.w + g.pad > kx ? std::min(g.ow, (g.w + g.pad - kx + g.stride - 1) / g.stride) : 0;
              if (lo >= hi) {
                std::fill(out, out + g.ow, T(0));
                continue;
              }
              std::fill(out, out + lo, T(0));
              std::fill(out + hi, out + g.ow, T(0));
              const T* s0 = src + (lo * g.stride + kx - g.pad);
              if (g.stride == 1) {
                std::copy(s0, s0 + (hi - lo), out + lo);
              } else {
                for (std::size_t ox = lo; ox < hi; ++ox) out[ox] = s0[(ox - lo) * g.stride];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_acc(const T* cols, const ConvGeometry& g, T* dx) {
  const std::size_t n = g.out_vox();
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < g.c_in; ++ci) {
    T* xc = dx + ci * g.in_vox();
    for (std::size_t kz = 0; kz < g.k; ++kz) {
      for (std::size_t ky = 0; ky < g.k; ++ky) {
        for (std::size_t kx = 0; kx < g.k; ++kx, ++row) {
          const T* src = cols + row * n;
          for (std::size_t oz = 0; oz < g.od; ++oz) {
            const std::ptrdiff_t iz = static_cast<std::ptrdiff_t>(oz * g.stride + kz) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(g.d)) continue;
            for (std::size_t oy = 0; oy < g.oh; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                        static_cast<std::ptrdiff_t>(g.pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
              const T* in = src + (oz * g.oh + oy) * g.ow;
              T* dst = xc + (static_cast<std::size_t>(iz) * g.h + static_cast<std::size_t>(iy)) * g.w;
              for (std::size_t ox = 0; ox < g.ow; ++ox) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                          static_cast<std::ptrdiff_t>(g.pad);
                if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += in[ox];
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_tape(a, b, "add");
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  }
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {ia, ib}, [=](Tape<T>& tape, std::size_t self) {
    accumulate(tape.grad_sink(ia), tape.grad_of(self));
    accumulate(tape.grad_sink(ib), tape.grad_of(self));
  });
}

template <typename T>
Var<T> add_rows(const Var<T>& x, const Var<T>& rows) {
  require_same_tape(x, rows, "add_rows");
  require_matrix(x, "add_rows");
  const std::size_t n = x.value().rows(), d = x.value().cols();
  const std::size_t m = rows.value().numel() / d;
  if (m == 0 || rows.value().numel() != m * d || n % m != 0) {
    throw ShapeError("add_rows: cannot tile " + shape_str(rows.shape()) + " over " + shape_str(x.shape()));
  }
  Tensor<T> out = x.value();
  const T* r = rows.value().raw();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] += r[(i % m) * d + j];
  }
  const std::size_t ix = x.id(), ir = rows.id();
  return x.tape()->record(std::move(out), {ix, ir}, [=](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad_of(self);
    accumulate(tape.grad_sink(ix), g);
    if (Tensor<T>* dr = tape.grad_sink(ir)) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) (*dr)[(i % m) * d + j] += g[i * d + j];
      }
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  Tensor<T> out = x.value();
  for (T& v : out.storage()) v *= factor;
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(out), {ix}, [=](Tape<T>& tape, std::size_t self) {
    if (Tensor<T>* dx = tape.grad_sink(ix)) {
      const Tensor<T>& g = tape.grad_of(self);
      for (std::size_t i = 0; i < g.numel(); ++i) (*dx)[i] += factor * g[i];
    }
  });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require_same_tape(a, b, "matmul");
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.value().rows(), k = a.value().cols(), n = b.value().cols();
  if (b.value().rows() != k) {
    throw ShapeError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Tensor<T> out({m, n});
  detail::gemm_acc(a.value().raw(), b.value().raw(), out.raw(), m, k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {ia, ib}, [=](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad_of(self);
    if (Tensor<T>* da = tape.grad_sink(ia)) {
      detail::gemm_abt_acc(g.raw(), tape.value(ib).raw(), da->raw(), m, n, k);
    }
    if (Tensor<T>* db = tape.grad_sink(ib)) {
      detail::gemm_atb_acc(tape.value(ia).raw(), g.raw(), db->raw(), k, m, n);
    }
  });
}

template <typename T>
Var<T> softmax_lastaxis(const Var<T>& x) {
  const Tensor<T>& in = x.value();
  if (in.rank() == 0) throw ShapeError("softmax_lastaxis: scalar input");
  const std::size_t len = in.shape().back();
  const std::size_t rows = in.numel() / len;
  Tensor<T> out(in.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = in.raw() + r * len;
    T* dst = out.raw() + r * len;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < len; ++i) {
      if (!std::isfinite(src[i])) throw NumericError("softmax_lastaxis: non-finite input");
      mx = std::max(mx, src[i]);
    }
    T total = 0;
    for (std::size_t i = 0; i < len; ++i) {
      dst[i] = std::exp(src[i] - mx);
      total += dst[i];
    }
    for (std::size_t i = 0; i < len; ++i) dst[i] /= total;
  }
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(out), {ix}, [=](Tape<T>& tape, std::size_t self) {
    Tensor<T>* dx = tape.grad_sink(ix);
    if (!dx) return;
    const Tensor<T>& y = tape.value(self);
    const Tensor<T>& g = tape.grad_of(self);
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t i = 0; i < len; ++i) dot += g[r * len + i] * y[r * len + i];
      for (std::size_t i = 0; i < len; ++i) {
        (*dx)[r * len + i] += y[r * len + i] * (g[r * len + i] - dot);
      }
    }
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  require_matrix(x, "layer_norm");
  return norm_op(x, gamma, beta, x.value().rows(), x.value().cols(), 1, eps);
}

template <typename T>
Var<T> channel_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  if (x.value().rank() != 5) {
    throw ShapeError("channel_norm: expected (b x c x D x H x W), got " + shape_str(x.shape()));
  }
  const Shape& s = x.shape();
  return norm_op(x, gamma, beta, s[0], s[1], s[2] * s[3] * s[4], eps);
}

template <typename T>
Var<T> sample_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  require_same_tape(x, gamma, "sample_norm");
  require_same_tape(x, beta, "sample_norm");
  const Shape& s = x.shape();
  if (s.size() != 5) throw ShapeError("sample_norm: expected (b x c x D x H x W), got " + shape_str(s));
  const std::size_t b = s[0], c = s[1], vox = s[2] * s[3] * s[4], n = c * vox;
  if (gamma.value().numel() != c || beta.value().numel() != c) {
    throw ShapeError("sample_norm: gamma/beta length must be " + std::to_string(c) + ", got " +
                     shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  }
  const Tensor<T>& xv = x.value();
  const Tensor<T>& gv = gamma.value();
  const Tensor<T>& bv = beta.value();
  Tensor<T> y(s);
  std::vector<T> mean(b), rstd(b);
  for (std::size_t o = 0; o < b; ++o) {
    const T* xs = xv.raw() + o * n;
    T m = 0;
    for (std::size_t j = 0; j < n; ++j) m += xs[j];
    m /= static_cast<T>(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (xs[j] - m) * (xs[j] - m);
    var /= static_cast<T>(n);
    mean[o] = m;
    rstd[o] = T(1) / std::sqrt(var + eps);
    T* ys = y.raw() + o * n;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t v = 0; v < vox; ++v) {
        const std::size_t j = ch * vox + v;
        ys[j] = (xs[j] - m) * rstd[o] * gv[ch] + bv[ch];
      }
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape()->record(std::move(y), {ix, ig, ib}, [=](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& xt = tape.value(ix);
    const Tensor<T>& gt = tape.value(ig);
    const Tensor<T>& dy = tape.grad_of(self);
    Tensor<T>* dx = tape.grad_sink(ix);
    Tensor<T>* dgamma = tape.grad_sink(ig);
    Tensor<T>* dbeta = tape.grad_sink(ib);
    std::vector<T> xhat(n), dxhat(n);
    for (std::size_t o = 0; o < b; ++o) {
      const T* xs = xt.raw() + o * n;
      const T* g = dy.raw() + o * n;
      T sum_dxhat = 0, sum_dxhat_xhat = 0;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t v = 0; v < vox; ++v) {
          const std::size_t j = ch * vox + v;
          xhat[j] = (xs[j] - mean[o]) * rstd[o];
          dxhat[j] = g[j] * gt[ch];
          sum_dxhat += dxhat[j];
          sum_dxhat_xhat += dxhat[j] * xhat[j];
          if (dgamma) (*dgamma)[ch] += g[j] * xhat[j];
          if (dbeta) (*dbeta)[ch] += g[j];
        }
      if (dx) {
        const T inv_n = T(1) / static_cast<T>(n);
        T* d = dx->raw() + o * n;
        for (std::size_t j = 0; j < n; ++j) {
          d[j] += rstd[o] * (dxhat[j] - sum_dxhat * inv_n - xhat[j] * sum_dxhat_xhat * inv_n);
        }
      }
    }
  });
}

template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias, std::size_t stride) {
  require_same_tape(x, kernel, "conv3d");
  require_same_tape(x, bias, "conv3d");
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  if (xs.size() != 5) throw ShapeError("conv3d: input must be (b x c x D x H x W), got " + shape_str(xs));
  if (ks.size() != 5 || ks[2] != ks[3] || ks[3] != ks[4] || ks[2] % 2 == 0) {
    throw ShapeError("conv3d: kernel must be (c_out x c_in x k x k x k) with odd k, got " + shape_str(ks));
  }
  if (ks[1] != xs[1]) {
    throw ShapeError("conv3d: channel mismatch between input " + shape_str(xs) + " and kernel " +
                     shape_str(ks));
  }
  if (bias.value().numel() != ks[0]) {
    throw ShapeError("conv3d: bias " + shape_str(bias.shape()) + " does not match c_out " +
                     std::to_string(ks[0]));
  }
  if (stride != 1 && stride != 2) throw ShapeError("conv3d: stride must be 1 or 2");

  ConvGeometry g{xs[0], xs[1], ks[0], ks[2], ks[2] / 2, stride, xs[2], xs[3], xs[4], 0, 0, 0};
  auto out_extent = [&](std::size_t in) -> std::size_t {
    const std::size_t padded = in + 2 * g.pad;
    if (padded < g.k) {
      throw ShapeError("conv3d: spatial extent " + std::to_string(in) + " smaller than kernel " +
                       std::to_string(g.k));
    }
    return (padded - g.k) / stride + 1;
  };
  g.od = out_extent(g.d);
  g.oh = out_extent(g.h);
  g.ow = out_extent(g.w);

  const std::size_t nout = g.out_vox();
  Tensor<T> out({g.batch, g.c_out, g.od, g.oh, g.ow});
  std::vector<T> cols(g.patch() * nout);
  const T* bv = bias.value().raw();
  for (std::size_t b = 0; b < g.batch; ++b) {
    T* ob = out.raw() + b * g.c_out * nout;
    for (std::size_t co = 0; co < g.c_out; ++co) std::fill(ob + co * nout, ob + (co + 1) * nout, bv[co]);
    im2col(x.value().raw() + b * g.c_in * g.in_vox(), g, cols.data());
    detail::gemm_acc(kernel.value().raw(), cols.data(), ob, g.c_out, g.patch(), nout);
  }

  const std::size_t ix = x.id(), ik = kernel.id(), ibias = bias.id();
  return x.tape()->record(std::move(out), {ix, ik, ibias}, [=](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& grad = tape.grad_of(self);
    Tensor<T>* dx = tape.grad_sink(ix);
    Tensor<T>* dk = tape.grad_sink(ik);
    Tensor<T>* db = tape.grad_sink(ibias);
    std::vector<T> cols_buf(g.patch() * nout);
    std::vector<T> dcols(g.patch() * nout);
    for (std::size_t b = 0; b < g.batch; ++b) {
      const T* gb = grad.raw() + b * g.c_out * nout;
      if (db) {
        for (std::size_t co = 0; co < g.c_out; ++co) {
          T s = 0;
          for (std::size_t v = 0; v < nout; ++v) s += gb[co * nout + v];
          (*db)[co] += s;
        }
      }
      if (dk) {
        im2col(tape.value(ix).raw() + b * g.c_in * g.in_vox(), g, cols_buf.data());
        detail::gemm_abt_acc(gb, cols_buf.data(), dk->raw(), g.c_out, nout, g.patch());
      }
      if (dx) {
        std::fill(dcols.begin(), dcols.end(), T(0));
        detail::gemm_atb_acc(tape.value(ik).raw(), gb, dcols.data(), g.patch(), g.c_out, nout);
        col2im_acc(dcols.data(), g, dx->raw() + b * g.c_in * g.in_vox());
      }
    }
  });
}

template <typename T>
Var<T> activation(const Var<T>& x, Activation kind) {
  const T slope = kind == Activation::LeakyRelu ? T(kLeakySlope) : T(0);
  Tensor<T> out = x.value();
  for (T& v : out.storage()) v = v > T(0) ? v : slope * v;
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(out), {ix}, [=](Tape<T>& tape, std::size_t self) {
    if (Tensor<T>* dx = tape.grad_sink(ix)) {
      const Tensor<T>& in = tape.value(ix);
      const Tensor<T>& g = tape.grad_of(self);
      for (std::size_t i = 0; i < g.numel(); ++i) (*dx)[i] += in[i] > T(0) ? g[i] : slope * g[i];
    }
  });
}

template <typename T>
Var<T> cross_entropy_logits(const Var<T>& logits, std::span<const int> labels) {
  require_matrix(logits, "cross_entropy_logits");
  const std::size_t b = logits.value().rows(), c = logits.value().cols();
  if (labels.size() != b) {
    throw ShapeError("cross_entropy_logits: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(b) + " rows");
  }
  Tensor<T> probs({b, c});
  T total = 0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw InputError("cross_entropy_logits: label " + std::to_string(labels[i]) + " out of range");
    }
    const T* row = logits.value().raw() + i * c;
    const T mx = *std::max_element(row, row + c);
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) probs(i, j) = std::exp(row[j] - lse);
    total += lse - row[labels[i]];
  }
  Tensor<T> out({1}, std::vector<T>{total / static_cast<T>(b)});
  std::vector<int> lab(labels.begin(), labels.end());
  const std::size_t il = logits.id();
  return logits.tape()->record(
      std::move(out), {il},
      [=, probs = std::move(probs), lab = std::move(lab)](Tape<T>& tape, std::size_t self) {
        Tensor<T>* dl = tape.grad_sink(il);
        if (!dl) return;
        const T g = tape.grad_of(self)[0] / static_cast<T>(b);
        for (std::size_t i = 0; i < b; ++i) {
          for (std::size_t j = 0; j < c; ++j) {
            const T onehot = static_cast<std::size_t>(lab[i]) == j ? T(1) : T(0);
            (*dl)(i, j) += g * (probs(i, j) - onehot);
          }
        }
      });
}

template <typename T>
Var<T> scaled_dot_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t groups,
                            std::size_t scale_dim, Tensor<T>* weights_out) {
  require_same_tape(q, k, "scaled_dot_attention");
  require_same_tape(q, v, "scaled_dot_attention");
  require_matrix(q, "scaled_dot_attention");
  require_matrix(k, "scaled_dot_attention");
  require_matrix(v, "scaled_dot_attention");
  if (scale_dim == 0) throw ContractError("scaled_dot_attention: scale_dim must be positive");
  if (groups == 0) throw ContractError("scaled_dot_attention: groups must be positive");
  const Tensor<T>& Q = q.value();
  const Tensor<T>& K = k.value();
  const Tensor<T>& V = v.value();
  if (K.rows() < groups) throw ContractError("scaled_dot_attention: no keys");
  if (Q.cols() != K.cols() || K.rows() != V.rows() || Q.rows() % groups != 0 ||
      K.rows() % groups != 0) {
    throw ShapeError("scaled_dot_attention: incompatible shapes Q" + shape_str(Q.shape()) + " K" +
                     shape_str(K.shape()) + " V" + shape_str(V.shape()) + " for " +
                     std::to_string(groups) + " groups");
  }
  const std::size_t nq = Q.rows() / groups, nk = K.rows() / groups;
  const std::size_t dk = Q.cols(), dv = V.cols();
  const T c = T(1) / std::sqrt(static_cast<T>(scale_dim));

  Tensor<T> weights({Q.rows(), nk});
  Tensor<T> out({Q.rows(), dv});
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t i = 0; i < nq; ++i) {
      const std::size_t qi = g * nq + i;
      T* w = weights.raw() + qi * nk;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < nk; ++j) {
        const std::size_t kj = g * nk + j;
        T s = 0;
        for (std::size_t t = 0; t < dk; ++t) s += Q(qi, t) * K(kj, t);
        w[j] = s * c;
        if (!std::isfinite(w[j])) throw NumericError("scaled_dot_attention: non-finite score");
        mx = std::max(mx, w[j]);
      }
      T total = 0;
      for (std::size_t j = 0; j < nk; ++j) {
        w[j] = std::exp(w[j] - mx);
        total += w[j];
      }
      for (std::size_t j = 0; j < nk; ++j) w[j] /= total;
      for (std::size_t j = 0; j < nk; ++j) {
        const T wj = w[j];
        const T* vrow = V.raw() + (g * nk + j) * dv;
        T* orow = out.raw() + qi * dv;
        for (std::size_t t = 0; t < dv; ++t) orow[t] += wj * vrow[t];
      }
    }
  }
  if (weights_out) *weights_out = weights;

  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape()->record(
      std::move(out), {iq, ik, iv},
      [=, weights = std::move(weights)](Tape<T>& tape, std::size_t self) {
        const Tensor<T>& dO = tape.grad_of(self);
        const Tensor<T>& Qv = tape.value(iq);
        const Tensor<T>& Kv = tape.value(ik);
        const Tensor<T>& Vv = tape.value(iv);
        Tensor<T>* dQ = tape.grad_sink(iq);
        Tensor<T>* dK = tape.grad_sink(ik);
        Tensor<T>* dV = tape.grad_sink(iv);
        std::vector<T> dS(nk);
        for (std::size_t g = 0; g < groups; ++g) {
          for (std::size_t i = 0; i < nq; ++i) {
            const std::size_t qi = g * nq + i;
            const T* w = weights.raw() + qi * nk;
            const T* go = dO.raw() + qi * dv;
            T dot = 0;
            for (std::size_t j = 0; j < nk; ++j) {
              const T* vrow = Vv.raw() + (g * nk + j) * dv;
              T dp = 0;
              for (std::size_t t = 0; t < dv; ++t) dp += go[t] * vrow[t];
              dS[j] = dp;
              dot += dp * w[j];
              if (dV) {
                T* dvrow = dV->raw() + (g * nk + j) * dv;
                for (std::size_t t = 0; t < dv; ++t) dvrow[t] += w[j] * go[t];
              }
            }
            for (std::size_t j = 0; j < nk; ++j) {
              const T ds = w[j] * (dS[j] - dot) * c;
              const std::size_t kj = g * nk + j;
              if (dQ) {
                for (std::size_t t = 0; t < dk; ++t) (*dQ)(qi, t) += ds * Kv(kj, t);
              }
              if (dK) {
                for (std::size_t t = 0; t < dk; ++t) (*dK)(kj, t) += ds * Qv(qi, t);
              }
            }
          }
        }
      });
}

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts[0].value().rows();
  std::size_t total = 0;
  std::vector<std::size_t> ids, widths;
  for (const Var<T>& p : parts) {
    require_same_tape(parts[0], p, "concat_cols");
    require_matrix(p, "concat_cols");
    if (p.value().rows() != rows) throw ShapeError("concat_cols: row counts differ");
    ids.push_back(p.id());
    widths.push_back(p.value().cols());
    total += p.value().cols();
  }
  Tensor<T> out({rows, total});
  std::size_t offset = 0;
  for (const Var<T>& p : parts) {
    const std::size_t w = p.value().cols();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(p.value().raw() + r * w, w, out.raw() + r * total + offset);
    }
    offset += w;
  }
  return parts[0].tape()->record(std::move(out), ids, [=](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad_of(self);
    std::size_t off = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      if (Tensor<T>* d = tape.grad_sink(ids[p])) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < widths[p]; ++j) (*d)(r, j) += g(r, off + j);
        }
      }
      off += widths[p];
    }
  });
}

template <typename T>
Var<T> mean_groups(const Var<T>& x, std::size_t groups) {
  require_matrix(x, "mean_groups");
  const std::size_t rows = x.value().rows(), c = x.value().cols();
  if (groups == 0 || rows % groups != 0) {
    throw ShapeError("mean_groups: " + std::to_string(rows) + " rows do not split into " +
                     std::to_string(groups) + " groups");
  }
  const std::size_t per = rows / groups;
  Tensor<T> out({groups, c});
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t r = 0; r < per; ++r) {
      for (std::size_t j = 0; j < c; ++j) out(g, j) += x.value()(g * per + r, j);
    }
    for (std::size_t j = 0; j < c; ++j) out(g, j) /= static_cast<T>(per);
  }
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(out), {ix}, [=](Tape<T>& tape, std::size_t self) {
    if (Tensor<T>* dx = tape.grad_sink(ix)) {
      const Tensor<T>& g = tape.grad_of(self);
      const T inv = T(1) / static_cast<T>(per);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < c; ++j) (*dx)(r, j) += g(r / per, j) * inv;
      }
    }
  });
}

template <typename T>
Var<T> volume_to_tokens(const Var<T>& x) {
  const Shape& s = x.shape();
  if (s.size() != 5) throw ShapeError("volume_to_tokens: expected rank 5, got " + shape_str(s));
  const std::size_t b = s[0], c = s[1], vox = s[2] * s[3] * s[4];
  Tensor<T> out({b * vox, c});
  const T* in = x.value().raw();
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t v = 0; v < vox; ++v) out[(n * vox + v) * c + ch] = in[(n * c + ch) * vox + v];
    }
  }
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(out), {ix}, [=](Tape<T>& tape, std::size_t self) {
    if (Tensor<T>* dx = tape.grad_sink(ix)) {
      const Tensor<T>& g = tape.grad_of(self);
      for (std::size_t n = 0; n < b; ++n) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t v = 0; v < vox; ++v) (*dx)[(n * c + ch) * vox + v] += g[(n * vox + v) * c + ch];
        }
      }
    }
  });
}

template <typename T>
Var<T> gather_rows(const Var<T>& table, std::span<const std::size_t> indices) {
  require_matrix(table, "gather_rows");
  const std::size_t vocab = table.value().rows(), d = table.value().cols();
  if (indices.empty()) throw ShapeError("gather_rows: no indices");
  Tensor<T> out({indices.size(), d});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= vocab) {
      throw InputError("categorical index " + std::to_string(indices[i]) + " out of range for vocab_size " +
                       std::to_string(vocab));
    }
    std::copy_n(table.value().raw() + indices[i] * d, d, out.raw() + i * d);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  const std::size_t it = table.id();
  return table.tape()->record(std::move(out), {it},
                              [=, idx = std::move(idx)](Tape<T>& tape, std::size_t self) {
                                if (Tensor<T>* dt = tape.grad_sink(it)) {
                                  const Tensor<T>& g = tape.grad_of(self);
                                  for (std::size_t i = 0; i < idx.size(); ++i) {
                                    for (std::size_t j = 0; j < d; ++j) (*dt)(idx[i], j) += g(i, j);
                                  }
                                }
                              });
}

template <typename T>
Var<T> scatter_rows(const Var<T>& src, std::span<const std::size_t> rows, std::size_t n) {
  require_matrix(src, "scatter_rows");
  const std::size_t k = src.value().rows(), d = src.value().cols();
  if (rows.size() != k) throw ShapeError("scatter_rows: row index count differs from source rows");
  std::vector<bool> seen(n, false);
  Tensor<T> out({n, d});
  for (std::size_t i = 0; i < k; ++i) {
    if (rows[i] >= n || seen[rows[i]]) throw ContractError("scatter_rows: target rows must be distinct and < n");
    seen[rows[i]] = true;
    std::copy_n(src.value().raw() + i * d, d, out.raw() + rows[i] * d);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  const std::size_t is = src.id();
  return src.tape()->record(std::move(out), {is},
                            [=, idx = std::move(idx)](Tape<T>& tape, std::size_t self) {
                              if (Tensor<T>* ds = tape.grad_sink(is)) {
                                const Tensor<T>& g = tape.grad_of(self);
                                for (std::size_t i = 0; i < idx.size(); ++i) {
                                  for (std::size_t j = 0; j < d; ++j) (*ds)(i, j) += g(idx[i], j);
                                }
                              }
                            });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T s = 0;
  for (T v : x.value().data()) s += v;
  const std::size_t ix = x.id();
  return x.tape()->record(Tensor<T>({1}, std::vector<T>{s}), {ix}, [=](Tape<T>& tape, std::size_t self) {
    if (Tensor<T>* dx = tape.grad_sink(ix)) {
      const T g = tape.grad_of(self)[0];
      for (T& v : dx->storage()) v += g;
    }
  });
}

template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& weights) {
  if (weights.numel() != x.value().numel()) {
    throw ShapeError("weighted_sum: weights " + shape_str(weights.shape()) + " vs input " +
                     shape_str(x.shape()));
  }
  T s = 0;
  for (std::size_t i = 0; i < weights.numel(); ++i) s += weights[i] * x.value()[i];
  const std::size_t ix = x.id();
  return x.tape()->record(Tensor<T>({1}, std::vector<T>{s}), {ix},
                          [=](Tape<T>& tape, std::size_t self) {
                            if (Tensor<T>* dx = tape.grad_sink(ix)) {
                              const T g = tape.grad_of(self)[0];
                              for (std::size_t i = 0; i < weights.numel(); ++i) (*dx)[i] += g * weights[i];
                            }
                          });
}

#define THREEMT_INSTANTIATE_OPS(T)                                                                  \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                \
  template Var<T> add_rows(const Var<T>&, const Var<T>&);                                           \
  template Var<T> scale(const Var<T>&, T);                                                          \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                             \
  template Var<T> softmax_lastaxis(const Var<T>&);                                                  \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                       \
  template Var<T> channel_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                     \
  template Var<T> sample_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                      \
  template Var<T> conv3d(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t);                 \
  template Var<T> activation(const Var<T>&, Activation);                                            \
  template Var<T> cross_entropy_logits(const Var<T>&, std::span<const int>);                        \
  template Var<T> scaled_dot_attention(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t,    \
                                       std::size_t, Tensor<T>*);                                    \
  template Var<T> concat_cols(std::span<const Var<T>>);                                             \
  template Var<T> mean_groups(const Var<T>&, std::size_t);                                          \
  template Var<T> volume_to_tokens(const Var<T>&);                                                  \
  template Var<T> gather_rows(const Var<T>&, std::span<const std::size_t>);                         \
  template Var<T> scatter_rows(const Var<T>&, std::span<const std::size_t>, std::size_t);           \
  template Var<T> sum(const Var<T>&);                                                               \
  template Var<T> weighted_sum(const Var<T>&, const Tensor<T>&);

THREEMT_INSTANTIATE_OPS(float)
THREEMT_INSTANTIATE_OPS(double)

#undef THREEMT_INSTANTIATE_OPS

}  // namespace threemt::ops
