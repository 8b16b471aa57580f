#include "mkfa/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <string>

#include "mkfa/parallel.hpp"

namespace mkfa {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

std::string dim_error(const char* op, const std::string& what) { return std::string(op) + ": " + what; }

struct ConvGeometry {
  int64_t n, cin, h, w;
  int64_t cout, kh, kw;
  int64_t ho, wo;
  int64_t groups, cin_g, cout_g;
  int64_t sh, sw, ph, pw, dh, dw;
  bool pointwise;
};

ConvGeometry conv_geometry(const Shape& x, const Shape& wt, const Conv2dOptions& o) {
  if (o.groups <= 0) throw ShapeError("conv2d: groups must be positive");
  for (int a = 0; a < 2; ++a) {
    if (o.stride[a] <= 0) throw ShapeError("conv2d: stride must be positive");
    if (o.dilation[a] <= 0) throw ShapeError("conv2d: dilation must be positive");
    if (o.padding[a] < 0) throw ShapeError("conv2d: padding must be non-negative");
  }
  if (x.c % o.groups != 0) {
    throw ShapeError("conv2d: input channels Cin=" + std::to_string(x.c) +
                     " not divisible by groups=" + std::to_string(o.groups));
  }
  if (wt.n % o.groups != 0) {
    throw ShapeError("conv2d: output channels Cout=" + std::to_string(wt.n) +
                     " not divisible by groups=" + std::to_string(o.groups));
  }
  if (wt.c != x.c / o.groups) {
    throw ShapeError("conv2d: weight dim 1 (Cin/groups) is " + std::to_string(wt.c) + ", expected " +
                     std::to_string(x.c / o.groups));
  }
  ConvGeometry g{};
  g.n = x.n;
  g.cin = x.c;
  g.h = x.h;
  g.w = x.w;
  g.cout = wt.n;
  g.kh = wt.h;
  g.kw = wt.w;
  g.groups = o.groups;
  g.cin_g = x.c / o.groups;
  g.cout_g = wt.n / o.groups;
  g.sh = o.stride[0];
  g.sw = o.stride[1];
  g.ph = o.padding[0];
  g.pw = o.padding[1];
  g.dh = o.dilation[0];
  g.dw = o.dilation[1];
  g.ho = conv_output_extent(x.h, wt.h, g.sh, g.ph, g.dh);
  g.wo = conv_output_extent(x.w, wt.w, g.sw, g.pw, g.dw);
  if (g.ho <= 0 || g.wo <= 0) {
    throw ShapeError("conv2d: kernel footprint exceeds padded input " + x.str());
  }
  g.pointwise = g.kh == 1 && g.kw == 1 && g.sh == 1 && g.sw == 1 && g.ph == 0 && g.pw == 0 &&
                g.groups == 1;
  return g;
}

// Output indices o in [lo, hi) whose tap at offset `off` reads inside [0, in).
void tap_range(int64_t out, int64_t in, int64_t stride, int64_t pad, int64_t off, int64_t& lo,
               int64_t& hi) {
  const int64_t a = pad - off;
  lo = a <= 0 ? 0 : (a + stride - 1) / stride;
  const int64_t b = in - 1 + pad - off;
  hi = b < 0 ? 0 : std::min(out, b / stride + 1);
  lo = std::min(lo, hi);
}

template <typename T>
void conv_forward_sample(const ConvGeometry& g, const T* x, const T* wt, const T* bias, T* y) {
  const int64_t in_plane = g.h * g.w;
  const int64_t out_plane = g.ho * g.wo;
  if (g.pointwise) {
    ConstMatMap<T> wm(wt, g.cout, g.cin);
    ConstMatMap<T> xm(x, g.cin, in_plane);
    MatMap<T> ym(y, g.cout, out_plane);
    ym.noalias() = wm * xm;
    if (bias) {
      for (int64_t oc = 0; oc < g.cout; ++oc) ym.row(oc).array() += bias[oc];
    }
    return;
  }
  const int64_t ksize = g.kh * g.kw;
  for (int64_t grp = 0; grp < g.groups; ++grp) {
    for (int64_t ocl = 0; ocl < g.cout_g; ++ocl) {
      const int64_t oc = grp * g.cout_g + ocl;
      T* out = y + oc * out_plane;
      std::fill(out, out + out_plane, bias ? bias[oc] : T(0));
      for (int64_t icl = 0; icl < g.cin_g; ++icl) {
        const T* in = x + (grp * g.cin_g + icl) * in_plane;
        const T* wk = wt + (oc * g.cin_g + icl) * ksize;
        for (int64_t ki = 0; ki < g.kh; ++ki) {
          int64_t oh0, oh1;
          tap_range(g.ho, g.h, g.sh, g.ph, ki * g.dh, oh0, oh1);
          for (int64_t kj = 0; kj < g.kw; ++kj) {
            int64_t ow0, ow1;
            tap_range(g.wo, g.w, g.sw, g.pw, kj * g.dw, ow0, ow1);
            const T wv = wk[ki * g.kw + kj];
            for (int64_t oh = oh0; oh < oh1; ++oh) {
              const int64_t base = (oh * g.sh - g.ph + ki * g.dh) * g.w + kj * g.dw - g.pw;
              T* orow = out + oh * g.wo;
              if (g.sw == 1) {
                const T* irow = in + (base + ow0);
                T* o = orow + ow0;
                for (int64_t i = 0, len = ow1 - ow0; i < len; ++i) o[i] += wv * irow[i];
              } else {
                for (int64_t ow = ow0; ow < ow1; ++ow) orow[ow] += wv * in[base + ow * g.sw];
              }
            }
          }
        }
      }
    }
  }
}

// dx += conv^T(dy); dw_partial = dy (x) x for one sample; db_partial = sum dy.
template <typename T>
void conv_backward_sample(const ConvGeometry& g, const T* x, const T* wt, const T* dy, T* dx,
                          T* dw_part, T* db_part) {
  const int64_t in_plane = g.h * g.w;
  const int64_t out_plane = g.ho * g.wo;
  if (db_part) {
    for (int64_t oc = 0; oc < g.cout; ++oc) {
      T acc = 0;
      const T* d = dy + oc * out_plane;
      for (int64_t i = 0; i < out_plane; ++i) acc += d[i];
      db_part[oc] = acc;
    }
  }
  if (g.pointwise) {
    ConstMatMap<T> wm(wt, g.cout, g.cin);
    ConstMatMap<T> xm(x, g.cin, in_plane);
    ConstMatMap<T> dym(dy, g.cout, out_plane);
    if (dx) {
      MatMap<T> dxm(dx, g.cin, in_plane);
      dxm.noalias() += wm.transpose() * dym;
    }
    if (dw_part) {
      MatMap<T> dwm(dw_part, g.cout, g.cin);
      dwm.noalias() = dym * xm.transpose();
    }
    return;
  }
  const int64_t ksize = g.kh * g.kw;
  if (dw_part) std::fill(dw_part, dw_part + g.cout * g.cin_g * ksize, T(0));
  for (int64_t grp = 0; grp < g.groups; ++grp) {
    for (int64_t ocl = 0; ocl < g.cout_g; ++ocl) {
      const int64_t oc = grp * g.cout_g + ocl;
      const T* dout = dy + oc * out_plane;
      for (int64_t icl = 0; icl < g.cin_g; ++icl) {
        const int64_t ic = grp * g.cin_g + icl;
        const T* in = x + ic * in_plane;
        T* din = dx ? dx + ic * in_plane : nullptr;
        const T* wk = wt + (oc * g.cin_g + icl) * ksize;
        T* dwk = dw_part ? dw_part + (oc * g.cin_g + icl) * ksize : nullptr;
        for (int64_t ki = 0; ki < g.kh; ++ki) {
          int64_t oh0, oh1;
          tap_range(g.ho, g.h, g.sh, g.ph, ki * g.dh, oh0, oh1);
          for (int64_t kj = 0; kj < g.kw; ++kj) {
            int64_t ow0, ow1;
            tap_range(g.wo, g.w, g.sw, g.pw, kj * g.dw, ow0, ow1);
            const T wv = wk[ki * g.kw + kj];
            T wacc = 0;
            for (int64_t oh = oh0; oh < oh1; ++oh) {
              const int64_t base = (oh * g.sh - g.ph + ki * g.dh) * g.w + kj * g.dw - g.pw;
              const T* drow = dout + oh * g.wo;
              if (g.sw == 1) {
                const int64_t len = ow1 - ow0;
                const T* irow = in + (base + ow0);
                const T* d = drow + ow0;
                if (dwk) {
                  for (int64_t i = 0; i < len; ++i) wacc += d[i] * irow[i];
                }
                if (din) {
                  T* dirow = din + (base + ow0);
                  for (int64_t i = 0; i < len; ++i) dirow[i] += wv * d[i];
                }
              } else {
                for (int64_t ow = ow0; ow < ow1; ++ow) {
                  const int64_t idx = base + ow * g.sw;
                  if (dwk) wacc += drow[ow] * in[idx];
                  if (din) din[idx] += wv * drow[ow];
                }
              }
            }
            if (dwk) dwk[ki * g.kw + kj] = wacc;
          }
        }
      }
    }
  }
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
T activation_value(Activation kind, T x) {
  switch (kind) {
    case Activation::silu:
      return x * sigmoid_scalar(x);
    case Activation::gelu:
      return x * T(0.5) * std::erfc(-x / std::numbers::sqrt2_v<T>);
    case Activation::sigmoid:
      return sigmoid_scalar(x);
    case Activation::relu:
      return x > 0 ? x : T(0);
  }
  return x;
}

template <typename T>
T activation_derivative(Activation kind, T x) {
  switch (kind) {
    case Activation::silu: {
      const T s = sigmoid_scalar(x);
      return s + x * s * (T(1) - s);
    }
    case Activation::gelu: {
      const T cdf = T(0.5) * std::erfc(-x / std::numbers::sqrt2_v<T>);
      const T pdf = std::exp(T(-0.5) * x * x) * std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
      return cdf + x * pdf;
    }
    case Activation::sigmoid: {
      const T s = sigmoid_scalar(x);
      return s * (T(1) - s);
    }
    case Activation::relu:
      return x > 0 ? T(1) : T(0);
  }
  return T(0);
}

const char* activation_name(Activation kind) {
  switch (kind) {
    case Activation::silu:
      return "silu";
    case Activation::gelu:
      return "gelu";
    case Activation::sigmoid:
      return "sigmoid";
    case Activation::relu:
      return "relu";
  }
  return "activation";
}

void require_channel_vector(const char* op, const Shape& s, int64_t c, const char* what) {
  if (!(s.n == 1 && s.c == c && s.h == 1 && s.w == 1)) {
    throw ShapeError(dim_error(op, std::string(what) + " must be 1x" + std::to_string(c) +
                                       "x1x1, got " + s.str()));
  }
}

}  // namespace

int64_t conv_output_extent(int64_t in, int64_t kernel, int64_t stride, int64_t pad, int64_t dilation) {
  const int64_t span = in + 2 * pad - dilation * (kernel - 1) - 1;
  if (span < 0) return 0;
  return span / stride + 1;
}

template <typename T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& input, const Var<T>& weight, const Var<T>& bias,
              const Conv2dOptions& opt) {
  const ConvGeometry g = conv_geometry(input->value.shape(), weight->value.shape(), opt);
  if (bias) require_channel_vector("conv2d", bias->value.shape(), g.cout, "bias");

  Tensor<T> out(Shape{g.n, g.cout, g.ho, g.wo});
  const int64_t in_stride = g.cin * g.h * g.w;
  const int64_t out_stride = g.cout * g.ho * g.wo;
  const T* xp = input->value.ptr();
  const T* wp = weight->value.ptr();
  const T* bp = bias ? bias->value.ptr() : nullptr;
  T* yp = out.ptr();
  parallel_for(g.n, [&](int64_t n) {
    conv_forward_sample(g, xp + n * in_stride, wp, bp, yp + n * out_stride);
  });

  const bool rg = tape.needs_grad(input, weight, bias);
  Var<T> result = tape.emit(std::move(out), rg, "conv2d");
  if (!rg) return result;

  tape.record([g, input, weight, bias, result, in_stride, out_stride] {
    if (!result->has_grad()) return;
    const bool want_x = input->requires_grad;
    const bool want_w = weight->requires_grad;
    const bool want_b = bias && bias->requires_grad;
    const int64_t wsize = weight->value.numel();
    std::vector<T> dw_parts(want_w ? static_cast<size_t>(g.n * wsize) : 0);
    std::vector<T> db_parts(want_b ? static_cast<size_t>(g.n * g.cout) : 0);
    T* dx = want_x ? input->grad_buffer().ptr() : nullptr;
    const T* xp = input->value.ptr();
    const T* wp = weight->value.ptr();
    const T* dyp = result->grad.ptr();
    parallel_for(g.n, [&](int64_t n) {
      conv_backward_sample(g, xp + n * in_stride, wp, dyp + n * out_stride,
                           dx ? dx + n * in_stride : nullptr,
                           want_w ? dw_parts.data() + n * wsize : nullptr,
                           want_b ? db_parts.data() + n * g.cout : nullptr);
    });
    // Ordered reduction over samples keeps results independent of the thread count.
    if (want_w) {
      T* dw = weight->grad_buffer().ptr();
      for (int64_t n = 0; n < g.n; ++n) {
        const T* part = dw_parts.data() + n * wsize;
        for (int64_t i = 0; i < wsize; ++i) dw[i] += part[i];
      }
    }
    if (want_b) {
      T* db = bias->grad_buffer().ptr();
      for (int64_t n = 0; n < g.n; ++n) {
        const T* part = db_parts.data() + n * g.cout;
        for (int64_t i = 0; i < g.cout; ++i) db[i] += part[i];
      }
    }
  });
  return result;
}

template <typename T>
Var<T> activation(Tape<T>& tape, Activation kind, const Var<T>& x) {
  Tensor<T> out(x->value.shape());
  const T* xp = x->value.ptr();
  T* yp = out.ptr();
  for (int64_t i = 0, n = out.numel(); i < n; ++i) yp[i] = activation_value(kind, xp[i]);
  const bool rg = tape.needs_grad(x);
  Var<T> result = tape.emit(std::move(out), rg, activation_name(kind));
  if (!rg) return result;
  tape.record([kind, x, result] {
    if (!result->has_grad()) return;
    T* dx = x->grad_buffer().ptr();
    const T* xp = x->value.ptr();
    const T* dy = result->grad.ptr();
    for (int64_t i = 0, n = x->value.numel(); i < n; ++i) {
      dx[i] += dy[i] * activation_derivative(kind, xp[i]);
    }
  });
  return result;
}

template <typename T>
Var<T> norm_channels(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                     double eps) {
  if (!(eps > 0)) throw std::invalid_argument("norm_channels: eps must be positive");
  const Shape s = x->value.shape();
  require_channel_vector("norm_channels", gamma->value.shape(), s.c, "gamma");
  require_channel_vector("norm_channels", beta->value.shape(), s.c, "beta");
  const int64_t plane = s.plane();
  Tensor<T> out(s);
  Tensor<T> xhat(s);
  Tensor<T> inv_std(Shape{s.n, 1, s.h, s.w});
  const T* gp = gamma->value.ptr();
  const T* bp = beta->value.ptr();

  parallel_for(s.n, [&](int64_t n) {
    std::vector<double> mean(static_cast<size_t>(plane), 0.0);
    std::vector<double> var(static_cast<size_t>(plane), 0.0);
    const T* x0 = x->value.plane(n, 0);
    // Shifted accumulation: a location constant across channels gets exactly its value.
    for (int64_t c = 1; c < s.c; ++c) {
      const T* xc = x->value.plane(n, c);
      for (int64_t i = 0; i < plane; ++i) mean[i] += static_cast<double>(xc[i]) - x0[i];
    }
    for (int64_t i = 0; i < plane; ++i) mean[i] = x0[i] + mean[i] / static_cast<double>(s.c);
    for (int64_t c = 0; c < s.c; ++c) {
      const T* xc = x->value.plane(n, c);
      for (int64_t i = 0; i < plane; ++i) {
        const double d = xc[i] - mean[i];
        var[i] += d * d;
      }
    }
    T* inv = inv_std.plane(n, 0);
    for (int64_t i = 0; i < plane; ++i) {
      inv[i] = static_cast<T>(1.0 / std::sqrt(var[i] / static_cast<double>(s.c) + eps));
    }
    for (int64_t c = 0; c < s.c; ++c) {
      const T* xc = x->value.plane(n, c);
      T* hc = xhat.plane(n, c);
      T* oc = out.plane(n, c);
      for (int64_t i = 0; i < plane; ++i) {
        hc[i] = static_cast<T>((xc[i] - mean[i]) * inv[i]);
        oc[i] = gp[c] * hc[i] + bp[c];
      }
    }
  });

  const bool rg = tape.needs_grad(x, gamma, beta);
  Var<T> result = tape.emit(std::move(out), rg, "norm_channels");
  if (!rg) return result;
  tape.record([x, gamma, beta, result, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
    if (!result->has_grad()) return;
    const Shape s = x->value.shape();
    const int64_t plane = s.plane();
    const Tensor<T>& dy = result->grad;
    if (gamma->requires_grad || beta->requires_grad) {
      std::vector<double> dg(static_cast<size_t>(s.c), 0.0), db(static_cast<size_t>(s.c), 0.0);
      for (int64_t n = 0; n < s.n; ++n) {
        for (int64_t c = 0; c < s.c; ++c) {
          const T* d = dy.plane(n, c);
          const T* h = xhat.plane(n, c);
          double ag = 0, ab = 0;
          for (int64_t i = 0; i < plane; ++i) {
            ag += static_cast<double>(d[i]) * h[i];
            ab += d[i];
          }
          dg[c] += ag;
          db[c] += ab;
        }
      }
      if (gamma->requires_grad) {
        T* g = gamma->grad_buffer().ptr();
        for (int64_t c = 0; c < s.c; ++c) g[c] += static_cast<T>(dg[c]);
      }
      if (beta->requires_grad) {
        T* b = beta->grad_buffer().ptr();
        for (int64_t c = 0; c < s.c; ++c) b[c] += static_cast<T>(db[c]);
      }
    }
    if (!x->requires_grad) return;
    Tensor<T>& dx = x->grad_buffer();
    const T* gp = gamma->value.ptr();
    parallel_for(s.n, [&](int64_t n) {
      std::vector<double> m1(static_cast<size_t>(plane), 0.0), m2(static_cast<size_t>(plane), 0.0);
      for (int64_t c = 0; c < s.c; ++c) {
        const T* d = dy.plane(n, c);
        const T* h = xhat.plane(n, c);
        for (int64_t i = 0; i < plane; ++i) {
          const double dh = static_cast<double>(d[i]) * gp[c];
          m1[i] += dh;
          m2[i] += dh * h[i];
        }
      }
      const double inv_c = 1.0 / static_cast<double>(s.c);
      const T* inv = inv_std.plane(n, 0);
      for (int64_t c = 0; c < s.c; ++c) {
        const T* d = dy.plane(n, c);
        const T* h = xhat.plane(n, c);
        T* out = dx.plane(n, c);
        for (int64_t i = 0; i < plane; ++i) {
          const double dh = static_cast<double>(d[i]) * gp[c];
          out[i] += static_cast<T>(inv[i] * (dh - m1[i] * inv_c - h[i] * m2[i] * inv_c));
        }
      }
    });
  });
  return result;
}

template <typename T>
std::vector<Var<T>> split_channels(Tape<T>& tape, const Var<T>& x, std::span<const int64_t> sizes) {
  const Shape s = x->value.shape();
  int64_t total = 0;
  for (const int64_t sz : sizes) {
    if (sz <= 0) throw ShapeError("split_channels: sizes must be positive");
    total += sz;
  }
  if (total != s.c) {
    throw ShapeError("split_channels: sizes sum to " + std::to_string(total) + " but C=" +
                     std::to_string(s.c));
  }
  const int64_t plane = s.plane();
  std::vector<Var<T>> parts;
  const bool rg = tape.needs_grad(x);
  int64_t offset = 0;
  for (const int64_t sz : sizes) {
    Tensor<T> part(Shape{s.n, sz, s.h, s.w});
    for (int64_t n = 0; n < s.n; ++n) {
      std::memcpy(part.plane(n, 0), x->value.plane(n, offset),
                  static_cast<size_t>(sz * plane) * sizeof(T));
    }
    Var<T> p = tape.emit(std::move(part), rg, "split_channels");
    if (rg) {
      tape.record([x, p, offset, sz, plane] {
        if (!p->has_grad()) return;
        Tensor<T>& dx = x->grad_buffer();
        for (int64_t n = 0; n < dx.shape().n; ++n) {
          T* dst = dx.plane(n, offset);
          const T* src = p->grad.plane(n, 0);
          for (int64_t i = 0; i < sz * plane; ++i) dst[i] += src[i];
        }
      });
    }
    parts.push_back(std::move(p));
    offset += sz;
  }
  return parts;
}

template <typename T>
Var<T> concat_channels(Tape<T>& tape, std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no parts");
  const Shape first = parts.front()->value.shape();
  int64_t channels = 0;
  bool rg = false;
  for (const auto& p : parts) {
    const Shape s = p->value.shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w) {
      throw ShapeError("concat_channels: part " + s.str() + " does not match " + first.str() +
                       " in N, H or W");
    }
    channels += s.c;
    rg = rg || tape.needs_grad(p);
  }
  const int64_t plane = first.plane();
  Tensor<T> out(Shape{first.n, channels, first.h, first.w});
  for (int64_t n = 0; n < first.n; ++n) {
    int64_t offset = 0;
    for (const auto& p : parts) {
      const int64_t c = p->value.shape().c;
      std::memcpy(out.plane(n, offset), p->value.plane(n, 0),
                  static_cast<size_t>(c * plane) * sizeof(T));
      offset += c;
    }
  }
  Var<T> result = tape.emit(std::move(out), rg, "concat_channels");
  if (!rg) return result;
  std::vector<Var<T>> inputs(parts.begin(), parts.end());
  tape.record([inputs, result, plane] {
    if (!result->has_grad()) return;
    const int64_t batch = result->value.shape().n;
    int64_t offset = 0;
    for (const auto& p : inputs) {
      const int64_t c = p->value.shape().c;
      if (p->requires_grad) {
        Tensor<T>& dp = p->grad_buffer();
        for (int64_t n = 0; n < batch; ++n) {
          T* dst = dp.plane(n, 0);
          const T* src = result->grad.plane(n, offset);
          for (int64_t i = 0; i < c * plane; ++i) dst[i] += src[i];
        }
      }
      offset += c;
    }
  });
  return result;
}

template <typename T>
Var<T> spatial_mean(Tape<T>& tape, const Var<T>& x) {
  const Shape s = x->value.shape();
  if (s.plane() < 1) throw ShapeError("spatial_mean: empty spatial extent");
  const int64_t plane = s.plane();
  Tensor<T> out(Shape{s.n, s.c, 1, 1});
  for (int64_t n = 0; n < s.n; ++n) {
    for (int64_t c = 0; c < s.c; ++c) {
      const T* p = x->value.plane(n, c);
      double acc = 0.0;
      for (int64_t i = 1; i < plane; ++i) acc += static_cast<double>(p[i]) - p[0];
      out(n, c, 0, 0) = static_cast<T>(p[0] + acc / static_cast<double>(plane));
    }
  }
  const bool rg = tape.needs_grad(x);
  Var<T> result = tape.emit(std::move(out), rg, "spatial_mean");
  if (!rg) return result;
  tape.record([x, result, plane] {
    if (!result->has_grad()) return;
    Tensor<T>& dx = x->grad_buffer();
    const Shape s = dx.shape();
    const T scale = T(1) / static_cast<T>(plane);
    for (int64_t n = 0; n < s.n; ++n) {
      for (int64_t c = 0; c < s.c; ++c) {
        const T g = result->grad(n, c, 0, 0) * scale;
        T* d = dx.plane(n, c);
        for (int64_t i = 0; i < plane; ++i) d[i] += g;
      }
    }
  });
  return result;
}

template <typename T>
Var<T> elementwise(Tape<T>& tape, Binary kind, const Var<T>& a, const Var<T>& b) {
  const Shape sa = a->value.shape();
  const Shape sb = b->value.shape();
  enum class Mode { same, per_sample_channel, per_channel } mode;
  if (sa == sb) {
    mode = Mode::same;
  } else if (sb.n == sa.n && sb.c == sa.c && sb.h == 1 && sb.w == 1) {
    mode = Mode::per_sample_channel;
  } else if (sb.n == 1 && sb.c == sa.c && sb.h == 1 && sb.w == 1) {
    mode = Mode::per_channel;
  } else {
    throw ShapeError("elementwise: incompatible shapes " + sa.str() + " and " + sb.str());
  }
  const int64_t plane = sa.plane();
  auto b_index = [mode, sa](int64_t n, int64_t c) -> int64_t {
    switch (mode) {
      case Mode::per_sample_channel:
        return n * sa.c + c;
      case Mode::per_channel:
        return c;
      default:
        return 0;
    }
  };
  Tensor<T> out(sa);
  const T* ap = a->value.ptr();
  const T* bp = b->value.ptr();
  T* yp = out.ptr();
  for (int64_t n = 0; n < sa.n; ++n) {
    for (int64_t c = 0; c < sa.c; ++c) {
      const int64_t off = (n * sa.c + c) * plane;
      for (int64_t i = 0; i < plane; ++i) {
        const T bv = mode == Mode::same ? bp[off + i] : bp[b_index(n, c)];
        const T av = ap[off + i];
        yp[off + i] = kind == Binary::add ? av + bv : kind == Binary::sub ? av - bv : av * bv;
      }
    }
  }
  const bool rg = tape.needs_grad(a, b);
  Var<T> result = tape.emit(std::move(out), rg, "elementwise");
  if (!rg) return result;
  tape.record([kind, mode, a, b, result, plane, b_index] {
    if (!result->has_grad()) return;
    const Shape sa = a->value.shape();
    const T* dy = result->grad.ptr();
    const T* ap = a->value.ptr();
    const T* bp = b->value.ptr();
    if (a->requires_grad) {
      T* da = a->grad_buffer().ptr();
      for (int64_t n = 0; n < sa.n; ++n) {
        for (int64_t c = 0; c < sa.c; ++c) {
          const int64_t off = (n * sa.c + c) * plane;
          for (int64_t i = 0; i < plane; ++i) {
            if (kind == Binary::mul) {
              const T bv = mode == Mode::same ? bp[off + i] : bp[b_index(n, c)];
              da[off + i] += dy[off + i] * bv;
            } else {
              da[off + i] += dy[off + i];
            }
          }
        }
      }
    }
    if (b->requires_grad) {
      T* db = b->grad_buffer().ptr();
      const T sign = kind == Binary::sub ? T(-1) : T(1);
      for (int64_t n = 0; n < sa.n; ++n) {
        for (int64_t c = 0; c < sa.c; ++c) {
          const int64_t off = (n * sa.c + c) * plane;
          if (mode == Mode::same) {
            for (int64_t i = 0; i < plane; ++i) {
              db[off + i] += kind == Binary::mul ? dy[off + i] * ap[off + i] : sign * dy[off + i];
            }
          } else {
            T acc = 0;
            for (int64_t i = 0; i < plane; ++i) {
              acc += kind == Binary::mul ? dy[off + i] * ap[off + i] : dy[off + i];
            }
            db[b_index(n, c)] += kind == Binary::mul ? acc : sign * acc;
          }
        }
      }
    }
  });
  return result;
}

template <typename T>
Var<T> linear(Tape<T>& tape, const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const Shape sx = x->value.shape();
  const Shape sw = weight->value.shape();
  const int64_t features = sx.c * sx.h * sx.w;
  if (sw.n != features || sw.h != 1 || sw.w != 1) {
    throw ShapeError("linear: weight " + sw.str() + " does not match flattened input features " +
                     std::to_string(features));
  }
  const int64_t k = sw.c;
  if (bias) require_channel_vector("linear", bias->value.shape(), k, "bias");
  Tensor<T> out(Shape{sx.n, k, 1, 1});
  {
    ConstMatMap<T> xm(x->value.ptr(), sx.n, features);
    ConstMatMap<T> wm(weight->value.ptr(), features, k);
    MatMap<T> ym(out.ptr(), sx.n, k);
    ym.noalias() = xm * wm;
    if (bias) {
      for (int64_t n = 0; n < sx.n; ++n) {
        for (int64_t j = 0; j < k; ++j) ym(n, j) += bias->value[j];
      }
    }
  }
  const bool rg = tape.needs_grad(x, weight, bias);
  Var<T> result = tape.emit(std::move(out), rg, "linear");
  if (!rg) return result;
  tape.record([x, weight, bias, result, features, k] {
    if (!result->has_grad()) return;
    const int64_t batch = x->value.shape().n;
    ConstMatMap<T> dy(result->grad.ptr(), batch, k);
    if (x->requires_grad) {
      ConstMatMap<T> wm(weight->value.ptr(), features, k);
      MatMap<T> dx(x->grad_buffer().ptr(), batch, features);
      dx.noalias() += dy * wm.transpose();
    }
    if (weight->requires_grad) {
      ConstMatMap<T> xm(x->value.ptr(), batch, features);
      MatMap<T> dw(weight->grad_buffer().ptr(), features, k);
      dw.noalias() += xm.transpose() * dy;
    }
    if (bias && bias->requires_grad) {
      T* db = bias->grad_buffer().ptr();
      for (int64_t n = 0; n < batch; ++n) {
        for (int64_t j = 0; j < k; ++j) db[j] += dy(n, j);
      }
    }
  });
  return result;
}

template <typename T>
Var<T> cross_entropy_smoothed(Tape<T>& tape, const Var<T>& logits, std::span<const int> labels,
                              double epsilon) {
  const Shape s = logits->value.shape();
  if (s.h != 1 || s.w != 1) throw ShapeError("cross_entropy_smoothed: logits must be N x K x 1 x 1");
  if (static_cast<int64_t>(labels.size()) != s.n) {
    throw ShapeError("cross_entropy_smoothed: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(s.n) + " rows");
  }
  if (!(epsilon >= 0.0 && epsilon < 1.0)) {
    throw std::invalid_argument("cross_entropy_smoothed: epsilon must be in [0, 1)");
  }
  const int64_t k = s.c;
  for (const int label : labels) {
    if (label < 0 || label >= k) {
      throw std::out_of_range("cross_entropy_smoothed: label " + std::to_string(label) +
                              " outside [0," + std::to_string(k) + ")");
    }
  }
  // probs kept for the backward pass
  Tensor<T> probs(Shape{s.n, k, 1, 1});
  double total = 0.0;
  for (int64_t n = 0; n < s.n; ++n) {
    const T* z = logits->value.ptr() + n * k;
    double zmax = z[0];
    for (int64_t j = 1; j < k; ++j) zmax = std::max<double>(zmax, z[j]);
    double denom = 0.0;
    for (int64_t j = 0; j < k; ++j) denom += std::exp(z[j] - zmax);
    const double log_denom = std::log(denom);
    double row = 0.0;
    for (int64_t j = 0; j < k; ++j) {
      const double log_p = z[j] - zmax - log_denom;
      const double target =
          (j == labels[n] ? 1.0 - epsilon : 0.0) + epsilon / static_cast<double>(k);
      row -= target * log_p;
      probs[n * k + j] = static_cast<T>(std::exp(log_p));
    }
    total += row;
  }
  Tensor<T> out(Shape{1, 1, 1, 1}, static_cast<T>(total / static_cast<double>(s.n)));
  const bool rg = tape.needs_grad(logits);
  Var<T> result = tape.emit(std::move(out), rg, "cross_entropy_smoothed");
  if (!rg) return result;
  std::vector<int> label_copy(labels.begin(), labels.end());
  tape.record([logits, result, probs = std::move(probs), label_copy, epsilon, k] {
    if (!result->has_grad()) return;
    const int64_t batch = logits->value.shape().n;
    const double g = static_cast<double>(result->grad[0]) / static_cast<double>(batch);
    T* dz = logits->grad_buffer().ptr();
    for (int64_t n = 0; n < batch; ++n) {
      for (int64_t j = 0; j < k; ++j) {
        const double target =
            (j == label_copy[n] ? 1.0 - epsilon : 0.0) + epsilon / static_cast<double>(k);
        dz[n * k + j] += static_cast<T>(g * (static_cast<double>(probs[n * k + j]) - target));
      }
    }
  });
  return result;
}

template <typename T>
Var<T> sum(Tape<T>& tape, const Var<T>& x) {
  double acc = 0.0;
  for (const T v : x->value.data()) acc += v;
  const bool rg = tape.needs_grad(x);
  Var<T> result = tape.emit(Tensor<T>(Shape{1, 1, 1, 1}, static_cast<T>(acc)), rg, "sum");
  if (!rg) return result;
  tape.record([x, result] {
    if (!result->has_grad()) return;
    const T g = result->grad[0];
    T* dx = x->grad_buffer().ptr();
    for (int64_t i = 0, n = x->value.numel(); i < n; ++i) dx[i] += g;
  });
  return result;
}

template <typename T>
Var<T> weighted_sum(Tape<T>& tape, const Var<T>& x, const Tensor<T>& weights) {
  if (!(weights.shape() == x->value.shape())) {
    throw ShapeError("weighted_sum: weights " + weights.shape().str() + " vs input " +
                     x->value.shape().str());
  }
  double acc = 0.0;
  for (int64_t i = 0, n = x->value.numel(); i < n; ++i) {
    acc += static_cast<double>(weights[i]) * x->value[i];
  }
  const bool rg = tape.needs_grad(x);
  Var<T> result =
      tape.emit(Tensor<T>(Shape{1, 1, 1, 1}, static_cast<T>(acc)), rg, "weighted_sum");
  if (!rg) return result;
  tape.record([x, result, weights] {
    if (!result->has_grad()) return;
    const T g = result->grad[0];
    T* dx = x->grad_buffer().ptr();
    for (int64_t i = 0, n = x->value.numel(); i < n; ++i) dx[i] += g * weights[i];
  });
  return result;
}

#define MKFA_INSTANTIATE_OPS(T)                                                                    \
  template Var<T> conv2d(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&,                    \
                         const Conv2dOptions&);                                                     \
  template Var<T> activation(Tape<T>&, Activation, const Var<T>&);                                 \
  template Var<T> norm_channels(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&, double);    \
  template std::vector<Var<T>> split_channels(Tape<T>&, const Var<T>&, std::span<const int64_t>);  \
  template Var<T> concat_channels(Tape<T>&, std::span<const Var<T>>);                              \
  template Var<T> spatial_mean(Tape<T>&, const Var<T>&);                                           \
  template Var<T> elementwise(Tape<T>&, Binary, const Var<T>&, const Var<T>&);                     \
  template Var<T> linear(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&);                   \
  template Var<T> cross_entropy_smoothed(Tape<T>&, const Var<T>&, std::span<const int>, double);   \
  template Var<T> sum(Tape<T>&, const Var<T>&);                                                    \
  template Var<T> weighted_sum(Tape<T>&, const Var<T>&, const Tensor<T>&);

MKFA_INSTANTIATE_OPS(float)
MKFA_INSTANTIATE_OPS(double)

#undef MKFA_INSTANTIATE_OPS

}  // namespace mkfa
