#pragma once

#include <algorithm>
#include <array>
#include <utility>
#include <optional>
#include <type_traits>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cdcnas/tape.hpp"

namespace cdcnas {

struct Conv3dOptions {
  std::array<int, 3> stride{1, 1, 1};
  std::array<int, 3> dilation{1, 1, 1};
  std::array<int, 3> padding{0, 0, 0};
  int groups = 1;

  /// Zero padding that keeps extents equal to ceil(input / stride) for odd kernels.
  static Conv3dOptions same(std::array<int, 3> kernel, std::array<int, 3> stride = {1, 1, 1},
                            std::array<int, 3> dilation = {1, 1, 1}, int groups = 1) {
    Conv3dOptions o;
    o.stride = stride;
    o.dilation = dilation;
    o.groups = groups;
    for (int a = 0; a < 3; ++a) o.padding[a] = dilation[a] * (kernel[a] - 1) / 2;
    return o;
  }
};

/// Central-difference term fused into a convolution:
///
///   out(p0) -= theta * sum_ci center_ci(p0) * sum_{tap in region} w(co, ci, tap)
///
/// where center_ci(p0) is the mean of the input samples at `center_taps`
/// (a single tap for a plain centre, every temporal centre tap for a robust
/// centre). Taps index the kernel in (t, h, w) row-major order.
struct CenterCorrection {
  double theta = 0.0;
  std::vector<int> region_taps;
  std::vector<int> center_taps;

  bool active() const { return theta != 0.0 && !region_taps.empty() && !center_taps.empty(); }
};

namespace detail {

struct ConvGeometry {
  std::int64_t n, cin, cout, groups, cin_g, cout_g;
  std::int64_t t, h, w;
  std::int64_t kt, kh, kw, taps;
  std::int64_t ot, oh, ow, positions;
  std::array<int, 3> stride, dilation, padding;

  std::int64_t rows() const { return cin_g * taps; }
  bool pointwise() const {
    return taps == 1 && stride == std::array<int, 3>{1, 1, 1} && padding == std::array<int, 3>{0, 0, 0};
  }
};

inline std::int64_t conv_extent(std::int64_t in, int k, int s, int d, int p) {
  const std::int64_t span = static_cast<std::int64_t>(d) * (k - 1) + 1;
  const std::int64_t padded = in + 2 * static_cast<std::int64_t>(p);
  if (padded < span) return 0;
  return (padded - span) / s + 1;
}

inline ConvGeometry conv_geometry(const Shape5& x, const Shape5& w, const Conv3dOptions& o) {
  if (o.groups < 1) throw ShapeError("conv3d: groups must be >= 1");
  for (int a = 0; a < 3; ++a) {
    if (o.stride[a] < 1 || o.dilation[a] < 1 || o.padding[a] < 0) {
      throw ShapeError("conv3d: stride/dilation must be >= 1 and padding >= 0");
    }
  }
  ConvGeometry g{};
  g.n = x.n();
  g.cin = x.c();
  g.cout = w.n();
  g.groups = o.groups;
  if (g.cin % g.groups != 0 || g.cout % g.groups != 0) {
    throw ShapeError("conv3d: channels (in " + std::to_string(g.cin) + ", out " + std::to_string(g.cout) +
                     ") not divisible by groups " + std::to_string(g.groups));
  }
  g.cin_g = g.cin / g.groups;
  g.cout_g = g.cout / g.groups;
  if (w.c() != g.cin_g) {
    throw ShapeError("conv3d: kernel " + w.str() + " expects " + std::to_string(w.c()) +
                     " input channels per group, input " + x.str() + " provides " + std::to_string(g.cin_g));
  }
  g.t = x.t();
  g.h = x.h();
  g.w = x.w();
  g.kt = w.t();
  g.kh = w.h();
  g.kw = w.w();
  g.taps = g.kt * g.kh * g.kw;
  if (g.taps == 0) throw ShapeError("conv3d: empty kernel " + w.str());
  g.stride = o.stride;
  g.dilation = o.dilation;
  g.padding = o.padding;
  g.ot = conv_extent(g.t, static_cast<int>(g.kt), o.stride[0], o.dilation[0], o.padding[0]);
  g.oh = conv_extent(g.h, static_cast<int>(g.kh), o.stride[1], o.dilation[1], o.padding[1]);
  g.ow = conv_extent(g.w, static_cast<int>(g.kw), o.stride[2], o.dilation[2], o.padding[2]);
  if (g.ot <= 0 || g.oh <= 0 || g.ow <= 0) {
    throw ShapeError("conv3d: kernel " + w.str() + " does not fit padded input " + x.str() +
                     " (zero-size output)");
  }
  g.positions = g.ot * g.oh * g.ow;
  return g;
}

/// Output columns [lo, hi) whose input index o * stride - pad + k * dil lies in [0, n).
inline std::pair<std::int64_t, std::int64_t> valid_range(std::int64_t out, std::int64_t n, int stride, int pad,
                                                         std::int64_t offset) {
  const std::int64_t base = offset - pad;  // input index of output 0
  std::int64_t lo = base >= 0 ? 0 : (-base + stride - 1) / stride;
  std::int64_t hi = base >= n ? 0 : (n - 1 - base) / stride + 1;
  lo = std::min(lo, out);
  hi = std::clamp(hi, lo, out);
  return {lo, hi};
}

/// Patch matrix of one group of one sample: rows (ci, tap), columns output positions.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  const std::int64_t plane = g.t * g.h * g.w;
  for (std::int64_t ci = 0; ci < g.cin_g; ++ci) {
    const T* xc = x + ci * plane;
    for (std::int64_t kt = 0; kt < g.kt; ++kt) {
      for (std::int64_t kh = 0; kh < g.kh; ++kh) {
        for (std::int64_t kw = 0; kw < g.kw; ++kw) {
          T* row = cols + ((ci * g.kt + kt) * g.kh * g.kw + kh * g.kw + kw) * g.positions;
          const auto [lo, hi] = valid_range(g.ow, g.w, g.stride[2], g.padding[2], kw * g.dilation[2]);
          const std::int64_t iw0 = -g.padding[2] + kw * g.dilation[2];
          for (std::int64_t ot = 0; ot < g.ot; ++ot) {
            const std::int64_t it = ot * g.stride[0] - g.padding[0] + kt * g.dilation[0];
            for (std::int64_t oh = 0; oh < g.oh; ++oh) {
              T* dst = row + (ot * g.oh + oh) * g.ow;
              const std::int64_t ih = oh * g.stride[1] - g.padding[1] + kh * g.dilation[1];
              if (it < 0 || it >= g.t || ih < 0 || ih >= g.h) {
                std::fill(dst, dst + g.ow, T{0});
                continue;
              }
              const T* src = xc + (it * g.h + ih) * g.w;
              std::fill(dst, dst + lo, T{0});
              if (g.stride[2] == 1) {
                std::copy(src + iw0 + lo, src + iw0 + hi, dst + lo);
              } else {
                for (std::int64_t ow = lo; ow < hi; ++ow) dst[ow] = src[iw0 + ow * g.stride[2]];
              }
              std::fill(dst + hi, dst + g.ow, T{0});
            }
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatter-adds patch-matrix gradients back into dx.
template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* dx) {
  const std::int64_t plane = g.t * g.h * g.w;
  for (std::int64_t ci = 0; ci < g.cin_g; ++ci) {
    T* xc = dx + ci * plane;
    for (std::int64_t kt = 0; kt < g.kt; ++kt) {
      for (std::int64_t kh = 0; kh < g.kh; ++kh) {
        for (std::int64_t kw = 0; kw < g.kw; ++kw) {
          const T* row = cols + ((ci * g.kt + kt) * g.kh * g.kw + kh * g.kw + kw) * g.positions;
          const auto [lo, hi] = valid_range(g.ow, g.w, g.stride[2], g.padding[2], kw * g.dilation[2]);
          const std::int64_t iw0 = -g.padding[2] + kw * g.dilation[2];
          for (std::int64_t ot = 0; ot < g.ot; ++ot) {
            const std::int64_t it = ot * g.stride[0] - g.padding[0] + kt * g.dilation[0];
            if (it < 0 || it >= g.t) continue;
            for (std::int64_t oh = 0; oh < g.oh; ++oh) {
              const std::int64_t ih = oh * g.stride[1] - g.padding[1] + kh * g.dilation[1];
              if (ih < 0 || ih >= g.h) continue;
              const T* src = row + (ot * g.oh + oh) * g.ow;
              T* dst = xc + (it * g.h + ih) * g.w;
              if (g.stride[2] == 1) {
                for (std::int64_t ow = lo; ow < hi; ++ow) dst[iw0 + ow] += src[ow];
              } else {
                for (std::int64_t ow = lo; ow < hi; ++ow) dst[iw0 + ow * g.stride[2]] += src[ow];
              }
            }
          }
        }
      }
    }
  }
}

/// Reusable patch-matrix storage; im2col overwrites every entry it exposes.
template <typename T>
T* scratch(std::size_t n) {
  thread_local std::vector<T> buf;
  if (buf.size() < n) buf.resize(n);
  return buf.data();
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Per-(cout, cin) sums of one group's kernel over the correction region.
template <typename T>
RowMat<T> region_sums(const Eigen::Map<const RowMat<T>>& wg, const ConvGeometry& g, const CenterCorrection& c) {
  RowMat<T> s = RowMat<T>::Zero(g.cout_g, g.cin_g);
  for (std::int64_t co = 0; co < g.cout_g; ++co) {
    for (std::int64_t ci = 0; ci < g.cin_g; ++ci) {
      T acc{0};
      for (int tap : c.region_taps) acc += wg(co, ci * g.taps + tap);
      s(co, ci) = acc;
    }
  }
  return s;
}

/// Centre samples x(p0) of one group, gathered from the patch matrix rows.
template <typename T>
RowMat<T> centre_rows(const Eigen::Map<const RowMat<T>>& cols, const ConvGeometry& g, const CenterCorrection& c) {
  RowMat<T> centre = RowMat<T>::Zero(g.cin_g, g.positions);
  const T inv = T{1} / static_cast<T>(c.center_taps.size());
  for (std::int64_t ci = 0; ci < g.cin_g; ++ci) {
    for (int tap : c.center_taps) centre.row(ci) += cols.row(ci * g.taps + tap);
    if (c.center_taps.size() > 1) centre.row(ci) *= inv;
  }
  return centre;
}

inline void validate_correction(const CenterCorrection& c, std::int64_t taps) {
  for (const auto* list : {&c.region_taps, &c.center_taps}) {
    for (int tap : *list) {
      if (tap < 0 || tap >= taps) throw ShapeError("conv3d: correction tap " + std::to_string(tap) + " out of range");
    }
  }
}

}  // namespace detail

inline Shape5 conv3d_output_shape(const Shape5& x, const Shape5& w, const Conv3dOptions& o) {
  const auto g = detail::conv_geometry(x, w, o);
  return Shape5{g.n, g.cout, g.ot, g.oh, g.ow};
}

/// 3-D convolution (cross-correlation) over (N, C, T, H, W) via im2col + GEMM.
///
/// Kernel layout is (C_out, C_in / groups, kT, kH, kW); bias, if given, has
/// C_out elements. An active `correction` adds the fused central-difference
/// term; with theta = 0 the result is bit-identical to the plain convolution.
template <typename T>
Var<T> conv3d(Var<T> x, Var<T> w, const Conv3dOptions& opt, std::type_identity_t<std::optional<Var<T>>> bias = std::nullopt,
              const CenterCorrection& correction = {}) {
  using Map = Eigen::Map<detail::RowMat<T>>;
  using CMap = Eigen::Map<const detail::RowMat<T>>;
  Tape<T>& tape = *x.tape;
  const auto g = detail::conv_geometry(x.shape(), w.shape(), opt);
  if (bias && bias->value().numel() != g.cout) {
    throw ShapeError("conv3d: bias has " + std::to_string(bias->value().numel()) + " elements, expected " +
                     std::to_string(g.cout));
  }
  const bool corrected = correction.active();
  if (corrected) detail::validate_correction(correction, g.taps);

  Tensor<T> out(Shape5{g.n, g.cout, g.ot, g.oh, g.ow});
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  T* cols_buf = g.pointwise() ? nullptr : detail::scratch<T>(static_cast<std::size_t>(g.rows() * g.positions));
  const T theta = static_cast<T>(correction.theta);

  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t gi = 0; gi < g.groups; ++gi) {
      const T* xg = xv.ptr() + (n * g.cin + gi * g.cin_g) * g.t * g.h * g.w;
      const T* cols_ptr = xg;
      if (!g.pointwise()) {
        detail::im2col(xg, g, cols_buf);
        cols_ptr = cols_buf;
      }
      CMap cols(cols_ptr, g.rows(), g.positions);
      CMap wg(wv.ptr() + gi * g.cout_g * g.rows(), g.cout_g, g.rows());
      Map og(out.ptr() + (n * g.cout + gi * g.cout_g) * g.positions, g.cout_g, g.positions);
      og.noalias() = wg * cols;
      if (corrected) {
        const auto sums = detail::region_sums<T>(wg, g, correction);
        const auto centre = detail::centre_rows<T>(cols, g, correction);
        og.noalias() -= theta * (sums * centre);
      }
      if (bias) {
        const T* b = bias->value().ptr() + gi * g.cout_g;
        for (std::int64_t co = 0; co < g.cout_g; ++co) og.row(co).array() += b[co];
      }
    }
  }

  std::vector<std::size_t> parents{x.id, w.id};
  if (bias) parents.push_back(bias->id);
  const std::size_t xid = x.id, wid = w.id, bid = bias ? bias->id : Var<T>::npos;
  return tape.record(
      "conv3d", std::move(out), std::move(parents), [g, xid, wid, bid, correction, corrected](Tape<T>& tp, std::size_t self) {
        const Tensor<T>& gout = tp.grad_of(self);
        const Tensor<T>& xv = tp.value(xid);
        const Tensor<T>& wv = tp.value(wid);
        const bool need_x = tp.requires_grad(xid);
        const bool need_w = tp.requires_grad(wid);
        const bool need_b = bid != Var<T>::npos && tp.requires_grad(bid);
        const T theta = static_cast<T>(correction.theta);
        T* dx = need_x ? tp.grad_buffer(xid).ptr() : nullptr;
        T* dw = need_w ? tp.grad_buffer(wid).ptr() : nullptr;
        T* db = need_b ? tp.grad_buffer(bid).ptr() : nullptr;
        T* cols_buf = g.pointwise() ? nullptr : detail::scratch<T>(static_cast<std::size_t>(g.rows() * g.positions));
        detail::RowMat<T> dcols;
        for (std::int64_t n = 0; n < g.n; ++n) {
          for (std::int64_t gi = 0; gi < g.groups; ++gi) {
            CMap go(gout.ptr() + (n * g.cout + gi * g.cout_g) * g.positions, g.cout_g, g.positions);
            CMap wg(wv.ptr() + gi * g.cout_g * g.rows(), g.cout_g, g.rows());
            if (db != nullptr) {
              for (std::int64_t co = 0; co < g.cout_g; ++co) db[gi * g.cout_g + co] += go.row(co).sum();
            }
            const T* xg = xv.ptr() + (n * g.cin + gi * g.cin_g) * g.t * g.h * g.w;
            const T* cols_ptr = xg;
            if (!g.pointwise()) {
              detail::im2col(xg, g, cols_buf);
              cols_ptr = cols_buf;
            }
            CMap cols(cols_ptr, g.rows(), g.positions);
            if (dw != nullptr) {
              Map dwg(dw + gi * g.cout_g * g.rows(), g.cout_g, g.rows());
              dwg.noalias() += go * cols.transpose();
              if (corrected) {
                const auto centre = detail::centre_rows<T>(cols, g, correction);
                const detail::RowMat<T> dsums = -theta * (go * centre.transpose());
                for (std::int64_t co = 0; co < g.cout_g; ++co) {
                  for (std::int64_t ci = 0; ci < g.cin_g; ++ci) {
                    for (int tap : correction.region_taps) dwg(co, ci * g.taps + tap) += dsums(co, ci);
                  }
                }
              }
            }
            if (dx != nullptr) {
              dcols.noalias() = wg.transpose() * go;
              if (corrected) {
                const auto sums = detail::region_sums<T>(wg, g, correction);
                detail::RowMat<T> dcentre = -theta * (sums.transpose() * go);
                if (correction.center_taps.size() > 1) dcentre *= T{1} / static_cast<T>(correction.center_taps.size());
                for (std::int64_t ci = 0; ci < g.cin_g; ++ci) {
                  for (int tap : correction.center_taps) dcols.row(ci * g.taps + tap) += dcentre.row(ci);
                }
              }
              T* dxg = dx + (n * g.cin + gi * g.cin_g) * g.t * g.h * g.w;
              if (g.pointwise()) {
                Map(dxg, g.rows(), g.positions) += dcols;
              } else {
                detail::col2im(dcols.data(), g, dxg);
              }
            }
          }
        }
      });
}

}  // namespace cdcnas
