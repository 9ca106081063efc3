#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "cdcnas/conv.hpp"
#include "cdcnas/ops.hpp"

namespace cdcnas {

/// Position p_n of one kernel tap relative to the centre p_0, in input
/// samples (dilation already applied).
struct Offset {
  int t = 0;
  int h = 0;
  int w = 0;

  bool operator==(const Offset&) const = default;
};

/// The receptive-field cube of a kernel: every tap offset, enumerated
/// t-major then h then w (the same order as the kernel tensor's taps).
struct KernelGeometry {
  std::array<int, 3> extents{1, 1, 1};
  std::array<int, 3> dilation{1, 1, 1};
  std::vector<Offset> offsets;
  /// Index of the (0,0,0) offset; empty when some extent is even.
  std::optional<std::size_t> center_index;

  int taps() const { return extents[0] * extents[1] * extents[2]; }
};

/// Split of the taps into the current time step (R'), the adjacent time
/// steps (R''), and the spatial centres of every temporal plane.
struct RegionPartition {
  std::vector<int> current_step;    // offsets with t == 0
  std::vector<int> adjacent_steps;  // offsets with t != 0
  std::vector<int> temporal_centers;  // offsets with h == 0 and w == 0
};

struct CdcGeometry {
  KernelGeometry kernel;
  RegionPartition partition;
};

inline CdcGeometry make_geometry(int kt, int kh, int kw, std::array<int, 3> dilation = {1, 1, 1}) {
  if (kt < 1 || kh < 1 || kw < 1) throw ShapeError("make_geometry: kernel extents must be positive");
  CdcGeometry g;
  g.kernel.extents = {kt, kh, kw};
  g.kernel.dilation = dilation;
  const bool odd = (kt % 2 == 1) && (kh % 2 == 1) && (kw % 2 == 1);
  for (int t = 0; t < kt; ++t) {
    for (int h = 0; h < kh; ++h) {
      for (int w = 0; w < kw; ++w) {
        const Offset o{(t - (kt - 1) / 2) * dilation[0], (h - (kh - 1) / 2) * dilation[1],
                       (w - (kw - 1) / 2) * dilation[2]};
        const int idx = static_cast<int>(g.kernel.offsets.size());
        g.kernel.offsets.push_back(o);
        if (o.t == 0) {
          g.partition.current_step.push_back(idx);
        } else {
          g.partition.adjacent_steps.push_back(idx);
        }
        if (o.h == 0 && o.w == 0 && kh % 2 == 1 && kw % 2 == 1) g.partition.temporal_centers.push_back(idx);
        if (odd && o == Offset{}) g.kernel.center_index = static_cast<std::size_t>(idx);
      }
    }
  }
  return g;
}

enum class CdcVariant { Vanilla, ST, T, TR };

inline const char* to_string(CdcVariant v) {
  switch (v) {
    case CdcVariant::Vanilla: return "vanilla";
    case CdcVariant::ST: return "ST";
    case CdcVariant::T: return "T";
    case CdcVariant::TR: return "TR";
  }
  return "?";
}

/// One convolution of the CDC family. The kernel tensor has exactly the
/// shape of a vanilla conv3d with the same geometry for every variant.
struct CdcConfig {
  CdcVariant variant = CdcVariant::Vanilla;
  double theta = 0.0;
  CdcGeometry geometry;
  Conv3dOptions conv;

  /// Same-padded configuration for kernel (kt, kh, kw).
  static CdcConfig make(CdcVariant variant, double theta, std::array<int, 3> kernel,
                        std::array<int, 3> stride = {1, 1, 1}, std::array<int, 3> dilation = {1, 1, 1},
                        int groups = 1) {
    if (!(theta >= 0.0 && theta <= 1.0)) throw ConfigError("CDC theta must lie in [0, 1], got " + std::to_string(theta));
    CdcConfig c;
    c.variant = variant;
    c.theta = variant == CdcVariant::Vanilla ? 0.0 : theta;
    c.geometry = make_geometry(kernel[0], kernel[1], kernel[2], dilation);
    c.conv = Conv3dOptions::same(kernel, stride, dilation, groups);
    if (variant != CdcVariant::Vanilla) c.require_center();
    return c;
  }

  std::array<int, 3> kernel() const { return geometry.kernel.extents; }

  void require_center() const {
    if (!geometry.kernel.center_index) {
      const auto e = geometry.kernel.extents;
      throw ShapeError("CDC kernel " + std::to_string(e[0]) + "x" + std::to_string(e[1]) + "x" +
                       std::to_string(e[2]) + " has no centre tap (even extent)");
    }
  }

  /// The central-difference term as a fused conv correction.
  CenterCorrection correction() const {
    CenterCorrection c;
    c.theta = theta;
    switch (variant) {
      case CdcVariant::Vanilla:
        c.theta = 0.0;
        break;
      case CdcVariant::ST:
        for (int i = 0; i < geometry.kernel.taps(); ++i) c.region_taps.push_back(i);
        c.center_taps = {static_cast<int>(*geometry.kernel.center_index)};
        break;
      case CdcVariant::T:
        c.region_taps = geometry.partition.adjacent_steps;
        c.center_taps = {static_cast<int>(*geometry.kernel.center_index)};
        break;
      case CdcVariant::TR:
        c.region_taps = geometry.partition.adjacent_steps;
        c.center_taps = geometry.partition.temporal_centers;
        break;
    }
    return c;
  }
};

namespace detail {

template <typename T>
void check_cdc_kernel(const Var<T>& w, const CdcConfig& cfg) {
  const auto e = cfg.kernel();
  if (w.shape().t() != e[0] || w.shape().h() != e[1] || w.shape().w() != e[2]) {
    throw ShapeError("CDC kernel tensor " + w.shape().str() + " does not match configured geometry");
  }
  if (cfg.variant != CdcVariant::Vanilla) cfg.require_center();
}

template <typename T>
Var<T> cdc_apply(Var<T> x, Var<T> w, const CdcConfig& cfg, std::type_identity_t<std::optional<Var<T>>> bias, CdcVariant expected) {
  if (cfg.variant != expected) {
    throw ConfigError(std::string("CDC op expects variant ") + to_string(expected) + ", got " + to_string(cfg.variant));
  }
  check_cdc_kernel(w, cfg);
  return conv3d(x, w, cfg.conv, bias, cfg.correction());
}

}  // namespace detail

/// Spatio-temporal CDC: conv3d(x, w) - theta * x(p0) * sum_{p_n in C} w(p_n).
template <typename T>
Var<T> cdc_st_forward(Var<T> x, Var<T> w, const CdcConfig& cfg, std::type_identity_t<std::optional<Var<T>>> bias = std::nullopt) {
  return detail::cdc_apply(x, w, cfg, bias, CdcVariant::ST);
}

/// Temporal CDC: the difference term only covers the adjacent time steps R''.
template <typename T>
Var<T> cdc_t_forward(Var<T> x, Var<T> w, const CdcConfig& cfg, std::type_identity_t<std::optional<Var<T>>> bias = std::nullopt) {
  return detail::cdc_apply(x, w, cfg, bias, CdcVariant::T);
}

/// Temporal robust CDC: R'' weights against the mean of the spatial centres
/// of all temporal planes of the kernel (zero padded at clip boundaries).
template <typename T>
Var<T> cdc_tr_forward(Var<T> x, Var<T> w, const CdcConfig& cfg, std::type_identity_t<std::optional<Var<T>>> bias = std::nullopt) {
  return detail::cdc_apply(x, w, cfg, bias, CdcVariant::TR);
}

/// Dispatch on cfg.variant; Vanilla is a plain conv3d.
template <typename T>
Var<T> cdc_forward(Var<T> x, Var<T> w, const CdcConfig& cfg, std::type_identity_t<std::optional<Var<T>>> bias = std::nullopt) {
  detail::check_cdc_kernel(w, cfg);
  return conv3d(x, w, cfg.conv, bias, cfg.correction());
}

}  // namespace cdcnas
