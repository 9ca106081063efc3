#pragma once

#include <array>
#include <cmath>
#include <regex>
#include <string>
#include <vector>

#include "cdcnas/cdc.hpp"

namespace cdcnas {

enum class OpKind { Zero, Identity, Conv };

/// One candidate operation. Names follow the grammar
///   Zero | Identity | Conv_<kt>x<kh>x<kw> | CDC-<ST|T|TR>-<theta>_<kt>x<kh>x<kw>
/// where <theta> is a digit string read as d0.d1d2... ("06" = 0.6, "10" = 1.0).
struct OpSpec {
  OpKind kind = OpKind::Zero;
  CdcVariant variant = CdcVariant::Vanilla;
  double theta = 0.0;
  std::array<int, 3> kernel{1, 1, 1};

  static OpSpec zero() { return {}; }
  static OpSpec identity() { return {OpKind::Identity, CdcVariant::Vanilla, 0.0, {1, 1, 1}}; }
  static OpSpec conv(std::array<int, 3> k) { return {OpKind::Conv, CdcVariant::Vanilla, 0.0, k}; }
  static OpSpec cdc(CdcVariant v, double theta, std::array<int, 3> k) { return {OpKind::Conv, v, theta, k}; }

  bool is_zero() const { return kind == OpKind::Zero; }

  static std::string theta_code(double theta) {
    if (!(theta >= 0.0 && theta <= 1.0)) throw ConfigError("theta out of [0, 1]: " + std::to_string(theta));
    long scaled = std::lround(theta * 1000.0);
    std::string code = std::to_string(scaled / 1000) + std::to_string(scaled / 100 % 10);
    for (long rest = scaled % 100, div = 10; rest != 0; rest %= div, div /= 10) code += std::to_string(rest / div);
    return code;
  }

  std::string name() const {
    const std::string ext = std::to_string(kernel[0]) + "x" + std::to_string(kernel[1]) + "x" + std::to_string(kernel[2]);
    switch (kind) {
      case OpKind::Zero: return "Zero";
      case OpKind::Identity: return "Identity";
      case OpKind::Conv:
        if (variant == CdcVariant::Vanilla) return "Conv_" + ext;
        return std::string("CDC-") + to_string(variant) + "-" + theta_code(theta) + "_" + ext;
    }
    return "?";
  }

  static OpSpec parse(const std::string& name) {
    if (name == "Zero") return zero();
    if (name == "Identity") return identity();
    static const std::regex conv_re(R"(Conv_(\d)x(\d)x(\d))");
    static const std::regex cdc_re(R"(CDC-(ST|TR|T)-(\d{2,4})_(\d)x(\d)x(\d))");
    std::smatch m;
    auto ext = [&](int first) {
      return std::array<int, 3>{std::stoi(m[first]), std::stoi(m[first + 1]), std::stoi(m[first + 2])};
    };
    if (std::regex_match(name, m, conv_re)) return conv(ext(1));
    if (std::regex_match(name, m, cdc_re)) {
      const std::string v = m[1];
      const std::string digits = m[2];
      double theta = digits[0] - '0';
      double scale = 0.1;
      for (std::size_t i = 1; i < digits.size(); ++i, scale /= 10) theta += (digits[i] - '0') * scale;
      if (theta > 1.0) throw ConfigError("operation '" + name + "': theta above 1");
      const CdcVariant variant = v == "ST" ? CdcVariant::ST : v == "T" ? CdcVariant::T : CdcVariant::TR;
      return cdc(variant, theta, ext(3));
    }
    throw ConfigError("unknown operation name '" + name + "'");
  }

  /// Conv configuration at a given stride (same padding).
  CdcConfig config(std::array<int, 3> stride = {1, 1, 1}) const {
    return CdcConfig::make(variant, theta, kernel, stride);
  }

  bool operator==(const OpSpec& o) const { return name() == o.name(); }
};

/// Candidate operation set of one search stage.
struct Registry {
  int stage = 1;
  std::vector<OpSpec> ops;

  std::size_t size() const { return ops.size(); }
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& o : ops) out.push_back(o.name());
    return out;
  }
  int index_of(const std::string& name) const {
    for (std::size_t i = 0; i < ops.size(); ++i)
      if (ops[i].name() == name) return static_cast<int>(i);
    return -1;
  }

  /// Backbone set: Zero, Identity, Conv_1x3x3, CDC-T-06 and CDC-TR-03 at 3x1x1 and 3x3x3.
  static Registry stage1(double theta_t = 0.6, double theta_tr = 0.3) {
    return {1,
            {OpSpec::zero(), OpSpec::identity(), OpSpec::conv({1, 3, 3}), OpSpec::cdc(CdcVariant::T, theta_t, {3, 1, 1}),
             OpSpec::cdc(CdcVariant::T, theta_t, {3, 3, 3}), OpSpec::cdc(CdcVariant::TR, theta_tr, {3, 1, 1}),
             OpSpec::cdc(CdcVariant::TR, theta_tr, {3, 3, 3})}};
  }

  /// Backbone set with each CDC op replaced by the vanilla conv of the same
  /// geometry; the duplicates this creates are collapsed.
  static Registry stage1_vanilla() {
    return {1, {OpSpec::zero(), OpSpec::identity(), OpSpec::conv({1, 3, 3}), OpSpec::conv({3, 1, 1}),
                OpSpec::conv({3, 3, 3})}};
  }

  /// Lateral set for temporal kernel extent k.
  static Registry stage2(int k, double theta_t = 0.6, double theta_tr = 0.3) {
    return {2, {OpSpec::zero(), OpSpec::conv({k, 1, 1}), OpSpec::cdc(CdcVariant::T, theta_t, {k, 1, 1}),
                OpSpec::cdc(CdcVariant::TR, theta_tr, {k, 1, 1})}};
  }

  static Registry stage2_vanilla(int k) { return {2, {OpSpec::zero(), OpSpec::conv({k, 1, 1})}}; }
};

/// Kernel extent and stride of a lateral edge, from the frame-rate ratio of
/// its endpoints.
struct EdgeClass {
  int kernel_t = 3;
  int stride_t = 1;

  static EdgeClass of(int src_frames, int dst_frames) {
    if (src_frames < dst_frames || src_frames % dst_frames != 0) {
      throw ShapeError("lateral edge " + std::to_string(src_frames) + " -> " + std::to_string(dst_frames) +
                       " frames is not a legal high-to-low rate edge");
    }
    switch (src_frames / dst_frames) {
      case 1: return {3, 1};
      case 2: return {3, 2};
      case 4: return {5, 4};
      default: throw ShapeError("unsupported rate ratio " + std::to_string(src_frames / dst_frames));
    }
  }
};

}  // namespace cdcnas
