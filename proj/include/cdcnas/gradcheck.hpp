#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cdcnas/cdc.hpp"
#include "cdcnas/ops.hpp"

namespace cdcnas {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "input#index" of the worst element
};

/// Builds a scalar loss from differentiable inputs recorded on `tape`.
using LossBuilder = std::function<Var<double>(Tape<double>& tape, const std::vector<Var<double>>& inputs)>;

/// Compares reverse-mode gradients of `loss` against central finite
/// differences for every element of every input:
///   max_i |g_ad - g_fd| / max(1, |g_fd|)
inline GradCheckResult gradcheck(const LossBuilder& loss, const std::vector<Tensor<double>>& inputs, double h = 1e-4) {
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& x : inputs) vars.push_back(tape.leaf(x));
    tape.backward(loss(tape, vars));
    for (const auto& v : vars) analytic.push_back(tape.grad(v));
  }
  auto eval = [&](const std::vector<Tensor<double>>& xs) {
    Tape<double> tape(false);
    std::vector<Var<double>> vars;
    for (const auto& x : xs) vars.push_back(tape.leaf(x));
    return loss(tape, vars).value()[0];
  };
  GradCheckResult r;
  std::vector<Tensor<double>> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::int64_t i = 0; i < inputs[k].numel(); ++i) {
      const double x0 = inputs[k][i];
      probe[k][i] = x0 + h;
      const double up = eval(probe);
      probe[k][i] = x0 - h;
      const double down = eval(probe);
      probe[k][i] = x0;
      const double fd = (up - down) / (2.0 * h);
      const double err = std::abs(analytic[k][i] - fd) / std::max(1.0, std::abs(fd));
      if (err > r.max_rel_error) {
        r.max_rel_error = err;
        r.worst = std::to_string(k) + "#" + std::to_string(i);
      }
    }
  }
  return r;
}

struct GradCheckCase {
  std::string name;
  GradCheckResult result;
};

/// Finite-difference checks of every primitive and every CDC variant at
/// theta in {0, 0.3, 0.6, 1.0}, on small random 64-bit problems.
inline std::vector<GradCheckCase> run_gradcheck_suite(std::uint64_t seed = 7, double h = 1e-4) {
  using V = Var<double>;
  using Tn = Tensor<double>;
  Rng rng(seed);
  std::vector<GradCheckCase> out;
  auto rnd = [&](Shape5 s) { return Tn::randn(s, rng); };
  auto run = [&](const std::string& name, const LossBuilder& f, std::vector<Tn> xs) {
    out.push_back({name, gradcheck(f, xs, h)});
  };
  // Random projection makes each loss sensitive to every output element.
  auto project = [&](Shape5 s) {
    auto r = std::make_shared<Tn>(rnd(s));
    return [r](V y) { return dot_const(y, *r); };
  };

  {
    const Conv3dOptions o{{1, 2, 2}, {1, 1, 1}, {1, 1, 1}, 1};
    auto p = project(conv3d_output_shape({2, 2, 4, 5, 5}, {3, 2, 3, 3, 3}, o));
    run("conv3d", [=](Tape<double>& t, const std::vector<V>& v) { return p(conv3d(v[0], v[1], o, v[2])); },
        {rnd({2, 2, 4, 5, 5}), rnd({3, 2, 3, 3, 3}), rnd({1, 3, 1, 1, 1})});
  }
  {
    const Conv3dOptions o{{2, 1, 1}, {1, 2, 1}, {0, 2, 1}, 2};
    auto p = project(conv3d_output_shape({1, 4, 5, 6, 4}, {4, 2, 2, 3, 3}, o));
    run("conv3d_grouped_dilated", [=](Tape<double>&, const std::vector<V>& v) { return p(conv3d(v[0], v[1], o)); },
        {rnd({1, 4, 5, 6, 4}), rnd({4, 2, 2, 3, 3})});
  }
  {
    auto p = project({1, 2, 2, 3, 3});
    run("maxpool3d", [=](Tape<double>&, const std::vector<V>& v) { return p(maxpool3d(v[0], {2, 2, 2}, {2, 2, 2})); },
        {rnd({1, 2, 4, 6, 6})});
  }
  {
    auto p = project({2, 3, 2, 3, 3});
    run("relu", [=](Tape<double>&, const std::vector<V>& v) { return p(relu(v[0])); }, {rnd({2, 3, 2, 3, 3})});
  }
  for (bool training : {true, false}) {
    auto p = project({3, 2, 2, 3, 3});
    auto mean = std::make_shared<Tn>(rnd({1, 2, 1, 1, 1}));
    auto var = std::make_shared<Tn>(Tn::full({1, 2, 1, 1, 1}, 1.5));
    run(training ? "batch_norm3d_train" : "batch_norm3d_eval",
        [=](Tape<double>&, const std::vector<V>& v) {
          // Copies keep the running-stat update out of the finite-difference probes.
          Tn m = *mean, s = *var;
          return p(batch_norm3d(v[0], v[1], v[2], BatchNormState<double>{&m, &s, 0.1, 1e-5}, training));
        },
        {rnd({3, 2, 2, 3, 3}), rnd({1, 2, 1, 1, 1}), rnd({1, 2, 1, 1, 1})});
  }
  {
    auto p = project({2, 3, 1, 1, 1});
    run("global_avg_pool", [=](Tape<double>&, const std::vector<V>& v) { return p(global_avg_pool(v[0])); },
        {rnd({2, 3, 2, 3, 2})});
  }
  {
    auto p = project({2, 4, 1, 1, 1});
    run("linear", [=](Tape<double>&, const std::vector<V>& v) { return p(linear(v[0], v[1], v[2])); },
        {rnd({2, 5, 1, 1, 1}), rnd({4, 5, 1, 1, 1}), rnd({1, 4, 1, 1, 1})});
  }
  {
    auto p = project({2, 5, 2, 2, 3});
    run("concat_channels",
        [=](Tape<double>&, const std::vector<V>& v) { return p(concat_channels<double>({v[0], v[1]})); },
        {rnd({2, 2, 2, 2, 3}), rnd({2, 3, 2, 2, 3})});
  }
  {
    auto p = project({2, 2, 2, 2, 2});
    run("slice_channels", [=](Tape<double>&, const std::vector<V>& v) { return p(slice_channels(v[0], 1, 3)); },
        {rnd({2, 4, 2, 2, 2})});
  }
  {
    auto p = project({1, 6, 2, 2, 2});
    run("shuffle_channels", [=](Tape<double>&, const std::vector<V>& v) { return p(shuffle_channels(v[0], 2)); },
        {rnd({1, 6, 2, 2, 2})});
  }
  {
    auto p = project({2, 4, 2, 1, 1});
    run("softmax", [=](Tape<double>&, const std::vector<V>& v) { return p(softmax(v[0])); }, {rnd({2, 4, 2, 1, 1})});
  }
  {
    const std::vector<int> labels{2, 0, 3};
    run("cross_entropy", [=](Tape<double>&, const std::vector<V>& v) { return cross_entropy(v[0], std::span(labels)); },
        {rnd({3, 4, 1, 1, 1})});
  }
  {
    auto p = project({2, 3, 2, 2, 2});
    run("scalar_mul", [=](Tape<double>&, const std::vector<V>& v) { return p(scalar_mul(v[0], 3.0)); },
        {rnd({2, 3, 2, 2, 2})});
    run("add", [=](Tape<double>&, const std::vector<V>& v) { return p(add(v[0], v[1])); },
        {rnd({2, 3, 2, 2, 2}), rnd({2, 3, 2, 2, 2})});
    run("weighted_sum",
        [=](Tape<double>& t, const std::vector<V>& v) {
          const std::vector<V> xs{v[0], V{}, v[1]};
          return p(weighted_sum<double>(xs, v[2]));
        },
        {rnd({2, 3, 2, 2, 2}), rnd({2, 3, 2, 2, 2}), rnd({1, 3, 1, 1, 1})});
  }
  {
    run("sum", [=](Tape<double>&, const std::vector<V>& v) { return sum(v[0]); }, {rnd({1, 2, 2, 2, 2})});
  }

  struct VariantCase {
    CdcVariant variant;
    std::array<int, 3> kernel;
    std::array<int, 3> stride;
  };
  const std::vector<VariantCase> variants{{CdcVariant::ST, {3, 3, 3}, {1, 1, 1}},
                                          {CdcVariant::T, {3, 3, 3}, {1, 2, 2}},
                                          {CdcVariant::TR, {3, 3, 3}, {1, 1, 1}},
                                          {CdcVariant::TR, {5, 1, 1}, {2, 1, 1}}};
  for (const auto& vc : variants) {
    for (double theta : {0.0, 0.3, 0.6, 1.0}) {
      const CdcConfig cfg = CdcConfig::make(vc.variant, theta, vc.kernel, vc.stride);
      const Shape5 xs{1, 2, 5, 4, 4};
      const Shape5 ws{3, 2, vc.kernel[0], vc.kernel[1], vc.kernel[2]};
      auto p = project(conv3d_output_shape(xs, ws, cfg.conv));
      const std::string name = std::string("cdc_") + to_string(vc.variant) + "_" + std::to_string(vc.kernel[0]) + "x" +
                               std::to_string(vc.kernel[1]) + "x" + std::to_string(vc.kernel[2]) + "_theta" +
                               std::to_string(theta).substr(0, 3);
      run(name, [=](Tape<double>&, const std::vector<V>& v) { return p(cdc_forward(v[0], v[1], cfg)); },
          {rnd(xs), rnd(ws)});
    }
  }
  {
    // conv3d -> relu -> global_avg_pool -> cross_entropy on (1,2,4,6,6).
    const Conv3dOptions o = Conv3dOptions::same({3, 3, 3});
    const std::vector<int> labels{1};
    run("composite_conv_relu_gap_ce",
        [=](Tape<double>&, const std::vector<V>& v) {
          return cross_entropy(global_avg_pool(relu(conv3d(v[0], v[1], o, v[2]))), std::span(labels));
        },
        {rnd({1, 2, 4, 6, 6}), rnd({3, 2, 3, 3, 3}), rnd({1, 3, 1, 1, 1})});
  }
  return out;
}

}  // namespace cdcnas
