#pragma once

#include <cmath>
#include <memory>
#include <string>

#include "cdcnas/registry.hpp"
#include "cdcnas/rng.hpp"

namespace cdcnas {

/// He-normal initialisation for a conv kernel (fan_in = Cin/groups * taps).
template <typename T>
Tensor<T> kaiming_normal(const Shape5& w, Rng& rng) {
  const double fan_in = static_cast<double>(w.c() * w.t() * w.h() * w.w());
  return Tensor<T>::randn(w, rng, std::sqrt(2.0 / fan_in));
}

template <typename T>
class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(ParamStore<T>& store, const std::string& prefix, std::int64_t channels) {
    const Shape5 s{1, channels, 1, 1, 1};
    gamma_ = &store.add(prefix + "/gamma", Tensor<T>::full(s, T{1}), Partition::Weights);
    beta_ = &store.add(prefix + "/beta", Tensor<T>(s), Partition::Weights);
    mean_ = &store.add_buffer(prefix + "/running_mean", Tensor<T>(s));
    var_ = &store.add_buffer(prefix + "/running_var", Tensor<T>::full(s, T{1}));
  }

  Var<T> forward(Tape<T>& tape, Var<T> x, bool training) const {
    return batch_norm3d(x, tape.param(*gamma_), tape.param(*beta_),
                        BatchNormState<T>{&mean_->value, &var_->value, 0.1, 1e-5}, training);
  }

 private:
  Parameter<T>* gamma_ = nullptr;
  Parameter<T>* beta_ = nullptr;
  Buffer<T>* mean_ = nullptr;
  Buffer<T>* var_ = nullptr;
};

/// [ReLU] -> conv (vanilla or CDC, no bias) -> BN.
template <typename T>
class ConvBn {
 public:
  ConvBn() = default;
  ConvBn(ParamStore<T>& store, const std::string& prefix, std::int64_t cin, std::int64_t cout, CdcConfig cfg, Rng& rng,
         bool pre_relu = true)
      : cfg_(std::move(cfg)), pre_relu_(pre_relu) {
    const auto k = cfg_.kernel();
    const Shape5 ws{cout, cin / cfg_.conv.groups, k[0], k[1], k[2]};
    w_ = &store.add(prefix + "/conv/w", kaiming_normal<T>(ws, rng), Partition::Weights);
    bn_ = BatchNorm<T>(store, prefix + "/bn", cout);
  }

  Var<T> forward(Tape<T>& tape, Var<T> x, bool training) const {
    if (pre_relu_) x = relu(x);
    return bn_.forward(tape, cdc_forward(x, tape.param(*w_), cfg_), training);
  }

  const CdcConfig& config() const { return cfg_; }
  const Parameter<T>& weight() const { return *w_; }

 private:
  Parameter<T>* w_ = nullptr;
  BatchNorm<T> bn_;
  CdcConfig cfg_;
  bool pre_relu_ = true;
};

/// A candidate operation on an edge.
template <typename T>
class EdgeOp {
 public:
  explicit EdgeOp(OpSpec spec) : spec_(std::move(spec)) {}
  virtual ~EdgeOp() = default;
  virtual Var<T> forward(Tape<T>& tape, Var<T> x, bool training) const = 0;
  const OpSpec& spec() const { return spec_; }

 private:
  OpSpec spec_;
};

template <typename T>
class IdentityOp final : public EdgeOp<T> {
 public:
  IdentityOp() : EdgeOp<T>(OpSpec::identity()) {}
  Var<T> forward(Tape<T>&, Var<T> x, bool) const override { return x; }
};

template <typename T>
class ConvOp final : public EdgeOp<T> {
 public:
  ConvOp(ParamStore<T>& store, const std::string& prefix, const OpSpec& spec, std::int64_t cin, std::int64_t cout,
         std::array<int, 3> stride, Rng& rng)
      : EdgeOp<T>(spec), unit_(store, prefix, cin, cout, spec.config(stride), rng) {}
  Var<T> forward(Tape<T>& tape, Var<T> x, bool training) const override { return unit_.forward(tape, x, training); }

 private:
  ConvBn<T> unit_;
};

/// Instantiates `spec`; Zero yields nullptr (callers treat it as an absent
/// operand). Identity requires cin == cout and unit stride.
template <typename T>
std::unique_ptr<EdgeOp<T>> make_op(ParamStore<T>& store, const std::string& prefix, const OpSpec& spec,
                                   std::int64_t cin, std::int64_t cout, std::array<int, 3> stride, Rng& rng) {
  switch (spec.kind) {
    case OpKind::Zero: return nullptr;
    case OpKind::Identity:
      if (cin != cout || stride != std::array<int, 3>{1, 1, 1}) {
        throw ShapeError("Identity op needs matching channels and unit stride");
      }
      return std::make_unique<IdentityOp<T>>();
    case OpKind::Conv:
      return std::make_unique<ConvOp<T>>(store, prefix + "/" + spec.name(), spec, cin, cout, stride, rng);
  }
  return nullptr;
}

}  // namespace cdcnas
