#pragma once

#include <cmath>
#include <unordered_map>

#include "cdcnas/tape.hpp"

namespace cdcnas {

/// Rescales the gradients of one partition so their joint L2 norm is at most
/// max_norm. Returns the norm before clipping.
template <typename T>
double clip_grad_norm(ParamStore<T>& store, Partition partition, double max_norm) {
  double sq = 0.0;
  for (auto* p : store.in(partition)) {
    for (T g : p->grad.data()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T scale = static_cast<T>(max_norm / (norm + 1e-12));
    for (auto* p : store.in(partition)) {
      for (T& g : p->grad.data()) g *= scale;
    }
  }
  return norm;
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
template <typename T>
class Sgd {
 public:
  struct Options {
    double lr = 1e-2;
    double momentum = 0.9;
    double weight_decay = 5e-5;
  };

  Sgd(Partition partition, Options options) : partition_(partition), opt_(options) {}

  Partition partition() const { return partition_; }
  double lr() const { return opt_.lr; }
  void set_lr(double lr) { opt_.lr = lr; }

  void step(ParamStore<T>& store) {
    const T lr = static_cast<T>(opt_.lr), mu = static_cast<T>(opt_.momentum), wd = static_cast<T>(opt_.weight_decay);
    for (auto* p : store.in(partition_)) {
      auto& v = velocity_[p];
      if (v.empty()) v = Tensor<T>(p->value.shape());
      for (std::int64_t i = 0; i < p->value.numel(); ++i) {
        const T g = p->grad[i] + wd * p->value[i];
        v[i] = mu * v[i] + g;
        p->value[i] -= lr * v[i];
      }
    }
  }

 private:
  Partition partition_;
  Options opt_;
  std::unordered_map<const Parameter<T>*, Tensor<T>> velocity_;
};

/// Adam with L2 weight decay folded into the gradient.
template <typename T>
class Adam {
 public:
  struct Options {
    double lr = 6e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-3;
  };

  Adam(Partition partition, Options options) : partition_(partition), opt_(options) {}

  Partition partition() const { return partition_; }
  double lr() const { return opt_.lr; }
  void set_lr(double lr) { opt_.lr = lr; }

  void step(ParamStore<T>& store) {
    ++steps_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(steps_));
    for (auto* p : store.in(partition_)) {
      auto& st = state_[p];
      if (st.m.empty()) {
        st.m = Tensor<T>(p->value.shape());
        st.v = Tensor<T>(p->value.shape());
      }
      for (std::int64_t i = 0; i < p->value.numel(); ++i) {
        const double g = static_cast<double>(p->grad[i]) + opt_.weight_decay * p->value[i];
        st.m[i] = static_cast<T>(opt_.beta1 * st.m[i] + (1.0 - opt_.beta1) * g);
        st.v[i] = static_cast<T>(opt_.beta2 * st.v[i] + (1.0 - opt_.beta2) * g * g);
        const double mhat = st.m[i] / c1, vhat = st.v[i] / c2;
        p->value[i] -= static_cast<T>(opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps));
      }
    }
  }

 private:
  struct Moments {
    Tensor<T> m, v;
  };
  Partition partition_;
  Options opt_;
  std::int64_t steps_ = 0;
  std::unordered_map<const Parameter<T>*, Moments> state_;
};

}  // namespace cdcnas
