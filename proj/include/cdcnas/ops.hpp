#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <type_traits>
#include <span>
#include <string>
#include <vector>

#include "cdcnas/conv.hpp"
#include "cdcnas/tape.hpp"

namespace cdcnas {

template <typename T>
Var<T> relu(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.storage()) v = v > T{0} ? v : T{0};
  const std::size_t xid = x.id;
  return x.tape->record("relu", std::move(out), {xid}, [xid](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad_of(self);
    const auto& xv = tp.value(xid);
    auto& dx = tp.grad_buffer(xid);
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      if (xv[i] > T{0}) dx[i] += g[i];
    }
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  out += b.value();
  const std::size_t aid = a.id, bid = b.id;
  return a.tape->record("add", std::move(out), {aid, bid}, [aid, bid](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad_of(self);
    tp.accumulate(aid, g);
    tp.accumulate(bid, g);
  });
}

template <typename T>
Var<T> add_n(std::span<const Var<T>> xs) {
  if (xs.empty()) throw ShapeError("add_n: no operands");
  Tensor<T> out = xs[0].value();
  std::vector<std::size_t> ids{xs[0].id};
  for (std::size_t i = 1; i < xs.size(); ++i) {
    require_same_shape(out.shape(), xs[i].shape(), "add_n");
    out += xs[i].value();
    ids.push_back(xs[i].id);
  }
  return xs[0].tape->record("add_n", std::move(out), ids, [ids](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad_of(self);
    for (auto id : ids) tp.accumulate(id, g);
  });
}

template <typename T>
Var<T> scalar_mul(Var<T> x, T c) {
  Tensor<T> out = x.value();
  for (auto& v : out.storage()) v *= c;
  const std::size_t xid = x.id;
  return x.tape->record("scalar_mul", std::move(out), {xid}, [xid, c](Tape<T>& tp, std::size_t self) {
    if (!tp.requires_grad(xid)) return;
    const auto& g = tp.grad_of(self);
    auto& dx = tp.grad_buffer(xid);
    for (std::int64_t i = 0; i < g.numel(); ++i) dx[i] += c * g[i];
  });
}

/// Sum of all elements as a (1,1,1,1,1) scalar.
template <typename T>
Var<T> sum(Var<T> x) {
  const std::size_t xid = x.id;
  return x.tape->record("sum", Tensor<T>::scalar(x.value().sum()), {xid}, [xid](Tape<T>& tp, std::size_t self) {
    if (!tp.requires_grad(xid)) return;
    const T g = tp.grad_of(self)[0];
    for (auto& v : tp.grad_buffer(xid).storage()) v += g;
  });
}

/// <x, r> for a constant tensor r; turns any op into a scalar test loss.
template <typename T>
Var<T> dot_const(Var<T> x, const Tensor<T>& r) {
  require_same_shape(x.shape(), r.shape(), "dot_const");
  T acc{0};
  const auto& xv = x.value();
  for (std::int64_t i = 0; i < r.numel(); ++i) acc += xv[i] * r[i];
  const std::size_t xid = x.id;
  return x.tape->record("dot_const", Tensor<T>::scalar(acc), {xid}, [xid, r](Tape<T>& tp, std::size_t self) {
    if (!tp.requires_grad(xid)) return;
    const T g = tp.grad_of(self)[0];
    auto& dx = tp.grad_buffer(xid);
    for (std::int64_t i = 0; i < r.numel(); ++i) dx[i] += g * r[i];
  });
}

/// sum_k weights[k] * xs[k]. Invalid entries in `xs` stand for all-zero
/// operands (the Zero operation): they contribute nothing and their weight
/// receives zero gradient.
template <typename T>
Var<T> weighted_sum(std::span<const Var<T>> xs, Var<T> weights) {
  if (static_cast<std::int64_t>(xs.size()) != weights.value().numel()) {
    throw ShapeError("weighted_sum: " + std::to_string(xs.size()) + " operands but " +
                     std::to_string(weights.value().numel()) + " weights");
  }
  std::optional<Shape5> shape;
  for (const auto& x : xs) {
    if (!x.valid()) continue;
    if (shape) require_same_shape(*shape, x.shape(), "weighted_sum");
    shape = x.shape();
  }
  if (!shape) throw ShapeError("weighted_sum: every operand is zero; output shape unknown");
  Tensor<T> out(*shape);
  const auto& wv = weights.value();
  std::vector<std::size_t> ids;
  std::vector<std::size_t> parents{weights.id};
  for (std::size_t k = 0; k < xs.size(); ++k) {
    ids.push_back(xs[k].valid() ? xs[k].id : Var<T>::npos);
    if (!xs[k].valid()) continue;
    parents.push_back(xs[k].id);
    const auto& xv = xs[k].value();
    const T c = wv[static_cast<std::int64_t>(k)];
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += c * xv[i];
  }
  const std::size_t wid = weights.id;
  return weights.tape->record("weighted_sum", std::move(out), std::move(parents),
                              [ids, wid](Tape<T>& tp, std::size_t self) {
                                const auto& g = tp.grad_of(self);
                                const Tensor<T> wv = tp.value(wid);
                                const bool need_w = tp.requires_grad(wid);
                                for (std::size_t k = 0; k < ids.size(); ++k) {
                                  if (ids[k] == Var<T>::npos) continue;
                                  const auto& xv = tp.value(ids[k]);
                                  if (need_w) {
                                    T acc{0};
                                    for (std::int64_t i = 0; i < g.numel(); ++i) acc += g[i] * xv[i];
                                    tp.grad_buffer(wid)[static_cast<std::int64_t>(k)] += acc;
                                  }
                                  if (tp.requires_grad(ids[k])) {
                                    auto& dx = tp.grad_buffer(ids[k]);
                                    const T c = wv[static_cast<std::int64_t>(k)];
                                    for (std::int64_t i = 0; i < g.numel(); ++i) dx[i] += c * g[i];
                                  }
                                }
                              });
}

/// Softmax over the channel axis, independently at every (n, t, h, w).
template <typename T>
Var<T> softmax(Var<T> x) {
  const Shape5 s = x.shape();
  Tensor<T> out(s);
  const auto& xv = x.value();
  const std::int64_t vol = s.volume();
  for (std::int64_t n = 0; n < s.n(); ++n) {
    for (std::int64_t p = 0; p < vol; ++p) {
      const std::int64_t base = n * s.c() * vol + p;
      T m = -std::numeric_limits<T>::infinity();
      for (std::int64_t c = 0; c < s.c(); ++c) m = std::max(m, xv[base + c * vol]);
      T z{0};
      for (std::int64_t c = 0; c < s.c(); ++c) z += (out[base + c * vol] = std::exp(xv[base + c * vol] - m));
      for (std::int64_t c = 0; c < s.c(); ++c) out[base + c * vol] /= z;
    }
  }
  const std::size_t xid = x.id;
  return x.tape->record("softmax", std::move(out), {xid}, [xid, s, vol](Tape<T>& tp, std::size_t self) {
    if (!tp.requires_grad(xid)) return;
    const auto& g = tp.grad_of(self);
    const auto& y = tp.value(self);
    auto& dx = tp.grad_buffer(xid);
    for (std::int64_t n = 0; n < s.n(); ++n) {
      for (std::int64_t p = 0; p < vol; ++p) {
        const std::int64_t base = n * s.c() * vol + p;
        T dot{0};
        for (std::int64_t c = 0; c < s.c(); ++c) dot += g[base + c * vol] * y[base + c * vol];
        for (std::int64_t c = 0; c < s.c(); ++c) dx[base + c * vol] += y[base + c * vol] * (g[base + c * vol] - dot);
      }
    }
  });
}

/// Mean cross-entropy of logits (N, K, 1, 1, 1) against integer labels.
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> labels) {
  const Shape5 s = logits.shape();
  if (s.volume() != 1) throw ShapeError("cross_entropy: logits must be (N,K,1,1,1), got " + s.str());
  if (static_cast<std::int64_t>(labels.size()) != s.n()) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " + std::to_string(s.n()));
  }
  const std::int64_t k = s.c();
  for (int y : labels) {
    if (y < 0 || y >= k) {
      throw ShapeError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
    }
  }
  const auto& z = logits.value();
  Tensor<T> prob(s);
  T loss{0};
  for (std::int64_t n = 0; n < s.n(); ++n) {
    T m = -std::numeric_limits<T>::infinity();
    for (std::int64_t c = 0; c < k; ++c) m = std::max(m, z[n * k + c]);
    T sum_exp{0};
    for (std::int64_t c = 0; c < k; ++c) sum_exp += (prob[n * k + c] = std::exp(z[n * k + c] - m));
    for (std::int64_t c = 0; c < k; ++c) prob[n * k + c] /= sum_exp;
    loss += m + std::log(sum_exp) - z[n * k + labels[static_cast<std::size_t>(n)]];
  }
  loss /= static_cast<T>(s.n());
  std::vector<int> y(labels.begin(), labels.end());
  const std::size_t zid = logits.id;
  return logits.tape->record("cross_entropy", Tensor<T>::scalar(loss), {zid},
                             [zid, prob, y, k](Tape<T>& tp, std::size_t self) {
                               if (!tp.requires_grad(zid)) return;
                               const T g = tp.grad_of(self)[0] / static_cast<T>(y.size());
                               auto& dz = tp.grad_buffer(zid);
                               for (std::size_t n = 0; n < y.size(); ++n) {
                                 for (std::int64_t c = 0; c < k; ++c) {
                                   const std::int64_t i = static_cast<std::int64_t>(n) * k + c;
                                   dz[i] += g * (prob[i] - (c == y[n] ? T{1} : T{0}));
                                 }
                               }
                             });
}

/// Per-window maximum without padding. Ties route the gradient to the first
/// maximal element in (t, h, w) scan order.
template <typename T>
Var<T> maxpool3d(Var<T> x, std::array<int, 3> window, std::array<int, 3> stride) {
  const Shape5 s = x.shape();
  const std::array<std::int64_t, 3> in{s.t(), s.h(), s.w()};
  for (int a = 0; a < 3; ++a) {
    if (window[a] < 1 || stride[a] < 1 || window[a] > in[a]) {
      throw ShapeError("maxpool3d: invalid window/stride for input " + s.str());
    }
  }
  const std::int64_t ot = (s.t() - window[0]) / stride[0] + 1;
  const std::int64_t oh = (s.h() - window[1]) / stride[1] + 1;
  const std::int64_t ow = (s.w() - window[2]) / stride[2] + 1;
  Tensor<T> out(Shape5{s.n(), s.c(), ot, oh, ow});
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(out.numel()));
  const auto& xv = x.value();
  std::int64_t o = 0;
  for (std::int64_t nc = 0; nc < s.n() * s.c(); ++nc) {
    const std::int64_t base = nc * s.volume();
    for (std::int64_t t = 0; t < ot; ++t) {
      for (std::int64_t h = 0; h < oh; ++h) {
        for (std::int64_t w = 0; w < ow; ++w, ++o) {
          std::int64_t best = -1;
          T bv{};
          for (int dt = 0; dt < window[0]; ++dt) {
            for (int dh = 0; dh < window[1]; ++dh) {
              for (int dw = 0; dw < window[2]; ++dw) {
                const std::int64_t i =
                    base + ((t * stride[0] + dt) * s.h() + h * stride[1] + dh) * s.w() + w * stride[2] + dw;
                if (best < 0 || xv[i] > bv) {
                  best = i;
                  bv = xv[i];
                }
              }
            }
          }
          out[o] = bv;
          argmax[static_cast<std::size_t>(o)] = best;
        }
      }
    }
  }
  const std::size_t xid = x.id;
  return x.tape->record("maxpool3d", std::move(out), {xid}, [xid, argmax](Tape<T>& tp, std::size_t self) {
    if (!tp.requires_grad(xid)) return;
    const auto& g = tp.grad_of(self);
    auto& dx = tp.grad_buffer(xid);
    for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += g[static_cast<std::int64_t>(i)];
  });
}

/// Mean over (T, H, W): (N, C, T, H, W) -> (N, C, 1, 1, 1).
template <typename T>
Var<T> global_avg_pool(Var<T> x) {
  const Shape5 s = x.shape();
  const std::int64_t vol = s.volume();
  if (vol == 0) throw ShapeError("global_avg_pool: empty spatial extent " + s.str());
  Tensor<T> out(Shape5{s.n(), s.c(), 1, 1, 1});
  const auto& xv = x.value();
  for (std::int64_t nc = 0; nc < s.n() * s.c(); ++nc) {
    T acc{0};
    for (std::int64_t i = 0; i < vol; ++i) acc += xv[nc * vol + i];
    out[nc] = acc / static_cast<T>(vol);
  }
  const std::size_t xid = x.id;
  return x.tape->record("global_avg_pool", std::move(out), {xid}, [xid, s, vol](Tape<T>& tp, std::size_t self) {
    if (!tp.requires_grad(xid)) return;
    const auto& g = tp.grad_of(self);
    auto& dx = tp.grad_buffer(xid);
    for (std::int64_t nc = 0; nc < s.n() * s.c(); ++nc) {
      const T v = g[nc] / static_cast<T>(vol);
      for (std::int64_t i = 0; i < vol; ++i) dx[nc * vol + i] += v;
    }
  });
}

/// Fully connected layer on per-sample flattened features.
/// x: (N, ...) with F features per sample; w: (K, F, 1, 1, 1); bias: K elements.
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, std::type_identity_t<std::optional<Var<T>>> bias = std::nullopt) {
  const Shape5 xs = x.shape();
  const std::int64_t n = xs.n();
  const std::int64_t f = n == 0 ? 0 : xs.numel() / n;
  const std::int64_t k = w.shape().n();
  if (w.value().numel() != k * f) {
    throw ShapeError("linear: weight " + w.shape().str() + " incompatible with " + std::to_string(f) + " features");
  }
  if (bias && bias->value().numel() != k) throw ShapeError("linear: bias size mismatch");
  using CMap = Eigen::Map<const detail::RowMat<T>>;
  using Map = Eigen::Map<detail::RowMat<T>>;
  Tensor<T> out(Shape5{n, k, 1, 1, 1});
  Map(out.ptr(), n, k).noalias() = CMap(x.value().ptr(), n, f) * CMap(w.value().ptr(), k, f).transpose();
  if (bias) {
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t j = 0; j < k; ++j) out[i * k + j] += bias->value()[j];
    }
  }
  std::vector<std::size_t> parents{x.id, w.id};
  if (bias) parents.push_back(bias->id);
  const std::size_t xid = x.id, wid = w.id, bid = bias ? bias->id : Var<T>::npos;
  return x.tape->record("linear", std::move(out), std::move(parents),
                        [xid, wid, bid, n, f, k](Tape<T>& tp, std::size_t self) {
                          CMap g(tp.grad_of(self).ptr(), n, k);
                          if (tp.requires_grad(xid)) {
                            Map(tp.grad_buffer(xid).ptr(), n, f).noalias() += g * CMap(tp.value(wid).ptr(), k, f);
                          }
                          if (tp.requires_grad(wid)) {
                            Map(tp.grad_buffer(wid).ptr(), k, f).noalias() +=
                                g.transpose() * CMap(tp.value(xid).ptr(), n, f);
                          }
                          if (bid != Var<T>::npos && tp.requires_grad(bid)) {
                            auto& db = tp.grad_buffer(bid);
                            for (std::int64_t j = 0; j < k; ++j) db[j] += g.col(j).sum();
                          }
                        });
}

/// Concatenation along the channel axis; all other extents must agree.
template <typename T>
Var<T> concat_channels(std::span<const Var<T>> xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no operands");
  const Shape5 s0 = xs[0].shape();
  std::int64_t channels = 0;
  for (const auto& x : xs) {
    const Shape5 s = x.shape();
    if (s.n() != s0.n() || s.t() != s0.t() || s.h() != s0.h() || s.w() != s0.w()) {
      throw ShapeError("concat_channels: non-channel extents differ: " + s0.str() + " vs " + s.str());
    }
    channels += s.c();
  }
  if (xs.size() == 1) return xs[0];
  const std::int64_t vol = s0.volume();
  Tensor<T> out(Shape5{s0.n(), channels, s0.t(), s0.h(), s0.w()});
  std::vector<std::size_t> ids;
  std::vector<std::int64_t> widths;
  for (std::int64_t n = 0; n < s0.n(); ++n) {
    std::int64_t c0 = 0;
    for (const auto& x : xs) {
      const std::int64_t c = x.shape().c();
      std::copy_n(x.value().ptr() + n * c * vol, c * vol, out.ptr() + (n * channels + c0) * vol);
      c0 += c;
    }
  }
  for (const auto& x : xs) {
    ids.push_back(x.id);
    widths.push_back(x.shape().c());
  }
  const std::int64_t batch = s0.n();
  return xs[0].tape->record("concat_channels", std::move(out), ids,
                            [ids, widths, channels, vol, batch](Tape<T>& tp, std::size_t self) {
                              const auto& g = tp.grad_of(self);
                              std::int64_t c0 = 0;
                              for (std::size_t k = 0; k < ids.size(); ++k) {
                                const std::int64_t c = widths[k];
                                if (tp.requires_grad(ids[k])) {
                                  auto& dx = tp.grad_buffer(ids[k]);
                                  for (std::int64_t n = 0; n < batch; ++n) {
                                    const T* src = g.ptr() + (n * channels + c0) * vol;
                                    T* dst = dx.ptr() + n * c * vol;
                                    for (std::int64_t i = 0; i < c * vol; ++i) dst[i] += src[i];
                                  }
                                }
                                c0 += c;
                              }
                            });
}

template <typename T>
Var<T> concat_channels(std::initializer_list<Var<T>> xs) {
  std::vector<Var<T>> v(xs);
  return concat_channels<T>(std::span<const Var<T>>(v));
}

/// Channels [begin, end) of x.
template <typename T>
Var<T> slice_channels(Var<T> x, std::int64_t begin, std::int64_t end) {
  const Shape5 s = x.shape();
  if (begin < 0 || end > s.c() || begin >= end) {
    throw ShapeError("slice_channels: [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + s.str());
  }
  const std::int64_t vol = s.volume(), c = end - begin;
  Tensor<T> out(Shape5{s.n(), c, s.t(), s.h(), s.w()});
  for (std::int64_t n = 0; n < s.n(); ++n) {
    std::copy_n(x.value().ptr() + (n * s.c() + begin) * vol, c * vol, out.ptr() + n * c * vol);
  }
  const std::size_t xid = x.id;
  return x.tape->record("slice_channels", std::move(out), {xid}, [xid, s, begin, c, vol](Tape<T>& tp, std::size_t self) {
    if (!tp.requires_grad(xid)) return;
    const auto& g = tp.grad_of(self);
    auto& dx = tp.grad_buffer(xid);
    for (std::int64_t n = 0; n < s.n(); ++n) {
      const T* src = g.ptr() + n * c * vol;
      T* dst = dx.ptr() + (n * s.c() + begin) * vol;
      for (std::int64_t i = 0; i < c * vol; ++i) dst[i] += src[i];
    }
  });
}

/// Channel shuffle: view channels as (groups, C/groups), transpose, flatten.
template <typename T>
Var<T> shuffle_channels(Var<T> x, std::int64_t groups) {
  const Shape5 s = x.shape();
  if (groups < 1 || s.c() % groups != 0) throw ShapeError("shuffle_channels: groups do not divide " + s.str());
  if (groups == 1) return x;
  const std::int64_t per = s.c() / groups, vol = s.volume();
  std::vector<std::int64_t> src_of(static_cast<std::size_t>(s.c()));
  for (std::int64_t g = 0; g < groups; ++g) {
    for (std::int64_t i = 0; i < per; ++i) src_of[static_cast<std::size_t>(i * groups + g)] = g * per + i;
  }
  Tensor<T> out(s);
  for (std::int64_t n = 0; n < s.n(); ++n) {
    for (std::int64_t c = 0; c < s.c(); ++c) {
      std::copy_n(x.value().ptr() + (n * s.c() + src_of[static_cast<std::size_t>(c)]) * vol, vol,
                  out.ptr() + (n * s.c() + c) * vol);
    }
  }
  const std::size_t xid = x.id;
  return x.tape->record("shuffle_channels", std::move(out), {xid}, [xid, s, src_of, vol](Tape<T>& tp, std::size_t self) {
    if (!tp.requires_grad(xid)) return;
    const auto& g = tp.grad_of(self);
    auto& dx = tp.grad_buffer(xid);
    for (std::int64_t n = 0; n < s.n(); ++n) {
      for (std::int64_t c = 0; c < s.c(); ++c) {
        const T* src = g.ptr() + (n * s.c() + c) * vol;
        T* dst = dx.ptr() + (n * s.c() + src_of[static_cast<std::size_t>(c)]) * vol;
        for (std::int64_t i = 0; i < vol; ++i) dst[i] += src[i];
      }
    }
  });
}

/// Running statistics of a batch-norm layer, updated in training mode.
template <typename T>
struct BatchNormState {
  Tensor<T>* running_mean = nullptr;
  Tensor<T>* running_var = nullptr;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel normalisation over (N, T, H, W) with affine gamma/beta of
/// C elements. Training mode uses batch statistics (biased variance) and
/// updates the running estimates (unbiased variance); eval mode uses them.
template <typename T>
Var<T> batch_norm3d(Var<T> x, Var<T> gamma, Var<T> beta, const BatchNormState<T>& state, bool training) {
  const Shape5 s = x.shape();
  const std::int64_t c = s.c(), vol = s.volume(), m = s.n() * vol;
  if (gamma.value().numel() != c || beta.value().numel() != c) {
    throw ShapeError("batch_norm3d: affine parameters do not match " + std::to_string(c) + " channels");
  }
  if (m == 0) throw ShapeError("batch_norm3d: empty input " + s.str());
  const auto& xv = x.value();
  std::vector<T> mean(static_cast<std::size_t>(c)), invstd(static_cast<std::size_t>(c));
  for (std::int64_t ch = 0; ch < c; ++ch) {
    T mu, var;
    if (training) {
      double acc = 0.0, acc2 = 0.0;
      for (std::int64_t n = 0; n < s.n(); ++n) {
        const T* p = xv.ptr() + (n * c + ch) * vol;
        for (std::int64_t i = 0; i < vol; ++i) acc += p[i];
      }
      const double mu_d = acc / static_cast<double>(m);
      for (std::int64_t n = 0; n < s.n(); ++n) {
        const T* p = xv.ptr() + (n * c + ch) * vol;
        for (std::int64_t i = 0; i < vol; ++i) acc2 += (p[i] - mu_d) * (p[i] - mu_d);
      }
      mu = static_cast<T>(mu_d);
      var = static_cast<T>(acc2 / static_cast<double>(m));
      if (state.running_mean != nullptr) {
        const double unbiased = m > 1 ? acc2 / static_cast<double>(m - 1) : acc2;
        auto& rm = (*state.running_mean)[ch];
        auto& rv = (*state.running_var)[ch];
        rm = static_cast<T>((1.0 - state.momentum) * rm + state.momentum * mu_d);
        rv = static_cast<T>((1.0 - state.momentum) * rv + state.momentum * unbiased);
      }
    } else {
      mu = (*state.running_mean)[ch];
      var = (*state.running_var)[ch];
    }
    mean[static_cast<std::size_t>(ch)] = mu;
    invstd[static_cast<std::size_t>(ch)] = T{1} / std::sqrt(var + static_cast<T>(state.eps));
  }
  Tensor<T> out(s);
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::int64_t n = 0; n < s.n(); ++n) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const T a = gv[ch] * invstd[static_cast<std::size_t>(ch)];
      const T b = bv[ch] - a * mean[static_cast<std::size_t>(ch)];
      const T* p = xv.ptr() + (n * c + ch) * vol;
      T* q = out.ptr() + (n * c + ch) * vol;
      for (std::int64_t i = 0; i < vol; ++i) q[i] = a * p[i] + b;
    }
  }
  const std::size_t xid = x.id, gid = gamma.id, bid = beta.id;
  return x.tape->record(
      "batch_norm3d", std::move(out), {xid, gid, bid},
      [xid, gid, bid, s, c, vol, m, mean, invstd, training](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad_of(self);
        const auto& xv = tp.value(xid);
        const auto& gv = tp.value(gid);
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const T mu = mean[static_cast<std::size_t>(ch)], is = invstd[static_cast<std::size_t>(ch)];
          T sum_g{0}, sum_gx{0};
          for (std::int64_t n = 0; n < s.n(); ++n) {
            const T* gp = g.ptr() + (n * c + ch) * vol;
            const T* xp = xv.ptr() + (n * c + ch) * vol;
            for (std::int64_t i = 0; i < vol; ++i) {
              sum_g += gp[i];
              sum_gx += gp[i] * (xp[i] - mu) * is;
            }
          }
          if (tp.requires_grad(gid)) tp.grad_buffer(gid)[ch] += sum_gx;
          if (tp.requires_grad(bid)) tp.grad_buffer(bid)[ch] += sum_g;
          if (!tp.requires_grad(xid)) continue;
          auto& dx = tp.grad_buffer(xid);
          const T a = gv[ch] * is;
          const T inv_m = T{1} / static_cast<T>(m);
          for (std::int64_t n = 0; n < s.n(); ++n) {
            const T* gp = g.ptr() + (n * c + ch) * vol;
            const T* xp = xv.ptr() + (n * c + ch) * vol;
            T* dp = dx.ptr() + (n * c + ch) * vol;
            if (training) {
              for (std::int64_t i = 0; i < vol; ++i) {
                const T xhat = (xp[i] - mu) * is;
                dp[i] += a * (gp[i] - inv_m * sum_g - xhat * inv_m * sum_gx);
              }
            } else {
              for (std::int64_t i = 0; i < vol; ++i) dp[i] += a * gp[i];
            }
          }
        }
      });
}

}  // namespace cdcnas
