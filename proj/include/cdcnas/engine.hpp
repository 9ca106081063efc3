#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdcnas/data.hpp"
#include "cdcnas/network.hpp"
#include "cdcnas/optim.hpp"

namespace cdcnas {

struct Schedule {
  int epochs = 10;
  int batch = 8;
  double w_lr = 1e-2;
  double w_momentum = 0.9;
  double w_wd = 5e-5;
  double grad_clip = 5.0;
  // search
  int freeze_epochs = 3;
  double a_lr = 6e-4;
  double a_wd = 1e-3;
  double a_beta1 = 0.5;
  double a_beta2 = 0.999;
  int decay_epoch = 7;
  double decay_factor = 0.5;
  // training
  double plateau_factor = 0.1;
  int plateau_patience = 3;

  void validate() const {
    if (epochs < 0 || batch < 1) throw ConfigError("epochs must be >= 0 and batch >= 1");
    if (w_lr < 0 || a_lr < 0) throw ConfigError("learning rates must be non-negative");
    if (plateau_patience < 1) throw ConfigError("plateau patience must be >= 1");
    if (freeze_epochs < 0) throw ConfigError("freeze epochs must be >= 0");
  }
};

/// Which views of a clip a network consumes, and how they are augmented.
struct DataOptions {
  std::vector<std::string> modalities{"rgb", "depth"};
  std::vector<int> rates{8, 16, 32};
  int crop = 40;
  double flip_prob = 0.0;
  bool augment = true;
};

/// Half of the training split a batch was drawn from.
enum class Provenance { WeightHalf, ArchHalf, Whole, Eval };

struct Batch {
  BranchInputs<float> inputs;
  std::vector<int> labels;
  std::vector<std::size_t> clips;
  Provenance tag = Provenance::Whole;
};

/// Stacks clips into per-branch (N, C, T, H, W) tensors. With augmentation
/// each clip draws one flip/crop and applies it to every modality and rate;
/// otherwise a centre crop is used.
inline Batch make_batch(const Dataset& ds, std::span<const std::size_t> idx, const DataOptions& opt, bool augment,
                        Rng& rng, Provenance tag) {
  Batch b;
  b.tag = tag;
  b.clips.assign(idx.begin(), idx.end());
  const auto n = static_cast<std::int64_t>(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const ClipRecord& clip = ds.clips.at(idx[k]);
    b.labels.push_back(clip.label);
    const std::int64_t size = clip.modalities.begin()->second.shape().h();
    const AugmentParams aug = augment && opt.augment ? draw_augment(size, opt.crop, opt.flip_prob, rng)
                                                     : centre_crop(size, opt.crop);
    for (const auto& m : opt.modalities) {
      auto it = clip.modalities.find(m);
      if (it == clip.modalities.end()) throw ConfigError("clip " + clip.clip_id + " has no modality " + m);
      const Tensor<float> view = apply_augment(it->second, aug);
      for (int r : opt.rates) {
        const Tensor<float> frames = sample_multirate(view, r);
        const std::string key = m + std::to_string(r);
        auto& dst = b.inputs[key];
        if (dst.empty()) {
          const auto& s = frames.shape();
          dst = Tensor<float>(Shape5{n, s.c(), s.t(), s.h(), s.w()});
        }
        std::copy(frames.data().begin(), frames.data().end(),
                  dst.ptr() + static_cast<std::int64_t>(k) * frames.numel());
      }
    }
  }
  return b;
}

/// Deterministic halving of the training split for bilevel search.
struct SplitPlan {
  std::vector<std::size_t> weight_half;
  std::vector<std::size_t> arch_half;

  static SplitPlan make(std::vector<std::size_t> train, std::uint64_t seed) {
    Rng rng(seed ^ 0x5151);
    rng.shuffle(train.begin(), train.end());
    SplitPlan p;
    const std::size_t half = train.size() / 2;
    p.weight_half.assign(train.begin(), train.begin() + static_cast<std::ptrdiff_t>(half));
    p.arch_half.assign(train.begin() + static_cast<std::ptrdiff_t>(half), train.end());
    return p;
  }
};

struct EpochMetrics {
  int epoch = 0;
  std::string split;
  double loss = 0.0;
  double accuracy = 0.0;
};

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline void write_metrics_header(std::ostream& os) { os << "epoch,split,loss,accuracy\n"; }
inline void write_metrics_row(std::ostream& os, const EpochMetrics& m) {
  os << m.epoch << ',' << m.split << ',' << format_double(m.loss) << ',' << format_double(m.accuracy) << '\n';
  os.flush();
}

inline std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> idx, std::size_t batch, Rng& rng,
                                                          bool shuffle) {
  if (shuffle) rng.shuffle(idx.begin(), idx.end());
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < idx.size(); i += batch) {
    out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(i),
                     idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), i + batch)));
  }
  return out;
}

struct StepResult {
  double loss = 0.0;
  int correct = 0;
};

inline int argmax_row(const Tensor<float>& logits, std::int64_t n) {
  const std::int64_t k = logits.shape().c();
  int best = 0;
  for (std::int64_t c = 1; c < k; ++c)
    if (logits[n * k + c] > logits[n * k + best]) best = static_cast<int>(c);
  return best;
}

/// Forward + backward on one batch; gradients of both partitions are
/// refreshed, only `partition`'s are consumed by the caller.
inline StepResult forward_backward(MultiRateNet<float>& net, const Batch& batch) {
  net.params().zero_grad();
  Tape<float> tape;
  Var<float> logits = net.forward(tape, batch.inputs, true);
  Var<float> loss = cross_entropy(logits, std::span<const int>(batch.labels));
  StepResult r;
  r.loss = loss.value()[0];
  if (!std::isfinite(r.loss)) throw NumericError("loss is not finite");
  for (std::size_t n = 0; n < batch.labels.size(); ++n)
    r.correct += argmax_row(logits.value(), static_cast<std::int64_t>(n)) == batch.labels[n];
  tape.backward(loss);
  return r;
}

/// Loss / accuracy / per-sample softmax of a network over a set of clips.
struct Scores {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<std::vector<double>> probs;
  std::vector<int> labels;
};

inline Scores score(const MultiRateNet<float>& net, const Dataset& ds, const std::vector<std::size_t>& idx,
                    const DataOptions& opt, std::size_t batch = 8) {
  if (idx.empty()) throw ConfigError("evaluation set is empty");
  Scores s;
  Rng unused(0);
  int correct = 0;
  for (std::size_t i = 0; i < idx.size(); i += batch) {
    const std::span<const std::size_t> part(idx.data() + i, std::min(batch, idx.size() - i));
    const Batch b = make_batch(ds, part, opt, false, unused, Provenance::Eval);
    Tape<float> tape(false);
    const Var<float> logits = net.forward(tape, b.inputs, false);
    s.loss += cross_entropy(logits, std::span<const int>(b.labels)).value()[0] * static_cast<double>(part.size());
    const auto& lv = logits.value();
    const std::int64_t k = lv.shape().c();
    for (std::size_t n = 0; n < part.size(); ++n) {
      std::vector<double> p(static_cast<std::size_t>(k));
      double m = -1e300, z = 0.0;
      for (std::int64_t c = 0; c < k; ++c) m = std::max(m, static_cast<double>(lv[static_cast<std::int64_t>(n) * k + c]));
      for (std::int64_t c = 0; c < k; ++c)
        z += p[static_cast<std::size_t>(c)] = std::exp(lv[static_cast<std::int64_t>(n) * k + c] - m);
      for (auto& v : p) v /= z;
      s.probs.push_back(std::move(p));
      s.labels.push_back(b.labels[n]);
      correct += argmax_row(lv, static_cast<std::int64_t>(n)) == b.labels[n];
    }
  }
  s.loss /= static_cast<double>(idx.size());
  s.accuracy = static_cast<double>(correct) / static_cast<double>(idx.size());
  return s;
}

// ---------------------------------------------------------------- search

/// Column labels of one architecture tensor: "in<i>" for edge-normalisation
/// weights, candidate op names otherwise.
inline std::vector<std::string> arch_labels(const MultiRateNet<float>& net, const std::string& name,
                                            const Parameter<float>* p) {
  std::vector<std::string> labels;
  if (name.rfind("beta_b/", 0) == 0) {
    for (std::int64_t i = 0; i < p->value.numel(); ++i) labels.push_back("in" + std::to_string(i));
  } else if (name.rfind("alpha_b/", 0) == 0) {
    labels = net.spec().cell_registry.names();
  } else {
    for (const auto& l : net.laterals()) {
      if (l.mixed && l.mixed->alpha() == p) {
        labels = l.registry.names();
        break;
      }
    }
  }
  for (auto i = static_cast<std::int64_t>(labels.size()); i < p->value.numel(); ++i) labels.push_back(std::to_string(i));
  return labels;
}

/// Writes "step,edge,op,eta" rows for every architecture tensor.
inline void write_alpha_trace(std::ostream& os, int step, const MultiRateNet<float>& net) {
  for (const auto& [name, p] : net.arch_tensors()) {
    std::vector<double> a(p->value.data().begin(), p->value.data().end());
    const auto eta = softmax_of(a);
    const auto labels = arch_labels(net, name, p);
    for (std::size_t i = 0; i < eta.size(); ++i) {
      os << step << ',' << name << ',' << labels[i] << ',' << format_double(eta[i]) << '\n';
    }
  }
}

/// Raw architecture values, "edge,op,alpha", printed with enough digits to
/// round-trip a float exactly.
inline void write_alpha_values(std::ostream& os, const MultiRateNet<float>& net, bool header = true) {
  if (header) os << "edge,op,alpha\n";
  for (const auto& [name, p] : net.arch_tensors()) {
    const auto labels = arch_labels(net, name, p);
    for (std::int64_t i = 0; i < p->value.numel(); ++i) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(p->value[i]));
      os << name << ',' << labels[static_cast<std::size_t>(i)] << ',' << buf << '\n';
    }
  }
}

/// First-order alternating optimisation: per step one architecture update on
/// an arch-half batch (after the freeze horizon), then one weight update on a
/// weight-half batch. Returns the per-epoch metrics; the caller derives.
inline std::vector<EpochMetrics> bilevel_search(MultiRateNet<float>& net, const Dataset& ds, const DataOptions& opt,
                                                const Schedule& sched, std::uint64_t seed, std::ostream* alpha_csv,
                                                std::ostream* metrics_csv,
                                                const std::function<void(const Batch&, Partition)>& on_step = {}) {
  sched.validate();
  const SplitPlan plan = SplitPlan::make(ds.indices(Split::Train), seed);
  if (plan.weight_half.empty() || plan.arch_half.empty()) throw ConfigError("training split too small to halve");
  Sgd<float> sgd(Partition::Weights, {sched.w_lr, sched.w_momentum, sched.w_wd});
  Adam<float> adam(Partition::Architecture, {sched.a_lr, sched.a_beta1, sched.a_beta2, 1e-8, sched.a_wd});
  Rng rng(seed ^ 0xA11CE);
  std::vector<EpochMetrics> metrics;
  if (alpha_csv) {
    *alpha_csv << "step,edge,op,eta\n";
    write_alpha_trace(*alpha_csv, 0, net);
  }
  if (metrics_csv) write_metrics_header(*metrics_csv);
  int step = 0;
  for (int epoch = 1; epoch <= sched.epochs; ++epoch) {
    if (epoch == sched.decay_epoch) sgd.set_lr(sgd.lr() * sched.decay_factor);
    const bool arch_live = epoch > sched.freeze_epochs;
    auto wb = make_batches(plan.weight_half, static_cast<std::size_t>(sched.batch), rng, true);
    auto ab = make_batches(plan.arch_half, static_cast<std::size_t>(sched.batch), rng, true);
    const std::size_t steps = std::min(wb.size(), ab.size());
    double loss_sum = 0.0;
    int correct = 0, seen = 0;
    for (std::size_t s = 0; s < steps; ++s) {
      ++step;
      if (arch_live) {
        const Batch vb = make_batch(ds, ab[s], opt, true, rng, Provenance::ArchHalf);
        if (vb.tag != Provenance::ArchHalf) throw std::logic_error("architecture step on a weight-half batch");
        if (on_step) on_step(vb, Partition::Architecture);
        try {
          forward_backward(net, vb);
        } catch (const NumericError& e) {
          throw DivergenceError("architecture step " + std::to_string(step) + " diverged (last stable step " +
                                std::to_string(step - 1) + "): " + e.what());
        }
        adam.step(net.params());
      }
      const Batch tb = make_batch(ds, wb[s], opt, true, rng, Provenance::WeightHalf);
      if (tb.tag != Provenance::WeightHalf) throw std::logic_error("weight step on an arch-half batch");
      if (on_step) on_step(tb, Partition::Weights);
      StepResult r;
      try {
        r = forward_backward(net, tb);
      } catch (const NumericError& e) {
        throw DivergenceError("weight step " + std::to_string(step) + " diverged (last stable step " +
                              std::to_string(step - 1) + "): " + e.what());
      }
      clip_grad_norm(net.params(), Partition::Weights, sched.grad_clip);
      sgd.step(net.params());
      loss_sum += r.loss * static_cast<double>(tb.labels.size());
      correct += r.correct;
      seen += static_cast<int>(tb.labels.size());
      if (alpha_csv && arch_live) write_alpha_trace(*alpha_csv, step, net);
    }
    metrics.push_back({epoch, "train", seen ? loss_sum / seen : 0.0, seen ? static_cast<double>(correct) / seen : 0.0});
    const Scores v = score(net, ds, plan.arch_half, opt, static_cast<std::size_t>(sched.batch));
    metrics.push_back({epoch, "val", v.loss, v.accuracy});
    if (metrics_csv) {
      write_metrics_row(*metrics_csv, metrics[metrics.size() - 2]);
      write_metrics_row(*metrics_csv, metrics.back());
    }
  }
  return metrics;
}

// ---------------------------------------------------------------- training

struct TrainOutcome {
  std::vector<EpochMetrics> metrics;
  std::vector<double> lr;  // per epoch
  double best_val_accuracy = -1.0;
  int best_epoch = 0;
};

/// Multiplies the learning rate by `factor` once the monitored metric has
/// not improved for `patience` consecutive epochs.
class PlateauDecay {
 public:
  PlateauDecay(double factor, int patience) : factor_(factor), patience_(patience) {}

  /// Returns true when the metric is a new best.
  bool update(double metric, double& lr) {
    if (metric > best_) {
      best_ = metric;
      stale_ = 0;
      return true;
    }
    if (++stale_ >= patience_) {
      lr *= factor_;
      stale_ = 0;
    }
    return false;
  }

 private:
  double factor_;
  int patience_;
  double best_ = -std::numeric_limits<double>::infinity();
  int stale_ = 0;
};

/// Snapshot of every parameter and buffer value.
inline std::vector<Tensor<float>> snapshot(const ParamStore<float>& store) {
  std::vector<Tensor<float>> out;
  for (const auto& p : store.all()) out.push_back(p.value);
  for (const auto& b : store.buffers()) out.push_back(b.value);
  return out;
}

inline void restore(ParamStore<float>& store, const std::vector<Tensor<float>>& snap) {
  std::size_t i = 0;
  for (auto& p : store.all()) p.value = snap.at(i++);
  for (auto& b : store.buffers()) b.value = snap.at(i++);
}

/// SGD training with plateau decay on validation accuracy; the parameters
/// of the best validation epoch are restored at the end.
inline TrainOutcome train_model(MultiRateNet<float>& net, const Dataset& ds, const DataOptions& opt,
                                const Schedule& sched, std::uint64_t seed, std::ostream* metrics_csv) {
  sched.validate();
  if (net.params().count_scalars(Partition::Architecture) != 0) {
    throw ConfigError("train_model expects a discrete network without architecture parameters");
  }
  const auto train = ds.indices(Split::Train);
  const auto val = ds.indices(Split::Val);
  if (train.empty() || val.empty()) throw ConfigError("training needs non-empty train and val splits");
  Sgd<float> sgd(Partition::Weights, {sched.w_lr, sched.w_momentum, sched.w_wd});
  Rng rng(seed ^ 0x7A11);
  TrainOutcome out;
  if (metrics_csv) write_metrics_header(*metrics_csv);
  std::vector<Tensor<float>> best = snapshot(net.params());
  PlateauDecay plateau(sched.plateau_factor, sched.plateau_patience);
  for (int epoch = 1; epoch <= sched.epochs; ++epoch) {
    out.lr.push_back(sgd.lr());
    double loss_sum = 0.0;
    int correct = 0, seen = 0;
    for (const auto& idx : make_batches(train, static_cast<std::size_t>(sched.batch), rng, true)) {
      const Batch b = make_batch(ds, idx, opt, true, rng, Provenance::Whole);
      StepResult r;
      try {
        r = forward_backward(net, b);
      } catch (const NumericError& e) {
        throw DivergenceError("epoch " + std::to_string(epoch) + " diverged (last stable epoch " +
                              std::to_string(epoch - 1) + "): " + e.what());
      }
      clip_grad_norm(net.params(), Partition::Weights, sched.grad_clip);
      sgd.step(net.params());
      loss_sum += r.loss * static_cast<double>(b.labels.size());
      correct += r.correct;
      seen += static_cast<int>(b.labels.size());
    }
    out.metrics.push_back({epoch, "train", loss_sum / seen, static_cast<double>(correct) / seen});
    const Scores v = score(net, ds, val, opt, static_cast<std::size_t>(sched.batch));
    out.metrics.push_back({epoch, "val", v.loss, v.accuracy});
    if (metrics_csv) {
      write_metrics_row(*metrics_csv, out.metrics[out.metrics.size() - 2]);
      write_metrics_row(*metrics_csv, out.metrics.back());
    }
    double lr = sgd.lr();
    if (plateau.update(v.accuracy, lr)) {
      out.best_val_accuracy = v.accuracy;
      out.best_epoch = epoch;
      best = snapshot(net.params());
    }
    sgd.set_lr(lr);
  }
  restore(net.params(), best);
  return out;
}

// ---------------------------------------------------------------- evaluation

enum class Fusion { None, MeanSoftmax };

inline Fusion parse_fusion(const std::string& s) {
  if (s == "none") return Fusion::None;
  if (s == "mean-softmax") return Fusion::MeanSoftmax;
  throw ConfigError("unknown fusion '" + s + "' (expected none | mean-softmax)");
}

struct EvalReport {
  double accuracy = 0.0;
  std::vector<double> per_class;
  std::vector<std::vector<std::int64_t>> confusion;  // [true][predicted]
  std::vector<int> predictions;
};

/// Builds the report from per-model class probabilities (mean over models
/// before argmax; ties to the lower class index).
inline EvalReport fuse_and_count(const std::vector<std::vector<std::vector<double>>>& probs,
                                 const std::vector<int>& labels, int num_classes) {
  if (labels.empty()) throw ConfigError("evaluation set is empty");
  EvalReport r;
  r.confusion.assign(static_cast<std::size_t>(num_classes), std::vector<std::int64_t>(static_cast<std::size_t>(num_classes), 0));
  for (std::size_t n = 0; n < labels.size(); ++n) {
    std::vector<double> mean(static_cast<std::size_t>(num_classes), 0.0);
    for (const auto& model : probs)
      for (int c = 0; c < num_classes; ++c) mean[static_cast<std::size_t>(c)] += model[n][static_cast<std::size_t>(c)] / probs.size();
    const int pred = static_cast<int>(std::max_element(mean.begin(), mean.end()) - mean.begin());
    r.predictions.push_back(pred);
    ++r.confusion[static_cast<std::size_t>(labels[n])][static_cast<std::size_t>(pred)];
  }
  std::int64_t diag = 0;
  for (int c = 0; c < num_classes; ++c) {
    std::int64_t row = 0;
    for (auto v : r.confusion[static_cast<std::size_t>(c)]) row += v;
    diag += r.confusion[static_cast<std::size_t>(c)][static_cast<std::size_t>(c)];
    r.per_class.push_back(row ? static_cast<double>(r.confusion[static_cast<std::size_t>(c)][static_cast<std::size_t>(c)]) / row : 0.0);
  }
  r.accuracy = static_cast<double>(diag) / static_cast<double>(labels.size());
  return r;
}

inline EvalReport evaluate(const std::vector<const MultiRateNet<float>*>& models, const std::vector<DataOptions>& opts,
                           const Dataset& ds, const std::vector<std::size_t>& idx, Fusion fusion) {
  if (models.empty() || models.size() != opts.size()) throw ConfigError("evaluate: one DataOptions per model");
  if (fusion == Fusion::None && models.size() != 1) throw ConfigError("fusion 'none' takes exactly one model");
  std::vector<std::vector<std::vector<double>>> probs;
  std::vector<int> labels;
  for (std::size_t m = 0; m < models.size(); ++m) {
    Scores s = score(*models[m], ds, idx, opts[m]);
    probs.push_back(std::move(s.probs));
    labels = s.labels;
  }
  return fuse_and_count(probs, labels, models.front()->spec().num_classes);
}

inline void write_confusion_csv(std::ostream& os, const EvalReport& r, const std::vector<std::string>& names) {
  os << "true\\pred";
  for (const auto& n : names) os << ',' << n;
  os << '\n';
  for (std::size_t i = 0; i < r.confusion.size(); ++i) {
    os << names.at(i);
    for (auto v : r.confusion[i]) os << ',' << v;
    os << '\n';
  }
}

// ---------------------------------------------------------------- checkpoints

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// "CDCK", u32 version 1, u32 count, then per tensor: u16 name length, name,
/// u8 kind (0 parameter, 1 buffer), 5 x u32 extents, f32 payload.
inline std::string encode_checkpoint(const ParamStore<float>& store) {
  std::string s = "CDCK";
  detail::put_u32(s, 1);
  detail::put_u32(s, static_cast<std::uint32_t>(store.all().size() + store.buffers().size()));
  auto put = [&](const std::string& name, std::uint8_t kind, const Tensor<float>& t) {
    detail::put_u16(s, static_cast<std::uint16_t>(name.size()));
    s += name;
    detail::put_u8(s, kind);
    for (std::size_t d = 0; d < 5; ++d) detail::put_u32(s, static_cast<std::uint32_t>(t.shape()[d]));
    for (float v : t.data()) {
      std::uint32_t u;
      std::memcpy(&u, &v, 4);
      detail::put_u32(s, u);
    }
  };
  for (const auto& p : store.all()) put(p.name, 0, p.value);
  for (const auto& b : store.buffers()) put(b.name, 1, b.value);
  return s;
}

inline void decode_checkpoint_into(const std::string& bytes, ParamStore<float>& store) {
  detail::Reader rd(bytes);
  if (rd.remaining() < 4 || bytes.compare(0, 4, "CDCK") != 0) throw FormatError(FormatError::Kind::BadMagic, "checkpoint: bad magic");
  rd.str(4, "magic");
  if (rd.uint(4, "version") != 1) throw FormatError(FormatError::Kind::UnknownVersion, "checkpoint: unknown version");
  const auto count = rd.uint(4, "count");
  if (count != store.all().size() + store.buffers().size()) {
    throw FormatError(FormatError::Kind::Corrupt, "checkpoint: tensor count does not match the model");
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = rd.str(rd.uint(2, "name length"), "name");
    const auto kind = rd.uint(1, "kind");
    std::array<std::int64_t, 5> ext{};
    for (auto& e : ext) e = static_cast<std::int64_t>(rd.uint(4, "extents"));
    Tensor<float>* dst = nullptr;
    if (kind == 0) {
      if (auto* p = store.find(name)) dst = &p->value;
    } else if (auto* b = store.find_buffer(name)) {
      dst = &b->value;
    }
    if (!dst) throw FormatError(FormatError::Kind::Corrupt, "checkpoint: unknown tensor " + name);
    const Shape5 shape{ext[0], ext[1], ext[2], ext[3], ext[4]};
    if (!(dst->shape() == shape)) throw FormatError(FormatError::Kind::Corrupt, "checkpoint: shape mismatch for " + name);
    for (auto& v : dst->data()) {
      const auto u = static_cast<std::uint32_t>(rd.uint(4, "payload"));
      std::memcpy(&v, &u, 4);
    }
  }
  if (rd.remaining() != 0) throw FormatError(FormatError::Kind::Corrupt, "checkpoint: trailing bytes");
}

// ---------------------------------------------------------------- model manifests

inline nlohmann::json netspec_to_json(const NetSpec& s) {
  return {{"modalities", s.modalities},
          {"rates", s.rates},
          {"channels", s.channels},
          {"in_channels", s.in_channels},
          {"cells", s.cells},
          {"num_classes", s.num_classes},
          {"seed", s.seed},
          {"cell_mode", s.cell_mode == CellMode::Search ? "search" : "discrete"},
          {"cell_registry", s.cell_registry.names()},
          {"shared_cells", s.shared_cells},
          {"partial_k", s.partial_k},
          {"edge_norm", s.edge_norm},
          {"laterals", to_string(s.laterals)},
          {"shared_levels", s.shared_levels},
          {"vanilla_laterals", s.vanilla_laterals},
          {"theta_t", s.theta_t},
          {"theta_tr", s.theta_tr}};
}

inline NetSpec netspec_from_json(const nlohmann::json& j) {
  NetSpec s;
  try {
    s.modalities = j.at("modalities").get<std::vector<std::string>>();
    s.rates = j.at("rates").get<std::vector<int>>();
    s.channels = j.at("channels").get<std::vector<std::int64_t>>();
    s.in_channels = j.at("in_channels").get<std::map<std::string, std::int64_t>>();
    s.cells = j.at("cells").get<int>();
    s.num_classes = j.at("num_classes").get<int>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.cell_mode = j.at("cell_mode").get<std::string>() == "search" ? CellMode::Search : CellMode::Discrete;
    s.cell_registry.ops.clear();
    for (const auto& n : j.at("cell_registry")) s.cell_registry.ops.push_back(OpSpec::parse(n.get<std::string>()));
    s.shared_cells = j.at("shared_cells").get<bool>();
    s.partial_k = j.at("partial_k").get<int>();
    s.edge_norm = j.at("edge_norm").get<bool>();
    const auto lat = j.at("laterals").get<std::string>();
    s.laterals = lat == "none" ? LateralMode::None : lat == "fixed" ? LateralMode::Fixed : lat == "mixed" ? LateralMode::Mixed : LateralMode::Discrete;
    s.shared_levels = j.at("shared_levels").get<bool>();
    s.vanilla_laterals = j.at("vanilla_laterals").get<bool>();
    s.theta_t = j.at("theta_t").get<double>();
    s.theta_tr = j.at("theta_tr").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::Corrupt, std::string("model manifest: ") + e.what());
  }
  return s;
}

/// A trained model on disk: model.json (spec, data options, genotype,
/// checkpoint hash) next to weights.cdck.
struct SavedModel {
  NetSpec spec;
  DataOptions data;
  std::optional<Genotype> genotype;
};

inline void save_model(const std::string& dir, const MultiRateNet<float>& net, const DataOptions& data,
                       const std::optional<Genotype>& genotype) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::string ck = encode_checkpoint(net.params());
  {
    std::ofstream out(fs::path(dir) / "weights.cdck", std::ios::binary);
    out.write(ck.data(), static_cast<std::streamsize>(ck.size()));
    if (!out) throw std::runtime_error("cannot write checkpoint in " + dir);
  }
  nlohmann::json j;
  j["spec"] = netspec_to_json(net.spec());
  j["data"] = {{"modalities", data.modalities}, {"rates", data.rates}, {"crop", data.crop}};
  if (genotype) j["genotype"] = to_json(*genotype);
  char hash[32];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(fnv1a(ck)));
  j["checkpoint"] = {{"file", "weights.cdck"}, {"fnv1a64", hash}};
  std::ofstream out(fs::path(dir) / "model.json");
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write model manifest in " + dir);
}

inline std::unique_ptr<MultiRateNet<float>> load_model(const std::string& dir, SavedModel* info = nullptr) {
  namespace fs = std::filesystem;
  std::ifstream in(fs::path(dir) / "model.json");
  if (!in) throw MissingArtifactError("model manifest not found in " + dir);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::Corrupt, std::string("model manifest: ") + e.what());
  }
  SavedModel m;
  m.spec = netspec_from_json(j.at("spec"));
  try {
    m.data.modalities = j.at("data").at("modalities").get<std::vector<std::string>>();
    m.data.rates = j.at("data").at("rates").get<std::vector<int>>();
    m.data.crop = j.at("data").at("crop").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::Corrupt, std::string("model manifest: ") + e.what());
  }
  m.data.augment = false;
  if (j.contains("genotype")) m.genotype = genotype_from_json(j.at("genotype"));
  std::ifstream ck(fs::path(dir) / j.at("checkpoint").at("file").get<std::string>(), std::ios::binary);
  if (!ck) throw MissingArtifactError("checkpoint not found in " + dir);
  std::stringstream ss;
  ss << ck.rdbuf();
  char hash[32];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(fnv1a(ss.str())));
  if (j.at("checkpoint").at("fnv1a64").get<std::string>() != hash) {
    throw FormatError(FormatError::Kind::Corrupt, "checkpoint hash does not match manifest in " + dir);
  }
  auto net = std::make_unique<MultiRateNet<float>>(m.spec, m.genotype ? &*m.genotype : nullptr);
  decode_checkpoint_into(ss.str(), net->params());
  if (info) *info = std::move(m);
  return net;
}

}  // namespace cdcnas
