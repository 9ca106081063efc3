#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cdcnas/derive.hpp"
#include "cdcnas/layers.hpp"

namespace cdcnas {

inline constexpr int kLateralLevels = 3;

enum class CellMode { Search, Discrete };
enum class LateralMode { None, Fixed, Mixed, Discrete };

inline const char* to_string(LateralMode m) {
  switch (m) {
    case LateralMode::None: return "none";
    case LateralMode::Fixed: return "fixed";
    case LateralMode::Mixed: return "mixed";
    case LateralMode::Discrete: return "discrete";
  }
  return "?";
}

struct NetSpec {
  std::vector<std::string> modalities{"rgb", "depth"};
  std::vector<int> rates{8, 16, 32};
  std::vector<std::int64_t> channels{24, 16, 8};  // per rate, before any pooling
  std::map<std::string, std::int64_t> in_channels{{"rgb", 3}, {"depth", 1}};
  int cells = 8;
  int num_classes = 6;
  std::uint64_t seed = 0;

  CellMode cell_mode = CellMode::Search;
  Registry cell_registry = Registry::stage1();
  bool shared_cells = false;
  int partial_k = 2;
  bool edge_norm = true;

  LateralMode laterals = LateralMode::Fixed;
  bool shared_levels = false;
  bool vanilla_laterals = false;
  double theta_t = 0.6;
  double theta_tr = 0.3;

  std::vector<BranchId> branches() const {
    std::vector<BranchId> out;
    for (const auto& m : modalities)
      for (int r : rates) out.push_back({m, r});
    return out;
  }

  Registry lateral_registry(int kernel_t) const {
    return vanilla_laterals ? Registry::stage2_vanilla(kernel_t) : Registry::stage2(kernel_t, theta_t, theta_tr);
  }
};

/// Cells after which a (1,2,2) max-pool halves H, W and doubles the width:
/// ceil(k * n / 3) - 1 for k = 1, 2.
inline std::vector<int> pool_cells(int cells) {
  return {(cells + 2) / 3 - 1, (2 * cells + 2) / 3 - 1};
}

/// Cells at whose output the lateral connections of levels 0, 1, 2 are taken.
inline std::vector<int> level_cells(int cells) {
  const auto p = pool_cells(cells);
  return {p[0], p[1], cells - 1};
}

/// Softmax-relaxed edge: sum_o eta_o * o(x), optionally through a 1/K
/// channel slice (remaining channels bypass, then channel shuffle).
template <typename T>
class MixedOp {
 public:
  MixedOp(ParamStore<T>& store, const std::string& prefix, const Registry& registry, std::int64_t cin,
          std::int64_t cout, std::array<int, 3> stride, int partial_k, Parameter<T>* alpha, Rng& rng)
      : alpha_(alpha), partial_k_(partial_k) {
    if (partial_k_ < 1) throw ConfigError("partial channel factor must be >= 1");
    if (partial_k_ > 1 && (cin != cout || cin % partial_k_ != 0 || stride != std::array<int, 3>{1, 1, 1})) {
      throw ShapeError("partial channels need cin == cout divisible by K and unit stride");
    }
    if (alpha_->value.numel() != static_cast<std::int64_t>(registry.size())) {
      throw ShapeError("alpha width differs from registry size at " + prefix);
    }
    const std::int64_t ci = cin / partial_k_, co = cout / partial_k_;
    std::optional<Shape5> out;
    const Shape5 probe{1, ci, 12, 12, 12};
    for (const auto& spec : registry.ops) {
      ops_.push_back(make_op<T>(store, prefix, spec, ci, co, stride, rng));
      if (spec.is_zero()) continue;
      const Shape5 s = spec.kind == OpKind::Identity
                           ? probe
                           : conv3d_output_shape(probe, {co, ci, spec.kernel[0], spec.kernel[1], spec.kernel[2]},
                                                 spec.config(stride).conv);
      if (out && !(*out == s)) throw ShapeError("candidate " + spec.name() + " disagrees on output shape at " + prefix);
      out = s;
    }
  }

  Var<T> forward(Tape<T>& tape, Var<T> x, Var<T> eta, bool training) const {
    const std::int64_t c = x.shape().c();
    Var<T> in = partial_k_ > 1 ? slice_channels(x, 0, c / partial_k_) : x;
    std::vector<Var<T>> outs;
    for (const auto& op : ops_) outs.push_back(op ? op->forward(tape, in, training) : Var<T>{});
    Var<T> y = weighted_sum<T>(outs, eta);
    if (partial_k_ > 1) y = shuffle_channels(concat_channels<T>({y, slice_channels(x, c / partial_k_, c)}), partial_k_);
    return y;
  }

  Parameter<T>* alpha() const { return alpha_; }

 private:
  std::vector<std::unique_ptr<EdgeOp<T>>> ops_;
  Parameter<T>* alpha_;
  int partial_k_;
};

/// Architecture parameters of one cell topology: alpha per edge, beta
/// (edge normalisation) per intermediate node.
template <typename T>
struct CellArch {
  std::vector<Parameter<T>*> alpha;
  std::vector<Parameter<T>*> beta;
};

/// 2 inputs, 4 intermediate nodes, output = channel concat of intermediates.
template <typename T>
class Cell {
 public:
  /// Search cell.
  Cell(ParamStore<T>& store, const std::string& prefix, std::int64_t c_pp, std::int64_t c_p, std::int64_t c,
       const Registry& registry, const CellArch<T>& arch, int partial_k, bool edge_norm, Rng& rng)
      : arch_(arch), edge_norm_(edge_norm) {
    init_preprocess(store, prefix, c_pp, c_p, c, rng);
    for (int node = kCellInputs; node < kCellInputs + kCellIntermediates; ++node) {
      for (int src = 0; src < node; ++src) {
        const std::string ep = prefix + "/e" + std::to_string(src) + "_" + std::to_string(node);
        mixed_.push_back(std::make_unique<MixedOp<T>>(store, ep, registry, c, c, std::array<int, 3>{1, 1, 1}, partial_k,
                                                      arch.alpha[static_cast<std::size_t>(cell_edge_index(src, node))],
                                                      rng));
      }
    }
  }

  /// Discrete cell from a derived genotype.
  Cell(ParamStore<T>& store, const std::string& prefix, std::int64_t c_pp, std::int64_t c_p, std::int64_t c,
       const CellGenotype& genotype, Rng& rng)
      : genotype_(genotype) {
    validate_cell(genotype, prefix);
    init_preprocess(store, prefix, c_pp, c_p, c, rng);
    for (const auto& n : genotype.nodes) {
      for (const auto& in : n.inputs) {
        const std::string ep = prefix + "/e" + std::to_string(in.src) + "_" + std::to_string(n.node);
        discrete_.push_back(make_op<T>(store, ep, OpSpec::parse(in.op), c, c, {1, 1, 1}, rng));
      }
    }
  }

  std::int64_t out_channels() const { return kCellIntermediates * c_; }

  Var<T> forward(Tape<T>& tape, Var<T> s0, Var<T> s1, bool training) const {
    std::vector<Var<T>> states{pre0_.forward(tape, s0, training), pre1_.forward(tape, s1, training)};
    if (genotype_) {
      std::size_t k = 0;
      for (const auto& n : genotype_->nodes) {
        Var<T> a = discrete_[k]->forward(tape, states[static_cast<std::size_t>(n.inputs[0].src)], training);
        Var<T> b = discrete_[k + 1]->forward(tape, states[static_cast<std::size_t>(n.inputs[1].src)], training);
        k += 2;
        states.push_back(add(a, b));
      }
    } else {
      std::size_t e = 0;
      for (int node = kCellInputs; node < kCellInputs + kCellIntermediates; ++node) {
        std::vector<Var<T>> ins;
        for (int src = 0; src < node; ++src, ++e) {
          Var<T> eta = softmax(tape.param(*mixed_[e]->alpha()));
          ins.push_back(mixed_[e]->forward(tape, states[static_cast<std::size_t>(src)], eta, training));
        }
        const Var<T> w = edge_norm_ ? softmax(tape.param(*arch_.beta[static_cast<std::size_t>(node - kCellInputs)]))
                                    : tape.constant(Tensor<T>::full({1, node, 1, 1, 1}, T{1}));
        states.push_back(weighted_sum<T>(ins, w));
      }
    }
    return concat_channels<T>(std::span<const Var<T>>(states).subspan(kCellInputs));
  }

 private:
  void init_preprocess(ParamStore<T>& store, const std::string& prefix, std::int64_t c_pp, std::int64_t c_p,
                       std::int64_t c, Rng& rng) {
    c_ = c;
    pre0_ = ConvBn<T>(store, prefix + "/pre0", c_pp, c, CdcConfig::make(CdcVariant::Vanilla, 0, {1, 1, 1}), rng);
    pre1_ = ConvBn<T>(store, prefix + "/pre1", c_p, c, CdcConfig::make(CdcVariant::Vanilla, 0, {1, 1, 1}), rng);
  }

  std::int64_t c_ = 0;
  ConvBn<T> pre0_, pre1_;
  CellArch<T> arch_;
  bool edge_norm_ = false;
  std::vector<std::unique_ptr<MixedOp<T>>> mixed_;
  std::optional<CellGenotype> genotype_;
  std::vector<std::unique_ptr<EdgeOp<T>>> discrete_;
};

/// Inputs of one forward pass: branch id string ("rgb8") -> (N, C, T, H, W).
template <typename T>
using BranchInputs = std::map<std::string, Tensor<T>>;

/// Multi-rate (and optionally multi-modal) network: per branch a stem and a
/// stack of cells with two spatial max-pools; lateral connections at the end
/// of each of the three stages feed high-rate branches into low-rate ones
/// (concatenated onto the target); head = per-branch GAP -> concat -> linear.
template <typename T>
class MultiRateNet {
 public:
  struct Lateral {
    int level = 0;
    BranchId src;
    BranchId dst;
    Registry registry;
    std::unique_ptr<MixedOp<T>> mixed;
    std::unique_ptr<EdgeOp<T>> op;
  };

  MultiRateNet(const NetSpec& spec, const Genotype* genotype = nullptr) : spec_(spec) {
    if (spec.cells < 3) throw ConfigError("a branch needs at least 3 cells (one per stage)");
    if (spec.rates.size() != spec.channels.size()) throw ConfigError("one channel width per rate is required");
    if (spec.cell_mode == CellMode::Discrete || spec.laterals == LateralMode::Discrete) {
      if (!genotype) throw ConfigError("discrete network needs a genotype");
      validate(*genotype);
      genotype_ = *genotype;
    }
    Rng rng(spec.seed);
    branches_ = spec.branches();
    const auto pools = pool_cells(spec.cells);
    const auto levels = level_cells(spec.cells);
    std::vector<std::int64_t> c_pp(branches_.size()), c_p(branches_.size()), width(branches_.size());

    for (std::size_t b = 0; b < branches_.size(); ++b) {
      const auto& id = branches_[b];
      auto it = spec.in_channels.find(id.modality);
      if (it == spec.in_channels.end()) throw ConfigError("no input channel count for modality " + id.modality);
      width[b] = spec.channels[b % spec.rates.size()];
      stems_.push_back(ConvBn<T>(store_, id.str() + "/stem", it->second, width[b],
                                 CdcConfig::make(CdcVariant::Vanilla, 0, {3, 3, 3}), rng, false));
      c_pp[b] = c_p[b] = width[b];
    }
    if (spec.cell_mode == CellMode::Search) init_arch();

    cells_.resize(branches_.size());
    for (int k = 0; k < spec.cells; ++k) {
      std::vector<std::int64_t> out(branches_.size());
      for (std::size_t b = 0; b < branches_.size(); ++b) {
        const auto& id = branches_[b];
        const std::string prefix = id.str() + "/cell" + std::to_string(k);
        if (spec.cell_mode == CellMode::Search) {
          cells_[b].push_back(std::make_unique<Cell<T>>(store_, prefix, c_pp[b], c_p[b], width[b], spec.cell_registry,
                                                        arch_[arch_index(b)], spec.partial_k, spec.edge_norm, rng));
        } else {
          cells_[b].push_back(std::make_unique<Cell<T>>(store_, prefix, c_pp[b], c_p[b], width[b],
                                                        genotype_->cell(id.modality, id.frames), rng));
        }
        out[b] = cells_[b].back()->out_channels();
      }
      std::vector<std::int64_t> merged = out;
      for (int level = 0; level < kLateralLevels; ++level) {
        if (levels[static_cast<std::size_t>(level)] != k) continue;
        for (auto& lat : build_laterals(level, out, width, rng)) {
          merged[index_of(lat.dst)] += width[index_of(lat.src)];
          laterals_.push_back(std::move(lat));
        }
      }
      const bool pooled = k == pools[0] || k == pools[1];
      for (std::size_t b = 0; b < branches_.size(); ++b) {
        c_pp[b] = pooled ? merged[b] : c_p[b];
        c_p[b] = merged[b];
        if (pooled) width[b] *= 2;
      }
    }
    std::int64_t features = 0;
    for (auto c : c_p) features += c;
    head_w_ = &store_.add("head/w", kaiming_normal<T>({spec.num_classes, features, 1, 1, 1}, rng), Partition::Weights);
    head_b_ = &store_.add("head/b", Tensor<T>({1, spec.num_classes, 1, 1, 1}), Partition::Weights);
  }

  MultiRateNet(const MultiRateNet&) = delete;
  MultiRateNet& operator=(const MultiRateNet&) = delete;

  const NetSpec& spec() const { return spec_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  const std::vector<BranchId>& branches() const { return branches_; }
  const std::vector<Lateral>& laterals() const { return laterals_; }

  /// Architecture handles of branch b's cells (shared mode: one object for
  /// every branch of a modality).
  const CellArch<T>& cell_arch(std::size_t b) const { return arch_.at(arch_index(b)); }

  Var<T> forward(Tape<T>& tape, const BranchInputs<T>& inputs, bool training) const {
    const auto pools = pool_cells(spec_.cells);
    const auto levels = level_cells(spec_.cells);
    std::vector<Var<T>> s0(branches_.size()), s1(branches_.size());
    for (std::size_t b = 0; b < branches_.size(); ++b) {
      const auto& id = branches_[b];
      auto it = inputs.find(id.str());
      if (it == inputs.end()) throw ShapeError("missing input for branch " + id.str());
      if (it->second.shape().t() != id.frames) {
        throw ShapeError("branch " + id.str() + " expects " + std::to_string(id.frames) + " frames, got " +
                         it->second.shape().str());
      }
      s0[b] = s1[b] = stems_[b].forward(tape, tape.constant(it->second), training);
    }
    std::size_t next_lateral = 0;
    for (int k = 0; k < spec_.cells; ++k) {
      std::vector<Var<T>> out(branches_.size());
      for (std::size_t b = 0; b < branches_.size(); ++b) out[b] = cells_[b][k]->forward(tape, s0[b], s1[b], training);
      std::vector<std::vector<Var<T>>> parts(branches_.size());
      for (std::size_t b = 0; b < branches_.size(); ++b) parts[b].push_back(out[b]);
      for (int level = 0; level < kLateralLevels; ++level) {
        if (levels[static_cast<std::size_t>(level)] != k) continue;
        for (; next_lateral < laterals_.size() && laterals_[next_lateral].level == level; ++next_lateral) {
          const auto& lat = laterals_[next_lateral];
          const Var<T> x = out[index_of(lat.src)];
          Var<T> y = lat.mixed ? lat.mixed->forward(tape, x, softmax(tape.param(*lat.mixed->alpha())), training)
                               : lat.op->forward(tape, x, training);
          parts[index_of(lat.dst)].push_back(y);
        }
      }
      const bool pooled = k == pools[0] || k == pools[1];
      for (std::size_t b = 0; b < branches_.size(); ++b) {
        Var<T> merged = parts[b].size() == 1 ? parts[b][0] : concat_channels<T>(parts[b]);
        if (pooled) {
          merged = maxpool3d(merged, {1, 2, 2}, {1, 2, 2});
          s0[b] = merged;
        } else {
          s0[b] = s1[b];
        }
        s1[b] = merged;
      }
    }
    std::vector<Var<T>> feats;
    for (const auto& s : s1) feats.push_back(global_avg_pool(s));
    const Var<T> f = feats.size() == 1 ? feats[0] : concat_channels<T>(feats);
    return linear(f, tape.param(*head_w_), tape.param(*head_b_));
  }

  /// Per-branch raw alphas (14 x |O|) and betas (4 x node) of the cells.
  std::vector<std::vector<double>> cell_alpha(std::size_t b) const {
    std::vector<std::vector<double>> out;
    for (auto* p : cell_arch(b).alpha) out.emplace_back(p->value.data().begin(), p->value.data().end());
    return out;
  }
  std::vector<std::vector<double>> cell_beta(std::size_t b) const {
    std::vector<std::vector<double>> out;
    for (auto* p : cell_arch(b).beta) out.emplace_back(p->value.data().begin(), p->value.data().end());
    return out;
  }

  /// Stage-1 genotype of the cells (search networks only).
  Genotype derive_cells() const {
    if (spec_.cell_mode != CellMode::Search) throw ConfigError("derive_cells on a discrete network");
    Genotype g;
    for (std::size_t b = 0; b < branches_.size(); ++b) {
      const auto beta = cell_beta(b);
      g.stage1[branches_[b].modality][branches_[b].frames] =
          derive_stage1(cell_alpha(b), spec_.cell_registry, spec_.edge_norm ? &beta : nullptr);
    }
    return g;
  }

  std::vector<LateralSlot> lateral_slots() const {
    std::vector<LateralSlot> out;
    for (const auto& l : laterals_) {
      if (!l.mixed) continue;
      const auto& a = l.mixed->alpha()->value;
      out.push_back({l.level, l.src, l.dst, l.registry, std::vector<double>(a.data().begin(), a.data().end())});
    }
    return out;
  }

  /// Every architecture tensor with a stable label, for traces.
  std::vector<std::pair<std::string, const Parameter<T>*>> arch_tensors() const {
    std::vector<std::pair<std::string, const Parameter<T>*>> out;
    for (const auto& p : store_.all())
      if (p.partition == Partition::Architecture) out.emplace_back(p.name, &p);
    return out;
  }

  std::size_t index_of(const BranchId& id) const {
    for (std::size_t b = 0; b < branches_.size(); ++b)
      if (branches_[b] == id) return b;
    throw ConfigError("unknown branch " + id.str());
  }

 private:
  std::size_t arch_index(std::size_t b) const {
    return spec_.shared_cells ? b / spec_.rates.size() : b;
  }

  void init_arch() {
    const std::size_t n = spec_.shared_cells ? spec_.modalities.size() : branches_.size();
    const auto width = static_cast<std::int64_t>(spec_.cell_registry.size());
    for (std::size_t a = 0; a < n; ++a) {
      const std::string tag = spec_.shared_cells ? spec_.modalities[a] + "/shared" : branches_[a].str();
      CellArch<T> arch;
      for (int node = kCellInputs; node < kCellInputs + kCellIntermediates; ++node) {
        for (int src = 0; src < node; ++src) {
          arch.alpha.push_back(&store_.add("alpha_b/" + tag + "/e" + std::to_string(src) + "_" + std::to_string(node),
                                           Tensor<T>({1, width, 1, 1, 1}), Partition::Architecture));
        }
        if (spec_.edge_norm) {
          arch.beta.push_back(&store_.add("beta_b/" + tag + "/n" + std::to_string(node), Tensor<T>({1, node, 1, 1, 1}),
                                          Partition::Architecture));
        }
      }
      arch_.push_back(std::move(arch));
    }
  }

  std::vector<Lateral> build_laterals(int level, const std::vector<std::int64_t>& out,
                                      const std::vector<std::int64_t>& width, Rng& rng) {
    std::vector<Lateral> result;
    if (spec_.laterals == LateralMode::None) return result;
    if (spec_.laterals == LateralMode::Discrete) {
      for (const auto& l : genotype_->active_laterals()) {
        if (l.level != level) continue;
        const std::size_t s = index_of(l.src);
        index_of(l.dst);
        const EdgeClass ec = EdgeClass::of(l.src.frames, l.dst.frames);
        Lateral lat{level, l.src, l.dst, {}, nullptr, nullptr};
        lat.op = make_op<T>(store_, lateral_prefix(level, l.src, l.dst), OpSpec::parse(l.op), out[s], width[s],
                            {ec.stride_t, 1, 1}, rng);
        result.push_back(std::move(lat));
      }
      return result;
    }
    for (const auto& [src, dst] : lateral_edges(spec_.modalities, spec_.rates)) {
      const std::size_t s = index_of(src);
      const EdgeClass ec = EdgeClass::of(src.frames, dst.frames);
      const std::string prefix = lateral_prefix(level, src, dst);
      Lateral lat{level, src, dst, spec_.lateral_registry(ec.kernel_t), nullptr, nullptr};
      if (spec_.laterals == LateralMode::Fixed) {
        if (src.modality != dst.modality || src.frames == dst.frames) continue;
        lat.op = make_op<T>(store_, prefix, OpSpec::conv({ec.kernel_t, 1, 1}), out[s], width[s], {ec.stride_t, 1, 1},
                            rng);
      } else {
        const std::string edge = src.str() + "->" + dst.str();
        const std::string aname = spec_.shared_levels ? "alpha_c/shared/" + edge : "alpha_c/l" + std::to_string(level) + "/" + edge;
        Parameter<T>* alpha = store_.find(aname);
        if (!alpha) {
          alpha = &store_.add(aname, Tensor<T>({1, static_cast<std::int64_t>(lat.registry.size()), 1, 1, 1}),
                              Partition::Architecture);
        }
        lat.mixed = std::make_unique<MixedOp<T>>(store_, prefix, lat.registry, out[s], width[s],
                                                 std::array<int, 3>{ec.stride_t, 1, 1}, 1, alpha, rng);
      }
      result.push_back(std::move(lat));
    }
    return result;
  }

  static std::string lateral_prefix(int level, const BranchId& src, const BranchId& dst) {
    return "lateral/l" + std::to_string(level) + "/" + src.str() + "->" + dst.str();
  }

  NetSpec spec_;
  ParamStore<T> store_;
  std::optional<Genotype> genotype_;
  std::vector<BranchId> branches_;
  std::vector<ConvBn<T>> stems_;
  std::vector<std::vector<std::unique_ptr<Cell<T>>>> cells_;
  std::vector<CellArch<T>> arch_;
  std::vector<Lateral> laterals_;
  Parameter<T>* head_w_ = nullptr;
  Parameter<T>* head_b_ = nullptr;
};

/// Copies every parameter and buffer of `src` whose name and shape match one
/// in `dst`. Returns the number of tensors copied.
template <typename T>
std::size_t copy_matching(ParamStore<T>& dst, const ParamStore<T>& src) {
  std::size_t n = 0;
  for (const auto& p : src.all()) {
    if (auto* d = dst.find(p.name); d && d->value.shape() == p.value.shape()) {
      d->value = p.value;
      ++n;
    }
  }
  for (const auto& b : src.buffers()) {
    if (auto* d = dst.find_buffer(b.name); d && d->value.shape() == b.value.shape()) {
      d->value = b.value;
      ++n;
    }
  }
  return n;
}

}  // namespace cdcnas
