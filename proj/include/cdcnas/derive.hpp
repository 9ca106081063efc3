#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "cdcnas/genotype.hpp"

namespace cdcnas {

inline std::vector<double> softmax_of(const std::vector<double>& a) {
  if (a.empty()) return {};
  const double m = *std::max_element(a.begin(), a.end());
  std::vector<double> e(a.size());
  double z = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) z += e[i] = std::exp(a[i] - m);
  for (auto& v : e) v /= z;
  return e;
}

/// Stage-1 rule. Per edge the strongest non-Zero op by eta = softmax(alpha);
/// per intermediate node the two incoming edges whose chosen op is strongest
/// (times the node's softmax(beta) edge weight when edge normalisation is on).
/// Ties resolve to the lower edge index, then to registry order.
inline CellGenotype derive_stage1(const std::vector<std::vector<double>>& alpha, const Registry& registry,
                                  const std::vector<std::vector<double>>* beta = nullptr) {
  if (alpha.size() != static_cast<std::size_t>(kCellEdges)) throw ShapeError("derive_stage1: need 14 edge alphas");
  CellGenotype cell;
  for (int node = kCellInputs; node < kCellInputs + kCellIntermediates; ++node) {
    const std::vector<double> edge_w =
        beta ? softmax_of((*beta)[static_cast<std::size_t>(node - kCellInputs)]) : std::vector<double>(node, 1.0);
    struct Candidate {
      int src;
      int op;
      double score;
    };
    std::vector<Candidate> cands;
    for (int src = 0; src < node; ++src) {
      const auto& a = alpha[static_cast<std::size_t>(cell_edge_index(src, node))];
      if (a.size() != registry.size()) throw ShapeError("derive_stage1: alpha width differs from registry size");
      const auto eta = softmax_of(a);
      int best = -1;
      for (std::size_t o = 0; o < eta.size(); ++o) {
        if (registry.ops[o].is_zero()) continue;
        if (best < 0 || eta[o] > eta[static_cast<std::size_t>(best)]) best = static_cast<int>(o);
      }
      cands.push_back({src, best, eta[static_cast<std::size_t>(best)] * edge_w[static_cast<std::size_t>(src)]});
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Candidate& x, const Candidate& y) { return x.score > y.score; });
    CellNode n;
    n.node = node;
    for (int k = 0; k < 2; ++k) n.inputs.push_back({cands[k].src, registry.ops[cands[k].op].name()});
    std::sort(n.inputs.begin(), n.inputs.end(), [](const NodeInput& x, const NodeInput& y) { return x.src < y.src; });
    cell.nodes.push_back(std::move(n));
  }
  return cell;
}

struct LateralSlot {
  int level = 0;
  BranchId src;
  BranchId dst;
  Registry registry;
  std::vector<double> alpha;
};

/// Stage-2 rule: the single strongest op per lateral edge, Zero included.
inline std::vector<LateralChoice> derive_stage2(const std::vector<LateralSlot>& slots) {
  std::vector<LateralChoice> out;
  for (const auto& s : slots) {
    if (s.alpha.size() != s.registry.size()) throw ShapeError("derive_stage2: alpha width differs from registry size");
    const auto best = std::max_element(s.alpha.begin(), s.alpha.end()) - s.alpha.begin();
    out.push_back({s.level, s.src, s.dst, s.registry.ops[static_cast<std::size_t>(best)].name()});
  }
  return out;
}

}  // namespace cdcnas
