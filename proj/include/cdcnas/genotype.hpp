#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "cdcnas/registry.hpp"

namespace cdcnas {

inline constexpr int kGenotypeSchemaVersion = 1;
inline constexpr int kCellInputs = 2;
inline constexpr int kCellIntermediates = 4;
inline constexpr int kCellEdges = 14;  // 2 + 3 + 4 + 5

/// Edge index of (src -> node) inside a cell, nodes numbered 0..5 with 0,1
/// the cell inputs. Edges are ordered by destination, then source.
inline int cell_edge_index(int src, int node) {
  if (node < kCellInputs || node >= kCellInputs + kCellIntermediates || src < 0 || src >= node) {
    throw ShapeError("no cell edge " + std::to_string(src) + " -> " + std::to_string(node));
  }
  int offset = 0;
  for (int j = kCellInputs; j < node; ++j) offset += j;
  return offset + src;
}

/// Branch identifier, e.g. {"rgb", 16} <-> "rgb16".
struct BranchId {
  std::string modality;
  int frames = 0;

  std::string str() const { return modality + std::to_string(frames); }
  static BranchId parse(const std::string& s) {
    const auto pos = s.find_first_of("0123456789");
    if (pos == 0 || pos == std::string::npos) throw ConfigError("bad branch id '" + s + "'");
    return {s.substr(0, pos), std::stoi(s.substr(pos))};
  }
  auto operator<=>(const BranchId&) const = default;
};

struct NodeInput {
  int src = 0;
  std::string op;
  bool operator==(const NodeInput&) const = default;
};

struct CellNode {
  int node = kCellInputs;
  std::vector<NodeInput> inputs;
  bool operator==(const CellNode&) const = default;
};

struct CellGenotype {
  std::vector<CellNode> nodes;
  bool operator==(const CellGenotype&) const = default;
};

struct LateralChoice {
  int level = 0;
  BranchId src;
  BranchId dst;
  std::string op;
  bool operator==(const LateralChoice&) const = default;
};

/// A derived architecture: one cell per (modality, frames) branch and the
/// chosen operation of every lateral edge (Zero = no connection).
struct Genotype {
  int schema_version = kGenotypeSchemaVersion;
  std::map<std::string, std::map<int, CellGenotype>> stage1;
  std::vector<LateralChoice> stage2;
  std::map<std::string, std::string> metadata;

  bool operator==(const Genotype& o) const {
    return schema_version == o.schema_version && stage1 == o.stage1 && stage2 == o.stage2 && metadata == o.metadata;
  }

  const CellGenotype& cell(const std::string& modality, int frames) const {
    auto m = stage1.find(modality);
    if (m == stage1.end()) throw ConfigError("genotype has no cells for modality '" + modality + "'");
    auto c = m->second.find(frames);
    if (c == m->second.end()) {
      throw ConfigError("genotype has no cell for branch " + modality + std::to_string(frames));
    }
    return c->second;
  }

  /// Non-Zero lateral edges only.
  std::vector<LateralChoice> active_laterals() const {
    std::vector<LateralChoice> out;
    for (const auto& l : stage2)
      if (l.op != "Zero") out.push_back(l);
    return out;
  }
};

/// Every invariant a derived cell must satisfy; throws ConfigError naming
/// the first violation.
inline void validate_cell(const CellGenotype& cell, const std::string& where) {
  if (static_cast<int>(cell.nodes.size()) != kCellIntermediates) {
    throw ConfigError(where + ": expected " + std::to_string(kCellIntermediates) + " intermediate nodes");
  }
  for (int k = 0; k < kCellIntermediates; ++k) {
    const auto& n = cell.nodes[static_cast<std::size_t>(k)];
    if (n.node != kCellInputs + k) throw ConfigError(where + ": nodes out of order");
    if (n.inputs.size() != 2) throw ConfigError(where + ": node " + std::to_string(n.node) + " needs 2 inputs");
    if (n.inputs[0].src == n.inputs[1].src) throw ConfigError(where + ": duplicate input edge");
    for (const auto& in : n.inputs) {
      if (in.src < 0 || in.src >= n.node) throw ConfigError(where + ": input from a later node");
      const OpSpec op = OpSpec::parse(in.op);
      if (op.is_zero()) throw ConfigError(where + ": Zero op on a kept edge");
    }
  }
}

/// Legal lateral edge set between branches: src != dst, frames(src) >= frames(dst).
inline std::vector<std::pair<BranchId, BranchId>> lateral_edges(const std::vector<std::string>& modalities,
                                                                 const std::vector<int>& rates) {
  std::vector<BranchId> nodes;
  for (const auto& m : modalities)
    for (int r : rates) nodes.push_back({m, r});
  std::vector<std::pair<BranchId, BranchId>> out;
  for (const auto& dst : nodes)
    for (const auto& src : nodes)
      if (!(src == dst) && src.frames >= dst.frames) out.emplace_back(src, dst);
  return out;
}

inline void validate_lateral(const LateralChoice& l, int levels) {
  const std::string where = "lateral " + l.src.str() + "->" + l.dst.str();
  if (l.level < 0 || l.level >= levels) throw ConfigError(where + ": level out of range");
  if (l.src == l.dst || l.src.frames < l.dst.frames) throw ConfigError(where + ": illegal low-to-high rate edge");
  const EdgeClass ec = EdgeClass::of(l.src.frames, l.dst.frames);
  const OpSpec op = OpSpec::parse(l.op);
  if (op.kind == OpKind::Identity) throw ConfigError(where + ": Identity is not a lateral op");
  if (!op.is_zero() && op.kernel != std::array<int, 3>{ec.kernel_t, 1, 1}) {
    throw ConfigError(where + ": op " + l.op + " does not fit the edge class kernel");
  }
}

inline void validate(const Genotype& g, int levels = 3) {
  if (g.schema_version != kGenotypeSchemaVersion) {
    throw FormatError(FormatError::Kind::UnknownVersion,
                      "genotype schema_version " + std::to_string(g.schema_version) + " is not supported");
  }
  for (const auto& [mod, cells] : g.stage1)
    for (const auto& [frames, cell] : cells) validate_cell(cell, "cell " + mod + std::to_string(frames));
  std::set<std::tuple<int, BranchId, BranchId>> seen;
  for (const auto& l : g.stage2) {
    validate_lateral(l, levels);
    if (!seen.emplace(l.level, l.src, l.dst).second) throw ConfigError("duplicate lateral entry");
  }
}

inline nlohmann::json to_json(const Genotype& g) {
  using nlohmann::json;
  json j;
  j["schema_version"] = g.schema_version;
  json s1 = json::object();
  for (const auto& [mod, cells] : g.stage1) {
    json list = json::array();
    for (const auto& [frames, cell] : cells) {
      for (const auto& n : cell.nodes) {
        json inputs = json::array();
        for (const auto& in : n.inputs) inputs.push_back({{"op", in.op}, {"src", in.src}});
        list.push_back({{"frames", frames}, {"inputs", inputs}, {"node", n.node}});
      }
    }
    s1[mod] = list;
  }
  j["stage1"] = s1;
  json s2 = json::array();
  for (const auto& l : g.stage2) {
    s2.push_back({{"dst", l.dst.str()}, {"level", l.level}, {"op", l.op}, {"src", l.src.str()}});
  }
  j["stage2"] = s2;
  j["metadata"] = g.metadata;
  return j;
}

inline Genotype genotype_from_json(const nlohmann::json& j) {
  Genotype g;
  try {
    g.schema_version = j.at("schema_version").get<int>();
    if (g.schema_version != kGenotypeSchemaVersion) {
      throw FormatError(FormatError::Kind::UnknownVersion,
                        "genotype schema_version " + std::to_string(g.schema_version) + " is not supported");
    }
    for (const auto& [mod, list] : j.at("stage1").items()) {
      for (const auto& e : list) {
        CellNode n;
        n.node = e.at("node").get<int>();
        for (const auto& in : e.at("inputs")) n.inputs.push_back({in.at("src").get<int>(), in.at("op").get<std::string>()});
        g.stage1[mod][e.at("frames").get<int>()].nodes.push_back(std::move(n));
      }
    }
    for (const auto& e : j.at("stage2")) {
      g.stage2.push_back({e.at("level").get<int>(), BranchId::parse(e.at("src").get<std::string>()),
                          BranchId::parse(e.at("dst").get<std::string>()), e.at("op").get<std::string>()});
    }
    if (j.contains("metadata")) g.metadata = j.at("metadata").get<std::map<std::string, std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::Corrupt, std::string("genotype: ") + e.what());
  }
  for (auto& [mod, cells] : g.stage1)
    for (auto& [frames, cell] : cells)
      std::sort(cell.nodes.begin(), cell.nodes.end(), [](const CellNode& a, const CellNode& b) { return a.node < b.node; });
  validate(g);
  return g;
}

inline std::string serialize(const Genotype& g) { return to_json(g).dump(2) + "\n"; }

inline Genotype parse_genotype(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::Corrupt, std::string("genotype: ") + e.what());
  }
  return genotype_from_json(j);
}

inline void save_genotype(const Genotype& g, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << serialize(g);
}

inline Genotype load_genotype(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("genotype file not found: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_genotype(ss.str());
}

/// Orders lateral entries by (level, src, dst).
inline void sort_laterals(Genotype& g) {
  std::sort(g.stage2.begin(), g.stage2.end(), [](const LateralChoice& a, const LateralChoice& b) {
    return std::tie(a.level, a.src, a.dst) < std::tie(b.level, b.src, b.dst);
  });
}

/// Merges stage-1 sections (and metadata) of several genotypes.
inline Genotype merge_stage1(const std::vector<Genotype>& parts) {
  Genotype g;
  for (const auto& p : parts) {
    for (const auto& [mod, cells] : p.stage1) {
      if (g.stage1.count(mod)) throw ConfigError("modality '" + mod + "' appears in two genotypes");
      g.stage1[mod] = cells;
    }
    for (const auto& [k, v] : p.metadata) g.metadata[k] = v;
  }
  return g;
}

}  // namespace cdcnas
