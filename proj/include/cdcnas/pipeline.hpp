#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdcnas/config.hpp"
#include "cdcnas/engine.hpp"
#include "cdcnas/gradcheck.hpp"

namespace cdcnas {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- plumbing

/// Creates the run directory and stores the resolved config in it.
inline fs::path open_run(const RunConfig& cfg) {
  const fs::path dir = resolve_path(cfg.str("out"));
  fs::create_directories(dir);
  std::ofstream out(dir / "config.txt");
  out << cfg.dump();
  if (!out) throw std::runtime_error("cannot write " + (dir / "config.txt").string());
  return dir;
}

inline std::ofstream open_output(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

inline std::string read_file(const fs::path& path, const std::string& what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError(what + " not found: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::vector<int> to_ints(const std::vector<long>& v) { return {v.begin(), v.end()}; }

inline SynthSpec synth_spec(const RunConfig& cfg) {
  SynthSpec s;
  s.classes = cfg.list("classes");
  s.frames = static_cast<int>(cfg.integer("frames"));
  s.size = static_cast<int>(cfg.integer("size"));
  s.radius = cfg.real("radius");
  s.rgb_noise = cfg.real("rgb_noise");
  s.depth_noise = cfg.real("depth_noise");
  s.texture = cfg.real("texture");
  s.seed = static_cast<std::uint64_t>(cfg.integer("seed"));
  return s;
}

inline Dataset make_dataset(const RunConfig& cfg) {
  const SynthSpec spec = synth_spec(cfg);
  const long per_class = cfg.integer("per_class");
  if (per_class < 1) throw ConfigError("per_class must be positive");
  Dataset ds;
  ds.clips = synthesize(spec, static_cast<int>(per_class));
  std::vector<int> labels;
  for (const auto& c : ds.clips) labels.push_back(c.label);
  ds.splits = stratified_split(labels, cfg.real("train_ratio"), cfg.real("val_ratio"), spec.seed);
  ds.class_names = spec.classes;
  return ds;
}

inline Dataset open_dataset(const RunConfig& cfg) { return load_dataset(resolve_path(cfg.str("data")).string()); }

inline DataOptions data_options(const RunConfig& cfg, const std::vector<std::string>& modalities) {
  DataOptions o;
  o.modalities = modalities;
  o.rates = to_ints(cfg.integers("rates"));
  o.crop = static_cast<int>(cfg.integer("crop"));
  o.flip_prob = cfg.real("flip");
  return o;
}

inline Schedule search_schedule(const RunConfig& cfg) {
  Schedule s;
  s.epochs = static_cast<int>(cfg.integer("search_epochs"));
  s.batch = static_cast<int>(cfg.integer("search_batch"));
  s.w_lr = cfg.real("lr");
  s.w_momentum = cfg.real("momentum");
  s.w_wd = cfg.real("weight_decay");
  s.grad_clip = cfg.real("grad_clip");
  s.freeze_epochs = static_cast<int>(cfg.integer("freeze_epochs"));
  s.a_lr = cfg.real("arch_lr");
  s.a_wd = cfg.real("arch_weight_decay");
  s.decay_epoch = static_cast<int>(cfg.integer("decay_epoch"));
  s.decay_factor = cfg.real("decay_factor");
  s.validate();
  return s;
}

inline Schedule train_schedule(const RunConfig& cfg) {
  Schedule s;
  s.epochs = static_cast<int>(cfg.integer("train_epochs"));
  s.batch = static_cast<int>(cfg.integer("train_batch"));
  s.w_lr = cfg.real("lr");
  s.w_momentum = cfg.real("momentum");
  s.w_wd = cfg.real("weight_decay");
  s.grad_clip = cfg.real("grad_clip");
  s.plateau_patience = static_cast<int>(cfg.integer("patience"));
  s.plateau_factor = cfg.real("plateau_factor");
  s.validate();
  return s;
}

/// Shape of the network shared by every command: branches, widths, depth.
inline NetSpec base_spec(const RunConfig& cfg, int num_classes, const std::string& cells_key = "cells",
                         const std::string& channels_key = "channels") {
  NetSpec s;
  s.modalities = cfg.list("modalities");
  s.rates = to_ints(cfg.integers("rates"));
  const auto ch = cfg.integers(channels_key);
  s.channels.assign(ch.begin(), ch.end());
  s.cells = static_cast<int>(cfg.integer(cells_key));
  s.num_classes = num_classes;
  s.seed = static_cast<std::uint64_t>(cfg.integer("seed"));
  if (cfg.values().count("theta_t")) s.theta_t = cfg.real("theta_t");
  if (cfg.values().count("theta_tr")) s.theta_tr = cfg.real("theta_tr");
  if (s.modalities.empty() || s.rates.empty()) throw ConfigError("modalities and rates must not be empty");
  return s;
}

inline bool vanilla_registry(const RunConfig& cfg) {
  const auto& r = cfg.str("registry");
  if (r != "cdc" && r != "vanilla") throw ConfigError("registry must be cdc or vanilla, got '" + r + "'");
  return r == "vanilla";
}

/// Hand-fixed cell: node k sums op(node k-2) and op(node k-1).
inline CellGenotype chain_cell(const std::string& op) {
  CellGenotype c;
  for (int node = kCellInputs; node < kCellInputs + kCellIntermediates; ++node) {
    c.nodes.push_back({node, {{node - 2, op}, {node - 1, op}}});
  }
  return c;
}

inline Genotype chain_genotype(const std::vector<std::string>& modalities, const std::vector<int>& rates,
                               const std::string& op) {
  Genotype g;
  for (const auto& m : modalities)
    for (int r : rates) g.stage1[m][r] = chain_cell(op);
  return g;
}

inline std::string fmt(double v, const char* f = "%.4f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------- search / train building blocks

struct BackboneSearch {
  Genotype genotype;
  std::vector<EpochMetrics> metrics;
};

/// Stage 1 for one modality. Traces go to <dir>/alpha_trace_<m>.csv and
/// metrics_<m>.csv; raw final values are appended to `alpha_values`.
inline BackboneSearch search_backbone_modality(const Dataset& ds, NetSpec spec, const DataOptions& opt,
                                               const Schedule& sched, std::uint64_t seed, const fs::path& dir,
                                               std::ostream* alpha_values) {
  spec.cell_mode = CellMode::Search;
  spec.laterals = LateralMode::Fixed;
  MultiRateNet<float> net(spec);
  const std::string m = spec.modalities.front();
  auto trace = open_output(dir / ("alpha_trace_" + m + ".csv"));
  auto metrics = open_output(dir / ("metrics_" + m + ".csv"));
  BackboneSearch out;
  out.metrics = bilevel_search(net, ds, opt, sched, seed, &trace, &metrics);
  out.genotype = net.derive_cells();
  if (alpha_values) write_alpha_values(*alpha_values, net, false);
  return out;
}

struct LateralSearch {
  Genotype genotype;
  std::vector<EpochMetrics> metrics;
};

inline LateralSearch search_lateral_edges(const Dataset& ds, NetSpec spec, const Genotype& backbone,
                                          const DataOptions& opt, const Schedule& sched, std::uint64_t seed,
                                          const fs::path& dir, std::ostream* alpha_values) {
  spec.cell_mode = CellMode::Discrete;
  spec.laterals = LateralMode::Mixed;
  Genotype cells = backbone;
  cells.stage2.clear();
  MultiRateNet<float> net(spec, &cells);
  auto trace = open_output(dir / "alpha_trace.csv");
  auto metrics = open_output(dir / "metrics.csv");
  LateralSearch out;
  out.metrics = bilevel_search(net, ds, opt, sched, seed, &trace, &metrics);
  out.genotype = cells;
  out.genotype.stage2 = derive_stage2(net.lateral_slots());
  sort_laterals(out.genotype);
  if (alpha_values) write_alpha_values(*alpha_values, net, false);
  return out;
}

inline LateralMode resolve_laterals(const std::string& mode, const Genotype& g) {
  if (mode == "auto") return g.stage2.empty() ? LateralMode::Fixed : LateralMode::Discrete;
  if (mode == "none") return LateralMode::None;
  if (mode == "fixed") return LateralMode::Fixed;
  if (mode == "discrete") return LateralMode::Discrete;
  throw ConfigError("laterals must be auto, none, fixed or discrete, got '" + mode + "'");
}

struct TrainedModel {
  std::unique_ptr<MultiRateNet<float>> net;
  TrainOutcome outcome;
  double test_accuracy = 0.0;
};

/// Builds the discrete network of `g`, trains it and scores the test split.
inline TrainedModel train_discrete(const Dataset& ds, NetSpec spec, const Genotype& g, const DataOptions& opt,
                                   const Schedule& sched, std::uint64_t seed, std::ostream* metrics_csv) {
  spec.cell_mode = CellMode::Discrete;
  for (const auto& m : spec.modalities) {
    if (!g.stage1.count(m)) throw ConfigError("genotype has no cells for modality '" + m + "'");
  }
  TrainedModel t;
  t.net = std::make_unique<MultiRateNet<float>>(spec, &g);
  t.outcome = train_model(*t.net, ds, opt, sched, seed, metrics_csv);
  DataOptions eval_opt = opt;
  eval_opt.augment = false;
  const auto test = ds.indices(Split::Test);
  if (!test.empty()) t.test_accuracy = score(*t.net, ds, test, eval_opt).accuracy;
  return t;
}

inline void print_metrics_tail(std::ostream& log, const std::string& tag, const std::vector<EpochMetrics>& m) {
  for (const auto& e : m) {
    if (e.epoch != m.back().epoch) continue;
    log << tag << " epoch " << e.epoch << ' ' << e.split << " loss " << fmt(e.loss) << " acc " << fmt(e.accuracy)
        << '\n';
  }
}

// ---------------------------------------------------------------- commands

inline void cmd_synth(const RunConfig& cfg, std::ostream& log) {
  const Dataset ds = make_dataset(cfg);
  const fs::path dir = open_run(cfg);
  write_dataset(dir.string(), ds);
  log << "synth: " << ds.clips.size() << " clips (" << ds.indices(Split::Train).size() << " train, "
      << ds.indices(Split::Val).size() << " val, " << ds.indices(Split::Test).size() << " test) -> " << dir.string()
      << '\n';
}

inline void cmd_search_backbone(const RunConfig& cfg, std::ostream& log) {
  const Dataset ds = open_dataset(cfg);
  const Schedule sched = search_schedule(cfg);
  NetSpec base = base_spec(cfg, ds.num_classes());
  base.cell_registry = vanilla_registry(cfg) ? Registry::stage1_vanilla() : Registry::stage1(base.theta_t, base.theta_tr);
  base.partial_k = static_cast<int>(cfg.integer("partial_k"));
  base.edge_norm = cfg.flag("edge_norm");
  base.shared_cells = cfg.flag("shared_cells");
  const auto seed = static_cast<std::uint64_t>(cfg.integer("seed"));
  const fs::path dir = open_run(cfg);
  auto alpha = open_output(dir / "alpha.csv");
  alpha << "edge,op,alpha\n";
  std::vector<Genotype> parts;
  for (const auto& m : base.modalities) {
    NetSpec spec = base;
    spec.modalities = {m};
    const auto r = search_backbone_modality(ds, spec, data_options(cfg, {m}), sched, seed, dir, &alpha);
    print_metrics_tail(log, "search-backbone " + m, r.metrics);
    parts.push_back(r.genotype);
  }
  const Genotype g = merge_stage1(parts);
  save_genotype(g, (dir / "genotype.json").string());
  log << "search-backbone: genotype -> " << (dir / "genotype.json").string() << '\n';
}

inline void cmd_search_lateral(const RunConfig& cfg, std::ostream& log) {
  if (cfg.str("genotype").empty()) throw ConfigError("search-lateral needs genotype = <stage-1 genotype file>");
  const Genotype backbone = load_genotype(resolve_path(cfg.str("genotype")).string());
  const Dataset ds = open_dataset(cfg);
  const Schedule sched = search_schedule(cfg);
  NetSpec spec = base_spec(cfg, ds.num_classes());
  spec.vanilla_laterals = vanilla_registry(cfg);
  spec.shared_levels = cfg.flag("shared_levels");
  const fs::path dir = open_run(cfg);
  auto alpha = open_output(dir / "alpha.csv");
  alpha << "edge,op,alpha\n";
  const auto r = search_lateral_edges(ds, spec, backbone, data_options(cfg, spec.modalities), sched,
                                      static_cast<std::uint64_t>(cfg.integer("seed")), dir, &alpha);
  print_metrics_tail(log, "search-lateral", r.metrics);
  save_genotype(r.genotype, (dir / "genotype.json").string());
  log << "search-lateral: " << r.genotype.active_laterals().size() << " of " << r.genotype.stage2.size()
      << " lateral slots active; genotype -> " << (dir / "genotype.json").string() << '\n';
}

/// Architecture values read back from alpha.csv ("edge,op,alpha", raw) or
/// from an alpha trace ("step,edge,op,eta", last step; log eta is used,
/// which has the same softmax).
inline std::map<std::string, std::vector<std::pair<std::string, double>>> read_arch_values(const fs::path& path) {
  std::istringstream in(read_file(path, "alpha file"));
  std::string header;
  std::getline(in, header);
  header = trim(header);
  const bool trace = header == "step,edge,op,eta";
  if (!trace && header != "edge,op,alpha") {
    throw FormatError(FormatError::Kind::Corrupt, path.string() + ": unrecognised header '" + header + "'");
  }
  std::map<std::string, std::vector<std::pair<std::string, double>>> out;
  long last_step = -1;
  for (std::string line; std::getline(in, line);) {
    line = trim(line);
    if (line.empty()) continue;
    auto cols = split_list(line);
    if (cols.size() != (trace ? 4u : 3u)) throw FormatError(FormatError::Kind::Corrupt, path.string() + ": bad row '" + line + "'");
    double v = 0.0;
    try {
      if (trace) {
        const long step = std::stol(cols[0]);
        if (step != last_step) out.clear(), last_step = step;
        cols.erase(cols.begin());
        v = std::log(std::stod(cols[2]));
      } else {
        v = std::stod(cols[2]);
      }
    } catch (const std::exception&) {
      throw FormatError(FormatError::Kind::Corrupt, path.string() + ": bad number in '" + line + "'");
    }
    out[cols[0]].emplace_back(cols[1], v);
  }
  return out;
}

/// Re-derives a genotype from stored architecture values with the same
/// rules the search commands apply.
inline Genotype derive_from_values(const std::map<std::string, std::vector<std::pair<std::string, double>>>& values,
                                   const std::vector<int>& rates) {
  auto labels_of = [](const std::vector<std::pair<std::string, double>>& v) {
    std::vector<std::string> l;
    for (const auto& [name, x] : v) l.push_back(name);
    return l;
  };
  auto numbers_of = [](const std::vector<std::pair<std::string, double>>& v) {
    std::vector<double> x;
    for (const auto& [name, a] : v) x.push_back(a);
    return x;
  };
  auto registry_of = [](int stage, const std::vector<std::string>& names) {
    Registry r{stage, {}};
    for (const auto& n : names) r.ops.push_back(OpSpec::parse(n));
    return r;
  };
  struct CellValues {
    std::vector<std::vector<double>> alpha = std::vector<std::vector<double>>(kCellEdges);
    std::vector<std::vector<double>> beta = std::vector<std::vector<double>>(kCellIntermediates);
    std::optional<std::vector<std::string>> ops;
    int betas = 0;
  };
  std::map<std::string, CellValues> cells;
  std::vector<LateralSlot> slots;
  for (const auto& [name, v] : values) {
    const auto slash = name.rfind('/');
    if (name.rfind("alpha_b/", 0) == 0 || name.rfind("beta_b/", 0) == 0) {
      const bool alpha = name[0] == 'a';
      const std::string tag = name.substr(alpha ? 8 : 7, slash - (alpha ? 8 : 7));
      const std::string leaf = name.substr(slash + 1);
      CellValues& c = cells[tag];
      int src = 0, node = 0;
      if (alpha && std::sscanf(leaf.c_str(), "e%d_%d", &src, &node) == 2) {
        c.alpha.at(static_cast<std::size_t>(cell_edge_index(src, node))) = numbers_of(v);
        if (c.ops && *c.ops != labels_of(v)) throw FormatError(FormatError::Kind::Corrupt, name + ": op labels differ within a cell");
        c.ops = labels_of(v);
      } else if (!alpha && std::sscanf(leaf.c_str(), "n%d", &node) == 1 && node >= kCellInputs &&
                 node < kCellInputs + kCellIntermediates) {
        c.beta[static_cast<std::size_t>(node - kCellInputs)] = numbers_of(v);
        ++c.betas;
      } else {
        throw FormatError(FormatError::Kind::Corrupt, "unrecognised architecture entry '" + name + "'");
      }
    } else if (name.rfind("alpha_c/", 0) == 0) {
      const std::string scope = name.substr(8, slash - 8);
      const std::string edge = name.substr(slash + 1);
      const auto arrow = edge.find("->");
      if (arrow == std::string::npos) throw FormatError(FormatError::Kind::Corrupt, "bad lateral entry '" + name + "'");
      const BranchId src = BranchId::parse(edge.substr(0, arrow)), dst = BranchId::parse(edge.substr(arrow + 2));
      std::vector<int> levels;
      if (scope == "shared") {
        for (int l = 0; l < kLateralLevels; ++l) levels.push_back(l);
      } else if (scope.size() == 2 && scope[0] == 'l' && scope[1] >= '0' && scope[1] < '0' + kLateralLevels) {
        levels.push_back(scope[1] - '0');
      } else {
        throw FormatError(FormatError::Kind::Corrupt, "bad lateral scope in '" + name + "'");
      }
      for (int l : levels) slots.push_back({l, src, dst, registry_of(2, labels_of(v)), numbers_of(v)});
    } else {
      throw FormatError(FormatError::Kind::Corrupt, "unrecognised architecture entry '" + name + "'");
    }
  }
  Genotype g;
  for (const auto& [tag, c] : cells) {
    for (const auto& a : c.alpha)
      if (a.empty()) throw FormatError(FormatError::Kind::Corrupt, "cell " + tag + " is missing edges");
    if (c.betas != 0 && c.betas != kCellIntermediates) {
      throw FormatError(FormatError::Kind::Corrupt, "cell " + tag + " has partial edge-normalisation weights");
    }
    const CellGenotype cell = derive_stage1(c.alpha, registry_of(1, *c.ops), c.betas ? &c.beta : nullptr);
    if (tag.size() > 7 && tag.substr(tag.size() - 7) == "/shared") {
      for (int r : rates) g.stage1[tag.substr(0, tag.size() - 7)][r] = cell;
    } else {
      const BranchId id = BranchId::parse(tag);
      g.stage1[id.modality][id.frames] = cell;
    }
  }
  g.stage2 = derive_stage2(slots);
  sort_laterals(g);
  validate(g);
  return g;
}

inline void cmd_derive(const RunConfig& cfg, std::ostream& log) {
  const auto files = cfg.list("alpha");
  if (files.empty()) throw ConfigError("derive needs alpha = <alpha.csv>[,<alpha.csv>...]");
  std::map<std::string, std::vector<std::pair<std::string, double>>> values;
  for (const auto& f : files) {
    for (auto& [name, v] : read_arch_values(resolve_path(f))) {
      if (values.count(name)) throw ConfigError("architecture entry '" + name + "' appears in two alpha files");
      values[name] = std::move(v);
    }
  }
  const Genotype g = derive_from_values(values, to_ints(cfg.integers("rates")));
  const fs::path dir = open_run(cfg);
  save_genotype(g, (dir / "genotype.json").string());
  log << "derive: " << g.stage1.size() << " modalities, " << g.stage2.size() << " lateral slots -> "
      << (dir / "genotype.json").string() << '\n';
}

inline void cmd_train(const RunConfig& cfg, std::ostream& log) {
  if (cfg.str("genotype").empty()) throw ConfigError("train needs genotype = <genotype file>");
  const Genotype g = load_genotype(resolve_path(cfg.str("genotype")).string());
  const Dataset ds = open_dataset(cfg);
  const Schedule sched = train_schedule(cfg);
  NetSpec spec = base_spec(cfg, ds.num_classes(), "train_cells", "train_channels");
  spec.laterals = resolve_laterals(cfg.str("laterals"), g);
  const fs::path dir = open_run(cfg);
  auto metrics = open_output(dir / "metrics.csv");
  const auto seed = static_cast<std::uint64_t>(cfg.integer("seed"));
  DataOptions opt = data_options(cfg, spec.modalities);
  spec.cell_mode = CellMode::Discrete;
  MultiRateNet<float> net(spec, &g);
  const TrainOutcome r = train_model(net, ds, opt, sched, seed, &metrics);
  {
    auto lr = open_output(dir / "lr.csv");
    lr << "epoch,lr\n";
    for (std::size_t e = 0; e < r.lr.size(); ++e) lr << e + 1 << ',' << fmt(r.lr[e], "%.9g") << '\n';
  }
  save_model((dir / "model").string(), net, opt, g);
  print_metrics_tail(log, "train", r.metrics);
  log << "train: best val accuracy " << fmt(r.best_val_accuracy) << " at epoch " << r.best_epoch << "; model -> "
      << (dir / "model").string() << '\n';
}

inline void cmd_eval(const RunConfig& cfg, std::ostream& log) {
  const auto dirs = cfg.list("model");
  if (dirs.empty()) throw ConfigError("eval needs model = <model dir>[,<model dir>...]");
  const Fusion fusion = parse_fusion(cfg.str("fusion"));
  const Split split = [&] {
    try {
      return parse_split(cfg.str("split"));
    } catch (const FormatError&) {
      throw ConfigError("split must be train, val or test");
    }
  }();
  std::vector<std::unique_ptr<MultiRateNet<float>>> nets;
  std::vector<DataOptions> opts;
  for (const auto& d : dirs) {
    SavedModel info;
    nets.push_back(load_model(resolve_path(d).string(), &info));
    opts.push_back(info.data);
  }
  const Dataset ds = open_dataset(cfg);
  for (const auto& n : nets) {
    if (n->spec().num_classes != ds.num_classes()) throw ConfigError("model and dataset disagree on the class count");
  }
  std::vector<const MultiRateNet<float>*> ptrs;
  for (const auto& n : nets) ptrs.push_back(n.get());
  const auto idx = ds.indices(split);
  const EvalReport r = evaluate(ptrs, opts, ds, idx, fusion);
  const fs::path dir = open_run(cfg);
  {
    auto out = open_output(dir / "confusion.csv");
    write_confusion_csv(out, r, ds.class_names);
  }
  {
    auto out = open_output(dir / "predictions.csv");
    out << "clip,label,prediction\n";
    for (std::size_t i = 0; i < idx.size(); ++i) {
      out << ds.clips[idx[i]].clip_id << ',' << ds.clips[idx[i]].label << ',' << r.predictions[i] << '\n';
    }
  }
  nlohmann::json j;
  j["split"] = to_string(split);
  j["fusion"] = cfg.str("fusion");
  j["models"] = dirs;
  j["clips"] = idx.size();
  j["accuracy"] = r.accuracy;
  nlohmann::json per_class = nlohmann::json::object();
  for (std::size_t c = 0; c < r.per_class.size(); ++c) per_class[ds.class_names.at(c)] = r.per_class[c];
  j["per_class_accuracy"] = per_class;
  auto out = open_output(dir / "eval.json");
  out << j.dump(2) << '\n';
  log << "eval: " << to_string(split) << " accuracy " << fmt(r.accuracy) << " over " << idx.size() << " clips\n";
}

inline void cmd_gradcheck(const RunConfig& cfg, std::ostream& log) {
  const double tol = cfg.real("tolerance");
  const auto cases = run_gradcheck_suite(static_cast<std::uint64_t>(cfg.integer("seed")), cfg.real("fd_step"));
  const fs::path dir = open_run(cfg);
  auto out = open_output(dir / "gradcheck.csv");
  out << "case,max_rel_error,worst,pass\n";
  double worst = 0.0;
  int failures = 0;
  for (const auto& c : cases) {
    const bool pass = c.result.max_rel_error <= tol;
    failures += !pass;
    worst = std::max(worst, c.result.max_rel_error);
    out << c.name << ',' << fmt(c.result.max_rel_error, "%.3e") << ',' << c.result.worst << ',' << pass << '\n';
    log << (pass ? "ok   " : "FAIL ") << c.name << " max rel error " << fmt(c.result.max_rel_error, "%.3e") << '\n';
  }
  log << "gradcheck: " << cases.size() << " cases, worst " << fmt(worst, "%.3e") << ", tolerance " << fmt(tol, "%.0e")
      << '\n';
  if (failures) throw CheckFailed(std::to_string(failures) + " gradient checks above tolerance");
}

/// Test accuracy of fixed chain-cell backbones over a theta grid, on a
/// synthetic task whose classes differ only in motion direction.
inline void cmd_theta_sweep(const RunConfig& cfg, std::ostream& log) {
  const Dataset ds = make_dataset(cfg);
  const Schedule sched = train_schedule(cfg);
  const NetSpec base = base_spec(cfg, ds.num_classes());
  const DataOptions opt = data_options(cfg, base.modalities);
  const auto thetas = cfg.reals("thetas");
  const auto seeds = cfg.integers("seeds");
  std::vector<CdcVariant> variants;
  for (const auto& v : cfg.list("variants")) {
    if (v == "st") variants.push_back(CdcVariant::ST);
    else if (v == "t") variants.push_back(CdcVariant::T);
    else if (v == "tr") variants.push_back(CdcVariant::TR);
    else throw ConfigError("variants: expected st, t or tr, got '" + v + "'");
  }
  if (thetas.empty() || seeds.empty() || variants.empty()) throw ConfigError("theta-sweep needs variants, thetas and seeds");
  const fs::path dir = open_run(cfg);
  auto runs = open_output(dir / "theta_runs.csv");
  runs << "variant,theta,seed,best_val_accuracy,test_accuracy\n";
  // theta = 0 is the same network for every variant; train it once per seed.
  std::map<std::pair<std::string, long>, std::pair<double, double>> done;
  std::map<std::pair<std::string, double>, std::vector<double>> by_point;
  for (CdcVariant v : variants) {
    for (double theta : thetas) {
      const std::string op = OpSpec::cdc(v, theta, {3, 3, 3}).name();
      const std::string key = theta == 0.0 ? "theta0" : op;
      for (long s : seeds) {
        auto it = done.find({key, s});
        if (it == done.end()) {
          NetSpec spec = base;
          spec.seed = static_cast<std::uint64_t>(s);
          spec.laterals = spec.rates.size() > 1 ? LateralMode::Fixed : LateralMode::None;
          const Genotype g = chain_genotype(spec.modalities, spec.rates, op);
          const TrainedModel t = train_discrete(ds, spec, g, opt, sched, static_cast<std::uint64_t>(s), nullptr);
          it = done.emplace(std::make_pair(key, s), std::make_pair(t.outcome.best_val_accuracy, t.test_accuracy)).first;
        }
        runs << to_string(v) << ',' << fmt(theta, "%.2f") << ',' << s << ',' << fmt(it->second.first) << ','
             << fmt(it->second.second) << '\n';
        by_point[{to_string(v), theta}].push_back(it->second.second);
      }
      auto& accs = by_point[{to_string(v), theta}];
      std::vector<double> sorted = accs;
      std::sort(sorted.begin(), sorted.end());
      log << "theta-sweep " << to_string(v) << " theta " << fmt(theta, "%.2f") << " median test accuracy "
          << fmt(sorted[(sorted.size() - 1) / 2]) << '\n';
    }
  }
  auto summary = open_output(dir / "theta_sweep.csv");
  summary << "variant,theta,median_test_accuracy,min_test_accuracy,max_test_accuracy\n";
  for (CdcVariant v : variants) {
    for (double theta : thetas) {
      std::vector<double> a = by_point.at({to_string(v), theta});
      std::sort(a.begin(), a.end());
      // Lower median for even seed counts.
      summary << to_string(v) << ',' << fmt(theta, "%.2f") << ',' << fmt(a[(a.size() - 1) / 2]) << ','
              << fmt(a.front()) << ',' << fmt(a.back()) << '\n';
    }
  }
}

/// The backbone and lateral ablation grid, trained and scored on one dataset.
inline void cmd_ablation(const RunConfig& cfg, std::ostream& log) {
  const Dataset ds = open_dataset(cfg);
  const Schedule search = search_schedule(cfg);
  const Schedule train = train_schedule(cfg);
  const auto seed = static_cast<std::uint64_t>(cfg.integer("seed"));
  NetSpec search_base = base_spec(cfg, ds.num_classes());
  search_base.partial_k = static_cast<int>(cfg.integer("partial_k"));
  search_base.edge_norm = cfg.flag("edge_norm");
  search_base.shared_cells = cfg.flag("shared_cells");
  const NetSpec train_base = base_spec(cfg, ds.num_classes(), "train_cells", "train_channels");
  const auto modalities = search_base.modalities;
  const fs::path dir = open_run(cfg);
  auto runs = open_output(dir / "ablation_runs.csv");
  runs << "configuration,modality,best_val_accuracy,test_accuracy\n";

  struct Row {
    std::string name;
    std::map<std::string, double> acc;
  };
  std::vector<Row> rows;
  Genotype searched_cdc;
  for (bool cdc : {false, true}) {
    for (bool nas : {false, true}) {
      Row row{std::string(cdc ? "w/ CDC" : "w/o CDC") + " + " + (nas ? "w/ NAS1" : "w/o NAS1"), {}};
      const std::string tag = std::string(cdc ? "cdc" : "vanilla") + (nas ? "_nas1" : "_fixed");
      const fs::path sub = dir / tag;
      fs::create_directories(sub);
      std::vector<Genotype> parts;
      for (const auto& m : modalities) {
        Genotype g;
        if (nas) {
          NetSpec spec = search_base;
          spec.modalities = {m};
          spec.cell_registry = cdc ? Registry::stage1(spec.theta_t, spec.theta_tr) : Registry::stage1_vanilla();
          g = search_backbone_modality(ds, spec, data_options(cfg, {m}), search, seed, sub, nullptr).genotype;
        } else {
          const std::string op = cdc ? OpSpec::cdc(CdcVariant::T, search_base.theta_t, {3, 3, 3}).name() : "Conv_3x3x3";
          g = chain_genotype({m}, search_base.rates, op);
        }
        NetSpec spec = train_base;
        spec.modalities = {m};
        spec.laterals = LateralMode::Fixed;
        auto metrics = open_output(sub / ("train_metrics_" + m + ".csv"));
        const TrainedModel t = train_discrete(ds, spec, g, data_options(cfg, {m}), train, seed, &metrics);
        row.acc[m] = t.test_accuracy;
        runs << row.name << ',' << m << ',' << fmt(t.outcome.best_val_accuracy) << ',' << fmt(t.test_accuracy) << '\n';
        log << "ablation " << row.name << " " << m << " test accuracy " << fmt(t.test_accuracy) << '\n';
        parts.push_back(g);
      }
      const Genotype merged = merge_stage1(parts);
      save_genotype(merged, (sub / "genotype.json").string());
      if (cdc && nas) searched_cdc = merged;
      rows.push_back(std::move(row));
    }
  }
  for (const char* mode : {"Fixed", "Shared", "Unshared"}) {
    Row row{std::string("w/ CDC + w/ NAS1 + NAS2_") + mode, {}};
    const fs::path sub = dir / (std::string("nas2_") + mode);
    fs::create_directories(sub);
    Genotype g = searched_cdc;
    NetSpec spec = train_base;
    spec.modalities = modalities;
    if (std::string(mode) == "Fixed") {
      spec.laterals = LateralMode::Fixed;
    } else {
      NetSpec s = search_base;
      s.shared_levels = std::string(mode) == "Shared";
      g = search_lateral_edges(ds, s, searched_cdc, data_options(cfg, modalities), search, seed, sub, nullptr).genotype;
      spec.laterals = LateralMode::Discrete;
    }
    save_genotype(g, (sub / "genotype.json").string());
    auto metrics = open_output(sub / "train_metrics.csv");
    const TrainedModel t = train_discrete(ds, spec, g, data_options(cfg, modalities), train, seed, &metrics);
    row.acc["rgbd"] = t.test_accuracy;
    runs << row.name << ",rgbd," << fmt(t.outcome.best_val_accuracy) << ',' << fmt(t.test_accuracy) << '\n';
    log << "ablation " << row.name << " test accuracy " << fmt(t.test_accuracy) << '\n';
    rows.push_back(std::move(row));
  }

  std::vector<std::string> columns = modalities;
  columns.push_back("rgbd");
  auto csv = open_output(dir / "ablation.csv");
  auto md = open_output(dir / "ablation.md");
  csv << "configuration";
  md << "| configuration |";
  for (const auto& c : columns) csv << ',' << c, md << ' ' << c << " |";
  csv << '\n';
  md << "\n|---|";
  for (std::size_t i = 0; i < columns.size(); ++i) md << "---|";
  md << '\n';
  for (const auto& r : rows) {
    csv << r.name;
    md << "| " << r.name << " |";
    for (const auto& c : columns) {
      auto it = r.acc.find(c);
      csv << ',' << (it == r.acc.end() ? "" : fmt(it->second));
      md << ' ' << (it == r.acc.end() ? "-" : fmt(100.0 * it->second, "%.2f")) << " |";
    }
    csv << '\n';
    md << '\n';
  }
  log << "ablation: table -> " << (dir / "ablation.md").string() << '\n';
}

}  // namespace cdcnas
