// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
// fails. Arguments select a subset by name, e.g. `acceptance bench e2e`.
// CLI-driven checks write under $CDCNAS_RUN_ROOT (default: <build>/acceptance).

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdcnas/pipeline.hpp"
#include "oracles.hpp"

using namespace cdcnas;
namespace fs = std::filesystem;

namespace {

using Tf = Tensor<float>;

struct Outcome {
  bool pass = false;
  std::string detail;
};

fs::path run_root() { return resolve_path("."); }

std::string quote(const std::string& s) { return "'" + s + "'"; }

/// Runs the CLI with stdout/stderr captured in <root>/logs/<log>.log.
int cli(const std::string& args, const std::string& log) {
  fs::create_directories(run_root() / "logs");
  const std::string cmd =
      quote(CDCNAS_CLI) + " " + args + " > " + quote((run_root() / "logs" / (log + ".log")).string()) + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string desk_cfg() { return quote(std::string(CDCNAS_SOURCE_DIR) + "/configs/desk.cfg"); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> cols;
    std::stringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cols.push_back(c);
    rows.push_back(cols);
  }
  return rows;
}

std::string fixed(double v, int digits = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

Tf run_cdc(const Tf& x, const Tf& w, const CdcConfig& cfg) {
  Tape<float> tape(false);
  return cdc_forward(tape.constant(x), tape.constant(w), cfg).value();
}

oracle::Kind kind_of(CdcVariant v) {
  return v == CdcVariant::ST ? oracle::Kind::ST : v == CdcVariant::T ? oracle::Kind::T : oracle::Kind::TR;
}

std::int64_t draw(Rng& rng, std::int64_t lo, std::int64_t hi) {
  return lo + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
}

const std::vector<std::array<int, 3>>& cdc_kernels() {
  static const std::vector<std::array<int, 3>> k{{3, 3, 3}, {3, 1, 1}, {5, 1, 1}, {1, 3, 3}, {3, 3, 1}};
  return k;
}

// ---------------------------------------------------------------- in-process checks

Outcome degeneracy() {
  Rng rng(101);
  double worst = 0.0;
  int cases = 0;
  for (auto v : {CdcVariant::ST, CdcVariant::T, CdcVariant::TR}) {
    for (int i = 0; i < 100; ++i, ++cases) {
      const auto k = cdc_kernels()[rng.below(cdc_kernels().size())];
      const std::array<int, 3> stride{static_cast<int>(draw(rng, 1, 2)), static_cast<int>(draw(rng, 1, 2)),
                                      static_cast<int>(draw(rng, 1, 2))};
      const Shape5 xs{draw(rng, 1, 2), draw(rng, 1, 4), draw(rng, 1, 8), draw(rng, 1, 8), draw(rng, 1, 8)};
      const Tf x = Tf::randn(xs, rng), w = Tf::randn({draw(rng, 1, 4), xs.c(), k[0], k[1], k[2]}, rng);
      const CdcConfig cfg = CdcConfig::make(v, 0.0, k, stride);
      Tape<float> tape(false);
      const Tf ref = conv3d(tape.constant(x), tape.constant(w), cfg.conv).value();
      worst = std::max(worst, max_abs_diff(run_cdc(x, w, cfg), ref));
    }
  }
  return {worst <= 1e-6, "theta = 0 vs conv3d, " + std::to_string(cases) + " cases, max abs diff " + fixed(worst, 9)};
}

Outcome literal_equivalence() {
  Rng rng(102);
  double worst = 0.0;
  int cases = 0;
  for (auto v : {CdcVariant::ST, CdcVariant::T, CdcVariant::TR}) {
    for (int i = 0; i < 200; ++i, ++cases) {
      const auto k = cdc_kernels()[rng.below(cdc_kernels().size())];
      const std::array<int, 3> stride{static_cast<int>(draw(rng, 1, 2)), static_cast<int>(draw(rng, 1, 2)),
                                      static_cast<int>(draw(rng, 1, 2))};
      const Shape5 xs{draw(rng, 1, 2), draw(rng, 1, 3), draw(rng, 1, 8), draw(rng, 1, 7), draw(rng, 1, 7)};
      const double theta = rng.uniform();
      const Tf x = Tf::randn(xs, rng), w = Tf::randn({draw(rng, 1, 3), xs.c(), k[0], k[1], k[2]}, rng);
      const Tf y = run_cdc(x, w, CdcConfig::make(v, theta, k, stride));
      worst = std::max(worst, max_rel_diff(y, oracle::cdc_literal(x, w, kind_of(v), theta, stride)));
    }
  }
  return {worst <= 1e-5, "fused vs literal form, " + std::to_string(cases) + " cases, max rel diff " + fixed(worst, 9)};
}

Outcome parameter_parity() {
  Rng rng(103);
  int ops = 0, mismatches = 0;
  for (const auto& r : {Registry::stage1(), Registry::stage2(3), Registry::stage2(5)}) {
    for (const auto& op : r.ops) {
      if (op.kind != OpKind::Conv) continue;
      for (std::array<int, 3> stride : {std::array<int, 3>{1, 1, 1}, std::array<int, 3>{2, 1, 1}}) {
        ParamStore<float> a, b;
        make_op<float>(a, "e", op, 6, 6, stride, rng);
        make_op<float>(b, "e", OpSpec::conv(op.kernel), 6, 6, stride, rng);
        ++ops;
        mismatches += a.count_scalars(Partition::Weights) != b.count_scalars(Partition::Weights);
      }
    }
  }
  // Whole networks: every CDC op of a derived net swapped for its vanilla twin.
  auto swap_ops = [](Genotype g) {
    for (auto& [m, cells] : g.stage1)
      for (auto& [f, cell] : cells)
        for (auto& n : cell.nodes)
          for (auto& in : n.inputs) in.op = OpSpec::conv(OpSpec::parse(in.op).kernel).name();
    for (auto& l : g.stage2)
      if (l.op != "Zero") l.op = OpSpec::conv(OpSpec::parse(l.op).kernel).name();
    return g;
  };
  Genotype g = chain_genotype({"rgb", "depth"}, {8, 16, 32}, "CDC-TR-03_3x3x3");
  for (const auto& [src, dst] : lateral_edges({"rgb", "depth"}, {8, 16, 32})) {
    const EdgeClass ec = EdgeClass::of(src.frames, dst.frames);
    for (int level = 0; level < 3; ++level) {
      g.stage2.push_back({level, src, dst, OpSpec::cdc(CdcVariant::T, 0.6, {ec.kernel_t, 1, 1}).name()});
    }
  }
  NetSpec spec;
  spec.cells = 3;
  spec.channels = {4, 4, 2};
  spec.cell_mode = CellMode::Discrete;
  spec.laterals = LateralMode::Discrete;
  const Genotype plain = swap_ops(g);
  const MultiRateNet<float> cdc_net(spec, &g), vanilla_net(spec, &plain);
  const auto a = cdc_net.params().count_scalars(Partition::Weights);
  const auto b = vanilla_net.params().count_scalars(Partition::Weights);
  const bool ok = mismatches == 0 && a == b;
  return {ok, std::to_string(ops) + " op geometries, " + std::to_string(mismatches) + " mismatches; network " +
                  std::to_string(a) + " vs " + std::to_string(b) + " weights"};
}

Outcome gradient_suite() {
  const auto cases = run_gradcheck_suite();
  double worst = 0.0;
  std::string worst_name;
  for (const auto& c : cases) {
    if (c.result.max_rel_error >= worst) worst = c.result.max_rel_error, worst_name = c.name;
  }
  return {worst <= 1e-3, std::to_string(cases.size()) + " 64-bit cases, worst rel error " + fixed(worst, 12) + " (" +
                             worst_name + ")"};
}

Outcome oracle_conv() {
  Rng rng(105);
  double worst = 0.0;
  int checked = 0;
  while (checked < 200) {
    const int groups = static_cast<int>(draw(rng, 1, 3));
    const std::int64_t cin = groups * draw(rng, 1, 3), cout = groups * draw(rng, 1, 3);
    Conv3dOptions o;
    o.groups = groups;
    std::array<std::int64_t, 3> ext{}, k{};
    bool ok = true;
    for (int a = 0; a < 3; ++a) {
      ext[a] = draw(rng, 1, 8);
      k[a] = draw(rng, 1, 3);
      o.stride[a] = static_cast<int>(draw(rng, 1, 3));
      o.dilation[a] = static_cast<int>(draw(rng, 1, 2));
      o.padding[a] = static_cast<int>(draw(rng, 0, 2));
      if (detail::conv_extent(ext[a], static_cast<int>(k[a]), o.stride[a], o.dilation[a], o.padding[a]) <= 0) ok = false;
    }
    if (!ok) continue;
    const Tf x = Tf::randn({draw(rng, 1, 2), cin, ext[0], ext[1], ext[2]}, rng);
    const Tf w = Tf::randn({cout, cin / groups, k[0], k[1], k[2]}, rng);
    const Tf b = Tf::randn({1, cout, 1, 1, 1}, rng);
    Tape<float> tape(false);
    const Tf y = conv3d(tape.constant(x), tape.constant(w), o, tape.constant(b)).value();
    worst = std::max(worst, max_rel_diff(y, oracle::conv3d(x, w, {o.stride, o.dilation, o.padding, o.groups}, &b)));
    ++checked;
  }
  return {worst <= 1e-5, "200 stride/dilation/padding/groups cases, max rel diff " + fixed(worst, 9)};
}

Outcome search_space() {
  std::vector<std::string> problems;
  if (Registry::stage1().size() != 7) problems.push_back("stage-1 registry size");

  NetSpec spec;
  spec.cells = 3;
  spec.channels = {2, 2, 2};
  spec.cell_mode = CellMode::Discrete;
  spec.laterals = LateralMode::Mixed;
  const Genotype cells = chain_genotype(spec.modalities, spec.rates, "Conv_1x3x3");
  std::map<int, int> per_level;
  std::size_t shared_alphas = 0;
  for (bool shared : {false, true}) {
    spec.shared_levels = shared;
    const MultiRateNet<float> net(spec, &cells);
    for (const auto& l : net.laterals()) {
      if (!shared) ++per_level[l.level];
      if (l.src.frames < l.dst.frames) problems.push_back("low-to-high lateral " + l.src.str() + "->" + l.dst.str());
    }
    if (shared) shared_alphas = net.arch_tensors().size();
  }
  for (int level = 0; level < 3; ++level) {
    if (per_level[level] != 18) problems.push_back("level " + std::to_string(level) + " has " + std::to_string(per_level[level]) + " laterals");
  }
  if (shared_alphas != 18) problems.push_back("shared levels give " + std::to_string(shared_alphas) + " alphas");

  Rng rng(106);
  const Registry r1 = Registry::stage1();
  int violations = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const double scale = rng.uniform(0.01, 5.0);
    std::vector<std::vector<double>> alpha(kCellEdges, std::vector<double>(r1.size()));
    for (auto& e : alpha)
      for (auto& a : e) a = scale * rng.normal();
    std::vector<std::vector<double>> beta;
    for (int node = kCellInputs; node < kCellInputs + kCellIntermediates; ++node) {
      beta.emplace_back(static_cast<std::size_t>(node));
      for (auto& b : beta.back()) b = scale * rng.normal();
    }
    const CellGenotype cell = derive_stage1(alpha, r1, trial % 2 ? &beta : nullptr);
    bool bad = cell.nodes.size() != static_cast<std::size_t>(kCellIntermediates);
    for (const auto& n : cell.nodes) {
      bad |= n.inputs.size() != 2 || n.inputs[0].src == n.inputs[1].src;
      for (const auto& in : n.inputs) bad |= in.op == "Zero" || in.src >= n.node || in.src < 0;
    }
    try {
      validate_cell(cell, "random");
    } catch (const ConfigError&) {
      bad = true;
    }
    violations += bad;
  }
  int zero_picks = 0, stage2_violations = 0;
  spec.shared_levels = false;
  const MultiRateNet<float> net(spec, &cells);
  for (int trial = 0; trial < 500; ++trial) {
    auto slots = net.lateral_slots();
    for (auto& s : slots)
      for (auto& a : s.alpha) a = rng.normal();
    Genotype g = cells;
    g.stage2 = derive_stage2(slots);
    try {
      validate(g);
    } catch (const std::exception&) {
      ++stage2_violations;
    }
    for (const auto& l : g.stage2) zero_picks += l.op == "Zero";
  }
  if (zero_picks == 0) problems.push_back("stage-2 derivation never chose Zero");
  const bool ok = problems.empty() && violations == 0 && stage2_violations == 0;
  std::string detail = "7 backbone ops; 18 laterals per level, none low-to-high; 500 stage-1 derivations: " +
                       std::to_string(violations) + " violations; 500 stage-2 derivations: " +
                       std::to_string(stage2_violations) + " violations, " + std::to_string(zero_picks) + " Zero picks";
  for (const auto& p : problems) detail += "; " + p;
  return {ok, detail};
}

// ---------------------------------------------------------------- CLI-driven checks

Outcome end_to_end() {
  const auto t0 = std::chrono::steady_clock::now();
  fs::remove_all(run_root() / "desk");
  const std::vector<std::pair<std::string, std::string>> steps{
      {"synth --config " + desk_cfg() + " --out desk/data", "desk_synth"},
      {"search-backbone --config " + desk_cfg() + " --out desk/backbone", "desk_backbone"},
      {"search-lateral --config " + desk_cfg() + " --genotype desk/backbone/genotype.json --out desk/lateral",
       "desk_lateral"},
      {"derive --config " + desk_cfg() + " --alpha desk/backbone/alpha.csv,desk/lateral/alpha.csv --out desk/derived",
       "desk_derive"},
      {"train --config " + desk_cfg() + " --genotype desk/derived/genotype.json --out desk/train", "desk_train"},
      {"eval --config " + desk_cfg() + " --model desk/train/model --out desk/eval", "desk_eval"}};
  for (const auto& [args, log] : steps) {
    const int rc = cli(args, log);
    if (rc != 0) return {false, "step '" + log + "' exited " + std::to_string(rc) + " (see logs/" + log + ".log)"};
  }
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
  const bool same = slurp(run_root() / "desk/derived/genotype.json") == slurp(run_root() / "desk/lateral/genotype.json");
  const auto eval = nlohmann::json::parse(slurp(run_root() / "desk/eval/eval.json"));
  const double acc = eval.at("accuracy").get<double>();
  const Genotype g = load_genotype((run_root() / "desk/derived/genotype.json").string());
  // Search health, reported: val loss of the last epoch against the first.
  std::string search_note;
  for (const std::string m : {"rgb", "depth"}) {
    const auto rows = read_csv(run_root() / ("desk/backbone/metrics_" + m + ".csv"));
    std::vector<double> val;
    for (const auto& r : rows)
      if (r.size() == 4 && r[1] == "val") val.push_back(std::stod(r[2]));
    if (!val.empty()) search_note += " " + m + " val loss " + fixed(val.front()) + "->" + fixed(val.back()) + ";";
  }
  const bool ok = same && acc >= 0.9 && minutes <= 60.0;
  return {ok, "RGB-D test accuracy " + fixed(acc) + " (need >= 0.900), " + fixed(minutes, 1) + " min, derive " +
                  (same ? "reproduces" : "DIFFERS FROM") + " search genotype, " +
                  std::to_string(g.active_laterals().size()) + "/" + std::to_string(g.stage2.size()) +
                  " laterals active;" + search_note};
}

Outcome theta_sweep() {
  fs::remove_all(run_root() / "sweep");
  const int rc = cli("theta-sweep --out sweep", "theta_sweep");
  if (rc != 0) return {false, "theta-sweep exited " + std::to_string(rc)};
  std::map<std::pair<std::string, std::string>, double> median;
  for (const auto& r : read_csv(run_root() / "sweep/theta_sweep.csv")) {
    if (r.size() >= 3 && r[0] != "variant") median[{r[0], r[1]}] = std::stod(r[2]);
  }
  if (!median.count({"T", "0.60"}) || !median.count({"T", "0.00"})) return {false, "theta_sweep.csv lacks T rows"};
  const double t6 = median.at({"T", "0.60"}), t0 = median.at({"T", "0.00"});
  std::string curve;
  for (const std::string v : {"ST", "T", "TR"}) {
    curve += " " + v + ":";
    for (const auto& [key, acc] : median)
      if (key.first == v) curve += " " + fixed(acc, 2);
  }
  return {t6 >= t0, "median test accuracy CDC-T theta 0.6 " + fixed(t6) + " vs theta 0 " + fixed(t0) +
                        "; curves over theta 0..1:" + curve};
}

Outcome ablation() {
  if (!fs::exists(run_root() / "desk/data/manifest.tsv")) {
    if (cli("synth --config " + desk_cfg() + " --out desk/data", "ablation_synth") != 0) return {false, "synth failed"};
  }
  fs::remove_all(run_root() / "ablation");
  const std::string cfg = quote(std::string(CDCNAS_SOURCE_DIR) + "/configs/ablation.cfg");
  const int rc = cli("ablation --config " + cfg + " --data desk/data --out ablation", "ablation");
  if (rc != 0) return {false, "ablation exited " + std::to_string(rc)};
  const auto rows = read_csv(run_root() / "ablation/ablation.csv");
  int filled = 0;
  std::string summary;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    std::string cells;
    for (std::size_t c = 1; c < rows[i].size(); ++c) {
      if (rows[i][c].empty()) continue;
      ++filled;
      cells += (cells.empty() ? "" : "/") + fixed(std::stod(rows[i][c]), 2);
    }
    summary += "; " + rows[i][0] + " " + cells;
  }
  const bool ok = rows.size() == 8 && filled == 4 * 2 + 3;
  return {ok, std::to_string(rows.size() - 1) + " configurations, " + std::to_string(filled) + " scores" + summary};
}

std::string replace_all(std::string s, const std::string& from, const std::string& to) {
  for (auto pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) s.replace(pos, from.size(), to);
  return s;
}

/// Every file of two run trees, compared byte for byte once the tree's own
/// name is masked (eval.json records its model path). config.txt is skipped
/// since its path keys differ by construction.
std::vector<std::string> tree_diff(const fs::path& a, const fs::path& b, const std::string& name_a = "",
                                   const std::string& name_b = "") {
  std::vector<std::string> diffs;
  std::set<std::string> names;
  for (const auto& root : {a, b})
    for (const auto& e : fs::recursive_directory_iterator(root))
      if (e.is_regular_file()) names.insert(fs::relative(e.path(), root).string());
  for (const auto& n : names) {
    if (fs::path(n).filename() == "config.txt") continue;
    if (!fs::exists(a / n) || !fs::exists(b / n)) {
      diffs.push_back(n);
      continue;
    }
    std::string x = slurp(a / n), y = slurp(b / n);
    if (!name_a.empty()) x = replace_all(x, name_a, "@"), y = replace_all(y, name_b, "@");
    if (x != y) diffs.push_back(n);
  }
  return diffs;
}

Outcome determinism() {
  fs::remove_all(run_root() / "det");
  const std::string tiny =
      " --per_class 6 --frames 16 --size 12 --radius 2";
  const std::string net = " --rates 4,8,16 --cells 3 --channels 4,2,2 --crop 10";
  const std::string sched = " --search_epochs 2 --freeze_epochs 0 --search_batch 4";
  std::size_t files = 0;
  for (const std::string run : {"a", "b"}) {
    const std::string d = "det/" + run;
    const std::vector<std::pair<std::string, std::string>> steps{
        {"synth --out " + d + "/data" + tiny, "det_synth"},
        {"search-backbone --data " + d + "/data --out " + d + "/backbone" + net + sched, "det_backbone"},
        {"search-lateral --data " + d + "/data --genotype " + d + "/backbone/genotype.json --out " + d + "/lateral" +
             net + sched,
         "det_lateral"},
        {"derive --rates 4,8,16 --alpha " + d + "/backbone/alpha.csv," + d + "/lateral/alpha.csv --out " + d + "/derived",
         "det_derive"},
        {"train --data " + d + "/data --genotype " + d + "/derived/genotype.json --rates 4,8,16 --train_cells 3 "
         "--train_channels 4,2,2 --crop 10 --train_epochs 2 --out " + d + "/train",
         "det_train"},
        {"eval --data " + d + "/data --model " + d + "/train/model --out " + d + "/eval", "det_eval"},
        {"gradcheck --out " + d + "/gradcheck", "det_gradcheck"}};
    for (const auto& [args, log] : steps) {
      const int rc = cli(args, log + "_" + run);
      if (rc != 0) return {false, "step '" + log + "' exited " + std::to_string(rc)};
    }
  }
  // The stored config of a run regenerates it.
  if (cli("search-backbone --config det/a/backbone/config.txt --data det/a/data --out det/c/backbone", "det_rerun") != 0) {
    return {false, "rerun from stored config failed"};
  }
  const auto diffs = tree_diff(run_root() / "det/a", run_root() / "det/b", "det/a/", "det/b/");
  auto rerun = tree_diff(run_root() / "det/a/backbone", run_root() / "det/c/backbone");
  for (const auto& e : fs::recursive_directory_iterator(run_root() / "det/a"))
    files += e.is_regular_file();
  std::string detail = std::to_string(files) + " files over 7 commands, " + std::to_string(diffs.size()) +
                       " differ; rerun from stored config: " + std::to_string(rerun.size()) + " differ";
  for (const auto& d : diffs) detail += "; " + d;
  for (const auto& d : rerun) detail += "; rerun " + d;
  return {diffs.empty() && rerun.empty(), detail};
}

Outcome bench() {
  const int rc = cli("bench --repeats 21 --out bench", "bench");
  if (rc != 0) return {false, "bench exited " + std::to_string(rc)};
  double worst_overhead = 0.0, worst_speedup = 1e300;
  std::string detail;
  for (const auto& r : read_csv(run_root() / "bench/bench.csv")) {
    if (r.size() < 6 || r[0].rfind("cdc_", 0) != 0) continue;
    const double ratio = std::stod(r[3]), speedup = std::stod(r[5]);
    worst_overhead = std::max(worst_overhead, ratio - 1.0);
    worst_speedup = std::min(worst_speedup, speedup);
    detail += " " + r[0] + " " + r[2] + " ms (" + (ratio >= 1 ? "+" : "") + fixed(100 * (ratio - 1), 1) + "%, " +
              fixed(speedup, 0) + "x vs literal);";
  }
  if (detail.empty()) return {false, "bench.csv has no CDC rows"};
  const bool ok = worst_overhead <= 0.25 && worst_speedup >= 3.0;
  return {ok, "C=16 T=16 H=W=32 k=3:" + detail + " bounds: overhead <= 25%, speedup >= 3x"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> checks{
      {"degeneracy", degeneracy},         {"literal-equivalence", literal_equivalence},
      {"parameter-parity", parameter_parity}, {"gradient-suite", gradient_suite},
      {"oracle-conv", oracle_conv},       {"search-space", search_space},
      {"e2e", end_to_end},                {"theta-sweep", theta_sweep},
      {"ablation", ablation},             {"determinism", determinism},
      {"bench", bench}};
  std::set<std::string> only(argv + 1, argv + argc);
  for (const auto& o : only) {
    bool known = false;
    for (const auto& [name, f] : checks) known |= name == o;
    if (!known) {
      std::cerr << "unknown check '" << o << "'\n";
      return 2;
    }
  }
  if (const char* root = std::getenv("CDCNAS_RUN_ROOT"); !root || !*root) {
    setenv("CDCNAS_RUN_ROOT", CDCNAS_ACCEPTANCE_ROOT, 1);
  }
  fs::create_directories(run_root());
  int failed = 0;
  for (const auto& [name, check] : checks) {
    if (!only.empty() && !only.count(name)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::cout << (o.pass ? "[PASS] " : "[FAIL] ") << name << " (" << fixed(s, 1) << " s): " << o.detail << std::endl;
  }
  return failed ? 1 : 0;
}
