#include <algorithm>
#include <chrono>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cdcnas/pipeline.hpp"
#include "oracles.hpp"

using namespace cdcnas;

namespace {

double median_ms(int repeats, const std::function<void()>& f) {
  std::vector<double> ms;
  for (int i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  std::sort(ms.begin(), ms.end());
  return ms[ms.size() / 2];
}

// Forward wall time of the fused CDC layers against plain conv3d and the
// nested-loop literal form.
void cmd_bench(const RunConfig& cfg, std::ostream& log) {
  const long c = cfg.integer("bench_channels"), t = cfg.integer("bench_frames"), s = cfg.integer("bench_size");
  const int k = static_cast<int>(cfg.integer("bench_kernel"));
  const long n = cfg.integer("bench_batch");
  const int repeats = static_cast<int>(cfg.integer("repeats"));
  const double theta = cfg.real("theta");
  if (repeats < 1 || c < 1 || t < 1 || s < 1 || n < 1 || k < 1 || k % 2 == 0) {
    throw ConfigError("bench needs positive sizes, repeats >= 1 and an odd kernel");
  }
  Rng rng(static_cast<std::uint64_t>(cfg.integer("seed")));
  const auto x = Tensor<float>::randn({n, c, t, s, s}, rng);
  const auto w = Tensor<float>::randn({c, c, k, k, k}, rng, 0.1);
  auto run = [&](const CdcConfig& conf) {
    Tape<float> tape(false);
    const auto y = cdc_forward(tape.constant(x), tape.constant(w), conf);
    if (y.value().numel() == 0) throw std::logic_error("empty output");
  };
  const fs::path dir = open_run(cfg);
  auto out = open_output(dir / "bench.csv");
  out << "op,theta,median_ms,vs_vanilla,literal_ms,speedup_vs_literal\n";
  run(CdcConfig::make(CdcVariant::Vanilla, 0.0, {k, k, k}));
  const double vanilla = median_ms(repeats, [&] { run(CdcConfig::make(CdcVariant::Vanilla, 0.0, {k, k, k})); });
  out << "conv3d,0," << fmt(vanilla, "%.3f") << ",1,,\n";
  log << "bench: input " << n << "x" << c << "x" << t << "x" << s << "x" << s << ", kernel " << k << "^3, median of "
      << repeats << '\n';
  log << "  conv3d          " << fmt(vanilla, "%9.3f") << " ms\n";
  for (CdcVariant v : {CdcVariant::ST, CdcVariant::T, CdcVariant::TR}) {
    const CdcConfig conf = CdcConfig::make(v, theta, {k, k, k});
    run(conf);
    const double fused = median_ms(repeats, [&] { run(conf); });
    const oracle::Kind kind = v == CdcVariant::ST ? oracle::Kind::ST : v == CdcVariant::T ? oracle::Kind::T : oracle::Kind::TR;
    const double literal = median_ms(1, [&] { oracle::cdc_literal(x, w, kind, theta); });
    out << "cdc_" << to_string(v) << ',' << fmt(theta, "%.2f") << ',' << fmt(fused, "%.3f") << ','
        << fmt(fused / vanilla, "%.4f") << ',' << fmt(literal, "%.1f") << ',' << fmt(literal / fused, "%.1f") << '\n';
    log << "  cdc_" << to_string(v) << (v == CdcVariant::ST ? "          " : v == CdcVariant::T ? "           " : "          ")
        << fmt(fused, "%9.3f") << " ms  overhead " << fmt(100.0 * (fused / vanilla - 1.0), "%+.1f") << "%  literal "
        << fmt(literal, "%.0f") << " ms (" << fmt(literal / fused, "%.0f") << "x)\n";
  }
}

struct ErrorClass {
  int code;
  const char* category;
};

ErrorClass classify(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ShapeError*>(&e)) return {1, "config"};
  if (dynamic_cast<const MissingArtifactError*>(&e)) return {2, "missing-artifact"};
  if (dynamic_cast<const DivergenceError*>(&e) || dynamic_cast<const NumericError*>(&e)) return {3, "divergence"};
  if (dynamic_cast<const FormatError*>(&e)) return {4, "corrupt"};
  if (dynamic_cast<const CheckFailed*>(&e)) return {5, "check-failed"};
  return {6, "internal"};
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  const std::map<std::string, std::function<void(const RunConfig&, std::ostream&)>> commands{
      {"synth", cmd_synth},         {"search-backbone", cmd_search_backbone},
      {"search-lateral", cmd_search_lateral}, {"derive", cmd_derive},
      {"train", cmd_train},         {"eval", cmd_eval},
      {"gradcheck", cmd_gradcheck}, {"bench", cmd_bench},
      {"theta-sweep", cmd_theta_sweep}, {"ablation", cmd_ablation}};
  const std::map<std::string, std::string> about{
      {"synth", "generate the synthetic RGB/depth gesture dataset"},
      {"search-backbone", "stage-1 cell search, one modality at a time"},
      {"search-lateral", "stage-2 lateral-connection search on fixed cells"},
      {"derive", "derive a genotype from stored architecture values"},
      {"train", "train a derived network"},
      {"eval", "evaluate one model or a mean-softmax ensemble"},
      {"gradcheck", "finite-difference gradient suite"},
      {"bench", "time fused CDC against conv3d and the literal form"},
      {"theta-sweep", "fixed-backbone accuracy over a theta grid"},
      {"ablation", "backbone and lateral ablation table"}};

  CLI::App app{"cdcnas: central difference convolutions and two-stage multi-rate architecture search.\n"
               "Relative paths resolve against $CDCNAS_RUN_ROOT when set."};
  app.require_subcommand(1);
  std::map<std::string, std::map<std::string, std::string>> flags;
  std::map<std::string, std::string> config_files;
  for (const auto& name : command_names()) {
    CLI::App* sub = app.add_subcommand(name, about.at(name));
    sub->add_option("--config", config_files[name], "flat key = value file (flags override it)");
    for (const auto& k : config_keys()) {
      if (!key_applies(k, name)) continue;
      auto it = k.command_default.find(name);
      const std::string def = it != k.command_default.end() ? it->second : k.fallback;
      sub->add_option_function<std::string>(
             "--" + k.name, [&flags, name, key = k.name](const std::string& v) { flags[name][key] = v; },
             k.help + (def.empty() ? "" : " [" + def + "]"))
          ->type_name("");
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: config: " << one_line(e.what()) << '\n';
    return 1;
  }
  const std::string name = app.get_subcommands().front()->get_name();
  try {
    RunConfig cfg(name);
    if (!config_files[name].empty()) cfg.merge_file(resolve_path(config_files[name]).string());
    for (const auto& [k, v] : flags[name]) cfg.set(k, v);
    commands.at(name)(cfg, std::cout);
  } catch (const std::exception& e) {
    const ErrorClass c = classify(e);
    std::cerr << "error: " << c.category << ": " << one_line(e.what()) << '\n';
    return c.code;
  }
  return 0;
}
