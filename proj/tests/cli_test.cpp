#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "cdcnas/config.hpp"

using namespace cdcnas;
namespace fs = std::filesystem;

namespace {

fs::path scratch() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / ("cdcnas_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

struct CliResult {
  int code;
  std::string err;
};

CliResult cli(const std::string& args) {
  const fs::path err = scratch() / "stderr.txt";
  const std::string cmd = "CDCNAS_RUN_ROOT='" + scratch().string() + "' '" + CDCNAS_CLI + "' " + args + " > /dev/null 2> '" +
                          err.string() + "'";
  const int status = std::system(cmd.c_str());
  std::ifstream in(err);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

}  // namespace

TEST(RunConfig, DefaultsPerCommand) {
  RunConfig t("train");
  EXPECT_EQ(t.str("out"), "train");
  EXPECT_EQ(t.integer("train_epochs"), 40);
  RunConfig s("theta-sweep");
  EXPECT_EQ(s.integer("train_epochs"), 12);
  EXPECT_EQ(s.list("modalities"), (std::vector<std::string>{"rgb"}));
  EXPECT_THROW(RunConfig("fly"), ConfigError);
}

TEST(RunConfig, RejectsUnknownAndForeignKeys) {
  RunConfig c("synth");
  EXPECT_THROW(c.set("colour", "red"), ConfigError);
  EXPECT_THROW(c.set("train_epochs", "3"), ConfigError);
  c.set("frames", " 16 ");
  EXPECT_EQ(c.integer("frames"), 16);
}

TEST(RunConfig, FileSkipsKeysOfOtherCommands) {
  RunConfig c("synth");
  c.merge_text("# pipeline\nframes = 8\ntrain_epochs = 3  # training only\n\nseed=4\n", "inline");
  EXPECT_EQ(c.integer("frames"), 8);
  EXPECT_EQ(c.integer("seed"), 4);
  EXPECT_THROW(c.merge_text("frams = 8\n", "inline"), ConfigError);
  EXPECT_THROW(c.merge_text("frames 8\n", "inline"), ConfigError);
}

TEST(RunConfig, TypedAccessorsReportBadValues) {
  RunConfig c("synth");
  c.set("frames", "1.5");
  EXPECT_THROW(c.integer("frames"), ConfigError);
  c.set("rgb_noise", "x");
  EXPECT_THROW(c.real("rgb_noise"), ConfigError);
  RunConfig b("search-backbone");
  b.set("edge_norm", "maybe");
  EXPECT_THROW(b.flag("edge_norm"), ConfigError);
  b.set("rates", "4, 8,16");
  EXPECT_EQ(b.integers("rates"), (std::vector<long>{4, 8, 16}));
}

TEST(RunConfig, DumpRoundTrips) {
  RunConfig a("search-lateral");
  a.set("arch_lr", "0.01");
  a.set("channels", "4,4,2");
  RunConfig b("search-lateral");
  b.merge_text(a.dump(), "dump");
  EXPECT_EQ(a.values(), b.values());
  EXPECT_EQ(a.dump().rfind("# search-lateral\n", 0), 0u);
}

TEST(Cli, UnknownFlagIsConfigError) {
  const CliResult r = cli("synth --colour red");
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("error: config: ", 0), 0u) << r.err;
}

TEST(Cli, BadValueIsConfigError) {
  EXPECT_EQ(cli("synth --frames many --out bad").code, 1);
}

TEST(Cli, MissingArtifactsExitTwo) {
  const CliResult r = cli("train --genotype nowhere/genotype.json --out t");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("missing-artifact"), std::string::npos) << r.err;
  EXPECT_EQ(cli("eval --model nowhere --out e").code, 2);
  EXPECT_EQ(cli("synth --config nowhere.cfg").code, 2);
}

TEST(Cli, CorruptGenotypeExitsFour) {
  std::ofstream(scratch() / "broken.json") << "{\"schema_version\": 1, \"stage1\": [";
  EXPECT_EQ(cli("derive --alpha broken.json --out d").code, 4);
  EXPECT_EQ(cli("train --genotype broken.json --out t").code, 4);
}

TEST(Cli, GradcheckAboveToleranceExitsFive) {
  const CliResult r = cli("gradcheck --tolerance 1e-14 --out g");
  EXPECT_EQ(r.code, 5);
  EXPECT_NE(r.err.find("check-failed"), std::string::npos) << r.err;
  EXPECT_EQ(cli("gradcheck --out g").code, 0);
}

TEST(Cli, ConfigFileAndFlagsRecordedInRun) {
  std::ofstream(scratch() / "run.cfg") << "per_class = 2\nframes = 8\nsize = 12\nradius = 2\ntrain_epochs = 9\n";
  ASSERT_EQ(cli("synth --config run.cfg --frames 12 --out small").code, 0);
  std::ifstream in(scratch() / "small" / "config.txt");
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  EXPECT_EQ(text.rfind("# synth\n", 0), 0u);
  EXPECT_NE(text.find("frames = 12\n"), std::string::npos);
  EXPECT_NE(text.find("per_class = 2\n"), std::string::npos);
  EXPECT_EQ(text.find("train_epochs"), std::string::npos);
  EXPECT_TRUE(fs::exists(scratch() / "small" / "manifest.tsv"));
}
