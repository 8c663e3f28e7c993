#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "cunet/byteio.hpp"
#include "cunet/config.hpp"
#include "cunet/error.hpp"
#include "cunet/phantom.hpp"
#include "cunet/volume.hpp"

using namespace cunet;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = -1;
  json out;
};

CliResult run_cli(const std::string& args) {
  const std::string cmd = std::string(CUNET_CLI_PATH) + " " + args + " 2>/dev/null";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::string text;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) text.append(buf, n);
  const int status = pclose(pipe);
  CliResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = json::parse(text);
  return r;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cunet_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

}  // namespace

TEST_CASE("config parsing is strict and round-trips") {
  try {
    parse_config(json::parse(R"({"train": {"lrr": 1e-3}})"));
    FAIL("expected rejection");
  } catch (const ContractError& e) {
    CHECK(std::string(e.what()).find("train.lrr") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_config(json::parse(R"({"bogus": 1})")), ContractError);
  CHECK_THROWS_AS(parse_config(json::parse(R"({"train": {"epochs": "many"}})")), ContractError);

  RunConfig cfg = parse_config(json::parse(R"({"seed": 9, "train": {"lr0": 1e-3, "patch": [16, 16, 32]}})"));
  cfg.finalize();
  CHECK(cfg.train.seed == 9);
  CHECK(cfg.net.init_seed == 9);
  CHECK(cfg.train.patch == Grid{16, 16, 32});
  CHECK(cfg.train.plateau_patience == 30);
  const RunConfig again = parse_config(to_json(cfg));
  CHECK(to_json(again) == to_json(cfg));

  const RunConfig desk = desk_preset();
  CHECK(desk.net.base_width == 4);
  CHECK(desk.net.depth == 3);
  CHECK(desk.train.patch == Grid{16, 16, 16});
  CHECK(desk.train.epochs == 20);
  CHECK(desk.train.steps_per_epoch == 50);

  RunConfig bad;
  bad.train.plateau_factor = 2.0;
  CHECK_THROWS_AS(bad.finalize(), ContractError);
}

TEST_CASE("cli: invalid config fails with JSON and writes nothing") {
  const fs::path dir = scratch("invalid");
  write_text(dir / "cfg.json", R"({"train": {"epochs": 3, "typo": true}})");
  const CliResult r = run_cli("train --config " + (dir / "cfg.json").string() + " --out " + (dir / "runs").string());
  CHECK(r.code != 0);
  CHECK(r.out.at("status") == "error");
  CHECK(r.out.at("message").get<std::string>().find("train.typo") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "runs"));
  fs::remove_all(dir);
}

TEST_CASE("cli: evaluate with pred == truth reports all ones") {
  const fs::path dir = scratch("evaluate");
  const VolumeSample s = gen_phantom_cohort(1, {12, 12, 12}, 0.1, 2).front();
  save_volume(s, dir / "case.bvol");
  write_text(dir / "cfg.json", json{{"evaluate", {{"pred", (dir / "case.bvol").string()},
                                                  {"truth", (dir / "case.bvol").string()}}}}
                                   .dump());
  const CliResult r = run_cli("evaluate --config " + (dir / "cfg.json").string() + " --out " + (dir / "runs").string());
  CHECK(r.code == 0);
  const json& rep = r.out.at("result");
  for (const char* k : {"wt", "tc", "et"})
    for (const char* m : {"dsc", "sensitivity", "specificity"}) CHECK(rep.at(k).at(m) == 1.0);
  CHECK(rep.at("mean_dsc") == 1.0);
  CHECK(fs::exists(fs::path(r.out.at("run_dir").get<std::string>()) / "manifest.json"));
  fs::remove_all(dir);
}

TEST_CASE("cli: inspect on the default config prints the encoder widths") {
  const fs::path dir = scratch("inspect");
  const CliResult r = run_cli("inspect --out " + (dir / "runs").string());
  CHECK(r.code == 0);
  CHECK(r.out.at("result").at("encoder_widths") == json::array({32, 64, 128, 256, 512}));
  CHECK(r.out.at("result").at("stem_width") == 16);
  fs::remove_all(dir);
}

TEST_CASE("cli: gradcheck suite passes") {
  const fs::path dir = scratch("gradcheck");
  const CliResult r = run_cli("gradcheck --out " + (dir / "runs").string());
  CHECK(r.code == 0);
  CHECK(r.out.at("result").at("passed") == true);
  fs::remove_all(dir);
}

TEST_CASE("cli: rerunning from a run manifest reproduces outputs byte for byte") {
  const fs::path dir = scratch("manifest");
  const CliResult a = run_cli("phantom --seed 4 --out " + (dir / "runs").string() +
                              " --config /dev/null");
  // /dev/null is not a JSON object; the first call must fail cleanly.
  CHECK(a.out.at("status") == "error");
  CHECK(a.code != 0);

  write_text(dir / "cfg.json", R"({"phantom": {"count": 3, "grid": [8, 8, 8]}})");
  const CliResult first = run_cli("phantom --seed 4 --config " + (dir / "cfg.json").string() +
                                  " --out " + (dir / "runs").string());
  REQUIRE(first.code == 0);
  const fs::path run1 = first.out.at("run_dir").get<std::string>();
  const CliResult second = run_cli("phantom --config " + (run1 / "manifest.json").string() +
                                   " --out " + (dir / "runs").string());
  REQUIRE(second.code == 0);
  const fs::path run2 = second.out.at("run_dir").get<std::string>();
  CHECK(run1 != run2);
  for (const char* f : {"data/phantom000.bvol", "data/phantom001.bvol", "data/phantom002.bvol",
                        "data/manifest.json"}) {
    CHECK(byteio::read_file(run1 / f) == byteio::read_file(run2 / f));
  }
  fs::remove_all(dir);
}
