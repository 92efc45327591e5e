#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include <json.hpp>

#include "doctest.h"

namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "opcrash_cli_test";

int run(const std::string& args) {
  const std::string cmd = "cd '" + kRoot.string() + "' && '" OPCRASH_CLI_PATH "' " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

/// Ledger lines with the wall-clock field removed.
std::string ledger_without_timing(const fs::path& p) {
  std::ifstream in(p);
  std::string line, out;
  while (std::getline(in, line)) {
    auto j = nlohmann::ordered_json::parse(line);
    j.erase("wall_s");
    out += j.dump() + '\n';
  }
  return out;
}

void fresh_root() {
  fs::remove_all(kRoot);
  fs::create_directories(kRoot);
  std::ofstream(kRoot / "tiny.cfg") << "# tiny model\n"
                                       "tokens = 4\nlayers = 1\nheads = 2\nchannels = 8\n"
                                       "context_anchors = 4\nscales = 0.1:4, 0.3:8\n"
                                       "eval_every = 1\nepochs = 2\n";
}

}  // namespace

TEST_CASE("gen-data: single config, full sweep counts, byte-identical reruns") {
  fresh_root();
  REQUIRE(run("gen-data --levels 1,1,1 --nodes 60 --frames 3 --out one") == 0);
  const auto m1 = read_json(kRoot / "one/manifest.json");
  CHECK(m1["configs"].size() == 1);

  REQUIRE(run("gen-data --nodes 60 --frames 3 --seed 9 --out a") == 0);
  const auto m = read_json(kRoot / "a/manifest.json");
  CHECK(m["configs"].size() == 27);
  CHECK(m["splits"]["train"]["samples"] == 21);
  CHECK(m["splits"]["val"]["samples"] == 3);
  CHECK(m["splits"]["test"]["samples"] == 3);

  REQUIRE(run("gen-data --nodes 60 --frames 3 --seed 9 --threads 2 --out b") == 0);
  for (const char* f : {"train.opds", "val.opds", "test.opds"}) {
    CAPTURE(f);
    CHECK(slurp(kRoot / "a" / f) == slurp(kRoot / "b" / f));
  }
  CHECK(slurp(kRoot / "a/manifest.json") == slurp(kRoot / "b/manifest.json"));

  // OPCRASH_SEED is the fallback when --seed is absent.
  REQUIRE(run("gen-data --nodes 60 --frames 3 --out c") == 0);
  REQUIRE(setenv("OPCRASH_SEED", "9", 1) == 0);
  REQUIRE(run("gen-data --nodes 60 --frames 3 --out d") == 0);
  unsetenv("OPCRASH_SEED");
  CHECK(slurp(kRoot / "d/train.opds") == slurp(kRoot / "a/train.opds"));
  CHECK(slurp(kRoot / "c/manifest.json") != slurp(kRoot / "a/manifest.json"));
}

TEST_CASE("train then eval, deterministic reruns, AR at T=50 never crashes") {
  fresh_root();
  REQUIRE(run("gen-data --levels 2,2,2 --nodes 60 --frames 6 --seed 1 --out data") == 0);
  REQUIRE(run("train --config tiny.cfg --data data --strategy oneshot --out r1") == 0);
  for (const char* f : {"ledger.jsonl", "config.txt", "best.opck", "last.opck", "manifest.json"}) {
    CAPTURE(f);
    CHECK(fs::exists(kRoot / "r1" / f));
  }
  REQUIRE(run("eval --checkpoint r1 --data data --split val --out e1") == 0);
  const auto metrics = read_json(kRoot / "e1/metrics.json");
  CHECK(metrics["samples"].get<int>() > 0);
  CHECK(metrics["rel_l2_per_step"].size() == 6);
  CHECK(!slurp(kRoot / "e1/per_step.tsv").empty());

  REQUIRE(run("train --config tiny.cfg --data data --strategy oneshot --out r2") == 0);
  CHECK(ledger_without_timing(kRoot / "r1/ledger.jsonl") == ledger_without_timing(kRoot / "r2/ledger.jsonl"));
  CHECK(slurp(kRoot / "r1/last.opck") == slurp(kRoot / "r2/last.opck"));

  REQUIRE(run("gen-data --levels 1,1,2 --nodes 60 --frames 50 --seed 1 --out long") == 0);
  REQUIRE(run("train --config tiny.cfg --data long --strategy ar --epochs 1 --out ar") == 0);
  REQUIRE(run("eval --checkpoint ar/last.opck --data long --split train --out ear") == 0);
  const auto verdict = read_json(kRoot / "ear/metrics.json")["verdict"].get<std::string>();
  CHECK((verdict == "ok" || verdict == "unstable"));
}

TEST_CASE("usage errors exit nonzero") {
  fresh_root();
  REQUIRE(run("gen-data --levels 1,1,1 --nodes 60 --frames 3 --out data") == 0);
  CHECK(run("train --data data --backbone nonsense --out r") != 0);
  CHECK(run("train --data data --strategy sideways --out r") != 0);
  CHECK(run("gen-data --levels 4,1,1 --out x") != 0);
  CHECK(run("gen-data --frobnicate --out x") != 0);
  CHECK(run("gen-data") != 0);
  CHECK(run("") != 0);
  CHECK(run("train --data missing --out r") != 0);
  CHECK(run("eval --checkpoint missing --data data --out e") != 0);
  CHECK(run("train --config missing.cfg --data data --out r") != 0);
}

TEST_CASE("bench commands write machine-readable reports") {
  fresh_root();
  REQUIRE(run("bench-mem --ns 32,64,96,128 --m 4 --channels 8 --heads 2 --context 4 --out mem") == 0);
  const auto mem = read_json(kRoot / "mem/bench_mem.json");
  CHECK(mem["fits"].size() == 3);
  CHECK(mem["geots_over_geots_flare"].get<double>() >= 1.0);
  CHECK(fs::exists(kRoot / "mem/manifest.json"));
  CHECK(run("bench-mem --ns 32,64 --out mem2") != 0);

  REQUIRE(run("gen-data --levels 2,1,1 --nodes 60 --frames 4 --out data") == 0);
  REQUIRE(run("bench-epoch --config tiny.cfg --data data --queries 2 --out ep") == 0);
  const auto ep = read_json(kRoot / "ep/bench_epoch.json");
  REQUIRE(ep["strategies"].size() == 3);
  CHECK(ep["strategies"][0]["inference_calls"] == 1);
  CHECK(ep["strategies"][1]["inference_calls"] == 2);
  CHECK(ep["strategies"][2]["inference_calls"] == 4);
  CHECK(ep["calls_match"] == true);
}
