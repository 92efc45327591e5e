// opcrash: dataset generation, training, evaluation and benchmarks.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "opcrash/bench/bench.hpp"
#include "opcrash/crashdata/crashdata.hpp"
#include "opcrash/errors.hpp"
#include "opcrash/trainer/trainer.hpp"

namespace fs = std::filesystem;
using namespace opcrash;
using J = nlohmann::ordered_json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::uint64_t env_seed() {
  const char* env = std::getenv("OPCRASH_SEED");
  if (!env || !*env) return 0;
  const std::string s(env);
  if (s.find_first_not_of("0123456789") != std::string::npos) {
    throw UsageError("OPCRASH_SEED must be a non-negative integer, got '" + s + "'");
  }
  return std::stoull(s);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!text.empty() && text.back() != '\n') out << '\n';
  if (!out) throw FormatError("cannot write " + path.string());
}

void write_manifest(const fs::path& out, const std::string& command, const J& args,
                    const std::vector<fs::path>& inputs, const std::vector<std::string>& outputs) {
  J m;
  m["command"] = command;
  m["args"] = args;
  J in = J::array();
  for (const auto& p : inputs) in.push_back(p.string());
  m["inputs"] = in;
  m["outputs"] = outputs;
  write_text(out / "manifest.json", m.dump(2));
}

crashdata::DatasetFile load_split(const fs::path& dir, crashdata::Split s, bool required) {
  const auto path = crashdata::split_path(dir, s);
  if (!fs::exists(path)) {
    if (required) throw UsageError("missing dataset file " + path.string());
    return {};
  }
  return crashdata::read_dataset(path);
}

/// Config file (if any), then explicit flag overrides, then the seed fallback.
trainer::TrainConfig resolve_config(const std::string& config_path, const std::string& backbone,
                                    const std::string& strategy, std::optional<std::uint64_t> seed,
                                    std::optional<std::size_t> epochs) {
  trainer::TrainConfig c;
  if (!config_path.empty()) {
    if (!fs::exists(config_path)) throw UsageError("missing config file " + config_path);
    c = trainer::load_train_config(config_path);
  } else {
    c.seed = env_seed();
  }
  if (!backbone.empty()) c.backbone = model::parse_backbone(backbone);
  if (!strategy.empty()) c.strategy = temporal::parse_strategy(strategy);
  if (seed) c.seed = *seed;
  if (epochs) c.epochs = *epochs;
  c.validate();
  return c;
}

std::vector<std::size_t> parse_list(const std::string& flag, const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos) {
      throw UsageError(flag + ": expected comma-separated integers, got '" + text + "'");
    }
    out.push_back(std::stoull(item));
  }
  if (out.empty()) throw UsageError(flag + ": empty list");
  return out;
}

// ------------------------------------------------------------------ commands

struct GenArgs {
  std::string levels = "3,3,3";
  std::size_t nodes = 512, frames = 50, substeps = 100, threads = 1;
  std::optional<std::uint64_t> seed;
  std::string out;
};

int cmd_gen_data(const GenArgs& a) {
  const auto lv = parse_list("--levels", a.levels);
  if (lv.size() != 3) throw UsageError("--levels takes three counts: velocities,thicknesses,offsets");
  crashdata::DoeLevels levels;
  try {
    levels = crashdata::DoeLevels{}.truncated(lv[0], lv[1], lv[2]);
  } catch (const ConfigError& e) {
    throw UsageError(std::string("--levels: ") + e.what());
  }
  crashdata::GenerateOptions o;
  o.nodes = a.nodes;
  o.sim.frames = a.frames;
  o.sim.substeps = a.substeps;
  o.seed = a.seed.value_or(env_seed());
  o.threads = a.threads;
  const auto set = crashdata::generate_doe(levels, o);
  crashdata::write_generated(a.out, set, levels, o);
  std::cout << "generated " << set.configs.size() << " samples (" << set.files[0].samples.size()
            << " train / " << set.files[1].samples.size() << " val / " << set.files[2].samples.size()
            << " test), N=" << set.files[0].points << ", T=" << a.frames << " -> " << a.out << '\n';
  return 0;
}

struct TrainArgs {
  std::string config, data, backbone, strategy, out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
};

int cmd_train(const TrainArgs& a) {
  const auto cfg = resolve_config(a.config, a.backbone, a.strategy, a.seed, a.epochs);
  const auto train = load_split(a.data, crashdata::Split::kTrain, true);
  const auto val = load_split(a.data, crashdata::Split::kVal, false);
  const auto r = trainer::train(cfg, train, val, fs::path(a.out));

  std::size_t unstable = 0;
  for (const auto& e : r.ledger.records()) unstable += e.unstable() ? 1 : 0;
  J args{{"backbone", model::to_string(cfg.backbone)},
         {"strategy", temporal::to_string(cfg.strategy)},
         {"seed", cfg.seed},
         {"epochs", cfg.epochs}};
  std::vector<fs::path> inputs{crashdata::split_path(a.data, crashdata::Split::kTrain)};
  if (!val.samples.empty()) inputs.push_back(crashdata::split_path(a.data, crashdata::Split::kVal));
  if (!a.config.empty()) inputs.emplace_back(a.config);
  std::vector<std::string> outputs{"ledger.jsonl", "config.txt"};
  if (cfg.save_checkpoints) {
    outputs.push_back("best.opck");
    outputs.push_back("last.opck");
  }
  write_manifest(a.out, "train", args, inputs, outputs);

  const auto& last = r.ledger.records().back();
  std::cout << "trained " << cfg.epochs << " epochs, final loss " << last.train_loss;
  if (r.best_val) std::cout << ", best val rel L2 " << *r.best_val << " (epoch " << r.best_epoch << ')';
  std::cout << '\n';
  if (unstable) std::cout << "unstable: " << unstable << " epoch(s) with AR divergence\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint, data, split = "test", out;
};

int cmd_eval(const EvalArgs& a) {
  fs::path ckpt = a.checkpoint;
  if (fs::is_directory(ckpt)) ckpt /= "best.opck";
  if (!fs::exists(ckpt)) throw UsageError("missing checkpoint " + ckpt.string());
  const auto split = crashdata::parse_split(a.split);
  const auto data = load_split(a.data, split, true);
  const auto run = trainer::load_run(ckpt);
  const auto rec = trainer::evaluate_run(run, data);

  fs::create_directories(a.out);
  write_text(fs::path(a.out) / "metrics.json", trainer::eval_json(rec));
  write_text(fs::path(a.out) / "per_step.tsv", trainer::per_step_table(rec, data.dt));
  write_manifest(a.out, "eval", J{{"split", a.split}}, {ckpt, crashdata::split_path(a.data, split)},
                 {"metrics.json", "per_step.tsv"});
  std::cout << a.split << " rel L2 " << rec.rel_l2 << " over " << rec.samples.size() << " samples";
  if (rec.unstable) std::cout << "; unstable (" << rec.unstable << " diverged)";
  std::cout << '\n';
  return 0;
}

struct MemArgs {
  std::string ns = "1024,2048,4096,8192";
  std::size_t m = 128, channels = 256, heads = 8, context = 34;
  std::string out;
};

int cmd_bench_mem(const MemArgs& a) {
  bench::MemOptions o;
  o.ns = parse_list("--ns", a.ns);
  o.m = a.m;
  o.channels = a.channels;
  o.heads = a.heads;
  o.context_tokens = a.context;
  const auto r = bench::run_bench_mem(o);
  fs::create_directories(a.out);
  write_text(fs::path(a.out) / "bench_mem.json", bench::to_json(r));
  write_manifest(a.out, "bench-mem",
                 J{{"ns", o.ns}, {"m", o.m}, {"channels", o.channels}, {"heads", o.heads},
                   {"context", o.context_tokens}},
                 {}, {"bench_mem.json"});
  for (const auto& b : r.backbones) {
    std::cout << model::to_string(b.backbone) << ": quadratic share " << b.quadratic_fraction
              << ", peak(2M)/peak(M) " << b.m_doubling_ratio << '\n';
  }
  std::cout << "peak(GeoTS)/peak(GeoTS-FLARE) = " << r.geots_over_flare << '\n';
  return 0;
}

struct EpochArgs {
  std::string config, data, backbone, out;
  std::size_t epochs = 3, queries = 8;
  std::optional<std::size_t> max_train;
  std::optional<std::uint64_t> seed;
};

int cmd_bench_epoch(const EpochArgs& a) {
  bench::EpochOptions o;
  o.base = resolve_config(a.config, a.backbone, "", a.seed, std::nullopt);
  if (a.max_train) o.base.max_train = *a.max_train;
  o.epochs = a.epochs;
  o.tc_queries = a.queries;
  o.base.time_samples = a.queries;
  const auto train = load_split(a.data, crashdata::Split::kTrain, true);
  const auto r = bench::run_bench_epoch(o, train);
  fs::create_directories(a.out);
  write_text(fs::path(a.out) / "bench_epoch.json", bench::to_json(r));
  std::vector<fs::path> inputs{crashdata::split_path(a.data, crashdata::Split::kTrain)};
  if (!a.config.empty()) inputs.emplace_back(a.config);
  write_manifest(a.out, "bench-epoch",
                 J{{"backbone", model::to_string(o.base.backbone)}, {"epochs", o.epochs},
                   {"queries", o.tc_queries}, {"seed", o.base.seed}},
                 inputs, {"bench_epoch.json"});
  for (const auto& s : r.strategies) {
    std::cout << temporal::to_string(s.strategy) << ": median epoch " << s.median_seconds
              << " s, inference calls " << s.inference_calls << (s.unstable ? " (unstable)" : "")
              << '\n';
  }
  std::cout << "ordering one-shot < time-conditional < ar: " << (r.ordered ? "yes" : "no") << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Crash-dynamics surrogate toolkit"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Simulate the DoE sweep and write train/val/test files");
  g->add_option("--levels", gen.levels, "Levels per factor: velocities,thicknesses,offsets")->capture_default_str();
  g->add_option("--nodes", gen.nodes, "Target lattice node count")->capture_default_str()->check(CLI::PositiveNumber);
  g->add_option("--frames", gen.frames, "Stored frames T")->capture_default_str()->check(CLI::PositiveNumber);
  g->add_option("--substeps", gen.substeps, "Integrator substeps per frame")->capture_default_str()->check(CLI::PositiveNumber);
  g->add_option("--seed", gen.seed, "Seed (default: OPCRASH_SEED, else 0)");
  g->add_option("--threads", gen.threads, "Simulation threads")->capture_default_str()->check(CLI::PositiveNumber);
  g->add_option("--out", gen.out, "Output directory")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a surrogate");
  t->add_option("--config", tr.config, "key = value run config");
  t->add_option("--data", tr.data, "Dataset directory")->required();
  t->add_option("--backbone", tr.backbone, "ts | geots | geots-flare");
  t->add_option("--strategy", tr.strategy, "oneshot | time | ar | tf");
  t->add_option("--seed", tr.seed, "Overrides the config seed");
  t->add_option("--epochs", tr.epochs, "Overrides the config epochs")->check(CLI::PositiveNumber);
  t->add_option("--out", tr.out, "Run directory")->required();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file or run directory")->required();
  e->add_option("--data", ev.data, "Dataset directory")->required();
  e->add_option("--split", ev.split, "train | val | test")->capture_default_str();
  e->add_option("--out", ev.out, "Output directory")->required();

  MemArgs mem;
  auto* bm = app.add_subcommand("bench-mem", "Peak attention-block memory sweep");
  bm->add_option("--ns", mem.ns, "Point counts")->capture_default_str();
  bm->add_option("--m", mem.m, "Slice / latent tokens")->capture_default_str()->check(CLI::PositiveNumber);
  bm->add_option("--channels", mem.channels, "Channels")->capture_default_str()->check(CLI::PositiveNumber);
  bm->add_option("--heads", mem.heads, "Heads")->capture_default_str()->check(CLI::PositiveNumber);
  bm->add_option("--context", mem.context, "Context tokens")->capture_default_str()->check(CLI::PositiveNumber);
  bm->add_option("--out", mem.out, "Output directory")->required();

  EpochArgs ep;
  auto* be = app.add_subcommand("bench-epoch", "Median epoch time per temporal strategy");
  be->add_option("--config", ep.config, "key = value run config");
  be->add_option("--data", ep.data, "Dataset directory")->required();
  be->add_option("--backbone", ep.backbone, "ts | geots | geots-flare");
  be->add_option("--epochs", ep.epochs, "Timed epochs (>= 3)")->capture_default_str();
  be->add_option("--queries", ep.queries, "Time-conditional queries")->capture_default_str()->check(CLI::PositiveNumber);
  be->add_option("--max-train", ep.max_train, "Training samples per epoch");
  be->add_option("--seed", ep.seed, "Overrides the config seed");
  be->add_option("--out", ep.out, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*g) return cmd_gen_data(gen);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*bm) return cmd_bench_mem(mem);
    if (*be) return cmd_bench_epoch(ep);
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << "\n\n" << app.help();
    return 2;
  } catch (const ConfigError& err) {
    std::cerr << "error: " << err.what() << "\n\n" << app.help();
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return 0;
}
