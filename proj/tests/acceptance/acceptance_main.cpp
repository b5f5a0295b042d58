// Runs every acceptance criterion at its stated tolerance and prints one
// PASS/FAIL line per criterion. Exit status is nonzero if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "egf_tools/checks.hpp"
#include "egf_tools/cli.hpp"
#include "egformer/checkpoint.hpp"
#include "egformer/experiment.hpp"

using namespace egf;
using namespace egf::tools;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
  bool passed;
  std::string detail;
};

Outcome combine(std::initializer_list<CheckResult> results) {
  Outcome o{true, ""};
  for (const CheckResult& r : results) {
    o.passed &= r.passed;
    if (!o.detail.empty()) o.detail += "; ";
    o.detail += r.name + ": " + r.detail;
  }
  return o;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

const std::vector<Sample>& toy_data() {
  static const std::vector<Sample> data = [] {
    DatasetSpec spec;  // 64 train / 16 test, 32x64, seed 0
    return generate_dataset(spec);
  }();
  return data;
}

ToyRun toy_run(std::uint64_t seed, oracle::Variant variant) {
  RunConfig cfg;
  cfg.model.arch = parse_arch("EE-E-EE");
  cfg.model.seed = seed;
  cfg.variant = variant;
  TrainOptions opts;
  opts.steps = 1000;
  const auto start = Clock::now();
  ToyRun r = run_toy(cfg, toy_data(), opts);
  std::cout << "  seed " << seed << " " << oracle::to_string(variant) << ": train loss "
            << fmt(r.initial_train_loss) << " -> " << fmt(r.final_train_loss) << ", test abs_rel "
            << fmt(r.untrained.abs_rel) << " -> " << fmt(r.trained.abs_rel) << " ("
            << fmt(seconds_since(start)) << " s)" << std::endl;
  return r;
}

ToyRun& full_seed0() {
  static ToyRun run = toy_run(0, oracle::Variant::kFull);
  return run;
}

Outcome criterion_mechanism() {
  const auto start = Clock::now();
  Outcome o = combine({check_oracle_equivalence(20)});
  const double t = seconds_since(start);
  o.passed &= t < 30.0;
  o.detail += ", " + fmt(t) + " s (limit 30 s)";
  return o;
}

Outcome criterion_gradients() {
  const auto start = Clock::now();
  const CheckResult block = check_block_gradients(1e-4);
  const ModelGradcheck model = check_model_gradients("E-E-E", 8, 16, 4, 2, 1e-3);
  Outcome o = combine({block, model.result});
  const double t = seconds_since(start);
  o.passed &= t < 300.0;
  o.detail += ", " + fmt(t) + " s (limit 300 s)";
  return o;
}

Outcome criterion_training() {
  const auto start = Clock::now();
  const ToyRun& r = full_seed0();
  const double t = seconds_since(start);
  const double ratio = r.final_train_loss / r.initial_train_loss;
  const double gain = r.untrained.abs_rel / r.trained.abs_rel;
  bool finite = true;
  for (const TrainLogRow& row : r.log) finite &= std::isfinite(row.loss);
  const bool ok = ratio < 0.3 && gain >= 2.0 && t < 1200.0 && finite;
  return {ok, "train loss ratio " + fmt(ratio) + " (< 0.3), test abs_rel " +
                  fmt(r.untrained.abs_rel) + " -> " + fmt(r.trained.abs_rel) + " = " + fmt(gain) +
                  "x (>= 2), " + fmt(t) + " s (limit 1200 s)"};
}

Outcome criterion_ablation() {
  double full = 0.0, soft = 0.0;
  std::string per_seed;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const double f = seed == 0 ? full_seed0().trained.abs_rel
                               : toy_run(seed, oracle::Variant::kFull).trained.abs_rel;
    const double s = toy_run(seed, oracle::Variant::kSoftmax).trained.abs_rel;
    full += f / 3.0;
    soft += s / 3.0;
    per_seed += " seed " + std::to_string(seed) + " " + fmt(f) + " vs " + fmt(s) + ";";
  }
  return {full <= 1.05 * soft, "mean test abs_rel full " + fmt(full) + " vs softmax " + fmt(soft) +
                                   " x 1.05 = " + fmt(1.05 * soft) + " |" + per_seed};
}

Outcome criterion_determinism() {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "egf_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ostringstream sink;
  auto run = [&](std::vector<std::string> args) { return run_cli(args, sink, sink); };
  const std::string data = (dir / "data").string();
  int code = run({"egf", "gen-data", "--out", data, "--scenes", "6", "--h", "16", "--w", "32",
                  "--seed", "3"});
  std::string ckpt[2];
  for (int i = 0; i < 2 && code == 0; ++i) {
    ckpt[i] = (dir / ("run" + std::to_string(i) + ".egtn")).string();
    code = run({"egf", "train-toy", "--data", data, "--arch", "E-E-E", "--c0", "8", "--heads", "2",
                "--steps", "25", "--lr", "0.01", "--seed", "11", "--ckpt", ckpt[i], "--quiet"});
  }
  if (code != 0) return {false, "egf exited with " + std::to_string(code) + ": " + sink.str()};
  const bool same = read_file(ckpt[0]) == read_file(ckpt[1]);
  const CheckResult pfm = check_pfm_round_trip();
  fs::remove_all(dir);
  return {same && pfm.passed, std::string("two train-toy runs give ") +
                                  (same ? "bit-identical" : "DIFFERENT") + " checkpoints; pfm " +
                                  pfm.detail + " (limit 1e-06)"};
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    std::function<Outcome()> run;
  };
  const Criterion criteria[] = {
      {"1 mechanism correctness", criterion_mechanism},
      {"2 ERPE properties", [] { return combine({check_erpe_antisymmetry(), check_erpe_structure()}); }},
      {"3 DAS properties", [] { return combine({check_das(100000)}); }},
      {"4 EaAR properties", [] { return combine({check_eaar()}); }},
      {"5 FLOP audit", [] { return combine({check_flop_audit()}); }},
      {"6 gradient audit", criterion_gradients},
      {"7 toy training", criterion_training},
      {"8 ablation direction", criterion_ablation},
      {"9 metrics correctness", [] { return combine({check_metrics()}); }},
      {"10 determinism and I/O", criterion_determinism},
  };
  int failed = 0;
  for (const Criterion& c : criteria) {
    Outcome o{false, ""};
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.passed;
    std::cout << (o.passed ? "PASS " : "FAIL ") << "criterion " << c.name << ": " << o.detail
              << std::endl;
  }
  std::cout << (failed == 0 ? "acceptance: all criteria passed"
                            : "acceptance: " + std::to_string(failed) + " criteria failed")
            << std::endl;
  return failed == 0 ? 0 : 1;
}
