#include "egf_tools/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "egf_tools/checks.hpp"
#include "egformer/checkpoint.hpp"
#include "egformer/experiment.hpp"

namespace egf::tools {

namespace fs = std::filesystem;

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

fs::path config_path_for(const fs::path& ckpt) { return fs::path(ckpt.string() + ".cfg"); }

std::string metrics_fields(const DepthMetrics& m) {
  std::ostringstream os;
  os << std::setprecision(10) << m.abs_rel << ',' << m.sq_rel << ',' << m.rms_lin << ','
     << m.rms_log << ',' << m.delta1 << ',' << m.delta2 << ',' << m.delta3;
  return os.str();
}

const char* kMetricsHeader = "abs_rel,sq_rel,rms_lin,rms_log,delta1,delta2,delta3";

struct ModelFlags {
  std::string arch = "EE-E-EE";
  std::size_t base_channels = 16;
  std::string heads = "4";
  std::size_t patch_kernel = 3;
  double rho = 0.1;
  std::string variant = "full";

  void add_to(CLI::App* cmd) {
    cmd->add_option("--arch", arch, "Architecture string")->capture_default_str();
    cmd->add_option("--c0", base_channels, "Channels at full resolution")->capture_default_str();
    cmd->add_option("--heads", heads, "Heads, one value or one per level")->capture_default_str();
    cmd->add_option("--patch-kernel", patch_kernel)->capture_default_str();
    cmd->add_option("--rho", rho, "ERPE bias level")->capture_default_str();
    cmd->add_option("--variant", variant, "full|no-das|no-eaar|no-erpe|softmax")
        ->capture_default_str();
  }

  RunConfig run_config(std::size_t height, std::size_t width, std::uint64_t seed) const {
    RunConfig cfg;
    cfg.model.height = height;
    cfg.model.width = width;
    cfg.model.base_channels = base_channels;
    cfg.model.heads.clear();
    for (const std::string& h : split_list(heads)) cfg.model.heads.push_back(std::stoul(h));
    cfg.model.patch_kernel = patch_kernel;
    cfg.model.arch = parse_arch(arch);
    cfg.model.seed = seed;
    cfg.model.attention.rho = rho;
    cfg.variant = oracle::parse_variant(variant);
    cfg.model.validate();
    return cfg;
  }
};

struct TrainFlags {
  std::size_t steps = 1000;
  double lr = 1e-2;
  double clip = 1.0;
  std::size_t batch = 1;
  std::uint64_t seed = 0;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--steps", steps)->capture_default_str();
    cmd->add_option("--lr", lr)->capture_default_str();
    cmd->add_option("--clip", clip, "Global gradient norm clip, 0 disables")->capture_default_str();
    cmd->add_option("--batch", batch)->capture_default_str();
    cmd->add_option("--seed", seed)->capture_default_str();
  }

  TrainOptions options() const { return {steps, lr, clip, batch}; }
};

// Dataset from --data, or the default toy dataset generated in memory.
std::vector<Sample> load_or_generate(const std::string& dir, std::uint64_t data_seed) {
  if (!dir.empty()) return read_dataset(dir);
  DatasetSpec spec;
  spec.seed = data_seed;
  return generate_dataset(spec, thread_budget());
}

void require_uniform_size(const std::vector<Sample>& data) {
  if (data.empty()) throw std::invalid_argument("dataset is empty");
  for (const Sample& s : data) {
    if (s.image.height != data[0].image.height || s.image.width != data[0].image.width) {
      throw std::invalid_argument("dataset mixes image sizes");
    }
  }
}

// ---- commands -----------------------------------------------------------------

int cmd_selfcheck(const std::vector<std::string>& only, bool inject_fault, std::ostream& out) {
  for (const std::string& name : only) {
    const auto& all = suites();
    if (std::none_of(all.begin(), all.end(), [&](const Suite& s) { return s.name == name; })) {
      throw std::invalid_argument("unknown suite '" + name + "'");
    }
  }
  egf::testing::set_erpe_sign_fault(inject_fault);
  bool all_passed = true;
  out << std::left << std::setw(10) << "suite" << std::setw(20) << "check" << "result  detail\n";
  for (const Suite& suite : suites()) {
    if (!only.empty() && std::find(only.begin(), only.end(), suite.name) == only.end()) continue;
    for (const CheckResult& r : suite.run()) {
      all_passed &= r.passed;
      out << std::setw(10) << suite.name << std::setw(20) << r.name
          << (r.passed ? "PASS    " : "FAIL    ") << r.detail << '\n';
    }
  }
  egf::testing::set_erpe_sign_fault(false);
  out << (all_passed ? "selfcheck: all suites passed\n" : "selfcheck: FAILED\n");
  return all_passed ? kPass : kCheckFailed;
}

int cmd_gradcheck(const std::string& arch, std::size_t h, std::size_t w, std::size_t c0,
                  std::size_t heads, double tol, std::ostream& out) {
  const ModelGradcheck g = check_model_gradients(arch, h, w, c0, heads, tol);
  struct Group {
    std::size_t entries = 0;
    double rel = 0.0, abs = 0.0;
  };
  std::map<std::string, Group> groups;
  std::vector<std::string> order;
  for (const auto& a : g.audits) {
    const std::string key = a.name.substr(0, a.name.find('.'));
    if (!groups.count(key)) order.push_back(key);
    Group& grp = groups[key];
    grp.entries += a.entries;
    grp.rel = std::max(grp.rel, a.max_rel_error);
    grp.abs = std::max(grp.abs, a.max_abs_error);
  }
  out << "group,entries,max_rel_error,max_abs_error\n" << std::setprecision(6);
  for (const std::string& key : order) {
    const Group& grp = groups[key];
    out << key << ',' << grp.entries << ',' << grp.rel << ',' << grp.abs << '\n';
  }
  out << (g.result.passed ? "PASS " : "FAIL ") << g.result.detail << " (tolerance " << tol << ")\n";
  return g.result.passed ? kPass : kCheckFailed;
}

int cmd_flops(std::size_t h, std::size_t w, std::size_t c, std::size_t heads,
              const std::string& axis_name, const std::string& arch, std::size_t c0,
              std::ostream& out) {
  bool match = true;
  if (!arch.empty()) {
    ModelConfig cfg;
    cfg.height = h;
    cfg.width = w;
    cfg.base_channels = c0;
    cfg.heads = {heads};
    cfg.arch = parse_arch(arch);
    const DepthModel model(cfg);
    ForwardStats stats;
    model.forward(Tensor::zeros({h, w, 3}), &stats);
    match = stats.attention_macs == stats.formula_macs;
    out << "arch,h,w,c0,formula_macs,attention_macs,total_macs,params,verdict\n"
        << arch << ',' << h << ',' << w << ',' << c0 << ',' << stats.formula_macs << ','
        << stats.attention_macs << ',' << stats.total_macs << ',' << model.parameter_count() << ','
        << (match ? "MATCH" : "MISMATCH") << '\n';
    return match ? kPass : kCheckFailed;
  }
  std::vector<Axis> axes;
  if (axis_name == "h" || axis_name == "both") axes.push_back(Axis::kHorizontal);
  if (axis_name == "v" || axis_name == "both") axes.push_back(Axis::kVertical);
  if (axes.empty()) throw std::invalid_argument("--axis must be h, v or both");
  if (heads == 0 || c % heads != 0) throw std::invalid_argument("--c must be divisible by --heads");
  std::mt19937_64 rng(0);
  const AngularGrid grid(h, w);
  AttentionConfig cfg;
  cfg.heads = heads;
  cfg.head_dim = c / heads;
  const BlockParams p = BlockParams::init(c, rng);
  out << "axis,h,w,c,formula,instrumented,verdict\n";
  for (Axis axis : axes) {
    MacCounter counter;
    block_forward_axis(Tensor::zeros({h, w, c}), axis, build_erpe(grid, axis, cfg), p, cfg, &counter);
    const std::uint64_t formula = flop_formula(h, w, c, axis);
    const bool ok = formula == counter.macs();
    match &= ok;
    out << to_string(axis) << ',' << h << ',' << w << ',' << c << ',' << formula << ','
        << counter.macs() << ',' << (ok ? "MATCH" : "MISMATCH") << '\n';
  }
  return match ? kPass : kCheckFailed;
}

int cmd_gen_data(const std::string& dir, std::size_t scenes, std::size_t test, std::size_t h,
                 std::size_t w, std::uint64_t seed, std::ostream& out) {
  DatasetSpec spec;
  spec.test = test == 0 ? scenes / 5 : test;
  if (spec.test >= scenes) throw std::invalid_argument("--test must be smaller than --scenes");
  spec.train = scenes - spec.test;
  spec.height = h;
  spec.width = w;
  spec.seed = seed;
  write_dataset(dir, generate_dataset(spec, thread_budget()));
  out << "wrote " << scenes << " scenes (" << spec.train << " train, " << spec.test << " test) to "
      << dir << '\n';
  return kPass;
}

int cmd_train_toy(const std::string& data_dir, const ModelFlags& mf, const TrainFlags& tf,
                  const std::string& ckpt, std::string log_path, bool quiet, std::ostream& out) {
  const std::vector<Sample> data = read_dataset(data_dir);
  require_uniform_size(data);
  const RunConfig cfg = mf.run_config(data[0].image.height, data[0].image.width, tf.seed);
  const auto train_set = select_split(data, "train");
  DepthModel model = make_model(cfg);
  const auto log = train(model, train_set, tf.options(), tf.seed, [&](const TrainLogRow& r) {
    if (!quiet && (r.step % 100 == 0 || r.step + 1 == tf.steps)) {
      out << "step " << r.step << " loss " << r.loss << '\n';
    }
  });
  if (log_path.empty()) log_path = ckpt + ".log.csv";
  save_checkpoint(ckpt, model.named_parameters());
  write_file_atomic(config_path_for(ckpt), encode_run_config(cfg));
  write_file_atomic(log_path, train_log_csv(log));
  out << "checkpoint " << ckpt << ", " << model.parameter_count() << " parameters, train loss "
      << dataset_loss(model, train_set) << '\n';
  return kPass;
}

int cmd_eval(const std::string& data_dir, const std::string& ckpt, const std::string& report,
             const std::string& split, std::ostream& out) {
  const RunConfig cfg = decode_run_config(read_file(config_path_for(ckpt)));
  DepthModel model = make_model(cfg);
  model.load(load_checkpoint(ckpt));
  const std::vector<Sample> data = read_dataset(data_dir);
  std::vector<const Sample*> chosen;
  if (split == "all") {
    for (const Sample& s : data) chosen.push_back(&s);
  } else {
    chosen = select_split(data, split);
  }
  if (chosen.empty()) throw std::invalid_argument("no samples in split '" + split + "'");
  const auto reports = evaluate(model, chosen);
  std::ostringstream csv;
  write_report_csv(csv, reports);
  write_file_atomic(report, csv.str());
  out << "images,valid_pixels," << kMetricsHeader << '\n';
  const DepthMetrics m = average(reports);
  out << reports.size() << ',' << m.valid_pixels << ',' << metrics_fields(m) << '\n';
  return kPass;
}

int cmd_dump_bias(std::size_t h, std::size_t w, double rho, const std::string& dir,
                  std::ostream& out) {
  AttentionConfig cfg;
  cfg.rho = rho;
  const AngularGrid grid(h, w);
  fs::create_directories(dir);
  std::size_t files = 0;
  for (Axis axis : {Axis::kHorizontal, Axis::kVertical}) {
    const ErpeBias e = build_erpe(grid, axis, cfg);
    double largest = 0.0;
    for (double v : e.matrices.data()) largest = std::max(largest, std::fabs(v));
    for (std::size_t k = 0; k < e.count(); ++k) {
      std::ostringstream stem;
      stem << "erpe_" << (axis == Axis::kHorizontal ? 'h' : 'v');
      if (axis == Axis::kHorizontal) stem << "_row" << std::setw(4) << std::setfill('0') << k;
      const std::size_t n = e.size();
      Raster img(n, n, 1);
      std::ostringstream csv;
      csv << std::setprecision(17);
      for (std::size_t m = 0; m < n; ++m) {
        for (std::size_t j = 0; j < n; ++j) {
          const double v = e.at(k, m, j);
          img.at(m, j) = largest > 0.0 ? 0.5 + 0.5 * v / largest : 0.5;
          csv << (j ? "," : "") << v;
        }
        csv << '\n';
      }
      write_pgm(fs::path(dir) / (stem.str() + ".pgm"), img);
      write_file_atomic(fs::path(dir) / (stem.str() + ".csv"), csv.str());
      files += 2;
    }
  }
  out << "wrote " << files << " files to " << dir << " (gray 128 = 0, white = +max|E|)\n";
  return kPass;
}

struct ToyRow {
  std::string label;
  ToyRun run;
};

std::vector<ToyRow> run_many(const std::vector<std::pair<std::string, RunConfig>>& configs,
                             const std::vector<Sample>& data, const TrainOptions& opts,
                             std::ostream& out) {
  std::vector<ToyRow> rows;
  for (const auto& [label, cfg] : configs) {
    rows.push_back({label, run_toy(cfg, data, opts)});
    const ToyRun& r = rows.back().run;
    out << label << ": train loss " << r.initial_train_loss << " -> " << r.final_train_loss
        << ", test abs_rel " << r.untrained.abs_rel << " -> " << r.trained.abs_rel << '\n';
  }
  return rows;
}

int cmd_sweep_rho(const std::string& values, const std::string& data_dir, const ModelFlags& mf,
                  const TrainFlags& tf, const std::string& csv_path, std::ostream& out) {
  const std::vector<Sample> data = load_or_generate(data_dir, tf.seed);
  require_uniform_size(data);
  std::vector<std::pair<std::string, RunConfig>> configs;
  for (const std::string& v : split_list(values)) {
    ModelFlags f = mf;
    f.rho = std::stod(v);
    configs.emplace_back(v, f.run_config(data[0].image.height, data[0].image.width, tf.seed));
  }
  if (configs.empty()) throw std::invalid_argument("--values is empty");
  const auto rows = run_many(configs, data, tf.options(), out);
  std::ostringstream csv;
  csv << std::setprecision(10) << "rho,initial_train_loss,final_train_loss," << kMetricsHeader << '\n';
  for (const ToyRow& r : rows) {
    csv << r.label << ',' << r.run.initial_train_loss << ',' << r.run.final_train_loss << ','
        << metrics_fields(r.run.trained) << '\n';
  }
  write_file_atomic(csv_path, csv.str());
  out << csv.str();
  return kPass;
}

int cmd_ablate(const std::string& variants, const std::string& data_dir, const ModelFlags& mf,
               const TrainFlags& tf, const std::string& csv_path, std::ostream& out) {
  const std::vector<Sample> data = load_or_generate(data_dir, tf.seed);
  require_uniform_size(data);
  std::vector<std::pair<std::string, RunConfig>> configs;
  for (const std::string& v : split_list(variants)) {
    ModelFlags f = mf;
    f.variant = v;
    configs.emplace_back(v, f.run_config(data[0].image.height, data[0].image.width, tf.seed));
  }
  if (configs.empty()) throw std::invalid_argument("--variants is empty");
  out << "note: softmax is plain window attention (no ERPE, no DAS, no EaAR); no-das keeps ERPE "
         "and EaAR with a softmax score map; no locally-enhanced positional term is used\n";
  const auto rows = run_many(configs, data, tf.options(), out);
  const auto ref_it = std::find_if(rows.begin(), rows.end(), [](const ToyRow& r) { return r.label == "full"; });
  const DepthMetrics& ref = (ref_it == rows.end() ? rows.front() : *ref_it).run.trained;
  std::ostringstream csv;
  csv << std::setprecision(10) << "variant,final_train_loss," << kMetricsHeader
      << ",d_abs_rel,d_rms_lin,d_delta1\n";
  for (const ToyRow& r : rows) {
    const DepthMetrics& m = r.run.trained;
    csv << r.label << ',' << r.run.final_train_loss << ',' << metrics_fields(m) << ','
        << m.abs_rel - ref.abs_rel << ',' << m.rms_lin - ref.rms_lin << ','
        << m.delta1 - ref.delta1 << '\n';
  }
  write_file_atomic(csv_path, csv.str());
  out << csv.str();
  return kPass;
}

}  // namespace

std::size_t thread_budget() {
  const char* env = std::getenv("EGF_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const unsigned long n = std::strtoul(env, &end, 10);
  if (*end != '\0' || n == 0) throw std::invalid_argument("EGF_THREADS must be a positive integer");
  return n;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"EGformer toy toolkit"};
  app.set_help_flag("--help", "Print this help message and exit");
  app.require_subcommand(1);

  std::vector<std::string> suites_filter;
  bool inject_fault = false;
  auto* selfcheck = app.add_subcommand("selfcheck", "Run the invariant suites");
  selfcheck->add_option("--suite", suites_filter, "Only these suites (repeatable)");
  selfcheck->add_flag("--inject-erpe-fault", inject_fault, "Flip the ERPE lower-triangle signs");

  std::string arch = "E-E-E";
  std::size_t h = 8, w = 16, c = 16, c0 = 4, heads = 2;
  double tol = 1e-3;
  auto* gradcheck = app.add_subcommand("gradcheck", "End-to-end finite-difference audit");
  gradcheck->add_option("--arch", arch)->capture_default_str();
  gradcheck->add_option("--h", h)->capture_default_str();
  gradcheck->add_option("--w", w)->capture_default_str();
  gradcheck->add_option("--c0", c0)->capture_default_str();
  gradcheck->add_option("--heads", heads)->capture_default_str();
  gradcheck->add_option("--tol", tol)->capture_default_str();

  std::string axis = "both", flops_arch;
  std::size_t flops_heads = 1;
  auto* flops = app.add_subcommand("flops", "Attention MAC audit");
  flops->add_option("--h", h)->capture_default_str();
  flops->add_option("--w", w)->capture_default_str();
  flops->add_option("--c", c, "Channels of the single-block audit")->capture_default_str();
  flops->add_option("--axis", axis, "h, v or both")->capture_default_str();
  flops->add_option("--heads", flops_heads)->capture_default_str();
  flops->add_option("--arch", flops_arch, "Audit a whole model instead");
  flops->add_option("--c0", c0, "Model channels with --arch")->capture_default_str();

  std::string out_dir;
  std::size_t scenes = 80, test = 0;
  std::uint64_t data_seed = 0;
  std::size_t gh = 32, gw = 64;
  auto* gen = app.add_subcommand("gen-data", "Render a synthetic dataset");
  gen->add_option("--out", out_dir)->required();
  gen->add_option("--scenes", scenes)->capture_default_str();
  gen->add_option("--test", test, "Test scenes, default scenes/5");
  gen->add_option("--h", gh)->capture_default_str();
  gen->add_option("--w", gw)->capture_default_str();
  gen->add_option("--seed", data_seed)->capture_default_str();

  std::string data_dir, ckpt, log_path;
  bool quiet = false;
  ModelFlags mf;
  TrainFlags tf;
  auto* train_cmd = app.add_subcommand("train-toy", "Train the toy model");
  train_cmd->add_option("--data", data_dir)->required();
  train_cmd->add_option("--ckpt", ckpt)->required();
  train_cmd->add_option("--log", log_path, "Training log CSV, default <ckpt>.log.csv");
  train_cmd->add_flag("--quiet", quiet);
  mf.add_to(train_cmd);
  tf.add_to(train_cmd);

  std::string report, split = "test";
  auto* eval = app.add_subcommand("eval", "Align and score a checkpoint");
  eval->add_option("--data", data_dir)->required();
  eval->add_option("--ckpt", ckpt)->required();
  eval->add_option("--report", report)->required();
  eval->add_option("--split", split, "train, test or all")->capture_default_str();

  double rho = 0.1;
  auto* dump = app.add_subcommand("dump-bias", "Write ERPE matrices as PGM and CSV");
  dump->add_option("--h", h)->capture_default_str();
  dump->add_option("--w", w)->capture_default_str();
  dump->add_option("--rho", rho)->capture_default_str();
  dump->add_option("--out", out_dir)->required();

  std::string values = "0.03,0.1,0.3", csv_path;
  ModelFlags sweep_mf;
  TrainFlags sweep_tf;
  auto* sweep = app.add_subcommand("sweep-rho", "Train one toy model per bias level");
  sweep->add_option("--values", values)->capture_default_str();
  sweep->add_option("--data", data_dir, "Dataset directory, default: generate in memory");
  sweep->add_option("--out", csv_path)->required();
  sweep_mf.add_to(sweep);
  sweep_tf.add_to(sweep);

  std::string variants = "full,no-das,no-eaar,no-erpe,softmax";
  ModelFlags ablate_mf;
  TrainFlags ablate_tf;
  auto* ablate = app.add_subcommand("ablate", "Train each mechanism variant");
  ablate->add_option("--variants", variants)->capture_default_str();
  ablate->add_option("--data", data_dir, "Dataset directory, default: generate in memory");
  ablate->add_option("--out", csv_path)->required();
  ablate_mf.add_to(ablate);
  ablate_tf.add_to(ablate);

  std::vector<const char*> argv;
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kUsage;
  }

  try {
    thread_budget();
    if (*selfcheck) return cmd_selfcheck(suites_filter, inject_fault, out);
    if (*gradcheck) return cmd_gradcheck(arch, h, w, c0, heads, tol, out);
    if (*flops) return cmd_flops(h, w, c, flops_heads, axis, flops_arch, c0, out);
    if (*gen) return cmd_gen_data(out_dir, scenes, test, gh, gw, data_seed, out);
    if (*train_cmd) return cmd_train_toy(data_dir, mf, tf, ckpt, log_path, quiet, out);
    if (*eval) return cmd_eval(data_dir, ckpt, report, split, out);
    if (*dump) return cmd_dump_bias(h, w, rho, out_dir, out);
    if (*sweep) return cmd_sweep_rho(values, data_dir, sweep_mf, sweep_tf, csv_path, out);
    if (*ablate) return cmd_ablate(variants, data_dir, ablate_mf, ablate_tf, csv_path, out);
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kIo;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kIo;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::out_of_range& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kCheckFailed;
  }
  return kUsage;
}

}  // namespace egf::tools
