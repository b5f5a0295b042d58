#include "egformer/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <numeric>
#include <random>
#include <sstream>

namespace egf {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& text, std::size_t line) {
  T value{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ConfigError("config line " + std::to_string(line) + ": invalid number '" + text + "'");
  }
  return value;
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

std::string encode_run_config(const RunConfig& cfg) {
  const ModelConfig& m = cfg.model;
  std::string heads;
  for (std::size_t i = 0; i < m.heads.size(); ++i) {
    heads += (i ? "," : "") + std::to_string(m.heads[i]);
  }
  std::string out;
  out += "height=" + std::to_string(m.height) + "\n";
  out += "width=" + std::to_string(m.width) + "\n";
  out += "base_channels=" + std::to_string(m.base_channels) + "\n";
  out += "heads=" + heads + "\n";
  out += "patch_kernel=" + std::to_string(m.patch_kernel) + "\n";
  out += "arch=" + m.arch.str() + "\n";
  out += "seed=" + std::to_string(m.seed) + "\n";
  out += "rho=" + format_double(m.attention.rho) + "\n";
  out += std::string("variant=") + oracle::to_string(cfg.variant) + "\n";
  return out;
}

RunConfig decode_run_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    ModelConfig& m = cfg.model;
    if (key == "height") {
      m.height = parse_number<std::size_t>(value, line_no);
    } else if (key == "width") {
      m.width = parse_number<std::size_t>(value, line_no);
    } else if (key == "base_channels") {
      m.base_channels = parse_number<std::size_t>(value, line_no);
    } else if (key == "heads") {
      m.heads.clear();
      std::istringstream parts(value);
      std::string part;
      while (std::getline(parts, part, ',')) m.heads.push_back(parse_number<std::size_t>(trim(part), line_no));
    } else if (key == "patch_kernel") {
      m.patch_kernel = parse_number<std::size_t>(value, line_no);
    } else if (key == "arch") {
      m.arch = parse_arch(value);
    } else if (key == "seed") {
      m.seed = parse_number<std::uint64_t>(value, line_no);
    } else if (key == "rho") {
      m.attention.rho = parse_number<double>(value, line_no);
    } else if (key == "variant") {
      try {
        cfg.variant = oracle::parse_variant(value);
      } catch (const std::invalid_argument& e) {
        throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
      }
    } else {
      throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
  }
  cfg.model.validate();
  return cfg;
}

DepthModel make_model(const RunConfig& cfg) {
  ModelConfig m = cfg.model;
  m.attention = oracle::with_variant(m.attention, cfg.variant);
  return DepthModel(std::move(m));
}

std::vector<TrainLogRow> train(DepthModel& model, std::span<const Sample* const> samples,
                               const TrainOptions& opts, std::uint64_t seed,
                               const std::function<void(const TrainLogRow&)>& on_step) {
  if (samples.empty()) throw std::invalid_argument("train: no training samples");
  if (opts.batch == 0) throw std::invalid_argument("train: batch size must be positive");
  std::mt19937_64 rng(seed ^ 0x5DEECE66DULL);
  std::vector<std::size_t> order(samples.size());
  std::size_t cursor = order.size();
  std::vector<TrainLogRow> log;
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t step = 0; step < opts.steps; ++step) {
    std::vector<const Sample*> batch;
    while (batch.size() < opts.batch) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        // Fisher-Yates with an explicit draw so the order is library independent.
        for (std::size_t i = order.size(); i > 1; --i) {
          std::swap(order[i - 1], order[rng() % i]);
        }
        cursor = 0;
      }
      batch.push_back(samples[order[cursor++]]);
    }
    const StepResult r = train_step(model, batch, opts.lr, opts.clip_norm);
    const double ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    log.push_back({step, r.loss, ms});
    if (on_step) on_step(log.back());
  }
  return log;
}

std::string train_log_csv(std::span<const TrainLogRow> log) {
  std::ostringstream os;
  os.precision(10);
  os << "step,loss,wall_ms\n";
  for (const TrainLogRow& r : log) os << r.step << ',' << r.loss << ',' << r.wall_ms << '\n';
  return os.str();
}

double dataset_loss(const DepthModel& model, std::span<const Sample* const> samples) {
  double total = 0.0;
  std::size_t count = 0;
  for (const Sample* s : samples) {
    const Tensor pred = model.forward(image_tensor(s->image));
    for (std::size_t i = 0; i < s->depth.data.size(); ++i) {
      const double g = s->depth.data[i];
      if (!(g > 0.0 && g < 100.0)) continue;
      total += std::abs(pred.data()[i] - g);
      ++count;
    }
  }
  if (count == 0) throw std::invalid_argument("dataset_loss: no valid ground-truth pixels");
  return total / static_cast<double>(count);
}

std::vector<ImageReport> evaluate(const DepthModel& model, std::span<const Sample* const> samples) {
  std::vector<ImageReport> out;
  for (const Sample* s : samples) {
    const Tensor pred = model.forward(image_tensor(s->image));
    out.push_back(evaluate_image(s->id, pred.data(), s->depth.data));
  }
  return out;
}

ToyRun run_toy(const RunConfig& cfg, const std::vector<Sample>& data, const TrainOptions& opts) {
  const std::vector<const Sample*> train_set = select_split(data, "train");
  const std::vector<const Sample*> test_set = select_split(data, "test");
  if (test_set.empty()) throw std::invalid_argument("run_toy: dataset has no test split");
  DepthModel model = make_model(cfg);
  ToyRun run;
  run.initial_train_loss = dataset_loss(model, train_set);
  run.untrained = average(evaluate(model, test_set));
  run.log = train(model, train_set, opts, cfg.model.seed);
  run.final_train_loss = dataset_loss(model, train_set);
  run.trained = average(evaluate(model, test_set));
  return run;
}

}  // namespace egf
