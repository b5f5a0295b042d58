#pragma once

#include <functional>
#include <string>
#include <vector>

#include "egformer/oracle.hpp"

namespace egf::tools {

struct CheckResult {
  std::string name;
  bool passed = true;
  std::string detail;  // first failing assertion, or a short summary
};

/// Records the first failure with its values; later failures only bump the count.
class Checker {
 public:
  explicit Checker(std::string name) : name_(std::move(name)) {}

  template <typename Describe>
  bool expect(bool condition, Describe&& describe) {
    ++checks_;
    if (!condition) {
      if (failures_ == 0) first_ = describe();
      ++failures_;
    }
    return condition;
  }
  void note(std::string summary) { summary_ = std::move(summary); }
  CheckResult result() const;

 private:
  std::string name_;
  std::string first_;
  std::string summary_;
  std::size_t checks_ = 0;
  std::size_t failures_ = 0;
};

CheckResult check_geometry();
/// Vectorized EH/EV-MSA against the scalar oracle on random configurations
/// with H, W <= 8 and J in {1, 2, 4}.
CheckResult check_oracle_equivalence(std::size_t configs = 20, std::uint64_t seed = 2024);
CheckResult check_softmax_baseline();
CheckResult check_erpe_antisymmetry();
CheckResult check_erpe_structure();
CheckResult check_das(std::size_t rows = 100000);
CheckResult check_eaar();
CheckResult check_flop_audit();
CheckResult check_block_gradients(double rel_tol = 1e-4);

struct ModelGradcheck {
  CheckResult result;
  std::vector<oracle::GradAudit> audits;
};
ModelGradcheck check_model_gradients(const std::string& arch, std::size_t height,
                                     std::size_t width, std::size_t base_channels = 4,
                                     std::size_t heads = 2, double rel_tol = 1e-3);
CheckResult check_metrics();
CheckResult check_pfm_round_trip();

struct Suite {
  std::string name;
  std::function<std::vector<CheckResult>()> run;
};

/// geometry, erpe, das, eaar, oracle, flops, grad, metrics, io
const std::vector<Suite>& suites();

}  // namespace egf::tools
