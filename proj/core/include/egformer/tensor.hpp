#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace egf {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until needed
  bool requires_grad = false;
  std::optional<std::size_t> tape_index;

  std::vector<double>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Dense row-major array of doubles. Copies are shallow: two Tensor handles
/// may refer to the same node. Values produced by ops are never mutated.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor from(Shape shape, std::vector<double> values);
  /// A leaf that accumulates gradients when used under an active Tape.
  static Tensor parameter(Shape shape, std::vector<double> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t dim(std::size_t axis) const { return node().shape.at(axis); }
  std::size_t numel() const { return node().value.size(); }

  std::span<const double> data() const { return node().value; }
  /// Only valid for tensors that are not the output of a recorded op.
  std::span<double> mutable_data();

  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node().requires_grad; }
  std::optional<std::size_t> grad_id() const { return node().tape_index; }
  /// Gradient from the last Tape::backward; zeros if never reached.
  std::span<const double> grad() const;
  void zero_grad();

  /// Same values, cut from the tape.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  const detail::Node& node() const;
  std::shared_ptr<detail::Node> node_;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Ordered record of differentiable ops. Ops record themselves into the
/// innermost active TapeScope when any input requires a gradient.
class Tape {
 public:
  struct Record {
    const char* op = "";
    std::vector<std::shared_ptr<detail::Node>> inputs;
    std::shared_ptr<detail::Node> output;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return records_.size(); }
  const Record& record(std::size_t i) const { return records_.at(i); }

  /// Reverse sweep from a scalar loss. Gradients of every node touched by the
  /// tape, plus `leaves`, are reset to zero first.
  void backward(const Tensor& loss, std::span<const Tensor> leaves = {});

  /// Throws std::runtime_error naming the first op whose output is not finite.
  void validate_finite() const;

  void clear() { records_.clear(); }

  // Used by op implementations.
  void push(Record record);

 private:
  std::vector<Record> records_;
};

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

  static Tape* active();

 private:
  Tape* previous_;
};

/// Counts scalar multiply-accumulates of forward matrix products and linear
/// projections. Counting is active while a MacCounter::Scope is alive; nested
/// scopes all receive the increments.
class MacCounter {
 public:
  class Scope {
   public:
    explicit Scope(MacCounter& counter);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    MacCounter& counter_;
  };

  std::uint64_t macs() const { return macs_; }
  /// Throws std::logic_error while a scope is open.
  void reset();

  static void add(std::uint64_t macs);

 private:
  std::uint64_t macs_ = 0;
  int open_scopes_ = 0;
};

/// Throws std::runtime_error if any value is NaN or infinite.
void validate_finite(const Tensor& t, const std::string& what);

// ---------------------------------------------------------------------------
// Differentiable primitives. Binary elementwise ops broadcast numpy-style.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& x, double s);
Tensor mul_scalar(const Tensor& x, double s);
Tensor neg(const Tensor& x);

Tensor abs(const Tensor& x);
/// Gradient-blocked: derivative is zero everywhere.
Tensor sign(const Tensor& x);
Tensor cos(const Tensor& x);
Tensor sin(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor square(const Tensor& x);
/// Exact GELU, 0.5 x (1 + erf(x / sqrt(2))).
Tensor gelu(const Tensor& x);
Tensor softplus(const Tensor& x);
/// max(x, threshold); gradient flows only where x > threshold.
Tensor clamp_min(const Tensor& x, double threshold);

Tensor sum(const Tensor& x, std::vector<std::size_t> axes, bool keepdim = false);
Tensor mean(const Tensor& x, std::vector<std::size_t> axes, bool keepdim = false);
/// Gradient goes to the first maximal element of each reduced slice.
Tensor max(const Tensor& x, std::vector<std::size_t> axes, bool keepdim = false);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

/// Batched product [.., m, k] x [.., k, n]; batch extents must be equal.
Tensor matmul(const Tensor& a, const Tensor& b);
/// Batched a x b^T: [.., m, k] x [.., n, k] -> [.., m, n].
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// x [.., d_in] * weight [d_in, d_out] + bias [d_out].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
/// Normalizes over the last axis, then scales by gamma and shifts by beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
/// Swaps the last two axes.
Tensor transpose(const Tensor& x);
/// out[i] = x.flat[index[i]]; gradient is scatter-added back.
Tensor gather(const Tensor& x, std::vector<std::size_t> index, Shape out_shape);
Tensor concat_last(std::span<const Tensor> parts);
std::vector<Tensor> split_last(const Tensor& x, const std::vector<std::size_t>& sizes);

/// x / (sum(|x|) over the last axis + eps). The denominator is differentiated.
Tensor l1_normalize_rows(const Tensor& x, double eps);

}  // namespace egf
