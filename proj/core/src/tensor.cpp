#include "egformer/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace egf {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<double> values) {
  for (std::size_t e : shape) {
    if (e == 0) throw std::invalid_argument("Tensor: zero extent in shape " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw std::invalid_argument("Tensor: shape " + shape_str(shape) + " needs " +
                                std::to_string(shape_numel(shape)) + " values, got " +
                                std::to_string(values.size()));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return node;
}

thread_local Tape* g_active_tape = nullptr;
thread_local std::vector<MacCounter*> g_mac_counters;

}  // namespace

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }
Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = shape_numel(shape);
  return Tensor(new_node(std::move(shape), std::vector<double>(n, value)));
}

Tensor Tensor::scalar(double value) { return Tensor(new_node({1}, {value})); }

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  return Tensor(new_node(std::move(shape), std::move(values)));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  auto node = new_node(std::move(shape), std::move(values));
  node->requires_grad = true;
  node->grad.assign(node->value.size(), 0.0);
  return Tensor(std::move(node));
}

const detail::Node& Tensor::node() const {
  if (!node_) throw std::logic_error("Tensor: use of an undefined tensor");
  return *node_;
}

std::span<double> Tensor::mutable_data() {
  if (!node_) throw std::logic_error("Tensor: use of an undefined tensor");
  if (node_->tape_index) throw std::logic_error("Tensor: cannot mutate a recorded op output");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw std::invalid_argument("Tensor::item on shape " + shape_str(shape()));
  }
  return node().value[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) throw std::invalid_argument("Tensor::at: rank mismatch");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= s[axis]) throw std::out_of_range("Tensor::at: index out of range");
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node().value[flat];
}

std::span<const double> Tensor::grad() const {
  auto& n = const_cast<detail::Node&>(node());
  return n.ensure_grad();
}

void Tensor::zero_grad() {
  if (!node_) return;
  node_->grad.assign(node_->value.size(), 0.0);
}

Tensor Tensor::detach() const {
  return Tensor(new_node(shape(), node().value));
}

void Tape::push(Record record) {
  record.output->tape_index = records_.size();
  record.output->requires_grad = true;
  records_.push_back(std::move(record));
}

void Tape::backward(const Tensor& loss, std::span<const Tensor> leaves) {
  if (loss.numel() != 1) {
    throw std::invalid_argument("Tape::backward: loss must be scalar, got shape " +
                                shape_str(loss.shape()));
  }
  // Gradients are allocated lazily on first contribution; an empty gradient
  // means nothing flowed into the node.
  for (Record& r : records_) {
    r.output->grad.clear();
    for (auto& in : r.inputs) in->grad.clear();
  }
  for (const Tensor& leaf : leaves) {
    if (leaf.defined()) leaf.node_ptr()->grad.assign(leaf.numel(), 0.0);
  }
  auto& loss_node = *loss.node_ptr();
  loss_node.ensure_grad()[0] = 1.0;
  const std::optional<std::size_t> start = loss_node.tape_index;
  if (!start || *start >= records_.size() || records_[*start].output.get() != &loss_node) {
    return;  // leaf loss: only its own gradient is defined
  }
  for (std::size_t i = *start + 1; i-- > 0;) {
    if (!records_[i].output->grad.empty()) records_[i].backward();
  }
}

void Tape::validate_finite() const {
  for (std::size_t i = 0; i < records_.size(); ++i) {
    for (double v : records_[i].output->value) {
      if (!std::isfinite(v)) {
        throw std::runtime_error("non-finite value produced by op #" + std::to_string(i) +
                                 " (" + records_[i].op + ") with shape " +
                                 shape_str(records_[i].output->shape));
      }
    }
  }
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }
Tape* TapeScope::active() { return g_active_tape; }

MacCounter::Scope::Scope(MacCounter& counter) : counter_(counter) {
  ++counter_.open_scopes_;
  g_mac_counters.push_back(&counter_);
}

MacCounter::Scope::~Scope() {
  --counter_.open_scopes_;
  for (auto it = g_mac_counters.rbegin(); it != g_mac_counters.rend(); ++it) {
    if (*it == &counter_) {
      g_mac_counters.erase(std::next(it).base());
      break;
    }
  }
}

void MacCounter::reset() {
  if (open_scopes_ > 0) throw std::logic_error("MacCounter::reset inside an open scope");
  macs_ = 0;
}

void MacCounter::add(std::uint64_t macs) {
  for (MacCounter* c : g_mac_counters) c->macs_ += macs;
}

void validate_finite(const Tensor& t, const std::string& what) {
  const auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!std::isfinite(d[i])) {
      throw std::runtime_error(what + ": non-finite value " + std::to_string(d[i]) +
                               " at flat index " + std::to_string(i));
    }
  }
}

}  // namespace egf
