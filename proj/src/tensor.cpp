#include "xmgan/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "xmgan/errors.hpp"

namespace xmgan {

namespace {
thread_local Tape* g_current_tape = nullptr;
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from_buffer(std::move(shape), Buffer(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, const std::vector<double>& data, bool requires_grad) {
  return from_buffer(std::move(shape), Buffer(data.begin(), data.end()), requires_grad);
}

Tensor Tensor::from_buffer(Shape shape, Buffer data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

void Tensor::set_requires_grad(bool on) {
  if (!impl_->leaf) throw ContractError("requires_grad can only be changed on leaf tensors");
  impl_->requires_grad = on;
}

std::vector<double> Tensor::grad() const {
  if (impl_->grad.empty()) return std::vector<double>(numel(), 0.0);
  return std::vector<double>(impl_->grad.begin(), impl_->grad.end());
}

std::span<double> Tensor::mutable_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(numel(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return from_buffer(shape(), impl_->data, false); }

Tensor Tensor::clone() const { return from_buffer(shape(), impl_->data, impl_->requires_grad && impl_->leaf); }

void Tape::record(const std::vector<Tensor>& inputs, const Tensor& output, BackwardRule rule) {
  Node node;
  node.inputs.reserve(inputs.size());
  for (const auto& t : inputs) node.inputs.push_back(t.impl());
  node.output = output.impl();
  node.rule = std::move(rule);
  nodes_.push_back(std::move(node));
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) throw ContractError("backward(): loss is not on the tape");

  if (loss.is_leaf()) {
    const_cast<Tensor&>(loss).mutable_grad()[0] += 1.0;
    return;
  }

  // Gradients of intermediate results live only for this pass so that repeated
  // backward calls accumulate into leaves exactly once per call.
  std::unordered_map<const TensorImpl*, Buffer> scratch;
  scratch[loss.impl().get()] = {1.0};

  std::vector<std::span<double>> grad_in;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    auto found = scratch.find(it->output.get());
    if (found == scratch.end()) continue;
    const Buffer& grad_out = found->second;

    grad_in.assign(it->inputs.size(), {});
    for (std::size_t i = 0; i < it->inputs.size(); ++i) {
      TensorImpl* in = it->inputs[i].get();
      if (in == nullptr || !in->requires_grad) continue;
      if (in->leaf) {
        if (in->grad.empty()) in->grad.assign(in->data.size(), 0.0);
        grad_in[i] = in->grad;
      } else {
        auto& buf = scratch[in];
        if (buf.empty()) buf.assign(in->data.size(), 0.0);
        grad_in[i] = buf;
      }
    }
    it->rule.fn(grad_out, grad_in);
    scratch.erase(found);
  }
}

Tape* Tape::current() { return g_current_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_current_tape) { g_current_tape = &tape; }
TapeScope::~TapeScope() { g_current_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_current_tape) { g_current_tape = nullptr; }
NoGradScope::~NoGradScope() { g_current_tape = previous_; }

Tensor make_op_result(Shape shape, Buffer data, std::vector<Tensor> inputs, BackwardRule rule) {
  Tensor out = Tensor::from_buffer(std::move(shape), std::move(data));
  Tape* tape = Tape::current();
  if (tape == nullptr) return out;
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.defined() && t.requires_grad(); });
  if (!needs) return out;
  out.impl_->requires_grad = true;
  out.impl_->leaf = false;
  tape->record(inputs, out, std::move(rule));
  return out;
}

}  // namespace xmgan
