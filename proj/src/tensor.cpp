#include "kd/tensor.hpp"

#include <sstream>

namespace kd {

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

static void check_shape(const Shape& shape) {
    for (int d : shape) {
        if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
    }
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    check_shape(shape);
    auto node = std::make_shared<detail::TensorNode>();
    node->data.assign(static_cast<size_t>(shape_numel(shape)), value);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from({}, {value}, requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
    check_shape(shape);
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
        throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(shape));
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

double Tensor::value() const {
    if (numel() != 1) throw ShapeError("value() on non-scalar tensor " + shape_str(shape()));
    return node_->data[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
    if (static_cast<int>(idx.size()) != ndim()) throw ShapeError("index rank mismatch");
    int64_t linear = 0;
    int axis = 0;
    for (int i : idx) {
        if (i < 0 || i >= node_->shape[static_cast<size_t>(axis)])
            throw ShapeError("index out of range");
        linear = linear * node_->shape[static_cast<size_t>(axis)] + i;
        ++axis;
    }
    return node_->data[static_cast<size_t>(linear)];
}

std::span<const double> Tensor::grad() const {
    node_->ensure_grad();
    return node_->grad;
}

double Tensor::grad_value() const {
    if (numel() != 1) throw ShapeError("grad_value() on non-scalar tensor");
    node_->ensure_grad();
    return node_->grad[0];
}

Tensor Tensor::detach() const {
    if (!node_) return Tensor();
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = node_->shape;
    node->data = node_->data;
    node->requires_grad = false;
    return Tensor(std::move(node));
}

namespace {
thread_local std::vector<Tape*> g_tape_stack;
}

Tape::Tape() { g_tape_stack.push_back(this); }

Tape::~Tape() { g_tape_stack.pop_back(); }

Tape* Tape::active() { return g_tape_stack.empty() ? nullptr : g_tape_stack.back(); }

void Tape::record(std::vector<std::shared_ptr<detail::TensorNode>> inputs,
                  std::shared_ptr<detail::TensorNode> output,
                  std::function<void()> pull_gradients) {
    entries_.push_back(Entry{std::move(inputs), std::move(output), std::move(pull_gradients)});
}

void Tape::backward(const Tensor& root) {
    if (!root.defined() || root.numel() != 1)
        throw ShapeError("backward root must be a scalar tensor");
    auto root_node = root.node();
    root_node->ensure_grad();
    root_node->grad[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        it->output->ensure_grad();
        for (auto& in : it->inputs) in->ensure_grad();
        it->pull();
    }
}

}  // namespace kd
