#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace kd {

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct KindError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DegenerateBoxError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until a backward pass touches this node
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

}  // namespace detail

// Dense 64-bit tensor handle. Copies share the underlying node; values are
// immutable once an op has consumed them, gradients accumulate in place
// during backward passes.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(node_->data.size()); }

    std::span<const double> values() const { return node_->data; }
    std::span<double> values_mut() { return node_->data; }
    double value() const;  // scalar tensors only
    double at(std::initializer_list<int> idx) const;

    bool requires_grad() const { return node_ && node_->requires_grad; }
    Tensor& set_requires_grad(bool rg) {
        node_->requires_grad = rg;
        return *this;
    }

    // gradient accumulated by the most recent backward pass(es)
    std::span<const double> grad() const;
    double grad_value() const;  // scalar tensors only
    void zero_grad() {
        if (node_) node_->grad.assign(node_->data.size(), 0.0);
    }

    // same values, detached from gradient tracking
    Tensor detach() const;

    std::shared_ptr<detail::TensorNode> node() const { return node_; }

  private:
    explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::TensorNode> node_;
};

// Records primitive applications in execution order. Entry i only consumes
// outputs of entries j < i or leaves, so reverse iteration is a valid
// topological order for gradient accumulation. One tape per training step;
// nesting is allowed, ops record onto the innermost active tape.
class Tape {
  public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active();

    void record(std::vector<std::shared_ptr<detail::TensorNode>> inputs,
                std::shared_ptr<detail::TensorNode> output, std::function<void()> pull_gradients);

    // Seeds d(root)/d(root) = 1 and accumulates gradients into every
    // recorded node. Does not clear pre-existing gradients: backward of a
    // sum of losses equals the sum of separate backwards.
    void backward(const Tensor& root);

    size_t size() const { return entries_.size(); }

  private:
    struct Entry {
        std::vector<std::shared_ptr<detail::TensorNode>> inputs;
        std::shared_ptr<detail::TensorNode> output;
        std::function<void()> pull;
    };
    std::vector<Entry> entries_;
};

}  // namespace kd
