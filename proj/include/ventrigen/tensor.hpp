#pragma once

// Dense f64 tensors with reverse-mode autodiff. Every op that sees a
// requires_grad input records parents and a backprop closure on its output
// node; backward() replays the reachable graph in reverse topological order.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "ventrigen/rng.hpp"

namespace vgen {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

[[noreturn]] inline void fail(const std::string& msg) { throw std::runtime_error(msg); }

// Grad recording is on by default; NoGradGuard disables it for inference
// loops so sampler iterations do not accumulate graph.
inline bool& grad_mode() {
    static thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

struct TensorNode {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::uint64_t id = 0;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backprop;  // reads this node's grad, accumulates into parents

    void ensure_grad() {
        if (grad.empty()) grad.assign(values.size(), 0.0);
    }
};

inline std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), 0.0, requires_grad);
    }

    static Tensor filled(Shape shape, double v, bool requires_grad = false) {
        auto node = std::make_shared<TensorNode>();
        node->values.assign(shape_size(shape), v);
        node->shape = std::move(shape);
        node->requires_grad = requires_grad && grad_mode();
        node->id = next_node_id();
        return Tensor(std::move(node));
    }

    static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (shape_size(shape) != values.size()) {
            fail("tensor: shape " + shape_str(shape) + " does not match value count " +
                 std::to_string(values.size()));
        }
        auto node = std::make_shared<TensorNode>();
        node->shape = std::move(shape);
        node->values = std::move(values);
        node->requires_grad = requires_grad && grad_mode();
        node->id = next_node_id();
        return Tensor(std::move(node));
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from_values({1}, {v}, requires_grad);
    }

    static Tensor randn(Shape shape, RngStream& rng, bool requires_grad = false) {
        std::vector<double> v(shape_size(shape));
        for (double& x : v) x = rng.normal();
        return from_values(std::move(shape), std::move(v), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->values.size(); }

    double* data() { return node_->values.data(); }
    const double* data() const { return node_->values.data(); }
    std::vector<double>& values() { return node_->values; }
    const std::vector<double>& values() const { return node_->values; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::vector<double>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    const std::vector<double>& grad_view() const {
        if (node_->grad.empty()) fail("tensor: gradient not populated");
        return node_->grad;
    }
    void zero_grad() {
        if (!node_->grad.empty()) node_->grad.assign(node_->values.size(), 0.0);
    }

    double item() const {
        if (size() != 1) fail("tensor: item() on non-scalar shape " + shape_str(shape()));
        return node_->values[0];
    }

    // Value copy detached from the graph.
    Tensor detach() const {
        auto node = std::make_shared<TensorNode>();
        node->shape = node_->shape;
        node->values = node_->values;
        node->requires_grad = false;
        node->id = next_node_id();
        return Tensor(std::move(node));
    }

    std::shared_ptr<TensorNode> node() const { return node_; }

private:
    std::shared_ptr<TensorNode> node_;
};

// Ordered record of the graph reachable from a root: parents precede users.
struct ComputationTape {
    std::vector<std::shared_ptr<TensorNode>> order;
};

inline ComputationTape build_tape(const Tensor& root) {
    ComputationTape tape;
    if (!root.defined()) return tape;
    std::unordered_set<const TensorNode*> seen;
    std::vector<std::shared_ptr<TensorNode>> stack{root.node()};
    while (!stack.empty()) {
        auto node = stack.back();
        stack.pop_back();
        if (!node || seen.count(node.get())) continue;
        seen.insert(node.get());
        tape.order.push_back(node);
        for (const auto& p : node->parents) stack.push_back(p);
    }
    // Node ids are creation-ordered, so ascending id is a topological order.
    std::sort(tape.order.begin(), tape.order.end(),
              [](const auto& a, const auto& b) { return a->id < b->id; });
    return tape;
}

// Accumulates d(loss)/d(leaf) into every reachable requires_grad leaf.
// Repeated calls keep accumulating until grads are explicitly zeroed.
inline void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        fail("backward: loss must be a scalar, got shape " +
             (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    ComputationTape tape = build_tape(loss);
    if (tape.order.empty()) fail("backward: empty tape");
    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (auto it = tape.order.rbegin(); it != tape.order.rend(); ++it) {
        TensorNode& node = **it;
        if (node.backprop && !node.grad.empty()) node.backprop(node);
    }
}

// Named parameter collection shared by the optimizer and checkpoint format.
struct NamedParam {
    std::string name;
    Tensor tensor;
};

using ParamList = std::vector<NamedParam>;

inline void zero_grads(ParamList& params) {
    for (auto& p : params) p.tensor.zero_grad();
}

inline Tensor* find_param(ParamList& params, const std::string& name) {
    for (auto& p : params) {
        if (p.name == name) return &p.tensor;
    }
    return nullptr;
}

}  // namespace vgen
