#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "qattn/tensor.hpp"

namespace qattn {

/// Thread-local switch for graph recording. With grad mode off, ops run their
/// forward kernels but build no backward graph (used for action selection,
/// evaluation episodes and target-network passes).
class GradMode {
  public:
    static bool enabled() { return flag(); }
    static void set(bool on) { flag() = on; }

  private:
    static bool& flag() {
        thread_local bool f = true;
        return f;
    }
};

struct NoGradGuard {
    NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
    ~NoGradGuard() { GradMode::set(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

namespace detail {

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated on first accumulation during backward
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this->grad, accumulates into input grads / the bound parameter.
    std::function<void(Node&)> backprop;
    Parameter<T>* param = nullptr;
    uint64_t id = 0;

    void accumulate(const Tensor<T>& g) {
        if (grad.empty()) {
            grad = g.clone();
            return;
        }
        T* dst = grad.data();
        const T* src = g.data();
        int64_t n = grad.numel();
        for (int64_t i = 0; i < n; ++i) dst[i] += src[i];
    }
};

inline uint64_t next_node_id() {
    // Creation order is a valid topological order: inputs exist before outputs.
    thread_local uint64_t counter = 0;
    return ++counter;
}

}  // namespace detail

/// A tensor travelling through the computation, optionally carrying the graph
/// node that lets gradients flow back to parameters. Untracked vars behave as
/// constants.
template <typename T>
class Var {
  public:
    Var() = default;
    /*implicit*/ Var(Tensor<T> constant) : value_(std::move(constant)) {}

    static Var tracked(Tensor<T> value, std::vector<std::shared_ptr<detail::Node<T>>> inputs,
                       std::function<void(detail::Node<T>&)> backprop) {
        Var v;
        v.value_ = value;
        v.node_ = std::make_shared<detail::Node<T>>();
        v.node_->value = std::move(value);
        v.node_->inputs = std::move(inputs);
        v.node_->backprop = std::move(backprop);
        v.node_->id = detail::next_node_id();
        return v;
    }

    const Tensor<T>& value() const { return value_; }
    const Shape& shape() const { return value_.shape(); }
    bool tracked() const { return node_ != nullptr; }
    const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

  private:
    Tensor<T> value_;
    std::shared_ptr<detail::Node<T>> node_;
};

/// Enter a parameter into the graph. While grad mode is off the parameter
/// participates as a plain constant.
template <typename T>
inline Var<T> leaf(Parameter<T>& p) {
    if (!GradMode::enabled()) return Var<T>(p.value);
    Parameter<T>* pp = &p;
    auto v = Var<T>::tracked(p.value, {}, [pp](detail::Node<T>& n) {
        T* dst = pp->grad.data();
        const T* src = n.grad.data();
        int64_t c = pp->grad.numel();
        for (int64_t i = 0; i < c; ++i) dst[i] += src[i];
    });
    return v;
}

/// Reverse-mode sweep from a scalar root. Accumulates into the `grad` buffers
/// of every Parameter reachable through the graph.
template <typename T>
inline void backward(const Var<T>& root) {
    check(root.tracked(), "backward: root is not part of a gradient graph");
    check(root.value().numel() == 1, "backward: root must be a scalar");

    // Gather reachable nodes; creation ids give a topological order.
    std::vector<detail::Node<T>*> order;
    std::unordered_set<detail::Node<T>*> seen;
    std::vector<detail::Node<T>*> stack{root.node().get()};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (auto& in : n->inputs) {
            if (in && seen.insert(in.get()).second) stack.push_back(in.get());
        }
    }
    std::sort(order.begin(), order.end(),
              [](const auto* a, const auto* b) { return a->id > b->id; });

    root.node()->grad = Tensor<T>::ones(root.value().shape());
    for (auto* n : order) {
        if (n->grad.empty() || !n->backprop) continue;
        n->backprop(*n);
    }
    for (auto* n : order) n->grad = Tensor<T>();
}

}  // namespace qattn
