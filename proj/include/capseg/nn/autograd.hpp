#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "capseg/nn/tensor.hpp"

namespace capseg::nn {

class Node;
using Var = std::shared_ptr<Node>;

/// A value in the computation graph. Leaves are parameters or constants;
/// interior nodes carry a closure that pushes their gradient to the parents.
class Node {
public:
    Tensor value;
    Tensor grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;

    Tensor& ensure_grad() {
        if (grad.numel() != value.numel() || grad.shape != value.shape) grad = Tensor::zeros_like(value);
        return grad;
    }
    bool has_grad() const noexcept { return !grad.data.empty(); }
    void zero_grad() {
        if (has_grad()) grad.fill(0.0);
    }
};

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

inline Var constant(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    return n;
}

inline Var parameter(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->requires_grad = true;
    return n;
}

/// Creates an interior node; the closure is dropped when no parent needs a gradient.
inline Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (!grad_mode_flag()) return n;
    for (const auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
    if (n->requires_grad) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(fn);
    }
    return n;
}

/// Reverse-mode sweep from `roots`, whose gradients must already be seeded.
/// Gradients accumulate into every reachable node that requires them.
inline void backward(std::span<const Var> roots) {
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    for (const auto& r : roots) {
        if (!r->requires_grad || seen.count(r.get())) continue;
        seen.insert(r.get());
        stack.emplace_back(r.get(), 0);
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                Node* p = node->parents[next++].get();
                if (p->requires_grad && !seen.count(p)) {
                    seen.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
    }
}

inline void backward(const Var& root) {
    root->ensure_grad();
    if (root->value.numel() == 1) root->grad.data[0] = 1.0;
    backward(std::span<const Var>(&root, 1));
}

}  // namespace capseg::nn
