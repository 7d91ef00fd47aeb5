#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "robself/tensor.hpp"

namespace robself::diff {

// One recorded operation result. `backprop` reads this node's grad and
// accumulates into the parents' grads; parents are visited in reverse
// topological order with fixed parent indexing, so accumulation order is
// deterministic.
template <std::floating_point T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // empty until backward() touches this node
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backprop;
    const char* op = "leaf";

    // Returns the grad buffer, allocating zeros on first use. `fresh` reports
    // whether the buffer was newly allocated (already zero).
    Tensor<T>& ensure_grad(bool* fresh = nullptr) {
        const bool alloc = grad.empty() || !grad.same_shape(value);
        if (alloc) grad = Tensor<T>(value.shape());
        if (fresh) *fresh = alloc;
        return grad;
    }
};

template <std::floating_point T>
using NodePtr = std::shared_ptr<Node<T>>;

template <std::floating_point T>
NodePtr<T> leaf(Tensor<T> value, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

template <std::floating_point T>
NodePtr<T> constant(Tensor<T> value) {
    return leaf(std::move(value), false);
}

// Named trainable leaf. Every model parameter appears exactly once in the
// owning state's enumeration.
template <std::floating_point T>
struct Parameter {
    NodePtr<T> node;
    std::string name;

    Tensor<T>& value() { return node->value; }
    const Tensor<T>& value() const { return node->value; }
};

template <std::floating_point T>
NodePtr<T> make_node(Tensor<T> value, std::vector<NodePtr<T>> parents,
                     std::function<void(Node<T>&)> backprop, const char* op) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->parents = std::move(parents);
    for (const auto& p : n->parents)
        if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) n->backprop = std::move(backprop);
    n->op = op;
    ensure_finite(n->value, op);
    return n;
}

// Topological order (parents before children), DFS with fixed parent index
// order. Only nodes requiring grad are collected.
template <std::floating_point T>
std::vector<Node<T>*> topo_order(const NodePtr<T>& root) {
    std::vector<Node<T>*> order;
    if (!root->requires_grad) return order;
    std::unordered_set<const Node<T>*> seen;
    // explicit stack: (node, next parent index to visit)
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node<T>* p = node->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;  // parents precede children
}

// Reverse-mode sweep from a scalar loss. Grads of all reachable
// grad-requiring nodes are reset first, so repeated calls on the same graph
// yield identical results.
template <std::floating_point T>
void backward(const NodePtr<T>& loss) {
    if (!loss->value.is_scalar())
        throw ContractError("backward: loss must be scalar, got " + loss->value.shape_string());
    if (!loss->requires_grad) return;
    auto order = topo_order(loss);
    for (Node<T>* n : order) {
        bool fresh = false;
        auto& g = n->ensure_grad(&fresh);
        if (!fresh) std::fill(g.values().begin(), g.values().end(), T(0));
    }
    loss->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backprop) n->backprop(*n);
    }
}

template <std::floating_point T>
void zero_grads(std::span<const Parameter<T>> params) {
    for (const auto& p : params) {
        auto& g = p.node->ensure_grad();
        std::fill(g.values().begin(), g.values().end(), T(0));
    }
}

// Spec surface: gradient of `loss` for each named parameter. Parameters not
// reached by the graph receive zero tensors.
template <std::floating_point T>
std::map<std::string, Tensor<T>> backward(const NodePtr<T>& loss, std::span<const Parameter<T>> params) {
    zero_grads(params);
    backward(loss);
    std::map<std::string, Tensor<T>> grads;
    for (const auto& p : params) grads[p.name] = p.node->grad;
    return grads;
}

}  // namespace robself::diff
