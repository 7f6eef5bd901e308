#pragma once

// Recording tape for reverse-mode differentiation. Ops append nodes holding
// the forward value plus a closure that scatters the node's gradient into
// its parents; backward() replays closures in reverse creation order, which
// is a valid topological order by construction.

#include <functional>
#include <stdexcept>
#include <vector>

#include "metalattice/tensor.hpp"

namespace metalattice::nn {

using Var = int;

class Tape {
public:
    struct Node {
        Tensor value;
        Tensor grad; // allocated on first touch
        bool needs_grad = false;
        std::function<void(Tape&)> backward;
    };

    Var leaf(Tensor value, bool needs_grad = false) {
        nodes_.push_back(Node{std::move(value), Tensor{}, needs_grad, nullptr});
        return static_cast<Var>(nodes_.size() - 1);
    }

    Var emit(Tensor value, bool needs_grad) {
        nodes_.push_back(Node{std::move(value), Tensor{}, needs_grad, nullptr});
        return static_cast<Var>(nodes_.size() - 1);
    }

    void set_backward(Var v, std::function<void(Tape&)> fn) {
        nodes_[static_cast<std::size_t>(v)].backward = std::move(fn);
    }

    Tensor& val(Var v) { return nodes_[static_cast<std::size_t>(v)].value; }
    const Tensor& val(Var v) const { return nodes_[static_cast<std::size_t>(v)].value; }

    bool needs_grad(Var v) const { return nodes_[static_cast<std::size_t>(v)].needs_grad; }

    // gradient buffer, zero-initialized on first access
    Tensor& grad(Var v) {
        Node& n = nodes_[static_cast<std::size_t>(v)];
        if (n.grad.v.empty()) n.grad = Tensor(n.value.dims);
        return n.grad;
    }

    bool has_grad(Var v) const { return !nodes_[static_cast<std::size_t>(v)].grad.v.empty(); }

    void backward(Var loss) {
        if (val(loss).numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
        grad(loss).v[0] = 1.0f;
        for (std::int64_t i = loss; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.backward && !n.grad.v.empty()) n.backward(*this);
        }
    }

    void clear() { nodes_.clear(); }
    std::size_t size() const { return nodes_.size(); }

private:
    std::vector<Node> nodes_;
};

} // namespace metalattice::nn
