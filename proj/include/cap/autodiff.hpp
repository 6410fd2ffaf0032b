#pragma once

#include "cap/tensor.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace cap {

// Reverse-mode tape over rank-2 tensors. Nodes are appended in creation
// order, so parents always precede children and a reverse sweep is a valid
// topological order. One backward per graph; a second call is rejected.
//
// A node's requires_grad is the OR of its parents'; gradient closures are
// only recorded on that path, so pure inference passes carry no tape cost
// beyond the forward values.
class Graph {
public:
    using NodeId = std::uint32_t;

    NodeId input(Tensor value, bool requires_grad = false);

    // elementwise
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId scale(NodeId a, double c);
    NodeId add_rowvec(NodeId m, NodeId v); // (M,N) + (1,N) broadcast over rows
    NodeId tanh_(NodeId a);
    NodeId sigmoid_(NodeId a);
    NodeId relu_(NodeId a);

    // products
    NodeId matmul(NodeId a, NodeId b);    // (m,k)(k,n)
    NodeId matmul_nt(NodeId a, NodeId b); // (m,k)(n,k)^T
    NodeId matmul_tn(NodeId a, NodeId b); // (k,m)^T(k,n)

    // structure
    NodeId row_mean(NodeId a);                   // (M,N) -> (1,N)
    NodeId concat_rows(std::span<const NodeId> parts);
    NodeId slice_rows(NodeId a, std::size_t r0, std::size_t r1);

    // attention pieces
    // Per-column softmax over rows; rejects non-finite scores.
    NodeId softmax_cols(NodeId scores);
    // K (M,D), q (1,D) -> (M,heads): per head h, out[i,h] = K_h[i].q_h / sqrt(D/heads)
    NodeId heads_dot(NodeId k, NodeId q, std::size_t heads);
    // A (M,heads), V (M,D) -> (1,D): out_h = sum_i A[i,h] V_h[i]
    NodeId heads_mix(NodeId a, NodeId v);

    // Per-row layer norm with learnable gamma/beta of shape (1,N).
    NodeId layer_norm_rows(NodeId x, NodeId gamma, NodeId beta, double eps);

    // logits (1,K) -> (1,1) loss, -log softmax(logits)[label]
    NodeId cross_entropy(NodeId logits, std::size_t label);
    NodeId mean_scalars(std::span<const NodeId> scalars); // (1,1) each -> (1,1)

    // Populates gradients for every node on the requires_grad path from
    // root. Root must hold exactly one element. Rejects a second call.
    void backward(NodeId root);
    bool backward_done() const noexcept { return backward_done_; }

    const Tensor& value(NodeId id) const { return nodes_[id].value; }
    // Valid after backward for requires_grad nodes; zero if the node did not
    // influence the root.
    const Tensor& grad(NodeId id) const;
    bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        bool grad_alloc = false;
        std::function<void()> back;
    };

    NodeId push(Tensor value, bool requires_grad, std::function<void()> back);
    Tensor& grad_buf(NodeId id);
    void check2d(NodeId id, const char* op) const;

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

} // namespace cap
