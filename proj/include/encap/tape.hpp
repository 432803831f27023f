// SPDX-License-Identifier: Apache-2.0

#ifndef ENCAP_TAPE_HPP_
#define ENCAP_TAPE_HPP_

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "encap/errors.hpp"
#include "encap/tensor.hpp"

namespace encap
{

enum class OpKind
{
    leaf,
    constant,
    add,
    sub,
    multiply,
    scale,
    add_scalar,
    add_row_bias,
    scale_shift_rows,
    matmul,
    gelu,
    layer_norm,
    embedding_lookup,
    concat_rows,
    slice_rows,
    reshape,
    softmax_rows,
    sum_all,
    sum_squares,
    weighted_sum,
    causal_attention,
    cross_entropy_mean,
};

inline const char* op_name(OpKind kind)
{
    switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::constant: return "constant";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::multiply: return "multiply";
    case OpKind::scale: return "scale";
    case OpKind::add_scalar: return "add_scalar";
    case OpKind::add_row_bias: return "add_row_bias";
    case OpKind::scale_shift_rows: return "scale_shift_rows";
    case OpKind::matmul: return "matmul";
    case OpKind::gelu: return "gelu";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::embedding_lookup: return "embedding_lookup";
    case OpKind::concat_rows: return "concat_rows";
    case OpKind::slice_rows: return "slice_rows";
    case OpKind::reshape: return "reshape";
    case OpKind::softmax_rows: return "softmax_rows";
    case OpKind::sum_all: return "sum_all";
    case OpKind::sum_squares: return "sum_squares";
    case OpKind::weighted_sum: return "weighted_sum";
    case OpKind::causal_attention: return "causal_attention";
    case OpKind::cross_entropy_mean: return "cross_entropy_mean";
    }
    return "unknown";
}

class Tape;

/// Handle to a value recorded on a tape.
struct Var
{
    Tape* tape{nullptr};
    std::size_t id{0};
};

/// Linear record of a computation, replayed in reverse for gradients.
///
/// Nodes are appended in evaluation order, so ids form a topological order by
/// construction. A tape is single-owner; build it, call backward() once, read
/// the leaf gradients, then drop it.
class Tape
{
public:
    using BackwardFn = std::function<void(Tape&, std::size_t)>;

    struct Node
    {
        OpKind kind{OpKind::leaf};
        std::vector<std::size_t> inputs;
        Tensor value;
        std::vector<Tensor> saved;
        std::vector<double> grad;
        bool requires_grad{false};
        BackwardFn backward;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value, bool requires_grad = true)
    {
        require_finite(value, "leaf");
        Node n;
        n.kind = OpKind::leaf;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return {this, nodes_.size() - 1};
    }

    Var constant(Tensor value) { return leaf(std::move(value), false); }

    /// Appends an operation node. The output must be finite.
    Var record(OpKind kind, std::vector<std::size_t> inputs, Tensor value, std::vector<Tensor> saved,
               BackwardFn backward)
    {
        if (!value.all_finite())
            throw NumericError(std::string("non-finite output from ") + op_name(kind));
        bool rg = false;
        for (std::size_t in : inputs) {
            if (in >= nodes_.size())
                throw Error("tape input id out of order");
            rg = rg || nodes_[in].requires_grad;
        }
        Node n;
        n.kind = kind;
        n.inputs = std::move(inputs);
        n.value = std::move(value);
        n.saved = std::move(saved);
        n.requires_grad = rg;
        if (rg)
            n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return {this, nodes_.size() - 1};
    }

    const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
    const Node& node(std::size_t id) const { return nodes_.at(id); }
    std::size_t size() const noexcept { return nodes_.size(); }

    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    /// Gradient buffer of a node, allocated as zeros on first use.
    std::vector<double>& grad_buffer(std::size_t id)
    {
        Node& n = nodes_[id];
        if (n.grad.empty())
            n.grad.assign(n.value.size(), 0.0);
        return n.grad;
    }

    /// Gradient of the last backward() target w.r.t. v; zeros if unreachable.
    Tensor grad(Var v) const
    {
        const Node& n = nodes_.at(v.id);
        if (n.grad.empty())
            return Tensor::zeros_like(n.value);
        return Tensor(n.value.shape(), n.grad);
    }

    /// Reverse sweep seeded with d(loss)/d(loss) = 1.
    void backward(Var loss)
    {
        if (loss.tape != this)
            throw Error("backward on a variable from another tape");
        if (nodes_.at(loss.id).value.size() != 1)
            throw ShapeError("backward requires a scalar loss, got " +
                             shape_str(nodes_[loss.id].value.shape()));
        for (auto& n : nodes_)
            n.grad.clear();
        grad_buffer(loss.id)[0] = 1.0;
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || n.grad.empty() || !n.backward)
                continue;
            n.backward(*this, i);
        }
    }

private:
    std::deque<Node> nodes_;
};

} // namespace encap

#endif // ENCAP_TAPE_HPP_
