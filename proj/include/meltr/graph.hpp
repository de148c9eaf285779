#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "meltr/tensor.hpp"

namespace meltr {

enum class OpKind : uint8_t {
    kLeaf,        // differentiable input
    kConstant,    // non-differentiable input
    kAdd,
    kSub,
    kMul,         // elementwise
    kNeg,
    kReciprocal,
    kMatmul,      // 2-D only
    kTranspose,   // 2-D only
    kReshape,
    kBroadcast,   // one element -> filled shape
    kSum,         // full reduction to a scalar
    kAbs,
    kExp,
    kLog,
    kErf,
    kGelu,
    kSoftmax,     // over last axis
    kEmbed,       // row gather from a 2-D table
    kEmbedScatter,// row scatter-add into a zero 2-D table (adjoint of kEmbed)
    kConcat,      // 2-D, axis in {0,1}
    kSlice,       // 2-D, axis in {0,1}
};

const char* op_name(OpKind k);

namespace detail {

struct Node {
    OpKind kind;
    std::vector<int64_t> inputs;   // node ids, all smaller than this node's id
    std::vector<int64_t> iattrs;   // op-specific: shapes, axes, embedding ids
    Shape out_shape;
    std::shared_ptr<const std::vector<double>> out_values;
};

struct GraphState {
    std::vector<Node> nodes;
    uint64_t generation = 0;
};

}  // namespace detail

/// Recording context for one differentiable computation. Nodes are append-only
/// and reference only earlier nodes, so the graph is acyclic by construction.
/// A backward pass may append further nodes (second-order terms).
class Graph {
public:
    Graph();

    // Attach a differentiable leaf holding the given values.
    Tensor leaf(const Tensor& value);
    Tensor leaf(Shape shape, std::vector<double> values);
    std::vector<Tensor> leaves(const std::vector<Tensor>& values);

    // Attach a non-differentiable constant.
    Tensor constant(const Tensor& value);

    int64_t size() const { return static_cast<int64_t>(state_->nodes.size()); }
    uint64_t generation() const { return state_->generation; }

    // Recompute every node from the leaves in topological order and return the
    // largest absolute deviation from the stored forward values.
    double replay_max_abs_diff() const;

private:
    explicit Graph(std::shared_ptr<detail::GraphState> state) : state_(std::move(state)) {}
    std::shared_ptr<detail::GraphState> state_;

    friend struct TensorAccess;
};

}  // namespace meltr
