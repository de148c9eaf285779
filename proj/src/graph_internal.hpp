#pragma once

// Internal machinery shared by graph.cpp, ops.cpp and autodiff.cpp.

#include <memory>
#include <vector>

#include "meltr/graph.hpp"
#include "meltr/tensor.hpp"

namespace meltr {

struct TensorAccess {
    static std::shared_ptr<detail::GraphState> state(const Tensor& t) { return t.graph_.lock(); }
    static bool has_node(const Tensor& t) { return t.node_ >= 0; }
    static std::shared_ptr<const std::vector<double>> storage(const Tensor& t) { return t.values_; }

    static Tensor make(Shape shape, std::shared_ptr<const std::vector<double>> values,
                       const std::shared_ptr<detail::GraphState>& graph, int64_t node) {
        Tensor t;
        t.shape_ = std::move(shape);
        t.values_ = std::move(values);
        if (graph) {
            t.graph_ = graph;
            t.node_ = node;
        }
        return t;
    }

    static std::shared_ptr<detail::GraphState> graph_state(const Graph& g) { return g.state_; }
    static Graph wrap(std::shared_ptr<detail::GraphState> s) { return Graph(std::move(s)); }
};

namespace detail {

struct ValueRef {
    const Shape* shape;
    const std::vector<double>* values;
    int64_t numel() const { return static_cast<int64_t>(values->size()); }
};

struct EvalOut {
    Shape shape;
    std::vector<double> values;
};

// Pure forward evaluation of one op; shared by recording and replay.
EvalOut eval_op(OpKind kind, const std::vector<ValueRef>& in, const std::vector<int64_t>& iattrs);

// Record an op into the common graph of the attached operands (detached
// operands are interned as constants), or evaluate eagerly when every operand
// is detached.
Tensor record(OpKind kind, const std::vector<Tensor>& in, std::vector<int64_t> iattrs = {});

// Reconstruct the tensor stored at a node; attached when requested.
Tensor node_tensor(const std::shared_ptr<GraphState>& gs, int64_t id, bool attached);

}  // namespace detail
}  // namespace meltr
