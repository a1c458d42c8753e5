#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mbn/tensor.hpp"

namespace mbn::ad {

// Operation kinds. The first block is the public surface; the second block
// holds kinds the gradient builder emits so that gradient expressions are
// themselves differentiable graphs.
enum class Op {
    Constant,
    Parameter,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Neg,
    Exp,
    Log,
    Power,
    Sum,
    Mean,
    Maximum,
    Relu,
    L2NormalizeRows,
    DotProductRows,
    Arccos,
    Cos,
    Abs,
    Clamp,
    SelectByIndex,
    // gradient-support kinds
    Transpose,
    Sin,
    Sign,     // -1/0/+1, derivative defined as 0 everywhere
    StepGt,   // 1 if x > 0 else 0, derivative 0
    StepGe,   // 1 if x >= 0 else 0, derivative 0
    RowSum,   // n x m -> n x 1
    TileCols, // n x 1 -> n x m
    ScatterByIndex,
    GatherRows,
    ScatterRows,
};

const char* op_name(Op op);
Op op_from_name(const std::string& name);  // throws on unknown kind

struct Attrs {
    double a = 0.0;               // power exponent; clamp lo
    double b = 0.0;               // clamp hi
    int n = 0;                    // tile width; scatter output extent
    std::vector<int> indices;     // select/scatter/gather targets
};

struct Node {
    Op op = Op::Constant;
    int rows = 0;
    int cols = 0;
    std::vector<int> inputs;
    Attrs attrs;
    Tensor value;
    uint64_t value_epoch = 0;  // epoch the cached value was computed at
};

class Graph;

// Lightweight handle into a Graph. Valid as long as the graph lives.
struct NodeRef {
    Graph* graph = nullptr;
    int id = -1;
    bool valid() const { return graph != nullptr && id >= 0; }
};

// Named parameter leaves of a graph.
class ParameterSet {
public:
    void add(const std::string& name, NodeRef leaf);
    bool contains(const std::string& name) const;
    NodeRef at(const std::string& name) const;
    const std::vector<std::pair<std::string, NodeRef>>& items() const { return items_; }
    size_t count() const { return items_.size(); }
    int scalar_count() const;

private:
    std::vector<std::pair<std::string, NodeRef>> items_;
    std::map<std::string, size_t> index_;
};

class EvalError : public std::runtime_error {
public:
    EvalError(const std::string& what, int node_id) : std::runtime_error(what), node(node_id) {}
    int node;
};

// Expression graph with reverse-mode differentiation. gradient() emits graph
// nodes, so gradients stay differentiable and gradient-of-gradient is just a
// second call. Not safe for concurrent mutation; independent graphs may be
// evaluated in parallel.
class Graph {
public:
    static constexpr double kArccosEps = 1e-7;

    NodeRef constant(Tensor value);
    NodeRef scalar(double v) { return constant(Tensor::scalar(v)); }
    NodeRef parameter(Tensor value);

    NodeRef build(Op op, const std::vector<NodeRef>& inputs, Attrs attrs = {});

    const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
    int node_count() const { return static_cast<int>(nodes_.size()); }

    // Replace a leaf's value (parameter or constant); invalidates caches.
    void set_value(NodeRef leaf, Tensor value);

    const Tensor& evaluate(NodeRef root);

    // d(scalar)/d(leaf) for every leaf in wrt. Leaves absent from the graph
    // under `scalar` get zero gradients. With differentiable=true the result
    // nodes support further gradient() calls; with false they are detached
    // constants holding the evaluated values.
    std::map<std::string, NodeRef> gradient(NodeRef scalar, const ParameterSet& wrt, bool differentiable);

    // Derivative w.r.t. second_wrt of <direction, grad_{first_wrt}(scalar)>.
    std::map<std::string, Tensor> mixed_second(NodeRef scalar, const ParameterSet& first_wrt,
                                               const std::map<std::string, Tensor>& direction,
                                               const ParameterSet& second_wrt);

    // convenience builders
    NodeRef add(NodeRef a, NodeRef b) { return build(Op::Add, {a, b}); }
    NodeRef sub(NodeRef a, NodeRef b) { return build(Op::Sub, {a, b}); }
    NodeRef mul(NodeRef a, NodeRef b) { return build(Op::Mul, {a, b}); }
    NodeRef div(NodeRef a, NodeRef b) { return build(Op::Div, {a, b}); }
    NodeRef matmul(NodeRef a, NodeRef b) { return build(Op::MatMul, {a, b}); }
    NodeRef transpose(NodeRef a) { return build(Op::Transpose, {a}); }
    NodeRef neg(NodeRef a) { return build(Op::Neg, {a}); }
    NodeRef exp(NodeRef a) { return build(Op::Exp, {a}); }
    NodeRef log(NodeRef a) { return build(Op::Log, {a}); }
    NodeRef sin(NodeRef a) { return build(Op::Sin, {a}); }
    NodeRef cos(NodeRef a) { return build(Op::Cos, {a}); }
    NodeRef arccos(NodeRef a) { return build(Op::Arccos, {a}); }
    NodeRef abs(NodeRef a) { return build(Op::Abs, {a}); }
    NodeRef relu(NodeRef a) { return build(Op::Relu, {a}); }
    NodeRef power(NodeRef a, double p) {
        Attrs at;
        at.a = p;
        return build(Op::Power, {a}, at);
    }
    NodeRef clamp(NodeRef a, double lo, double hi) {
        Attrs at;
        at.a = lo;
        at.b = hi;
        return build(Op::Clamp, {a}, at);
    }
    NodeRef sum(NodeRef a) { return build(Op::Sum, {a}); }
    NodeRef mean(NodeRef a) { return build(Op::Mean, {a}); }
    NodeRef maximum(NodeRef a, NodeRef b) { return build(Op::Maximum, {a, b}); }
    NodeRef row_sum(NodeRef a) { return build(Op::RowSum, {a}); }
    NodeRef tile_cols(NodeRef a, int m) {
        Attrs at;
        at.n = m;
        return build(Op::TileCols, {a}, at);
    }
    NodeRef l2_normalize_rows(NodeRef a) { return build(Op::L2NormalizeRows, {a}); }
    NodeRef dot_product_rows(NodeRef a, NodeRef b) { return build(Op::DotProductRows, {a, b}); }
    NodeRef select_by_index(NodeRef a, std::vector<int> idx) {
        Attrs at;
        at.indices = std::move(idx);
        return build(Op::SelectByIndex, {a}, at);
    }
    NodeRef scatter_by_index(NodeRef a, std::vector<int> idx, int out_cols) {
        Attrs at;
        at.indices = std::move(idx);
        at.n = out_cols;
        return build(Op::ScatterByIndex, {a}, at);
    }
    NodeRef gather_rows(NodeRef a, std::vector<int> rows) {
        Attrs at;
        at.indices = std::move(rows);
        return build(Op::GatherRows, {a}, at);
    }
    NodeRef scatter_rows(NodeRef a, std::vector<int> rows, int out_rows) {
        Attrs at;
        at.indices = std::move(rows);
        at.n = out_rows;
        return build(Op::ScatterRows, {a}, at);
    }

private:
    std::vector<Node> nodes_;
    uint64_t epoch_ = 1;

    NodeRef make(Op op, std::vector<int> inputs, Attrs attrs, int rows, int cols);
    void check_built(NodeRef r) const;
    void compute(int id);
    NodeRef backward_accumulate(int root_id, const std::vector<int>& targets,
                                std::vector<std::optional<NodeRef>>& adjoint);
    void backward_one(int id, NodeRef g, std::vector<std::optional<NodeRef>>& adjoint);
    void accumulate(int input_id, NodeRef contrib, std::vector<std::optional<NodeRef>>& adjoint);
    NodeRef reduce_to_shape(NodeRef g, int rows, int cols);
};

// Central-difference gradient estimate of f around `point` (test oracle and
// `gradcheck` helper; not part of any training path).
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& point,
                                  double step);

}  // namespace mbn::ad
