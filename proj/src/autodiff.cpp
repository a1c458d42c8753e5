#include "mbn/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace mbn::ad {

namespace {

struct OpNameEntry {
    Op op;
    const char* name;
};

constexpr OpNameEntry kOpNames[] = {
    {Op::Constant, "constant"},
    {Op::Parameter, "parameter"},
    {Op::Add, "add"},
    {Op::Sub, "sub"},
    {Op::Mul, "mul"},
    {Op::Div, "div"},
    {Op::MatMul, "matmul"},
    {Op::Neg, "neg"},
    {Op::Exp, "exp"},
    {Op::Log, "log"},
    {Op::Power, "power"},
    {Op::Sum, "sum"},
    {Op::Mean, "mean"},
    {Op::Maximum, "maximum"},
    {Op::Relu, "relu"},
    {Op::L2NormalizeRows, "l2-normalize-rows"},
    {Op::DotProductRows, "dot-product-rows"},
    {Op::Arccos, "arccos"},
    {Op::Cos, "cos"},
    {Op::Abs, "abs"},
    {Op::Clamp, "clamp"},
    {Op::SelectByIndex, "select-by-index"},
    {Op::Transpose, "transpose"},
    {Op::Sin, "sin"},
    {Op::Sign, "sign"},
    {Op::StepGt, "step-gt"},
    {Op::StepGe, "step-ge"},
    {Op::RowSum, "row-sum"},
    {Op::TileCols, "tile-cols"},
    {Op::ScatterByIndex, "scatter-by-index"},
    {Op::GatherRows, "gather-rows"},
    {Op::ScatterRows, "scatter-rows"},
};

bool broadcast_compatible(const Node& a, const Node& b) {
    if (a.rows == b.rows && a.cols == b.cols) return true;
    if (a.rows == 1 && a.cols == 1) return true;
    if (b.rows == 1 && b.cols == 1) return true;
    return false;
}

}  // namespace

const char* op_name(Op op) {
    for (const auto& e : kOpNames)
        if (e.op == op) return e.name;
    return "?";
}

Op op_from_name(const std::string& name) {
    for (const auto& e : kOpNames)
        if (name == e.name) return e.op;
    throw std::invalid_argument("unknown op-kind: " + name);
}

void ParameterSet::add(const std::string& name, NodeRef leaf) {
    if (index_.count(name)) throw std::invalid_argument("ParameterSet: duplicate name " + name);
    if (!leaf.valid()) throw std::invalid_argument("ParameterSet: invalid node for " + name);
    const Node& n = leaf.graph->node(leaf.id);
    if (n.op != Op::Parameter) throw std::invalid_argument("ParameterSet: " + name + " is not a parameter leaf");
    if (n.value.size() == 0) throw std::invalid_argument("ParameterSet: " + name + " has no value");
    index_[name] = items_.size();
    items_.emplace_back(name, leaf);
}

bool ParameterSet::contains(const std::string& name) const { return index_.count(name) > 0; }

NodeRef ParameterSet::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("ParameterSet: no parameter named " + name);
    return items_[it->second].second;
}

int ParameterSet::scalar_count() const {
    int n = 0;
    for (const auto& [name, ref] : items_) n += ref.graph->node(ref.id).value.size();
    return n;
}

NodeRef Graph::make(Op op, std::vector<int> inputs, Attrs attrs, int rows, int cols) {
    Node n;
    n.op = op;
    n.inputs = std::move(inputs);
    n.attrs = std::move(attrs);
    n.rows = rows;
    n.cols = cols;
    nodes_.push_back(std::move(n));
    return NodeRef{this, static_cast<int>(nodes_.size()) - 1};
}

NodeRef Graph::constant(Tensor value) {
    int r = value.rows, c = value.cols;
    if (value.size() == 0) throw std::invalid_argument("constant: empty value");
    NodeRef ref = make(Op::Constant, {}, {}, r, c);
    nodes_[ref.id].value = std::move(value);
    nodes_[ref.id].value_epoch = epoch_;
    return ref;
}

NodeRef Graph::parameter(Tensor value) {
    int r = value.rows, c = value.cols;
    if (value.size() == 0) throw std::invalid_argument("parameter: empty value");
    NodeRef ref = make(Op::Parameter, {}, {}, r, c);
    nodes_[ref.id].value = std::move(value);
    nodes_[ref.id].value_epoch = epoch_;
    return ref;
}

void Graph::check_built(NodeRef r) const {
    if (r.graph != this) throw std::invalid_argument("node belongs to a different graph");
    if (r.id < 0 || r.id >= node_count()) throw std::invalid_argument("invalid node id");
}

NodeRef Graph::build(Op op, const std::vector<NodeRef>& inputs, Attrs attrs) {
    for (const NodeRef& r : inputs) check_built(r);
    std::vector<int> in;
    in.reserve(inputs.size());
    for (const NodeRef& r : inputs) in.push_back(r.id);
    auto arity = [&](size_t k) {
        if (inputs.size() != k)
            throw std::invalid_argument(std::string(op_name(op)) + ": expected " + std::to_string(k) +
                                        " inputs, got " + std::to_string(inputs.size()));
    };
    auto shape_err = [&](const std::string& msg) {
        throw std::invalid_argument(std::string(op_name(op)) + ": shape mismatch: " + msg);
    };
    const Node* a = inputs.empty() ? nullptr : &node(in[0]);
    const Node* b = inputs.size() > 1 ? &node(in[1]) : nullptr;

    switch (op) {
        case Op::Constant:
        case Op::Parameter:
            throw std::invalid_argument("leaf kinds are created via constant()/parameter()");
        case Op::Add:
        case Op::Sub:
        case Op::Mul:
        case Op::Div:
        case Op::Maximum: {
            arity(2);
            if (!broadcast_compatible(*a, *b))
                shape_err(shape_str(a->rows, a->cols) + " vs " + shape_str(b->rows, b->cols));
            int r = std::max(a->rows, b->rows), c = std::max(a->cols, b->cols);
            return make(op, std::move(in), std::move(attrs), r, c);
        }
        case Op::MatMul: {
            arity(2);
            if (a->cols != b->rows)
                shape_err(shape_str(a->rows, a->cols) + " @ " + shape_str(b->rows, b->cols));
            return make(op, std::move(in), std::move(attrs), a->rows, b->cols);
        }
        case Op::Transpose:
            arity(1);
            return make(op, std::move(in), std::move(attrs), a->cols, a->rows);
        case Op::Neg:
        case Op::Exp:
        case Op::Log:
        case Op::Sin:
        case Op::Cos:
        case Op::Arccos:
        case Op::Abs:
        case Op::Relu:
        case Op::Sign:
        case Op::StepGt:
        case Op::StepGe:
        case Op::Power:
        case Op::Clamp:
            arity(1);
            if (op == Op::Clamp && attrs.a > attrs.b) shape_err("clamp lo > hi");
            return make(op, std::move(in), std::move(attrs), a->rows, a->cols);
        case Op::Sum:
        case Op::Mean:
            arity(1);
            return make(op, std::move(in), std::move(attrs), 1, 1);
        case Op::RowSum:
            arity(1);
            return make(op, std::move(in), std::move(attrs), a->rows, 1);
        case Op::TileCols:
            arity(1);
            if (a->cols != 1) shape_err("tile-cols input must be a column, got " + shape_str(a->rows, a->cols));
            if (attrs.n < 1) shape_err("tile width must be >= 1");
            return make(op, std::move(in), std::move(attrs), a->rows, attrs.n);
        case Op::L2NormalizeRows:
            arity(1);
            return make(op, std::move(in), std::move(attrs), a->rows, a->cols);
        case Op::DotProductRows:
            arity(2);
            if (a->rows != b->rows || a->cols != b->cols)
                shape_err(shape_str(a->rows, a->cols) + " vs " + shape_str(b->rows, b->cols));
            return make(op, std::move(in), std::move(attrs), a->rows, 1);
        case Op::SelectByIndex: {
            arity(1);
            if (static_cast<int>(attrs.indices.size()) != a->rows)
                shape_err("need one index per row");
            for (int ix : attrs.indices)
                if (ix < 0 || ix >= a->cols) shape_err("index out of range");
            return make(op, std::move(in), std::move(attrs), a->rows, 1);
        }
        case Op::ScatterByIndex: {
            arity(1);
            if (a->cols != 1) shape_err("scatter-by-index input must be a column");
            if (static_cast<int>(attrs.indices.size()) != a->rows) shape_err("need one index per row");
            for (int ix : attrs.indices)
                if (ix < 0 || ix >= attrs.n) shape_err("index out of range");
            int n = attrs.n;
            return make(op, std::move(in), std::move(attrs), a->rows, n);
        }
        case Op::GatherRows: {
            arity(1);
            for (int ix : attrs.indices)
                if (ix < 0 || ix >= a->rows) shape_err("row index out of range");
            int k = static_cast<int>(attrs.indices.size());
            if (k == 0) shape_err("gather-rows needs at least one row");
            return make(op, std::move(in), std::move(attrs), k, a->cols);
        }
        case Op::ScatterRows: {
            arity(1);
            if (static_cast<int>(attrs.indices.size()) != a->rows) shape_err("need one target per row");
            for (int ix : attrs.indices)
                if (ix < 0 || ix >= attrs.n) shape_err("row index out of range");
            int r = attrs.n, c = a->cols;
            return make(op, std::move(in), std::move(attrs), r, c);
        }
    }
    throw std::invalid_argument("unknown op-kind");
}

void Graph::set_value(NodeRef leaf, Tensor value) {
    check_built(leaf);
    Node& n = nodes_[leaf.id];
    if (n.op != Op::Parameter && n.op != Op::Constant)
        throw std::invalid_argument("set_value: node is not a leaf");
    if (n.rows != value.rows || n.cols != value.cols)
        throw std::invalid_argument("set_value: shape mismatch");
    ++epoch_;
    n.value = std::move(value);
    n.value_epoch = epoch_;
}

void Graph::compute(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    auto in = [&](size_t k) -> const Tensor& { return nodes_[n.inputs[k]].value; };
    Tensor out(n.rows, n.cols);

    auto elementwise2 = [&](auto f) {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        for (int r = 0; r < n.rows; ++r)
            for (int c = 0; c < n.cols; ++c) {
                double x = a.is_scalar() ? a.data[0] : a.at(r, c);
                double y = b.is_scalar() ? b.data[0] : b.at(r, c);
                out.at(r, c) = f(x, y);
            }
    };
    auto elementwise1 = [&](auto f) {
        const Tensor& a = in(0);
        for (int i = 0; i < out.size(); ++i) out.data[i] = f(a.data[i]);
    };

    switch (n.op) {
        case Op::Constant:
        case Op::Parameter:
            return;  // leaves already hold values
        case Op::Add:
            elementwise2([](double x, double y) { return x + y; });
            break;
        case Op::Sub:
            elementwise2([](double x, double y) { return x - y; });
            break;
        case Op::Mul:
            elementwise2([](double x, double y) { return x * y; });
            break;
        case Op::Div:
            elementwise2([](double x, double y) { return x / y; });
            break;
        case Op::Maximum:
            elementwise2([](double x, double y) { return x >= y ? x : y; });
            break;
        case Op::MatMul: {
            const Tensor& a = in(0);
            const Tensor& b = in(1);
            for (int r = 0; r < a.rows; ++r)
                for (int k = 0; k < a.cols; ++k) {
                    double av = a.at(r, k);
                    if (av == 0.0) continue;
                    for (int c = 0; c < b.cols; ++c) out.at(r, c) += av * b.at(k, c);
                }
            break;
        }
        case Op::Transpose: {
            const Tensor& a = in(0);
            for (int r = 0; r < a.rows; ++r)
                for (int c = 0; c < a.cols; ++c) out.at(c, r) = a.at(r, c);
            break;
        }
        case Op::Neg:
            elementwise1([](double x) { return -x; });
            break;
        case Op::Exp:
            elementwise1([](double x) { return std::exp(x); });
            break;
        case Op::Log:
            elementwise1([](double x) { return std::log(x); });
            break;
        case Op::Sin:
            elementwise1([](double x) { return std::sin(x); });
            break;
        case Op::Cos:
            elementwise1([](double x) { return std::cos(x); });
            break;
        case Op::Arccos:
            elementwise1([](double x) {
                double lo = -1.0 + kArccosEps, hi = 1.0 - kArccosEps;
                return std::acos(std::min(std::max(x, lo), hi));
            });
            break;
        case Op::Abs:
            elementwise1([](double x) { return std::fabs(x); });
            break;
        case Op::Relu:
            elementwise1([](double x) { return x > 0.0 ? x : 0.0; });
            break;
        case Op::Sign:
            elementwise1([](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
            break;
        case Op::StepGt:
            elementwise1([](double x) { return x > 0.0 ? 1.0 : 0.0; });
            break;
        case Op::StepGe:
            elementwise1([](double x) { return x >= 0.0 ? 1.0 : 0.0; });
            break;
        case Op::Power: {
            double p = n.attrs.a;
            elementwise1([p](double x) { return std::pow(x, p); });
            break;
        }
        case Op::Clamp: {
            double lo = n.attrs.a, hi = n.attrs.b;
            elementwise1([lo, hi](double x) { return std::min(std::max(x, lo), hi); });
            break;
        }
        case Op::Sum: {
            double s = 0.0;
            for (double v : in(0).data) s += v;
            out.data[0] = s;
            break;
        }
        case Op::Mean: {
            double s = 0.0;
            for (double v : in(0).data) s += v;
            out.data[0] = s / in(0).size();
            break;
        }
        case Op::RowSum: {
            const Tensor& a = in(0);
            for (int r = 0; r < a.rows; ++r) {
                double s = 0.0;
                for (int c = 0; c < a.cols; ++c) s += a.at(r, c);
                out.at(r, 0) = s;
            }
            break;
        }
        case Op::TileCols: {
            const Tensor& a = in(0);
            for (int r = 0; r < out.rows; ++r)
                for (int c = 0; c < out.cols; ++c) out.at(r, c) = a.at(r, 0);
            break;
        }
        case Op::L2NormalizeRows: {
            const Tensor& a = in(0);
            for (int r = 0; r < a.rows; ++r) {
                double nr = row_norm(a, r);
                for (int c = 0; c < a.cols; ++c) out.at(r, c) = a.at(r, c) / nr;
            }
            break;
        }
        case Op::DotProductRows: {
            const Tensor& a = in(0);
            const Tensor& b = in(1);
            for (int r = 0; r < a.rows; ++r) out.at(r, 0) = row_dot(a, r, b, r);
            break;
        }
        case Op::SelectByIndex: {
            const Tensor& a = in(0);
            for (int r = 0; r < a.rows; ++r) out.at(r, 0) = a.at(r, n.attrs.indices[r]);
            break;
        }
        case Op::ScatterByIndex: {
            const Tensor& a = in(0);
            for (int r = 0; r < a.rows; ++r) out.at(r, n.attrs.indices[r]) = a.at(r, 0);
            break;
        }
        case Op::GatherRows: {
            const Tensor& a = in(0);
            for (int r = 0; r < out.rows; ++r)
                for (int c = 0; c < out.cols; ++c) out.at(r, c) = a.at(n.attrs.indices[r], c);
            break;
        }
        case Op::ScatterRows: {
            const Tensor& a = in(0);
            for (int r = 0; r < a.rows; ++r)
                for (int c = 0; c < a.cols; ++c) out.at(n.attrs.indices[r], c) += a.at(r, c);
            break;
        }
    }
    if (!out.all_finite())
        throw EvalError(std::string("non-finite value in ") + op_name(n.op) + " (node " + std::to_string(id) + ")",
                        id);
    n.value = std::move(out);
    n.value_epoch = epoch_;
}

const Tensor& Graph::evaluate(NodeRef root) {
    check_built(root);
    // collect stale ancestors, then compute in id (topological) order
    std::vector<int> stack{root.id};
    std::vector<char> seen(nodes_.size(), 0);
    std::vector<int> pending;
    while (!stack.empty()) {
        int id = stack.back();
        stack.pop_back();
        if (seen[id]) continue;
        seen[id] = 1;
        const Node& n = nodes_[static_cast<size_t>(id)];
        if (n.op == Op::Constant || n.op == Op::Parameter) {
            if (n.value.size() == 0) throw EvalError("leaf has no value (node " + std::to_string(id) + ")", id);
            continue;
        }
        if (n.value_epoch == epoch_) continue;
        pending.push_back(id);
        for (int in : n.inputs)
            if (!seen[in]) stack.push_back(in);
    }
    std::sort(pending.begin(), pending.end());
    for (int id : pending) compute(id);
    return nodes_[static_cast<size_t>(root.id)].value;
}

NodeRef Graph::reduce_to_shape(NodeRef g, int rows, int cols) {
    const Node& gn = node(g.id);
    if (gn.rows == rows && gn.cols == cols) return g;
    if (rows == 1 && cols == 1) return sum(g);
    throw std::logic_error("reduce_to_shape: incompatible shapes");
}

void Graph::accumulate(int input_id, NodeRef contrib, std::vector<std::optional<NodeRef>>& adjoint) {
    if (adjoint[input_id].has_value())
        adjoint[input_id] = add(*adjoint[input_id], contrib);
    else
        adjoint[input_id] = contrib;
}

void Graph::backward_one(int id, NodeRef g, std::vector<std::optional<NodeRef>>& adjoint) {
    const Node n = nodes_[static_cast<size_t>(id)];  // copy: nodes_ may reallocate while building
    auto input_ref = [&](size_t k) { return NodeRef{this, n.inputs[k]}; };
    auto in_shape = [&](size_t k) { return std::pair<int, int>(node(n.inputs[k]).rows, node(n.inputs[k]).cols); };
    auto acc = [&](size_t k, NodeRef contrib) {
        auto [r, c] = in_shape(k);
        accumulate(n.inputs[k], reduce_to_shape(contrib, r, c), adjoint);
    };
    NodeRef self{this, id};

    switch (n.op) {
        case Op::Constant:
        case Op::Parameter:
            return;
        case Op::Add:
            acc(0, g);
            acc(1, g);
            return;
        case Op::Sub:
            acc(0, g);
            acc(1, neg(g));
            return;
        case Op::Mul:
            acc(0, mul(g, input_ref(1)));
            acc(1, mul(g, input_ref(0)));
            return;
        case Op::Div:
            acc(0, div(g, input_ref(1)));
            acc(1, neg(div(mul(g, self), input_ref(1))));
            return;
        case Op::Maximum: {
            NodeRef mask = build(Op::StepGe, {sub(input_ref(0), input_ref(1))});
            acc(0, mul(g, mask));
            acc(1, mul(g, sub(scalar(1.0), mask)));
            return;
        }
        case Op::MatMul:
            acc(0, matmul(g, transpose(input_ref(1))));
            acc(1, matmul(transpose(input_ref(0)), g));
            return;
        case Op::Transpose:
            acc(0, transpose(g));
            return;
        case Op::Neg:
            acc(0, neg(g));
            return;
        case Op::Exp:
            acc(0, mul(g, self));
            return;
        case Op::Log:
            acc(0, div(g, input_ref(0)));
            return;
        case Op::Sin:
            acc(0, mul(g, cos(input_ref(0))));
            return;
        case Op::Cos:
            acc(0, mul(g, neg(sin(input_ref(0)))));
            return;
        case Op::Arccos: {
            // forward is acos(clamp(x)); chain through the clamp
            NodeRef x = input_ref(0);
            double lo = -1.0 + kArccosEps, hi = 1.0 - kArccosEps;
            NodeRef xc = clamp(x, lo, hi);
            NodeRef deriv = neg(power(sub(scalar(1.0), mul(xc, xc)), -0.5));
            NodeRef mask = mul(build(Op::StepGe, {sub(x, scalar(lo))}), build(Op::StepGe, {sub(scalar(hi), x)}));
            acc(0, mul(g, mul(deriv, mask)));
            return;
        }
        case Op::Abs:
            acc(0, mul(g, build(Op::Sign, {input_ref(0)})));
            return;
        case Op::Relu:
            acc(0, mul(g, build(Op::StepGt, {input_ref(0)})));
            return;
        case Op::Sign:
        case Op::StepGt:
        case Op::StepGe:
            return;  // piecewise constant: zero contribution
        case Op::Power: {
            double p = n.attrs.a;
            if (p == 0.0) return;
            acc(0, mul(g, mul(scalar(p), power(input_ref(0), p - 1.0))));
            return;
        }
        case Op::Clamp: {
            NodeRef x = input_ref(0);
            NodeRef mask =
                mul(build(Op::StepGe, {sub(x, scalar(n.attrs.a))}), build(Op::StepGe, {sub(scalar(n.attrs.b), x)}));
            acc(0, mul(g, mask));
            return;
        }
        case Op::Sum: {
            auto [r, c] = in_shape(0);
            acc(0, mul(constant(Tensor(r, c, 1.0)), g));
            return;
        }
        case Op::Mean: {
            auto [r, c] = in_shape(0);
            acc(0, mul(constant(Tensor(r, c, 1.0 / (static_cast<double>(r) * c))), g));
            return;
        }
        case Op::RowSum: {
            auto [r, c] = in_shape(0);
            (void)r;
            acc(0, tile_cols(g, c));
            return;
        }
        case Op::TileCols:
            acc(0, row_sum(g));
            return;
        case Op::L2NormalizeRows: {
            NodeRef x = input_ref(0);
            auto [r, c] = in_shape(0);
            (void)r;
            NodeRef inv_norm = power(row_sum(mul(x, x)), -0.5);
            NodeRef gy = row_sum(mul(g, self));
            NodeRef term = mul(self, tile_cols(gy, c));
            acc(0, mul(sub(g, term), tile_cols(inv_norm, c)));
            return;
        }
        case Op::DotProductRows: {
            auto [r, c] = in_shape(0);
            (void)r;
            acc(0, mul(tile_cols(g, c), input_ref(1)));
            acc(1, mul(tile_cols(g, c), input_ref(0)));
            return;
        }
        case Op::SelectByIndex: {
            auto [r, c] = in_shape(0);
            (void)r;
            acc(0, scatter_by_index(g, n.attrs.indices, c));
            return;
        }
        case Op::ScatterByIndex:
            acc(0, select_by_index(g, n.attrs.indices));
            return;
        case Op::GatherRows: {
            auto [r, c] = in_shape(0);
            (void)c;
            acc(0, scatter_rows(g, n.attrs.indices, r));
            return;
        }
        case Op::ScatterRows:
            acc(0, gather_rows(g, n.attrs.indices));
            return;
    }
}

std::map<std::string, NodeRef> Graph::gradient(NodeRef scalar_node, const ParameterSet& wrt, bool differentiable) {
    check_built(scalar_node);
    const Node& root = node(scalar_node.id);
    if (root.rows != 1 || root.cols != 1)
        throw std::invalid_argument("gradient: root must be a scalar, got " + shape_str(root.rows, root.cols));

    std::vector<char> active(static_cast<size_t>(scalar_node.id) + 1, 0);
    {
        std::vector<int> stack{scalar_node.id};
        while (!stack.empty()) {
            int id = stack.back();
            stack.pop_back();
            if (active[id]) continue;
            active[id] = 1;
            for (int in : nodes_[static_cast<size_t>(id)].inputs) stack.push_back(in);
        }
    }

    std::vector<std::optional<NodeRef>> adjoint(static_cast<size_t>(scalar_node.id) + 1);
    adjoint[scalar_node.id] = scalar(1.0);
    for (int id = scalar_node.id; id >= 0; --id) {
        if (!active[id] || !adjoint[id].has_value()) continue;
        backward_one(id, *adjoint[id], adjoint);
    }

    std::map<std::string, NodeRef> result;
    for (const auto& [name, leaf] : wrt.items()) {
        if (leaf.graph != this) throw std::invalid_argument("gradient: parameter " + name + " not in this graph");
        const Node& ln = node(leaf.id);
        NodeRef gnode;
        if (leaf.id <= scalar_node.id && adjoint[leaf.id].has_value())
            gnode = *adjoint[leaf.id];
        else
            gnode = constant(Tensor(ln.rows, ln.cols, 0.0));
        if (!differentiable) gnode = constant(evaluate(gnode));
        result[name] = gnode;
    }
    return result;
}

std::map<std::string, Tensor> Graph::mixed_second(NodeRef scalar_node, const ParameterSet& first_wrt,
                                                  const std::map<std::string, Tensor>& direction,
                                                  const ParameterSet& second_wrt) {
    auto first = gradient(scalar_node, first_wrt, /*differentiable=*/true);
    NodeRef inner;
    bool have = false;
    for (const auto& [name, gnode] : first) {
        auto it = direction.find(name);
        if (it == direction.end()) throw std::invalid_argument("mixed_second: missing direction for " + name);
        const Node& gn = node(gnode.id);
        if (it->second.rows != gn.rows || it->second.cols != gn.cols)
            throw std::invalid_argument("mixed_second: direction shape mismatch for " + name);
        NodeRef term = sum(mul(gnode, constant(it->second)));
        inner = have ? add(inner, term) : term;
        have = true;
    }
    if (!have) throw std::invalid_argument("mixed_second: empty first_wrt");

    auto second = gradient(inner, second_wrt, /*differentiable=*/false);
    std::map<std::string, Tensor> out;
    for (const auto& [name, gnode] : second) out[name] = evaluate(gnode);
    return out;
}

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& point,
                                  double step) {
    if (step <= 0.0) throw std::invalid_argument("finite_difference_gradient: step must be > 0");
    Tensor grad(point.rows, point.cols);
    Tensor probe = point;
    for (int i = 0; i < point.size(); ++i) {
        double orig = probe.data[i];
        probe.data[i] = orig + step;
        double fp = f(probe);
        probe.data[i] = orig - step;
        double fm = f(probe);
        probe.data[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw std::runtime_error("finite_difference_gradient: non-finite function value");
        grad.data[i] = (fp - fm) / (2.0 * step);
    }
    return grad;
}

}  // namespace mbn::ad
