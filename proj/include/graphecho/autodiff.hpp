#pragma once

// Reverse-mode differentiation over a tape of dense-tensor primitives.
// Graphs are built incrementally (nodes are appended in topological order),
// values can be peeked eagerly while building, and a finished graph can be
// re-evaluated as a pure function of its leaf bindings, which is what the
// finite-difference checker relies on: discrete choices made during
// construction (gather indices, neighbour selections, transport plans) are
// baked into the tape as constants and stay fixed across re-evaluations.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "graphecho/tensor.hpp"

namespace graphecho {

enum class Op {
    Leaf,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Matmul,
    Transpose,
    Reshape,
    Concat,
    Gather,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Softmax,
    SumAll,
    SumAxis,
    MeanAll,
    MeanAxis,
    Conv2d,
    AvgPool2d,
    Upsample2d,
    L2Normalize,
    GradReverse,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Const: return "const";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Div: return "div";
        case Op::Matmul: return "matmul";
        case Op::Transpose: return "transpose";
        case Op::Reshape: return "reshape";
        case Op::Concat: return "concat";
        case Op::Gather: return "gather";
        case Op::Relu: return "relu";
        case Op::Sigmoid: return "sigmoid";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Softmax: return "softmax";
        case Op::SumAll: return "sum";
        case Op::SumAxis: return "sum_axis";
        case Op::MeanAll: return "mean";
        case Op::MeanAxis: return "mean_axis";
        case Op::Conv2d: return "conv2d";
        case Op::AvgPool2d: return "avgpool2d";
        case Op::Upsample2d: return "upsample2d";
        case Op::L2Normalize: return "l2_normalize";
        case Op::GradReverse: return "grad_reverse";
    }
    return "?";
}

constexpr double kLogClamp = 1e-12;

template <typename S>
class Graph;

template <typename S>
struct Var {
    Graph<S>* graph = nullptr;
    int id = -1;
    bool valid() const { return graph != nullptr && id >= 0; }
};

template <typename S>
using Bindings = std::map<std::string, Tensor<S>>;

template <typename S>
using GradMap = std::map<std::string, Tensor<S>>;

namespace detail {

// outer/len/inner decomposition of `shape` around `axis`
struct AxisSplit {
    int64_t outer, len, inner;
};

inline AxisSplit axis_split(const std::vector<int>& shape, int axis) {
    AxisSplit s{1, shape[size_t(axis)], 1};
    for (int i = 0; i < axis; ++i) s.outer *= shape[size_t(i)];
    for (size_t i = size_t(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

enum class Broadcast { None, ScalarRight, ScalarLeft, VecRight, VecLeft };

inline Broadcast broadcast_kind(const std::vector<int>& a, const std::vector<int>& b,
                                const char* op) {
    if (a == b) return Broadcast::None;
    if (shape_numel(b) == 1) return Broadcast::ScalarRight;
    if (shape_numel(a) == 1) return Broadcast::ScalarLeft;
    if (b.size() == 1 && !a.empty() && a.back() == b[0]) return Broadcast::VecRight;
    if (a.size() == 1 && !b.empty() && b.back() == a[0]) return Broadcast::VecLeft;
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " vs " +
                     shape_str(b));
}

}  // namespace detail

template <typename S>
class Graph {
  public:
    struct Node {
        Op op = Op::Const;
        std::vector<int> inputs;
        std::vector<int> shape;
        std::string name;            // leaves only
        bool requires_grad = false;  // leaves only
        std::vector<int> iattr;      // axis / stride / pad / pool factor
        double dattr = 0.0;          // grad-reversal coefficient
        std::vector<int> indices;    // gather rows
        Tensor<S> cval;              // constants
    };

    // --- construction ---------------------------------------------------

    Var<S> input(const std::string& name, std::vector<int> shape, bool requires_grad = true) {
        if (name.empty()) throw ShapeError("leaf: empty name");
        if (leaf_ids_.count(name)) throw ShapeError("leaf: duplicate name '" + name + "'");
        Node n;
        n.op = Op::Leaf;
        n.shape = std::move(shape);
        n.name = name;
        n.requires_grad = requires_grad;
        for (int e : n.shape)
            if (e <= 0) throw ShapeError("leaf '" + name + "': bad shape " + shape_str(n.shape));
        leaf_ids_[name] = int(nodes_.size());
        return push(std::move(n));
    }

    Var<S> constant(Tensor<S> v) {
        Node n;
        n.op = Op::Const;
        n.shape = v.shape;
        n.cval = std::move(v);
        return push(std::move(n));
    }
    Var<S> constant_scalar(S v) { return constant(Tensor<S>::scalar(v)); }

    Var<S> make(Op op, std::vector<int> inputs, std::vector<int> shape, std::vector<int> iattr = {},
                double dattr = 0.0, std::vector<int> indices = {}) {
        Node n;
        n.op = op;
        n.inputs = std::move(inputs);
        n.shape = std::move(shape);
        n.iattr = std::move(iattr);
        n.dattr = dattr;
        n.indices = std::move(indices);
        return push(std::move(n));
    }

    // --- bindings and eager evaluation ----------------------------------

    void bind(const std::string& name, Tensor<S> value) {
        auto it = leaf_ids_.find(name);
        if (it == leaf_ids_.end()) throw ShapeError("bind: unknown leaf '" + name + "'");
        const Node& leaf = nodes_[size_t(it->second)];
        if (leaf.shape != value.shape)
            throw ShapeError("bind '" + name + "': expected " + shape_str(leaf.shape) + ", got " +
                             shape_str(value.shape));
        bound_[name] = std::move(value);
        computed_ = std::min(computed_, size_t(it->second));
    }

    // forward value of `v` under the current bindings; cached
    const Tensor<S>& value(Var<S> v) {
        ensure_cache();
        while (computed_ <= size_t(v.id)) {
            cache_[computed_] = forward_node(int(computed_), cache_, bound_);
            ++computed_;
        }
        return cache_[size_t(v.id)];
    }

    void set_output(Var<S> v) { output_ = v.id; }
    int output_id() const { return output_ < 0 ? int(nodes_.size()) - 1 : output_; }

    void set_checked(bool on) { checked_ = on; }
    bool checked() const { return checked_; }

    // reverse-mode gradients using the eager cache
    GradMap<S> gradients(Var<S> out, const std::set<std::string>& wrt = {}) {
        value(out);  // make sure forward is complete
        return backward(out.id, cache_, bound_, wrt);
    }

    // --- pure evaluation (used by the finite-difference checker) --------

    Tensor<S> evaluate_with(const Bindings<S>& bindings) const {
        std::vector<Tensor<S>> vals(nodes_.size());
        const int out = output_id();
        for (int i = 0; i <= out; ++i) vals[size_t(i)] = forward_node(i, vals, bindings);
        return vals[size_t(out)];
    }

    GradMap<S> gradient_with(const Bindings<S>& bindings,
                             const std::set<std::string>& wrt = {}) const {
        std::vector<Tensor<S>> vals(nodes_.size());
        const int out = output_id();
        for (int i = 0; i <= out; ++i) vals[size_t(i)] = forward_node(i, vals, bindings);
        return backward(out, vals, bindings, wrt);
    }

    // --- introspection ---------------------------------------------------

    size_t size() const { return nodes_.size(); }
    const Node& node(int id) const { return nodes_[size_t(id)]; }
    const std::map<std::string, int>& leaves() const { return leaf_ids_; }
    const std::vector<int>& shape_of(Var<S> v) const { return nodes_[size_t(v.id)].shape; }

  private:
    std::vector<Node> nodes_;
    std::map<std::string, int> leaf_ids_;
    Bindings<S> bound_;
    std::vector<Tensor<S>> cache_;
    size_t computed_ = 0;
    int output_ = -1;
    bool checked_ = false;

    Var<S> push(Node n) {
        nodes_.push_back(std::move(n));
        return Var<S>{this, int(nodes_.size()) - 1};
    }

    void ensure_cache() {
        if (cache_.size() < nodes_.size()) cache_.resize(nodes_.size());
    }

    [[noreturn]] void fail(int id, const std::string& msg) const {
        throw ShapeError(std::string(op_name(nodes_[size_t(id)].op)) + ": " + msg);
    }

    Tensor<S> forward_node(int id, const std::vector<Tensor<S>>& vals,
                           const Bindings<S>& bindings) const {
        const Node& n = nodes_[size_t(id)];
        auto in = [&](int k) -> const Tensor<S>& { return vals[size_t(n.inputs[size_t(k)])]; };
        Tensor<S> out;
        switch (n.op) {
            case Op::Leaf: {
                auto it = bindings.find(n.name);
                if (it == bindings.end())
                    throw ShapeError("evaluate: leaf '" + n.name + "' is unbound");
                if (it->second.shape != n.shape)
                    throw ShapeError("evaluate: leaf '" + n.name + "' bound with " +
                                     shape_str(it->second.shape) + ", declared " +
                                     shape_str(n.shape));
                out = it->second;
                break;
            }
            case Op::Const: out = n.cval; break;
            case Op::Add: out = binary(n, in(0), in(1), [](S a, S b) { return a + b; }); break;
            case Op::Sub: out = binary(n, in(0), in(1), [](S a, S b) { return a - b; }); break;
            case Op::Mul: out = binary(n, in(0), in(1), [](S a, S b) { return a * b; }); break;
            case Op::Div: out = binary(n, in(0), in(1), [](S a, S b) { return a / b; }); break;
            case Op::Matmul: {
                const auto& a = in(0);
                const auto& b = in(1);
                out = Tensor<S>::zeros(n.shape);
                out.mat(a.shape[0], b.shape[1]).noalias() =
                    a.mat(a.shape[0], a.shape[1]) * b.mat(b.shape[0], b.shape[1]);
                break;
            }
            case Op::Transpose: {
                const auto& a = in(0);
                out = Tensor<S>::zeros(n.shape);
                out.mat(a.shape[1], a.shape[0]).noalias() =
                    a.mat(a.shape[0], a.shape[1]).transpose();
                break;
            }
            case Op::Reshape:
                out = in(0);
                out.shape = n.shape;
                break;
            case Op::Concat: {
                const int axis = n.iattr[0];
                out = Tensor<S>::zeros(n.shape);
                auto os = detail::axis_split(n.shape, axis);
                int64_t off = 0;
                for (int k = 0; k < int(n.inputs.size()); ++k) {
                    const auto& a = in(k);
                    auto as = detail::axis_split(a.shape, axis);
                    for (int64_t o = 0; o < as.outer; ++o) {
                        const int64_t blk = as.len * as.inner;
                        out.data.segment(o * os.len * os.inner + off * os.inner, blk) =
                            a.data.segment(o * blk, blk);
                    }
                    off += as.len;
                }
                break;
            }
            case Op::Gather: {
                const auto& a = in(0);
                const int64_t inner = a.numel() / a.shape[0];
                out = Tensor<S>::zeros(n.shape);
                for (size_t i = 0; i < n.indices.size(); ++i)
                    out.data.segment(int64_t(i) * inner, inner) =
                        a.data.segment(int64_t(n.indices[i]) * inner, inner);
                break;
            }
            case Op::Relu:
                out = in(0);
                out.data = out.data.max(S(0));
                break;
            case Op::Sigmoid:
                out = in(0);
                out.data = S(1) / (S(1) + (-out.data).exp());
                break;
            case Op::Exp:
                out = in(0);
                out.data = out.data.exp();
                break;
            case Op::Log:
                out = in(0);
                out.data = out.data.max(S(kLogClamp)).log();
                break;
            case Op::Softmax: {
                const auto& a = in(0);
                out = Tensor<S>::zeros(n.shape);
                auto sp = detail::axis_split(a.shape, n.iattr[0]);
                softmax_fwd(a, out, sp);
                break;
            }
            case Op::SumAll: {
                out = Tensor<S>::scalar(in(0).data.sum());
                break;
            }
            case Op::MeanAll: {
                out = Tensor<S>::scalar(in(0).data.sum() / S(in(0).numel()));
                break;
            }
            case Op::SumAxis:
            case Op::MeanAxis: {
                const auto& a = in(0);
                auto sp = detail::axis_split(a.shape, n.iattr[0]);
                out = Tensor<S>::zeros(n.shape);
                for (int64_t o = 0; o < sp.outer; ++o)
                    for (int64_t i = 0; i < sp.len; ++i)
                        out.data.segment(o * sp.inner, sp.inner) +=
                            a.data.segment((o * sp.len + i) * sp.inner, sp.inner);
                if (n.op == Op::MeanAxis) out.data /= S(sp.len);
                break;
            }
            case Op::Conv2d: out = conv2d_fwd(n, in(0), in(1)); break;
            case Op::AvgPool2d: {
                const auto& a = in(0);
                const int k = n.iattr[0];
                const int H = a.shape[0], W = a.shape[1], C = a.shape[2];
                const int OH = H / k, OW = W / k;
                out = Tensor<S>::zeros(n.shape);
                for (int oy = 0; oy < OH; ++oy)
                    for (int ox = 0; ox < OW; ++ox) {
                        auto acc = out.data.segment((int64_t(oy) * OW + ox) * C, C);
                        for (int dy = 0; dy < k; ++dy)
                            for (int dx = 0; dx < k; ++dx)
                                acc += a.data.segment(
                                    (int64_t(oy * k + dy) * W + (ox * k + dx)) * C, C);
                        acc /= S(k * k);
                    }
                break;
            }
            case Op::Upsample2d: {
                const auto& a = in(0);
                const int f = n.iattr[0];
                const int H = a.shape[0], W = a.shape[1], C = a.shape[2];
                out = Tensor<S>::zeros(n.shape);
                for (int y = 0; y < H * f; ++y)
                    for (int x = 0; x < W * f; ++x)
                        out.data.segment((int64_t(y) * W * f + x) * C, C) =
                            a.data.segment((int64_t(y / f) * W + (x / f)) * C, C);
                break;
            }
            case Op::L2Normalize: {
                const auto& a = in(0);
                out = Tensor<S>::zeros(n.shape);
                auto sp = detail::axis_split(a.shape, n.iattr[0]);
                for (int64_t o = 0; o < sp.outer; ++o)
                    for (int64_t j = 0; j < sp.inner; ++j) {
                        S n2 = 0;
                        for (int64_t i = 0; i < sp.len; ++i) {
                            S v = a.data[(o * sp.len + i) * sp.inner + j];
                            n2 += v * v;
                        }
                        if (n2 > S(0)) {
                            const S inv = S(1) / std::sqrt(n2);
                            for (int64_t i = 0; i < sp.len; ++i)
                                out.data[(o * sp.len + i) * sp.inner + j] =
                                    a.data[(o * sp.len + i) * sp.inner + j] * inv;
                        }  // zero vector normalizes to zero
                    }
                break;
            }
            case Op::GradReverse: out = in(0); break;
        }
        if (checked_ && !out.all_finite())
            throw NumericError(std::string("non-finite value after primitive '") + op_name(n.op) +
                               "' (node " + std::to_string(id) + ")");
        return out;
    }

    template <typename F>
    Tensor<S> binary(const Node& n, const Tensor<S>& a, const Tensor<S>& b, F f) const {
        using detail::Broadcast;
        Tensor<S> out = Tensor<S>::zeros(n.shape);
        switch (static_cast<Broadcast>(n.iattr[0])) {
            case Broadcast::None:
                for (int64_t i = 0; i < out.numel(); ++i) out.data[i] = f(a.data[i], b.data[i]);
                break;
            case Broadcast::ScalarRight: {
                const S s = b.data[0];
                for (int64_t i = 0; i < out.numel(); ++i) out.data[i] = f(a.data[i], s);
                break;
            }
            case Broadcast::ScalarLeft: {
                const S s = a.data[0];
                for (int64_t i = 0; i < out.numel(); ++i) out.data[i] = f(s, b.data[i]);
                break;
            }
            case Broadcast::VecRight: {
                const int64_t c = b.numel();
                for (int64_t i = 0; i < out.numel(); ++i) out.data[i] = f(a.data[i], b.data[i % c]);
                break;
            }
            case Broadcast::VecLeft: {
                const int64_t c = a.numel();
                for (int64_t i = 0; i < out.numel(); ++i) out.data[i] = f(a.data[i % c], b.data[i]);
                break;
            }
        }
        return out;
    }

    static void softmax_fwd(const Tensor<S>& a, Tensor<S>& out, const detail::AxisSplit& sp) {
        for (int64_t o = 0; o < sp.outer; ++o)
            for (int64_t j = 0; j < sp.inner; ++j) {
                const int64_t base = o * sp.len * sp.inner + j;
                S m = a.data[base];
                for (int64_t i = 1; i < sp.len; ++i)
                    m = std::max(m, a.data[base + i * sp.inner]);
                S z = 0;
                for (int64_t i = 0; i < sp.len; ++i) {
                    S e = std::exp(a.data[base + i * sp.inner] - m);
                    out.data[base + i * sp.inner] = e;
                    z += e;
                }
                const S inv = S(1) / z;
                for (int64_t i = 0; i < sp.len; ++i) out.data[base + i * sp.inner] *= inv;
            }
    }

    Tensor<S> conv2d_fwd(const Node& n, const Tensor<S>& x, const Tensor<S>& w) const {
        const int H = x.shape[0], W = x.shape[1], Ci = x.shape[2];
        const int kh = w.shape[0], kw = w.shape[1], Co = w.shape[3];
        const int stride = n.iattr[0], pad = n.iattr[1];
        const int OH = n.shape[0], OW = n.shape[1];
        MatRM<S> patches = im2col(x, kh, kw, stride, pad, OH, OW);
        Tensor<S> out = Tensor<S>::zeros(n.shape);
        out.mat(OH * OW, Co).noalias() = patches * w.mat(kh * kw * Ci, Co);
        (void)H;
        (void)W;
        return out;
    }

    static MatRM<S> im2col(const Tensor<S>& x, int kh, int kw, int stride, int pad, int OH,
                           int OW) {
        const int H = x.shape[0], W = x.shape[1], C = x.shape[2];
        MatRM<S> p = MatRM<S>::Zero(int64_t(OH) * OW, int64_t(kh) * kw * C);
        for (int oy = 0; oy < OH; ++oy) {
            for (int ky = 0; ky < kh; ++ky) {
                const int y = oy * stride - pad + ky;
                if (y < 0 || y >= H) continue;
                for (int ox = 0; ox < OW; ++ox) {
                    S* dst = p.data() + (int64_t(oy) * OW + ox) * (int64_t(kh) * kw * C) +
                             int64_t(ky) * kw * C;
                    const int x0 = ox * stride - pad;
                    for (int kx = 0; kx < kw; ++kx) {
                        const int xx = x0 + kx;
                        if (xx < 0 || xx >= W) continue;
                        const S* src = x.data.data() + (int64_t(y) * W + xx) * C;
                        std::copy(src, src + C, dst + int64_t(kx) * C);
                    }
                }
            }
        }
        return p;
    }

    // reverse sweep from `out_id`; adjoints only for nodes on a path to a
    // requested leaf
    GradMap<S> backward(int out_id, const std::vector<Tensor<S>>& vals,
                        const Bindings<S>& bindings, const std::set<std::string>& wrt) const {
        if (shape_numel(nodes_[size_t(out_id)].shape) != 1)
            throw ShapeError("gradient: output is not scalar, shape " +
                             shape_str(nodes_[size_t(out_id)].shape));
        std::vector<char> needs(nodes_.size(), 0);
        for (int i = 0; i <= out_id; ++i) {
            const Node& n = nodes_[size_t(i)];
            if (n.op == Op::Leaf) {
                const bool requested = wrt.empty() ? n.requires_grad : wrt.count(n.name) > 0;
                needs[size_t(i)] = requested;
            } else {
                for (int j : n.inputs)
                    if (needs[size_t(j)]) {
                        needs[size_t(i)] = 1;
                        break;
                    }
            }
        }
        std::vector<Tensor<S>> adj(nodes_.size());
        if (needs[size_t(out_id)]) adj[size_t(out_id)] = Tensor<S>::scalar(S(1));
        for (int id = out_id; id >= 0; --id) {
            if (!needs[size_t(id)] || adj[size_t(id)].numel() == 0) continue;
            backward_node(id, vals, adj, needs);
        }
        GradMap<S> grads;
        for (const auto& [name, lid] : leaf_ids_) {
            if (lid > out_id) continue;
            const bool requested =
                wrt.empty() ? nodes_[size_t(lid)].requires_grad : wrt.count(name) > 0;
            if (!requested) continue;
            if (adj[size_t(lid)].numel() == 0)
                grads[name] = Tensor<S>::zeros(nodes_[size_t(lid)].shape);
            else
                grads[name] = adj[size_t(lid)];
        }
        (void)bindings;
        return grads;
    }

    void accumulate(std::vector<Tensor<S>>& adj, int id, const ArrayX<S>& g) const {
        if (adj[size_t(id)].numel() == 0)
            adj[size_t(id)] = Tensor<S>(nodes_[size_t(id)].shape, g);
        else
            adj[size_t(id)].data += g;
    }

    void backward_node(int id, const std::vector<Tensor<S>>& vals, std::vector<Tensor<S>>& adj,
                       const std::vector<char>& needs) const {
        const Node& n = nodes_[size_t(id)];
        const Tensor<S>& g = adj[size_t(id)];
        const Tensor<S>& y = vals[size_t(id)];
        auto inv = [&](int k) -> const Tensor<S>& { return vals[size_t(n.inputs[size_t(k)])]; };
        auto want = [&](int k) { return needs[size_t(n.inputs[size_t(k)])] != 0; };
        auto acc = [&](int k, const ArrayX<S>& grad) {
            accumulate(adj, n.inputs[size_t(k)], grad);
        };
        using detail::Broadcast;
        switch (n.op) {
            case Op::Leaf:
            case Op::Const: break;
            case Op::Add:
            case Op::Sub: {
                const S sign = n.op == Op::Sub ? S(-1) : S(1);
                if (want(0)) acc(0, reduce_to(g.data, inv(0).numel()));
                if (want(1)) acc(1, ArrayX<S>(sign * reduce_to(g.data, inv(1).numel())));
                break;
            }
            case Op::Mul: {
                if (want(0)) acc(0, reduce_to(bcast_apply(g.data, inv(1),
                                                          [](S u, S v) { return u * v; }),
                                              inv(0).numel()));
                if (want(1)) acc(1, reduce_to(bcast_apply(g.data, inv(0),
                                                          [](S u, S v) { return u * v; }),
                                              inv(1).numel()));
                break;
            }
            case Op::Div: {
                // y = a / b: da = g / b, db = -g * y / b
                const auto& b = inv(1);
                if (want(0))
                    acc(0, reduce_to(bcast_apply(g.data, b, [](S u, S v) { return u / v; }),
                                     inv(0).numel()));
                if (want(1)) {
                    ArrayX<S> t = g.data * y.data;
                    acc(1, reduce_to(bcast_apply(t, b, [](S u, S v) { return -u / v; }),
                                     b.numel()));
                }
                break;
            }
            case Op::Matmul: {
                const auto& a = inv(0);
                const auto& b = inv(1);
                const int m = a.shape[0], k = a.shape[1], c = b.shape[1];
                if (want(0)) {
                    ArrayX<S> da(a.numel());
                    Eigen::Map<MatRM<S>>(da.data(), m, k).noalias() =
                        g.mat(m, c) * b.mat(k, c).transpose();
                    acc(0, da);
                }
                if (want(1)) {
                    ArrayX<S> db(b.numel());
                    Eigen::Map<MatRM<S>>(db.data(), k, c).noalias() =
                        a.mat(m, k).transpose() * g.mat(m, c);
                    acc(1, db);
                }
                break;
            }
            case Op::Transpose: {
                const auto& a = inv(0);
                if (want(0)) {
                    ArrayX<S> da(a.numel());
                    Eigen::Map<MatRM<S>>(da.data(), a.shape[0], a.shape[1]).noalias() =
                        g.mat(a.shape[1], a.shape[0]).transpose();
                    acc(0, da);
                }
                break;
            }
            case Op::Reshape:
                if (want(0)) acc(0, g.data);
                break;
            case Op::Concat: {
                const int axis = n.iattr[0];
                auto os = detail::axis_split(n.shape, axis);
                int64_t off = 0;
                for (int kk = 0; kk < int(n.inputs.size()); ++kk) {
                    const auto& a = inv(kk);
                    auto as = detail::axis_split(a.shape, axis);
                    if (want(kk)) {
                        ArrayX<S> da(a.numel());
                        const int64_t blk = as.len * as.inner;
                        for (int64_t o = 0; o < as.outer; ++o)
                            da.segment(o * blk, blk) =
                                g.data.segment(o * os.len * os.inner + off * os.inner, blk);
                        acc(kk, da);
                    }
                    off += as.len;
                }
                break;
            }
            case Op::Gather: {
                const auto& a = inv(0);
                if (want(0)) {
                    const int64_t inner = a.numel() / a.shape[0];
                    ArrayX<S> da = ArrayX<S>::Zero(a.numel());
                    for (size_t i = 0; i < n.indices.size(); ++i)
                        da.segment(int64_t(n.indices[i]) * inner, inner) +=
                            g.data.segment(int64_t(i) * inner, inner);
                    acc(0, da);
                }
                break;
            }
            case Op::Relu:
                if (want(0)) acc(0, ArrayX<S>(g.data * (inv(0).data > S(0)).template cast<S>()));
                break;
            case Op::Sigmoid:
                if (want(0)) acc(0, ArrayX<S>(g.data * y.data * (S(1) - y.data)));
                break;
            case Op::Exp:
                if (want(0)) acc(0, ArrayX<S>(g.data * y.data));
                break;
            case Op::Log:
                if (want(0)) {
                    const auto& a = inv(0);
                    ArrayX<S> da(a.numel());
                    for (int64_t i = 0; i < a.numel(); ++i)
                        da[i] = a.data[i] >= S(kLogClamp) ? g.data[i] / a.data[i] : S(0);
                    acc(0, da);
                }
                break;
            case Op::Softmax: {
                if (want(0)) {
                    auto sp = detail::axis_split(n.shape, n.iattr[0]);
                    ArrayX<S> da(y.numel());
                    for (int64_t o = 0; o < sp.outer; ++o)
                        for (int64_t j = 0; j < sp.inner; ++j) {
                            const int64_t base = o * sp.len * sp.inner + j;
                            S dot = 0;
                            for (int64_t i = 0; i < sp.len; ++i)
                                dot += g.data[base + i * sp.inner] * y.data[base + i * sp.inner];
                            for (int64_t i = 0; i < sp.len; ++i)
                                da[base + i * sp.inner] =
                                    y.data[base + i * sp.inner] *
                                    (g.data[base + i * sp.inner] - dot);
                        }
                    acc(0, da);
                }
                break;
            }
            case Op::SumAll:
                if (want(0)) acc(0, ArrayX<S>::Constant(inv(0).numel(), g.data[0]));
                break;
            case Op::MeanAll:
                if (want(0))
                    acc(0, ArrayX<S>::Constant(inv(0).numel(), g.data[0] / S(inv(0).numel())));
                break;
            case Op::SumAxis:
            case Op::MeanAxis: {
                if (want(0)) {
                    const auto& a = inv(0);
                    auto sp = detail::axis_split(a.shape, n.iattr[0]);
                    const S scale = n.op == Op::MeanAxis ? S(1) / S(sp.len) : S(1);
                    ArrayX<S> da(a.numel());
                    for (int64_t o = 0; o < sp.outer; ++o)
                        for (int64_t i = 0; i < sp.len; ++i)
                            da.segment((o * sp.len + i) * sp.inner, sp.inner) =
                                g.data.segment(o * sp.inner, sp.inner) * scale;
                    acc(0, da);
                }
                break;
            }
            case Op::Conv2d: conv2d_bwd(n, inv(0), inv(1), g, adj, want(0), want(1)); break;
            case Op::AvgPool2d: {
                if (want(0)) {
                    const auto& a = inv(0);
                    const int k = n.iattr[0];
                    const int W = a.shape[1], C = a.shape[2];
                    const int OH = n.shape[0], OW = n.shape[1];
                    ArrayX<S> da = ArrayX<S>::Zero(a.numel());
                    const S inv_kk = S(1) / S(k * k);
                    for (int oy = 0; oy < OH; ++oy)
                        for (int ox = 0; ox < OW; ++ox) {
                            const auto gseg = g.data.segment((int64_t(oy) * OW + ox) * C, C);
                            for (int dy = 0; dy < k; ++dy)
                                for (int dx = 0; dx < k; ++dx)
                                    da.segment((int64_t(oy * k + dy) * W + (ox * k + dx)) * C, C) +=
                                        gseg * inv_kk;
                        }
                    acc(0, da);
                }
                break;
            }
            case Op::Upsample2d: {
                if (want(0)) {
                    const auto& a = inv(0);
                    const int f = n.iattr[0];
                    const int W = a.shape[1], C = a.shape[2];
                    const int OH = n.shape[0], OW = n.shape[1];
                    ArrayX<S> da = ArrayX<S>::Zero(a.numel());
                    for (int y = 0; y < OH; ++y)
                        for (int x = 0; x < OW; ++x)
                            da.segment((int64_t(y / f) * W + (x / f)) * C, C) +=
                                g.data.segment((int64_t(y) * OW + x) * C, C);
                    acc(0, da);
                }
                break;
            }
            case Op::L2Normalize: {
                if (want(0)) {
                    const auto& a = inv(0);
                    auto sp = detail::axis_split(a.shape, n.iattr[0]);
                    ArrayX<S> da = ArrayX<S>::Zero(a.numel());
                    for (int64_t o = 0; o < sp.outer; ++o)
                        for (int64_t j = 0; j < sp.inner; ++j) {
                            const int64_t base = o * sp.len * sp.inner + j;
                            S n2 = 0;
                            for (int64_t i = 0; i < sp.len; ++i) {
                                S v = a.data[base + i * sp.inner];
                                n2 += v * v;
                            }
                            if (n2 <= S(0)) continue;  // zero vector: gradient defined as zero
                            const S invn = S(1) / std::sqrt(n2);
                            S dot = 0;
                            for (int64_t i = 0; i < sp.len; ++i)
                                dot += g.data[base + i * sp.inner] * y.data[base + i * sp.inner];
                            for (int64_t i = 0; i < sp.len; ++i)
                                da[base + i * sp.inner] =
                                    (g.data[base + i * sp.inner] -
                                     y.data[base + i * sp.inner] * dot) *
                                    invn;
                        }
                    acc(0, da);
                }
                break;
            }
            case Op::GradReverse:
                if (want(0)) acc(0, ArrayX<S>(g.data * S(-n.dattr)));
                break;
        }
    }

    // --- broadcast gradient helpers --------------------------------------
    // The two broadcast forms (scalar, trailing vector) both read the small
    // operand with period equal to its element count, so gradients reduce
    // and expand purely by element count.

    static ArrayX<S> reduce_to(const ArrayX<S>& g, int64_t target) {
        if (target == g.size()) return g;
        if (target == 1) {
            ArrayX<S> r(1);
            r[0] = g.sum();
            return r;
        }
        ArrayX<S> r = ArrayX<S>::Zero(target);
        for (int64_t i = 0; i < g.size(); ++i) r[i % target] += g[i];
        return r;
    }

    // elementwise f(g_i, t_{i mod |t|}) over the full output extent
    template <typename F>
    static ArrayX<S> bcast_apply(const ArrayX<S>& g, const Tensor<S>& t, F f) {
        ArrayX<S> r(g.size());
        if (t.numel() == g.size()) {
            for (int64_t i = 0; i < g.size(); ++i) r[i] = f(g[i], t.data[i]);
        } else if (t.numel() == 1) {
            for (int64_t i = 0; i < g.size(); ++i) r[i] = f(g[i], t.data[0]);
        } else {
            const int64_t c = t.numel();
            for (int64_t i = 0; i < g.size(); ++i) r[i] = f(g[i], t.data[i % c]);
        }
        return r;
    }

    void conv2d_bwd(const Node& n, const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& g,
                    std::vector<Tensor<S>>& adj, bool want_x, bool want_w) const {
        const int H = x.shape[0], W = x.shape[1], Ci = x.shape[2];
        const int kh = w.shape[0], kw = w.shape[1], Co = w.shape[3];
        const int stride = n.iattr[0], pad = n.iattr[1];
        const int OH = n.shape[0], OW = n.shape[1];
        if (want_w) {
            MatRM<S> patches = im2col(x, kh, kw, stride, pad, OH, OW);
            ArrayX<S> dw(w.numel());
            Eigen::Map<MatRM<S>>(dw.data(), kh * kw * Ci, Co).noalias() =
                patches.transpose() * g.mat(OH * OW, Co);
            accumulate(adj, n.inputs[1], dw);
        }
        if (want_x) {
            MatRM<S> dpatch(int64_t(OH) * OW, int64_t(kh) * kw * Ci);
            dpatch.noalias() = g.mat(OH * OW, Co) * w.mat(kh * kw * Ci, Co).transpose();
            ArrayX<S> dx = ArrayX<S>::Zero(x.numel());
            for (int oy = 0; oy < OH; ++oy)
                for (int ky = 0; ky < kh; ++ky) {
                    const int y = oy * stride - pad + ky;
                    if (y < 0 || y >= H) continue;
                    for (int ox = 0; ox < OW; ++ox) {
                        const S* src = dpatch.data() +
                                       (int64_t(oy) * OW + ox) * (int64_t(kh) * kw * Ci) +
                                       int64_t(ky) * kw * Ci;
                        const int x0 = ox * stride - pad;
                        for (int kx = 0; kx < kw; ++kx) {
                            const int xx = x0 + kx;
                            if (xx < 0 || xx >= W) continue;
                            S* dst = dx.data() + (int64_t(y) * W + xx) * Ci;
                            const S* s = src + int64_t(kx) * Ci;
                            for (int c = 0; c < Ci; ++c) dst[c] += s[c];
                        }
                    }
                }
            accumulate(adj, n.inputs[0], dx);
        }
    }
};

// ---------------------------------------------------------------------------
// free builder functions (expression style)

namespace detail {

template <typename S>
std::vector<int> binary_shape(const Graph<S>& g, Var<S> a, Var<S> b, const char* op,
                              int& kind_out) {
    const auto& sa = g.shape_of(a);
    const auto& sb = g.shape_of(b);
    auto kind = broadcast_kind(sa, sb, op);
    kind_out = int(kind);
    if (kind == Broadcast::ScalarLeft || kind == Broadcast::VecLeft) return sb;
    return sa;
}

}  // namespace detail

template <typename S>
Var<S> binary_op(Op op, Var<S> a, Var<S> b) {
    int kind = 0;
    auto shape = detail::binary_shape(*a.graph, a, b, op_name(op), kind);
    return a.graph->make(op, {a.id, b.id}, std::move(shape), {kind});
}

template <typename S> Var<S> add(Var<S> a, Var<S> b) { return binary_op(Op::Add, a, b); }
template <typename S> Var<S> sub(Var<S> a, Var<S> b) { return binary_op(Op::Sub, a, b); }
template <typename S> Var<S> mul(Var<S> a, Var<S> b) { return binary_op(Op::Mul, a, b); }
template <typename S> Var<S> div(Var<S> a, Var<S> b) { return binary_op(Op::Div, a, b); }

template <typename S> Var<S> operator+(Var<S> a, Var<S> b) { return add(a, b); }
template <typename S> Var<S> operator-(Var<S> a, Var<S> b) { return sub(a, b); }
template <typename S> Var<S> operator*(Var<S> a, Var<S> b) { return mul(a, b); }
template <typename S> Var<S> operator/(Var<S> a, Var<S> b) { return div(a, b); }

template <typename S> Var<S> operator*(Var<S> a, S c) { return mul(a, a.graph->constant_scalar(c)); }
template <typename S> Var<S> operator*(S c, Var<S> a) { return a * c; }
template <typename S> Var<S> operator+(Var<S> a, S c) { return add(a, a.graph->constant_scalar(c)); }
template <typename S> Var<S> operator-(Var<S> a, S c) { return sub(a, a.graph->constant_scalar(c)); }
template <typename S> Var<S> operator-(S c, Var<S> a) { return sub(a.graph->constant_scalar(c), a); }
template <typename S> Var<S> neg(Var<S> a) { return a * S(-1); }

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
    const auto& sa = a.graph->shape_of(a);
    const auto& sb = b.graph->shape_of(b);
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
        throw ShapeError("matmul: incompatible shapes " + shape_str(sa) + " vs " + shape_str(sb));
    return a.graph->make(Op::Matmul, {a.id, b.id}, {sa[0], sb[1]});
}

template <typename S>
Var<S> transpose(Var<S> a) {
    const auto& s = a.graph->shape_of(a);
    if (s.size() != 2) throw ShapeError("transpose: need rank 2, got " + shape_str(s));
    return a.graph->make(Op::Transpose, {a.id}, {s[1], s[0]});
}

template <typename S>
Var<S> reshape(Var<S> a, std::vector<int> shape) {
    if (shape_numel(shape) != shape_numel(a.graph->shape_of(a)))
        throw ShapeError("reshape: element count mismatch " + shape_str(a.graph->shape_of(a)) +
                         " -> " + shape_str(shape));
    return a.graph->make(Op::Reshape, {a.id}, std::move(shape));
}

template <typename S>
Var<S> concat(const std::vector<Var<S>>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    Graph<S>* g = parts[0].graph;
    std::vector<int> shape = g->shape_of(parts[0]);
    if (axis < 0 || axis >= int(shape.size()))
        throw ShapeError("concat: bad axis " + std::to_string(axis) + " for " + shape_str(shape));
    std::vector<int> ids;
    int total = 0;
    for (const auto& p : parts) {
        const auto& s = g->shape_of(p);
        if (s.size() != shape.size())
            throw ShapeError("concat: rank mismatch " + shape_str(shape) + " vs " + shape_str(s));
        for (size_t i = 0; i < s.size(); ++i)
            if (int(i) != axis && s[i] != shape[i])
                throw ShapeError("concat: extent mismatch at axis " + std::to_string(i) + ": " +
                                 shape_str(shape) + " vs " + shape_str(s));
        total += s[size_t(axis)];
        ids.push_back(p.id);
    }
    shape[size_t(axis)] = total;
    return g->make(Op::Concat, std::move(ids), std::move(shape), {axis});
}

// rows of `a` along axis 0 (a viewed as [n, rest])
template <typename S>
Var<S> gather(Var<S> a, std::vector<int> rows) {
    const auto& s = a.graph->shape_of(a);
    if (s.empty()) throw ShapeError("gather: rank 0 input");
    for (int r : rows)
        if (r < 0 || r >= s[0])
            throw ShapeError("gather: row " + std::to_string(r) + " out of range for " +
                             shape_str(s));
    std::vector<int> shape = s;
    shape[0] = int(rows.size());
    return a.graph->make(Op::Gather, {a.id}, std::move(shape), {}, 0.0, std::move(rows));
}

template <typename S> Var<S> relu(Var<S> a) { return a.graph->make(Op::Relu, {a.id}, a.graph->shape_of(a)); }
template <typename S> Var<S> sigmoid(Var<S> a) { return a.graph->make(Op::Sigmoid, {a.id}, a.graph->shape_of(a)); }
template <typename S> Var<S> exp(Var<S> a) { return a.graph->make(Op::Exp, {a.id}, a.graph->shape_of(a)); }
template <typename S> Var<S> log(Var<S> a) { return a.graph->make(Op::Log, {a.id}, a.graph->shape_of(a)); }

template <typename S>
Var<S> softmax(Var<S> a, int axis) {
    const auto& s = a.graph->shape_of(a);
    if (axis < 0 || axis >= int(s.size()))
        throw ShapeError("softmax: bad axis " + std::to_string(axis) + " for " + shape_str(s));
    return a.graph->make(Op::Softmax, {a.id}, s, {axis});
}

template <typename S>
Var<S> l2_normalize(Var<S> a, int axis) {
    const auto& s = a.graph->shape_of(a);
    if (axis < 0 || axis >= int(s.size()))
        throw ShapeError("l2_normalize: bad axis " + std::to_string(axis) + " for " +
                         shape_str(s));
    return a.graph->make(Op::L2Normalize, {a.id}, s, {axis});
}

template <typename S>
Var<S> sum(Var<S> a) { return a.graph->make(Op::SumAll, {a.id}, {1}); }
template <typename S>
Var<S> mean(Var<S> a) { return a.graph->make(Op::MeanAll, {a.id}, {1}); }

template <typename S>
std::vector<int> reduced_shape(const std::vector<int>& s, int axis) {
    std::vector<int> r;
    for (size_t i = 0; i < s.size(); ++i)
        if (int(i) != axis) r.push_back(s[i]);
    if (r.empty()) r.push_back(1);
    return r;
}

template <typename S>
Var<S> sum_axis(Var<S> a, int axis) {
    const auto& s = a.graph->shape_of(a);
    if (axis < 0 || axis >= int(s.size()))
        throw ShapeError("sum_axis: bad axis " + std::to_string(axis) + " for " + shape_str(s));
    return a.graph->make(Op::SumAxis, {a.id}, reduced_shape<S>(s, axis), {axis});
}

template <typename S>
Var<S> mean_axis(Var<S> a, int axis) {
    const auto& s = a.graph->shape_of(a);
    if (axis < 0 || axis >= int(s.size()))
        throw ShapeError("mean_axis: bad axis " + std::to_string(axis) + " for " + shape_str(s));
    return a.graph->make(Op::MeanAxis, {a.id}, reduced_shape<S>(s, axis), {axis});
}

// x [H,W,Ci], w [kh,kw,Ci,Co]
template <typename S>
Var<S> conv2d(Var<S> x, Var<S> w, int stride, int pad) {
    const auto& sx = x.graph->shape_of(x);
    const auto& sw = w.graph->shape_of(w);
    if (sx.size() != 3 || sw.size() != 4)
        throw ShapeError("conv2d: need image [H,W,C] and kernel [kh,kw,Ci,Co], got " +
                         shape_str(sx) + " and " + shape_str(sw));
    if (sx[2] != sw[2])
        throw ShapeError("conv2d: channel mismatch, image " + shape_str(sx) + " vs kernel " +
                         shape_str(sw));
    if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
    const int OH = (sx[0] + 2 * pad - sw[0]) / stride + 1;
    const int OW = (sx[1] + 2 * pad - sw[1]) / stride + 1;
    if (OH <= 0 || OW <= 0)
        throw ShapeError("conv2d: kernel " + shape_str(sw) + " larger than padded image " +
                         shape_str(sx));
    return x.graph->make(Op::Conv2d, {x.id, w.id}, {OH, OW, sw[3]}, {stride, pad});
}

template <typename S>
Var<S> avgpool2d(Var<S> x, int k) {
    const auto& s = x.graph->shape_of(x);
    if (s.size() != 3) throw ShapeError("avgpool2d: need [H,W,C], got " + shape_str(s));
    if (k < 1 || s[0] % k != 0 || s[1] % k != 0)
        throw ShapeError("avgpool2d: extent " + shape_str(s) + " not divisible by " +
                         std::to_string(k));
    return x.graph->make(Op::AvgPool2d, {x.id}, {s[0] / k, s[1] / k, s[2]}, {k});
}

template <typename S>
Var<S> upsample_nearest(Var<S> x, int f) {
    const auto& s = x.graph->shape_of(x);
    if (s.size() != 3) throw ShapeError("upsample2d: need [H,W,C], got " + shape_str(s));
    if (f < 1) throw ShapeError("upsample2d: factor must be >= 1");
    return x.graph->make(Op::Upsample2d, {x.id}, {s[0] * f, s[1] * f, s[2]}, {f});
}

// identity forward, -lambda * g backward
template <typename S>
Var<S> grad_reverse(Var<S> x, double lambda) {
    return x.graph->make(Op::GradReverse, {x.id}, x.graph->shape_of(x), {}, lambda);
}

// --- spec-level entry points ----------------------------------------------

template <typename S>
Tensor<S> evaluate(const Graph<S>& g, const Bindings<S>& bindings) {
    return g.evaluate_with(bindings);
}

template <typename S>
GradMap<S> gradient(const Graph<S>& g, const Bindings<S>& bindings,
                    const std::set<std::string>& wrt = {}) {
    return g.gradient_with(bindings, wrt);
}

}  // namespace graphecho
