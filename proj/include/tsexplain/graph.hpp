#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tsexplain/common.hpp"
#include "tsexplain/tensor.hpp"

namespace tsexplain {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

enum class Op : std::uint8_t {
    Leaf, Const,
    Add, Sub, Mul, MatMul,
    Sigmoid, Tanh, Relu, Erf, Exp, Log, Abs, Square, Sqrt,
    Clamp, SumAll, MeanAll, SumAxis,
    Concat, Slice, BroadcastTo, Flip, Reshape,
    GruSeq, PairDist,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Const: return "const";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::MatMul: return "matmul";
        case Op::Sigmoid: return "sigmoid";
        case Op::Tanh: return "tanh";
        case Op::Relu: return "relu";
        case Op::Erf: return "erf";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Abs: return "abs";
        case Op::Square: return "square";
        case Op::Sqrt: return "sqrt";
        case Op::Clamp: return "clamp";
        case Op::SumAll: return "sum";
        case Op::MeanAll: return "mean";
        case Op::SumAxis: return "sum_axis";
        case Op::Concat: return "concat";
        case Op::Slice: return "slice";
        case Op::BroadcastTo: return "broadcast";
        case Op::Flip: return "flip";
        case Op::Reshape: return "reshape";
        case Op::GruSeq: return "gru_seq";
        case Op::PairDist: return "pair_dist";
    }
    return "?";
}

// numerically stable logistic function
inline double stable_sigmoid(double x) {
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

enum class DistanceKind : std::uint8_t { Manhattan, Euclidean, Cosine };

inline const char* distance_name(DistanceKind k) {
    switch (k) {
        case DistanceKind::Manhattan: return "manhattan";
        case DistanceKind::Euclidean: return "euclidean";
        case DistanceKind::Cosine: return "cosine";
    }
    return "?";
}

inline DistanceKind distance_from_string(const std::string& s) {
    if (s == "manhattan") return DistanceKind::Manhattan;
    if (s == "euclidean") return DistanceKind::Euclidean;
    if (s == "cosine") return DistanceKind::Cosine;
    throw ConfigError("unknown distance kind: " + s);
}

using NodeId = std::uint32_t;

// Reverse-mode tape. Ops evaluate eagerly on creation; parents always have
// smaller ids, so one reverse sweep visits every node exactly once.
class Graph {
  public:
    struct GruAux {
        std::size_t n, t, d, h;
        std::vector<double> z, r, c;  // gate activations, [N,T,H] each
        std::vector<double> hseq;     // hidden states incl. h0, [N,T+1,H]
    };
    struct PairAux {
        DistanceKind kind;
        std::vector<std::uint32_t> anchors, partners;  // row indices, one entry per pair
        std::vector<std::uint32_t> seg_offsets;        // pairs [seg_offsets[s], seg_offsets[s+1]) feed output s
        std::vector<double> dot, na, nb, dist;         // per-pair saved forward values
    };

    struct Node {
        Op op;
        std::vector<NodeId> parents;
        Tensor value;      // value.requires_grad == this node participates in backward
        double a0 = 0.0;   // clamp lo / scalar aux
        double a1 = 0.0;   // clamp hi
        std::size_t axis = 0, start = 0, len = 0;
        std::shared_ptr<GruAux> gru;
        std::shared_ptr<PairAux> pair;
    };

    bool check_finite = true;

    std::size_t size() const { return nodes_.size(); }
    std::size_t checkpoint() const { return nodes_.size(); }
    void truncate(std::size_t mark) { nodes_.resize(mark); }

    const Tensor& value(NodeId id) const { return nodes_[id].value; }
    Tensor& value_mut(NodeId id) { return nodes_[id].value; }
    const std::vector<double>& grad(NodeId id) const { return nodes_[id].value.grad; }
    bool needs_grad(NodeId id) const { return nodes_[id].value.requires_grad; }

    NodeId leaf(Tensor t) {
        t.set_requires_grad(true);
        return push(Op::Leaf, {}, std::move(t), false);
    }
    NodeId constant(Tensor t) {
        t.set_requires_grad(false);
        return push(Op::Const, {}, std::move(t), false);
    }
    NodeId constant_scalar(double v) { return constant(Tensor::scalar(v)); }

    // ---- elementwise binary with numpy-style broadcasting ----
    NodeId add(NodeId a, NodeId b) { return binary(Op::Add, a, b); }
    NodeId sub(NodeId a, NodeId b) { return binary(Op::Sub, a, b); }
    NodeId mul(NodeId a, NodeId b) { return binary(Op::Mul, a, b); }

    // A [..., K] (leading dims flattened to rows) times B [K, M].
    NodeId matmul(NodeId a, NodeId b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        if (ta.rank() < 2 || tb.rank() != 2 || ta.shape.back() != tb.shape[0])
            throw ShapeError("matmul " + shape_str(ta.shape) + " x " + shape_str(tb.shape));
        const std::size_t k = tb.shape[0], m = tb.shape[1];
        const std::size_t rows = ta.numel() / k;
        Shape out_shape(ta.shape.begin(), ta.shape.end() - 1);
        out_shape.push_back(m);
        Tensor out(out_shape);
        CMapM A(ta.data.data(), rows, k), B(tb.data.data(), k, m);
        MapM C(out.data.data(), rows, m);
        C.noalias() = A * B;
        return push(Op::MatMul, {a, b}, std::move(out));
    }

    // ---- elementwise unary ----
    NodeId sigmoid(NodeId a) { return unary(Op::Sigmoid, a, [](double x) { return stable_sigmoid(x); }); }
    NodeId tanh(NodeId a) { return unary(Op::Tanh, a, [](double x) { return std::tanh(x); }); }
    NodeId relu(NodeId a) { return unary(Op::Relu, a, [](double x) { return x > 0.0 ? x : 0.0; }); }
    NodeId erf(NodeId a) { return unary(Op::Erf, a, [](double x) { return std::erf(x); }); }
    NodeId exp(NodeId a) { return unary(Op::Exp, a, [](double x) { return std::exp(x); }); }
    NodeId log(NodeId a) { return unary(Op::Log, a, [](double x) { return std::log(x); }); }
    NodeId abs(NodeId a) { return unary(Op::Abs, a, [](double x) { return std::fabs(x); }); }
    NodeId square(NodeId a) { return unary(Op::Square, a, [](double x) { return x * x; }); }
    NodeId sqrt(NodeId a) { return unary(Op::Sqrt, a, [](double x) { return std::sqrt(x); }); }

    NodeId clamp(NodeId a, double lo, double hi) {
        if (!(lo < hi)) throw ConfigError("clamp requires lo < hi");
        const Tensor& ta = value(a);
        Tensor out(ta.shape);
        for (std::size_t i = 0; i < ta.numel(); ++i)
            out.data[i] = std::min(hi, std::max(lo, ta.data[i]));
        Node n = make_node(Op::Clamp, {a}, std::move(out));
        n.a0 = lo;
        n.a1 = hi;
        return commit(std::move(n));
    }

    // ---- reductions ----
    NodeId sum(NodeId a) {
        double s = 0.0;
        for (double v : value(a).data) s += v;
        return push(Op::SumAll, {a}, Tensor::scalar(s));
    }
    NodeId mean(NodeId a) {
        double s = 0.0;
        for (double v : value(a).data) s += v;
        return push(Op::MeanAll, {a}, Tensor::scalar(s / static_cast<double>(value(a).numel())));
    }
    NodeId sum_axis(NodeId a, std::size_t axis) {
        const Tensor& ta = value(a);
        if (axis >= ta.rank()) throw ShapeError("sum_axis: axis out of range");
        auto [outer, len, inner] = axis_split(ta.shape, axis);
        Shape os = ta.shape;
        os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
        Tensor out(os);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t l = 0; l < len; ++l) {
                const double* src = ta.data.data() + (o * len + l) * inner;
                double* dst = out.data.data() + o * inner;
                for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
        Node n = make_node(Op::SumAxis, {a}, std::move(out));
        n.axis = axis;
        return commit(std::move(n));
    }

    // ---- structural ----
    NodeId concat(std::size_t axis, const std::vector<NodeId>& parts) {
        if (parts.empty()) throw ShapeError("concat: no inputs");
        const Tensor& t0 = value(parts[0]);
        if (axis >= t0.rank()) throw ShapeError("concat: axis out of range");
        Shape os = t0.shape;
        std::size_t total = 0;
        for (NodeId p : parts) {
            const Tensor& tp = value(p);
            if (tp.rank() != t0.rank()) throw ShapeError("concat: rank mismatch");
            for (std::size_t d = 0; d < os.size(); ++d)
                if (d != axis && tp.shape[d] != os[d]) throw ShapeError("concat: shape mismatch");
            total += tp.shape[axis];
        }
        os[axis] = total;
        Tensor out(os);
        auto [outer, len, inner] = axis_split(os, axis);
        (void)len;
        std::size_t at = 0;
        for (NodeId p : parts) {
            const Tensor& tp = value(p);
            const std::size_t plen = tp.shape[axis];
            for (std::size_t o = 0; o < outer; ++o)
                std::copy_n(tp.data.data() + o * plen * inner, plen * inner,
                            out.data.data() + (o * total + at) * inner);
            at += plen;
        }
        Node n = make_node(Op::Concat, parts, std::move(out));
        n.axis = axis;
        return commit(std::move(n));
    }

    NodeId slice(NodeId a, std::size_t axis, std::size_t start, std::size_t len) {
        const Tensor& ta = value(a);
        if (axis >= ta.rank() || start + len > ta.shape[axis])
            throw ShapeError("slice out of range on " + shape_str(ta.shape));
        auto [outer, alen, inner] = axis_split(ta.shape, axis);
        Shape os = ta.shape;
        os[axis] = len;
        Tensor out(os);
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(ta.data.data() + (o * alen + start) * inner, len * inner,
                        out.data.data() + o * len * inner);
        Node n = make_node(Op::Slice, {a}, std::move(out));
        n.axis = axis;
        n.start = start;
        n.len = len;
        return commit(std::move(n));
    }

    NodeId broadcast_to(NodeId a, const Shape& target) {
        const Tensor& ta = value(a);
        BcPlan plan = broadcast_plan(ta.shape, target);
        Tensor out(target);
        strided_copy(ta.data.data(), plan.stride_a.data(), out.data.data(), plan.out);
        return push(Op::BroadcastTo, {a}, std::move(out));
    }

    NodeId flip(NodeId a, std::size_t axis) {
        const Tensor& ta = value(a);
        if (axis >= ta.rank()) throw ShapeError("flip: axis out of range");
        auto [outer, len, inner] = axis_split(ta.shape, axis);
        Tensor out(ta.shape);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t l = 0; l < len; ++l)
                std::copy_n(ta.data.data() + (o * len + l) * inner, inner,
                            out.data.data() + (o * len + (len - 1 - l)) * inner);
        Node n = make_node(Op::Flip, {a}, std::move(out));
        n.axis = axis;
        return commit(std::move(n));
    }

    NodeId reshape(NodeId a, Shape target) {
        const Tensor& ta = value(a);
        if (shape_numel(target) != ta.numel())
            throw ShapeError("reshape " + shape_str(ta.shape) + " -> " + shape_str(target));
        Tensor out(std::move(target), ta.data);
        return push(Op::Reshape, {a}, std::move(out));
    }

    // Single-layer GRU over a batched sequence. x [N,T,D], w [D,3H] packs the
    // input projections for (update, reset, candidate), u2 [H,2H] the hidden
    // projections for (update, reset), uh [H,H] the candidate projection of
    // r*h_prev, b [3H] the biases. Output is the full hidden sequence [N,T,H].
    // Recurrence: z=sig(xWz+hUz+bz), r=sig(xWr+hUr+br),
    //             c=tanh(xWc+(r*h)Uc+bc), h' = (1-z)*h + z*c.
    NodeId gru_seq(NodeId x, NodeId w, NodeId u2, NodeId uh, NodeId b) {
        const Tensor& tx = value(x);
        if (tx.rank() != 3) throw ShapeError("gru_seq: x must be [N,T,D]");
        const std::size_t N = tx.shape[0], T = tx.shape[1], D = tx.shape[2];
        const Tensor& tw = value(w);
        if (tw.rank() != 2 || tw.shape[0] != D || tw.shape[1] % 3 != 0)
            throw ShapeError("gru_seq: w must be [D,3H]");
        const std::size_t H = tw.shape[1] / 3;
        if (value(u2).shape != Shape{H, 2 * H}) throw ShapeError("gru_seq: u2 must be [H,2H]");
        if (value(uh).shape != Shape{H, H}) throw ShapeError("gru_seq: uh must be [H,H]");
        if (value(b).shape != Shape{3 * H}) throw ShapeError("gru_seq: b must be [3H]");

        auto aux = std::make_shared<GruAux>();
        aux->n = N; aux->t = T; aux->d = D; aux->h = H;
        aux->z.resize(N * T * H);
        aux->r.resize(N * T * H);
        aux->c.resize(N * T * H);
        aux->hseq.assign(N * (T + 1) * H, 0.0);

        Tensor out(Shape{N, T, H});
        MatRM xt(N, D), gates(N, 3 * H), hu(N, 2 * H), cu(N, H), rh(N, H);
        CMapM W(tw.data.data(), D, 3 * H);
        CMapM U2(value(u2).data.data(), H, 2 * H);
        CMapM Uh(value(uh).data.data(), H, H);
        const double* bias = value(b).data.data();

        MatRM h = MatRM::Zero(N, H);
        for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t i = 0; i < N; ++i)
                std::copy_n(tx.data.data() + (i * T + t) * D, D, xt.data() + i * D);
            gates.noalias() = xt * W;
            hu.noalias() = h * U2;
            for (std::size_t i = 0; i < N; ++i) {
                double* g = gates.data() + i * 3 * H;
                const double* hr = hu.data() + i * 2 * H;
                for (std::size_t j = 0; j < H; ++j) {
                    g[j] = stable_sigmoid(g[j] + hr[j] + bias[j]);                  // z
                    g[H + j] = stable_sigmoid(g[H + j] + hr[H + j] + bias[H + j]);  // r
                }
                const double* hp = h.data() + i * H;
                double* rhp = rh.data() + i * H;
                for (std::size_t j = 0; j < H; ++j) rhp[j] = g[H + j] * hp[j];
            }
            cu.noalias() = rh * Uh;
            for (std::size_t i = 0; i < N; ++i) {
                double* g = gates.data() + i * 3 * H;
                double* hp = h.data() + i * H;
                const double* cup = cu.data() + i * H;
                double* zs = aux->z.data() + (i * T + t) * H;
                double* rs = aux->r.data() + (i * T + t) * H;
                double* cs = aux->c.data() + (i * T + t) * H;
                double* hs = aux->hseq.data() + (i * (T + 1) + t + 1) * H;
                double* os = out.data.data() + (i * T + t) * H;
                for (std::size_t j = 0; j < H; ++j) {
                    const double z = g[j], r = g[H + j];
                    const double c = std::tanh(g[2 * H + j] + cup[j] + bias[2 * H + j]);
                    const double hn = (1.0 - z) * hp[j] + z * c;
                    zs[j] = z;
                    rs[j] = r;
                    cs[j] = c;
                    hs[j] = hn;
                    os[j] = hn;
                    hp[j] = hn;
                }
            }
        }
        Node n = make_node(Op::GruSeq, {x, w, u2, uh, b}, std::move(out));
        n.gru = std::move(aux);
        return commit(std::move(n));
    }

    // Segment-averaged pairwise distances between rows of x [R,F]: output s is
    // the mean distance over pairs (anchors[p], partners[p]) in segment s.
    // Manhattan distance is the elementwise mean absolute difference;
    // euclidean the root of the mean squared difference; cosine 1 - cos(a,b).
    NodeId pair_dist(NodeId x, std::shared_ptr<PairAux> aux) {
        const Tensor& tx = value(x);
        if (tx.rank() != 2) throw ShapeError("pair_dist: x must be [R,F]");
        const std::size_t F = tx.shape[1];
        const std::size_t S = aux->seg_offsets.size() - 1;
        const std::size_t P = aux->anchors.size();
        aux->dist.assign(P, 0.0);
        if (aux->kind == DistanceKind::Cosine) {
            aux->dot.assign(P, 0.0);
            aux->na.assign(P, 0.0);
            aux->nb.assign(P, 0.0);
        }
        for (std::size_t p = 0; p < P; ++p) {
            const double* a = tx.data.data() + aux->anchors[p] * F;
            const double* b = tx.data.data() + aux->partners[p] * F;
            double acc = 0.0;
            switch (aux->kind) {
                case DistanceKind::Manhattan:
                    for (std::size_t j = 0; j < F; ++j) acc += std::fabs(a[j] - b[j]);
                    aux->dist[p] = acc / static_cast<double>(F);
                    break;
                case DistanceKind::Euclidean: {
                    for (std::size_t j = 0; j < F; ++j) {
                        const double q = a[j] - b[j];
                        acc += q * q;
                    }
                    aux->dist[p] = std::sqrt(acc / static_cast<double>(F) + kEps);
                    break;
                }
                case DistanceKind::Cosine: {
                    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
                    for (std::size_t j = 0; j < F; ++j) {
                        dot += a[j] * b[j];
                        na2 += a[j] * a[j];
                        nb2 += b[j] * b[j];
                    }
                    aux->dot[p] = dot;
                    aux->na[p] = std::sqrt(na2);
                    aux->nb[p] = std::sqrt(nb2);
                    aux->dist[p] = 1.0 - dot / (aux->na[p] * aux->nb[p] + kEps);
                    break;
                }
            }
        }
        Tensor out(Shape{S});
        for (std::size_t s = 0; s < S; ++s) {
            const std::size_t lo = aux->seg_offsets[s], hi = aux->seg_offsets[s + 1];
            if (hi == lo) throw ShapeError("pair_dist: empty segment");
            double acc = 0.0;
            for (std::size_t p = lo; p < hi; ++p) acc += aux->dist[p];
            out.data[s] = acc / static_cast<double>(hi - lo);
        }
        Node n = make_node(Op::PairDist, {x}, std::move(out));
        n.pair = std::move(aux);
        return commit(std::move(n));
    }

    // Backpropagate from a scalar root; fills grad buffers of every node that
    // participates, leaves included.
    void backward(NodeId root) {
        if (value(root).numel() != 1) throw ShapeError("backward: root must be scalar");
        for (std::size_t i = 0; i <= root; ++i) {
            Tensor& t = nodes_[i].value;
            if (t.requires_grad) t.grad.assign(t.data.size(), 0.0);
        }
        if (!nodes_[root].value.requires_grad) return;  // nothing trainable below
        nodes_[root].value.grad[0] = 1.0;
        for (std::size_t i = root + 1; i-- > 0;) {
            if (nodes_[i].value.requires_grad && !nodes_[i].parents.empty())
                dispatch_backward(static_cast<NodeId>(i));
        }
    }

  private:
    static constexpr double kEps = 1e-12;

    struct BcPlan {
        Shape out;
        std::vector<std::size_t> stride_a, stride_b;  // 0 marks a broadcast dim
    };

    std::vector<Node> nodes_;

    static std::tuple<std::size_t, std::size_t, std::size_t> axis_split(const Shape& s,
                                                                        std::size_t axis) {
        std::size_t outer = 1, inner = 1;
        for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
        for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
        return {outer, s[axis], inner};
    }

    static BcPlan broadcast_plan(const Shape& a, const Shape& b) {
        const std::size_t r = std::max(a.size(), b.size());
        BcPlan plan;
        plan.out.assign(r, 1);
        std::vector<std::size_t> da(r, 1), db(r, 1);
        for (std::size_t i = 0; i < a.size(); ++i) da[r - a.size() + i] = a[i];
        for (std::size_t i = 0; i < b.size(); ++i) db[r - b.size() + i] = b[i];
        for (std::size_t i = 0; i < r; ++i) {
            if (da[i] != db[i] && da[i] != 1 && db[i] != 1)
                throw ShapeError("broadcast mismatch " + shape_str(a) + " vs " + shape_str(b));
            plan.out[i] = std::max(da[i], db[i]);
        }
        plan.stride_a.assign(r, 0);
        plan.stride_b.assign(r, 0);
        std::size_t sa = 1, sb = 1;
        for (std::size_t i = r; i-- > 0;) {
            plan.stride_a[i] = (da[i] == 1 && plan.out[i] != 1) ? 0 : sa;
            plan.stride_b[i] = (db[i] == 1 && plan.out[i] != 1) ? 0 : sb;
            sa *= da[i];
            sb *= db[i];
        }
        return plan;
    }

    static void strided_copy(const double* src, const std::size_t* stride, double* dst,
                             const Shape& out) {
        const std::size_t r = out.size();
        std::vector<std::size_t> idx(r, 0);
        const std::size_t total = shape_numel(out);
        for (std::size_t lin = 0; lin < total; ++lin) {
            std::size_t off = 0;
            for (std::size_t i = 0; i < r; ++i) off += idx[i] * stride[i];
            dst[lin] = src[off];
            for (std::size_t i = r; i-- > 0;) {
                if (++idx[i] < out[i]) break;
                idx[i] = 0;
            }
        }
    }

    Node make_node(Op op, std::vector<NodeId> parents, Tensor out) {
        bool needs = false;
        for (NodeId p : parents) needs = needs || nodes_[p].value.requires_grad;
        out.requires_grad = needs;
        Node n;
        n.op = op;
        n.parents = std::move(parents);
        n.value = std::move(out);
        return n;
    }

    NodeId commit(Node n) {
        if (check_finite && !n.value.all_finite())
            throw NumericsError(std::string("non-finite output of ") + op_name(n.op));
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    NodeId push(Op op, std::vector<NodeId> parents, Tensor out, bool derive_grad = true) {
        Node n;
        if (derive_grad) {
            n = make_node(op, std::move(parents), std::move(out));
        } else {
            n.op = op;
            n.parents = std::move(parents);
            n.value = std::move(out);
        }
        return commit(std::move(n));
    }

    template <typename F>
    NodeId unary(Op op, NodeId a, F f) {
        const Tensor& ta = value(a);
        Tensor out(ta.shape);
        for (std::size_t i = 0; i < ta.numel(); ++i) out.data[i] = f(ta.data[i]);
        return push(op, {a}, std::move(out));
    }

    NodeId binary(Op op, NodeId a, NodeId b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        Tensor out;
        if (ta.shape == tb.shape) {
            out = Tensor(ta.shape);
            const std::size_t n = ta.numel();
            switch (op) {
                case Op::Add:
                    for (std::size_t i = 0; i < n; ++i) out.data[i] = ta.data[i] + tb.data[i];
                    break;
                case Op::Sub:
                    for (std::size_t i = 0; i < n; ++i) out.data[i] = ta.data[i] - tb.data[i];
                    break;
                default:
                    for (std::size_t i = 0; i < n; ++i) out.data[i] = ta.data[i] * tb.data[i];
            }
        } else {
            BcPlan plan = broadcast_plan(ta.shape, tb.shape);
            out = Tensor(plan.out);
            const std::size_t r = plan.out.size();
            std::vector<std::size_t> idx(r, 0);
            for (std::size_t lin = 0; lin < out.numel(); ++lin) {
                std::size_t oa = 0, ob = 0;
                for (std::size_t i = 0; i < r; ++i) {
                    oa += idx[i] * plan.stride_a[i];
                    ob += idx[i] * plan.stride_b[i];
                }
                const double va = ta.data[oa], vb = tb.data[ob];
                out.data[lin] = op == Op::Add ? va + vb : (op == Op::Sub ? va - vb : va * vb);
                for (std::size_t i = r; i-- > 0;) {
                    if (++idx[i] < plan.out[i]) break;
                    idx[i] = 0;
                }
            }
        }
        return push(op, {a, b}, std::move(out));
    }

    void acc_binary_parent(NodeId parent, const Tensor& out_t, const std::vector<double>& contrib) {
        // reduce `contrib` (shaped like the output) into the parent grad,
        // summing over broadcast dims
        Tensor& tp = nodes_[parent].value;
        if (tp.shape == out_t.shape) {
            for (std::size_t i = 0; i < contrib.size(); ++i) tp.grad[i] += contrib[i];
            return;
        }
        BcPlan plan = broadcast_plan(tp.shape, out_t.shape);
        const std::size_t r = plan.out.size();
        std::vector<std::size_t> idx(r, 0);
        for (std::size_t lin = 0; lin < contrib.size(); ++lin) {
            std::size_t op_ = 0;
            for (std::size_t i = 0; i < r; ++i) op_ += idx[i] * plan.stride_a[i];
            tp.grad[op_] += contrib[lin];
            for (std::size_t i = r; i-- > 0;) {
                if (++idx[i] < plan.out[i]) break;
                idx[i] = 0;
            }
        }
    }

    void dispatch_backward(NodeId id);
    void backward_gru(NodeId id);
    void backward_pair(NodeId id);
};

inline void Graph::dispatch_backward(NodeId id) {
    Node& n = nodes_[id];
    const std::vector<double>& g = n.value.grad;
    auto parent_needs = [&](std::size_t k) { return nodes_[n.parents[k]].value.requires_grad; };
    auto pgrad = [&](std::size_t k) -> std::vector<double>& { return nodes_[n.parents[k]].value.grad; };
    auto pdata = [&](std::size_t k) -> const std::vector<double>& { return nodes_[n.parents[k]].value.data; };

    switch (n.op) {
        case Op::Leaf:
        case Op::Const:
            return;
        case Op::Add:
        case Op::Sub:
        case Op::Mul: {
            const Tensor& ta = nodes_[n.parents[0]].value;
            const Tensor& tb = nodes_[n.parents[1]].value;
            if (ta.shape == tb.shape && ta.shape == n.value.shape) {
                // fast path, no broadcasting
                const std::size_t cnt = g.size();
                if (parent_needs(0)) {
                    auto& ga = pgrad(0);
                    if (n.op == Op::Mul)
                        for (std::size_t i = 0; i < cnt; ++i) ga[i] += g[i] * tb.data[i];
                    else
                        for (std::size_t i = 0; i < cnt; ++i) ga[i] += g[i];
                }
                if (parent_needs(1)) {
                    auto& gb = pgrad(1);
                    if (n.op == Op::Mul)
                        for (std::size_t i = 0; i < cnt; ++i) gb[i] += g[i] * ta.data[i];
                    else if (n.op == Op::Sub)
                        for (std::size_t i = 0; i < cnt; ++i) gb[i] -= g[i];
                    else
                        for (std::size_t i = 0; i < cnt; ++i) gb[i] += g[i];
                }
                return;
            }
            // broadcast path: build the per-output contribution then reduce
            BcPlan plan = broadcast_plan(ta.shape, tb.shape);
            const std::size_t r = plan.out.size();
            std::vector<double> contrib(g.size());
            if (parent_needs(0)) {
                if (n.op == Op::Mul) {
                    std::vector<std::size_t> idx(r, 0);
                    for (std::size_t lin = 0; lin < g.size(); ++lin) {
                        std::size_t ob = 0;
                        for (std::size_t i = 0; i < r; ++i) ob += idx[i] * plan.stride_b[i];
                        contrib[lin] = g[lin] * tb.data[ob];
                        for (std::size_t i = r; i-- > 0;) {
                            if (++idx[i] < plan.out[i]) break;
                            idx[i] = 0;
                        }
                    }
                } else {
                    contrib = g;
                }
                acc_binary_parent(n.parents[0], n.value, contrib);
            }
            if (parent_needs(1)) {
                if (n.op == Op::Mul) {
                    std::vector<std::size_t> idx(r, 0);
                    for (std::size_t lin = 0; lin < g.size(); ++lin) {
                        std::size_t oa = 0;
                        for (std::size_t i = 0; i < r; ++i) oa += idx[i] * plan.stride_a[i];
                        contrib[lin] = g[lin] * ta.data[oa];
                        for (std::size_t i = r; i-- > 0;) {
                            if (++idx[i] < plan.out[i]) break;
                            idx[i] = 0;
                        }
                    }
                } else if (n.op == Op::Sub) {
                    for (std::size_t i = 0; i < g.size(); ++i) contrib[i] = -g[i];
                } else {
                    contrib = g;
                }
                acc_binary_parent(n.parents[1], n.value, contrib);
            }
            return;
        }
        case Op::MatMul: {
            const Tensor& ta = nodes_[n.parents[0]].value;
            const Tensor& tb = nodes_[n.parents[1]].value;
            const std::size_t k = tb.shape[0], m = tb.shape[1];
            const std::size_t rows = ta.numel() / k;
            CMapM A(ta.data.data(), rows, k), B(tb.data.data(), k, m);
            CMapM G(g.data(), rows, m);
            if (parent_needs(0)) {
                MapM GA(pgrad(0).data(), rows, k);
                GA.noalias() += G * B.transpose();
            }
            if (parent_needs(1)) {
                MapM GB(pgrad(1).data(), k, m);
                GB.noalias() += A.transpose() * G;
            }
            return;
        }
        case Op::Sigmoid: {
            auto& ga = pgrad(0);
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double y = n.value.data[i];
                ga[i] += g[i] * y * (1.0 - y);
            }
            return;
        }
        case Op::Tanh: {
            auto& ga = pgrad(0);
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double y = n.value.data[i];
                ga[i] += g[i] * (1.0 - y * y);
            }
            return;
        }
        case Op::Relu: {
            auto& ga = pgrad(0);
            const auto& x = pdata(0);
            for (std::size_t i = 0; i < g.size(); ++i)
                if (x[i] > 0.0) ga[i] += g[i];
            return;
        }
        case Op::Erf: {
            auto& ga = pgrad(0);
            const auto& x = pdata(0);
            constexpr double two_over_sqrt_pi = 1.1283791670955126;
            for (std::size_t i = 0; i < g.size(); ++i)
                ga[i] += g[i] * two_over_sqrt_pi * std::exp(-x[i] * x[i]);
            return;
        }
        case Op::Exp: {
            auto& ga = pgrad(0);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.value.data[i];
            return;
        }
        case Op::Log: {
            auto& ga = pgrad(0);
            const auto& x = pdata(0);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
            return;
        }
        case Op::Abs: {
            auto& ga = pgrad(0);
            const auto& x = pdata(0);
            for (std::size_t i = 0; i < g.size(); ++i)
                ga[i] += g[i] * (x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0));
            return;
        }
        case Op::Square: {
            auto& ga = pgrad(0);
            const auto& x = pdata(0);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * 2.0 * x[i];
            return;
        }
        case Op::Sqrt: {
            auto& ga = pgrad(0);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * 0.5 / n.value.data[i];
            return;
        }
        case Op::Clamp: {
            auto& ga = pgrad(0);
            const auto& x = pdata(0);
            for (std::size_t i = 0; i < g.size(); ++i)
                if (x[i] > n.a0 && x[i] < n.a1) ga[i] += g[i];
            return;
        }
        case Op::SumAll: {
            auto& ga = pgrad(0);
            for (auto& v : ga) v += g[0];
            return;
        }
        case Op::MeanAll: {
            auto& ga = pgrad(0);
            const double s = g[0] / static_cast<double>(ga.size());
            for (auto& v : ga) v += s;
            return;
        }
        case Op::SumAxis: {
            auto& ga = pgrad(0);
            const Shape& ps = nodes_[n.parents[0]].value.shape;
            auto [outer, len, inner] = axis_split(ps, n.axis);
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t l = 0; l < len; ++l) {
                    double* dst = ga.data() + (o * len + l) * inner;
                    const double* src = g.data() + o * inner;
                    for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
                }
            return;
        }
        case Op::Concat: {
            auto [outer, len, inner] = axis_split(n.value.shape, n.axis);
            (void)len;
            const std::size_t total = n.value.shape[n.axis];
            std::size_t at = 0;
            for (std::size_t k2 = 0; k2 < n.parents.size(); ++k2) {
                const std::size_t plen = nodes_[n.parents[k2]].value.shape[n.axis];
                if (parent_needs(k2)) {
                    auto& gp = pgrad(k2);
                    for (std::size_t o = 0; o < outer; ++o) {
                        const double* src = g.data() + (o * total + at) * inner;
                        double* dst = gp.data() + o * plen * inner;
                        for (std::size_t i = 0; i < plen * inner; ++i) dst[i] += src[i];
                    }
                }
                at += plen;
            }
            return;
        }
        case Op::Slice: {
            auto& ga = pgrad(0);
            const Shape& ps = nodes_[n.parents[0]].value.shape;
            auto [outer, alen, inner] = axis_split(ps, n.axis);
            for (std::size_t o = 0; o < outer; ++o) {
                double* dst = ga.data() + (o * alen + n.start) * inner;
                const double* src = g.data() + o * n.len * inner;
                for (std::size_t i = 0; i < n.len * inner; ++i) dst[i] += src[i];
            }
            return;
        }
        case Op::BroadcastTo: {
            acc_binary_parent(n.parents[0], n.value, g);
            return;
        }
        case Op::Flip: {
            auto& ga = pgrad(0);
            auto [outer, len, inner] = axis_split(n.value.shape, n.axis);
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t l = 0; l < len; ++l) {
                    double* dst = ga.data() + (o * len + (len - 1 - l)) * inner;
                    const double* src = g.data() + (o * len + l) * inner;
                    for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
                }
            return;
        }
        case Op::Reshape: {
            auto& ga = pgrad(0);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            return;
        }
        case Op::GruSeq:
            backward_gru(id);
            return;
        case Op::PairDist:
            backward_pair(id);
            return;
    }
}

inline void Graph::backward_gru(NodeId id) {
    Node& n = nodes_[id];
    GruAux& a = *n.gru;
    const std::size_t N = a.n, T = a.t, D = a.d, H = a.h;
    const std::vector<double>& g = n.value.grad;

    const Tensor& tx = nodes_[n.parents[0]].value;
    const Tensor& tw = nodes_[n.parents[1]].value;
    const Tensor& tu2 = nodes_[n.parents[2]].value;
    const Tensor& tuh = nodes_[n.parents[3]].value;
    const bool need_x = tx.requires_grad;
    const bool need_w = tw.requires_grad;         // w, u2, uh, b share trainability in practice
    const bool need_u2 = tu2.requires_grad;
    const bool need_uh = tuh.requires_grad;
    const bool need_b = nodes_[n.parents[4]].value.requires_grad;

    CMapM W(tw.data.data(), D, 3 * H);
    CMapM U2(tu2.data.data(), H, 2 * H);
    CMapM Uh(tuh.data.data(), H, H);

    MatRM dh = MatRM::Zero(N, H);           // running dL/dh_t
    MatRM da2(N, 2 * H), dac(N, H), drh(N, H), xt(N, D);
    MatRM dxt;
    if (need_x) dxt.resize(N, D);

    for (std::size_t t = T; t-- > 0;) {
        // add the direct output gradient of step t
        for (std::size_t i = 0; i < N; ++i) {
            const double* src = g.data() + (i * T + t) * H;
            double* dst = dh.data() + i * H;
            for (std::size_t j = 0; j < H; ++j) dst[j] += src[j];
        }
        for (std::size_t i = 0; i < N; ++i) {
            const double* zs = a.z.data() + (i * T + t) * H;
            const double* cs = a.c.data() + (i * T + t) * H;
            const double* hp = a.hseq.data() + (i * (T + 1) + t) * H;
            double* dhi = dh.data() + i * H;
            double* da2i = da2.data() + i * 2 * H;
            double* daci = dac.data() + i * H;
            for (std::size_t j = 0; j < H; ++j) {
                const double z = zs[j], c = cs[j];
                const double dz = dhi[j] * (c - hp[j]);
                const double dc = dhi[j] * z;
                da2i[j] = dz * z * (1.0 - z);          // pre-sigmoid update grad
                daci[j] = dc * (1.0 - c * c);          // pre-tanh candidate grad
                dhi[j] *= (1.0 - z);                   // direct carry into h_{t-1}
            }
        }
        // candidate path: d(r*h_prev) = dac * Uh^T
        drh.noalias() = dac * Uh.transpose();
        for (std::size_t i = 0; i < N; ++i) {
            const double* rs = a.r.data() + (i * T + t) * H;
            const double* hp = a.hseq.data() + (i * (T + 1) + t) * H;
            double* da2i = da2.data() + i * 2 * H;
            double* dhi = dh.data() + i * H;
            const double* drhi = drh.data() + i * H;
            for (std::size_t j = 0; j < H; ++j) {
                const double r = rs[j];
                const double dr = drhi[j] * hp[j];
                da2i[H + j] = dr * r * (1.0 - r);      // pre-sigmoid reset grad
                dhi[j] += drhi[j] * r;
            }
        }
        dh.noalias() += da2 * U2.transpose();

        if (need_b) {
            double* gb = nodes_[n.parents[4]].value.grad.data();
            for (std::size_t i = 0; i < N; ++i) {
                const double* da2i = da2.data() + i * 2 * H;
                const double* daci = dac.data() + i * H;
                for (std::size_t j = 0; j < H; ++j) {
                    gb[j] += da2i[j];
                    gb[H + j] += da2i[H + j];
                    gb[2 * H + j] += daci[j];
                }
            }
        }
        const bool need_any_w = need_w || need_u2 || need_uh || need_x;
        if (need_any_w) {
            for (std::size_t i = 0; i < N; ++i)
                std::copy_n(tx.data.data() + (i * T + t) * D, D, xt.data() + i * D);
        }
        if (need_w) {
            MapM GW(nodes_[n.parents[1]].value.grad.data(), D, 3 * H);
            GW.leftCols(2 * H).noalias() += xt.transpose() * da2;
            GW.rightCols(H).noalias() += xt.transpose() * dac;
        }
        if (need_u2 || need_uh) {
            MatRM hprev(N, H), rh(N, H);
            for (std::size_t i = 0; i < N; ++i) {
                const double* hp = a.hseq.data() + (i * (T + 1) + t) * H;
                const double* rs = a.r.data() + (i * T + t) * H;
                double* hpi = hprev.data() + i * H;
                double* rhi = rh.data() + i * H;
                for (std::size_t j = 0; j < H; ++j) {
                    hpi[j] = hp[j];
                    rhi[j] = rs[j] * hp[j];
                }
            }
            if (need_u2) {
                MapM GU2(nodes_[n.parents[2]].value.grad.data(), H, 2 * H);
                GU2.noalias() += hprev.transpose() * da2;
            }
            if (need_uh) {
                MapM GUh(nodes_[n.parents[3]].value.grad.data(), H, H);
                GUh.noalias() += rh.transpose() * dac;
            }
        }
        if (need_x) {
            dxt.noalias() = da2 * W.leftCols(2 * H).transpose();
            dxt.noalias() += dac * W.rightCols(H).transpose();
            double* gx = nodes_[n.parents[0]].value.grad.data();
            for (std::size_t i = 0; i < N; ++i) {
                const double* src = dxt.data() + i * D;
                double* dst = gx + (i * T + t) * D;
                for (std::size_t j = 0; j < D; ++j) dst[j] += src[j];
            }
        }
    }
}

inline void Graph::backward_pair(NodeId id) {
    Node& n = nodes_[id];
    PairAux& a = *n.pair;
    const Tensor& tx = nodes_[n.parents[0]].value;
    if (!tx.requires_grad) return;
    const std::size_t F = tx.shape[1];
    const std::vector<double>& g = n.value.grad;
    std::vector<double>& gx = nodes_[n.parents[0]].value.grad;

    const std::size_t S = a.seg_offsets.size() - 1;
    for (std::size_t s = 0; s < S; ++s) {
        const std::size_t lo = a.seg_offsets[s], hi = a.seg_offsets[s + 1];
        const double gseg = g[s] / static_cast<double>(hi - lo);
        if (gseg == 0.0) continue;
        for (std::size_t p = lo; p < hi; ++p) {
            const double* av = tx.data.data() + a.anchors[p] * F;
            const double* bv = tx.data.data() + a.partners[p] * F;
            double* ga = gx.data() + a.anchors[p] * F;
            double* gb = gx.data() + a.partners[p] * F;
            switch (a.kind) {
                case DistanceKind::Manhattan: {
                    const double w = gseg / static_cast<double>(F);
                    for (std::size_t j = 0; j < F; ++j) {
                        const double q = av[j] - bv[j];
                        const double sgn = q > 0.0 ? 1.0 : (q < 0.0 ? -1.0 : 0.0);
                        ga[j] += w * sgn;
                        gb[j] -= w * sgn;
                    }
                    break;
                }
                case DistanceKind::Euclidean: {
                    const double w = gseg / (static_cast<double>(F) * a.dist[p]);
                    for (std::size_t j = 0; j < F; ++j) {
                        const double q = av[j] - bv[j];
                        ga[j] += w * q;
                        gb[j] -= w * q;
                    }
                    break;
                }
                case DistanceKind::Cosine: {
                    const double den = a.na[p] * a.nb[p] + kEps;
                    // out = 1 - dot/den, so d(out)/dA = -(B/den - dot*nb*(A/na)/den^2)
                    const double c1 = 1.0 / den;
                    const double ca = a.dot[p] * a.nb[p] / (den * den * std::max(a.na[p], kEps));
                    const double cb = a.dot[p] * a.na[p] / (den * den * std::max(a.nb[p], kEps));
                    for (std::size_t j = 0; j < F; ++j) {
                        ga[j] += gseg * (-(bv[j] * c1 - av[j] * ca));
                        gb[j] += gseg * (-(av[j] * c1 - bv[j] * cb));
                    }
                    break;
                }
            }
        }
    }
}

}  // namespace tsexplain
