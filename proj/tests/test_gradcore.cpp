#include <catch2/catch_amalgamated.hpp>
#include <cstring>

#include "oracles.hpp"
#include "tsexplain/adam.hpp"
#include "tsexplain/graph.hpp"
#include "tsexplain/rng.hpp"

using namespace tsexplain;

namespace {

// Run a graph builder on fresh leaves and return the scalar root value.
using Builder = std::function<NodeId(Graph&, const std::vector<NodeId>&)>;

double eval_scalar(const Builder& build, const std::vector<Tensor>& inputs) {
    Graph g;
    std::vector<NodeId> ids;
    for (const auto& t : inputs) ids.push_back(g.leaf(t));
    const NodeId root = build(g, ids);
    return g.value(root).data[0];
}

std::vector<std::vector<double>> analytic_grads(const Builder& build,
                                                const std::vector<Tensor>& inputs) {
    Graph g;
    std::vector<NodeId> ids;
    for (const auto& t : inputs) ids.push_back(g.leaf(t));
    const NodeId root = build(g, ids);
    g.backward(root);
    std::vector<std::vector<double>> out;
    for (NodeId id : ids) out.push_back(g.grad(id));
    return out;
}

// Compare analytic gradients against central finite differences over every
// entry of every input.
void check_fd(const Builder& build, const std::vector<Tensor>& inputs, double tol = 1e-4) {
    const auto analytic = analytic_grads(build, inputs);
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto f = [&](const std::vector<double>& flat) {
            std::vector<Tensor> mod = inputs;
            mod[k].data = flat;
            return eval_scalar(build, mod);
        };
        const auto fd = oracles::fd_gradient(f, inputs[k].data);
        for (std::size_t i = 0; i < fd.size(); ++i) {
            INFO("input " << k << " entry " << i << " analytic " << analytic[k][i] << " fd "
                          << fd[i]);
            REQUIRE(oracles::rel_err(analytic[k][i], fd[i]) < tol);
        }
    }
}

Tensor rand_tensor(Shape s, Rng& rng, double lo = -2.0, double hi = 2.0) {
    return Tensor::uniform(std::move(s), lo, hi, rng);
}

// Nudge values away from a kink so finite differences stay valid.
void keep_away(Tensor& t, std::initializer_list<double> kinks, double margin = 0.05) {
    for (auto& v : t.data)
        for (double k : kinks)
            if (std::fabs(v - k) < margin) v = k + (v >= k ? margin : -margin);
}

// Random linear functional so reductions to a scalar exercise all entries.
// The coefficient tensor is drawn once per trial and cached: the builder is
// re-invoked for every finite-difference evaluation and must stay fixed.
NodeId dot_with_const(Graph& g, NodeId x, const std::shared_ptr<Tensor>& cache, Rng& rng) {
    if (cache->numel() == 0) *cache = Tensor::uniform(g.value(x).shape, -1.0, 1.0, rng);
    return g.sum(g.mul(x, g.constant(*cache)));
}

std::shared_ptr<Tensor> fresh_cache() { return std::make_shared<Tensor>(); }

}  // namespace

TEST_CASE("forward kernels: pinned values") {
    Graph g;
    CHECK(g.value(g.sigmoid(g.constant_scalar(0.0))).data[0] == 0.5);
    CHECK(g.value(g.erf(g.constant_scalar(0.0))).data[0] == 0.0);
    CHECK(g.value(g.clamp(g.constant_scalar(1.3), 0.0, 1.0)).data[0] == 1.0);
    CHECK(g.value(g.tanh(g.constant_scalar(0.0))).data[0] == 0.0);
    CHECK(g.value(g.relu(g.constant_scalar(-1.0))).data[0] == 0.0);
}

TEST_CASE("erf matches high-precision oracle to 1e-12") {
    for (double x = -6.0; x <= 6.0; x += 0.03125) {
        Graph g;
        const double got = g.value(g.erf(g.constant_scalar(x))).data[0];
        const double want = static_cast<double>(oracles::erf_ref(x));
        REQUIRE(std::fabs(got - want) <= 1e-12);
    }
}

TEST_CASE("backward: pinned examples") {
    {
        // d/dx x^2 at 3 -> 6
        Graph g;
        NodeId x = g.leaf(Tensor::scalar(3.0));
        g.backward(g.square(x));
        CHECK(g.grad(x)[0] == 6.0);
    }
    {
        // d/dx clamp(x,0,1) at 1.5 -> 0 (saturated)
        Graph g;
        NodeId x = g.leaf(Tensor::scalar(1.5));
        g.backward(g.clamp(x, 0.0, 1.0));
        CHECK(g.grad(x)[0] == 0.0);
    }
    {
        // abs subgradient 0 at 0
        Graph g;
        NodeId x = g.leaf(Tensor::scalar(0.0));
        g.backward(g.abs(x));
        CHECK(g.grad(x)[0] == 0.0);
    }
    {
        // root that is itself a leaf gets gradient 1
        Graph g;
        NodeId x = g.leaf(Tensor::scalar(2.5));
        g.backward(x);
        CHECK(g.grad(x)[0] == 1.0);
    }
}

TEST_CASE("backward: root must be scalar") {
    Graph g;
    NodeId x = g.leaf(Tensor(Shape{3}, {1.0, 2.0, 3.0}));
    CHECK_THROWS_AS(g.backward(x), ShapeError);
}

TEST_CASE("shape errors") {
    Graph g;
    NodeId a = g.constant(Tensor(Shape{2, 3}, std::vector<double>(6, 1.0)));
    NodeId b = g.constant(Tensor(Shape{2, 3}, std::vector<double>(6, 1.0)));
    CHECK_THROWS_AS(g.matmul(a, b), ShapeError);
    NodeId c = g.constant(Tensor(Shape{4}, std::vector<double>(4, 1.0)));
    CHECK_THROWS_AS(g.add(a, c), ShapeError);
    CHECK_THROWS_AS(g.clamp(a, 1.0, 0.0), ConfigError);
}

TEST_CASE("non-finite outputs raise NumericsError") {
    Graph g;
    CHECK_THROWS_AS(g.exp(g.constant_scalar(1000.0)), NumericsError);
    CHECK_THROWS_AS(g.log(g.constant_scalar(-1.0)), NumericsError);
}

TEST_CASE("finite differences: elementwise kernels, 100 random inputs each") {
    Rng rng(20240501);
    struct KernelCase {
        const char* name;
        std::function<NodeId(Graph&, const std::vector<NodeId>&, const std::shared_ptr<Tensor>&)> build;
        std::initializer_list<double> kinks;
        double lo, hi;
    };
    Rng crng(7);
    const std::vector<KernelCase> cases = {
        {"add", [&](Graph& g, const std::vector<NodeId>& in, const std::shared_ptr<Tensor>& cc) {
             return dot_with_const(g, g.add(in[0], in[1]), cc, crng);
         }, {}, -2.0, 2.0},
        {"sub", [&](Graph& g, const std::vector<NodeId>& in, const std::shared_ptr<Tensor>& cc) {
             return dot_with_const(g, g.sub(in[0], in[1]), cc, crng);
         }, {}, -2.0, 2.0},
        {"mul", [&](Graph& g, const std::vector<NodeId>& in, const std::shared_ptr<Tensor>& cc) {
             return dot_with_const(g, g.mul(in[0], in[1]), cc, crng);
         }, {}, -2.0, 2.0},
        {"sigmoid", [&](Graph& g, const std::vector<NodeId>& in, const std::shared_ptr<Tensor>& cc) {
             return dot_with_const(g, g.sigmoid(in[0]), cc, crng);
         }, {}, -4.0, 4.0},
        {"tanh", [&](Graph& g, const std::vector<NodeId>& in, const std::shared_ptr<Tensor>& cc) {
             return dot_with_const(g, g.tanh(in[0]), cc, crng);
         }, {}, -4.0, 4.0},
        {"relu", [&](Graph& g, const std::vector<NodeId>& in, const std::shared_ptr<Tensor>& cc) {
             return dot_with_const(g, g.relu(in[0]), cc, crng);
         }, {0.0}, -2.0, 2.0},
        {"erf", [&](Graph& g, const std::vector<NodeId>& in, const std::shared_ptr<Tensor>& cc) {
             return dot_with_const(g, g.erf(in[0]), cc, crng);
         }, {}, -3.0, 3.0},
        {"exp", [&](Graph& g, const std::vector<NodeId>& in, const std::shared_ptr<Tensor>& cc) {
             return dot_with_const(g, g.exp(in[0]), cc, crng);
         }, {}, -2.0, 2.0},
        {"log", [&](Graph& g, const std::vector<NodeId>& in, const std::shared_ptr<Tensor>& cc) {
             return dot_with_const(g, g.log(in[0]), cc, crng);
         }, {}, 0.2, 3.0},
        {"abs", [&](Graph& g, const std::vector<NodeId>& in, const std::shared_ptr<Tensor>& cc) {
             return dot_with_const(g, g.abs(in[0]), cc, crng);
         }, {0.0}, -2.0, 2.0},
        {"square", [&](Graph& g, const std::vector<NodeId>& in, const std::shared_ptr<Tensor>& cc) {
             return dot_with_const(g, g.square(in[0]), cc, crng);
         }, {}, -2.0, 2.0},
        {"sqrt", [&](Graph& g, const std::vector<NodeId>& in, const std::shared_ptr<Tensor>& cc) {
             return dot_with_const(g, g.sqrt(in[0]), cc, crng);
         }, {}, 0.2, 3.0},
        {"clamp", [&](Graph& g, const std::vector<NodeId>& in, const std::shared_ptr<Tensor>& cc) {
             return dot_with_const(g, g.clamp(in[0], -0.5, 0.5), cc, crng);
         }, {-0.5, 0.5}, -2.0, 2.0},
        {"sum", [&](Graph& g, const std::vector<NodeId>& in, const std::shared_ptr<Tensor>&) {
             return g.sum(g.square(in[0]));
         }, {}, -2.0, 2.0},
        {"mean", [&](Graph& g, const std::vector<NodeId>& in, const std::shared_ptr<Tensor>&) {
             return g.mean(g.square(in[0]));
         }, {}, -2.0, 2.0},
        {"sum_axis", [&](Graph& g, const std::vector<NodeId>& in, const std::shared_ptr<Tensor>& cc) {
             return dot_with_const(g, g.sum_axis(in[0], 1), cc, crng);
         }, {}, -2.0, 2.0},
        {"flip", [&](Graph& g, const std::vector<NodeId>& in, const std::shared_ptr<Tensor>& cc) {
             return dot_with_const(g, g.flip(in[0], 1), cc, crng);
         }, {}, -2.0, 2.0},
        {"reshape", [&](Graph& g, const std::vector<NodeId>& in, const std::shared_ptr<Tensor>& cc) {
             const std::size_t n = g.value(in[0]).numel();
             return dot_with_const(g, g.reshape(in[0], Shape{n}), cc, crng);
         }, {}, -2.0, 2.0},
        {"slice", [&](Graph& g, const std::vector<NodeId>& in, const std::shared_ptr<Tensor>& cc) {
             return dot_with_const(g, g.slice(in[0], 1, 1, 2), cc, crng);
         }, {}, -2.0, 2.0},
    };
    for (const auto& kc : cases) {
        DYNAMIC_SECTION("kernel " << kc.name) {
            for (int trial = 0; trial < 100; ++trial) {
                const std::size_t r = 2 + rng.index(3);
                const std::size_t c = 3 + rng.index(2);
                std::vector<Tensor> inputs;
                inputs.push_back(rand_tensor(Shape{r, c}, rng, kc.lo, kc.hi));
                if (std::string(kc.name) == "add" || std::string(kc.name) == "sub" ||
                    std::string(kc.name) == "mul")
                    inputs.push_back(rand_tensor(Shape{r, c}, rng, kc.lo, kc.hi));
                for (auto& t : inputs) keep_away(t, kc.kinks);
                auto cache = fresh_cache();
                check_fd([&](Graph& g, const std::vector<NodeId>& ids) {
                    return kc.build(g, ids, cache);
                }, inputs);
            }
        }
    }
}

TEST_CASE("finite differences: matmul, broadcast, concat") {
    Rng rng(99);
    Rng crng(3);
    for (int trial = 0; trial < 100; ++trial) {
        {
            std::vector<Tensor> in = {rand_tensor(Shape{2, 3, 4}, rng),
                                      rand_tensor(Shape{4, 2}, rng)};
            auto cache = fresh_cache();
            check_fd([&](Graph& g, const std::vector<NodeId>& ids) {
                return dot_with_const(g, g.matmul(ids[0], ids[1]), cache, crng);
            }, in);
        }
        {
            // broadcast add/mul: [2,3] (+|*) [3]
            std::vector<Tensor> in = {rand_tensor(Shape{2, 3}, rng), rand_tensor(Shape{3}, rng)};
            auto cache = fresh_cache();
            check_fd([&](Graph& g, const std::vector<NodeId>& ids) {
                return dot_with_const(g, g.mul(g.add(ids[0], ids[1]), ids[1]), cache, crng);
            }, in);
        }
        {
            std::vector<Tensor> in = {rand_tensor(Shape{2, 1}, rng)};
            auto cache = fresh_cache();
            check_fd([&](Graph& g, const std::vector<NodeId>& ids) {
                return dot_with_const(g, g.broadcast_to(ids[0], Shape{2, 4}), cache, crng);
            }, in);
        }
        {
            std::vector<Tensor> in = {rand_tensor(Shape{2, 2}, rng), rand_tensor(Shape{2, 3}, rng)};
            auto cache = fresh_cache();
            check_fd([&](Graph& g, const std::vector<NodeId>& ids) {
                return dot_with_const(g, g.concat(1, {ids[0], ids[1]}), cache, crng);
            }, in);
        }
    }
}

TEST_CASE("finite differences: gru_seq kernel") {
    Rng rng(424242);
    Rng crng(5);
    const std::size_t N = 2, T = 3, D = 2, H = 3;
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<Tensor> in = {
            rand_tensor(Shape{N, T, D}, rng, -1.0, 1.0),
            rand_tensor(Shape{D, 3 * H}, rng, -0.8, 0.8),
            rand_tensor(Shape{H, 2 * H}, rng, -0.8, 0.8),
            rand_tensor(Shape{H, H}, rng, -0.8, 0.8),
            rand_tensor(Shape{3 * H}, rng, -0.5, 0.5),
        };
        auto cache = fresh_cache();
        check_fd([&](Graph& g, const std::vector<NodeId>& ids) {
            return dot_with_const(g, g.gru_seq(ids[0], ids[1], ids[2], ids[3], ids[4]), cache, crng);
        }, in, 1e-4);
    }
}

TEST_CASE("gru_seq zero parameters give zero hidden states") {
    Graph g;
    const std::size_t N = 2, T = 4, D = 3, H = 5;
    Rng rng(1);
    NodeId x = g.constant(Tensor::gauss(Shape{N, T, D}, 0.0, 1.0, rng));
    NodeId h = g.gru_seq(x, g.constant(Tensor(Shape{D, 3 * H})), g.constant(Tensor(Shape{H, 2 * H})),
                         g.constant(Tensor(Shape{H, H})), g.constant(Tensor(Shape{3 * H})));
    for (double v : g.value(h).data) CHECK(v == 0.0);
}

TEST_CASE("finite differences: pair_dist kernel, all distance kinds") {
    Rng rng(31337);
    const std::size_t R = 5, F = 4;
    for (DistanceKind kind :
         {DistanceKind::Manhattan, DistanceKind::Euclidean, DistanceKind::Cosine}) {
        DYNAMIC_SECTION("distance " << distance_name(kind)) {
            for (int trial = 0; trial < 100; ++trial) {
                Tensor x = rand_tensor(Shape{R, F}, rng, -2.0, 2.0);
                // avoid |a-b| kinks for manhattan by separating rows
                for (std::size_t i = 0; i < R; ++i)
                    for (std::size_t j = 0; j < F; ++j) x.data[i * F + j] += 0.3 * static_cast<double>(i);
                auto aux = std::make_shared<Graph::PairAux>();
                aux->kind = kind;
                aux->anchors = {0, 0, 1, 1, 2};
                aux->partners = {3, 4, 2, 4, 3};
                aux->seg_offsets = {0, 2, 4, 5};
                Rng crng(trial);
                auto cache = fresh_cache();
                check_fd([&](Graph& g, const std::vector<NodeId>& ids) {
                    auto a2 = std::make_shared<Graph::PairAux>(*aux);
                    return dot_with_const(g, g.pair_dist(ids[0], a2), cache, crng);
                }, {x}, 1e-4);
            }
        }
    }
}

TEST_CASE("random 5-op composite graphs match finite differences") {
    Rng rng(555);
    Rng crng(6);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor a = rand_tensor(Shape{3, 3}, rng, 0.3, 1.5);
        Tensor b = rand_tensor(Shape{3, 3}, rng, 0.3, 1.5);
        const std::uint64_t pick = rng.u64();
        check_fd([&](Graph& g, const std::vector<NodeId>& ids) {
            NodeId u = g.mul(ids[0], ids[1]);
            NodeId v = (pick % 2) ? g.sigmoid(u) : g.tanh(u);
            NodeId w = g.add(g.square(v), ids[0]);
            NodeId y = (pick % 3) ? g.log(g.add(w, g.constant_scalar(0.5))) : g.sqrt(w);
            return g.mean(y);
        }, {a, b}, 1e-4);
    }
}

TEST_CASE("forward+backward is bit-identical across reruns") {
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        Graph g;
        NodeId x = g.leaf(Tensor::gauss(Shape{4, 5}, 0.0, 1.0, rng));
        NodeId w = g.leaf(Tensor::uniform(Shape{5, 2}, -1.0, 1.0, rng));
        NodeId y = g.mean(g.square(g.tanh(g.matmul(x, w))));
        g.backward(y);
        std::vector<double> out = g.value(y).data;
        out.insert(out.end(), g.grad(x).begin(), g.grad(x).end());
        out.insert(out.end(), g.grad(w).begin(), g.grad(w).end());
        return out;
    };
    const auto a = run(12345), b = run(12345);
    REQUIRE(a.size() == b.size());
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    Tensor p(Shape{3}, {1.0, -2.0, 0.5});
    p.set_requires_grad(true);
    AdamState adam(0.1);
    adam.register_params({&p});
    const auto before = p.data;
    adam.step({&p});
    CHECK(p.data == before);
}

TEST_CASE("adam: first step with unit gradient moves by ~lr") {
    Tensor p(Shape{1}, {1.0});
    p.set_requires_grad(true);
    p.grad[0] = 1.0;
    AdamState adam(0.1);
    adam.register_params({&p});
    adam.step({&p});
    // bias-corrected update = lr * 1 / (1 + eps)
    CHECK(std::fabs((1.0 - p.data[0]) - 0.1) < 1e-8);
}

TEST_CASE("adam: identical params and grads get identical updates") {
    Rng rng(8);
    Tensor p1 = Tensor::gauss(Shape{6}, 0.0, 1.0, rng);
    Tensor p2 = p1;
    p1.set_requires_grad(true);
    p2.set_requires_grad(true);
    for (std::size_t i = 0; i < 6; ++i) p1.grad[i] = p2.grad[i] = 0.3 * static_cast<double>(i) - 1.0;
    AdamState adam(0.05);
    adam.register_params({&p1, &p2});
    for (int it = 0; it < 10; ++it) adam.step({&p1, &p2});
    CHECK(p1.data == p2.data);
}

TEST_CASE("adam: shape errors") {
    Tensor p(Shape{2}, {0.0, 0.0});
    p.set_requires_grad(true);
    AdamState adam(0.1);
    adam.register_params({&p});
    Tensor q(Shape{3}, {0.0, 0.0, 0.0});
    q.set_requires_grad(true);
    CHECK_THROWS_AS(adam.step({&q}), ShapeError);
}

TEST_CASE("graph truncation keeps persistent leaves intact") {
    Graph g;
    NodeId w = g.leaf(Tensor(Shape{2}, {1.0, 2.0}));
    const std::size_t mark = g.checkpoint();
    for (int epoch = 0; epoch < 3; ++epoch) {
        NodeId y = g.sum(g.square(w));
        g.backward(y);
        CHECK(g.grad(w)[0] == 2.0);
        CHECK(g.grad(w)[1] == 4.0);
        g.truncate(mark);
    }
    CHECK(g.value(w).data == std::vector<double>{1.0, 2.0});
}
