#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "tsexplain/adam.hpp"
#include "tsexplain/datagen.hpp"
#include "tsexplain/graph.hpp"
#include "tsexplain/io.hpp"
#include "tsexplain/rng.hpp"

namespace tsexplain {

// Single-layer GRU with a per-step sigmoid readout. Weight layout matches the
// gru_seq kernel: w [D,3H] input projections (update|reset|candidate),
// u2 [H,2H] hidden projections (update|reset), uh [H,H] candidate projection,
// b [3H], readout wo [H,1] / bo [1].
struct GruParams {
    std::size_t input_dim = 0, hidden = 0;
    Tensor w, u2, uh, b, wo, bo;

    static GruParams init(std::size_t d, std::size_t h, Rng& rng) {
        GruParams p;
        p.input_dim = d;
        p.hidden = h;
        const double bound = 1.0 / std::sqrt(static_cast<double>(h));
        p.w = Tensor::uniform(Shape{d, 3 * h}, -bound, bound, rng);
        p.u2 = Tensor::uniform(Shape{h, 2 * h}, -bound, bound, rng);
        p.uh = Tensor::uniform(Shape{h, h}, -bound, bound, rng);
        p.b = Tensor::uniform(Shape{3 * h}, -bound, bound, rng);
        p.wo = Tensor::uniform(Shape{h, 1}, -bound, bound, rng);
        p.bo = Tensor::uniform(Shape{1}, -bound, bound, rng);
        return p;
    }

    bool all_finite() const {
        return w.all_finite() && u2.all_finite() && uh.all_finite() && b.all_finite() &&
               wo.all_finite() && bo.all_finite();
    }
};

// Differentiable per-step logits for a batch: [N,T,D] -> [N,T].
inline NodeId gru_logits_node(Graph& g, const GruParams& p, NodeId x, NodeId w, NodeId u2,
                              NodeId uh, NodeId b, NodeId wo, NodeId bo) {
    const Shape& xs = g.value(x).shape;
    NodeId h = g.gru_seq(x, w, u2, uh, b);
    NodeId z = g.matmul(h, wo);                       // [N,T,1]
    z = g.reshape(z, Shape{xs[0], xs[1]});
    return g.add(z, bo);
    (void)p;
}

// Convenience wrapper when the parameters enter as constants.
inline NodeId gru_logits_node(Graph& g, const GruParams& p, NodeId x) {
    return gru_logits_node(g, p, x, g.constant(p.w), g.constant(p.u2), g.constant(p.uh),
                           g.constant(p.b), g.constant(p.wo), g.constant(p.bo));
}

// Plain (tape-free) GRU hidden states, h0 = 0: returns [N,(T+1),H] including
// the initial state. Shared by predict and the occlusion baselines.
inline std::vector<double> gru_hidden_states(const GruParams& p, const Tensor& x) {
    const std::size_t n = x.shape[0], t = x.shape[1], d = x.shape[2], h = p.hidden;
    std::vector<double> hs(n * (t + 1) * h, 0.0);
    MatRM hh = MatRM::Zero(n, h), xt(n, d), gates(n, 3 * h), hu(n, 2 * h), rh(n, h), cu(n, h);
    CMapM w(p.w.data.data(), d, 3 * h), u2(p.u2.data.data(), h, 2 * h), uh(p.uh.data.data(), h, h);
    const double* bias = p.b.data.data();
    for (std::size_t tt = 0; tt < t; ++tt) {
        for (std::size_t i = 0; i < n; ++i)
            std::copy_n(x.data.data() + (i * t + tt) * d, d, xt.data() + i * d);
        gates.noalias() = xt * w;
        hu.noalias() = hh * u2;
        for (std::size_t i = 0; i < n; ++i) {
            double* gp = gates.data() + i * 3 * h;
            const double* hup = hu.data() + i * 2 * h;
            const double* hp = hh.data() + i * h;
            double* rhp = rh.data() + i * h;
            for (std::size_t j = 0; j < h; ++j) {
                gp[j] = stable_sigmoid(gp[j] + hup[j] + bias[j]);
                gp[h + j] = stable_sigmoid(gp[h + j] + hup[h + j] + bias[h + j]);
                rhp[j] = gp[h + j] * hp[j];
            }
        }
        cu.noalias() = rh * uh;
        for (std::size_t i = 0; i < n; ++i) {
            const double* gp = gates.data() + i * 3 * h;
            const double* cup = cu.data() + i * h;
            double* hp = hh.data() + i * h;
            double* out = hs.data() + (i * (t + 1) + tt + 1) * h;
            for (std::size_t j = 0; j < h; ++j) {
                const double c = std::tanh(gp[2 * h + j] + cup[j] + bias[2 * h + j]);
                hp[j] = (1.0 - gp[j]) * hp[j] + gp[j] * c;
                out[j] = hp[j];
            }
        }
    }
    return hs;
}

inline double gru_prob_from_hidden(const GruParams& p, const double* h) {
    double z = p.bo.data[0];
    for (std::size_t j = 0; j < p.hidden; ++j) z += h[j] * p.wo.data[j];
    return stable_sigmoid(z);
}

// One plain GRU step for a row-batch [R,D] of inputs against states [R,H].
inline void gru_step_batch(const GruParams& p, const MatRM& xin, MatRM& h) {
    const std::size_t r = static_cast<std::size_t>(xin.rows()), hd = p.hidden;
    CMapM w(p.w.data.data(), p.input_dim, 3 * hd), u2(p.u2.data.data(), hd, 2 * hd),
        uh(p.uh.data.data(), hd, hd);
    const double* bias = p.b.data.data();
    MatRM gates = xin * w;
    MatRM hu = h * u2;
    MatRM rh(r, hd);
    for (std::size_t i = 0; i < r; ++i) {
        double* gp = gates.data() + i * 3 * hd;
        const double* hup = hu.data() + i * 2 * hd;
        const double* hp = h.data() + i * hd;
        double* rhp = rh.data() + i * hd;
        for (std::size_t j = 0; j < hd; ++j) {
            gp[j] = stable_sigmoid(gp[j] + hup[j] + bias[j]);
            gp[hd + j] = stable_sigmoid(gp[hd + j] + hup[hd + j] + bias[hd + j]);
            rhp[j] = gp[hd + j] * hp[j];
        }
    }
    MatRM cu = rh * uh;
    for (std::size_t i = 0; i < r; ++i) {
        const double* gp = gates.data() + i * 3 * hd;
        const double* cup = cu.data() + i * hd;
        double* hp = h.data() + i * hd;
        for (std::size_t j = 0; j < hd; ++j) {
            const double c = std::tanh(gp[2 * hd + j] + cup[j] + bias[2 * hd + j]);
            hp[j] = (1.0 - gp[j]) * hp[j] + gp[j] * c;
        }
    }
}

inline Tensor gru_forward(const GruParams& p, const Tensor& x) {
    if (x.rank() != 3 || x.shape[2] != p.input_dim) throw ShapeError("gru_forward: bad input");
    if (!x.all_finite()) throw NumericsError("gru_forward: non-finite input");
    const std::size_t n = x.shape[0], t = x.shape[1], h = p.hidden;
    const auto hs = gru_hidden_states(p, x);
    Tensor out(Shape{n, t});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t tt = 0; tt < t; ++tt)
            out.data[i * t + tt] = gru_prob_from_hidden(p, hs.data() + (i * (t + 1) + tt + 1) * h);
    if (!out.all_finite()) throw NumericsError("gru_forward: non-finite activation");
    return out;
}

// ---------------------------------------------------------------------------
// The prediction interface shared by the explainers
// ---------------------------------------------------------------------------

// Either the white-box regressor (defined by the dataset's ground-truth
// saliency) or a trained GRU classifier, behind one batched interface.
// sample_ids map rows of x onto dataset samples for the white-box form; empty
// means row i is sample i.
class PredictModel {
  public:
    static PredictModel whitebox(std::shared_ptr<const Dataset> ds) {
        PredictModel m;
        m.kind_ = "whitebox";
        m.ds_ = std::move(ds);
        return m;
    }
    static PredictModel gru(std::shared_ptr<const GruParams> params) {
        PredictModel m;
        m.kind_ = "gru";
        m.gru_ = std::move(params);
        return m;
    }

    const std::string& kind() const { return kind_; }
    bool classification() const { return kind_ == "gru"; }
    const GruParams& gru_params() const {
        if (!gru_) throw ConfigError("model has no gru parameters");
        return *gru_;
    }

    Tensor predict(const Tensor& x, const std::vector<std::size_t>& sample_ids = {}) const {
        if (kind_ == "gru") return gru_forward(*gru_, x);
        const std::size_t n = x.shape[0], t = x.shape[1], d = x.shape[2];
        std::vector<std::uint8_t> truth(n * t * d);
        std::vector<int> group(n);
        gather_spec(n, t, d, sample_ids, truth, group);
        return whitebox_regress(x, truth, group);
    }

    // Differentiable prediction; x enters as a graph node.
    NodeId predict_node(Graph& g, NodeId x, const std::vector<std::size_t>& sample_ids = {}) const {
        const Shape& xs = g.value(x).shape;
        if (kind_ == "gru") return g.sigmoid(gru_logits_node(g, *gru_, x));
        const std::size_t n = xs[0], t = xs[1], d = xs[2];
        std::vector<std::uint8_t> truth(n * t * d);
        std::vector<int> group(n);
        gather_spec(n, t, d, sample_ids, truth, group);
        Tensor mask(Shape{n, t, d});
        for (std::size_t i = 0; i < mask.numel(); ++i) mask.data[i] = truth[i];
        Tensor sel2(Shape{n, 1});
        for (std::size_t i = 0; i < n; ++i) sel2.data[i] = group[i] == 2 ? 1.0 : 0.0;
        Tensor sel1(Shape{n, 1});
        for (std::size_t i = 0; i < n; ++i) sel1.data[i] = 1.0 - sel2.data[i];
        NodeId masked = g.mul(x, g.constant(mask));
        NodeId sum_sq = g.sum_axis(g.square(masked), 2);           // [N,T]
        NodeId sq_sum = g.square(g.sum_axis(masked, 2));           // [N,T]
        return g.add(g.mul(sum_sq, g.constant(sel1)), g.mul(sq_sum, g.constant(sel2)));
    }

  private:
    void gather_spec(std::size_t n, std::size_t t, std::size_t d,
                     const std::vector<std::size_t>& sample_ids, std::vector<std::uint8_t>& truth,
                     std::vector<int>& group) const {
        if (!ds_) throw ConfigError("whitebox model without dataset spec");
        if (t != ds_->t() || d != ds_->d()) throw ShapeError("whitebox predict: T/D mismatch");
        if (!sample_ids.empty() && sample_ids.size() != n)
            throw ShapeError("whitebox predict: sample_ids size mismatch");
        if (sample_ids.empty() && n != ds_->n())
            throw ShapeError("whitebox predict: batch rows must map onto dataset samples");
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t src = sample_ids.empty() ? i : sample_ids[i];
            if (src >= ds_->n()) throw ShapeError("whitebox predict: sample id out of range");
            std::copy_n(ds_->truth.data() + src * t * d, t * d, truth.data() + i * t * d);
            group[i] = ds_->group[src];
        }
    }

    std::string kind_;
    std::shared_ptr<const Dataset> ds_;
    std::shared_ptr<const GruParams> gru_;
};

// Build the matching target model for a dataset; classification regimes need
// trained parameters.
inline PredictModel model_for_dataset(std::shared_ptr<const Dataset> ds,
                                      std::shared_ptr<const GruParams> params = nullptr) {
    if (ds->classification) {
        if (!params) throw ConfigError("regime " + ds->regime + " needs a trained gru target");
        if (params->input_dim != ds->d())
            throw ConfigError("gru input dim mismatch for regime " + ds->regime);
        return PredictModel::gru(std::move(params));
    }
    if (params) throw ConfigError("whitebox regime " + ds->regime + " takes no gru parameters");
    return PredictModel::whitebox(std::move(ds));
}

// ---------------------------------------------------------------------------
// Classifier training
// ---------------------------------------------------------------------------

struct TrainConfig {
    std::size_t epochs = 50;
    double lr = 1e-4;
    std::size_t hidden = 200;
    std::size_t batch_size = 0;  // 0 = full batch
    std::uint64_t seed = 0;
};

struct TrainResult {
    GruParams params;
    std::vector<double> loss_trace;  // mean BCE per epoch
    std::vector<double> acc_trace;   // train accuracy per epoch
};

// Numerically stable binary cross-entropy against constant targets, built
// from logits: mean(relu(z) - z*y + log(1 + exp(-|z|))).
inline NodeId bce_with_logits_node(Graph& g, NodeId logits, NodeId targets) {
    NodeId zy = g.mul(logits, targets);
    NodeId softplus = g.log(g.add(g.constant_scalar(1.0),
                                  g.exp(g.mul(g.abs(logits), g.constant_scalar(-1.0)))));
    return g.mean(g.add(g.sub(g.relu(logits), zy), softplus));
}

// Minimize mean per-step BCE with Adam. Deterministic given the seed; batches
// (when enabled) are reshuffled deterministically each epoch.
inline TrainResult train_classifier(const Dataset& ds, const TrainConfig& cfg) {
    const std::size_t n = ds.n(), t = ds.t(), d = ds.d();
    Rng init_rng = Rng::derive(cfg.seed, "gru_init");
    TrainResult res;
    res.params = GruParams::init(d, cfg.hidden, init_rng);
    GruParams& p = res.params;

    Graph g;
    const NodeId w = g.leaf(p.w), u2 = g.leaf(p.u2), uh = g.leaf(p.uh), bb = g.leaf(p.b),
                 wo = g.leaf(p.wo), bo = g.leaf(p.bo);
    std::vector<Tensor*> params = {&g.value_mut(w), &g.value_mut(u2), &g.value_mut(uh),
                                   &g.value_mut(bb), &g.value_mut(wo), &g.value_mut(bo)};
    AdamState adam(cfg.lr);
    adam.register_params(params);
    const std::size_t mark = g.checkpoint();

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    const std::size_t bs = cfg.batch_size == 0 ? n : std::min(cfg.batch_size, n);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (bs < n) {
            Rng shuffle_rng = Rng::derive(cfg.seed, "gru_shuffle", epoch);
            shuffle_rng.shuffle(order);
        }
        double loss_sum = 0.0;
        std::size_t correct = 0, seen = 0;
        for (std::size_t at = 0; at < n; at += bs) {
            const std::size_t cur = std::min(bs, n - at);
            Tensor xb(Shape{cur, t, d}), yb(Shape{cur, t});
            for (std::size_t r = 0; r < cur; ++r) {
                const std::size_t src = order[at + r];
                std::copy_n(ds.x.data.data() + src * t * d, t * d, xb.data.data() + r * t * d);
                std::copy_n(ds.y.data.data() + src * t, t, yb.data.data() + r * t);
            }
            const NodeId xn = g.constant(std::move(xb));
            const NodeId yn = g.constant(yb);
            const NodeId logits = gru_logits_node(g, p, xn, w, u2, uh, bb, wo, bo);
            const NodeId loss = bce_with_logits_node(g, logits, yn);
            const double loss_v = g.value(loss).data[0];
            if (!std::isfinite(loss_v))
                throw TrainingError("classifier loss diverged at epoch " + std::to_string(epoch));
            const auto& zv = g.value(logits).data;
            for (std::size_t i = 0; i < zv.size(); ++i)
                correct += (zv[i] > 0.0) == (yb.data[i] > 0.5);
            seen += zv.size();
            loss_sum += loss_v * static_cast<double>(cur);
            g.backward(loss);
            adam.step(params);
            g.truncate(mark);
        }
        res.loss_trace.push_back(loss_sum / static_cast<double>(n));
        res.acc_trace.push_back(static_cast<double>(correct) / static_cast<double>(seen));
    }
    // copy trained values back out of the graph leaves
    p.w = g.value(w);
    p.u2 = g.value(u2);
    p.uh = g.value(uh);
    p.b = g.value(bb);
    p.wo = g.value(wo);
    p.bo = g.value(bo);
    for (Tensor* q : {&p.w, &p.u2, &p.uh, &p.b, &p.wo, &p.bo}) q->set_requires_grad(false);
    if (!p.all_finite()) throw TrainingError("classifier parameters diverged");
    return res;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline Json tensor_to_json(const Tensor& t) {
    Json j;
    j["shape"] = t.shape;
    j["data"] = t.data;
    return j;
}

inline Tensor tensor_from_json(const Json& j) {
    Shape s = j.at("shape").get<Shape>();
    std::vector<double> d = j.at("data").get<std::vector<double>>();
    return Tensor(std::move(s), std::move(d));
}

inline constexpr const char* kCheckpointFormat = "tsexplain-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline void save_gru_checkpoint(const GruParams& p, const std::filesystem::path& path) {
    Json j;
    j["format"] = kCheckpointFormat;
    j["version"] = kCheckpointVersion;
    j["kind"] = "gru";
    j["input_dim"] = p.input_dim;
    j["hidden"] = p.hidden;
    j["w"] = tensor_to_json(p.w);
    j["u2"] = tensor_to_json(p.u2);
    j["uh"] = tensor_to_json(p.uh);
    j["b"] = tensor_to_json(p.b);
    j["wo"] = tensor_to_json(p.wo);
    j["bo"] = tensor_to_json(p.bo);
    write_json_file(path, j);
}

inline GruParams load_gru_checkpoint(const std::filesystem::path& path) {
    const Json j = read_json_file(path);
    if (j.value("format", "") != kCheckpointFormat || j.value("version", -1) != kCheckpointVersion)
        throw IoError("unsupported checkpoint header in " + path.string());
    if (j.value("kind", "") != "gru") throw IoError("checkpoint kind mismatch in " + path.string());
    GruParams p;
    p.input_dim = j.at("input_dim");
    p.hidden = j.at("hidden");
    p.w = tensor_from_json(j.at("w"));
    p.u2 = tensor_from_json(j.at("u2"));
    p.uh = tensor_from_json(j.at("uh"));
    p.b = tensor_from_json(j.at("b"));
    p.wo = tensor_from_json(j.at("wo"));
    p.bo = tensor_from_json(j.at("bo"));
    return p;
}

}  // namespace tsexplain
