#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tsexplain/common.hpp"
#include "tsexplain/io.hpp"
#include "tsexplain/rng.hpp"
#include "tsexplain/tensor.hpp"

namespace tsexplain {

// A synthetic benchmark instance: inputs, per-step targets, ground-truth
// saliency cells and (optional) group labels.
struct Dataset {
    Tensor x;                      // [N,T,D]
    Tensor y;                      // [N,T] regression value or 0/1 label
    std::vector<std::uint8_t> truth;  // [N*T*D] ground-truth salient cells
    std::vector<int> group;        // [N], 0 = ungrouped
    std::string regime;
    std::uint64_t seed = 0;
    bool classification = false;

    std::size_t n() const { return x.shape[0]; }
    std::size_t t() const { return x.shape[1]; }
    std::size_t d() const { return x.shape[2]; }
    std::size_t cell(std::size_t i, std::size_t tt, std::size_t dd) const {
        return (i * t() + tt) * d() + dd;
    }
};

// ---------------------------------------------------------------------------
// White-box regression data
// ---------------------------------------------------------------------------

// AR(3) input sequences: x[t] = 0.25 x[t-1] + 0.1 x[t-2] + 0.05 x[t-3] + e,
// e ~ N(0,1), lags before the start read as zero.
inline Tensor gen_arma(std::size_t n, std::size_t t, std::size_t d, std::uint64_t seed) {
    if (n < 1 || d < 1 || t < 4) throw ConfigError("gen_arma: need N,D >= 1 and T >= 4");
    Rng rng = Rng::derive(seed, "arma");
    Tensor x(Shape{n, t, d});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t tt = 0; tt < t; ++tt)
            for (std::size_t dd = 0; dd < d; ++dd) {
                auto lag = [&](std::size_t k) -> double {
                    return tt >= k ? x.data[(i * t + (tt - k)) * d + dd] : 0.0;
                };
                x.data[(i * t + tt) * d + dd] =
                    0.25 * lag(1) + 0.1 * lag(2) + 0.05 * lag(3) + rng.gauss();
            }
    return x;
}

enum class RareKind { Time, Observation };

struct RareSpec {
    std::vector<std::uint8_t> truth;  // [N*T*D]
    std::vector<int> group;           // [N]
};

// Ground-truth saliency layout for the rare experiments. Rare-Time marks 5
// consecutive time steps per sample over a fixed observation window;
// Rare-Observation marks 5 random observations per sample over a fixed time
// window. Grouped variants split samples into two halves with group-specific
// windows (and disjoint start ranges for Rare-Time).
inline RareSpec make_rare_spec(RareKind kind, bool grouped, std::uint64_t seed, std::size_t n = 100,
                               std::size_t t = 50, std::size_t d = 50) {
    if (t < 39 || d < 39) throw ConfigError("make_rare_spec: needs T,D >= 39 for the fixed windows");
    Rng rng = Rng::derive(seed, "rare_spec");
    RareSpec spec;
    spec.truth.assign(n * t * d, 0);
    spec.group.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const int g = grouped ? (i < n / 2 ? 1 : 2) : 0;
        spec.group[i] = g;
        // inclusive index windows; group 1 uses 1..25, group 2 and ungrouped 13..38
        const std::size_t win_lo = g == 1 ? 1 : 13;
        const std::size_t win_hi = g == 1 ? 25 : 38;
        if (kind == RareKind::Time) {
            std::size_t start;
            if (g == 1)
                start = rng.index(t / 2 - 4);                    // [0, T/2-5]
            else if (g == 2)
                start = t / 2 + rng.index(t / 2 - 4);            // [T/2, T-5]
            else
                start = rng.index(t - 4);                        // [0, T-5]
            for (std::size_t tt = start; tt < start + 5; ++tt)
                for (std::size_t dd = win_lo; dd <= win_hi; ++dd)
                    spec.truth[(i * t + tt) * d + dd] = 1;
        } else {
            const auto obs = rng.choose(d, 5);
            for (std::size_t tt = win_lo; tt <= win_hi; ++tt)
                for (std::size_t dd : obs) spec.truth[(i * t + tt) * d + dd] = 1;
        }
    }
    return spec;
}

// Per-step regression target over the salient cells: sum of squares for
// ungrouped/group-1 samples, square of the sum for group-2 samples.
inline Tensor whitebox_regress(const Tensor& x, const std::vector<std::uint8_t>& truth,
                               const std::vector<int>& group) {
    const std::size_t n = x.shape[0], t = x.shape[1], d = x.shape[2];
    if (truth.size() != x.numel()) throw ShapeError("whitebox_regress: truth size mismatch");
    Tensor y(Shape{n, t});
    for (std::size_t i = 0; i < n; ++i) {
        const bool square_of_sum = i < group.size() && group[i] == 2;
        for (std::size_t tt = 0; tt < t; ++tt) {
            double acc = 0.0;
            const std::size_t base = (i * t + tt) * d;
            if (square_of_sum) {
                for (std::size_t dd = 0; dd < d; ++dd)
                    if (truth[base + dd]) acc += x.data[base + dd];
                acc *= acc;
            } else {
                for (std::size_t dd = 0; dd < d; ++dd)
                    if (truth[base + dd]) acc += x.data[base + dd] * x.data[base + dd];
            }
            y.data[i * t + tt] = acc;
        }
    }
    return y;
}

inline Dataset gen_rare(RareKind kind, bool grouped, std::uint64_t seed, std::size_t n = 100,
                        std::size_t t = 50, std::size_t d = 50) {
    Dataset ds;
    ds.x = gen_arma(n, t, d, seed);
    RareSpec spec = make_rare_spec(kind, grouped, seed, n, t, d);
    ds.truth = std::move(spec.truth);
    ds.group = std::move(spec.group);
    ds.y = whitebox_regress(ds.x, ds.truth, ds.group);
    ds.regime = std::string(kind == RareKind::Time ? "rare-time" : "rare-observation") +
                (grouped ? "-diffgroups" : "");
    ds.seed = seed;
    ds.classification = false;
    return ds;
}

// ---------------------------------------------------------------------------
// Black-box classification data (hidden Markov chains)
// ---------------------------------------------------------------------------

struct GpMixtureEmission {
    double length_scale = 0.2;              // on time normalized to [0,1]
    std::vector<std::vector<double>> means;  // [state][feature]
};

struct GaussianEmission {
    std::vector<std::vector<double>> means;  // [state][feature], unit variance
};

struct HmmSpec {
    std::vector<double> initial;
    std::vector<std::vector<double>> transition;
    // exactly one emission model is active
    bool gp = false;
    GpMixtureEmission gp_emission;
    GaussianEmission gauss_emission;

    std::size_t states() const { return initial.size(); }

    void validate() const {
        if (transition.size() != states()) throw ConfigError("hmm: transition rows != states");
        for (const auto& row : transition) {
            if (row.size() != states()) throw ConfigError("hmm: transition row width != states");
            double s = 0.0;
            for (double p : row) s += p;
            if (std::fabs(s - 1.0) > 1e-12) throw ConfigError("hmm: transition row must sum to 1");
        }
        const auto& means = gp ? gp_emission.means : gauss_emission.means;
        if (means.size() != states()) throw ConfigError("hmm: emission entries != states");
    }
};

inline HmmSpec switch_feature_hmm() {
    HmmSpec h;
    h.initial = {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
    h.transition = {{0.95, 0.02, 0.03}, {0.02, 0.95, 0.03}, {0.03, 0.02, 0.95}};
    h.gp = true;
    h.gp_emission.length_scale = 0.2;
    h.gp_emission.means = {{0.8, -0.5, -0.2}, {0.0, -1.0, 0.0}, {-0.2, -0.2, 0.8}};
    h.validate();
    return h;
}

inline HmmSpec state_hmm() {
    HmmSpec h;
    h.initial = {0.5, 0.5};
    h.transition = {{0.1, 0.9}, {0.1, 0.9}};
    h.gp = false;
    h.gauss_emission.means = {{0.1, 1.6, 0.5}, {-0.1, -0.4, -1.5}};
    h.validate();
    return h;
}

inline std::size_t sample_categorical(const std::vector<double>& probs, Rng& rng) {
    const double u = rng.u01();
    double acc = 0.0;
    for (std::size_t k = 0; k < probs.size(); ++k) {
        acc += probs[k];
        if (u < acc) return k;
    }
    return probs.size() - 1;
}

inline std::vector<std::size_t> sample_state_chain(const HmmSpec& h, std::size_t t, Rng& rng) {
    std::vector<std::size_t> s(t);
    s[0] = sample_categorical(h.initial, rng);
    for (std::size_t tt = 1; tt < t; ++tt) s[tt] = sample_categorical(h.transition[s[tt - 1]], rng);
    return s;
}

// Lower Cholesky factor of the RBF kernel matrix over T points on [0,1].
inline Eigen::MatrixXd rbf_chol(std::size_t t, double length_scale, double jitter = 1e-6) {
    Eigen::MatrixXd k(t, t);
    const double denom = t > 1 ? static_cast<double>(t - 1) : 1.0;
    for (std::size_t a = 0; a < t; ++a)
        for (std::size_t b = 0; b < t; ++b) {
            const double dt = (static_cast<double>(a) - static_cast<double>(b)) / denom;
            k(a, b) = std::exp(-dt * dt / (2.0 * length_scale * length_scale));
        }
    k.diagonal().array() += jitter;
    Eigen::LLT<Eigen::MatrixXd> llt(k);
    if (llt.info() != Eigen::Success) throw NumericsError("rbf kernel not positive definite");
    return llt.matrixL();
}

// One GP path: L z + mean, z ~ N(0, I).
inline std::vector<double> gp_path(const Eigen::MatrixXd& chol_l, double mean, Rng& rng) {
    const std::size_t t = static_cast<std::size_t>(chol_l.rows());
    Eigen::VectorXd z(t);
    for (std::size_t i = 0; i < t; ++i) z(i) = rng.gauss();
    Eigen::VectorXd p = chol_l * z;
    std::vector<double> out(t);
    for (std::size_t i = 0; i < t; ++i) out[i] = p(i) + mean;
    return out;
}

// Latent 3-state chain with GP-mixture emissions; the label at each step is a
// Bernoulli draw on the sigmoid of the state-selected feature, and that cell
// is the ground-truth salient one.
inline Dataset gen_switch_feature(std::uint64_t seed, std::size_t n = 1000, std::size_t t = 100,
                                  std::size_t d = 3) {
    const HmmSpec h = switch_feature_hmm();
    Rng rng = Rng::derive(seed, "switch_feature");
    const Eigen::MatrixXd chol_l = rbf_chol(t, h.gp_emission.length_scale);
    Dataset ds;
    ds.x = Tensor(Shape{n, t, d});
    ds.y = Tensor(Shape{n, t});
    ds.truth.assign(n * t * d, 0);
    ds.group.assign(n, 0);
    const std::size_t k_states = h.states();
    for (std::size_t i = 0; i < n; ++i) {
        const auto s = sample_state_chain(h, t, rng);
        // one GP path per (state, feature) over the full horizon; the emitted
        // value follows the path of the active state
        std::vector<std::vector<double>> paths(k_states * d);
        for (std::size_t k = 0; k < k_states; ++k)
            for (std::size_t dd = 0; dd < d; ++dd)
                paths[k * d + dd] = gp_path(chol_l, h.gp_emission.means[k][dd], rng);
        for (std::size_t tt = 0; tt < t; ++tt) {
            const std::size_t k = s[tt];
            for (std::size_t dd = 0; dd < d; ++dd)
                ds.x.data[(i * t + tt) * d + dd] = paths[k * d + dd][tt];
            const double p = 1.0 / (1.0 + std::exp(-ds.x.data[(i * t + tt) * d + k]));
            ds.y.data[i * t + tt] = rng.u01() < p ? 1.0 : 0.0;
            ds.truth[(i * t + tt) * d + k] = 1;
        }
    }
    ds.regime = "switch-feature";
    ds.seed = seed;
    ds.classification = true;
    return ds;
}

// Two-state chain with diagonal Gaussian emissions; the label is driven by
// feature 2 in state 0 and feature 3 in state 1, feature 1 is irrelevant.
inline Dataset gen_state(std::uint64_t seed, std::size_t n = 1000, std::size_t t = 200,
                         std::size_t d = 3) {
    if (d < 3) throw ConfigError("gen_state: needs at least 3 observations");
    const HmmSpec h = state_hmm();
    Rng rng = Rng::derive(seed, "state");
    Dataset ds;
    ds.x = Tensor(Shape{n, t, d});
    ds.y = Tensor(Shape{n, t});
    ds.truth.assign(n * t * d, 0);
    ds.group.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto s = sample_state_chain(h, t, rng);
        for (std::size_t tt = 0; tt < t; ++tt) {
            const std::size_t k = s[tt];
            for (std::size_t dd = 0; dd < d; ++dd)
                ds.x.data[(i * t + tt) * d + dd] = rng.gauss(h.gauss_emission.means[k][dd], 1.0);
            const std::size_t drive = k == 0 ? 1 : 2;
            const double p =
                1.0 / (1.0 + std::exp(-ds.x.data[(i * t + tt) * d + drive]));
            ds.y.data[i * t + tt] = rng.u01() < p ? 1.0 : 0.0;
            ds.truth[(i * t + tt) * d + drive] = 1;
        }
    }
    ds.regime = "state";
    ds.seed = seed;
    ds.classification = true;
    return ds;
}

// ---------------------------------------------------------------------------
// Registry + disk format
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& known_regimes() {
    static const std::vector<std::string> regimes = {
        "rare-time", "rare-observation", "rare-time-diffgroups", "rare-observation-diffgroups",
        "switch-feature", "state"};
    return regimes;
}

inline Dataset generate_regime(const std::string& regime, std::uint64_t seed) {
    if (regime == "rare-time") return gen_rare(RareKind::Time, false, seed);
    if (regime == "rare-observation") return gen_rare(RareKind::Observation, false, seed);
    if (regime == "rare-time-diffgroups") return gen_rare(RareKind::Time, true, seed);
    if (regime == "rare-observation-diffgroups") return gen_rare(RareKind::Observation, true, seed);
    if (regime == "switch-feature") return gen_switch_feature(seed);
    if (regime == "state") return gen_state(seed);
    throw ConfigError("unknown regime: " + regime);
}

// Four CSV files (row = sample, columns flattened as t*D + d) plus metadata.
inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir,
                         const std::string& stem) {
    const std::size_t n = ds.n(), td = ds.t() * ds.d();
    std::vector<std::vector<double>> xs(n), ys(n), ts(n), gs(n);
    for (std::size_t i = 0; i < n; ++i) {
        xs[i].assign(ds.x.data.begin() + static_cast<std::ptrdiff_t>(i * td),
                     ds.x.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * td));
        ys[i].assign(ds.y.data.begin() + static_cast<std::ptrdiff_t>(i * ds.t()),
                     ds.y.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * ds.t()));
        ts[i].resize(td);
        for (std::size_t j = 0; j < td; ++j) ts[i][j] = ds.truth[i * td + j];
        gs[i] = {static_cast<double>(ds.group[i])};
    }
    write_csv_matrix(dir / (stem + ".x.csv"), xs);
    write_csv_matrix(dir / (stem + ".y.csv"), ys);
    write_csv_matrix(dir / (stem + ".truth.csv"), ts);
    write_csv_matrix(dir / (stem + ".group.csv"), gs);
    Json meta;
    meta["N"] = n;
    meta["T"] = ds.t();
    meta["D"] = ds.d();
    meta["regime"] = ds.regime;
    meta["seed"] = ds.seed;
    meta["classification"] = ds.classification;
    write_json_file(dir / (stem + ".meta.json"), meta);
}

inline Dataset load_dataset(const std::filesystem::path& dir, const std::string& stem) {
    const Json meta = read_json_file(dir / (stem + ".meta.json"));
    const std::size_t n = meta.at("N"), t = meta.at("T"), d = meta.at("D");
    Dataset ds;
    ds.regime = meta.at("regime");
    ds.seed = meta.at("seed");
    ds.classification = meta.at("classification");
    const auto xs = read_csv_matrix(dir / (stem + ".x.csv"));
    const auto ys = read_csv_matrix(dir / (stem + ".y.csv"));
    const auto ts = read_csv_matrix(dir / (stem + ".truth.csv"));
    const auto gs = read_csv_matrix(dir / (stem + ".group.csv"));
    if (xs.size() != n || ys.size() != n || ts.size() != n || gs.size() != n)
        throw IoError("dataset row count mismatch for " + stem);
    ds.x = Tensor(Shape{n, t, d});
    ds.y = Tensor(Shape{n, t});
    ds.truth.assign(n * t * d, 0);
    ds.group.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        if (xs[i].size() != t * d || ys[i].size() != t || ts[i].size() != t * d)
            throw IoError("dataset column count mismatch for " + stem);
        std::copy(xs[i].begin(), xs[i].end(), ds.x.data.begin() + static_cast<std::ptrdiff_t>(i * t * d));
        std::copy(ys[i].begin(), ys[i].end(), ds.y.data.begin() + static_cast<std::ptrdiff_t>(i * t));
        for (std::size_t j = 0; j < t * d; ++j) ds.truth[i * t * d + j] = ts[i][j] != 0.0;
        ds.group[i] = static_cast<int>(gs[i][0]);
    }
    return ds;
}

}  // namespace tsexplain
