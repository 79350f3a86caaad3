#include "latentkit/moe.hpp"

#include <algorithm>
#include <cmath>

namespace latentkit {

void MoEConfig::validate() const {
    if (N_s < 0) throw ConfigError("moe config: N_s must be >= 0");
    if (N_r < 1 || K_r < 1 || K_r > N_r) {
        throw ConfigError("moe config: need 1 <= K_r <= N_r, got K_r=" + std::to_string(K_r) +
                          " N_r=" + std::to_string(N_r));
    }
    if (d < 1 || d_ff < 1) throw ConfigError("moe config: d and d_ff must be >= 1");
}

double silu(double z) { return z / (1.0 + std::exp(-z)); }

MoEParams MoEParams::init(const MoEConfig& cfg, Rng& rng, double stddev,
                          const std::string& prefix) {
    cfg.validate();
    MoEParams p;
    p.centroids = Param::randn(prefix + ".centroids", {cfg.N_r, cfg.d}, rng, stddev);
    for (int i = 0; i < cfg.N_s; ++i) {
        ExpertFFN e;
        e.w1 = Param::randn(prefix + ".shared" + std::to_string(i) + ".w1", {cfg.d_ff, cfg.d}, rng,
                            stddev);
        e.w2 = Param::randn(prefix + ".shared" + std::to_string(i) + ".w2", {cfg.d, cfg.d_ff}, rng,
                            stddev);
        p.shared.push_back(std::move(e));
    }
    for (int i = 0; i < cfg.N_r; ++i) {
        ExpertFFN e;
        e.w1 = Param::randn(prefix + ".routed" + std::to_string(i) + ".w1", {cfg.d_ff, cfg.d}, rng,
                            stddev);
        e.w2 = Param::randn(prefix + ".routed" + std::to_string(i) + ".w2", {cfg.d, cfg.d_ff}, rng,
                            stddev);
        p.routed.push_back(std::move(e));
    }
    return p;
}

std::vector<Param*> MoEParams::params() {
    std::vector<Param*> out{&centroids};
    for (ExpertFFN& e : shared) {
        out.push_back(&e.w1);
        out.push_back(&e.w2);
    }
    for (ExpertFFN& e : routed) {
        out.push_back(&e.w1);
        out.push_back(&e.w2);
    }
    return out;
}

std::vector<double> affinity_scores(std::span<const double> u, const Tensor& centroids) {
    if (centroids.rank() != 2 || centroids.shape[1] != static_cast<int64_t>(u.size())) {
        throw DimensionError("affinity_scores: token width " + std::to_string(u.size()) +
                             " vs centroids " + centroids.shape_str());
    }
    const int64_t n_r = centroids.shape[0];
    std::vector<double> s(static_cast<size_t>(n_r));
    for (int64_t i = 0; i < n_r; ++i) {
        double dot = 0.0;
        const double* c = centroids.row(i);
        for (size_t j = 0; j < u.size(); ++j) dot += u[j] * c[j];
        s[static_cast<size_t>(i)] = 1.0 / (1.0 + std::exp(-dot));
    }
    return s;
}

std::vector<int> route_topk(std::span<const double> s, std::span<const double> b, int k_r) {
    if (s.size() != b.size()) {
        throw DimensionError("route_topk: affinity size " + std::to_string(s.size()) +
                             " vs bias size " + std::to_string(b.size()));
    }
    if (k_r < 1 || k_r > static_cast<int>(s.size())) {
        throw ConfigError("route_topk: K_r " + std::to_string(k_r) + " out of range");
    }
    std::vector<int> ids(s.size());
    for (size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
    std::stable_sort(ids.begin(), ids.end(), [&](int a, int c) {
        const double sa = s[static_cast<size_t>(a)] + b[static_cast<size_t>(a)];
        const double sc = s[static_cast<size_t>(c)] + b[static_cast<size_t>(c)];
        if (sa != sc) return sa > sc;
        return a < c; // deterministic tie-break on lowest id
    });
    ids.resize(static_cast<size_t>(k_r));
    std::sort(ids.begin(), ids.end());
    return ids;
}

std::vector<double> gate_values(std::span<const double> s, std::span<const int> selected) {
    if (selected.empty()) throw UsageError("gate_values: empty selection");
    std::vector<double> g(s.size(), 0.0);
    double sum = 0.0;
    for (int i : selected) {
        if (i < 0 || i >= static_cast<int>(s.size())) {
            throw IndexError("gate_values: expert id " + std::to_string(i) + " out of range");
        }
        sum += s[static_cast<size_t>(i)];
    }
    if (sum == 0.0) {
        throw DegenerateGateError("gate_values: all selected affinities are zero");
    }
    for (int i : selected) g[static_cast<size_t>(i)] = s[static_cast<size_t>(i)] / sum;
    return g;
}

std::vector<double> expert_eval(const ExpertFFN& e, std::span<const double> u) {
    const int64_t d_ff = e.w1.value.shape[0], d = e.w1.value.shape[1];
    std::vector<double> hidden(static_cast<size_t>(d_ff));
    for (int64_t i = 0; i < d_ff; ++i) {
        double acc = 0.0;
        const double* w = e.w1.value.row(i);
        for (int64_t j = 0; j < d; ++j) acc += w[j] * u[static_cast<size_t>(j)];
        hidden[static_cast<size_t>(i)] = silu(acc);
    }
    std::vector<double> out(static_cast<size_t>(d));
    for (int64_t i = 0; i < d; ++i) {
        double acc = 0.0;
        const double* w = e.w2.value.row(i);
        for (int64_t j = 0; j < d_ff; ++j) acc += w[j] * hidden[static_cast<size_t>(j)];
        out[static_cast<size_t>(i)] = acc;
    }
    return out;
}

std::vector<double> moe_forward(std::span<const double> u, const MoEConfig& cfg,
                                const MoEParams& p, const ExpertBiasState& bias,
                                RoutingDecision* decision, MoEInstrumentation* instr) {
    cfg.validate();
    if (static_cast<int>(u.size()) != cfg.d) {
        throw DimensionError("moe_forward: token width " + std::to_string(u.size()) + " != d " +
                             std::to_string(cfg.d));
    }
    std::vector<double> s = affinity_scores(u, p.centroids.value);
    std::vector<int> selected = route_topk(s, bias.b, cfg.K_r);
    std::vector<double> g = gate_values(s, selected);

    std::vector<double> out(u.begin(), u.end());
    for (const ExpertFFN& e : p.shared) {
        std::vector<double> y = expert_eval(e, u);
        if (instr) ++instr->expert_evals;
        for (size_t j = 0; j < out.size(); ++j) out[j] += y[j];
    }
    for (int i : selected) {
        std::vector<double> y = expert_eval(p.routed[static_cast<size_t>(i)], u);
        if (instr) ++instr->expert_evals;
        const double gi = g[static_cast<size_t>(i)];
        for (size_t j = 0; j < out.size(); ++j) out[j] += gi * y[j];
    }
    if (decision) {
        decision->selected = selected;
        decision->affinity = std::move(s);
        decision->gate = std::move(g);
    }
    return out;
}

std::vector<int64_t> bias_update(ExpertBiasState& bias, std::span<const RoutingDecision> window) {
    if (window.empty()) throw UsageError("bias_update: empty window");
    const size_t n_r = bias.b.size();
    std::vector<int64_t> loads(n_r, 0);
    for (const RoutingDecision& d : window) {
        for (int i : d.selected) {
            if (i < 0 || static_cast<size_t>(i) >= n_r) {
                throw IndexError("bias_update: expert id out of range");
            }
            ++loads[static_cast<size_t>(i)];
        }
    }
    bias.load_counts = loads;
    bias.tokens_seen = static_cast<int64_t>(window.size());
    int64_t total = 0;
    for (int64_t l : loads) total += l;
    const double mean = static_cast<double>(total) / static_cast<double>(n_r);
    for (size_t i = 0; i < n_r; ++i) {
        const double li = static_cast<double>(loads[i]);
        if (li > mean) bias.b[i] -= bias.gamma;
        else if (li < mean) bias.b[i] += bias.gamma;
    }
    std::fill(bias.load_counts.begin(), bias.load_counts.end(), 0);
    bias.tokens_seen = 0;
    return loads;
}

} // namespace latentkit
