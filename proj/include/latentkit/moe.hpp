#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "latentkit/param.hpp"
#include "latentkit/tensor.hpp"

namespace latentkit {

struct MoEConfig {
    int N_s = 0;  // shared experts, always active
    int N_r = 0;  // routed experts
    int K_r = 0;  // routed top-k
    int d = 0;
    int d_ff = 0;
    void validate() const;
    bool operator==(const MoEConfig&) const = default;
};

// Two-layer expert with a SiLU hidden nonlinearity.
struct ExpertFFN {
    Param w1; // [d_ff x d]
    Param w2; // [d x d_ff]
};

struct MoEParams {
    Param centroids; // [N_r x d]
    std::vector<ExpertFFN> shared;
    std::vector<ExpertFFN> routed;

    static MoEParams init(const MoEConfig& cfg, Rng& rng, double stddev,
                          const std::string& prefix = "moe");
    std::vector<Param*> params();
};

// Additive routing bias, adapted from observed load instead of an auxiliary
// loss term. Single-writer: bias_update is the only mutation point.
struct ExpertBiasState {
    std::vector<double> b;
    double gamma = 0.001;
    std::vector<int64_t> load_counts;
    int64_t tokens_seen = 0;

    ExpertBiasState() = default;
    explicit ExpertBiasState(int n_r, double step = 0.001)
        : b(static_cast<size_t>(n_r), 0.0), gamma(step),
          load_counts(static_cast<size_t>(n_r), 0) {}
};

struct RoutingDecision {
    int64_t token = 0;
    std::vector<int> selected;      // expert ids, size K_r
    std::vector<double> affinity;   // s, size N_r
    std::vector<double> gate;       // g, size N_r, zero outside selected
};

struct MoEInstrumentation {
    int64_t expert_evals = 0;
};

// s_i = sigmoid(<u, centroid_i>)
std::vector<double> affinity_scores(std::span<const double> u, const Tensor& centroids);

// Top K_r indices by s_i + b_i, ties broken by lowest expert id.
std::vector<int> route_topk(std::span<const double> s, std::span<const double> b, int k_r);

// g'_i = s_i if selected else 0; g = g' / sum(g'). Bias steers selection only,
// never the gate magnitudes.
std::vector<double> gate_values(std::span<const double> s, std::span<const int> selected);

// h' = u + sum_shared FFN(u) + sum_selected g_i FFN_i(u). Only the selected
// routed experts are evaluated.
std::vector<double> moe_forward(std::span<const double> u, const MoEConfig& cfg,
                                const MoEParams& p, const ExpertBiasState& bias,
                                RoutingDecision* decision = nullptr,
                                MoEInstrumentation* instr = nullptr);

// Sign-of-deviation rule: overloaded experts lose gamma, underloaded gain it.
// Returns the window loads; the state's running tallies are reset.
std::vector<int64_t> bias_update(ExpertBiasState& bias, std::span<const RoutingDecision> window);

// Expert FFN evaluated alone (shared path, gate 1).
std::vector<double> expert_eval(const ExpertFFN& e, std::span<const double> u);

double silu(double z);

} // namespace latentkit
