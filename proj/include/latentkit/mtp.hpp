#pragma once

#include <span>
#include <vector>

#include "latentkit/model.hpp"

namespace latentkit {

struct MTPConfig {
    int D = 1;          // prediction depth
    double lambda = 0.3;
    // divide depth losses by the valid-position count instead of the full
    // sequence length; off by default
    bool normalize_by_valid = false;
    void validate() const;
};

// Depth-k hidden states. Slot s parameterizes the prediction of the token at
// sequence index s + k + 1 (0-based): module k sees the depth-(k-1) state and
// the ground-truth embedding of the token at s + k, so a sequence of length T
// leaves T - k - 1 valid slots.
struct DepthState {
    int k = 0;
    int seq_len = 0;
    int valid = 0;
    Tensor h; // [valid x d]; default-empty when valid == 0
};

// One prediction module: projection of the concatenated normalized inputs
// back to width d, then a transformer block over the depth sequence.
struct MTPModule {
    RMSNormLayer norm_prev, norm_emb;
    LinearLayer proj; // [d x 2d]
    TransformerBlock trm;

    struct Cache {
        RMSNormLayer::Cache n_prev, n_emb;
        Tensor concat;            // [valid x 2d]
        TransformerBlock::Cache trm;
        std::vector<int> emb_tokens;
        Tensor prev_rows;
    };
};

// Main model plus D sequential prediction modules. Embedding and output head
// are the trunk's own tensors; the modules alias them.
struct MTPModel {
    TinyLM trunk;
    MTPConfig mcfg;
    std::vector<MTPModule> modules;

    static MTPModel init(const LMConfig& lm_cfg, const MTPConfig& mcfg, Rng& rng);
    std::vector<Param*> params();
};

// Depth-0 state from the trunk's hidden states: the first T-1 rows.
DepthState mtp_depth0(const Tensor& trunk_hidden);

// Runs module prev.k + 1. A sequence too short for any valid position yields
// an empty state, not an error.
DepthState mtp_module_forward(MTPModel& model, const DepthState& prev,
                              std::span<const int> tokens, MTPModule::Cache* cache = nullptr);

// L^k = (1/T) sum over valid slots of cross-entropy at the shared head.
double mtp_depth_loss(const MTPModel& model, const DepthState& state,
                      std::span<const int> targets);

// (lambda / D) * sum_k L^k
double mtp_total_loss(std::span<const double> depth_losses, const MTPConfig& cfg);

struct MTPReport {
    double main_loss = 0.0;
    std::vector<double> depth_losses;
    double mtp_loss = 0.0;
    double total = 0.0;
    // trunk routing decisions per block, gathered on gradient passes when the
    // trunk uses MoE blocks; feeds bias updates and load histograms
    std::vector<std::vector<RoutingDecision>> routing;
};

// Forward-only objective over a batch (mean over sequences).
MTPReport mtp_objective(MTPModel& model, std::span<const std::vector<int>> batch);

// Same pass but accumulating parameter gradients.
MTPReport mtp_loss_and_grads(MTPModel& model, std::span<const std::vector<int>> batch);

// One optimizer step on main next-token loss + L_MTP.
MTPReport mtp_train_step(MTPModel& model, AdamOpt& opt, std::span<const std::vector<int>> batch);

} // namespace latentkit
