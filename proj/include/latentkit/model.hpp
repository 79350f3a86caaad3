#pragma once

#include <span>
#include <vector>

#include "latentkit/attention.hpp"
#include "latentkit/moe.hpp"
#include "latentkit/param.hpp"
#include "latentkit/tensor.hpp"

// Trainable blocks with hand-written backward passes. Each layer caches the
// forward intermediates it needs; there is no autodiff graph. Every backward
// is validated against finite differences in the test suite.
namespace latentkit {

struct LinearLayer {
    Param w; // [out x in]
    Tensor forward(const Tensor& x) const { return matmul_nt(x, w.value); }
    // accumulates w.grad, returns dx
    Tensor backward(const Tensor& dy, const Tensor& x) {
        add_inplace(w.grad, matmul_tn(dy, x));
        return matmul(dy, w.value);
    }
};

struct RMSNormLayer {
    Param gain;
    double eps = 1e-6;
    struct Cache {
        Tensor x;
        std::vector<double> inv; // per row 1/sqrt(mean(x^2)+eps)
    };
    Tensor forward(const Tensor& x, Cache* c) const;
    Tensor backward(const Tensor& dy, const Cache& c);
};

struct FFNLayer {
    Param w1; // [d_ff x d]
    Param w2; // [d x d_ff]
    struct Cache {
        Tensor x, pre, hidden;
    };
    Tensor forward(const Tensor& x, Cache* c) const;
    Tensor backward(const Tensor& dy, const Cache& c);
};

// MoE core without the residual term; the block adds its own residual.
// Selection is treated as fixed during backward, gradients flow through the
// gate magnitudes, the centroids, and the evaluated experts.
struct MoELayer {
    MoEConfig cfg;
    MoEParams p;
    ExpertBiasState bias;

    struct TokenCache {
        std::vector<double> u, s, g;
        std::vector<int> selected;
        std::vector<std::vector<double>> pre, hidden, y; // per evaluated routed expert
        std::vector<std::vector<double>> s_pre, s_hidden; // per shared expert
    };
    struct Cache {
        std::vector<TokenCache> tok;
    };

    Tensor forward(const Tensor& x, Cache* c, std::vector<RoutingDecision>* decisions = nullptr,
                   MoEInstrumentation* instr = nullptr) const;
    Tensor backward(const Tensor& dy, const Cache& c);
    std::vector<Param*> params() { return p.params(); }
};

struct TransformerBlock {
    AttnConfig acfg;
    AttnParams attn;
    RMSNormLayer norm1, norm2;
    bool use_moe = false;
    FFNLayer ffn;
    MoELayer moe;

    struct Cache {
        RMSNormLayer::Cache n1, n2;
        AttnCache att;
        FFNLayer::Cache ffn;
        MoELayer::Cache moe;
    };

    static TransformerBlock init(const AttnConfig& acfg, int d_ff, Rng& rng, double stddev,
                                 const std::string& prefix);
    static TransformerBlock init_moe(const AttnConfig& acfg, const MoEConfig& mcfg, Rng& rng,
                                     double stddev, const std::string& prefix);

    Tensor forward(const Tensor& x, Cache* c, std::vector<RoutingDecision>* decisions = nullptr) const;
    Tensor backward(const Tensor& dy, const Cache& c);
    std::vector<Param*> params();
};

struct LMConfig {
    int vocab = 0;
    int d = 0;
    int n_layers = 1;
    int d_ff = 0;
    AttnConfig attn;
    bool use_moe = false;
    MoEConfig moe;
    double init_std = 0.08;
    double rms_eps = 1e-6;
};

// Small causal LM: embedding -> blocks -> final norm -> output head.
struct TinyLM {
    LMConfig cfg;
    Param emb;      // [V x d]
    std::vector<TransformerBlock> blocks;
    RMSNormLayer final_norm;
    Param out_head; // [V x d]

    struct Cache {
        std::vector<int> tokens;
        std::vector<TransformerBlock::Cache> blk;
        RMSNormLayer::Cache fin;
        Tensor hidden; // post final norm [T x d]
        std::vector<std::vector<RoutingDecision>> routing; // per block, token order
    };

    static TinyLM init(const LMConfig& cfg, Rng& rng);

    // hidden states after the final norm; shared by the LM head and by the
    // depth modules stacked on top
    Tensor forward_hidden(std::span<const int> tokens, Cache* c = nullptr) const;
    Tensor logits_from_hidden(const Tensor& hidden) const;
    Tensor forward_logits(std::span<const int> tokens, Cache* c = nullptr) const;

    // both accumulate grads; backward_logits routes through the output head
    void backward_hidden(const Tensor& dh, const Cache& c);
    void backward_logits(const Tensor& dlogits, const Cache& c);

    std::vector<Param*> params();

    // log p(tokens[i] | tokens[..i]) for i in [start, size)
    std::vector<double> token_logprobs(std::span<const int> tokens, size_t start) const;
};

struct SampleResult {
    std::vector<int> tokens;       // generated tokens, prompt excluded
    std::vector<double> logp;      // model log-prob of each generated token
    bool truncated = false;
};

// Autoregressive sampling; temperature <= 0 means argmax with lowest-id ties.
// Recorded log-probs are the model's own (temperature does not rescale them).
SampleResult sample_sequence(const TinyLM& model, std::span<const int> prompt, int max_new,
                             double temperature, int stop_token, Rng& rng);

// Plain next-token training step (mean CE over predicted positions, mean over
// the batch); returns the loss before the update.
double lm_train_step(TinyLM& model, AdamOpt& opt, std::span<const std::vector<int>> batch);

} // namespace latentkit
