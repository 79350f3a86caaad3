#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "latentkit/param.hpp"
#include "latentkit/tensor.hpp"

namespace latentkit {

enum class AttnVariant { MHA, MQA, GQA, MLA };

std::string variant_name(AttnVariant v);
AttnVariant variant_from_name(const std::string& s);

// Dimensional parameters for one attention layer. For MLA, queries/keys are
// the concatenation of a d_h content part and a d_R rotary part; keys and
// values decompress from a shared d_c-wide latent.
struct AttnConfig {
    int d = 0;
    int n_h = 0;
    int d_h = 0;
    int d_c = 0;     // latent KV width (MLA)
    int d_cq = -1;   // latent query width; negative means "same as d_c"
    int d_R = 0;     // decoupled rope width
    int groups = 0;  // GQA group count
    AttnVariant variant = AttnVariant::MHA;
    double rope_base = 10000.0;

    int kv_groups() const;
    int q_latent() const { return d_cq < 0 ? d_c : d_cq; }
    double scale() const;
    void validate() const;

    bool operator==(const AttnConfig&) const = default;
};

// Per-token per-layer cache footprint of one attention variant.
struct KVCacheLayout {
    int64_t scalars_per_token_per_layer = 0;
    std::vector<std::pair<std::string, int64_t>> breakdown;
    int64_t tokens = 0;
    int64_t layers = 0;
    int64_t total_scalars() const { return scalars_per_token_per_layer * tokens * layers; }
};

struct AttnParams {
    // grouped variants
    Param wq; // [n_h*d_h x d]
    Param wk; // [g*d_h x d]
    Param wv; // [g*d_h x d]
    // MLA
    Param w_dq;  // [d_cq x d]
    Param w_uq;  // [n_h*d_h x d_cq]
    Param w_dkv; // [d_c x d]
    Param w_uk;  // [n_h*d_h x d_c]
    Param w_uv;  // [n_h*d_h x d_c]
    Param w_qr;  // [n_h*d_R x d_cq]
    Param w_kr;  // [d_R x d]
    // output projection (standard transformer; the formulation leaves it implicit)
    Param wo; // [d x n_h*d_h]

    static AttnParams init(const AttnConfig& cfg, Rng& rng, double stddev,
                           const std::string& prefix = "attn");
    std::vector<Param*> params(const AttnConfig& cfg);
};

// Forward intermediates kept alive for the training backward pass.
struct AttnCache {
    Tensor h;
    Tensor q, k, v; // grouped path
    Tensor cq, ckv, qc, kc, qr_pre, qr, kr_pre, kr; // MLA path
    std::vector<Tensor> probs; // per head, [T x T] lower triangle
    Tensor att; // concatenated head outputs before wo
    std::vector<int64_t> positions;
};

// Pairwise rotation of channel pairs (2j, 2j+1) by pos * base^(-2j/d_R).
Tensor rope_apply(const Tensor& x, std::span<const int64_t> positions, double rope_base);

// Causal self-attention over h [T x d]; any variant. Empty positions means
// 0..T-1. Pass a cache to retain intermediates for attn_backward.
Tensor attn_forward(const Tensor& h, const AttnConfig& cfg, const AttnParams& p,
                    AttnCache* cache = nullptr, std::span<const int64_t> positions = {});

Tensor mha_forward(const Tensor& h, const AttnConfig& cfg, const AttnParams& p);
Tensor gqa_forward(const Tensor& h, const AttnConfig& cfg, const AttnParams& p);
Tensor mla_forward(const Tensor& h, const AttnConfig& cfg, const AttnParams& p);

// Accumulates parameter grads, returns d(loss)/d(h).
Tensor attn_backward(const Tensor& d_out, const AttnConfig& cfg, AttnParams& p,
                     const AttnCache& cache);

KVCacheLayout kv_cache_scalars(const AttnConfig& cfg, int64_t tokens, int64_t layers);

// Incremental decode state for a stack of attention layers sharing one config.
// Single-owner mutable state: one cache per decoding stream.
struct DecodeCache {
    AttnConfig cfg;
    int64_t layers = 0;
    int64_t t = 0;
    struct Layer {
        std::vector<double> k, v;        // grouped: t rows of g*d_h
        std::vector<double> latent, kr;  // MLA: t rows of d_c / d_R
    };
    std::vector<Layer> layer;

    DecodeCache() = default;
    DecodeCache(const AttnConfig& c, int64_t n_layers);
    int64_t stored_scalars() const;
};

// Appends one token and returns the stack output at the new position. The
// MLA path stores only the compressed latent plus the shared rope key and
// re-applies the decompressions against the whole prefix each step.
std::vector<double> decode_step(DecodeCache& cache, std::span<const double> h_new,
                                const AttnConfig& cfg, std::span<const AttnParams> layer_params);

} // namespace latentkit
