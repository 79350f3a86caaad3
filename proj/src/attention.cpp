#include "latentkit/attention.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>

namespace latentkit {

namespace {

std::atomic<bool> warned_weak_compression{false};

std::vector<int64_t> iota_positions(int64_t n) {
    std::vector<int64_t> p(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
    return p;
}

// y = W x, W is [out x in] row-major.
void matvec(const Tensor& w, const double* x, double* y) {
    const int64_t out = w.shape[0], in = w.shape[1];
    for (int64_t i = 0; i < out; ++i) {
        double acc = 0.0;
        const double* wr = w.row(i);
        for (int64_t j = 0; j < in; ++j) acc += wr[j] * x[j];
        y[i] = acc;
    }
}

// In-place rotation of pair channels; sign -1 undoes a rotation.
void rope_rotate_block(double* x, int64_t width, int64_t pos, double base, double sign) {
    for (int64_t j = 0; j * 2 < width; ++j) {
        const double theta =
            sign * static_cast<double>(pos) * std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(width));
        const double c = std::cos(theta), s = std::sin(theta);
        const double x0 = x[2 * j], x1 = x[2 * j + 1];
        x[2 * j] = x0 * c - x1 * s;
        x[2 * j + 1] = x0 * s + x1 * c;
    }
}

// Applies rope per head block; n_heads == 1 covers the shared key.
Tensor rope_heads(const Tensor& x, int n_heads, std::span<const int64_t> positions, double base,
                  double sign) {
    const int64_t t_len = x.shape[0];
    const int64_t width = x.shape[1] / n_heads;
    Tensor y = x;
    for (int64_t t = 0; t < t_len; ++t) {
        for (int hd = 0; hd < n_heads; ++hd) {
            rope_rotate_block(y.row(t) + hd * width, width, positions[static_cast<size_t>(t)],
                              base, sign);
        }
    }
    return y;
}

// Row-wise causal softmax over columns 0..t; columns above t stay zero.
void causal_softmax_inplace(Tensor& scores) {
    const int64_t t_len = scores.shape[0];
    for (int64_t t = 0; t < t_len; ++t) {
        double* row = scores.row(t);
        double mx = row[0];
        for (int64_t s = 1; s <= t; ++s) mx = std::max(mx, row[s]);
        double sum = 0.0;
        for (int64_t s = 0; s <= t; ++s) {
            row[s] = std::exp(row[s] - mx);
            sum += row[s];
        }
        for (int64_t s = 0; s <= t; ++s) row[s] /= sum;
        for (int64_t s = t + 1; s < scores.shape[1]; ++s) row[s] = 0.0;
    }
}

} // namespace

std::string variant_name(AttnVariant v) {
    switch (v) {
        case AttnVariant::MHA: return "MHA";
        case AttnVariant::MQA: return "MQA";
        case AttnVariant::GQA: return "GQA";
        case AttnVariant::MLA: return "MLA";
    }
    return "?";
}

AttnVariant variant_from_name(const std::string& s) {
    if (s == "MHA" || s == "mha") return AttnVariant::MHA;
    if (s == "MQA" || s == "mqa") return AttnVariant::MQA;
    if (s == "GQA" || s == "gqa") return AttnVariant::GQA;
    if (s == "MLA" || s == "mla") return AttnVariant::MLA;
    throw ConfigError("unknown attention variant '" + s + "'");
}

int AttnConfig::kv_groups() const {
    switch (variant) {
        case AttnVariant::MHA: return n_h;
        case AttnVariant::MQA: return 1;
        case AttnVariant::GQA: return groups;
        case AttnVariant::MLA: return 0;
    }
    return 0;
}

double AttnConfig::scale() const {
    const int width = variant == AttnVariant::MLA ? d_h + d_R : d_h;
    return 1.0 / std::sqrt(static_cast<double>(width));
}

void AttnConfig::validate() const {
    if (d < 1 || n_h < 1 || d_h < 1) throw ConfigError("attn config: d, n_h, d_h must be >= 1");
    if (variant == AttnVariant::GQA) {
        if (groups < 1 || n_h % groups != 0) {
            throw ConfigError("attn config: GQA groups " + std::to_string(groups) +
                              " must divide n_h " + std::to_string(n_h));
        }
    }
    if (variant == AttnVariant::MLA) {
        if (d_c < 1) throw ConfigError("attn config: MLA requires d_c >= 1");
        if (d_c >= n_h * d_h) {
            throw ConfigError("attn config: d_c " + std::to_string(d_c) +
                              " must be strictly below n_h*d_h " + std::to_string(n_h * d_h));
        }
        if (d_R % 2 != 0 || d_R < 0) {
            throw ConfigError("attn config: rope width d_R must be even, got " +
                              std::to_string(d_R));
        }
        if (d_c > n_h * d_h / 4 && !warned_weak_compression.exchange(true)) {
            std::fprintf(stderr,
                         "latentkit: warning: d_c=%d above (n_h*d_h)/4=%d, weak compression\n",
                         d_c, n_h * d_h / 4);
        }
    }
}

AttnParams AttnParams::init(const AttnConfig& cfg, Rng& rng, double stddev,
                            const std::string& prefix) {
    cfg.validate();
    AttnParams p;
    const int64_t d = cfg.d, hd = static_cast<int64_t>(cfg.n_h) * cfg.d_h;
    if (cfg.variant == AttnVariant::MLA) {
        const int64_t dcq = cfg.q_latent();
        p.w_dq = Param::randn(prefix + ".w_dq", {dcq, d}, rng, stddev);
        p.w_uq = Param::randn(prefix + ".w_uq", {hd, dcq}, rng, stddev);
        p.w_dkv = Param::randn(prefix + ".w_dkv", {cfg.d_c, d}, rng, stddev);
        p.w_uk = Param::randn(prefix + ".w_uk", {hd, cfg.d_c}, rng, stddev);
        p.w_uv = Param::randn(prefix + ".w_uv", {hd, cfg.d_c}, rng, stddev);
        if (cfg.d_R > 0) {
            p.w_qr = Param::randn(prefix + ".w_qr", {static_cast<int64_t>(cfg.n_h) * cfg.d_R, dcq},
                                  rng, stddev);
            p.w_kr = Param::randn(prefix + ".w_kr", {cfg.d_R, d}, rng, stddev);
        }
    } else {
        const int64_t gd = static_cast<int64_t>(cfg.kv_groups()) * cfg.d_h;
        p.wq = Param::randn(prefix + ".wq", {hd, d}, rng, stddev);
        p.wk = Param::randn(prefix + ".wk", {gd, d}, rng, stddev);
        p.wv = Param::randn(prefix + ".wv", {gd, d}, rng, stddev);
    }
    p.wo = Param::randn(prefix + ".wo", {d, hd}, rng, stddev);
    return p;
}

std::vector<Param*> AttnParams::params(const AttnConfig& cfg) {
    std::vector<Param*> out;
    if (cfg.variant == AttnVariant::MLA) {
        out = {&w_dq, &w_uq, &w_dkv, &w_uk, &w_uv};
        if (cfg.d_R > 0) {
            out.push_back(&w_qr);
            out.push_back(&w_kr);
        }
    } else {
        out = {&wq, &wk, &wv};
    }
    out.push_back(&wo);
    return out;
}

Tensor rope_apply(const Tensor& x, std::span<const int64_t> positions, double rope_base) {
    if (x.rank() != 2) throw DimensionError("rope_apply: expected [T x d_R], got " + x.shape_str());
    if (x.shape[1] % 2 != 0) {
        throw ConfigError("rope_apply: odd rotary width " + std::to_string(x.shape[1]));
    }
    if (static_cast<int64_t>(positions.size()) != x.shape[0]) {
        throw DimensionError("rope_apply: " + std::to_string(positions.size()) +
                             " positions for " + x.shape_str());
    }
    for (int64_t p : positions) {
        if (p < 0) throw IndexError("rope_apply: negative position");
    }
    return rope_heads(x, 1, positions, rope_base, 1.0);
}

Tensor attn_forward(const Tensor& h, const AttnConfig& cfg, const AttnParams& p, AttnCache* cache,
                    std::span<const int64_t> positions) {
    cfg.validate();
    if (h.rank() != 2 || h.shape[1] != cfg.d) {
        throw DimensionError("attn_forward: input " + h.shape_str() + " does not match d=" +
                             std::to_string(cfg.d));
    }
    const int64_t t_len = h.shape[0];
    const int n_h = cfg.n_h, d_h = cfg.d_h, d_r = cfg.variant == AttnVariant::MLA ? cfg.d_R : 0;
    const double sc = cfg.scale();

    std::vector<int64_t> pos_store;
    if (positions.empty()) {
        pos_store = iota_positions(t_len);
        positions = pos_store;
    }

    Tensor q, k, v, cq, ckv, qr, kr, qr_pre, kr_pre;
    int kv_g = 1;
    if (cfg.variant == AttnVariant::MLA) {
        cq = matmul_nt(h, p.w_dq.value);    // [T x d_cq]
        ckv = matmul_nt(h, p.w_dkv.value);  // [T x d_c]
        q = matmul_nt(cq, p.w_uq.value);    // [T x n_h*d_h]
        k = matmul_nt(ckv, p.w_uk.value);
        v = matmul_nt(ckv, p.w_uv.value);
        if (d_r > 0) {
            qr_pre = matmul_nt(cq, p.w_qr.value); // [T x n_h*d_R]
            qr = rope_heads(qr_pre, n_h, positions, cfg.rope_base, 1.0);
            kr_pre = matmul_nt(h, p.w_kr.value);  // [T x d_R]
            kr = rope_heads(kr_pre, 1, positions, cfg.rope_base, 1.0);
        }
        kv_g = n_h; // decompressed keys/values are per-head
    } else {
        q = matmul_nt(h, p.wq.value);
        k = matmul_nt(h, p.wk.value);
        v = matmul_nt(h, p.wv.value);
        kv_g = cfg.kv_groups();
    }

    const int heads_per_group = n_h / kv_g;
    Tensor att({t_len, static_cast<int64_t>(n_h) * d_h});
    std::vector<Tensor> probs(static_cast<size_t>(n_h));
    for (int i = 0; i < n_h; ++i) probs[static_cast<size_t>(i)] = Tensor({t_len, t_len});

#pragma omp parallel for schedule(static)
    for (int i = 0; i < n_h; ++i) {
        const int g = i / heads_per_group;
        Tensor& pr = probs[static_cast<size_t>(i)];
        for (int64_t t = 0; t < t_len; ++t) {
            const double* qrow = q.row(t) + static_cast<int64_t>(i) * d_h;
            for (int64_t s = 0; s <= t; ++s) {
                const double* krow = k.row(s) + static_cast<int64_t>(g) * d_h;
                double acc = 0.0;
                for (int j = 0; j < d_h; ++j) acc += qrow[j] * krow[j];
                if (d_r > 0) {
                    const double* qro = qr.row(t) + static_cast<int64_t>(i) * d_r;
                    const double* kro = kr.row(s);
                    for (int j = 0; j < d_r; ++j) acc += qro[j] * kro[j];
                }
                pr.at(t, s) = acc * sc;
            }
        }
        causal_softmax_inplace(pr);
        for (int64_t t = 0; t < t_len; ++t) {
            double* orow = att.row(t) + static_cast<int64_t>(i) * d_h;
            for (int j = 0; j < d_h; ++j) orow[j] = 0.0;
            for (int64_t s = 0; s <= t; ++s) {
                const double w = pr.at(t, s);
                const double* vrow = v.row(s) + static_cast<int64_t>(g) * d_h;
                for (int j = 0; j < d_h; ++j) orow[j] += w * vrow[j];
            }
        }
    }

    Tensor out = matmul_nt(att, p.wo.value);

    if (cache) {
        cache->h = h;
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->cq = std::move(cq);
        cache->ckv = std::move(ckv);
        cache->qr_pre = std::move(qr_pre);
        cache->qr = std::move(qr);
        cache->kr_pre = std::move(kr_pre);
        cache->kr = std::move(kr);
        cache->probs = std::move(probs);
        cache->att = std::move(att);
        cache->positions.assign(positions.begin(), positions.end());
    }
    return out;
}

Tensor mha_forward(const Tensor& h, const AttnConfig& cfg, const AttnParams& p) {
    if (cfg.variant != AttnVariant::MHA) throw ConfigError("mha_forward: variant is not MHA");
    return attn_forward(h, cfg, p);
}

Tensor gqa_forward(const Tensor& h, const AttnConfig& cfg, const AttnParams& p) {
    if (cfg.variant != AttnVariant::GQA && cfg.variant != AttnVariant::MQA) {
        throw ConfigError("gqa_forward: variant is not GQA/MQA");
    }
    return attn_forward(h, cfg, p);
}

Tensor mla_forward(const Tensor& h, const AttnConfig& cfg, const AttnParams& p) {
    if (cfg.variant != AttnVariant::MLA) throw ConfigError("mla_forward: variant is not MLA");
    return attn_forward(h, cfg, p);
}

Tensor attn_backward(const Tensor& d_out, const AttnConfig& cfg, AttnParams& p,
                     const AttnCache& cache) {
    const int64_t t_len = d_out.shape[0];
    const int n_h = cfg.n_h, d_h = cfg.d_h, d_r = cfg.variant == AttnVariant::MLA ? cfg.d_R : 0;
    const bool mla = cfg.variant == AttnVariant::MLA;
    const int kv_g = mla ? n_h : cfg.kv_groups();
    const int heads_per_group = n_h / kv_g;
    const double sc = cfg.scale();
    std::span<const int64_t> positions(cache.positions);

    // out = att wo^T
    Tensor d_att = matmul(d_out, p.wo.value);
    add_inplace(p.wo.grad, matmul_tn(d_out, cache.att));

    Tensor dq({t_len, static_cast<int64_t>(n_h) * d_h});
    Tensor dk(cache.k.shape);
    Tensor dv(cache.v.shape);
    Tensor dqr, dkr;
    if (d_r > 0) {
        dqr = Tensor(cache.qr.shape);
        dkr = Tensor(cache.kr.shape);
    }

    // heads write disjoint dq/dqr slices; grouped dk/dv and shared dkr need
    // accumulation across heads, so the head loop stays serial
    std::vector<double> dscore(static_cast<size_t>(t_len));
    for (int i = 0; i < n_h; ++i) {
        const int g = i / heads_per_group;
        const Tensor& pr = cache.probs[static_cast<size_t>(i)];
        for (int64_t t = 0; t < t_len; ++t) {
            const double* drow = d_att.row(t) + static_cast<int64_t>(i) * d_h;
            // dP[t,s] = d_att . v_s ; dV_s += P[t,s] d_att
            double dot_pp = 0.0;
            for (int64_t s = 0; s <= t; ++s) {
                const double* vrow = cache.v.row(s) + static_cast<int64_t>(g) * d_h;
                double dp = 0.0;
                for (int j = 0; j < d_h; ++j) dp += drow[j] * vrow[j];
                dscore[static_cast<size_t>(s)] = dp;
                dot_pp += dp * pr.at(t, s);
                double* dvrow = dv.row(s) + static_cast<int64_t>(g) * d_h;
                const double w = pr.at(t, s);
                for (int j = 0; j < d_h; ++j) dvrow[j] += w * drow[j];
            }
            // softmax backward, then scale
            for (int64_t s = 0; s <= t; ++s) {
                const double ds = pr.at(t, s) * (dscore[static_cast<size_t>(s)] - dot_pp) * sc;
                const double* krow = cache.k.row(s) + static_cast<int64_t>(g) * d_h;
                const double* qrow = cache.q.row(t) + static_cast<int64_t>(i) * d_h;
                double* dqrow = dq.row(t) + static_cast<int64_t>(i) * d_h;
                double* dkrow = dk.row(s) + static_cast<int64_t>(g) * d_h;
                for (int j = 0; j < d_h; ++j) {
                    dqrow[j] += ds * krow[j];
                    dkrow[j] += ds * qrow[j];
                }
                if (d_r > 0) {
                    const double* qro = cache.qr.row(t) + static_cast<int64_t>(i) * d_r;
                    const double* kro = cache.kr.row(s);
                    double* dqro = dqr.row(t) + static_cast<int64_t>(i) * d_r;
                    double* dkro = dkr.row(s);
                    for (int j = 0; j < d_r; ++j) {
                        dqro[j] += ds * kro[j];
                        dkro[j] += ds * qro[j];
                    }
                }
            }
        }
    }

    Tensor dh({t_len, cfg.d});
    if (mla) {
        // rope backward: rotate grads by the negated angle
        Tensor dcq = matmul(dq, p.w_uq.value);
        add_inplace(p.w_uq.grad, matmul_tn(dq, cache.cq));
        Tensor dckv = matmul(dk, p.w_uk.value);
        add_inplace(p.w_uk.grad, matmul_tn(dk, cache.ckv));
        add_inplace(dckv, matmul(dv, p.w_uv.value));
        add_inplace(p.w_uv.grad, matmul_tn(dv, cache.ckv));
        if (d_r > 0) {
            Tensor dqr_pre = rope_heads(dqr, n_h, positions, cfg.rope_base, -1.0);
            Tensor dkr_pre = rope_heads(dkr, 1, positions, cfg.rope_base, -1.0);
            add_inplace(dcq, matmul(dqr_pre, p.w_qr.value));
            add_inplace(p.w_qr.grad, matmul_tn(dqr_pre, cache.cq));
            add_inplace(dh, matmul(dkr_pre, p.w_kr.value));
            add_inplace(p.w_kr.grad, matmul_tn(dkr_pre, cache.h));
        }
        add_inplace(dh, matmul(dcq, p.w_dq.value));
        add_inplace(p.w_dq.grad, matmul_tn(dcq, cache.h));
        add_inplace(dh, matmul(dckv, p.w_dkv.value));
        add_inplace(p.w_dkv.grad, matmul_tn(dckv, cache.h));
    } else {
        add_inplace(dh, matmul(dq, p.wq.value));
        add_inplace(p.wq.grad, matmul_tn(dq, cache.h));
        add_inplace(dh, matmul(dk, p.wk.value));
        add_inplace(p.wk.grad, matmul_tn(dk, cache.h));
        add_inplace(dh, matmul(dv, p.wv.value));
        add_inplace(p.wv.grad, matmul_tn(dv, cache.h));
    }
    return dh;
}

KVCacheLayout kv_cache_scalars(const AttnConfig& cfg, int64_t tokens, int64_t layers) {
    if (tokens < 1 || layers < 1) throw UsageError("kv_cache_scalars: tokens and layers must be >= 1");
    cfg.validate();
    KVCacheLayout lay;
    lay.tokens = tokens;
    lay.layers = layers;
    const int64_t d_h = cfg.d_h;
    switch (cfg.variant) {
        case AttnVariant::MHA:
            lay.breakdown = {{"full-K", cfg.n_h * d_h}, {"full-V", cfg.n_h * d_h}};
            break;
        case AttnVariant::GQA:
            lay.breakdown = {{"group-K", cfg.groups * d_h}, {"group-V", cfg.groups * d_h}};
            break;
        case AttnVariant::MQA:
            lay.breakdown = {{"shared-K", d_h}, {"shared-V", d_h}};
            break;
        case AttnVariant::MLA:
            lay.breakdown = {{"compressed-latent", cfg.d_c}, {"rope-key", cfg.d_R}};
            break;
    }
    for (auto& [name, n] : lay.breakdown) lay.scalars_per_token_per_layer += n;
    return lay;
}

DecodeCache::DecodeCache(const AttnConfig& c, int64_t n_layers) : cfg(c), layers(n_layers) {
    cfg.validate();
    if (n_layers < 1) throw UsageError("decode cache: layers must be >= 1");
    layer.resize(static_cast<size_t>(n_layers));
}

int64_t DecodeCache::stored_scalars() const {
    int64_t n = 0;
    for (const Layer& l : layer) {
        n += static_cast<int64_t>(l.k.size() + l.v.size() + l.latent.size() + l.kr.size());
    }
    return n;
}

std::vector<double> decode_step(DecodeCache& cache, std::span<const double> h_new,
                                const AttnConfig& cfg, std::span<const AttnParams> layer_params) {
    if (!(cache.cfg == cfg)) throw CacheError("decode_step: cache built with a different config");
    if (static_cast<int64_t>(layer_params.size()) != cache.layers) {
        throw CacheError("decode_step: expected " + std::to_string(cache.layers) +
                         " layer params, got " + std::to_string(layer_params.size()));
    }
    if (static_cast<int64_t>(h_new.size()) != cfg.d) {
        throw DimensionError("decode_step: input width " + std::to_string(h_new.size()) +
                             " != d " + std::to_string(cfg.d));
    }
    const int n_h = cfg.n_h, d_h = cfg.d_h;
    const int d_r = cfg.variant == AttnVariant::MLA ? cfg.d_R : 0;
    const double sc = cfg.scale();
    const int64_t pos = cache.t;
    const int64_t hd = static_cast<int64_t>(n_h) * d_h;

    std::vector<double> x(h_new.begin(), h_new.end());
    for (int64_t li = 0; li < cache.layers; ++li) {
        const AttnParams& p = layer_params[static_cast<size_t>(li)];
        DecodeCache::Layer& L = cache.layer[static_cast<size_t>(li)];
        std::vector<double> att(static_cast<size_t>(hd), 0.0);

        if (cfg.variant == AttnVariant::MLA) {
            const int64_t dcq = cfg.q_latent();
            std::vector<double> cq(static_cast<size_t>(dcq));
            matvec(p.w_dq.value, x.data(), cq.data());
            std::vector<double> latent(static_cast<size_t>(cfg.d_c));
            matvec(p.w_dkv.value, x.data(), latent.data());
            L.latent.insert(L.latent.end(), latent.begin(), latent.end());
            std::vector<double> q(static_cast<size_t>(hd));
            matvec(p.w_uq.value, cq.data(), q.data());
            std::vector<double> q_r;
            if (d_r > 0) {
                q_r.resize(static_cast<size_t>(n_h) * d_r);
                matvec(p.w_qr.value, cq.data(), q_r.data());
                for (int i = 0; i < n_h; ++i)
                    rope_rotate_block(q_r.data() + static_cast<int64_t>(i) * d_r, d_r, pos,
                                      cfg.rope_base, 1.0);
                std::vector<double> kr(static_cast<size_t>(d_r));
                matvec(p.w_kr.value, x.data(), kr.data());
                rope_rotate_block(kr.data(), d_r, pos, cfg.rope_base, 1.0);
                L.kr.insert(L.kr.end(), kr.begin(), kr.end());
            }
            // decompress every cached latent; only the latent is stored
            const int64_t t_tot = pos + 1;
            std::vector<double> keys(static_cast<size_t>(t_tot * hd));
            std::vector<double> vals(static_cast<size_t>(t_tot * hd));
            for (int64_t s = 0; s < t_tot; ++s) {
                matvec(p.w_uk.value, L.latent.data() + s * cfg.d_c, keys.data() + s * hd);
                matvec(p.w_uv.value, L.latent.data() + s * cfg.d_c, vals.data() + s * hd);
            }
            std::vector<double> scores(static_cast<size_t>(t_tot));
            for (int i = 0; i < n_h; ++i) {
                for (int64_t s = 0; s < t_tot; ++s) {
                    double acc = 0.0;
                    const double* krow = keys.data() + s * hd + static_cast<int64_t>(i) * d_h;
                    const double* qrow = q.data() + static_cast<int64_t>(i) * d_h;
                    for (int j = 0; j < d_h; ++j) acc += qrow[j] * krow[j];
                    if (d_r > 0) {
                        const double* kro = L.kr.data() + s * d_r;
                        const double* qro = q_r.data() + static_cast<int64_t>(i) * d_r;
                        for (int j = 0; j < d_r; ++j) acc += qro[j] * kro[j];
                    }
                    scores[static_cast<size_t>(s)] = acc * sc;
                }
                double mx = scores[0];
                for (int64_t s = 1; s < t_tot; ++s) mx = std::max(mx, scores[static_cast<size_t>(s)]);
                double sum = 0.0;
                for (int64_t s = 0; s < t_tot; ++s) {
                    scores[static_cast<size_t>(s)] = std::exp(scores[static_cast<size_t>(s)] - mx);
                    sum += scores[static_cast<size_t>(s)];
                }
                double* orow = att.data() + static_cast<int64_t>(i) * d_h;
                for (int64_t s = 0; s < t_tot; ++s) {
                    const double w = scores[static_cast<size_t>(s)] / sum;
                    const double* vrow = vals.data() + s * hd + static_cast<int64_t>(i) * d_h;
                    for (int j = 0; j < d_h; ++j) orow[j] += w * vrow[j];
                }
            }
        } else {
            const int kv_g = cfg.kv_groups();
            const int heads_per_group = n_h / kv_g;
            const int64_t gd = static_cast<int64_t>(kv_g) * d_h;
            std::vector<double> q(static_cast<size_t>(hd)), krow(static_cast<size_t>(gd)),
                vrow(static_cast<size_t>(gd));
            matvec(p.wq.value, x.data(), q.data());
            matvec(p.wk.value, x.data(), krow.data());
            matvec(p.wv.value, x.data(), vrow.data());
            L.k.insert(L.k.end(), krow.begin(), krow.end());
            L.v.insert(L.v.end(), vrow.begin(), vrow.end());
            const int64_t t_tot = pos + 1;
            std::vector<double> scores(static_cast<size_t>(t_tot));
            for (int i = 0; i < n_h; ++i) {
                const int g = i / heads_per_group;
                for (int64_t s = 0; s < t_tot; ++s) {
                    double acc = 0.0;
                    const double* ks = L.k.data() + s * gd + static_cast<int64_t>(g) * d_h;
                    const double* qrow = q.data() + static_cast<int64_t>(i) * d_h;
                    for (int j = 0; j < d_h; ++j) acc += qrow[j] * ks[j];
                    scores[static_cast<size_t>(s)] = acc * sc;
                }
                double mx = scores[0];
                for (int64_t s = 1; s < t_tot; ++s) mx = std::max(mx, scores[static_cast<size_t>(s)]);
                double sum = 0.0;
                for (int64_t s = 0; s < t_tot; ++s) {
                    scores[static_cast<size_t>(s)] = std::exp(scores[static_cast<size_t>(s)] - mx);
                    sum += scores[static_cast<size_t>(s)];
                }
                double* orow = att.data() + static_cast<int64_t>(i) * d_h;
                for (int64_t s = 0; s < t_tot; ++s) {
                    const double w = scores[static_cast<size_t>(s)] / sum;
                    const double* vs = L.v.data() + s * gd + static_cast<int64_t>(g) * d_h;
                    for (int j = 0; j < d_h; ++j) orow[j] += w * vs[j];
                }
            }
        }
        std::vector<double> out(static_cast<size_t>(cfg.d));
        matvec(p.wo.value, att.data(), out.data());
        x = std::move(out);
    }
    ++cache.t;
    return x;
}

} // namespace latentkit
