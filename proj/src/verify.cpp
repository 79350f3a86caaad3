#include "latentkit/verify.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <ostream>
#include <sstream>

#include "latentkit/commands.hpp"
#include "latentkit/grad_check.hpp"
#include "latentkit/grpo.hpp"
#include "latentkit/metrics.hpp"
#include "latentkit/mtp.hpp"
#include "latentkit/reference.hpp"
#include "latentkit/tasks.hpp"

namespace latentkit {

namespace {

Tensor randn(std::vector<int64_t> shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = scale * rng.normal();
    return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

InvariantResult pass_fail(double observed, double tol, const std::string& detail = "") {
    InvariantResult r;
    r.observed = observed;
    r.tolerance = tol;
    r.pass = observed <= tol;
    r.detail = detail;
    return r;
}

AttnConfig make_mla(int d, int n_h, int d_h, int d_c, int d_r) {
    AttnConfig c;
    c.d = d;
    c.n_h = n_h;
    c.d_h = d_h;
    c.d_c = d_c;
    c.d_R = d_r;
    c.variant = AttnVariant::MLA;
    return c;
}

LMConfig small_lm(int vocab = 8) {
    LMConfig c;
    c.vocab = vocab;
    c.d = 8;
    c.n_layers = 1;
    c.d_ff = 8;
    c.attn = make_mla(8, 2, 4, 3, 2);
    return c;
}

// ---- core ----

InvariantResult inv_core_determinism() {
    auto run = []() {
        Rng rng(404);
        LMConfig lc = small_lm();
        TinyLM model = TinyLM::init(lc, rng);
        AdamOpt opt(1e-3);
        Corpus corpus = make_pattern_corpus(8, 4, 12, 16, Rng(7));
        for (int step = 0; step < 3; ++step) {
            std::vector<std::vector<int>> batch{corpus.seqs[0], corpus.seqs[1]};
            lm_train_step(model, opt, batch);
        }
        uint64_t h = 1469598103934665603ULL;
        for (Param* p : model.params()) {
            for (double v : p->value.data) {
                uint64_t bits;
                std::memcpy(&bits, &v, 8);
                h = (h ^ bits) * 1099511628211ULL;
            }
        }
        return h;
    };
    const uint64_t a = run(), b = run();
    return pass_fail(a == b ? 0.0 : 1.0, 0.0, "hash equality over a repeated training run");
}

InvariantResult inv_core_softmax_simplex() {
    Rng rng(405);
    double worst = 0.0;
    for (int it = 0; it < 50; ++it) {
        Tensor x = randn({8, 16}, rng, 20.0);
        Tensor p = softmax(x, 1);
        for (int64_t r = 0; r < 8; ++r) {
            double sum = 0.0;
            for (int64_t j = 0; j < 16; ++j) {
                const double v = p.at(r, j);
                if (v < 0.0 || v > 1.0) worst = std::max(worst, 1.0);
                sum += v;
            }
            worst = std::max(worst, std::abs(sum - 1.0));
        }
    }
    return pass_fail(worst, 1e-12, "row sums over random logits");
}

InvariantResult inv_core_grad_ops() {
    Rng rng(406);
    double worst = 0.0;
    std::string worst_op;
    auto track = [&](const std::string& op, double rel) {
        if (rel > worst) {
            worst = rel;
            worst_op = op;
        }
    };

    { // cross entropy
        Param logits("logits", randn({8}, rng));
        Tensor p = softmax(logits.value, 0);
        for (int64_t j = 0; j < 8; ++j)
            logits.grad.data[static_cast<size_t>(j)] = p.data[static_cast<size_t>(j)] - (j == 5 ? 1.0 : 0.0);
        std::vector<Param*> ps{&logits};
        track("cross_entropy",
              grad_check([&]() { return cross_entropy(logits.value, 5); }, ps, 1e-5).max_rel_err);
    }
    { // rmsnorm + linear + silu ffn through a probe functional
        RMSNormLayer norm;
        norm.gain = Param::randn("gain", {6}, rng, 0.3);
        for (double& g : norm.gain.value.data) g += 1.0;
        FFNLayer ffn;
        ffn.w1 = Param::randn("w1", {5, 6}, rng, 0.7);
        ffn.w2 = Param::randn("w2", {6, 5}, rng, 0.7);
        Param x = Param::randn("x", {3, 6}, rng, 0.9);
        Tensor probe = randn({3, 6}, rng);
        auto f = [&]() {
            Tensor y = ffn.forward(norm.forward(x.value, nullptr), nullptr);
            double acc = 0.0;
            for (size_t i = 0; i < y.data.size(); ++i) acc += y.data[i] * probe.data[i];
            return acc;
        };
        std::vector<Param*> ps{&norm.gain, &ffn.w1, &ffn.w2, &x};
        zero_grads(ps);
        RMSNormLayer::Cache nc;
        FFNLayer::Cache fc;
        Tensor mid = norm.forward(x.value, &nc);
        (void)ffn.forward(mid, &fc);
        Tensor dmid = ffn.backward(probe, fc);
        add_inplace(x.grad, norm.backward(dmid, nc));
        track("rmsnorm+ffn", grad_check(f, ps, 1e-5).max_rel_err);
    }
    for (AttnVariant variant :
         {AttnVariant::MHA, AttnVariant::MQA, AttnVariant::GQA, AttnVariant::MLA}) { // attention
        AttnConfig cfg = variant == AttnVariant::MLA ? make_mla(6, 2, 3, 2, 2) : AttnConfig{};
        if (variant != AttnVariant::MLA) {
            cfg.d = 6;
            cfg.n_h = 2;
            cfg.d_h = 3;
            cfg.variant = variant;
            if (variant == AttnVariant::GQA) cfg.groups = 2;
        }
        AttnParams p = AttnParams::init(cfg, rng, 0.6);
        Param hin = Param::randn("h", {4, 6}, rng, 0.8);
        Tensor probe = randn({4, 6}, rng);
        auto f = [&]() {
            Tensor out = attn_forward(hin.value, cfg, p);
            double acc = 0.0;
            for (size_t i = 0; i < out.data.size(); ++i) acc += out.data[i] * probe.data[i];
            return acc;
        };
        std::vector<Param*> ps = p.params(cfg);
        ps.push_back(&hin);
        zero_grads(ps);
        AttnCache cache;
        (void)attn_forward(hin.value, cfg, p, &cache);
        add_inplace(hin.grad, attn_backward(probe, cfg, p, cache));
        track("attention." + variant_name(variant), grad_check(f, ps, 1e-5).max_rel_err);
    }
    { // moe layer
        MoELayer layer;
        layer.cfg = {.N_s = 1, .N_r = 4, .K_r = 2, .d = 4, .d_ff = 3};
        layer.p = MoEParams::init(layer.cfg, rng, 0.7);
        layer.bias = ExpertBiasState(4);
        Param x = Param::randn("x", {3, 4}, rng, 0.8);
        Tensor probe = randn({3, 4}, rng);
        auto f = [&]() {
            Tensor y = layer.forward(x.value, nullptr);
            double acc = 0.0;
            for (size_t i = 0; i < y.data.size(); ++i) acc += y.data[i] * probe.data[i];
            return acc;
        };
        std::vector<Param*> ps = layer.params();
        ps.push_back(&x);
        zero_grads(ps);
        MoELayer::Cache cache;
        (void)layer.forward(x.value, &cache);
        add_inplace(x.grad, layer.backward(probe, cache));
        track("moe", grad_check(f, ps, 1e-5).max_rel_err);
    }
    { // full mtp objective
        MTPConfig mc;
        mc.D = 2;
        MTPModel model = MTPModel::init(small_lm(), mc, rng);
        std::vector<std::vector<int>> batch;
        Rng data(31);
        std::vector<int> seq(6);
        for (int& t : seq) t = static_cast<int>(data.uniform_int(8));
        batch.push_back(seq);
        std::vector<Param*> ps = model.params();
        zero_grads(ps);
        mtp_loss_and_grads(model, batch);
        track("mtp_total_loss",
              grad_check([&]() { return mtp_objective(model, batch).total; }, ps, 1e-5).max_rel_err);
    }
    { // grpo objective on a tabular policy
        Param logits = Param::randn("logits", {2, 4}, rng, 0.5);
        GRPOHyper hyper;
        hyper.beta = 0.5;
        auto build = [&]() {
            std::vector<Group> gs(2);
            Rng fixed(77);
            for (int s = 0; s < 2; ++s) {
                gs[static_cast<size_t>(s)].question = {s};
                for (int i = 0; i < 4; ++i) {
                    GroupOutput o;
                    o.tokens = {(s + i) % 4};
                    o.logp_old = {-1.3 - 0.1 * i};
                    o.logp_ref = {-1.1 - 0.05 * i};
                    o.logp_theta = {row_log_softmax_at(logits.value, s, o.tokens[0])};
                    o.reward = static_cast<double>((i * 7 + s) % 3);
                    gs[static_cast<size_t>(s)].outputs.push_back(std::move(o));
                }
                fill_advantages(gs[static_cast<size_t>(s)]);
            }
            return gs;
        };
        auto objective = [&]() {
            double j = 0.0;
            for (const Group& g : build()) j += grpo_objective(g, hyper) / 2.0;
            return j;
        };
        logits.zero_grad();
        std::vector<Group> gs = build();
        for (int s = 0; s < 2; ++s) {
            ObjectiveEval ev = grpo_objective_eval(gs[static_cast<size_t>(s)], hyper);
            Tensor p = softmax(logits.value, 1);
            for (size_t i = 0; i < gs[static_cast<size_t>(s)].outputs.size(); ++i) {
                const int action = gs[static_cast<size_t>(s)].outputs[i].tokens[0];
                for (int64_t j = 0; j < 4; ++j) {
                    logits.grad.at(s, j) +=
                        ev.dlogp[i][0] / 2.0 * ((j == action ? 1.0 : 0.0) - p.at(s, j));
                }
            }
        }
        std::vector<Param*> ps{&logits};
        track("grpo_objective", grad_check(objective, ps, 1e-5).max_rel_err);
    }
    return pass_fail(worst, 1e-4, "worst op: " + worst_op);
}

InvariantResult inv_core_matmul_reference() {
    Rng rng(407);
    double worst = 0.0;
    for (int it = 0; it < 20; ++it) {
        Tensor a = randn({5, 5}, rng), b = randn({5, 5}, rng), c = randn({5, 5}, rng);
        Tensor left = matmul(matmul(a, b), c);
        Tensor right = matmul(a, matmul(b, c));
        Tensor naive = ref::matmul_naive(ref::matmul_naive(a, b), c);
        worst = std::max(worst, max_abs_diff(left, right));
        worst = std::max(worst, max_abs_diff(left, naive));
    }
    return pass_fail(worst, 1e-10, "associativity vs the naive triple loop");
}

// ---- attention ----

InvariantResult inv_attn_mla_mha() {
    double worst = 0.0;
    for (uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(9000 + seed);
        const int d = 8, n_h = 4, d_h = 8;
        AttnConfig mha;
        mha.d = d;
        mha.n_h = n_h;
        mha.d_h = d_h;
        AttnParams pm = AttnParams::init(mha, rng, 0.4);
        AttnConfig mla = make_mla(d, n_h, d_h, d, 0);
        AttnParams pl;
        pl.w_dq = Param("w_dq", identity(d));
        pl.w_dkv = Param("w_dkv", identity(d));
        pl.w_uq = pm.wq;
        pl.w_uk = pm.wk;
        pl.w_uv = pm.wv;
        pl.wo = pm.wo;
        Tensor h = randn({1 + static_cast<int64_t>(rng.uniform_int(8)), d}, rng);
        worst = std::max(worst, max_abs_diff(mla_forward(h, mla, pl), mha_forward(h, mha, pm)));
    }
    return pass_fail(worst, 1e-10, "identity compression, 100 seeds");
}

InvariantResult inv_attn_decode() {
    Rng rng(408);
    double worst = 0.0;
    for (AttnVariant variant :
         {AttnVariant::MHA, AttnVariant::MQA, AttnVariant::GQA, AttnVariant::MLA}) {
        AttnConfig cfg = variant == AttnVariant::MLA ? make_mla(8, 2, 4, 3, 4) : AttnConfig{};
        if (variant != AttnVariant::MLA) {
            cfg.d = 8;
            cfg.n_h = 2;
            cfg.d_h = 4;
            cfg.variant = variant;
            if (variant == AttnVariant::GQA) cfg.groups = 2;
        }
        std::vector<AttnParams> layers;
        layers.push_back(AttnParams::init(cfg, rng, 0.5));
        const int64_t t_max = 16;
        Tensor h = randn({t_max, 8}, rng);
        DecodeCache cache(cfg, 1);
        for (int64_t t = 0; t < t_max; ++t) {
            std::vector<double> out = decode_step(cache, {h.row(t), 8}, cfg, layers);
            Tensor prefix({t + 1, 8});
            for (int64_t r = 0; r <= t; ++r)
                for (int64_t j = 0; j < 8; ++j) prefix.at(r, j) = h.at(r, j);
            Tensor full = attn_forward(prefix, cfg, layers[0]);
            for (int64_t j = 0; j < 8; ++j)
                worst = std::max(worst, std::abs(out[static_cast<size_t>(j)] - full.at(t, j)));
        }
        if (cache.stored_scalars() != kv_cache_scalars(cfg, t_max, 1).total_scalars()) {
            return pass_fail(1.0, 0.0, "cache accounting mismatch for " + variant_name(variant));
        }
    }
    return pass_fail(worst, 1e-10, "16-step decode vs full forward, all variants");
}

InvariantResult inv_attn_rope_relative() {
    Rng rng(409);
    AttnConfig cfg = make_mla(12, 2, 4, 4, 6);
    AttnParams p = AttnParams::init(cfg, rng, 0.5);
    double worst = 0.0;
    for (int it = 0; it < 10; ++it) {
        Tensor h = randn({5, 12}, rng);
        const int64_t shift = 1 + rng.uniform_int(40);
        std::vector<int64_t> base(5), shifted(5);
        for (int64_t i = 0; i < 5; ++i) {
            base[static_cast<size_t>(i)] = i;
            shifted[static_cast<size_t>(i)] = i + shift;
        }
        AttnCache c0, c1;
        (void)attn_forward(h, cfg, p, &c0, base);
        (void)attn_forward(h, cfg, p, &c1, shifted);
        for (size_t head = 0; head < c0.probs.size(); ++head)
            worst = std::max(worst, max_abs_diff(c0.probs[head], c1.probs[head]));
    }
    return pass_fail(worst, 1e-10, "score matrices under shifted positions");
}

InvariantResult inv_attn_cache_ordering() {
    Rng rng(410);
    int failures = 0;
    for (int it = 0; it < 20; ++it) {
        const int n_h = 4 + 4 * static_cast<int>(rng.uniform_int(3)); // 4, 8, 12
        const int d_h = 4 + 4 * static_cast<int>(rng.uniform_int(3));
        const int g = 2;
        // pick d_c + d_R < 2 d_h
        const int d_r = 2;
        const int d_c = std::max(1, 2 * d_h - d_r - 1 - static_cast<int>(rng.uniform_int(d_h)));
        AttnConfig mha;
        mha.d = n_h * d_h;
        mha.n_h = n_h;
        mha.d_h = d_h;
        AttnConfig mqa = mha;
        mqa.variant = AttnVariant::MQA;
        AttnConfig gqa = mha;
        gqa.variant = AttnVariant::GQA;
        gqa.groups = g;
        AttnConfig mla = make_mla(n_h * d_h, n_h, d_h, d_c, d_r);
        const int64_t a = kv_cache_scalars(mla, 3, 2).total_scalars();
        const int64_t b = kv_cache_scalars(mqa, 3, 2).total_scalars();
        const int64_t c = kv_cache_scalars(gqa, 3, 2).total_scalars();
        const int64_t d = kv_cache_scalars(mha, 3, 2).total_scalars();
        if (!(a < b && b < c && c < d)) ++failures;
    }
    return pass_fail(failures, 0.0, "MLA < MQA < GQA < MHA over random ordered widths");
}

InvariantResult inv_attn_causality() {
    Rng rng(411);
    double worst = 0.0;
    for (AttnVariant variant :
         {AttnVariant::MHA, AttnVariant::MQA, AttnVariant::GQA, AttnVariant::MLA}) {
        AttnConfig cfg = variant == AttnVariant::MLA ? make_mla(8, 2, 4, 3, 4) : AttnConfig{};
        if (variant != AttnVariant::MLA) {
            cfg.d = 8;
            cfg.n_h = 2;
            cfg.d_h = 4;
            cfg.variant = variant;
            if (variant == AttnVariant::GQA) cfg.groups = 2;
        }
        AttnParams p = AttnParams::init(cfg, rng, 0.5);
        Tensor h = randn({8, 8}, rng);
        Tensor out1 = attn_forward(h, cfg, p);
        Tensor h2 = h;
        for (int64_t t = 5; t < 8; ++t)
            for (int64_t j = 0; j < 8; ++j) h2.at(t, j) = rng.normal();
        Tensor out2 = attn_forward(h2, cfg, p);
        for (int64_t t = 0; t < 5; ++t)
            for (int64_t j = 0; j < 8; ++j) worst = std::max(worst, std::abs(out1.at(t, j) - out2.at(t, j)));
    }
    return pass_fail(worst, 0.0, "prefix outputs after perturbing the suffix");
}

// ---- moe ----

MoEConfig verify_moe_cfg(Rng& rng) {
    MoEConfig cfg;
    cfg.N_s = 1;
    cfg.N_r = 2 + static_cast<int>(rng.uniform_int(7));
    cfg.K_r = 1 + static_cast<int>(rng.uniform_int(cfg.N_r));
    cfg.d = 6;
    cfg.d_ff = 4;
    return cfg;
}

InvariantResult inv_moe_gate_simplex() {
    Rng rng(412);
    double worst = 0.0;
    for (int it = 0; it < 50; ++it) {
        MoEConfig cfg = verify_moe_cfg(rng);
        MoEParams p = MoEParams::init(cfg, rng, 0.6);
        ExpertBiasState bias(cfg.N_r);
        std::vector<double> u(6);
        for (double& v : u) v = rng.normal();
        RoutingDecision d;
        (void)moe_forward(u, cfg, p, bias, &d);
        double sum = 0.0;
        int nonzero = 0;
        for (double g : d.gate) {
            sum += g;
            if (g != 0.0) ++nonzero;
        }
        worst = std::max(worst, std::abs(sum - 1.0));
        if (nonzero != cfg.K_r) return pass_fail(1.0, 0.0, "nonzero gate count mismatch");
    }
    return pass_fail(worst, 1e-12, "gate sums, exactly K_r nonzero");
}

InvariantResult inv_moe_sparsity() {
    Rng rng(413);
    for (int it = 0; it < 20; ++it) {
        MoEConfig cfg = verify_moe_cfg(rng);
        MoEParams p = MoEParams::init(cfg, rng, 0.6);
        ExpertBiasState bias(cfg.N_r);
        std::vector<double> u(6);
        for (double& v : u) v = rng.normal();
        MoEInstrumentation instr;
        (void)moe_forward(u, cfg, p, bias, nullptr, &instr);
        if (instr.expert_evals != cfg.N_s + cfg.K_r) {
            return pass_fail(static_cast<double>(instr.expert_evals), 0.0, "expert evaluations per token");
        }
    }
    return pass_fail(0.0, 0.0, "exactly N_s + K_r expert evaluations per token");
}

InvariantResult inv_moe_bias_neutrality() {
    Rng rng(414);
    for (int it = 0; it < 50; ++it) {
        const int n_r = 4 + static_cast<int>(rng.uniform_int(5));
        std::vector<double> s(static_cast<size_t>(n_r));
        for (double& v : s) v = rng.uniform(0.05, 0.95);
        std::vector<double> b0(static_cast<size_t>(n_r), 0.0), b1(b0);
        for (double& v : b1) v = 0.01 * rng.normal();
        const int k = 1 + static_cast<int>(rng.uniform_int(n_r));
        std::vector<int> sel0 = route_topk(s, b0, k);
        std::vector<int> sel1 = route_topk(s, b1, k);
        if (sel0 != sel1) continue; // only identical selections are in scope
        std::vector<double> g0 = gate_values(s, sel0);
        std::vector<double> g1 = gate_values(s, sel1);
        for (size_t i = 0; i < g0.size(); ++i) {
            if (g0[i] != g1[i]) return pass_fail(1.0, 0.0, "gates changed with selection fixed");
        }
    }
    return pass_fail(0.0, 0.0, "identical selection implies identical gates");
}

InvariantResult inv_moe_dense_equiv() {
    Rng rng(415);
    double worst = 0.0;
    for (int it = 0; it < 50; ++it) {
        MoEConfig cfg = verify_moe_cfg(rng);
        MoEParams p = MoEParams::init(cfg, rng, 0.6);
        ExpertBiasState bias(cfg.N_r);
        for (double& b : bias.b) b = 0.05 * rng.normal();
        std::vector<double> u(6);
        for (double& v : u) v = rng.normal();
        std::vector<double> fast = moe_forward(u, cfg, p, bias);
        std::vector<double> dense = ref::moe_dense_masked(u, cfg, p, bias.b);
        for (size_t i = 0; i < fast.size(); ++i) worst = std::max(worst, std::abs(fast[i] - dense[i]));
    }
    return pass_fail(worst, 1e-10, "sparse forward vs the dense-masking oracle");
}

InvariantResult inv_moe_bias_permutation() {
    Rng rng(416);
    const int n_r = 6;
    std::vector<RoutingDecision> window(50);
    for (RoutingDecision& d : window) {
        d.selected = {static_cast<int>(rng.uniform_int(n_r)), static_cast<int>(rng.uniform_int(n_r))};
        if (d.selected[0] == d.selected[1]) d.selected[1] = (d.selected[1] + 1) % n_r;
    }
    std::vector<int> perm{2, 5, 0, 3, 1, 4};
    std::vector<RoutingDecision> permuted = window;
    for (RoutingDecision& d : permuted)
        for (int& e : d.selected) e = perm[static_cast<size_t>(e)];
    ExpertBiasState b1(n_r, 0.05), b2(n_r, 0.05);
    bias_update(b1, window);
    bias_update(b2, permuted);
    for (int i = 0; i < n_r; ++i) {
        if (b2.b[static_cast<size_t>(perm[static_cast<size_t>(i)])] != b1.b[static_cast<size_t>(i)]) {
            return pass_fail(1.0, 0.0, "permuted update differs");
        }
    }
    return pass_fail(0.0, 0.0, "permuting expert ids permutes the bias update");
}

// ---- mtp ----

InvariantResult inv_mtp_causal_chain() {
    Rng rng(417);
    MTPConfig mc;
    mc.D = 2;
    MTPModel model = MTPModel::init(small_lm(), mc, rng);
    std::vector<int> tokens(8);
    for (int& t : tokens) t = static_cast<int>(rng.uniform_int(8));
    auto depth_logits = [&](const std::vector<int>& toks, int upto_k) {
        Tensor h = model.trunk.forward_hidden(toks);
        DepthState st = mtp_depth0(h);
        for (int k = 1; k <= upto_k; ++k) st = mtp_module_forward(model, st, toks);
        return model.trunk.logits_from_hidden(st.h);
    };
    for (int k = 1; k <= 2; ++k) {
        for (int s = 0; s + k + 1 < 8; ++s) {
            std::vector<int> perturbed = tokens;
            perturbed[static_cast<size_t>(s + k + 1)] = (tokens[static_cast<size_t>(s + k + 1)] + 3) % 8;
            Tensor a = depth_logits(tokens, k);
            Tensor b = depth_logits(perturbed, k);
            for (int64_t j = 0; j < a.shape[1]; ++j) {
                if (a.at(s, j) != b.at(s, j)) return pass_fail(1.0, 0.0, "future token leaked");
            }
        }
    }
    return pass_fail(0.0, 0.0, "perturbing the target leaves its prediction slot fixed");
}

InvariantResult inv_mtp_teacher_forcing() {
    Rng rng(418);
    MTPConfig mc;
    mc.D = 2;
    MTPModel model = MTPModel::init(small_lm(), mc, rng);
    std::vector<int> tokens(8);
    for (int& t : tokens) t = static_cast<int>(rng.uniform_int(8));
    auto states = [&]() {
        Tensor h = model.trunk.forward_hidden(tokens);
        DepthState d1 = mtp_module_forward(model, mtp_depth0(h), tokens);
        DepthState d2 = mtp_module_forward(model, d1, tokens);
        return std::pair{d1.h, d2.h};
    };
    auto [a1, a2] = states();
    for (double& v : model.trunk.out_head.value.data) v += 1.5;
    auto [b1, b2] = states();
    const double diff = std::max(max_abs_diff(a1, b1), max_abs_diff(a2, b2));
    return pass_fail(diff, 0.0, "depth states ignore the output head");
}

InvariantResult inv_mtp_batch_order() {
    Rng rng(419);
    MTPConfig mc;
    mc.D = 2;
    mc.lambda = 0.4;
    MTPModel model = MTPModel::init(small_lm(), mc, rng);
    std::vector<std::vector<int>> batch;
    for (int i = 0; i < 4; ++i) {
        std::vector<int> seq(8);
        for (int& t : seq) t = static_cast<int>(rng.uniform_int(8));
        batch.push_back(std::move(seq));
    }
    MTPReport r1 = mtp_objective(model, batch);
    std::vector<std::vector<int>> reversed(batch.rbegin(), batch.rend());
    MTPReport r2 = mtp_objective(model, reversed);
    return pass_fail(std::abs(r1.total - r2.total), 1e-12, "objective under batch reversal");
}

InvariantResult inv_mtp_depth_coverage() {
    Rng rng(420);
    for (int D = 1; D <= 3; ++D) {
        MTPConfig mc;
        mc.D = D;
        MTPModel model = MTPModel::init(small_lm(), mc, rng);
        for (int T = D + 2; T <= 16; ++T) {
            std::vector<int> tokens(static_cast<size_t>(T));
            for (int& t : tokens) t = static_cast<int>(rng.uniform_int(8));
            DepthState st = mtp_depth0(model.trunk.forward_hidden(tokens));
            for (int k = 1; k <= D; ++k) {
                st = mtp_module_forward(model, st, tokens);
                if (st.valid != T - k - 1) {
                    return pass_fail(st.valid, 0.0, "valid count at k=" + std::to_string(k));
                }
            }
        }
    }
    return pass_fail(0.0, 0.0, "valid positions equal T - k - 1 for D <= 3, T <= 16");
}

// ---- grpo ----

InvariantResult inv_grpo_advantages() {
    Rng rng(421);
    double worst_mean = 0.0, worst_std = 0.0;
    for (int it = 0; it < 50; ++it) {
        std::vector<double> r(4 + static_cast<size_t>(rng.uniform_int(8)));
        for (double& x : r) x = rng.uniform(0.0, 2.0);
        r[0] += 0.7;
        std::vector<double> a = group_advantages(r);
        double mean = 0.0, var = 0.0;
        for (double v : a) mean += v;
        mean /= static_cast<double>(a.size());
        for (double v : a) var += (v - mean) * (v - mean);
        var /= static_cast<double>(a.size());
        worst_mean = std::max(worst_mean, std::abs(mean));
        worst_std = std::max(worst_std, std::abs(std::sqrt(var) - 1.0));
    }
    if (worst_mean > 1e-12) return pass_fail(worst_mean, 1e-12, "advantage mean");
    return pass_fail(worst_std, 1e-9, "population std of advantages");
}

InvariantResult inv_grpo_affine() {
    std::vector<double> r{3.0, 0.0, 2.0, 1.0};
    std::vector<double> base = group_advantages(r);
    std::vector<double> shifted = r, scaled = r;
    for (double& x : shifted) x += 16.0;
    for (double& x : scaled) x *= 8.0;
    std::vector<double> a = group_advantages(shifted), b = group_advantages(scaled);
    for (size_t i = 0; i < r.size(); ++i) {
        if (a[i] != base[i] || b[i] != base[i]) return pass_fail(1.0, 0.0, "affine change moved advantages");
    }
    return pass_fail(0.0, 0.0, "shift and positive scale leave advantages exact");
}

InvariantResult inv_grpo_kl_nonneg() {
    double worst = 0.0;
    for (int i = 0; i <= 600; ++i) {
        const double rho = std::pow(10.0, -3.0 + static_cast<double>(i) * 0.01);
        std::vector<double> lt{0.0}, lr{std::log(rho)};
        const double d = kl_estimate(lt, lr);
        if (d < 0.0) worst = std::max(worst, -d);
        if (std::abs(rho - 1.0) > 1e-9 && d <= 0.0) worst = std::max(worst, 1.0);
    }
    // equality exactly at rho = 1
    std::vector<double> lt{0.0}, lr{0.0};
    if (kl_estimate(lt, lr) != 0.0) worst = std::max(worst, 1.0);
    return pass_fail(worst, 0.0, "rho - log rho - 1 over [1e-3, 1e3], zero only at rho = 1");
}

InvariantResult inv_grpo_clip_pessimism() {
    Rng rng(422);
    double worst = -std::numeric_limits<double>::infinity();
    for (int it = 0; it < 500; ++it) {
        const double ratio = std::exp(rng.uniform(-1.5, 1.5));
        const double adv = rng.normal();
        const double eps = rng.uniform(0.05, 0.5);
        worst = std::max(worst, clipped_surrogate(ratio, adv, eps) - ratio * adv);
    }
    return pass_fail(std::max(0.0, worst), 1e-15, "surrogate never exceeds ratio * advantage");
}

InvariantResult inv_grpo_on_policy() {
    Group g;
    g.question = {0};
    const double rewards[3] = {2.0, 1.0, 0.0};
    for (double r : rewards) {
        GroupOutput o;
        o.tokens = {1};
        o.logp_old = {-0.7};
        o.logp_theta = {-0.7};
        o.logp_ref = {-0.7};
        o.reward = r;
        g.outputs.push_back(std::move(o));
    }
    fill_advantages(g);
    GRPOHyper hyper;
    hyper.beta = 0.0;
    ObjectiveEval ev = grpo_objective_eval(g, hyper);
    double expect = 0.0;
    for (const GroupOutput& o : g.outputs) expect += o.advantage / 3.0;
    if (std::abs(ev.J - expect) != 0.0) return pass_fail(std::abs(ev.J - expect), 0.0, "J vs mean advantage");
    for (size_t i = 0; i < g.outputs.size(); ++i) {
        if (ev.dlogp[i][0] != g.outputs[i].advantage / 3.0) {
            return pass_fail(1.0, 0.0, "gradient is not the vanilla policy-gradient term");
        }
    }
    return pass_fail(0.0, 0.0, "on-policy surrogate and gradient");
}

InvariantResult inv_grpo_no_value_model() {
    static_assert(!kGrpoHasValueModel);
    return pass_fail(kGrpoHasValueModel ? 1.0 : 0.0, 0.0, "module exposes no state-value estimator");
}

// ---- harness ----

InvariantResult inv_harness_config_roundtrip() {
    TrainConfig t;
    t.task = "copy";
    t.seed = 99;
    t.model.moe_enabled = true;
    t.mtp.depth = 3;
    if (parse_train_config(serialize(t)) != t) return pass_fail(1.0, 0.0, "train config");
    GrpoRunConfig g;
    g.hyper.beta = 2.5;
    g.digitsum.n_digits = 3;
    if (parse_grpo_config(serialize(g)) != g) return pass_fail(1.0, 0.0, "grpo config");
    KvReportConfig k;
    k.grid.push_back({.variant = "MLA", .n_h = 4, .d_h = 8, .d_c = 16, .d_R = 8, .T = 10, .L = 2});
    if (parse_kvreport_config(serialize(k)) != k) return pass_fail(1.0, 0.0, "kvreport config");
    bool rejected = false;
    try {
        (void)parse_train_config("{\"schema_version\":1,\"bogus_key\":3}");
    } catch (const ConfigError&) {
        rejected = true;
    }
    return pass_fail(rejected ? 0.0 : 1.0, 0.0, "round trips and unknown-key rejection");
}

InvariantResult inv_harness_csv_strict() {
    MetricsLog log("check", {"a", "b"});
    log.append(1, std::vector<double>{0.5, -1.25e-3});
    log.append(2, std::vector<double>{1e300, 0.1});
    CsvTable t = parse_strict_csv(log.serialize());
    if (t.header.size() != 3 || t.rows.size() != 2) return pass_fail(1.0, 0.0, "metrics csv shape");
    KvReportConfig k;
    k.grid.push_back({.variant = "MHA", .n_h = 4, .d_h = 8, .T = 10, .L = 2});
    CsvTable kv = parse_strict_csv(kvreport_csv(run_kvreport(k)));
    if (kv.rows.size() != 1) return pass_fail(1.0, 0.0, "kvreport csv shape");
    MoeBalanceConfig mb;
    mb.windows = 3;
    mb.window_tokens = 16;
    CsvTable bal = parse_strict_csv(run_moe_balance(mb, "").csv);
    if (bal.rows.size() != 3 * 8) return pass_fail(1.0, 0.0, "balance csv shape");
    return pass_fail(0.0, 0.0, "all emitted csv formats pass the strict reader");
}

InvariantResult inv_harness_registry_coverage() {
    std::map<std::string, int> counts;
    for (const InvariantEntry& e : invariant_registry()) ++counts[e.module];
    if (counts != expected_invariant_counts()) return pass_fail(1.0, 0.0, "registry counts drifted");
    return pass_fail(0.0, 0.0, "registry covers every module's invariant list");
}

} // namespace

const std::map<std::string, int>& expected_invariant_counts() {
    static const std::map<std::string, int> counts{{"core", 4},  {"attention", 5}, {"moe", 5},
                                                   {"mtp", 4},   {"grpo", 6},      {"harness", 3}};
    return counts;
}

const std::vector<InvariantEntry>& invariant_registry() {
    static const std::vector<InvariantEntry> registry{
        {"core.determinism", "core", inv_core_determinism},
        {"core.softmax-simplex", "core", inv_core_softmax_simplex},
        {"core.grad-check-ops", "core", inv_core_grad_ops},
        {"core.matmul-reference", "core", inv_core_matmul_reference},
        {"attention.mla-mha-equivalence", "attention", inv_attn_mla_mha},
        {"attention.decode-consistency", "attention", inv_attn_decode},
        {"attention.rope-relative-position", "attention", inv_attn_rope_relative},
        {"attention.cache-ordering", "attention", inv_attn_cache_ordering},
        {"attention.causality", "attention", inv_attn_causality},
        {"moe.gate-simplex", "moe", inv_moe_gate_simplex},
        {"moe.sparsity-economy", "moe", inv_moe_sparsity},
        {"moe.bias-gate-neutrality", "moe", inv_moe_bias_neutrality},
        {"moe.dense-equivalence", "moe", inv_moe_dense_equiv},
        {"moe.bias-permutation-equivariance", "moe", inv_moe_bias_permutation},
        {"mtp.causal-chain", "mtp", inv_mtp_causal_chain},
        {"mtp.teacher-forcing", "mtp", inv_mtp_teacher_forcing},
        {"mtp.batch-order-invariance", "mtp", inv_mtp_batch_order},
        {"mtp.depth-coverage", "mtp", inv_mtp_depth_coverage},
        {"grpo.advantage-normalization", "grpo", inv_grpo_advantages},
        {"grpo.reward-affine-invariance", "grpo", inv_grpo_affine},
        {"grpo.kl-nonnegativity", "grpo", inv_grpo_kl_nonneg},
        {"grpo.clip-pessimism", "grpo", inv_grpo_clip_pessimism},
        {"grpo.on-policy-identity", "grpo", inv_grpo_on_policy},
        {"grpo.no-value-model", "grpo", inv_grpo_no_value_model},
        {"harness.config-roundtrip", "harness", inv_harness_config_roundtrip},
        {"harness.csv-strict", "harness", inv_harness_csv_strict},
        {"harness.registry-coverage", "harness", inv_harness_registry_coverage},
    };
    return registry;
}

int run_verify(const std::string& scope, std::ostream& out, FaultMode fault) {
    if (scope != "all" && !expected_invariant_counts().contains(scope)) {
        throw UsageError("verify: unknown scope '" + scope + "'");
    }
    set_clip_fault(fault == FaultMode::FlipClipDirection);
    int failures = 0;
    int ran = 0;
    for (const InvariantEntry& e : invariant_registry()) {
        if (scope != "all" && e.module != scope) continue;
        ++ran;
        InvariantResult r;
        try {
            r = e.run();
        } catch (const std::exception& ex) {
            r.pass = false;
            r.detail = std::string("exception: ") + ex.what();
            r.observed = std::numeric_limits<double>::quiet_NaN();
        }
        out << (r.pass ? "[PASS] " : "[FAIL] ") << e.id << "  observed=" << format_double(r.observed)
            << " tolerance=" << format_double(r.tolerance);
        if (!r.detail.empty()) out << "  (" << r.detail << ")";
        out << "\n";
        if (!r.pass) ++failures;
    }
    set_clip_fault(false);
    out << ran << " invariants, " << failures << " failed\n";
    return failures == 0 ? 0 : 1;
}

} // namespace latentkit
