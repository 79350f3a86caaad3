#include "doctest.h"

#include <cmath>

#include "latentkit/attention.hpp"
#include "latentkit/grad_check.hpp"
#include "latentkit/reference.hpp"
#include "latentkit/rng.hpp"

using namespace latentkit;

namespace {

Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = scale * rng.normal();
    return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape == b.shape);
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

AttnConfig mha_cfg(int d, int n_h, int d_h) {
    AttnConfig c;
    c.d = d;
    c.n_h = n_h;
    c.d_h = d_h;
    c.variant = AttnVariant::MHA;
    return c;
}

AttnConfig mla_cfg(int d, int n_h, int d_h, int d_c, int d_R) {
    AttnConfig c;
    c.d = d;
    c.n_h = n_h;
    c.d_h = d_h;
    c.d_c = d_c;
    c.d_R = d_R;
    c.variant = AttnVariant::MLA;
    return c;
}

std::vector<int64_t> iota_pos(int64_t n, int64_t start = 0) {
    std::vector<int64_t> p(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) p[static_cast<size_t>(i)] = start + i;
    return p;
}

} // namespace

TEST_SUITE_BEGIN("attention");

TEST_CASE("rope: zero position is the identity") {
    Rng rng(4);
    Tensor x = random_tensor({1, 8}, rng);
    std::vector<int64_t> pos{0};
    CHECK(max_abs_diff(rope_apply(x, pos, 10000.0), x) == 0.0);
}

TEST_CASE("rope: single pair rotates by the position angle") {
    Tensor x({1, 2}, {1.0, 0.0});
    std::vector<int64_t> pos{1};
    Tensor y = rope_apply(x, pos, 10000.0);
    CHECK(y.data[0] == doctest::Approx(std::cos(1.0)).epsilon(1e-15));
    CHECK(y.data[1] == doctest::Approx(std::sin(1.0)).epsilon(1e-15));
    CHECK(y.data[0] == doctest::Approx(0.5403023058681398).epsilon(1e-12));
    CHECK(y.data[1] == doctest::Approx(0.8414709848078965).epsilon(1e-12));
}

TEST_CASE("rope: odd width and bad positions are rejected") {
    Tensor x({1, 3});
    std::vector<int64_t> pos{0};
    CHECK_THROWS_AS(rope_apply(x, pos, 10000.0), ConfigError);
    Tensor ok({1, 2});
    std::vector<int64_t> neg{-1};
    CHECK_THROWS_AS(rope_apply(ok, neg, 10000.0), IndexError);
}

TEST_CASE("rope: inner products depend only on position differences") {
    Rng rng(19);
    for (int it = 0; it < 20; ++it) {
        Tensor q = random_tensor({1, 8}, rng);
        Tensor k = random_tensor({1, 8}, rng);
        const int64_t m = rng.uniform_int(32), n = rng.uniform_int(32), s = rng.uniform_int(64);
        auto dot = [](const Tensor& a, const Tensor& b) {
            double acc = 0.0;
            for (size_t i = 0; i < a.data.size(); ++i) acc += a.data[i] * b.data[i];
            return acc;
        };
        std::vector<int64_t> pm{m}, pn{n}, pms{m + s}, pns{n + s};
        const double base = dot(rope_apply(q, pm, 10000.0), rope_apply(k, pn, 10000.0));
        const double shifted = dot(rope_apply(q, pms, 10000.0), rope_apply(k, pns, 10000.0));
        CHECK(std::abs(base - shifted) < 1e-10);
    }
}

TEST_CASE("mha: single token reduces to the value path") {
    Rng rng(31);
    AttnConfig cfg = mha_cfg(6, 2, 4);
    AttnParams p = AttnParams::init(cfg, rng, 0.5);
    Tensor h = random_tensor({1, 6}, rng);
    Tensor out = mha_forward(h, cfg, p);
    // weight over one key is exactly 1: out = wo v_1
    Tensor v = matmul_nt(h, p.wv.value);
    Tensor expect = matmul_nt(v, p.wo.value);
    CHECK(max_abs_diff(out, expect) < 1e-14);
}

TEST_CASE("mha: all-equal scores average the values") {
    Rng rng(32);
    AttnConfig cfg = mha_cfg(8, 2, 4);
    AttnParams p = AttnParams::init(cfg, rng, 0.5);
    for (double& w : p.wq.value.data) w = 0.0; // q = 0 -> uniform attention
    Tensor h = random_tensor({5, 8}, rng);
    Tensor out = mha_forward(h, cfg, p);
    Tensor v = matmul_nt(h, p.wv.value);
    for (int64_t t = 0; t < 5; ++t) {
        Tensor mean({1, v.shape[1]});
        for (int64_t s = 0; s <= t; ++s)
            for (int64_t j = 0; j < v.shape[1]; ++j) mean.at(0, j) += v.at(s, j) / static_cast<double>(t + 1);
        Tensor expect = matmul_nt(mean, p.wo.value);
        for (int64_t j = 0; j < 8; ++j) CHECK(out.at(t, j) == doctest::Approx(expect.at(0, j)).epsilon(1e-12));
    }
}

TEST_CASE("mha: matches the naive per-head loop oracle") {
    Rng rng(33);
    AttnConfig cfg = mha_cfg(8, 2, 4);
    AttnParams p = AttnParams::init(cfg, rng, 0.7);
    Tensor h = random_tensor({4, 8}, rng);
    CHECK(max_abs_diff(mha_forward(h, cfg, p), ref::mha_naive(h, cfg, p)) < 1e-10);
}

TEST_CASE("gqa: g == n_h degenerates to mha") {
    Rng rng(34);
    AttnConfig g = mha_cfg(8, 4, 4);
    g.variant = AttnVariant::GQA;
    g.groups = 4;
    AttnParams p = AttnParams::init(g, rng, 0.5);
    Tensor h = random_tensor({5, 8}, rng);
    AttnConfig m = mha_cfg(8, 4, 4);
    CHECK(max_abs_diff(gqa_forward(h, g, p), mha_forward(h, m, p)) < 1e-12);
}

TEST_CASE("gqa: invalid group count is rejected") {
    AttnConfig g = mha_cfg(8, 4, 4);
    g.variant = AttnVariant::GQA;
    g.groups = 3;
    Rng rng(1);
    CHECK_THROWS_AS(AttnParams::init(g, rng, 0.5), ConfigError);
}

TEST_CASE("mqa with tied per-head K/V params equals mha") {
    Rng rng(35);
    const int d = 8, n_h = 4, d_h = 4;
    AttnConfig mqa = mha_cfg(d, n_h, d_h);
    mqa.variant = AttnVariant::MQA;
    AttnParams pq = AttnParams::init(mqa, rng, 0.5); // wk/wv are [d_h x d]

    AttnConfig mha = mha_cfg(d, n_h, d_h);
    AttnParams pm = AttnParams::init(mha, rng, 0.5);
    pm.wq = pq.wq;
    pm.wo = pq.wo;
    // replicate the shared K/V block across all heads
    for (int head = 0; head < n_h; ++head)
        for (int64_t r = 0; r < d_h; ++r)
            for (int64_t c = 0; c < d; ++c) {
                pm.wk.value.at(head * d_h + r, c) = pq.wk.value.at(r, c);
                pm.wv.value.at(head * d_h + r, c) = pq.wv.value.at(r, c);
            }
    Tensor h = random_tensor({6, d}, rng);
    CHECK(max_abs_diff(gqa_forward(h, mqa, pq), mha_forward(h, mha, pm)) < 1e-12);
}

TEST_CASE("kv cache accounting: mqa is 1/h of mha") {
    AttnConfig mha = mha_cfg(32, 4, 8);
    AttnConfig mqa = mha;
    mqa.variant = AttnVariant::MQA;
    KVCacheLayout a = kv_cache_scalars(mha, 10, 2);
    KVCacheLayout b = kv_cache_scalars(mqa, 10, 2);
    CHECK(a.total_scalars() == 1280);
    CHECK(b.total_scalars() == 320);
    CHECK(b.total_scalars() * 4 == a.total_scalars());
}

TEST_CASE("kv cache layouts: breakdown sums and derived counts") {
    AttnConfig gqa = mha_cfg(32, 4, 8);
    gqa.variant = AttnVariant::GQA;
    gqa.groups = 2;
    AttnConfig mla = mla_cfg(32, 4, 8, 16, 8);
    KVCacheLayout g = kv_cache_scalars(gqa, 10, 2);
    KVCacheLayout m = kv_cache_scalars(mla, 10, 2);
    CHECK(g.total_scalars() == 640);
    CHECK(m.scalars_per_token_per_layer == 24);
    CHECK(m.total_scalars() == 480);
    CHECK(static_cast<double>(m.total_scalars()) / 1280.0 == 0.375);
    for (const KVCacheLayout& lay : {g, m}) {
        int64_t sum = 0;
        for (auto& [name, n] : lay.breakdown) sum += n;
        CHECK(sum == lay.scalars_per_token_per_layer);
    }
}

TEST_CASE("mla: identity compression collapses to mha") {
    // requires d < n_h*d_h so that d_c = d keeps the compression premise
    Rng rng(36);
    const int d = 8, n_h = 4, d_h = 8;
    AttnConfig mha = mha_cfg(d, n_h, d_h);
    AttnParams pm = AttnParams::init(mha, rng, 0.4);
    AttnConfig mla = mla_cfg(d, n_h, d_h, /*d_c=*/d, /*d_R=*/0);
    AttnParams pl;
    pl.w_dq = Param("w_dq", identity(d));
    pl.w_dkv = Param("w_dkv", identity(d));
    pl.w_uq = pm.wq;
    pl.w_uk = pm.wk;
    pl.w_uv = pm.wv;
    pl.wo = pm.wo;
    for (int it = 0; it < 10; ++it) {
        Tensor h = random_tensor({1 + static_cast<int64_t>(rng.uniform_int(8)), d}, rng);
        CHECK(max_abs_diff(mla_forward(h, mla, pl), mha_forward(h, mha, pm)) < 1e-10);
    }
}

TEST_CASE("mla: single token gives weight one regardless of compression") {
    Rng rng(37);
    AttnConfig cfg = mla_cfg(16, 2, 4, 4, 4);
    AttnParams p = AttnParams::init(cfg, rng, 0.5);
    Tensor h = random_tensor({1, 16}, rng);
    Tensor out = mla_forward(h, cfg, p);
    Tensor ckv = matmul_nt(h, p.w_dkv.value);
    Tensor v = matmul_nt(ckv, p.w_uv.value);
    Tensor expect = matmul_nt(v, p.wo.value);
    CHECK(max_abs_diff(out, expect) < 1e-14);
}

TEST_CASE("mla: matches the materialization oracle") {
    Rng rng(38);
    AttnConfig cfg = mla_cfg(16, 2, 4, 4, 4);
    AttnParams p = AttnParams::init(cfg, rng, 0.6);
    Tensor h = random_tensor({6, 16}, rng);
    CHECK(max_abs_diff(mla_forward(h, cfg, p), ref::mla_materialized(h, cfg, p)) < 1e-10);
}

TEST_CASE("mla: compression premise is enforced") {
    AttnConfig bad = mla_cfg(16, 2, 4, /*d_c=*/8, 0); // d_c == n_h*d_h
    Rng rng(2);
    CHECK_THROWS_AS(AttnParams::init(bad, rng, 0.5), ConfigError);
}

TEST_CASE("mla: shifted positions leave the score pattern unchanged") {
    // attention probabilities depend on position differences only
    Rng rng(39);
    AttnConfig cfg = mla_cfg(12, 2, 4, 4, 6);
    AttnParams p = AttnParams::init(cfg, rng, 0.5);
    Tensor h = random_tensor({5, 12}, rng);
    AttnCache c0, c1;
    std::vector<int64_t> base = iota_pos(5, 0), shifted = iota_pos(5, 17);
    Tensor o0 = attn_forward(h, cfg, p, &c0, base);
    Tensor o1 = attn_forward(h, cfg, p, &c1, shifted);
    for (size_t head = 0; head < c0.probs.size(); ++head) {
        CHECK(max_abs_diff(c0.probs[head], c1.probs[head]) < 1e-10);
    }
    CHECK(max_abs_diff(o0, o1) < 1e-10);
}

TEST_CASE("decode: first step equals the T=1 forward") {
    Rng rng(40);
    for (AttnVariant variant : {AttnVariant::MHA, AttnVariant::MQA, AttnVariant::GQA, AttnVariant::MLA}) {
        AttnConfig cfg = variant == AttnVariant::MLA ? mla_cfg(8, 2, 4, 3, 4) : mha_cfg(8, 2, 4);
        cfg.variant = variant;
        if (variant == AttnVariant::GQA) cfg.groups = 2;
        AttnParams p = AttnParams::init(cfg, rng, 0.5);
        Tensor h = random_tensor({1, 8}, rng);
        DecodeCache cache(cfg, 1);
        std::vector<AttnParams> layers;
        layers.push_back(std::move(p));
        std::vector<double> out = decode_step(cache, {h.row(0), 8}, cfg, layers);
        Tensor full = attn_forward(h, cfg, layers[0]);
        for (int j = 0; j < 8; ++j) CHECK(out[static_cast<size_t>(j)] == doctest::Approx(full.at(0, j)).epsilon(1e-14));
    }
}

TEST_CASE("decode: 8-step trajectory equals the full forward, and accounting holds") {
    Rng rng(41);
    for (AttnVariant variant : {AttnVariant::MHA, AttnVariant::MQA, AttnVariant::GQA, AttnVariant::MLA}) {
        AttnConfig cfg = variant == AttnVariant::MLA ? mla_cfg(8, 2, 4, 3, 4) : mha_cfg(8, 2, 4);
        cfg.variant = variant;
        if (variant == AttnVariant::GQA) cfg.groups = 2;
        AttnParams p = AttnParams::init(cfg, rng, 0.5);
        std::vector<AttnParams> layers;
        layers.push_back(std::move(p));
        Tensor h = random_tensor({8, 8}, rng);
        DecodeCache cache(cfg, 1);
        double worst = 0.0;
        for (int64_t t = 0; t < 8; ++t) {
            std::vector<double> out = decode_step(cache, {h.row(t), 8}, cfg, layers);
            Tensor prefix({t + 1, 8});
            for (int64_t r = 0; r <= t; ++r)
                for (int64_t j = 0; j < 8; ++j) prefix.at(r, j) = h.at(r, j);
            Tensor full = attn_forward(prefix, cfg, layers[0]);
            for (int64_t j = 0; j < 8; ++j) worst = std::max(worst, std::abs(out[static_cast<size_t>(j)] - full.at(t, j)));
        }
        CHECK(worst < 1e-10);
        CHECK(cache.stored_scalars() == kv_cache_scalars(cfg, 8, 1).total_scalars());
    }
}

TEST_CASE("decode: two-layer stack equals stacked full forwards") {
    Rng rng(43);
    AttnConfig cfg = mla_cfg(8, 2, 4, 3, 4);
    std::vector<AttnParams> layers;
    layers.push_back(AttnParams::init(cfg, rng, 0.5, "l0"));
    layers.push_back(AttnParams::init(cfg, rng, 0.5, "l1"));
    Tensor h = random_tensor({6, 8}, rng);
    DecodeCache cache(cfg, 2);
    double worst = 0.0;
    for (int64_t t = 0; t < 6; ++t) {
        std::vector<double> out = decode_step(cache, {h.row(t), 8}, cfg, layers);
        Tensor prefix({t + 1, 8});
        for (int64_t r = 0; r <= t; ++r)
            for (int64_t j = 0; j < 8; ++j) prefix.at(r, j) = h.at(r, j);
        Tensor full = attn_forward(attn_forward(prefix, cfg, layers[0]), cfg, layers[1]);
        for (int64_t j = 0; j < 8; ++j) worst = std::max(worst, std::abs(out[static_cast<size_t>(j)] - full.at(t, j)));
    }
    CHECK(worst < 1e-10);
    CHECK(cache.stored_scalars() == kv_cache_scalars(cfg, 6, 2).total_scalars());
}

TEST_CASE("decode: config mismatch raises a cache error") {
    Rng rng(44);
    AttnConfig cfg = mha_cfg(8, 2, 4);
    AttnParams p = AttnParams::init(cfg, rng, 0.5);
    DecodeCache cache(cfg, 1);
    AttnConfig other = mha_cfg(8, 4, 2);
    std::vector<AttnParams> layers;
    layers.push_back(std::move(p));
    std::vector<double> x(8, 0.0);
    CHECK_THROWS_AS(decode_step(cache, x, other, layers), CacheError);
}

TEST_CASE("causality: outputs ignore future positions") {
    Rng rng(45);
    for (AttnVariant variant : {AttnVariant::MHA, AttnVariant::MQA, AttnVariant::GQA, AttnVariant::MLA}) {
        AttnConfig cfg = variant == AttnVariant::MLA ? mla_cfg(8, 2, 4, 3, 4) : mha_cfg(8, 2, 4);
        cfg.variant = variant;
        if (variant == AttnVariant::GQA) cfg.groups = 2;
        AttnParams p = AttnParams::init(cfg, rng, 0.5);
        Tensor h = random_tensor({8, 8}, rng);
        Tensor out1 = attn_forward(h, cfg, p);
        Tensor h2 = h;
        for (int64_t t = 5; t < 8; ++t)
            for (int64_t j = 0; j < 8; ++j) h2.at(t, j) = rng.normal();
        Tensor out2 = attn_forward(h2, cfg, p);
        for (int64_t t = 0; t < 5; ++t)
            for (int64_t j = 0; j < 8; ++j) CHECK(out1.at(t, j) == out2.at(t, j));
    }
}

TEST_CASE("cache ordering: mla < mqa < gqa < mha when widths are ordered") {
    AttnConfig mha = mha_cfg(64, 8, 8);
    AttnConfig mqa = mha;
    mqa.variant = AttnVariant::MQA;
    AttnConfig gqa = mha;
    gqa.variant = AttnVariant::GQA;
    gqa.groups = 2;
    AttnConfig mla = mla_cfg(64, 8, 8, 10, 4); // d_c + d_R = 14 < 2*d_h = 16
    const int64_t a = kv_cache_scalars(mla, 4, 1).total_scalars();
    const int64_t b = kv_cache_scalars(mqa, 4, 1).total_scalars();
    const int64_t c = kv_cache_scalars(gqa, 4, 1).total_scalars();
    const int64_t d = kv_cache_scalars(mha, 4, 1).total_scalars();
    CHECK(a < b);
    CHECK(b < c);
    CHECK(c < d);
}

TEST_CASE("attention backward matches finite differences for every variant") {
    Rng rng(46);
    for (AttnVariant variant : {AttnVariant::MHA, AttnVariant::MQA, AttnVariant::GQA, AttnVariant::MLA}) {
        AttnConfig cfg = variant == AttnVariant::MLA ? mla_cfg(6, 2, 3, 2, 2) : mha_cfg(6, 2, 3);
        cfg.variant = variant;
        if (variant == AttnVariant::GQA) cfg.groups = 2;
        AttnParams p = AttnParams::init(cfg, rng, 0.6);
        Param hin = Param::randn("h", {4, 6}, rng, 0.8);
        Tensor probe = random_tensor({4, 6}, rng);

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
        Tensor dh = attn_backward(probe, cfg, p, cache);
        add_inplace(hin.grad, dh);
        GradCheckResult r = grad_check(f, ps, 1e-5);
        INFO(variant_name(variant), " worst=", r.worst_param, " rel=", r.max_rel_err);
        CHECK(r.max_rel_err < 1e-6);
    }
}

TEST_SUITE_END();
