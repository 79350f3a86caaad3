#include "doctest.h"

#include <cmath>

#include "latentkit/grad_check.hpp"
#include "latentkit/mtp.hpp"
#include "latentkit/rng.hpp"

using namespace latentkit;

namespace {

LMConfig toy_lm(int vocab = 8, int d = 8) {
    LMConfig c;
    c.vocab = vocab;
    c.d = d;
    c.n_layers = 1;
    c.d_ff = 8;
    c.attn.d = d;
    c.attn.n_h = 2;
    c.attn.d_h = 4;
    c.attn.d_c = 3;
    c.attn.d_R = 2;
    c.attn.variant = AttnVariant::MLA;
    return c;
}

std::vector<int> random_tokens(int t_len, int vocab, Rng& rng) {
    std::vector<int> v(static_cast<size_t>(t_len));
    for (int& x : v) x = static_cast<int>(rng.uniform_int(vocab));
    return v;
}

// next-token-only training step written out by hand, for the lambda = 0 case
void nexttoken_step(MTPModel& model, AdamOpt& opt, std::span<const std::vector<int>> batch) {
    std::vector<Param*> ps = model.params();
    zero_grads(ps);
    const double bn = static_cast<double>(batch.size());
    for (const std::vector<int>& tokens : batch) {
        const int T = static_cast<int>(tokens.size());
        TinyLM::Cache cache;
        Tensor h = model.trunk.forward_hidden(tokens, &cache);
        Tensor logits = model.trunk.logits_from_hidden(h);
        Tensor dlogits(logits.shape);
        const double coef = 1.0 / static_cast<double>(T - 1) / bn;
        for (int64_t t = 0; t + 1 < T; ++t) {
            const int target = tokens[static_cast<size_t>(t) + 1];
            const double* row = logits.row(t);
            double mx = row[0];
            for (int64_t j = 1; j < logits.shape[1]; ++j) mx = std::max(mx, row[j]);
            double sum = 0.0;
            for (int64_t j = 0; j < logits.shape[1]; ++j) sum += std::exp(row[j] - mx);
            for (int64_t j = 0; j < logits.shape[1]; ++j) {
                const double p = std::exp(row[j] - mx) / sum;
                dlogits.at(t, j) = coef * (p - (j == target ? 1.0 : 0.0));
            }
        }
        model.trunk.backward_logits(dlogits, cache);
    }
    opt.step(ps);
}

} // namespace

TEST_SUITE_BEGIN("mtp");

TEST_CASE("valid position counts equal T - k - 1 and shrink by one per depth") {
    Rng rng(50);
    for (int D = 1; D <= 3; ++D) {
        MTPConfig mc;
        mc.D = D;
        MTPModel model = MTPModel::init(toy_lm(), mc, rng);
        for (int T = D + 2; T <= 16; ++T) {
            std::vector<int> tokens = random_tokens(T, 8, rng);
            Tensor h = model.trunk.forward_hidden(tokens);
            DepthState prev = mtp_depth0(h);
            CHECK(prev.valid == T - 1);
            int last = prev.valid;
            for (int k = 1; k <= D; ++k) {
                DepthState st = mtp_module_forward(model, prev, tokens);
                CHECK(st.valid == T - k - 1);
                CHECK(st.valid == last - 1);
                CHECK(st.h.shape[0] == st.valid);
                CHECK(st.h.shape[1] == 8);
                last = st.valid;
                prev = std::move(st);
            }
        }
    }
}

TEST_CASE("D=1, T=3 leaves exactly one valid position") {
    Rng rng(51);
    MTPConfig mc;
    mc.D = 1;
    MTPModel model = MTPModel::init(toy_lm(), mc, rng);
    std::vector<int> tokens{1, 2, 3};
    DepthState st = mtp_module_forward(model, mtp_depth0(model.trunk.forward_hidden(tokens)), tokens);
    CHECK(st.valid == 1);
}

TEST_CASE("too-short sequences give an empty state, not an error") {
    Rng rng(52);
    MTPConfig mc;
    mc.D = 2;
    MTPModel model = MTPModel::init(toy_lm(), mc, rng);
    std::vector<int> tokens{1, 2, 3}; // T = 3, depth 2 has no slot
    DepthState d1 = mtp_module_forward(model, mtp_depth0(model.trunk.forward_hidden(tokens)), tokens);
    DepthState d2 = mtp_module_forward(model, d1, tokens);
    CHECK(d2.valid == 0);
    CHECK(mtp_depth_loss(model, d2, tokens) == 0.0);
}

TEST_CASE("depth beyond D is rejected") {
    Rng rng(53);
    MTPConfig mc;
    mc.D = 1;
    MTPModel model = MTPModel::init(toy_lm(), mc, rng);
    std::vector<int> tokens = random_tokens(6, 8, rng);
    DepthState d1 = mtp_module_forward(model, mtp_depth0(model.trunk.forward_hidden(tokens)), tokens);
    CHECK_THROWS_AS(mtp_module_forward(model, d1, tokens), IndexError);
}

TEST_CASE("zero inputs propagate to a zero depth state") {
    Rng rng(54);
    MTPConfig mc;
    mc.D = 1;
    MTPModel model = MTPModel::init(toy_lm(), mc, rng);
    std::fill(model.trunk.emb.value.data.begin(), model.trunk.emb.value.data.end(), 0.0);
    std::vector<int> tokens{0, 1, 2, 3, 4};
    DepthState prev;
    prev.k = 0;
    prev.seq_len = 5;
    prev.valid = 4;
    prev.h = Tensor({4, 8}); // zero prev state
    DepthState st = mtp_module_forward(model, prev, tokens);
    for (double v : st.h.data) CHECK(v == 0.0);
}

TEST_CASE("uniform-head depth losses match the closed form") {
    Rng rng(55);
    MTPConfig mc;
    mc.D = 2;
    MTPModel model = MTPModel::init(toy_lm(8, 8), mc, rng);
    std::fill(model.trunk.out_head.value.data.begin(), model.trunk.out_head.value.data.end(), 0.0);
    std::vector<int> tokens{1, 2, 3, 4}; // T = 4
    Tensor h = model.trunk.forward_hidden(tokens);
    DepthState d1 = mtp_module_forward(model, mtp_depth0(h), tokens);
    DepthState d2 = mtp_module_forward(model, d1, tokens);
    const double l1 = mtp_depth_loss(model, d1, tokens);
    const double l2 = mtp_depth_loss(model, d2, tokens);
    CHECK(std::abs(l1 - 2.0 * std::log(8.0) / 4.0) < 1e-12);
    CHECK(std::abs(l1 - 1.0397207708399179) < 1e-12);
    CHECK(std::abs(l2 - std::log(8.0) / 4.0) < 1e-12); // single term at k=2
}

TEST_CASE("a perfect predictor drives the depth loss to zero") {
    Rng rng(56);
    MTPConfig mc;
    mc.D = 1;
    MTPModel model = MTPModel::init(toy_lm(8, 8), mc, rng);
    std::vector<int> tokens{3, 3, 3, 3, 3};
    // head that puts all mass on token 3 whenever the state is all-ones
    std::fill(model.trunk.out_head.value.data.begin(), model.trunk.out_head.value.data.end(), 0.0);
    for (int j = 0; j < 8; ++j) model.trunk.out_head.value.at(3, j) = 1000.0 / 8.0;
    DepthState st;
    st.k = 1;
    st.seq_len = 5;
    st.valid = 3;
    st.h = Tensor({3, 8});
    for (double& v : st.h.data) v = 1.0;
    CHECK(mtp_depth_loss(model, st, tokens) < 1e-10);
}

TEST_CASE("misaligned targets are rejected") {
    Rng rng(57);
    MTPConfig mc;
    mc.D = 1;
    MTPModel model = MTPModel::init(toy_lm(), mc, rng);
    std::vector<int> tokens = random_tokens(6, 8, rng);
    DepthState st = mtp_module_forward(model, mtp_depth0(model.trunk.forward_hidden(tokens)), tokens);
    std::vector<int> wrong = random_tokens(7, 8, rng);
    CHECK_THROWS_AS(mtp_depth_loss(model, st, wrong), DimensionError);
}

TEST_CASE("total loss arithmetic") {
    MTPConfig mc;
    mc.D = 1;
    mc.lambda = 0.3;
    std::vector<double> one{1.0397207708399179};
    CHECK(mtp_total_loss(one, mc) == doctest::Approx(0.31191623125197536).epsilon(1e-13));

    std::vector<double> zeros3{0.0, 0.0, 0.0};
    mc.D = 3;
    CHECK(mtp_total_loss(zeros3, mc) == 0.0);

    mc.lambda = 3.0; // lambda == D cancels the mean
    std::vector<double> ls{0.5, 0.25, 1.0};
    CHECK(mtp_total_loss(ls, mc) == doctest::Approx(1.75).epsilon(1e-14));

    mc.D = 2;
    CHECK_THROWS_AS(mtp_total_loss(ls, mc), DimensionError);
}

TEST_CASE("lambda = 0 training equals next-token-only training") {
    Rng rng(58);
    MTPConfig mc;
    mc.D = 2;
    mc.lambda = 0.0;
    MTPModel a = MTPModel::init(toy_lm(), mc, rng);
    Rng rng2(58);
    MTPModel b = MTPModel::init(toy_lm(), mc, rng2);

    std::vector<std::vector<int>> batch;
    Rng data(99);
    for (int i = 0; i < 4; ++i) batch.push_back(random_tokens(8, 8, data));

    AdamOpt oa(1e-3), ob(1e-3);
    mtp_train_step(a, oa, batch);
    nexttoken_step(b, ob, batch);

    std::vector<Param*> pa = a.params(), pb = b.params();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) {
        REQUIRE(pa[i]->value.shape == pb[i]->value.shape);
        for (size_t j = 0; j < pa[i]->value.data.size(); ++j) {
            CHECK(pa[i]->value.data[j] == pb[i]->value.data[j]);
        }
    }
}

TEST_CASE("short sequences are rejected with the offending index") {
    Rng rng(59);
    MTPConfig mc;
    mc.D = 2;
    MTPModel model = MTPModel::init(toy_lm(), mc, rng);
    std::vector<std::vector<int>> batch{random_tokens(8, 8, rng), random_tokens(3, 8, rng)};
    AdamOpt opt(1e-3);
    CHECK_THROWS_WITH_AS(mtp_train_step(model, opt, batch), doctest::Contains("sequence 1"),
                         UsageError);
}

TEST_CASE("causal chain: the target token never leaks into its own prediction") {
    Rng rng(60);
    MTPConfig mc;
    mc.D = 2;
    MTPModel model = MTPModel::init(toy_lm(), mc, rng);
    std::vector<int> tokens = random_tokens(8, 8, rng);

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
            for (int64_t j = 0; j < a.shape[1]; ++j) CHECK(a.at(s, j) == b.at(s, j));
        }
    }
}

TEST_CASE("teacher forcing: predictions never feed the next depth") {
    Rng rng(61);
    MTPConfig mc;
    mc.D = 2;
    MTPModel model = MTPModel::init(toy_lm(), mc, rng);
    std::vector<int> tokens = random_tokens(8, 8, rng);
    auto states = [&]() {
        Tensor h = model.trunk.forward_hidden(tokens);
        DepthState d1 = mtp_module_forward(model, mtp_depth0(h), tokens);
        DepthState d2 = mtp_module_forward(model, d1, tokens);
        return std::pair{d1.h, d2.h};
    };
    auto [h1a, h2a] = states();
    for (double& v : model.trunk.out_head.value.data) v += 2.5; // output head cannot matter
    auto [h1b, h2b] = states();
    for (size_t i = 0; i < h1a.data.size(); ++i) CHECK(h1a.data[i] == h1b.data[i]);
    for (size_t i = 0; i < h2a.data.size(); ++i) CHECK(h2a.data[i] == h2b.data[i]);
}

TEST_CASE("objective is invariant to batch order") {
    Rng rng(62);
    MTPConfig mc;
    mc.D = 2;
    mc.lambda = 0.4;
    MTPModel model = MTPModel::init(toy_lm(), mc, rng);
    std::vector<std::vector<int>> batch;
    for (int i = 0; i < 3; ++i) batch.push_back(random_tokens(8, 8, rng));
    MTPReport r1 = mtp_objective(model, batch);
    std::vector<std::vector<int>> reversed(batch.rbegin(), batch.rend());
    MTPReport r2 = mtp_objective(model, reversed);
    CHECK(std::abs(r1.total - r2.total) < 1e-12);
    CHECK(std::abs(r1.main_loss - r2.main_loss) < 1e-12);
    for (int k = 0; k < 2; ++k)
        CHECK(std::abs(r1.depth_losses[static_cast<size_t>(k)] - r2.depth_losses[static_cast<size_t>(k)]) < 1e-12);
}

TEST_CASE("full MTP gradient matches finite differences") {
    Rng rng(63);
    MTPConfig mc;
    mc.D = 2;
    mc.lambda = 0.3;
    MTPModel model = MTPModel::init(toy_lm(), mc, rng);
    std::vector<std::vector<int>> batch{random_tokens(6, 8, rng), random_tokens(7, 8, rng)};
    std::vector<Param*> ps = model.params();
    zero_grads(ps);
    mtp_loss_and_grads(model, batch);
    auto f = [&]() { return mtp_objective(model, batch).total; };
    GradCheckResult r = grad_check(f, ps, 1e-5);
    INFO("worst=", r.worst_param, " idx=", r.worst_index, " analytic=", r.analytic,
         " numeric=", r.numeric);
    CHECK(r.max_rel_err < 1e-4);
}

TEST_SUITE_END();
