#include "latentkit/mtp.hpp"

#include <cmath>

namespace latentkit {

namespace {

struct SeqWork {
    TinyLM::Cache trunk_cache;
    Tensor h0;
    std::vector<DepthState> states;            // index k-1
    std::vector<MTPModule::Cache> module_caches;
};

} // namespace

void MTPConfig::validate() const {
    if (D < 1) throw ConfigError("mtp config: D must be >= 1");
    if (lambda < 0.0) throw ConfigError("mtp config: lambda must be >= 0");
}

MTPModel MTPModel::init(const LMConfig& lm_cfg, const MTPConfig& mcfg, Rng& rng) {
    mcfg.validate();
    MTPModel m;
    m.trunk = TinyLM::init(lm_cfg, rng);
    m.mcfg = mcfg;
    for (int k = 1; k <= mcfg.D; ++k) {
        const std::string prefix = "mtp" + std::to_string(k);
        MTPModule mod;
        mod.norm_prev.gain = Param::full(prefix + ".norm_prev.gain", {lm_cfg.d}, 1.0);
        mod.norm_emb.gain = Param::full(prefix + ".norm_emb.gain", {lm_cfg.d}, 1.0);
        mod.norm_prev.eps = lm_cfg.rms_eps;
        mod.norm_emb.eps = lm_cfg.rms_eps;
        mod.proj.w = Param::randn(prefix + ".proj.w", {lm_cfg.d, 2 * lm_cfg.d}, rng, lm_cfg.init_std);
        mod.trm = TransformerBlock::init(lm_cfg.attn, lm_cfg.d_ff, rng, lm_cfg.init_std,
                                         prefix + ".trm");
        mod.trm.norm1.eps = lm_cfg.rms_eps;
        mod.trm.norm2.eps = lm_cfg.rms_eps;
        m.modules.push_back(std::move(mod));
    }
    return m;
}

std::vector<Param*> MTPModel::params() {
    std::vector<Param*> out = trunk.params();
    for (MTPModule& mod : modules) {
        collect_unique(out, std::vector<Param*>{&mod.norm_prev.gain, &mod.norm_emb.gain,
                                                &mod.proj.w});
        collect_unique(out, mod.trm.params());
    }
    return out;
}

DepthState mtp_depth0(const Tensor& trunk_hidden) {
    DepthState st;
    st.k = 0;
    st.seq_len = static_cast<int>(trunk_hidden.shape[0]);
    st.valid = st.seq_len - 1;
    if (st.valid > 0) {
        st.h = Tensor({st.valid, trunk_hidden.shape[1]});
        for (int64_t s = 0; s < st.valid; ++s)
            for (int64_t j = 0; j < trunk_hidden.shape[1]; ++j) st.h.at(s, j) = trunk_hidden.at(s, j);
    } else {
        st.valid = 0;
    }
    return st;
}

DepthState mtp_module_forward(MTPModel& model, const DepthState& prev,
                              std::span<const int> tokens, MTPModule::Cache* cache) {
    const int k = prev.k + 1;
    if (k > model.mcfg.D) {
        throw IndexError("mtp_module_forward: depth " + std::to_string(k) + " exceeds D=" +
                         std::to_string(model.mcfg.D));
    }
    const int T = static_cast<int>(tokens.size());
    if (prev.seq_len != T) {
        throw DimensionError("mtp_module_forward: prev state covers a sequence of length " +
                             std::to_string(prev.seq_len) + ", tokens have " + std::to_string(T));
    }
    DepthState st;
    st.k = k;
    st.seq_len = T;
    st.valid = T - k - 1;
    if (st.valid <= 0) {
        st.valid = 0;
        return st; // empty state, not an error
    }
    MTPModule& mod = model.modules[static_cast<size_t>(k - 1)];
    const int d = model.trunk.cfg.d;

    Tensor prev_rows({st.valid, d});
    for (int64_t s = 0; s < st.valid; ++s)
        for (int64_t j = 0; j < d; ++j) prev_rows.at(s, j) = prev.h.at(s, j);

    Tensor emb_rows({st.valid, d});
    std::vector<int> emb_tokens(static_cast<size_t>(st.valid));
    for (int64_t s = 0; s < st.valid; ++s) {
        const int tok = tokens[static_cast<size_t>(s) + static_cast<size_t>(k)];
        emb_tokens[static_cast<size_t>(s)] = tok;
        const double* e = model.trunk.emb.value.row(tok);
        for (int64_t j = 0; j < d; ++j) emb_rows.at(s, j) = e[j];
    }

    MTPModule::Cache local;
    MTPModule::Cache* cc = cache ? cache : &local;
    Tensor a = mod.norm_prev.forward(prev_rows, cache ? &cc->n_prev : nullptr);
    Tensor b = mod.norm_emb.forward(emb_rows, cache ? &cc->n_emb : nullptr);
    Tensor concat({st.valid, 2 * static_cast<int64_t>(d)});
    for (int64_t s = 0; s < st.valid; ++s) {
        for (int64_t j = 0; j < d; ++j) {
            concat.at(s, j) = a.at(s, j);
            concat.at(s, d + j) = b.at(s, j);
        }
    }
    Tensor hp = mod.proj.forward(concat);
    Tensor hk = mod.trm.forward(hp, cache ? &cc->trm : nullptr);
    if (cache) {
        cc->concat = std::move(concat);
        cc->emb_tokens = std::move(emb_tokens);
        cc->prev_rows = std::move(prev_rows);
    }
    st.h = std::move(hk);
    return st;
}

double mtp_depth_loss(const MTPModel& model, const DepthState& state,
                      std::span<const int> targets) {
    const int T = static_cast<int>(targets.size());
    if (state.seq_len != T || state.valid != std::max(0, T - state.k - 1)) {
        throw DimensionError("mtp_depth_loss: state (k=" + std::to_string(state.k) + ", valid=" +
                             std::to_string(state.valid) + ") misaligned with " +
                             std::to_string(T) + " targets");
    }
    if (state.valid == 0) return 0.0;
    Tensor logits = model.trunk.logits_from_hidden(state.h);
    double acc = 0.0;
    for (int64_t s = 0; s < state.valid; ++s) {
        const int target = targets[static_cast<size_t>(s) + static_cast<size_t>(state.k) + 1];
        acc += -row_log_softmax_at(logits, s, target);
    }
    const double denom = model.mcfg.normalize_by_valid ? static_cast<double>(state.valid)
                                                       : static_cast<double>(T);
    return acc / denom;
}

double mtp_total_loss(std::span<const double> depth_losses, const MTPConfig& cfg) {
    cfg.validate();
    if (static_cast<int>(depth_losses.size()) != cfg.D) {
        throw DimensionError("mtp_total_loss: expected " + std::to_string(cfg.D) + " losses, got " +
                             std::to_string(depth_losses.size()));
    }
    double sum = 0.0;
    for (double l : depth_losses) sum += l;
    return cfg.lambda / static_cast<double>(cfg.D) * sum;
}

namespace {

MTPReport mtp_pass(MTPModel& model, std::span<const std::vector<int>> batch, bool with_grads) {
    model.mcfg.validate();
    if (batch.empty()) throw UsageError("mtp: empty batch");
    const int D = model.mcfg.D;
    const double lambda = model.mcfg.lambda;
    const bool run_depths = lambda > 0.0;
    for (size_t bi = 0; bi < batch.size(); ++bi) {
        if (static_cast<int>(batch[bi].size()) <= D + 1) {
            throw UsageError("mtp: sequence " + std::to_string(bi) + " of length " +
                             std::to_string(batch[bi].size()) + " too short for depth " +
                             std::to_string(D) + " (need length > D+1)");
        }
    }

    MTPReport rep;
    rep.depth_losses.assign(static_cast<size_t>(D), 0.0);
    if (model.trunk.cfg.use_moe) rep.routing.resize(model.trunk.blocks.size());
    const double bn = static_cast<double>(batch.size());

    for (const std::vector<int>& tokens : batch) {
        const int T = static_cast<int>(tokens.size());
        SeqWork w;
        Tensor h0 = model.trunk.forward_hidden(tokens, with_grads ? &w.trunk_cache : nullptr);
        if (with_grads && model.trunk.cfg.use_moe) {
            for (size_t l = 0; l < w.trunk_cache.routing.size(); ++l) {
                for (RoutingDecision& rd : w.trunk_cache.routing[l]) {
                    rep.routing[l].push_back(std::move(rd));
                }
            }
        }
        Tensor main_logits = model.trunk.logits_from_hidden(h0);
        double main = 0.0;
        for (int64_t t = 0; t + 1 < T; ++t) {
            main += -row_log_softmax_at(main_logits, t, tokens[static_cast<size_t>(t) + 1]);
        }
        main /= static_cast<double>(T - 1);
        rep.main_loss += main / bn;

        std::vector<DepthState> states;
        std::vector<MTPModule::Cache> caches(static_cast<size_t>(D));
        std::vector<double> seq_depth_losses(static_cast<size_t>(D), 0.0);
        if (run_depths) {
            DepthState prev = mtp_depth0(h0);
            for (int k = 1; k <= D; ++k) {
                DepthState st = mtp_module_forward(model, prev, tokens,
                                                   with_grads ? &caches[static_cast<size_t>(k - 1)]
                                                              : nullptr);
                seq_depth_losses[static_cast<size_t>(k - 1)] = mtp_depth_loss(model, st, tokens);
                states.push_back(st);
                prev = std::move(st);
            }
            for (int k = 0; k < D; ++k) {
                rep.depth_losses[static_cast<size_t>(k)] += seq_depth_losses[static_cast<size_t>(k)] / bn;
            }
        }

        if (with_grads) {
            const int d = model.trunk.cfg.d;
            // per-depth loss gradient at the shared head, chained down to the trunk
            Tensor d_next; // gradient flowing into state k (from depth k+1's module)
            for (int k = D; k >= 1 && run_depths; --k) {
                const DepthState& st = states[static_cast<size_t>(k - 1)];
                Tensor d_state;
                if (st.valid > 0) {
                    d_state = Tensor({st.valid, d});
                    const double denom = model.mcfg.normalize_by_valid
                                             ? static_cast<double>(st.valid)
                                             : static_cast<double>(T);
                    const double coef = lambda / static_cast<double>(D) / denom / bn;
                    Tensor logits = model.trunk.logits_from_hidden(st.h);
                    Tensor dlogits(logits.shape);
                    for (int64_t s = 0; s < st.valid; ++s) {
                        const int target = tokens[static_cast<size_t>(s) + static_cast<size_t>(k) + 1];
                        add_cross_entropy_grad(logits, s, target, coef, dlogits);
                    }
                    add_inplace(model.trunk.out_head.grad, matmul_tn(dlogits, st.h));
                    d_state = matmul(dlogits, model.trunk.out_head.value);
                }
                if (d_next.numel() > 0) {
                    // deeper module consumed our slots 0..valid_{k+1}-1
                    for (int64_t s = 0; s < d_next.shape[0]; ++s)
                        for (int64_t j = 0; j < d; ++j) d_state.at(s, j) += d_next.at(s, j);
                }
                if (st.valid == 0) {
                    d_next = Tensor();
                    continue;
                }
                // backward through module k
                MTPModule& mod = model.modules[static_cast<size_t>(k - 1)];
                MTPModule::Cache& cc = caches[static_cast<size_t>(k - 1)];
                Tensor dhp = mod.trm.backward(d_state, cc.trm);
                Tensor dconcat = mod.proj.backward(dhp, cc.concat);
                Tensor da({st.valid, d}), db({st.valid, d});
                for (int64_t s = 0; s < st.valid; ++s) {
                    for (int64_t j = 0; j < d; ++j) {
                        da.at(s, j) = dconcat.at(s, j);
                        db.at(s, j) = dconcat.at(s, d + j);
                    }
                }
                Tensor dprev = mod.norm_prev.backward(da, cc.n_prev);
                Tensor demb = mod.norm_emb.backward(db, cc.n_emb);
                for (int64_t s = 0; s < st.valid; ++s) {
                    double* g = model.trunk.emb.grad.row(cc.emb_tokens[static_cast<size_t>(s)]);
                    for (int64_t j = 0; j < d; ++j) g[j] += demb.at(s, j);
                }
                d_next = std::move(dprev);
            }
            // main loss gradient plus the depth-1 chain contribution
            Tensor dlogits_main(main_logits.shape);
            const double main_coef = 1.0 / static_cast<double>(T - 1) / bn;
            for (int64_t t = 0; t + 1 < T; ++t) {
                add_cross_entropy_grad(main_logits, t, tokens[static_cast<size_t>(t) + 1], main_coef,
                                       dlogits_main);
            }
            add_inplace(model.trunk.out_head.grad, matmul_tn(dlogits_main, h0));
            Tensor dh0 = matmul(dlogits_main, model.trunk.out_head.value);
            if (d_next.numel() > 0) {
                for (int64_t s = 0; s < d_next.shape[0]; ++s)
                    for (int64_t j = 0; j < model.trunk.cfg.d; ++j) dh0.at(s, j) += d_next.at(s, j);
            }
            model.trunk.backward_hidden(dh0, w.trunk_cache);
        }
    }

    rep.mtp_loss = run_depths ? mtp_total_loss(rep.depth_losses, model.mcfg) : 0.0;
    rep.total = rep.main_loss + rep.mtp_loss;
    return rep;
}

} // namespace

MTPReport mtp_objective(MTPModel& model, std::span<const std::vector<int>> batch) {
    return mtp_pass(model, batch, false);
}

MTPReport mtp_loss_and_grads(MTPModel& model, std::span<const std::vector<int>> batch) {
    return mtp_pass(model, batch, true);
}

MTPReport mtp_train_step(MTPModel& model, AdamOpt& opt, std::span<const std::vector<int>> batch) {
    std::vector<Param*> ps = model.params();
    zero_grads(ps);
    MTPReport rep = mtp_loss_and_grads(model, batch);
    if (!std::isfinite(rep.total)) throw NumericError("mtp_train_step: non-finite loss");
    opt.step(ps);
    return rep;
}

} // namespace latentkit
