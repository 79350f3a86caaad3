#include "latentkit/model.hpp"

#include <cmath>

namespace latentkit {

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

} // namespace

Tensor RMSNormLayer::forward(const Tensor& x, Cache* c) const {
    const int64_t d = x.shape.back();
    const int64_t rows = x.numel() / d;
    Tensor y(x.shape);
    std::vector<double> inv(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const double* px = x.data.data() + r * d;
        double ms = 0.0;
        for (int64_t j = 0; j < d; ++j) ms += px[j] * px[j];
        ms = ms / static_cast<double>(d) + eps;
        const double iv = ms > 0.0 ? 1.0 / std::sqrt(ms) : 0.0;
        inv[static_cast<size_t>(r)] = iv;
        double* py = y.data.data() + r * d;
        for (int64_t j = 0; j < d; ++j) py[j] = gain.value.data[static_cast<size_t>(j)] * px[j] * iv;
    }
    if (c) {
        c->x = x;
        c->inv = std::move(inv);
    }
    return y;
}

Tensor RMSNormLayer::backward(const Tensor& dy, const Cache& c) {
    const int64_t d = c.x.shape.back();
    const int64_t rows = c.x.numel() / d;
    Tensor dx(c.x.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const double* px = c.x.data.data() + r * d;
        const double* pdy = dy.data.data() + r * d;
        double* pdx = dx.data.data() + r * d;
        const double iv = c.inv[static_cast<size_t>(r)];
        double dot = 0.0; // sum_j dy_j g_j x_j
        for (int64_t j = 0; j < d; ++j) {
            dot += pdy[j] * gain.value.data[static_cast<size_t>(j)] * px[j];
            gain.grad.data[static_cast<size_t>(j)] += pdy[j] * px[j] * iv;
        }
        const double k = iv * iv * iv / static_cast<double>(d);
        for (int64_t j = 0; j < d; ++j) {
            pdx[j] = gain.value.data[static_cast<size_t>(j)] * iv * pdy[j] - k * px[j] * dot;
        }
    }
    return dx;
}

Tensor FFNLayer::forward(const Tensor& x, Cache* c) const {
    Tensor pre = matmul_nt(x, w1.value);
    Tensor hidden = pre;
    for (double& z : hidden.data) z = silu(z);
    Tensor y = matmul_nt(hidden, w2.value);
    if (c) {
        c->x = x;
        c->pre = std::move(pre);
        c->hidden = std::move(hidden);
    }
    return y;
}

Tensor FFNLayer::backward(const Tensor& dy, const Cache& c) {
    add_inplace(w2.grad, matmul_tn(dy, c.hidden));
    Tensor dhidden = matmul(dy, w2.value);
    // d silu(z) = sigmoid(z) (1 + z (1 - sigmoid(z)))
    for (size_t i = 0; i < dhidden.data.size(); ++i) {
        const double z = c.pre.data[i];
        const double s = sigmoid(z);
        dhidden.data[i] *= s * (1.0 + z * (1.0 - s));
    }
    add_inplace(w1.grad, matmul_tn(dhidden, c.x));
    return matmul(dhidden, w1.value);
}

Tensor MoELayer::forward(const Tensor& x, Cache* c, std::vector<RoutingDecision>* decisions,
                         MoEInstrumentation* instr) const {
    const int64_t t_len = x.shape[0];
    Tensor out({t_len, x.shape[1]});
    if (c) c->tok.assign(static_cast<size_t>(t_len), {});
    for (int64_t t = 0; t < t_len; ++t) {
        std::span<const double> u(x.row(t), static_cast<size_t>(x.shape[1]));
        std::vector<double> s = affinity_scores(u, p.centroids.value);
        std::vector<int> selected = route_topk(s, bias.b, cfg.K_r);
        std::vector<double> g = gate_values(s, selected);
        TokenCache tc;
        if (c) {
            tc.u.assign(u.begin(), u.end());
            tc.s = s;
            tc.g = g;
            tc.selected = selected;
        }
        double* orow = out.row(t);
        for (const ExpertFFN& e : p.shared) {
            std::vector<double> pre(static_cast<size_t>(cfg.d_ff));
            for (int64_t i = 0; i < cfg.d_ff; ++i) {
                double acc = 0.0;
                const double* w = e.w1.value.row(i);
                for (int j = 0; j < cfg.d; ++j) acc += w[j] * u[static_cast<size_t>(j)];
                pre[static_cast<size_t>(i)] = acc;
            }
            std::vector<double> hidden(pre.size());
            for (size_t i = 0; i < pre.size(); ++i) hidden[i] = silu(pre[i]);
            for (int64_t i = 0; i < cfg.d; ++i) {
                double acc = 0.0;
                const double* w = e.w2.value.row(i);
                for (int64_t j = 0; j < cfg.d_ff; ++j) acc += w[j] * hidden[static_cast<size_t>(j)];
                orow[i] += acc;
            }
            if (instr) ++instr->expert_evals;
            if (c) {
                tc.s_pre.push_back(std::move(pre));
                tc.s_hidden.push_back(std::move(hidden));
            }
        }
        for (int ei : selected) {
            const ExpertFFN& e = p.routed[static_cast<size_t>(ei)];
            std::vector<double> pre(static_cast<size_t>(cfg.d_ff));
            for (int64_t i = 0; i < cfg.d_ff; ++i) {
                double acc = 0.0;
                const double* w = e.w1.value.row(i);
                for (int j = 0; j < cfg.d; ++j) acc += w[j] * u[static_cast<size_t>(j)];
                pre[static_cast<size_t>(i)] = acc;
            }
            std::vector<double> hidden(pre.size());
            for (size_t i = 0; i < pre.size(); ++i) hidden[i] = silu(pre[i]);
            std::vector<double> y(static_cast<size_t>(cfg.d));
            for (int64_t i = 0; i < cfg.d; ++i) {
                double acc = 0.0;
                const double* w = e.w2.value.row(i);
                for (int64_t j = 0; j < cfg.d_ff; ++j) acc += w[j] * hidden[static_cast<size_t>(j)];
                y[static_cast<size_t>(i)] = acc;
            }
            const double gi = g[static_cast<size_t>(ei)];
            for (int64_t i = 0; i < cfg.d; ++i) orow[i] += gi * y[static_cast<size_t>(i)];
            if (instr) ++instr->expert_evals;
            if (c) {
                tc.pre.push_back(std::move(pre));
                tc.hidden.push_back(std::move(hidden));
                tc.y.push_back(std::move(y));
            }
        }
        if (decisions) {
            RoutingDecision rd;
            rd.token = t;
            rd.selected = selected;
            rd.affinity = std::move(s);
            rd.gate = std::move(g);
            decisions->push_back(std::move(rd));
        }
        if (c) c->tok[static_cast<size_t>(t)] = std::move(tc);
    }
    return out;
}

Tensor MoELayer::backward(const Tensor& dy, const Cache& c) {
    const int64_t t_len = dy.shape[0];
    const int64_t d = dy.shape[1];
    Tensor dx({t_len, d});
    for (int64_t t = 0; t < t_len; ++t) {
        const TokenCache& tc = c.tok[static_cast<size_t>(t)];
        const double* pdy = dy.row(t);
        double* pdx = dx.row(t);

        // shared experts: plain FFN backward, gate 1
        for (size_t se = 0; se < p.shared.size(); ++se) {
            ExpertFFN& e = p.shared[se];
            const std::vector<double>& pre = tc.s_pre[se];
            const std::vector<double>& hidden = tc.s_hidden[se];
            std::vector<double> dhid(static_cast<size_t>(cfg.d_ff), 0.0);
            for (int64_t i = 0; i < d; ++i) {
                for (int64_t j = 0; j < cfg.d_ff; ++j) {
                    e.w2.grad.at(i, j) += pdy[i] * hidden[static_cast<size_t>(j)];
                    dhid[static_cast<size_t>(j)] += pdy[i] * e.w2.value.at(i, j);
                }
            }
            for (int64_t j = 0; j < cfg.d_ff; ++j) {
                const double z = pre[static_cast<size_t>(j)];
                const double s = sigmoid(z);
                const double dpre = dhid[static_cast<size_t>(j)] * s * (1.0 + z * (1.0 - s));
                for (int64_t i = 0; i < d; ++i) {
                    e.w1.grad.at(j, i) += dpre * tc.u[static_cast<size_t>(i)];
                    pdx[i] += dpre * e.w1.value.at(j, i);
                }
            }
        }

        // routed experts: expert path plus gate gradients
        double s_sum = 0.0;
        for (int ei : tc.selected) s_sum += tc.s[static_cast<size_t>(ei)];
        std::vector<double> dgate(tc.selected.size(), 0.0); // dJ/dg for each selected
        for (size_t si = 0; si < tc.selected.size(); ++si) {
            const int ei = tc.selected[si];
            ExpertFFN& e = p.routed[static_cast<size_t>(ei)];
            const double gi = tc.g[static_cast<size_t>(ei)];
            const std::vector<double>& pre = tc.pre[si];
            const std::vector<double>& hidden = tc.hidden[si];
            const std::vector<double>& y = tc.y[si];
            for (int64_t i = 0; i < d; ++i) dgate[si] += pdy[i] * y[static_cast<size_t>(i)];
            std::vector<double> dhid(static_cast<size_t>(cfg.d_ff), 0.0);
            for (int64_t i = 0; i < d; ++i) {
                const double dyi = pdy[i] * gi;
                for (int64_t j = 0; j < cfg.d_ff; ++j) {
                    e.w2.grad.at(i, j) += dyi * hidden[static_cast<size_t>(j)];
                    dhid[static_cast<size_t>(j)] += dyi * e.w2.value.at(i, j);
                }
            }
            for (int64_t j = 0; j < cfg.d_ff; ++j) {
                const double z = pre[static_cast<size_t>(j)];
                const double s = sigmoid(z);
                const double dpre = dhid[static_cast<size_t>(j)] * s * (1.0 + z * (1.0 - s));
                for (int64_t i = 0; i < d; ++i) {
                    e.w1.grad.at(j, i) += dpre * tc.u[static_cast<size_t>(i)];
                    pdx[i] += dpre * e.w1.value.at(j, i);
                }
            }
        }
        // g_i = s_i / S over the selected set:
        // ds_j = (dg_j - sum_i dg_i g_i) / S
        double mix = 0.0;
        for (size_t si = 0; si < tc.selected.size(); ++si) {
            mix += dgate[si] * tc.g[static_cast<size_t>(tc.selected[si])];
        }
        for (size_t si = 0; si < tc.selected.size(); ++si) {
            const int ei = tc.selected[si];
            const double ds = (dgate[si] - mix) / s_sum;
            const double sv = tc.s[static_cast<size_t>(ei)];
            const double ddot = ds * sv * (1.0 - sv);
            for (int64_t i = 0; i < d; ++i) {
                p.centroids.grad.at(ei, i) += ddot * tc.u[static_cast<size_t>(i)];
                pdx[i] += ddot * p.centroids.value.at(ei, i);
            }
        }
    }
    return dx;
}

TransformerBlock TransformerBlock::init(const AttnConfig& acfg, int d_ff, Rng& rng, double stddev,
                                        const std::string& prefix) {
    TransformerBlock b;
    b.acfg = acfg;
    b.attn = AttnParams::init(acfg, rng, stddev, prefix + ".attn");
    b.norm1.gain = Param::full(prefix + ".norm1.gain", {acfg.d}, 1.0);
    b.norm2.gain = Param::full(prefix + ".norm2.gain", {acfg.d}, 1.0);
    b.ffn.w1 = Param::randn(prefix + ".ffn.w1", {d_ff, acfg.d}, rng, stddev);
    b.ffn.w2 = Param::randn(prefix + ".ffn.w2", {acfg.d, d_ff}, rng, stddev);
    return b;
}

TransformerBlock TransformerBlock::init_moe(const AttnConfig& acfg, const MoEConfig& mcfg,
                                            Rng& rng, double stddev, const std::string& prefix) {
    TransformerBlock b;
    b.acfg = acfg;
    b.attn = AttnParams::init(acfg, rng, stddev, prefix + ".attn");
    b.norm1.gain = Param::full(prefix + ".norm1.gain", {acfg.d}, 1.0);
    b.norm2.gain = Param::full(prefix + ".norm2.gain", {acfg.d}, 1.0);
    b.use_moe = true;
    b.moe.cfg = mcfg;
    b.moe.p = MoEParams::init(mcfg, rng, stddev, prefix + ".moe");
    b.moe.bias = ExpertBiasState(mcfg.N_r);
    return b;
}

Tensor TransformerBlock::forward(const Tensor& x, Cache* c,
                                 std::vector<RoutingDecision>* decisions) const {
    Cache local;
    Cache* cc = c ? c : &local;
    Tensor n1 = norm1.forward(x, &cc->n1);
    Tensor a = attn_forward(n1, acfg, attn, c ? &cc->att : nullptr);
    add_inplace(a, x);
    Tensor n2 = norm2.forward(a, &cc->n2);
    Tensor f = use_moe ? moe.forward(n2, c ? &cc->moe : nullptr, decisions)
                       : ffn.forward(n2, c ? &cc->ffn : nullptr);
    add_inplace(f, a);
    return f;
}

Tensor TransformerBlock::backward(const Tensor& dy, const Cache& c) {
    Tensor df = use_moe ? moe.backward(dy, c.moe) : ffn.backward(dy, c.ffn);
    Tensor da = norm2.backward(df, c.n2);
    add_inplace(da, dy);
    Tensor dn1 = attn_backward(da, acfg, attn, c.att);
    Tensor dx = norm1.backward(dn1, c.n1);
    add_inplace(dx, da);
    return dx;
}

std::vector<Param*> TransformerBlock::params() {
    std::vector<Param*> out = attn.params(acfg);
    out.push_back(&norm1.gain);
    out.push_back(&norm2.gain);
    if (use_moe) {
        for (Param* p : moe.params()) out.push_back(p);
    } else {
        out.push_back(&ffn.w1);
        out.push_back(&ffn.w2);
    }
    return out;
}

TinyLM TinyLM::init(const LMConfig& cfg, Rng& rng) {
    TinyLM m;
    m.cfg = cfg;
    m.emb = Param::randn("emb", {cfg.vocab, cfg.d}, rng, cfg.init_std);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string prefix = "block" + std::to_string(l);
        m.blocks.push_back(cfg.use_moe
                               ? TransformerBlock::init_moe(cfg.attn, cfg.moe, rng, cfg.init_std, prefix)
                               : TransformerBlock::init(cfg.attn, cfg.d_ff, rng, cfg.init_std, prefix));
        m.blocks.back().norm1.eps = cfg.rms_eps;
        m.blocks.back().norm2.eps = cfg.rms_eps;
    }
    m.final_norm.gain = Param::full("final_norm.gain", {cfg.d}, 1.0);
    m.final_norm.eps = cfg.rms_eps;
    m.out_head = Param::randn("out_head", {cfg.vocab, cfg.d}, rng, cfg.init_std);
    return m;
}

Tensor TinyLM::forward_hidden(std::span<const int> tokens, Cache* c) const {
    const int64_t t_len = static_cast<int64_t>(tokens.size());
    if (t_len == 0) throw UsageError("forward_hidden: empty token sequence");
    Tensor x({t_len, cfg.d});
    for (int64_t t = 0; t < t_len; ++t) {
        const int tok = tokens[static_cast<size_t>(t)];
        if (tok < 0 || tok >= cfg.vocab) {
            throw IndexError("forward_hidden: token " + std::to_string(tok) + " out of vocab " +
                             std::to_string(cfg.vocab));
        }
        const double* e = emb.value.row(tok);
        for (int j = 0; j < cfg.d; ++j) x.at(t, j) = e[j];
    }
    if (c) {
        c->tokens.assign(tokens.begin(), tokens.end());
        c->blk.assign(blocks.size(), {});
        c->routing.assign(blocks.size(), {});
    }
    for (size_t l = 0; l < blocks.size(); ++l) {
        x = blocks[l].forward(x, c ? &c->blk[l] : nullptr, c ? &c->routing[l] : nullptr);
    }
    Tensor h = final_norm.forward(x, c ? &c->fin : nullptr);
    if (c) c->hidden = h;
    return h;
}

Tensor TinyLM::logits_from_hidden(const Tensor& hidden) const {
    return matmul_nt(hidden, out_head.value);
}

Tensor TinyLM::forward_logits(std::span<const int> tokens, Cache* c) const {
    return logits_from_hidden(forward_hidden(tokens, c));
}

void TinyLM::backward_hidden(const Tensor& dh, const Cache& c) {
    Tensor dx = final_norm.backward(dh, c.fin);
    for (size_t l = blocks.size(); l-- > 0;) {
        dx = blocks[l].backward(dx, c.blk[l]);
    }
    for (int64_t t = 0; t < dx.shape[0]; ++t) {
        const int tok = c.tokens[static_cast<size_t>(t)];
        double* g = emb.grad.row(tok);
        for (int j = 0; j < cfg.d; ++j) g[j] += dx.at(t, j);
    }
}

void TinyLM::backward_logits(const Tensor& dlogits, const Cache& c) {
    add_inplace(out_head.grad, matmul_tn(dlogits, c.hidden));
    backward_hidden(matmul(dlogits, out_head.value), c);
}

std::vector<Param*> TinyLM::params() {
    std::vector<Param*> out{&emb};
    for (TransformerBlock& b : blocks) collect_unique(out, b.params());
    out.push_back(&final_norm.gain);
    out.push_back(&out_head);
    return out;
}

std::vector<double> TinyLM::token_logprobs(std::span<const int> tokens, size_t start) const {
    if (start < 1 || start > tokens.size()) {
        throw UsageError("token_logprobs: start must be in [1, size]");
    }
    Tensor logits = forward_logits(tokens);
    std::vector<double> lp;
    lp.reserve(tokens.size() - start);
    for (size_t i = start; i < tokens.size(); ++i) {
        lp.push_back(row_log_softmax_at(logits, static_cast<int64_t>(i - 1), tokens[i]));
    }
    return lp;
}

double lm_train_step(TinyLM& model, AdamOpt& opt, std::span<const std::vector<int>> batch) {
    if (batch.empty()) throw UsageError("lm_train_step: empty batch");
    std::vector<Param*> ps = model.params();
    zero_grads(ps);
    const double bn = static_cast<double>(batch.size());
    double loss = 0.0;
    for (const std::vector<int>& tokens : batch) {
        const int64_t T = static_cast<int64_t>(tokens.size());
        if (T < 2) throw UsageError("lm_train_step: sequence shorter than 2 tokens");
        TinyLM::Cache cache;
        Tensor logits = model.forward_logits(tokens, &cache);
        Tensor dlogits(logits.shape);
        const double coef = 1.0 / static_cast<double>(T - 1) / bn;
        for (int64_t t = 0; t + 1 < T; ++t) {
            const int target = tokens[static_cast<size_t>(t) + 1];
            loss += -row_log_softmax_at(logits, t, target) / static_cast<double>(T - 1) / bn;
            add_cross_entropy_grad(logits, t, target, coef, dlogits);
        }
        model.backward_logits(dlogits, cache);
    }
    if (!std::isfinite(loss)) throw NumericError("lm_train_step: non-finite loss");
    opt.step(ps);
    return loss;
}

SampleResult sample_sequence(const TinyLM& model, std::span<const int> prompt, int max_new,
                             double temperature, int stop_token, Rng& rng) {
    if (prompt.empty()) throw UsageError("sample_sequence: empty prompt");
    SampleResult res;
    std::vector<int> seq(prompt.begin(), prompt.end());
    for (int step = 0; step < max_new; ++step) {
        Tensor logits = model.forward_logits(seq);
        const int64_t last = logits.shape[0] - 1;
        const int64_t v = logits.shape[1];
        int next;
        if (temperature <= 0.0) {
            next = 0;
            double best = logits.at(last, 0);
            for (int64_t j = 1; j < v; ++j) {
                if (logits.at(last, j) > best) {
                    best = logits.at(last, j);
                    next = static_cast<int>(j);
                }
            }
        } else {
            std::vector<double> row(static_cast<size_t>(v));
            double mx = logits.at(last, 0) / temperature;
            for (int64_t j = 0; j < v; ++j) {
                row[static_cast<size_t>(j)] = logits.at(last, j) / temperature;
                mx = std::max(mx, row[static_cast<size_t>(j)]);
            }
            for (double& z : row) z = std::exp(z - mx);
            next = static_cast<int>(rng.categorical(row));
        }
        res.tokens.push_back(next);
        res.logp.push_back(row_log_softmax_at(logits, last, next));
        seq.push_back(next);
        if (next == stop_token) return res;
    }
    res.truncated = true;
    return res;
}

} // namespace latentkit
