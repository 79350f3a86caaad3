#include "latentkit/reference.hpp"

#include <algorithm>
#include <cmath>

namespace latentkit::ref {

namespace {

std::vector<double> apply_matrix(const Tensor& w, const std::vector<double>& x) {
    std::vector<double> y(static_cast<size_t>(w.shape[0]), 0.0);
    for (int64_t i = 0; i < w.shape[0]; ++i)
        for (int64_t j = 0; j < w.shape[1]; ++j)
            y[static_cast<size_t>(i)] += w.at(i, j) * x[static_cast<size_t>(j)];
    return y;
}

std::vector<double> softmax_vec(const std::vector<double>& x) {
    double mx = x[0];
    for (double v : x) mx = std::max(mx, v);
    std::vector<double> e(x.size());
    double sum = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        e[i] = std::exp(x[i] - mx);
        sum += e[i];
    }
    for (double& v : e) v /= sum;
    return e;
}

void rotate_pairs(std::vector<double>& v, size_t off, size_t width, int64_t pos, double base) {
    for (size_t j = 0; 2 * j < width; ++j) {
        const double theta = static_cast<double>(pos) *
                             std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(width));
        const double c = std::cos(theta), s = std::sin(theta);
        const double a = v[off + 2 * j], b = v[off + 2 * j + 1];
        v[off + 2 * j] = a * c - b * s;
        v[off + 2 * j + 1] = a * s + b * c;
    }
}

std::vector<double> row_of(const Tensor& t, int64_t r) {
    return std::vector<double>(t.row(r), t.row(r) + t.shape[1]);
}

// q, k sized n_h*(d_h+extra) per token with per-head layout; v sized n_h*d_h.
Tensor attention_over(const std::vector<std::vector<double>>& q,
                      const std::vector<std::vector<double>>& k,
                      const std::vector<std::vector<double>>& v, int n_h, int head_w, int d_h,
                      const Tensor& wo) {
    const int64_t t_len = static_cast<int64_t>(q.size());
    const double sc = 1.0 / std::sqrt(static_cast<double>(head_w));
    Tensor att({t_len, static_cast<int64_t>(n_h) * d_h});
    for (int i = 0; i < n_h; ++i) {
        for (int64_t t = 0; t < t_len; ++t) {
            std::vector<double> scores(static_cast<size_t>(t + 1));
            for (int64_t s = 0; s <= t; ++s) {
                double acc = 0.0;
                for (int j = 0; j < head_w; ++j)
                    acc += q[static_cast<size_t>(t)][static_cast<size_t>(i * head_w + j)] *
                           k[static_cast<size_t>(s)][static_cast<size_t>(i * head_w + j)];
                scores[static_cast<size_t>(s)] = acc * sc;
            }
            std::vector<double> w = softmax_vec(scores);
            for (int64_t s = 0; s <= t; ++s)
                for (int j = 0; j < d_h; ++j)
                    att.at(t, i * d_h + j) +=
                        w[static_cast<size_t>(s)] * v[static_cast<size_t>(s)][static_cast<size_t>(i * d_h + j)];
        }
    }
    Tensor out({t_len, wo.shape[0]});
    for (int64_t t = 0; t < t_len; ++t)
        for (int64_t i = 0; i < wo.shape[0]; ++i)
            for (int64_t j = 0; j < wo.shape[1]; ++j) out.at(t, i) += wo.at(i, j) * att.at(t, j);
    return out;
}

} // namespace

Tensor matmul_naive(const Tensor& a, const Tensor& b) {
    const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor c({m, n});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j)
            for (int64_t p = 0; p < k; ++p) c.at(i, j) += a.at(i, p) * b.at(p, j);
    return c;
}

Tensor mha_naive(const Tensor& h, const AttnConfig& cfg, const AttnParams& p) {
    const int64_t t_len = h.shape[0];
    const int n_h = cfg.n_h, d_h = cfg.d_h;
    const int kv_g = cfg.kv_groups();
    const int heads_per_group = n_h / kv_g;
    std::vector<std::vector<double>> q, k, v;
    for (int64_t t = 0; t < t_len; ++t) {
        std::vector<double> x = row_of(h, t);
        std::vector<double> qt = apply_matrix(p.wq.value, x);
        std::vector<double> kt = apply_matrix(p.wk.value, x);
        std::vector<double> vt = apply_matrix(p.wv.value, x);
        // replicate group keys/values out to per-head layout
        std::vector<double> kfull(static_cast<size_t>(n_h) * d_h), vfull(kfull.size());
        for (int i = 0; i < n_h; ++i) {
            const int g = i / heads_per_group;
            for (int j = 0; j < d_h; ++j) {
                kfull[static_cast<size_t>(i * d_h + j)] = kt[static_cast<size_t>(g * d_h + j)];
                vfull[static_cast<size_t>(i * d_h + j)] = vt[static_cast<size_t>(g * d_h + j)];
            }
        }
        q.push_back(std::move(qt));
        k.push_back(std::move(kfull));
        v.push_back(std::move(vfull));
    }
    return attention_over(q, k, v, n_h, d_h, d_h, p.wo.value);
}

Tensor mla_materialized(const Tensor& h, const AttnConfig& cfg, const AttnParams& p) {
    const int64_t t_len = h.shape[0];
    const int n_h = cfg.n_h, d_h = cfg.d_h, d_r = cfg.d_R;
    const int head_w = d_h + d_r;
    std::vector<std::vector<double>> q, k, v;
    for (int64_t t = 0; t < t_len; ++t) {
        std::vector<double> x = row_of(h, t);
        std::vector<double> cq = apply_matrix(p.w_dq.value, x);
        std::vector<double> ckv = apply_matrix(p.w_dkv.value, x);
        std::vector<double> qc = apply_matrix(p.w_uq.value, cq);
        std::vector<double> kc = apply_matrix(p.w_uk.value, ckv);
        std::vector<double> vt = apply_matrix(p.w_uv.value, ckv);
        std::vector<double> qr, kr;
        if (d_r > 0) {
            qr = apply_matrix(p.w_qr.value, cq);
            for (int i = 0; i < n_h; ++i)
                rotate_pairs(qr, static_cast<size_t>(i) * d_r, static_cast<size_t>(d_r), t,
                             cfg.rope_base);
            kr = apply_matrix(p.w_kr.value, x);
            rotate_pairs(kr, 0, static_cast<size_t>(d_r), t, cfg.rope_base);
        }
        // concatenated per-head [content ; rotary], the shared rotary key is
        // replicated across heads
        std::vector<double> qcat(static_cast<size_t>(n_h) * head_w),
            kcat(static_cast<size_t>(n_h) * head_w);
        for (int i = 0; i < n_h; ++i) {
            for (int j = 0; j < d_h; ++j) {
                qcat[static_cast<size_t>(i * head_w + j)] = qc[static_cast<size_t>(i * d_h + j)];
                kcat[static_cast<size_t>(i * head_w + j)] = kc[static_cast<size_t>(i * d_h + j)];
            }
            for (int j = 0; j < d_r; ++j) {
                qcat[static_cast<size_t>(i * head_w + d_h + j)] = qr[static_cast<size_t>(i * d_r + j)];
                kcat[static_cast<size_t>(i * head_w + d_h + j)] = kr[static_cast<size_t>(j)];
            }
        }
        q.push_back(std::move(qcat));
        k.push_back(std::move(kcat));
        v.push_back(std::move(vt));
    }
    return attention_over(q, k, v, n_h, head_w, d_h, p.wo.value);
}

std::vector<double> moe_dense_masked(std::span<const double> u, const MoEConfig& cfg,
                                     const MoEParams& p, std::span<const double> bias) {
    const int n_r = cfg.N_r;
    // own affinity computation
    std::vector<double> s(static_cast<size_t>(n_r), 0.0);
    for (int i = 0; i < n_r; ++i) {
        double dot = 0.0;
        for (int j = 0; j < cfg.d; ++j)
            dot += u[static_cast<size_t>(j)] * p.centroids.value.at(i, j);
        s[static_cast<size_t>(i)] = 1.0 / (1.0 + std::exp(-dot));
    }
    // full sort by s + b, lowest id wins ties
    std::vector<int> order(static_cast<size_t>(n_r));
    for (int i = 0; i < n_r; ++i) order[static_cast<size_t>(i)] = i;
    std::sort(order.begin(), order.end(), [&](int a, int c) {
        const double sa = s[static_cast<size_t>(a)] + bias[static_cast<size_t>(a)];
        const double sc = s[static_cast<size_t>(c)] + bias[static_cast<size_t>(c)];
        if (sa != sc) return sa > sc;
        return a < c;
    });
    std::vector<bool> keep(static_cast<size_t>(n_r), false);
    for (int i = 0; i < cfg.K_r; ++i) keep[static_cast<size_t>(order[static_cast<size_t>(i)])] = true;

    double denom = 0.0;
    for (int i = 0; i < n_r; ++i)
        if (keep[static_cast<size_t>(i)]) denom += s[static_cast<size_t>(i)];

    std::vector<double> out(u.begin(), u.end());
    for (const ExpertFFN& e : p.shared) {
        std::vector<double> x(u.begin(), u.end());
        std::vector<double> hidden = apply_matrix(e.w1.value, x);
        for (double& z : hidden) z = z / (1.0 + std::exp(-z));
        std::vector<double> y = apply_matrix(e.w2.value, hidden);
        for (size_t j = 0; j < out.size(); ++j) out[j] += y[j];
    }
    // evaluate all routed experts, mask the gates
    for (int i = 0; i < n_r; ++i) {
        const double gate = keep[static_cast<size_t>(i)] ? s[static_cast<size_t>(i)] / denom : 0.0;
        const ExpertFFN& e = p.routed[static_cast<size_t>(i)];
        std::vector<double> x(u.begin(), u.end());
        std::vector<double> hidden = apply_matrix(e.w1.value, x);
        for (double& z : hidden) z = z / (1.0 + std::exp(-z));
        std::vector<double> y = apply_matrix(e.w2.value, hidden);
        for (size_t j = 0; j < out.size(); ++j) out[j] += gate * y[j];
    }
    return out;
}

} // namespace latentkit::ref
