#include "latentkit/param.hpp"

#include <cmath>

namespace latentkit {

void zero_grads(std::span<Param* const> params) {
    for (Param* p : params) p->zero_grad();
}

void collect_unique(std::vector<Param*>& out, std::span<Param* const> add) {
    for (Param* p : add) {
        bool seen = false;
        for (Param* q : out) {
            if (q == p) {
                seen = true;
                break;
            }
        }
        if (!seen) out.push_back(p);
    }
}

void AdamOpt::step(std::span<Param* const> params) {
    if (clip_norm > 0.0) {
        double sq = 0.0;
        for (Param* p : params)
            for (double g : p->grad.data) sq += g * g;
        if (sq > clip_norm * clip_norm) {
            const double scale = clip_norm / std::sqrt(sq);
            for (Param* p : params)
                for (double& g : p->grad.data) g *= scale;
        }
    }
    if (m_.empty()) {
        m_.reserve(params.size());
        v_.reserve(params.size());
        for (Param* p : params) {
            m_.emplace_back(p->value.shape);
            v_.emplace_back(p->value.shape);
        }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Param& p = *params[pi];
        Tensor& m = m_[pi];
        Tensor& v = v_[pi];
        for (size_t i = 0; i < p.value.data.size(); ++i) {
            const double g = p.grad.data[i];
            m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * g;
            v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * g * g;
            const double mhat = m.data[i] / bc1;
            const double vhat = v.data[i] / bc2;
            p.value.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

} // namespace latentkit
