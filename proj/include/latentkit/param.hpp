#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "latentkit/rng.hpp"
#include "latentkit/tensor.hpp"

namespace latentkit {

// Named parameter tensor with a gradient accumulator of the same shape.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;

    Param() = default;
    Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape) {}

    void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0); }

    static Param randn(std::string n, std::vector<int64_t> shape, Rng& rng, double stddev) {
        Tensor t(std::move(shape));
        for (double& v : t.data) v = stddev * rng.normal();
        return Param(std::move(n), std::move(t));
    }

    static Param full(std::string n, std::vector<int64_t> shape, double fill) {
        Tensor t(std::move(shape));
        std::fill(t.data.begin(), t.data.end(), fill);
        return Param(std::move(n), std::move(t));
    }
};

void zero_grads(std::span<Param* const> params);

// Deduplicating append for models that alias parameters (shared embedding/head).
void collect_unique(std::vector<Param*>& out, std::span<Param* const> add);

// Adam with bias correction; state is kept per parameter in the order the
// parameter list is passed, so updates are deterministic.
class AdamOpt {
  public:
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 0.0; // global gradient-norm clip; 0 disables

    explicit AdamOpt(double learning_rate = 1e-3) : lr(learning_rate) {}

    void step(std::span<Param* const> params);

  private:
    int64_t t_ = 0;
    std::vector<Tensor> m_, v_;
};

} // namespace latentkit
