// Times the parallel kernels against the serial reference implementations.
#include <chrono>
#include <cmath>
#include <cstdio>

#include "latentkit/reference.hpp"
#include "latentkit/rng.hpp"

using namespace latentkit;

namespace {

Tensor randn(std::vector<int64_t> shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.normal();
    return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

template <typename F>
double time_ms(F&& f, int reps) {
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) f();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

void bench_matmul(int n, int reps) {
    Rng rng(1);
    Tensor a = randn({n, n}, rng), b = randn({n, n}, rng);
    Tensor fast = matmul(a, b);
    Tensor slow = ref::matmul_naive(a, b);
    const double tf = time_ms([&]() { (void)matmul(a, b); }, reps);
    const double ts = time_ms([&]() { (void)ref::matmul_naive(a, b); }, reps);
    std::printf("matmul %4dx%-4d  parallel %8.2f ms   serial %8.2f ms   speedup %5.2fx   maxdiff %.2e\n",
                n, n, tf, ts, ts / tf, max_abs_diff(fast, slow));
}

void bench_mla(int t_len, int reps) {
    Rng rng(2);
    AttnConfig cfg;
    cfg.variant = AttnVariant::MLA;
    cfg.d = 64;
    cfg.n_h = 8;
    cfg.d_h = 16;
    cfg.d_c = 24;
    cfg.d_R = 8;
    AttnParams p = AttnParams::init(cfg, rng, 0.3);
    Tensor h = randn({t_len, 64}, rng);
    Tensor fast = attn_forward(h, cfg, p);
    Tensor slow = ref::mla_materialized(h, cfg, p);
    const double tf = time_ms([&]() { (void)attn_forward(h, cfg, p); }, reps);
    const double ts = time_ms([&]() { (void)ref::mla_materialized(h, cfg, p); }, reps);
    std::printf("mla T=%-4d d=64  parallel %8.2f ms   serial %8.2f ms   speedup %5.2fx   maxdiff %.2e\n",
                t_len, tf, ts, ts / tf, max_abs_diff(fast, slow));
}

void bench_moe(int reps) {
    Rng rng(3);
    MoEConfig cfg;
    cfg.N_s = 1;
    cfg.N_r = 32;
    cfg.K_r = 4;
    cfg.d = 64;
    cfg.d_ff = 128;
    MoEParams p = MoEParams::init(cfg, rng, 0.3);
    ExpertBiasState bias(cfg.N_r);
    std::vector<double> u(64);
    for (double& v : u) v = rng.normal();
    std::vector<double> fast = moe_forward(u, cfg, p, bias);
    std::vector<double> dense = ref::moe_dense_masked(u, cfg, p, bias.b);
    double md = 0.0;
    for (size_t i = 0; i < fast.size(); ++i) md = std::max(md, std::abs(fast[i] - dense[i]));
    const double tf = time_ms([&]() { (void)moe_forward(u, cfg, p, bias); }, reps);
    const double ts = time_ms([&]() { (void)ref::moe_dense_masked(u, cfg, p, bias.b); }, reps);
    std::printf("moe 32x top-4    sparse   %8.3f ms   dense  %8.3f ms   speedup %5.2fx   maxdiff %.2e\n",
                tf, ts, ts / tf, md);
}

} // namespace

int main() {
    std::printf("latentkit bench: parallel kernels vs serial reference\n");
    bench_matmul(128, 10);
    bench_matmul(256, 5);
    bench_matmul(384, 3);
    bench_mla(64, 5);
    bench_mla(128, 3);
    bench_moe(50);
    return 0;
}
