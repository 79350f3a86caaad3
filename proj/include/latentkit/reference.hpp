#pragma once

#include <span>
#include <vector>

#include "latentkit/attention.hpp"
#include "latentkit/moe.hpp"
#include "latentkit/tensor.hpp"

// Serial reference implementations, written as plain loops independent of the
// kernels they check. Tests and the verify command compare the fast paths
// against these; the bench tool times the two sides.
namespace latentkit::ref {

// Plain triple-loop product, no parallelism, no blocking.
Tensor matmul_naive(const Tensor& a, const Tensor& b);

// Per-head attention with explicit loops and its own softmax.
Tensor mha_naive(const Tensor& h, const AttnConfig& cfg, const AttnParams& p);

// Materializes full queries/keys/values from the latent projections (with its
// own rotary code), then runs naive attention over the concatenated widths.
Tensor mla_materialized(const Tensor& h, const AttnConfig& cfg, const AttnParams& p);

// Evaluates every routed expert densely and zero-masks unselected gates.
std::vector<double> moe_dense_masked(std::span<const double> u, const MoEConfig& cfg,
                                     const MoEParams& p, std::span<const double> bias);

} // namespace latentkit::ref
