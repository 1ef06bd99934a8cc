#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "moelab/nn.hpp"
#include "moelab/tensor.hpp"

namespace moelab::moe {

using num::Scalar;
using num::Tensor;

enum class GateVariant { kStandard, kDomainAware, kDomainSpecialized };

// Gating parameters for one SMoE layer. The gate projections carry no bias.
struct GateParams {
    GateVariant variant = GateVariant::kStandard;
    int64_t expert_count = 0;  // N
    int64_t top_k = 0;         // k

    Tensor w_g;                       // standard: [d x N]; domain-aware: [(d+d_emb) x N]
    std::vector<Tensor> w_g_domain;   // domain-specialized: [d x N] per domain
    Tensor domain_embeddings;         // domain-aware: [D x d_emb]

    int64_t param_count() const;
};

GateParams make_gate(GateVariant variant, int64_t d_model, int64_t d_emb,
                     int64_t expert_count, int64_t top_k, int64_t domain_count,
                     std::mt19937_64& rng);

// Per-token routing record: full gate distribution, selected experts ordered
// by descending gate weight, and their renormalized weights.
struct GateTraceEntry {
    int32_t layer = 0;     // SMoE site index (encoder sites first)
    int64_t position = 0;  // running token index within the layer
    int32_t domain = 0;
    std::vector<Scalar> distribution;
    std::vector<int32_t> experts;
    std::vector<Scalar> weights;
};

struct GateTrace {
    int32_t layer_count = 0;
    int32_t expert_count = 0;
    std::vector<GateTraceEntry> entries;
    std::vector<int64_t> layer_positions;  // next position per layer

    bool empty() const { return entries.empty(); }
    void reset(int32_t layers, int32_t experts);
    void record(int32_t layer, int32_t domain, std::span<const Scalar> dist,
                std::span<const int32_t> experts_sel,
                std::span<const Scalar> weights_sel);
    // Deterministic merge: entries ordered by layer, then position.
    void merge(const GateTrace& other);

    std::string to_csv() const;
    std::vector<uint8_t> to_binary() const;
    static GateTrace from_binary(std::span<const uint8_t> bytes);
};

// ---- gating distributions ---------------------------------------------------

// softmax(W_g . x_t) over all experts; x_t is a [d] vector or [1 x d] row.
Tensor gate_standard(const Tensor& x_t, const GateParams& g);
// softmax(W_g . (x_t ++ e_d)): the token representation concatenated with
// the domain embedding.
Tensor gate_domain_aware(const Tensor& x_t, int32_t domain, const GateParams& g);
// softmax(W_g^d . x_t) with per-domain gate parameters.
Tensor gate_domain_specialized(const Tensor& x_t, int32_t domain, const GateParams& g);

// Batched gate over rows of x with one domain id per row.
Tensor gate_forward(const GateParams& g, const Tensor& x,
                    const std::vector<int32_t>& domains);

// ---- top-k selection ----------------------------------------------------------

struct TopK {
    std::vector<int64_t> indices;  // k largest entries, descending; ties to lowest index
    std::vector<Scalar> weights;   // selected entries divided by their sum
};

TopK top_k_select(std::span<const Scalar> dist, int64_t k);

// ---- the SMoE layer -------------------------------------------------------------

struct SmoeLayer {
    GateParams gate;
    std::vector<nn::FfnLayer> experts;

    // expert-token evaluation counter; exactly k per routed token
    mutable int64_t evaluations = 0;

    int64_t expert_count() const { return static_cast<int64_t>(experts.size()); }
};

SmoeLayer make_smoe_layer(GateVariant variant, int64_t d_model, int64_t d_ff,
                          int64_t d_emb, int64_t expert_count, int64_t top_k,
                          int64_t domain_count, std::mt19937_64& rng);

// Weighted top-k mixture over rows of x (one domain per row). Only selected
// experts are evaluated; per-token accumulation runs in rank order so the
// result is bit-identical under a joint permutation of experts and gate
// columns. Records one trace entry per row when trace is non-null.
Tensor smoe_forward_batch(const SmoeLayer& layer, const Tensor& x,
                          const std::vector<int32_t>& domains, GateTrace* trace,
                          int32_t layer_id);

// Single-token surface: x_t is a [d] vector or [1 x d] row.
Tensor smoe_forward(const SmoeLayer& layer, const Tensor& x_t, int32_t domain,
                    GateTrace* trace = nullptr, int32_t layer_id = 0);

}  // namespace moelab::moe
