#pragma once

#include <random>
#include <vector>

#include "moelab/tensor.hpp"

namespace moelab::nn {

using num::Scalar;
using num::Tensor;

// Additive attention mask value for disallowed positions. Far below any
// reachable score, so masked weights underflow to exactly zero after the
// softmax max-subtraction.
inline constexpr Scalar kMaskedScore = -1e30;

// Position-wise feed-forward layer, also the expert architecture inside SMoE
// layers: W2 * relu(W1 * x + b1) + b2.
struct FfnLayer {
    Tensor w1;  // [d_model x d_ff]
    Tensor b1;  // [d_ff]
    Tensor w2;  // [d_ff x d_model]
    Tensor b2;  // [d_model]

    int64_t d_model() const { return w1.rows(); }
    int64_t d_ff() const { return w1.cols(); }
    int64_t param_count() const;
};

Tensor ffn_forward(const FfnLayer& layer, const Tensor& x);

struct LayerNorm {
    Tensor gain;  // [d]
    Tensor bias;  // [d]
};

Tensor layer_norm_forward(const LayerNorm& ln, const Tensor& x);

// Multi-head scaled dot-product attention with per-head projection weights.
struct AttentionLayer {
    int64_t heads = 0;
    std::vector<Tensor> wq, wk, wv;  // per head [d_model x d_head]
    std::vector<Tensor> bq, bk, bv;  // per head [d_head]
    std::vector<Tensor> wo;          // per head [d_head x d_model]
    Tensor bo;                       // [d_model]

    int64_t d_model() const { return wq.at(0).rows(); }
    int64_t d_head() const { return wq.at(0).cols(); }
    int64_t param_count() const;
};

// queries [Tq x d], keys/values [Tk x d]. mask, when defined, is an additive
// [Tq x Tk] tensor (0 for allowed, kMaskedScore for masked); masked positions
// receive exactly zero attention weight.
Tensor attention_forward(const AttentionLayer& layer, const Tensor& queries,
                         const Tensor& keys, const Tensor& values,
                         const Tensor& mask);

// [t x t] additive causal mask (position i attends to j <= i).
Tensor causal_mask(int64_t t);
// [tq x |key_valid|] additive mask hiding invalid (padding) keys.
Tensor padding_mask(int64_t tq, const std::vector<uint8_t>& key_valid);
// causal and key-padding combined, for decoder self-attention over padded rows.
Tensor causal_padding_mask(const std::vector<uint8_t>& key_valid);

// Residual bottleneck adapter: x + Up(relu(Down(x))).
struct Adapter {
    Tensor down_w;  // [d_model x d_adapter]
    Tensor down_b;  // [d_adapter]
    Tensor up_w;    // [d_adapter x d_model]
    Tensor up_b;    // [d_model]

    int64_t param_count() const;
};

// One adapter per domain in the schema, generic included; indexed by domain id.
struct AdapterBank {
    std::vector<Adapter> adapters;
};

Tensor adapter_forward(const AdapterBank& bank, const Tensor& x, int32_t domain);

// Token embedding lookup (rows of table); scaling is the caller's concern.
Tensor embedding_lookup(const Tensor& table, const std::vector<int32_t>& ids);

// Sinusoidal position encodings, [max_len x d_model].
Tensor sinusoidal_positions(int64_t max_len, int64_t d_model);

// ---- initialization -------------------------------------------------------

void init_xavier_uniform(Tensor& w, std::mt19937_64& rng);
void init_normal(Tensor& w, std::mt19937_64& rng, double stddev);

FfnLayer make_ffn(int64_t d_model, int64_t d_ff, std::mt19937_64& rng);
AttentionLayer make_attention(int64_t d_model, int64_t heads, std::mt19937_64& rng);
LayerNorm make_layer_norm(int64_t d);
Adapter make_adapter(int64_t d_model, int64_t d_adapter, std::mt19937_64& rng);

}  // namespace moelab::nn
