#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "moelab/data.hpp"
#include "moelab/moe.hpp"
#include "moelab/nn.hpp"
#include "moelab/schema.hpp"

namespace moelab::model {

using num::Scalar;
using num::Tensor;

enum class FfnVariant { kDense, kSmoe, kAdapters };
enum class Conditioning { kNone, kTags, kDomainAwareGate, kDomainSpecializedGate };

std::string to_string(FfnVariant v);
std::string to_string(Conditioning c);
FfnVariant ffn_variant_from_string(const std::string& s);
Conditioning conditioning_from_string(const std::string& s);

struct ModelConfig {
    int64_t d_model = 32;
    int64_t d_ff = 128;
    int64_t encoder_layers = 2;
    int64_t decoder_layers = 2;
    int64_t heads = 2;
    int64_t vocab_size = 0;
    FfnVariant ffn_variant = FfnVariant::kDense;
    double width_multiplier = 1.0;  // dense only: scales d_ff
    int64_t expert_count = 4;       // smoe only
    int64_t top_k = 2;              // smoe only
    std::string expert_placement = "every_second_layer";
    int64_t adapter_dim = 16;       // adapters only
    Conditioning conditioning = Conditioning::kNone;
    double dr_probability = 0.0;
    double dropout = 0.0;
    uint64_t seed = 1;

    int64_t d_ff_effective() const;
    // Throws ConfigError listing every violated constraint.
    void validate() const;
    // Experts sit at even 1-based layer indices of both stacks.
    static bool is_expert_site(int64_t layer_index_1based) {
        return layer_index_1based % 2 == 0;
    }
};

struct NamedParam {
    std::string name;
    Tensor tensor;
};

// One encoder or decoder layer (pre-layer-norm).
struct LayerBlock {
    bool is_decoder = false;
    nn::LayerNorm ln1;  // before self-attention
    nn::LayerNorm ln2;  // before cross-attention (decoder) / before ffn (encoder)
    nn::LayerNorm ln3;  // before ffn (decoder only)
    nn::AttentionLayer self_attn;
    nn::AttentionLayer cross_attn;  // decoder only
    nn::FfnLayer ffn;               // dense path (absent at smoe sites)
    std::unique_ptr<moe::SmoeLayer> smoe;
    std::unique_ptr<nn::AdapterBank> adapters;
    int32_t smoe_site_id = -1;
};

struct Batch {
    std::vector<std::vector<int32_t>> source;  // tagged when conditioning = tags
    std::vector<std::vector<int32_t>> target;  // gold target rows (content + EOS)
    std::vector<int32_t> domains;              // assigned domain per example
};

struct ForwardResult {
    Tensor logits;  // [B*T x V], rows grouped by example then position
    moe::GateTrace trace;
    int64_t batch = 0;
    int64_t tgt_len = 0;
};

struct EncodedBatch {
    Tensor enc_out;  // [B*S x d_model]
    int64_t batch = 0;
    int64_t src_len = 0;
    std::vector<std::vector<uint8_t>> src_valid;
    std::vector<int32_t> domains;
};

class Model {
  public:
    Model(ModelConfig cfg, DomainSchema schema);

    const ModelConfig& config() const { return cfg_; }
    const DomainSchema& domain_schema() const { return schema_; }

    // Teacher-forced forward over a padded batch. The gate trace is
    // populated iff the model is an SMoE variant. An empty batch yields an
    // empty result.
    ForwardResult forward(const Batch& batch) const;

    EncodedBatch encode(const std::vector<std::vector<int32_t>>& sources,
                        const std::vector<int32_t>& domains,
                        moe::GateTrace* trace) const;
    // Decoder logits for the given (BOS-led) decoder input rows.
    Tensor decode_logits(const EncodedBatch& enc,
                         const std::vector<std::vector<int32_t>>& decoder_inputs,
                         moe::GateTrace* trace) const;

    // Applies the model's conditioning to a raw source sequence.
    std::vector<int32_t> prepare_source(const std::vector<int32_t>& source,
                                        int32_t domain) const;

    std::vector<NamedParam> parameters() const;
    void set_requires_grad(bool on) const;
    int64_t parameter_count() const;
    int64_t smoe_site_count() const { return smoe_sites_; }
    int64_t adapter_site_count() const;
    void reset_expert_evaluations() const;
    int64_t expert_evaluations() const;

    // exposed for tests and model surgery
    Tensor embed_table;
    Tensor out_proj;  // [d_model x V]
    std::vector<LayerBlock> encoder;
    std::vector<LayerBlock> decoder;
    nn::LayerNorm enc_final_ln;
    nn::LayerNorm dec_final_ln;
    Tensor positions;  // sinusoidal, [max_positions x d_model]

  private:
    Tensor run_stack(const std::vector<LayerBlock>& stack, Tensor x, int64_t batch,
                     int64_t seq_len, const std::vector<std::vector<uint8_t>>& valid,
                     const std::vector<int32_t>& domains, bool decoder_stack,
                     const EncodedBatch* enc, moe::GateTrace* trace) const;

    ModelConfig cfg_;
    DomainSchema schema_;
    int64_t smoe_sites_ = 0;
};

// Inserts the domain tag token at position 0. The source must end with EOS
// and must not already carry a tag.
std::vector<int32_t> prepend_domain_tag(const std::vector<int32_t>& source,
                                        int32_t domain, const DomainSchema& schema);

// Assembles a padded batch from examples, applying conditioning (and an
// optional label override replacing every assigned domain).
Batch make_batch(const std::vector<data::Example>& examples, const Model& model,
                 std::optional<int32_t> label_override = std::nullopt);

}  // namespace moelab::model
