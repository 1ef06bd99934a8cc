#include "moelab/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace moelab::model {

using namespace num;

std::string to_string(FfnVariant v) {
    switch (v) {
        case FfnVariant::kDense: return "dense";
        case FfnVariant::kSmoe: return "smoe";
        case FfnVariant::kAdapters: return "adapters";
    }
    return "?";
}

std::string to_string(Conditioning c) {
    switch (c) {
        case Conditioning::kNone: return "none";
        case Conditioning::kTags: return "tags";
        case Conditioning::kDomainAwareGate: return "domain_aware_gate";
        case Conditioning::kDomainSpecializedGate: return "domain_specialized_gate";
    }
    return "?";
}

FfnVariant ffn_variant_from_string(const std::string& s) {
    if (s == "dense") return FfnVariant::kDense;
    if (s == "smoe") return FfnVariant::kSmoe;
    if (s == "adapters") return FfnVariant::kAdapters;
    throw ConfigError("unknown ffn_variant '" + s + "'");
}

Conditioning conditioning_from_string(const std::string& s) {
    if (s == "none") return Conditioning::kNone;
    if (s == "tags") return Conditioning::kTags;
    if (s == "domain_aware_gate") return Conditioning::kDomainAwareGate;
    if (s == "domain_specialized_gate") return Conditioning::kDomainSpecializedGate;
    throw ConfigError("unknown conditioning '" + s + "'");
}

int64_t ModelConfig::d_ff_effective() const {
    if (ffn_variant == FfnVariant::kDense) {
        return static_cast<int64_t>(std::llround(d_ff * width_multiplier));
    }
    return d_ff;
}

void ModelConfig::validate() const {
    std::vector<std::string> bad;
    if (d_model < 1) bad.push_back("d_model must be positive");
    if (d_ff < 1) bad.push_back("d_ff must be positive");
    if (encoder_layers < 1 || decoder_layers < 1)
        bad.push_back("layer counts must be positive");
    if (heads < 1 || d_model % heads != 0) bad.push_back("heads must divide d_model");
    if (vocab_size < SpecialTokens::kCount) bad.push_back("vocab_size too small");
    if (width_multiplier <= 0) bad.push_back("width_multiplier must be positive");
    if (ffn_variant == FfnVariant::kSmoe) {
        if (expert_count < 1) bad.push_back("expert_count must be positive");
        if (top_k < 1 || top_k > expert_count) bad.push_back("need 1 <= top_k <= expert_count");
        if (expert_placement != "every_second_layer")
            bad.push_back("unknown expert_placement '" + expert_placement + "'");
    }
    if (ffn_variant == FfnVariant::kAdapters && adapter_dim < 1)
        bad.push_back("adapter_dim must be positive");
    if ((conditioning == Conditioning::kDomainAwareGate ||
         conditioning == Conditioning::kDomainSpecializedGate) &&
        ffn_variant != FfnVariant::kSmoe) {
        bad.push_back("gate conditioning requires ffn_variant = smoe");
    }
    if (dr_probability < 0 || dr_probability > 1)
        bad.push_back("dr_probability must be in [0, 1]");
    if (dropout < 0 || dropout >= 1) bad.push_back("dropout must be in [0, 1)");
    if (!bad.empty()) {
        std::string msg = "invalid model config:";
        for (const std::string& b : bad) msg += "\n  - " + b;
        throw ConfigError(msg);
    }
}

namespace {

constexpr int64_t kMaxPositions = 512;

moe::GateVariant gate_variant_for(Conditioning c) {
    switch (c) {
        case Conditioning::kDomainAwareGate: return moe::GateVariant::kDomainAware;
        case Conditioning::kDomainSpecializedGate:
            return moe::GateVariant::kDomainSpecialized;
        default: return moe::GateVariant::kStandard;
    }
}

}  // namespace

Model::Model(ModelConfig cfg, DomainSchema schema)
    : cfg_(std::move(cfg)), schema_(std::move(schema)) {
    cfg_.validate();
    schema_.validate();
    if (cfg_.vocab_size < schema_.vocab_size) {
        throw ConfigError("model vocab_size " + std::to_string(cfg_.vocab_size) +
                          " smaller than schema vocabulary " +
                          std::to_string(schema_.vocab_size));
    }
    std::mt19937_64 rng(cfg_.seed);
    const int64_t d = cfg_.d_model;

    embed_table = Tensor({cfg_.vocab_size, d});
    nn::init_normal(embed_table, rng, 1.0 / std::sqrt(double(d)));
    out_proj = Tensor({d, cfg_.vocab_size});
    nn::init_xavier_uniform(out_proj, rng);
    positions = nn::sinusoidal_positions(kMaxPositions, d);

    auto build_stack = [&](int64_t layers, bool is_decoder) {
        std::vector<LayerBlock> stack;
        for (int64_t l = 1; l <= layers; ++l) {
            LayerBlock blk;
            blk.is_decoder = is_decoder;
            blk.ln1 = nn::make_layer_norm(d);
            blk.ln2 = nn::make_layer_norm(d);
            blk.self_attn = nn::make_attention(d, cfg_.heads, rng);
            if (is_decoder) {
                blk.ln3 = nn::make_layer_norm(d);
                blk.cross_attn = nn::make_attention(d, cfg_.heads, rng);
            }
            const bool site = ModelConfig::is_expert_site(l);
            if (cfg_.ffn_variant == FfnVariant::kSmoe && site) {
                blk.smoe = std::make_unique<moe::SmoeLayer>(moe::make_smoe_layer(
                    gate_variant_for(cfg_.conditioning), d, cfg_.d_ff, d,
                    cfg_.expert_count, cfg_.top_k, schema_.domain_count(), rng));
                blk.smoe_site_id = static_cast<int32_t>(smoe_sites_++);
            } else {
                blk.ffn = nn::make_ffn(d, cfg_.d_ff_effective(), rng);
            }
            if (cfg_.ffn_variant == FfnVariant::kAdapters && site) {
                blk.adapters = std::make_unique<nn::AdapterBank>();
                for (int32_t dom = 0; dom < schema_.domain_count(); ++dom) {
                    blk.adapters->adapters.push_back(
                        nn::make_adapter(d, cfg_.adapter_dim, rng));
                }
            }
            stack.push_back(std::move(blk));
        }
        return stack;
    };
    encoder = build_stack(cfg_.encoder_layers, false);
    decoder = build_stack(cfg_.decoder_layers, true);
    enc_final_ln = nn::make_layer_norm(d);
    dec_final_ln = nn::make_layer_norm(d);
}

int64_t Model::adapter_site_count() const {
    int64_t n = 0;
    for (const auto& b : encoder) n += b.adapters ? 1 : 0;
    for (const auto& b : decoder) n += b.adapters ? 1 : 0;
    return n;
}

void Model::reset_expert_evaluations() const {
    for (const auto* stack : {&encoder, &decoder})
        for (const auto& b : *stack)
            if (b.smoe) b.smoe->evaluations = 0;
}

int64_t Model::expert_evaluations() const {
    int64_t n = 0;
    for (const auto* stack : {&encoder, &decoder})
        for (const auto& b : *stack)
            if (b.smoe) n += b.smoe->evaluations;
    return n;
}

namespace {

// [rows x d] block of position encodings, tiled per example.
Tensor tile_positions(const Tensor& table, int64_t batch, int64_t seq_len) {
    std::vector<int64_t> idx(batch * seq_len);
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t t = 0; t < seq_len; ++t) idx[b * seq_len + t] = t;
    return num::gather_rows(table, idx);
}

}  // namespace

Tensor Model::run_stack(const std::vector<LayerBlock>& stack, Tensor x, int64_t batch,
                        int64_t seq_len, const std::vector<std::vector<uint8_t>>& valid,
                        const std::vector<int32_t>& domains, bool decoder_stack,
                        const EncodedBatch* enc, moe::GateTrace* trace) const {
    // per-example attention masks
    std::vector<Tensor> self_masks(batch), cross_masks(batch);
    for (int64_t b = 0; b < batch; ++b) {
        self_masks[b] = decoder_stack ? nn::causal_padding_mask(valid[b])
                                      : nn::padding_mask(seq_len, valid[b]);
        if (decoder_stack) {
            cross_masks[b] = nn::padding_mask(seq_len, enc->src_valid[b]);
        }
    }
    // per-token domain ids and valid-row index lists for conditional paths
    std::vector<int64_t> valid_rows;
    std::vector<int32_t> valid_domains;
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t t = 0; t < seq_len; ++t) {
            if (valid[b][t]) {
                valid_rows.push_back(b * seq_len + t);
                valid_domains.push_back(domains[b]);
            }
        }
    }

    auto attend = [&](const nn::AttentionLayer& attn, const Tensor& queries,
                      const Tensor& keys_values, int64_t kv_len,
                      const std::vector<Tensor>& masks) {
        std::vector<Tensor> parts;
        parts.reserve(batch);
        for (int64_t b = 0; b < batch; ++b) {
            Tensor q = slice_rows(queries, b * seq_len, seq_len);
            Tensor kv = slice_rows(keys_values, b * kv_len, kv_len);
            parts.push_back(nn::attention_forward(attn, q, kv, kv, masks[b]));
        }
        return concat_rows(parts);
    };

    for (const LayerBlock& blk : stack) {
        Tensor h = nn::layer_norm_forward(blk.ln1, x);
        x = add(x, dropout(attend(blk.self_attn, h, h, seq_len, self_masks),
                           cfg_.dropout));
        const nn::LayerNorm* ffn_ln = &blk.ln2;
        if (decoder_stack) {
            Tensor h2 = nn::layer_norm_forward(blk.ln2, x);
            x = add(x, dropout(attend(blk.cross_attn, h2, enc->enc_out, enc->src_len,
                                      cross_masks),
                               cfg_.dropout));
            ffn_ln = &blk.ln3;
        }
        Tensor h3 = nn::layer_norm_forward(*ffn_ln, x);
        Tensor f;
        if (blk.smoe) {
            Tensor sub = gather_rows(h3, valid_rows);
            Tensor y = moe::smoe_forward_batch(*blk.smoe, sub, valid_domains, trace,
                                               blk.smoe_site_id);
            f = scatter_rows(y, valid_rows, batch * seq_len);
        } else {
            f = nn::ffn_forward(blk.ffn, h3);
        }
        x = add(x, dropout(f, cfg_.dropout));
        if (blk.adapters) {
            // group valid rows by domain; the residual is applied globally
            std::vector<std::vector<int64_t>> groups(schema_.domain_count());
            for (size_t i = 0; i < valid_rows.size(); ++i)
                groups[valid_domains[i]].push_back(valid_rows[i]);
            Tensor bottleneck;
            bool first = true;
            for (int32_t dom = 0; dom < schema_.domain_count(); ++dom) {
                if (groups[dom].empty()) continue;
                const nn::Adapter& a = blk.adapters->adapters[dom];
                Tensor sub = gather_rows(x, groups[dom]);
                Tensor up = add_row_bias(
                    matmul(relu(add_row_bias(matmul(sub, a.down_w), a.down_b)), a.up_w),
                    a.up_b);
                Tensor placed = scatter_rows(up, groups[dom], batch * seq_len);
                bottleneck = first ? placed : add(bottleneck, placed);
                first = false;
            }
            if (!first) x = add(x, dropout(bottleneck, cfg_.dropout));
        }
    }
    return x;
}

EncodedBatch Model::encode(const std::vector<std::vector<int32_t>>& sources,
                           const std::vector<int32_t>& domains,
                           moe::GateTrace* trace) const {
    EncodedBatch out;
    out.batch = static_cast<int64_t>(sources.size());
    out.domains = domains;
    if (out.batch == 0) return out;
    if (domains.size() != sources.size()) {
        throw ContractError("encode: one domain id per example required");
    }
    for (int32_t d : domains) schema_.at(d);  // validates ids
    int64_t s = 0;
    for (const auto& row : sources) s = std::max<int64_t>(s, row.size());
    if (s > kMaxPositions) throw ContractError("encode: sequence too long");
    out.src_len = s;
    std::vector<int32_t> flat(out.batch * s, SpecialTokens::kPad);
    out.src_valid.assign(out.batch, std::vector<uint8_t>(s, 0));
    for (int64_t b = 0; b < out.batch; ++b) {
        for (size_t t = 0; t < sources[b].size(); ++t) {
            const int32_t id = sources[b][t];
            if (id < 0 || id >= cfg_.vocab_size) {
                throw DataError("encode: token id " + std::to_string(id) +
                                " out of range at example " + std::to_string(b) +
                                ", position " + std::to_string(t));
            }
            flat[b * s + t] = id;
            out.src_valid[b][t] = 1;
        }
    }
    Tensor x = scale(nn::embedding_lookup(embed_table, flat),
                     std::sqrt(static_cast<Scalar>(cfg_.d_model)));
    x = add(x, tile_positions(positions, out.batch, s));
    x = dropout(x, cfg_.dropout);
    x = run_stack(encoder, x, out.batch, s, out.src_valid, domains, false, nullptr,
                  trace);
    out.enc_out = nn::layer_norm_forward(enc_final_ln, x);
    return out;
}

Tensor Model::decode_logits(const EncodedBatch& enc,
                            const std::vector<std::vector<int32_t>>& decoder_inputs,
                            moe::GateTrace* trace) const {
    const int64_t batch = enc.batch;
    if (static_cast<int64_t>(decoder_inputs.size()) != batch) {
        throw ContractError("decode_logits: decoder inputs do not match batch");
    }
    int64_t t = 0;
    for (const auto& row : decoder_inputs) t = std::max<int64_t>(t, row.size());
    if (t > kMaxPositions) throw ContractError("decode_logits: sequence too long");
    std::vector<int32_t> flat(batch * t, SpecialTokens::kPad);
    std::vector<std::vector<uint8_t>> valid(batch, std::vector<uint8_t>(t, 0));
    for (int64_t b = 0; b < batch; ++b) {
        for (size_t i = 0; i < decoder_inputs[b].size(); ++i) {
            const int32_t id = decoder_inputs[b][i];
            if (id < 0 || id >= cfg_.vocab_size) {
                throw DataError("decode_logits: token id " + std::to_string(id) +
                                " out of range at example " + std::to_string(b) +
                                ", position " + std::to_string(i));
            }
            flat[b * t + i] = id;
            valid[b][i] = 1;
        }
    }
    Tensor x = scale(nn::embedding_lookup(embed_table, flat),
                     std::sqrt(static_cast<Scalar>(cfg_.d_model)));
    x = add(x, tile_positions(positions, batch, t));
    x = dropout(x, cfg_.dropout);
    x = run_stack(decoder, x, batch, t, valid, enc.domains, true, &enc, trace);
    return matmul(nn::layer_norm_forward(dec_final_ln, x), out_proj);
}

ForwardResult Model::forward(const Batch& batch) const {
    ForwardResult res;
    res.batch = static_cast<int64_t>(batch.source.size());
    res.trace.reset(static_cast<int32_t>(smoe_sites_),
                    static_cast<int32_t>(cfg_.expert_count));
    if (res.batch == 0) return res;
    if (batch.target.size() != batch.source.size() ||
        batch.domains.size() != batch.source.size()) {
        throw ContractError("forward: source/target/domains must align");
    }
    moe::GateTrace* trace = cfg_.ffn_variant == FfnVariant::kSmoe ? &res.trace : nullptr;

    EncodedBatch enc = encode(batch.source, batch.domains, trace);
    int64_t t = 0;
    for (const auto& row : batch.target) t = std::max<int64_t>(t, row.size());
    res.tgt_len = t;
    // shifted-right decoder inputs: BOS + gold prefix
    std::vector<std::vector<int32_t>> dec_in(res.batch);
    for (int64_t b = 0; b < res.batch; ++b) {
        dec_in[b].reserve(t);
        dec_in[b].push_back(SpecialTokens::kBos);
        for (size_t i = 0; i + 1 < batch.target[b].size() && static_cast<int64_t>(i) + 1 < t; ++i) {
            dec_in[b].push_back(batch.target[b][i]);
        }
    }
    res.logits = decode_logits(enc, dec_in, trace);
    return res;
}

std::vector<int32_t> Model::prepare_source(const std::vector<int32_t>& source,
                                           int32_t domain) const {
    if (cfg_.conditioning == Conditioning::kTags) {
        return prepend_domain_tag(source, domain, schema_);
    }
    return source;
}

namespace {

void push(std::vector<NamedParam>& out, const std::string& name, const Tensor& t) {
    out.push_back({name, t});
}

void push_attention(std::vector<NamedParam>& out, const std::string& prefix,
                    const nn::AttentionLayer& a) {
    for (int64_t h = 0; h < a.heads; ++h) {
        const std::string hs = std::to_string(h);
        push(out, prefix + ".wq" + hs, a.wq[h]);
        push(out, prefix + ".bq" + hs, a.bq[h]);
        push(out, prefix + ".wk" + hs, a.wk[h]);
        push(out, prefix + ".bk" + hs, a.bk[h]);
        push(out, prefix + ".wv" + hs, a.wv[h]);
        push(out, prefix + ".bv" + hs, a.bv[h]);
        push(out, prefix + ".wo" + hs, a.wo[h]);
    }
    push(out, prefix + ".bo", a.bo);
}

void push_ffn(std::vector<NamedParam>& out, const std::string& prefix,
              const nn::FfnLayer& f) {
    push(out, prefix + ".w1", f.w1);
    push(out, prefix + ".b1", f.b1);
    push(out, prefix + ".w2", f.w2);
    push(out, prefix + ".b2", f.b2);
}

void push_block(std::vector<NamedParam>& out, const std::string& prefix,
                const LayerBlock& blk) {
    push(out, prefix + ".ln1.g", blk.ln1.gain);
    push(out, prefix + ".ln1.b", blk.ln1.bias);
    push(out, prefix + ".ln2.g", blk.ln2.gain);
    push(out, prefix + ".ln2.b", blk.ln2.bias);
    push_attention(out, prefix + ".self", blk.self_attn);
    if (blk.is_decoder) {
        push(out, prefix + ".ln3.g", blk.ln3.gain);
        push(out, prefix + ".ln3.b", blk.ln3.bias);
        push_attention(out, prefix + ".cross", blk.cross_attn);
    }
    if (blk.smoe) {
        const auto& g = blk.smoe->gate;
        if (g.w_g.defined()) push(out, prefix + ".gate.wg", g.w_g);
        if (g.domain_embeddings.defined())
            push(out, prefix + ".gate.emb", g.domain_embeddings);
        for (size_t d = 0; d < g.w_g_domain.size(); ++d)
            push(out, prefix + ".gate.wg_d" + std::to_string(d), g.w_g_domain[d]);
        for (size_t e = 0; e < blk.smoe->experts.size(); ++e)
            push_ffn(out, prefix + ".expert" + std::to_string(e), blk.smoe->experts[e]);
    } else {
        push_ffn(out, prefix + ".ffn", blk.ffn);
    }
    if (blk.adapters) {
        for (size_t d = 0; d < blk.adapters->adapters.size(); ++d) {
            const auto& a = blk.adapters->adapters[d];
            const std::string ap = prefix + ".adapter" + std::to_string(d);
            push(out, ap + ".dw", a.down_w);
            push(out, ap + ".db", a.down_b);
            push(out, ap + ".uw", a.up_w);
            push(out, ap + ".ub", a.up_b);
        }
    }
}

}  // namespace

std::vector<NamedParam> Model::parameters() const {
    std::vector<NamedParam> out;
    push(out, "embed.table", embed_table);
    push(out, "out.proj", out_proj);
    for (size_t i = 0; i < encoder.size(); ++i)
        push_block(out, "enc." + std::to_string(i), encoder[i]);
    push(out, "enc.final_ln.g", enc_final_ln.gain);
    push(out, "enc.final_ln.b", enc_final_ln.bias);
    for (size_t i = 0; i < decoder.size(); ++i)
        push_block(out, "dec." + std::to_string(i), decoder[i]);
    push(out, "dec.final_ln.g", dec_final_ln.gain);
    push(out, "dec.final_ln.b", dec_final_ln.bias);
    return out;
}

void Model::set_requires_grad(bool on) const {
    for (const NamedParam& p : parameters()) {
        Tensor t = p.tensor;
        t.set_requires_grad(on);
    }
}

int64_t Model::parameter_count() const {
    int64_t n = 0;
    for (const NamedParam& p : parameters()) n += p.tensor.numel();
    return n;
}

std::vector<int32_t> prepend_domain_tag(const std::vector<int32_t>& source,
                                        int32_t domain, const DomainSchema& schema) {
    const DomainSpec& spec = schema.at(domain);
    if (source.empty() || source.back() != SpecialTokens::kEos) {
        throw ContractError("prepend_domain_tag: source must end with EOS");
    }
    for (const DomainSpec& d : schema.domains) {
        if (!source.empty() && source.front() == d.tag_token) {
            throw ContractError("prepend_domain_tag: source already carries a tag");
        }
    }
    std::vector<int32_t> out;
    out.reserve(source.size() + 1);
    out.push_back(spec.tag_token);
    out.insert(out.end(), source.begin(), source.end());
    return out;
}

Batch make_batch(const std::vector<data::Example>& examples, const Model& model,
                 std::optional<int32_t> label_override) {
    Batch b;
    b.source.reserve(examples.size());
    b.target.reserve(examples.size());
    b.domains.reserve(examples.size());
    for (const data::Example& e : examples) {
        const int32_t dom = label_override.value_or(e.assigned_domain);
        model.domain_schema().at(dom);
        b.source.push_back(model.prepare_source(e.source, dom));
        b.target.push_back(e.target);
        b.domains.push_back(dom);
    }
    return b;
}

}  // namespace moelab::model
