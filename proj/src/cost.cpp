#include "moelab/cost.hpp"

#include <sstream>

#include <json.hpp>

namespace moelab::cost {

namespace {

int64_t sites_in(int64_t layers) { return layers / 2; }  // even 1-based indices

int64_t ffn_params(int64_t d, int64_t dff) { return 2 * d * dff + dff + d; }

int64_t gate_in_width(const model::ModelConfig& cfg) {
    // domain-aware gates consume the token representation concatenated with a
    // d_model-wide domain embedding
    return cfg.conditioning == model::Conditioning::kDomainAwareGate ? 2 * cfg.d_model
                                                                     : cfg.d_model;
}

}  // namespace

CostReport count_params(const model::ModelConfig& cfg, const DomainSchema& schema) {
    cfg.validate();
    const int64_t d = cfg.d_model;
    const int64_t v = cfg.vocab_size;
    const int64_t dff = cfg.d_ff_effective();
    const int64_t le = cfg.encoder_layers;
    const int64_t ld = cfg.decoder_layers;
    const int64_t se = sites_in(le);
    const int64_t sd = sites_in(ld);
    const int64_t domains = schema.domain_count();

    CostReport r;
    const int64_t attn = 4 * d * d + 4 * d;  // q,k,v,o weights + biases
    const int64_t ln = 2 * d;

    int64_t embeddings = v * d;      // shared input table
    int64_t output_proj = d * v;     // untied output projection
    int64_t attention = (le + 2 * ld) * attn;
    int64_t layer_norm = le * 2 * ln + ld * 3 * ln + 2 * ln;  // + final norms
    int64_t ffn = 0, gates = 0, adapters = 0;

    switch (cfg.ffn_variant) {
        case model::FfnVariant::kDense:
            ffn = (le + ld) * ffn_params(d, dff);
            break;
        case model::FfnVariant::kSmoe: {
            ffn = (le - se + ld - sd) * ffn_params(d, cfg.d_ff) +
                  (se + sd) * cfg.expert_count * ffn_params(d, cfg.d_ff);
            int64_t per_site = 0;
            switch (cfg.conditioning) {
                case model::Conditioning::kDomainAwareGate:
                    per_site = gate_in_width(cfg) * cfg.expert_count + domains * d;
                    break;
                case model::Conditioning::kDomainSpecializedGate:
                    per_site = domains * d * cfg.expert_count;
                    break;
                default:
                    per_site = d * cfg.expert_count;
            }
            gates = (se + sd) * per_site;
            break;
        }
        case model::FfnVariant::kAdapters:
            ffn = (le + ld) * ffn_params(d, dff);
            adapters = (se + sd) * domains * (2 * d * cfg.adapter_dim + cfg.adapter_dim + d);
            break;
    }

    r.param_groups["embeddings"] = embeddings + output_proj;
    r.param_groups["attention"] = attention;
    r.param_groups["layer_norm"] = layer_norm;
    r.param_groups["ffn_experts"] = ffn;
    r.param_groups["gates"] = gates;
    r.param_groups["adapters"] = adapters;
    r.params_untied = embeddings + output_proj + attention + layer_norm + ffn + gates + adapters;
    r.params_tied = r.params_untied - output_proj;
    return r;
}

CostReport estimate_flops(const model::ModelConfig& cfg, const DomainSchema& schema,
                          int64_t src_len, int64_t tgt_len) {
    CostReport r = count_params(cfg, schema);
    r.src_len = src_len;
    r.tgt_len = tgt_len;
    const uint64_t d = cfg.d_model;
    const uint64_t v = cfg.vocab_size;
    const uint64_t s = src_len;
    const uint64_t t = tgt_len;
    const uint64_t le = cfg.encoder_layers;
    const uint64_t ld = cfg.decoder_layers;
    const uint64_t se = sites_in(cfg.encoder_layers);
    const uint64_t sd = sites_in(cfg.decoder_layers);

    // attention: projections (4 per self block; q/o over queries and k/v over
    // keys for cross blocks) plus score and mixing products
    uint64_t attention = le * (4 * s * d * d + 2 * s * s * d);
    attention += ld * (4 * t * d * d + 2 * t * t * d);                    // decoder self
    attention += ld * (2 * t * d * d + 2 * s * d * d + 2 * t * s * d);    // cross

    uint64_t ffn = 0, gate = 0;
    const uint64_t per_tok_dense = 2 * d * static_cast<uint64_t>(cfg.d_ff_effective());
    switch (cfg.ffn_variant) {
        case model::FfnVariant::kDense:
            ffn = (le * s + ld * t) * per_tok_dense;
            break;
        case model::FfnVariant::kSmoe: {
            const uint64_t per_tok = 2 * d * static_cast<uint64_t>(cfg.d_ff);
            ffn = ((le - se) * s + (ld - sd) * t) * per_tok +
                  (se * s + sd * t) * static_cast<uint64_t>(cfg.top_k) * per_tok;
            gate = (se * s + sd * t) * static_cast<uint64_t>(gate_in_width(cfg)) *
                   static_cast<uint64_t>(cfg.expert_count);
            break;
        }
        case model::FfnVariant::kAdapters: {
            ffn = (le * s + ld * t) * per_tok_dense +
                  (se * s + sd * t) * 2 * d * static_cast<uint64_t>(cfg.adapter_dim);
            break;
        }
    }

    r.macs.attention = attention;
    r.macs.ffn = ffn;
    r.macs.gate = gate;
    r.macs.output = t * d * v;
    (void)schema;
    return r;
}

uint64_t instrumented_macs(const model::ModelConfig& cfg, const DomainSchema& schema,
                           int64_t src_len, int64_t tgt_len) {
    model::Model m(cfg, schema);
    model::Batch batch;
    // arbitrary well-formed tokens at exactly the requested physical lengths
    std::vector<int32_t> src(src_len, SpecialTokens::kEos);
    std::vector<int32_t> tgt(tgt_len, SpecialTokens::kEos);
    batch.source.push_back(src);
    batch.target.push_back(tgt);
    batch.domains.push_back(0);
    num::MacCounter::enable(true);
    num::MacCounter::reset();
    m.forward(batch);
    const uint64_t macs = num::MacCounter::total();
    num::MacCounter::enable(false);
    return macs;
}

std::string CostReport::to_json() const {
    nlohmann::ordered_json j;
    j["params"]["untied"] = params_untied;
    j["params"]["tied"] = params_tied;
    for (const auto& [k, v] : param_groups) j["params"]["groups"][k] = v;
    j["macs"]["src_len"] = src_len;
    j["macs"]["tgt_len"] = tgt_len;
    j["macs"]["attention"] = macs.attention;
    j["macs"]["ffn_experts"] = macs.ffn;
    j["macs"]["gate"] = macs.gate;
    j["macs"]["output_projection"] = macs.output;
    j["macs"]["body"] = macs.body();
    j["macs"]["total"] = macs.total();
    j["flops_2x_macs"] = flops();
    return j.dump(2);
}

std::string table_csv_header() { return "model,params,flops\n"; }

std::string table_csv_row(const std::string& label, const CostReport& report) {
    std::ostringstream os;
    os << label << "," << report.params_tied << "," << report.macs.body() << "\n";
    return os.str();
}

}  // namespace moelab::cost
