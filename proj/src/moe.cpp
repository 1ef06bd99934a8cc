#include "moelab/moe.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace moelab::moe {

using namespace num;

int64_t GateParams::param_count() const {
    int64_t n = w_g.defined() ? w_g.numel() : 0;
    for (const Tensor& w : w_g_domain) n += w.numel();
    if (domain_embeddings.defined()) n += domain_embeddings.numel();
    return n;
}

GateParams make_gate(GateVariant variant, int64_t d_model, int64_t d_emb,
                     int64_t expert_count, int64_t top_k, int64_t domain_count,
                     std::mt19937_64& rng) {
    if (top_k < 1 || top_k > expert_count) {
        throw ConfigError("make_gate: need 1 <= k <= N, got k=" + std::to_string(top_k) +
                          " N=" + std::to_string(expert_count));
    }
    GateParams g;
    g.variant = variant;
    g.expert_count = expert_count;
    g.top_k = top_k;
    switch (variant) {
        case GateVariant::kStandard: {
            g.w_g = Tensor({d_model, expert_count});
            nn::init_xavier_uniform(g.w_g, rng);
            break;
        }
        case GateVariant::kDomainAware: {
            g.w_g = Tensor({d_model + d_emb, expert_count});
            nn::init_xavier_uniform(g.w_g, rng);
            g.domain_embeddings = Tensor({domain_count, d_emb});
            nn::init_normal(g.domain_embeddings, rng, 1.0 / std::sqrt(double(d_emb)));
            break;
        }
        case GateVariant::kDomainSpecialized: {
            for (int64_t d = 0; d < domain_count; ++d) {
                Tensor w({d_model, expert_count});
                nn::init_xavier_uniform(w, rng);
                g.w_g_domain.push_back(std::move(w));
            }
            break;
        }
    }
    return g;
}

// ---- trace -------------------------------------------------------------------

void GateTrace::reset(int32_t layers, int32_t experts) {
    layer_count = layers;
    expert_count = experts;
    entries.clear();
    layer_positions.assign(layers, 0);
}

void GateTrace::record(int32_t layer, int32_t domain, std::span<const Scalar> dist,
                       std::span<const int32_t> experts_sel,
                       std::span<const Scalar> weights_sel) {
    if (layer < 0 || layer >= layer_count) {
        throw ContractError("GateTrace: layer id out of range");
    }
    GateTraceEntry e;
    e.layer = layer;
    e.position = layer_positions[layer]++;
    e.domain = domain;
    e.distribution.assign(dist.begin(), dist.end());
    e.experts.assign(experts_sel.begin(), experts_sel.end());
    e.weights.assign(weights_sel.begin(), weights_sel.end());
    entries.push_back(std::move(e));
}

void GateTrace::merge(const GateTrace& other) {
    if (other.layer_count != layer_count || other.expert_count != expert_count) {
        throw ContractError("GateTrace::merge: incompatible traces");
    }
    for (GateTraceEntry e : other.entries) {
        e.position = layer_positions[e.layer]++;
        entries.push_back(std::move(e));
    }
    std::stable_sort(entries.begin(), entries.end(),
                     [](const GateTraceEntry& a, const GateTraceEntry& b) {
                         if (a.layer != b.layer) return a.layer < b.layer;
                         return a.position < b.position;
                     });
}

std::string GateTrace::to_csv() const {
    std::ostringstream os;
    os << "layer,position,domain,expert_rank,expert_id,weight\n";
    os.precision(17);
    for (const GateTraceEntry& e : entries) {
        for (size_t r = 0; r < e.experts.size(); ++r) {
            os << e.layer << "," << e.position << "," << e.domain << "," << r << ","
               << e.experts[r] << "," << e.weights[r] << "\n";
        }
    }
    return os.str();
}

namespace {

template <typename T>
void put(std::vector<uint8_t>& out, const T& v) {
    const auto* p = reinterpret_cast<const uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T take(std::span<const uint8_t>& in) {
    if (in.size() < sizeof(T)) throw DataError("GateTrace: truncated binary trace");
    T v;
    std::memcpy(&v, in.data(), sizeof(T));
    in = in.subspan(sizeof(T));
    return v;
}

constexpr uint32_t kTraceMagic = 0x4352544d;  // "MTRC"

}  // namespace

std::vector<uint8_t> GateTrace::to_binary() const {
    std::vector<uint8_t> out;
    put(out, kTraceMagic);
    put(out, uint32_t(1));
    put(out, layer_count);
    put(out, expert_count);
    put(out, uint64_t(entries.size()));
    for (const GateTraceEntry& e : entries) {
        put(out, e.layer);
        put(out, e.position);
        put(out, e.domain);
        put(out, uint32_t(e.experts.size()));
        for (Scalar v : e.distribution) put(out, double(v));
        for (int32_t i : e.experts) put(out, i);
        for (Scalar v : e.weights) put(out, double(v));
    }
    return out;
}

GateTrace GateTrace::from_binary(std::span<const uint8_t> bytes) {
    if (take<uint32_t>(bytes) != kTraceMagic) throw DataError("GateTrace: bad magic");
    if (take<uint32_t>(bytes) != 1) throw DataError("GateTrace: unsupported version");
    GateTrace t;
    t.layer_count = take<int32_t>(bytes);
    t.expert_count = take<int32_t>(bytes);
    t.layer_positions.assign(t.layer_count, 0);
    const uint64_t n = take<uint64_t>(bytes);
    for (uint64_t i = 0; i < n; ++i) {
        GateTraceEntry e;
        e.layer = take<int32_t>(bytes);
        e.position = take<int64_t>(bytes);
        e.domain = take<int32_t>(bytes);
        const uint32_t k = take<uint32_t>(bytes);
        e.distribution.resize(t.expert_count);
        for (auto& v : e.distribution) v = static_cast<Scalar>(take<double>(bytes));
        e.experts.resize(k);
        for (auto& v : e.experts) v = take<int32_t>(bytes);
        e.weights.resize(k);
        for (auto& v : e.weights) v = static_cast<Scalar>(take<double>(bytes));
        if (e.layer >= 0 && e.layer < t.layer_count) {
            t.layer_positions[e.layer] =
                std::max(t.layer_positions[e.layer], e.position + 1);
        }
        t.entries.push_back(std::move(e));
    }
    return t;
}

// ---- gates ---------------------------------------------------------------------

namespace {

Tensor as_row(const Tensor& x) {
    if (x.rank() == 1) return reshape(x, {1, x.extent(0)});
    return x;
}

Tensor flatten_if_single(const Tensor& dist, const Tensor& original) {
    if (original.rank() == 1) return reshape(dist, {dist.cols()});
    return dist;
}

void check_domain(int32_t domain, int64_t count, const char* who) {
    if (domain < 0 || domain >= count) {
        throw LookupError(std::string(who) + ": unknown domain id " +
                          std::to_string(domain));
    }
}

}  // namespace

Tensor gate_standard(const Tensor& x_t, const GateParams& g) {
    if (g.variant != GateVariant::kStandard) {
        throw ContractError("gate_standard: gate variant mismatch");
    }
    Tensor row = as_row(x_t);
    if (row.cols() != g.w_g.rows()) {
        throw DimensionError("gate_standard: token width " + row.shape_str() +
                             " vs W_g " + g.w_g.shape_str());
    }
    return flatten_if_single(softmax(matmul(row, g.w_g), 1), x_t);
}

Tensor gate_domain_aware(const Tensor& x_t, int32_t domain, const GateParams& g) {
    if (g.variant != GateVariant::kDomainAware) {
        throw ContractError("gate_domain_aware: gate variant mismatch");
    }
    check_domain(domain, g.domain_embeddings.rows(), "gate_domain_aware");
    Tensor row = as_row(x_t);
    Tensor e = slice_rows(g.domain_embeddings, domain, 1);
    Tensor z = concat_cols_broadcast(row, e);
    if (z.cols() != g.w_g.rows()) {
        throw DimensionError("gate_domain_aware: concat width " + z.shape_str() +
                             " vs W_g " + g.w_g.shape_str());
    }
    return flatten_if_single(softmax(matmul(z, g.w_g), 1), x_t);
}

Tensor gate_domain_specialized(const Tensor& x_t, int32_t domain, const GateParams& g) {
    if (g.variant != GateVariant::kDomainSpecialized) {
        throw ContractError("gate_domain_specialized: gate variant mismatch");
    }
    check_domain(domain, static_cast<int64_t>(g.w_g_domain.size()),
                 "gate_domain_specialized");
    Tensor row = as_row(x_t);
    const Tensor& w = g.w_g_domain[domain];
    if (row.cols() != w.rows()) {
        throw DimensionError("gate_domain_specialized: token width " + row.shape_str() +
                             " vs W_g^d " + w.shape_str());
    }
    return flatten_if_single(softmax(matmul(row, w), 1), x_t);
}

Tensor gate_forward(const GateParams& g, const Tensor& x,
                    const std::vector<int32_t>& domains) {
    const int64_t n = x.rows();
    if (static_cast<int64_t>(domains.size()) != n) {
        throw ContractError("gate_forward: one domain id per row required");
    }
    switch (g.variant) {
        case GateVariant::kStandard:
            return softmax(matmul(x, g.w_g), 1);
        case GateVariant::kDomainAware: {
            std::vector<int64_t> rows(n);
            for (int64_t i = 0; i < n; ++i) {
                check_domain(domains[i], g.domain_embeddings.rows(), "gate_forward");
                rows[i] = domains[i];
            }
            Tensor e = gather_rows(g.domain_embeddings, rows);
            return softmax(matmul(concat_cols(x, e), g.w_g), 1);
        }
        case GateVariant::kDomainSpecialized: {
            const int64_t dcount = static_cast<int64_t>(g.w_g_domain.size());
            std::vector<std::vector<int64_t>> groups(dcount);
            for (int64_t i = 0; i < n; ++i) {
                check_domain(domains[i], dcount, "gate_forward");
                groups[domains[i]].push_back(i);
            }
            Tensor logits;
            bool first = true;
            for (int64_t d = 0; d < dcount; ++d) {
                if (groups[d].empty()) continue;
                Tensor part = matmul(gather_rows(x, groups[d]), g.w_g_domain[d]);
                Tensor placed = scatter_rows(part, groups[d], n);
                logits = first ? placed : add(logits, placed);
                first = false;
            }
            return softmax(logits, 1);
        }
    }
    throw ContractError("gate_forward: unreachable");
}

// ---- top-k -----------------------------------------------------------------------

TopK top_k_select(std::span<const Scalar> dist, int64_t k) {
    const int64_t n = static_cast<int64_t>(dist.size());
    if (k < 1 || k > n) {
        throw ContractError("top_k_select: k=" + std::to_string(k) +
                            " out of range for N=" + std::to_string(n));
    }
    std::vector<int64_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
        if (dist[a] != dist[b]) return dist[a] > dist[b];
        return a < b;  // deterministic tie-break by lowest index
    });
    TopK out;
    out.indices.assign(order.begin(), order.begin() + k);
    Scalar total = 0;
    for (int64_t i : out.indices) total += dist[i];
    out.weights.resize(k);
    for (int64_t r = 0; r < k; ++r) out.weights[r] = dist[out.indices[r]] / total;
    return out;
}

// ---- SMoE layer --------------------------------------------------------------------

SmoeLayer make_smoe_layer(GateVariant variant, int64_t d_model, int64_t d_ff,
                          int64_t d_emb, int64_t expert_count, int64_t top_k,
                          int64_t domain_count, std::mt19937_64& rng) {
    SmoeLayer layer;
    layer.gate = make_gate(variant, d_model, d_emb, expert_count, top_k, domain_count, rng);
    for (int64_t i = 0; i < expert_count; ++i) {
        layer.experts.push_back(nn::make_ffn(d_model, d_ff, rng));
    }
    return layer;
}

Tensor smoe_forward_batch(const SmoeLayer& layer, const Tensor& x,
                          const std::vector<int32_t>& domains, GateTrace* trace,
                          int32_t layer_id) {
    const int64_t n = x.rows();
    const int64_t nexp = layer.expert_count();
    const int64_t k = layer.gate.top_k;
    if (nexp != layer.gate.expert_count) {
        throw ConfigError("smoe_forward: expert count " + std::to_string(nexp) +
                          " does not match gate N=" +
                          std::to_string(layer.gate.expert_count));
    }
    Tensor dist = gate_forward(layer.gate, x, domains);

    // Top-k per token on the distribution values; the selection itself is
    // outside the differentiation path.
    std::vector<std::vector<int64_t>> selected(n);
    for (int64_t t = 0; t < n; ++t) {
        TopK tk = top_k_select(
            std::span<const Scalar>(dist.data() + t * nexp, nexp), k);
        selected[t] = tk.indices;
    }

    // Renormalization denominator accumulated in rank order (rank is a
    // function of the gate values only, so the sum is identical under any
    // joint permutation of experts and gate columns).
    std::vector<int64_t> all_rows(n);
    std::iota(all_rows.begin(), all_rows.end(), 0);
    std::vector<Tensor> rank_cells(k);
    for (int64_t r = 0; r < k; ++r) {
        std::vector<int64_t> cols(n);
        for (int64_t t = 0; t < n; ++t) cols[t] = selected[t][r];
        rank_cells[r] = gather_cells(dist, all_rows, cols);
    }
    Tensor denom = rank_cells[0];
    for (int64_t r = 1; r < k; ++r) denom = add(denom, rank_cells[r]);

    // Evaluate each expert once on the tokens that selected it (any rank).
    std::vector<std::vector<int64_t>> expert_rows(nexp);
    for (int64_t t = 0; t < n; ++t)
        for (int64_t i : selected[t]) expert_rows[i].push_back(t);
    std::vector<Tensor> expert_out(nexp);
    std::vector<std::vector<int64_t>> row_of_token(nexp);
    for (int64_t i = 0; i < nexp; ++i) {
        if (expert_rows[i].empty()) continue;
        expert_out[i] = nn::ffn_forward(layer.experts[i], gather_rows(x, expert_rows[i]));
        layer.evaluations += static_cast<int64_t>(expert_rows[i].size());
    }
    // local position of token t inside expert i's row block
    std::vector<std::vector<int64_t>> token_local(nexp);
    for (int64_t i = 0; i < nexp; ++i) {
        token_local[i].assign(n, -1);
        for (size_t j = 0; j < expert_rows[i].size(); ++j)
            token_local[i][expert_rows[i][j]] = static_cast<int64_t>(j);
    }

    // Combine in rank order so per-token sums are independent of expert ids.
    Tensor out;
    std::vector<Tensor> rank_weights(k);
    for (int64_t r = 0; r < k; ++r) {
        Tensor zr;
        bool first = true;
        for (int64_t i = 0; i < nexp; ++i) {
            std::vector<int64_t> toks, locs;
            for (int64_t t = 0; t < n; ++t) {
                if (selected[t][r] == i) {
                    toks.push_back(t);
                    locs.push_back(token_local[i][t]);
                }
            }
            if (toks.empty()) continue;
            Tensor piece = scatter_rows(gather_rows(expert_out[i], locs), toks, n);
            zr = first ? piece : add(zr, piece);
            first = false;
        }
        Tensor wr = div_rowwise(rank_cells[r], denom);
        rank_weights[r] = wr;
        Tensor contrib = mul_rowwise(zr, wr);
        out = r == 0 ? contrib : add(out, contrib);
    }

    if (trace) {
        std::vector<int32_t> sel32(k);
        std::vector<Scalar> wsel(k);
        for (int64_t t = 0; t < n; ++t) {
            for (int64_t r = 0; r < k; ++r) {
                sel32[r] = static_cast<int32_t>(selected[t][r]);
                wsel[r] = rank_weights[r].at(t, 0);
            }
            trace->record(layer_id, domains[t],
                          std::span<const Scalar>(dist.data() + t * nexp, nexp),
                          sel32, wsel);
        }
    }
    return out;
}

Tensor smoe_forward(const SmoeLayer& layer, const Tensor& x_t, int32_t domain,
                    GateTrace* trace, int32_t layer_id) {
    Tensor row = as_row(x_t);
    if (row.rows() != 1) throw ContractError("smoe_forward: expected a single token");
    Tensor out = smoe_forward_batch(layer, row, {domain}, trace, layer_id);
    if (x_t.rank() == 1) return reshape(out, {out.cols()});
    return out;
}

}  // namespace moelab::moe
