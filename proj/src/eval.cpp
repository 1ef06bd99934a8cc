#include "moelab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include <json.hpp>

namespace moelab::eval {

using namespace num;

std::vector<int32_t> greedy_decode_steps(
    const std::function<std::vector<Scalar>(const std::vector<int32_t>&)>& step,
    int64_t max_len) {
    if (max_len < 1) throw ContractError("greedy_decode: max_len must be >= 1");
    std::vector<int32_t> out;
    for (int64_t i = 0; i < max_len; ++i) {
        const std::vector<Scalar> logits = step(out);
        if (logits.empty()) throw ContractError("greedy_decode: empty logits row");
        int32_t best = 0;
        for (size_t j = 1; j < logits.size(); ++j)
            if (logits[j] > logits[best]) best = static_cast<int32_t>(j);
        if (best == SpecialTokens::kEos) break;
        out.push_back(best);
    }
    return out;
}

std::vector<std::vector<int32_t>> greedy_decode_batch(
    const model::Model& m, const std::vector<std::vector<int32_t>>& sources,
    const std::vector<int32_t>& labels, int64_t max_len) {
    if (max_len < 1) throw ContractError("greedy_decode: max_len must be >= 1");
    const int64_t batch = static_cast<int64_t>(sources.size());
    if (batch == 0) return {};
    std::vector<std::vector<int32_t>> prepared(batch);
    for (int64_t b = 0; b < batch; ++b) prepared[b] = m.prepare_source(sources[b], labels[b]);
    model::EncodedBatch enc = m.encode(prepared, labels, nullptr);

    std::vector<std::vector<int32_t>> dec_in(batch, std::vector<int32_t>{SpecialTokens::kBos});
    std::vector<std::vector<int32_t>> out(batch);
    std::vector<uint8_t> done(batch, 0);
    for (int64_t stepi = 0; stepi < max_len; ++stepi) {
        Tensor logits = m.decode_logits(enc, dec_in, nullptr);
        const int64_t t = static_cast<int64_t>(dec_in[0].size());
        bool all_done = true;
        for (int64_t b = 0; b < batch; ++b) {
            if (done[b]) {
                dec_in[b].push_back(SpecialTokens::kEos);
                continue;
            }
            const int64_t row = b * t + (t - 1);
            const int32_t best = static_cast<int32_t>(argmax_row(logits, row));
            if (best == SpecialTokens::kEos) {
                done[b] = 1;
                dec_in[b].push_back(SpecialTokens::kEos);
            } else {
                out[b].push_back(best);
                dec_in[b].push_back(best);
                all_done = false;
            }
        }
        if (all_done) break;
    }
    return out;
}

std::vector<int32_t> greedy_decode(const model::Model& m,
                                   const std::vector<int32_t>& source,
                                   int32_t domain, int64_t max_len) {
    return greedy_decode_batch(m, {source}, {domain}, max_len)[0];
}

// ---- BLEU ---------------------------------------------------------------------

namespace {

using Ngram = std::vector<int32_t>;

std::map<Ngram, int64_t> count_ngrams(const std::vector<int32_t>& seq, int64_t n) {
    std::map<Ngram, int64_t> counts;
    const int64_t len = static_cast<int64_t>(seq.size());
    for (int64_t i = 0; i + n <= len; ++i) {
        counts[Ngram(seq.begin() + i, seq.begin() + i + n)] += 1;
    }
    return counts;
}

}  // namespace

double corpus_bleu(const std::vector<std::vector<int32_t>>& hypotheses,
                   const std::vector<std::vector<int32_t>>& references) {
    if (hypotheses.size() != references.size()) {
        throw ContractError("corpus_bleu: hypothesis/reference count mismatch");
    }
    if (references.empty()) throw ContractError("corpus_bleu: empty reference list");
    int64_t hyp_len = 0, ref_len = 0;
    int64_t matched[5] = {0}, total[5] = {0};
    for (size_t i = 0; i < hypotheses.size(); ++i) {
        hyp_len += static_cast<int64_t>(hypotheses[i].size());
        ref_len += static_cast<int64_t>(references[i].size());
        for (int64_t n = 1; n <= 4; ++n) {
            const auto hc = count_ngrams(hypotheses[i], n);
            const auto rc = count_ngrams(references[i], n);
            for (const auto& [ng, c] : hc) {
                total[n] += c;
                auto it = rc.find(ng);
                if (it != rc.end()) matched[n] += std::min(c, it->second);
            }
        }
    }
    if (hyp_len == 0) return 0.0;
    double log_sum = 0.0;
    int64_t orders = 0;
    for (int64_t n = 1; n <= 4; ++n) {
        if (total[n] == 0) continue;  // hypotheses too short for this order
        double p = static_cast<double>(matched[n]) / static_cast<double>(total[n]);
        if (p <= 0.0) p = 1e-9;
        log_sum += std::log(p);
        ++orders;
    }
    if (orders == 0) return 0.0;
    const double geo = std::exp(log_sum / static_cast<double>(orders));
    const double bp = std::exp(std::min(
        0.0, 1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len)));
    return 100.0 * geo * bp;
}

// ---- scoring ---------------------------------------------------------------------

TestScore score_testset(const model::Model& m,
                        const std::vector<data::Example>& testset,
                        std::optional<int32_t> label, int64_t max_len) {
    TestScore s;
    if (testset.empty()) return s;
    const DomainSchema& schema = m.domain_schema();
    std::vector<std::vector<int32_t>> sources, refs;
    std::vector<int32_t> labels;
    sources.reserve(testset.size());
    for (const data::Example& e : testset) {
        sources.push_back(e.source);
        labels.push_back(label.value_or(e.assigned_domain));
        std::vector<int32_t> ref = e.target;
        if (!ref.empty() && ref.back() == SpecialTokens::kEos) ref.pop_back();
        refs.push_back(std::move(ref));
    }
    std::vector<std::vector<int32_t>> hyps =
        greedy_decode_batch(m, sources, labels, max_len);

    int64_t hit = 0, shared_hit = 0, unseen_hit = 0;
    for (size_t i = 0; i < testset.size(); ++i) {
        const auto& ref = refs[i];
        const auto& hyp = hyps[i];
        const auto& src = testset[i].source;  // content aligned with the target
        for (size_t j = 0; j < ref.size(); ++j) {
            const bool ok = j < hyp.size() && hyp[j] == ref[j];
            ++s.tokens;
            hit += ok;
            if (j < src.size() && schema.shared_range.contains(src[j])) {
                ++s.shared_tokens;
                shared_hit += ok;
            }
            if (j < src.size() && !schema.unseen_related_range.empty() &&
                schema.unseen_related_range.contains(src[j])) {
                ++s.unseen_tokens;
                unseen_hit += ok;
            }
        }
    }
    s.token_accuracy = s.tokens ? static_cast<double>(hit) / s.tokens : 0.0;
    s.shared_accuracy =
        s.shared_tokens ? static_cast<double>(shared_hit) / s.shared_tokens : 0.0;
    s.unseen_accuracy =
        s.unseen_tokens ? static_cast<double>(unseen_hit) / s.unseen_tokens : 0.0;
    s.bleu = corpus_bleu(hyps, refs);
    return s;
}

// ---- robustness matrix --------------------------------------------------------------

std::string RobustnessMatrix::to_csv() const { return matrix_csv(domains, cells); }
std::string RobustnessMatrix::to_long_csv() const {
    return matrix_long_csv(domains, cells);
}

std::string RobustnessMatrix::to_json() const {
    nlohmann::ordered_json j;
    j["metric"] = metric;
    j["domains"] = domains;
    j["cells"] = cells;
    j["mean_degradation"] = mean_degradation;
    return j.dump(2);
}

RobustnessMatrix wrong_label_matrix(
    const model::Model& m,
    const std::vector<std::vector<data::Example>>& testsets_by_domain,
    const std::vector<int32_t>& labels, const std::string& metric,
    int64_t max_len) {
    if (m.config().conditioning == model::Conditioning::kNone) {
        throw ContractError(
            "wrong_label_matrix: model has no domain conditioning to vary");
    }
    if (testsets_by_domain.size() != labels.size()) {
        throw ContractError("wrong_label_matrix: one test set per label required");
    }
    if (metric != "accuracy" && metric != "bleu") {
        throw ContractError("wrong_label_matrix: metric must be accuracy or bleu");
    }
    RobustnessMatrix out;
    out.metric = metric;
    const DomainSchema& schema = m.domain_schema();
    for (int32_t lbl : labels) out.domains.push_back(schema.at(lbl).name);
    const size_t d = labels.size();
    out.cells.assign(d, std::vector<double>(d, 0.0));
    for (size_t row = 0; row < d; ++row) {
        for (size_t col = 0; col < d; ++col) {
            TestScore s = score_testset(m, testsets_by_domain[row], labels[col], max_len);
            out.cells[row][col] = metric == "accuracy" ? s.token_accuracy : s.bleu;
        }
    }
    double deg = 0.0;
    for (size_t row = 0; row < d; ++row) {
        double off = 0.0;
        for (size_t col = 0; col < d; ++col)
            if (col != row) off += out.cells[row][col];
        deg += out.cells[row][row] - (d > 1 ? off / static_cast<double>(d - 1) : 0.0);
    }
    out.mean_degradation = deg / static_cast<double>(d);
    return out;
}

// ---- gate statistics ------------------------------------------------------------------

ActivityProfile top1_activity(const moe::GateTrace& trace) {
    std::vector<int32_t> all(trace.layer_count);
    for (int32_t l = 0; l < trace.layer_count; ++l) all[l] = l;
    return top1_activity(trace, all);
}

ActivityProfile top1_activity(const moe::GateTrace& trace,
                              const std::vector<int32_t>& layers) {
    if (trace.layer_count < 1) throw ContractError("top1_activity: trace has no layers");
    ActivityProfile p;
    p.layer_count = static_cast<int32_t>(layers.size());
    p.expert_count = trace.expert_count;
    p.values.assign(static_cast<size_t>(p.layer_count) * p.expert_count, 0.0);
    std::vector<int64_t> totals(layers.size(), 0);
    std::vector<int32_t> slot(trace.layer_count, -1);
    for (size_t i = 0; i < layers.size(); ++i) slot[layers[i]] = static_cast<int32_t>(i);
    for (const moe::GateTraceEntry& e : trace.entries) {
        if (e.layer < 0 || e.layer >= trace.layer_count || slot[e.layer] < 0) continue;
        if (e.experts.empty()) continue;
        p.values[slot[e.layer] * p.expert_count + e.experts[0]] += 1.0;
        totals[slot[e.layer]] += 1;
    }
    for (size_t l = 0; l < layers.size(); ++l) {
        if (totals[l] == 0) {
            throw ContractError("top1_activity: layer " + std::to_string(layers[l]) +
                                " has no trace entries");
        }
        for (int32_t e = 0; e < p.expert_count; ++e)
            p.values[l * p.expert_count + e] /= static_cast<double>(totals[l]);
    }
    return p;
}

std::string ActivityProfile::to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "layer,expert,top1_activity\n";
    for (int32_t l = 0; l < layer_count; ++l)
        for (int32_t e = 0; e < expert_count; ++e)
            os << l << "," << e << "," << values[l * expert_count + e] << "\n";
    return os.str();
}

double expert_similarity(const ActivityProfile& a, const ActivityProfile& b) {
    if (a.values.size() != b.values.size() || a.values.empty()) {
        throw ContractError("expert_similarity: profile length mismatch");
    }
    if (a.values == b.values) return 1.0;  // self-similarity is exactly 1
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.values.size(); ++i) {
        dot += a.values[i] * b.values[i];
        na += a.values[i] * a.values[i];
        nb += b.values[i] * b.values[i];
    }
    if (na == 0.0 || nb == 0.0) {
        throw ContractError("expert_similarity: zero-norm profile");
    }
    return dot / std::sqrt(na * nb);
}

moe::GateTrace trace_decode(const model::Model& m,
                            const std::vector<data::Example>& dataset,
                            int32_t label, int64_t max_len) {
    std::vector<std::vector<int32_t>> sources;
    std::vector<int32_t> labels(dataset.size(), label);
    for (const data::Example& e : dataset) sources.push_back(e.source);
    std::vector<std::vector<int32_t>> hyps =
        greedy_decode_batch(m, sources, labels, max_len);
    model::Batch batch;
    for (size_t i = 0; i < dataset.size(); ++i) {
        batch.source.push_back(m.prepare_source(sources[i], label));
        std::vector<int32_t> tgt = hyps[i];
        tgt.push_back(SpecialTokens::kEos);
        batch.target.push_back(std::move(tgt));
        batch.domains.push_back(label);
    }
    return m.forward(batch).trace;
}

std::vector<std::vector<double>> label_sweep_similarity(
    const model::Model& m, const std::vector<data::Example>& dataset,
    const std::vector<int32_t>& labels, int64_t max_len) {
    if (m.config().ffn_variant != model::FfnVariant::kSmoe) {
        throw ContractError("label_sweep_similarity: not an SMoE model");
    }
    std::vector<ActivityProfile> profiles;
    profiles.reserve(labels.size());
    for (int32_t lbl : labels) {
        profiles.push_back(top1_activity(trace_decode(m, dataset, lbl, max_len)));
    }
    const size_t n = labels.size();
    std::vector<std::vector<double>> sim(n, std::vector<double>(n, 0.0));
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j)
            sim[i][j] = expert_similarity(profiles[i], profiles[j]);
    return sim;
}

std::string matrix_csv(const std::vector<std::string>& names,
                       const std::vector<std::vector<double>>& cells) {
    std::ostringstream os;
    os.precision(17);
    os << "domain";
    for (const std::string& n : names) os << "," << n;
    os << "\n";
    for (size_t r = 0; r < cells.size(); ++r) {
        os << names[r];
        for (double v : cells[r]) os << "," << v;
        os << "\n";
    }
    return os.str();
}

std::string matrix_long_csv(const std::vector<std::string>& names,
                            const std::vector<std::vector<double>>& cells) {
    std::ostringstream os;
    os.precision(17);
    os << "row,col,value\n";
    for (size_t r = 0; r < cells.size(); ++r)
        for (size_t c = 0; c < cells[r].size(); ++c)
            os << names[r] << "," << names[c] << "," << cells[r][c] << "\n";
    return os.str();
}

}  // namespace moelab::eval
