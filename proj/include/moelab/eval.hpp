#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "moelab/data.hpp"
#include "moelab/model.hpp"

namespace moelab::eval {

using num::Scalar;

// Greedy decoding core over an arbitrary next-token scorer: step(prefix)
// returns the logits row for the next position given the tokens emitted so
// far. Emits argmax tokens (ties to the lowest id) until EOS or max_len
// content tokens; the returned sequence excludes EOS.
std::vector<int32_t> greedy_decode_steps(
    const std::function<std::vector<Scalar>(const std::vector<int32_t>&)>& step,
    int64_t max_len);

// Batched greedy decode: sources are raw (untagged) and the label is applied
// through the model's conditioning. The encoder runs once per batch.
std::vector<std::vector<int32_t>> greedy_decode_batch(
    const model::Model& m, const std::vector<std::vector<int32_t>>& sources,
    const std::vector<int32_t>& labels, int64_t max_len);

std::vector<int32_t> greedy_decode(const model::Model& m,
                                   const std::vector<int32_t>& source,
                                   int32_t domain, int64_t max_len);

// Corpus BLEU-4: geometric mean of clipped n-gram precisions (orders with no
// hypothesis n-grams are skipped; zero precisions floored at 1e-9) times the
// brevity penalty exp(min(0, 1 - r/c)), scaled to [0, 100].
double corpus_bleu(const std::vector<std::vector<int32_t>>& hypotheses,
                   const std::vector<std::vector<int32_t>>& references);

// Decode-based scoring of one test set under one label (or each example's
// assigned label when label is nullopt). Token accuracy is position-exact
// match over reference content tokens; the shared/unseen breakdowns restrict
// scoring to positions whose source token falls in the schema's shared or
// unseen-related range.
struct TestScore {
    double token_accuracy = 0.0;
    double bleu = 0.0;
    double shared_accuracy = 0.0;
    double unseen_accuracy = 0.0;
    int64_t tokens = 0;
    int64_t shared_tokens = 0;
    int64_t unseen_tokens = 0;
};

TestScore score_testset(const model::Model& m,
                        const std::vector<data::Example>& testset,
                        std::optional<int32_t> label, int64_t max_len);

// Wrong-label robustness protocol: rows are true test domains, columns the
// label used at decoding.
struct RobustnessMatrix {
    std::vector<std::string> domains;
    std::vector<std::vector<double>> cells;
    std::string metric;
    // mean over rows of (diagonal - mean of the row's off-diagonal cells)
    double mean_degradation = 0.0;

    std::string to_csv() const;
    std::string to_long_csv() const;  // row,col,value
    std::string to_json() const;
};

RobustnessMatrix wrong_label_matrix(
    const model::Model& m,
    const std::vector<std::vector<data::Example>>& testsets_by_domain,
    const std::vector<int32_t>& labels, const std::string& metric,
    int64_t max_len);

// Per-expert fraction of tokens routed to it as the first choice, one block
// per SMoE layer; blocks each sum to 1.
struct ActivityProfile {
    int32_t layer_count = 0;
    int32_t expert_count = 0;
    std::vector<double> values;  // layer-major

    std::string to_csv() const;
};

ActivityProfile top1_activity(const moe::GateTrace& trace);
// Restriction to a subset of layers (encoder/decoder stack breakdowns).
ActivityProfile top1_activity(const moe::GateTrace& trace,
                              const std::vector<int32_t>& layers);

// Cosine similarity of activity profiles in [0, 1]; bitwise-identical
// profiles score exactly 1.
double expert_similarity(const ActivityProfile& a, const ActivityProfile& b);

// Decodes the dataset under each label, traces the resulting routing, and
// returns the pairwise profile similarity over labels.
std::vector<std::vector<double>> label_sweep_similarity(
    const model::Model& m, const std::vector<data::Example>& dataset,
    const std::vector<int32_t>& labels, int64_t max_len);

// Decode + trace helper: runs greedy decoding under the label, then one
// teacher-forced pass over (source, hypothesis) collecting the gate trace.
moe::GateTrace trace_decode(const model::Model& m,
                            const std::vector<data::Example>& dataset,
                            int32_t label, int64_t max_len);

std::string matrix_csv(const std::vector<std::string>& names,
                       const std::vector<std::vector<double>>& cells);
std::string matrix_long_csv(const std::vector<std::string>& names,
                            const std::vector<std::vector<double>>& cells);

}  // namespace moelab::eval
