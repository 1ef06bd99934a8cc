#pragma once

#include <string>
#include <vector>

#include "moelab/data.hpp"
#include "moelab/model.hpp"

namespace moelab::bench {

struct BenchResult {
    std::string config_id;
    int64_t batch_tokens = 0;
    int repeats = 0;
    std::vector<double> times_sec;  // per timed repeat
    double median_sec = 0.0;
    double mean_sec = 0.0;
    double cv = 0.0;  // stddev / mean over repeats
    double tokens_per_sec = 0.0;
    int64_t decoded_tokens = 0;
    std::string host;
    int threads = 0;
    std::string precision;
    std::string batch_unit = "tokens";
    uint64_t testset_digest = 0;

    std::string to_json_line() const;
};

// Timed greedy decoding of the full test set, batched by source-token budget.
// Batches are materialized before timing starts, so the timed region covers
// decoding only. Runs `warmup` untimed passes first; the decoded token count
// must be identical across repeats (greedy decoding is deterministic).
BenchResult benchmark_inference(const model::Model& m,
                                const std::vector<data::Example>& testset,
                                int64_t batch_tokens, int repeats, int warmup,
                                int64_t max_len, const std::string& config_id);

struct CompareRow {
    std::string config_id;
    double median_sec = 0.0;
    double ratio = 0.0;  // vs the named baseline's median
};

// Median-time ratios against a named baseline; all results must come from
// the same test set and batch size.
std::vector<CompareRow> compare_configs(const std::vector<BenchResult>& results,
                                        const std::string& baseline_id);

std::string compare_csv(const std::vector<CompareRow>& rows);

}  // namespace moelab::bench
