#pragma once

#include <map>
#include <string>

#include "moelab/model.hpp"

namespace moelab::cost {

// Multiply-accumulate counts for one teacher-forced forward pass, grouped so
// the headline figure (attention + FFN/experts, the reference-table convention)
// and the instrumented total (everything the runtime counter sees, gates and
// output projection included) are both available.
struct MacBreakdown {
    uint64_t attention = 0;
    uint64_t ffn = 0;     // dense FFN, experts, adapter bottlenecks
    uint64_t gate = 0;    // gate projections (d_model x N per routed token)
    uint64_t output = 0;  // final vocabulary projection

    uint64_t total() const { return attention + ffn + gate + output; }
    uint64_t body() const { return attention + ffn; }
};

struct CostReport {
    // parameters, under both embedding conventions: the built model unties
    // the output projection from the shared input table
    int64_t params_untied = 0;
    int64_t params_tied = 0;
    std::map<std::string, int64_t> param_groups;

    int64_t src_len = 10;
    int64_t tgt_len = 10;
    MacBreakdown macs;

    uint64_t flops() const { return 2 * macs.total(); }
    std::string to_json() const;
};

// Closed-form parameter count; equals the built model's allocation exactly
// (untied convention).
CostReport count_params(const model::ModelConfig& cfg, const DomainSchema& schema);

// Analytic MAC count for one teacher-forced forward pass at the given
// physical sequence lengths (embedding lookups excluded). Matches the
// runtime MAC counter exactly for an unpadded single-example batch.
CostReport estimate_flops(const model::ModelConfig& cfg, const DomainSchema& schema,
                          int64_t src_len = 10, int64_t tgt_len = 10);

// Instrumented cross-check: builds the model, runs one forward pass over an
// unpadded single example with the given physical lengths, and returns the
// runtime MAC counter value.
uint64_t instrumented_macs(const model::ModelConfig& cfg, const DomainSchema& schema,
                           int64_t src_len, int64_t tgt_len);

// Table-shaped CSV row: model label, tied parameter count, body FLOPs.
std::string table_csv_header();
std::string table_csv_row(const std::string& label, const CostReport& report);

}  // namespace moelab::cost
