#pragma once

#include <optional>
#include <string>
#include <vector>

#include "moelab/checkpoint.hpp"
#include "moelab/data.hpp"
#include "moelab/model.hpp"

namespace moelab::train {

using num::Scalar;

struct TrainConfig {
    int64_t max_steps = 3000;
    int64_t batch_tokens = 800;      // per micro-batch (source + target tokens)
    int64_t accumulation_steps = 1;  // micro-batches per optimizer update
    double lr_max = 2e-3;
    int64_t warmup_steps = 200;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-9;
    double label_smoothing = 0.1;
    int64_t eval_every = 500;
    uint64_t seed = 1;
    std::string checkpoint_path;  // empty: keep the checkpoint in memory only

    void validate() const;
};

// Inverse square root schedule with linear warmup:
//   lr(step) = lr_max * min(step / warmup, sqrt(warmup / step)), lr(0) = 0.
double lr_schedule(int64_t step, double lr_max, int64_t warmup);

struct AdamState {
    std::vector<std::vector<Scalar>> m;
    std::vector<std::vector<Scalar>> v;
    int64_t t = 0;

    void init(const std::vector<model::NamedParam>& params);
    bool initialized() const { return !m.empty(); }
};

// One bias-corrected Adam update over the parameter list, reading each
// parameter's accumulated gradient (missing gradient = zero).
void adam_step(const std::vector<model::NamedParam>& params, AdamState& state,
               double lr, double beta1, double beta2, double eps);

// Sums token-sum cross-entropy gradients over the given micro-batches into
// the parameters' grad buffers (without scaling). Returns {token count, loss
// sum}. Dividing the gradients by the token count afterwards makes
// accumulation over a micro-batches equal one a-times-larger batch.
struct AccumResult {
    int64_t tokens = 0;
    double loss_sum = 0.0;
};
AccumResult accumulate_gradients(const model::Model& m,
                                 const std::vector<model::Batch>& micro_batches,
                                 double label_smoothing, num::Tape& tape);

void zero_gradients(const std::vector<model::NamedParam>& params);
void scale_gradients(const std::vector<model::NamedParam>& params, double factor);

struct MetricRow {
    int64_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
    std::vector<double> domain_accuracy;  // schema order
};

std::string metrics_csv(const std::vector<MetricRow>& log, const DomainSchema& schema);

// Teacher-forced per-token accuracy under the examples' assigned labels.
double teacher_forced_accuracy(const model::Model& m,
                               const std::vector<data::Example>& examples);

struct TrainResult {
    std::vector<MetricRow> log;
    model::Checkpoint checkpoint;
};

// Runs max_steps optimizer updates, logging every eval_every steps (and at
// the final step). The checkpoint embeds config_text, the optimizer moments
// and the stream RNG state, so a resumed run continues bit-exactly. Aborts
// with NumericError on a non-finite loss.
TrainResult train_loop(const model::Model& m, data::TrainingStream& stream,
                       const TrainConfig& tc,
                       const std::vector<std::vector<data::Example>>& eval_sets,
                       const std::string& config_text,
                       const model::Checkpoint* resume = nullptr);

}  // namespace moelab::train
