#include "moelab/train.hpp"

#include <cmath>
#include <sstream>

namespace moelab::train {

using namespace num;

void TrainConfig::validate() const {
    if (warmup_steps < 1) throw ConfigError("train: warmup_steps must be >= 1");
    if (lr_max <= 0) throw ConfigError("train: lr_max must be positive");
    if (max_steps < 0) throw ConfigError("train: max_steps must be >= 0");
    if (batch_tokens < 1) throw ConfigError("train: batch_tokens must be positive");
    if (accumulation_steps < 1) throw ConfigError("train: accumulation_steps must be >= 1");
    if (label_smoothing < 0 || label_smoothing >= 1)
        throw ConfigError("train: label_smoothing must be in [0, 1)");
    if (eval_every < 1) throw ConfigError("train: eval_every must be >= 1");
}

double lr_schedule(int64_t step, double lr_max, int64_t warmup) {
    if (step <= 0) return 0.0;
    const double w = static_cast<double>(warmup);
    const double s = static_cast<double>(step);
    return lr_max * std::min(s / w, std::sqrt(w / s));
}

void AdamState::init(const std::vector<model::NamedParam>& params) {
    m.clear();
    v.clear();
    for (const model::NamedParam& p : params) {
        m.emplace_back(p.tensor.numel(), Scalar(0));
        v.emplace_back(p.tensor.numel(), Scalar(0));
    }
    t = 0;
}

void adam_step(const std::vector<model::NamedParam>& params, AdamState& state,
               double lr, double beta1, double beta2, double eps) {
    if (state.m.size() != params.size()) {
        throw ContractError("adam_step: state not initialized for this parameter list");
    }
    state.t += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor p = params[i].tensor;
        if (static_cast<int64_t>(state.m[i].size()) != p.numel()) {
            throw DimensionError("adam_step: state shape mismatch for " + params[i].name);
        }
        const std::vector<Scalar>* g = p.has_grad() ? &p.grad() : nullptr;
        Scalar* w = p.data();
        for (int64_t j = 0; j < p.numel(); ++j) {
            const double gj = g ? static_cast<double>((*g)[j]) : 0.0;
            state.m[i][j] = static_cast<Scalar>(beta1 * state.m[i][j] + (1 - beta1) * gj);
            state.v[i][j] = static_cast<Scalar>(beta2 * state.v[i][j] + (1 - beta2) * gj * gj);
            const double mhat = state.m[i][j] / bc1;
            const double vhat = state.v[i][j] / bc2;
            w[j] -= static_cast<Scalar>(lr * mhat / (std::sqrt(vhat) + eps));
        }
    }
}

void zero_gradients(const std::vector<model::NamedParam>& params) {
    for (const model::NamedParam& p : params) {
        Tensor t = p.tensor;
        t.zero_grad();
    }
}

void scale_gradients(const std::vector<model::NamedParam>& params, double factor) {
    for (const model::NamedParam& p : params) {
        if (!p.tensor.has_grad()) continue;
        Tensor t = p.tensor;
        auto& g = const_cast<std::vector<Scalar>&>(t.grad());
        for (Scalar& x : g) x = static_cast<Scalar>(x * factor);
    }
}

namespace {

// Flattened targets and padding mask for a padded batch.
void flatten_targets(const model::Batch& batch, int64_t tgt_len,
                     std::vector<int32_t>& targets, std::vector<uint8_t>& mask) {
    const int64_t b = static_cast<int64_t>(batch.target.size());
    targets.assign(b * tgt_len, SpecialTokens::kPad);
    mask.assign(b * tgt_len, 0);
    for (int64_t i = 0; i < b; ++i) {
        for (size_t j = 0; j < batch.target[i].size(); ++j) {
            targets[i * tgt_len + j] = batch.target[i][j];
            mask[i * tgt_len + j] = 1;
        }
    }
}

uint64_t batch_digest(const model::Batch& batch) {
    std::string s;
    for (const auto& row : batch.source)
        for (int32_t t : row) s += std::to_string(t) + ",";
    for (const auto& row : batch.target)
        for (int32_t t : row) s += std::to_string(t) + ";";
    return fnv1a64(s);
}

model::Batch draw_batch(const model::Model& m, data::TrainingStream& stream,
                        int64_t batch_tokens) {
    std::vector<data::Example> examples;
    int64_t tokens = 0;
    while (tokens < batch_tokens) {
        data::Example e = stream.next();
        tokens += static_cast<int64_t>(e.source.size() + e.target.size());
        examples.push_back(std::move(e));
    }
    return model::make_batch(examples, m);
}

}  // namespace

AccumResult accumulate_gradients(const model::Model& m,
                                 const std::vector<model::Batch>& micro_batches,
                                 double label_smoothing, num::Tape& tape) {
    AccumResult res;
    for (const model::Batch& batch : micro_batches) {
        Tape::Scope scope(tape);
        Tensor loss;
        std::vector<uint8_t> mask;
        try {
            model::ForwardResult fwd = m.forward(batch);
            std::vector<int32_t> targets;
            flatten_targets(batch, fwd.tgt_len, targets, mask);
            loss = cross_entropy_sum(fwd.logits, targets, mask, label_smoothing);
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " (batch digest " +
                               std::to_string(batch_digest(batch)) + ")");
        }
        if (!std::isfinite(loss.value())) {
            throw NumericError("train: non-finite loss (batch digest " +
                               std::to_string(batch_digest(batch)) + ")");
        }
        tape.backward(loss);
        tape.clear();
        res.loss_sum += loss.value();
        for (uint8_t v : mask) res.tokens += v;
    }
    return res;
}

std::string metrics_csv(const std::vector<MetricRow>& log, const DomainSchema& schema) {
    std::ostringstream os;
    os.precision(10);
    os << "step,lr,loss";
    for (const DomainSpec& d : schema.domains) os << ",acc_" << d.name;
    os << "\n";
    for (const MetricRow& r : log) {
        os << r.step << "," << r.lr << "," << r.loss;
        for (double a : r.domain_accuracy) os << "," << a;
        os << "\n";
    }
    return os.str();
}

double teacher_forced_accuracy(const model::Model& m,
                               const std::vector<data::Example>& examples) {
    if (examples.empty()) return 0.0;
    model::Batch batch = model::make_batch(examples, m);
    model::ForwardResult fwd = m.forward(batch);
    std::vector<int32_t> targets;
    std::vector<uint8_t> mask;
    flatten_targets(batch, fwd.tgt_len, targets, mask);
    int64_t hit = 0, total = 0;
    for (int64_t i = 0; i < static_cast<int64_t>(targets.size()); ++i) {
        if (!mask[i]) continue;
        ++total;
        if (argmax_row(fwd.logits, i) == targets[i]) ++hit;
    }
    return total ? static_cast<double>(hit) / total : 0.0;
}

TrainResult train_loop(const model::Model& m, data::TrainingStream& stream,
                       const TrainConfig& tc,
                       const std::vector<std::vector<data::Example>>& eval_sets,
                       const std::string& config_text,
                       const model::Checkpoint* resume) {
    tc.validate();
    std::vector<model::NamedParam> params = m.parameters();
    for (model::NamedParam& p : params) p.tensor.set_requires_grad(true);

    AdamState adam;
    adam.init(params);
    int64_t start_step = 0;
    if (resume) {
        model::restore_parameters(m, *resume);
        stream.set_rng_state(resume->rng_state);
        start_step = static_cast<int64_t>(resume->step);
        adam.t = start_step;
        for (size_t i = 0; i < params.size(); ++i) {
            const model::CheckpointBlob* bm = resume->find("adam_m/" + params[i].name);
            const model::CheckpointBlob* bv = resume->find("adam_v/" + params[i].name);
            if (!bm || !bv) {
                throw DataError("train: checkpoint lacks optimizer state for " +
                                params[i].name);
            }
            for (size_t j = 0; j < bm->values.size(); ++j) {
                adam.m[i][j] = static_cast<Scalar>(bm->values[j]);
                adam.v[i][j] = static_cast<Scalar>(bv->values[j]);
            }
        }
    }

    TrainResult result;
    double window_loss = 0.0;
    int64_t window_tokens = 0;

    auto log_row = [&](int64_t step, double lr) {
        MetricRow row;
        row.step = step;
        row.lr = lr;
        row.loss = window_tokens ? window_loss / window_tokens : 0.0;
        for (const auto& set : eval_sets)
            row.domain_accuracy.push_back(teacher_forced_accuracy(m, set));
        result.log.push_back(std::move(row));
        window_loss = 0.0;
        window_tokens = 0;
    };

    double last_lr = lr_schedule(start_step, tc.lr_max, tc.warmup_steps);
    for (int64_t step = start_step + 1; step <= tc.max_steps; ++step) {
        std::vector<model::Batch> micro;
        micro.reserve(tc.accumulation_steps);
        for (int64_t a = 0; a < tc.accumulation_steps; ++a) {
            micro.push_back(draw_batch(m, stream, tc.batch_tokens));
        }
        Tape tape(fnv1a64(config_text + "/step/" + std::to_string(step)) ^ tc.seed);
        zero_gradients(params);
        AccumResult acc;
        try {
            acc = accumulate_gradients(m, micro, tc.label_smoothing, tape);
        } catch (const NumericError& e) {
            throw NumericError("train aborted at step " + std::to_string(step) + ": " +
                               e.what());
        }
        scale_gradients(params, 1.0 / static_cast<double>(acc.tokens));
        const double lr = lr_schedule(step, tc.lr_max, tc.warmup_steps);
        last_lr = lr;
        adam_step(params, adam, lr, tc.adam_beta1, tc.adam_beta2, tc.adam_eps);
        window_loss += acc.loss_sum;
        window_tokens += acc.tokens;
        if (step % tc.eval_every == 0 || step == tc.max_steps) log_row(step, lr);
    }
    if (tc.max_steps == start_step) log_row(start_step, last_lr);
    zero_gradients(params);
    for (model::NamedParam& p : params) p.tensor.set_requires_grad(false);

    result.checkpoint = model::snapshot(m, config_text,
                                        static_cast<uint64_t>(tc.max_steps),
                                        stream.rng_state());
    for (size_t i = 0; i < params.size(); ++i) {
        model::CheckpointBlob bm, bv;
        bm.name = "adam_m/" + params[i].name;
        bv.name = "adam_v/" + params[i].name;
        bm.shape = bv.shape = params[i].tensor.shape();
        bm.values.assign(adam.m[i].begin(), adam.m[i].end());
        bv.values.assign(adam.v[i].begin(), adam.v[i].end());
        result.checkpoint.blobs.push_back(std::move(bm));
        result.checkpoint.blobs.push_back(std::move(bv));
    }
    if (!tc.checkpoint_path.empty()) {
        model::save_checkpoint(tc.checkpoint_path, result.checkpoint);
    }
    return result;
}

}  // namespace moelab::train
