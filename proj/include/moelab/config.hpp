#pragma once

#include <string>
#include <vector>

#include "moelab/model.hpp"
#include "moelab/train.hpp"

namespace moelab::cli {

// Flat key = value experiment description. Every key has a default, unknown
// keys are rejected, and parse -> emit -> parse is the identity. One file
// fully determines the schema, the model, the data mixture and the training
// regime, so preset variants differ by a handful of lines.
struct ExperimentConfig {
    // model
    int64_t d_model = 32;
    int64_t d_ff = 128;
    int64_t encoder_layers = 2;
    int64_t decoder_layers = 2;
    int64_t heads = 2;
    int64_t vocab_size = 0;  // 0: sized by the schema layout
    std::string ffn_variant = "smoe";
    double width_multiplier = 1.0;
    int64_t expert_count = 4;
    int64_t top_k = 2;
    std::string expert_placement = "every_second_layer";
    int64_t adapter_dim = 16;
    std::string conditioning = "tags";
    double dr_probability = 0.0;
    double dropout = 0.0;
    uint64_t seed = 1;

    // schema / data
    std::string domains = "generic,alpha,beta,gamma,delta";
    std::string sample_probs = "0.5,0.125,0.125,0.125,0.125";
    int64_t content_tokens = 24;
    int64_t shared_tokens = 16;
    int64_t unseen_related_tokens = 12;
    std::string unseen_related_host = "alpha";
    int64_t seq_len_min = 4;
    int64_t seq_len_max = 8;
    int64_t train_examples = 4000;
    int64_t valid_examples = 200;
    int64_t test_examples = 200;

    // training
    int64_t max_steps = 3000;
    int64_t batch_tokens = 800;
    int64_t accumulation_steps = 1;
    double lr_max = 0.002;
    int64_t warmup_steps = 200;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-9;
    double label_smoothing = 0.1;
    int64_t eval_every = 500;

    // The seed key falls back to the MOELAB_SEED environment variable when
    // the file does not set it.
    static ExperimentConfig parse(const std::string& text);
    static ExperimentConfig load(const std::string& path);
    std::string emit() const;

    std::vector<std::string> domain_names() const;
    std::vector<double> probs() const;
    SchemaLayout layout() const;
    DomainSchema schema() const;
    model::ModelConfig model_config(const DomainSchema& s) const;
    train::TrainConfig train_config() const;
};

}  // namespace moelab::cli
