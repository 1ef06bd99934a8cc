#pragma once

#include <random>
#include <string>
#include <vector>

#include "moelab/schema.hpp"

namespace moelab::data {

struct Example {
    std::vector<int32_t> source;  // content tokens + EOS
    std::vector<int32_t> target;  // substituted content + EOS
    int32_t true_domain = 0;
    int32_t assigned_domain = 0;
};

// n i.i.d. examples from the task. Each example picks one content segment,
// draws its tokens uniformly from segment + shared range, and substitutes
// them tokenwise for the target. Deterministic under seed.
std::vector<Example> generate_corpus(const DomainTask& task, int64_t n,
                                     uint64_t seed, int32_t domain_id = 0);

// Relabels a non-generic example as generic with probability p; generic
// examples and payloads are never touched.
Example domain_randomize(const Example& e, double p, std::mt19937_64& rng);

// Train examples whose (source, target) pair appears in test are dropped;
// survivor order is preserved.
std::vector<Example> dedup_splits(const std::vector<Example>& train,
                                  const std::vector<Example>& test);

// Sampling scheme: the generic domain takes generic_share of the stream and
// every other domain a share proportional to its corpus size.
std::vector<double> proportional_probs(const std::vector<int64_t>& corpus_sizes,
                                       double generic_share = 0.5);

// Infinite example stream: draws a domain from probs, then an example
// uniformly with replacement, then applies domain randomization. The RNG
// state round-trips through a string so training can resume bit-exactly.
class TrainingStream {
  public:
    TrainingStream(std::vector<std::vector<Example>> corpora,
                   std::vector<double> probs, uint64_t seed,
                   double dr_probability = 0.0);

    Example next();

    std::string rng_state() const;
    void set_rng_state(const std::string& state);
    double dr_probability() const { return dr_; }

  private:
    std::vector<std::vector<Example>> corpora_;
    std::vector<double> probs_;
    double dr_ = 0.0;
    std::mt19937_64 rng_;
};

// Tab-separated corpus files: one example per line with a documented header
// line (# true_domain assigned_domain source target); token ids are
// space-joined.
void write_corpus_tsv(const std::string& path, const std::vector<Example>& corpus);
std::vector<Example> read_corpus_tsv(const std::string& path);

}  // namespace moelab::data
