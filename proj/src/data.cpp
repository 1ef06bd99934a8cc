#include "moelab/data.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_set>

namespace moelab::data {

std::vector<Example> generate_corpus(const DomainTask& task, int64_t n,
                                     uint64_t seed, int32_t domain_id) {
    if (n < 0) throw ContractError("generate_corpus: n must be >= 0");
    task.validate();
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int32_t> len_dist(task.len_min, task.len_max);
    std::uniform_int_distribution<size_t> seg_dist(0, task.content_ranges.size() - 1);

    std::vector<Example> out;
    out.reserve(n);
    for (int64_t i = 0; i < n; ++i) {
        const TokenRange& seg = task.content_ranges[seg_dist(rng)];
        const int32_t pool = seg.size() + task.shared_range.size();
        std::uniform_int_distribution<int32_t> tok_dist(0, pool - 1);
        Example e;
        e.true_domain = domain_id;
        e.assigned_domain = domain_id;
        const int32_t len = len_dist(rng);
        e.source.reserve(len + 1);
        e.target.reserve(len + 1);
        for (int32_t j = 0; j < len; ++j) {
            const int32_t r = tok_dist(rng);
            const int32_t t = r < seg.size() ? seg.lo + r
                                             : task.shared_range.lo + (r - seg.size());
            e.source.push_back(t);
            e.target.push_back(task.map_token(t));
        }
        e.source.push_back(SpecialTokens::kEos);
        e.target.push_back(SpecialTokens::kEos);
        out.push_back(std::move(e));
    }
    return out;
}

Example domain_randomize(const Example& e, double p, std::mt19937_64& rng) {
    if (p < 0.0 || p > 1.0) throw ContractError("domain_randomize: p must be in [0, 1]");
    Example out = e;
    if (e.true_domain == 0) return out;  // generic examples are never relabeled
    std::bernoulli_distribution flip(p);
    out.assigned_domain = flip(rng) ? 0 : e.true_domain;
    return out;
}

namespace {

std::string pair_key(const Example& e) {
    std::string k;
    k.reserve((e.source.size() + e.target.size()) * 4);
    for (int32_t t : e.source) {
        k += std::to_string(t);
        k += ' ';
    }
    k += '|';
    for (int32_t t : e.target) {
        k += std::to_string(t);
        k += ' ';
    }
    return k;
}

}  // namespace

std::vector<Example> dedup_splits(const std::vector<Example>& train,
                                  const std::vector<Example>& test) {
    std::unordered_set<std::string> seen;
    seen.reserve(test.size() * 2);
    for (const Example& e : test) seen.insert(pair_key(e));
    std::vector<Example> out;
    out.reserve(train.size());
    for (const Example& e : train) {
        if (!seen.count(pair_key(e))) out.push_back(e);
    }
    return out;
}

std::vector<double> proportional_probs(const std::vector<int64_t>& corpus_sizes,
                                       double generic_share) {
    if (corpus_sizes.empty()) throw ConfigError("proportional_probs: no corpora");
    if (generic_share < 0.0 || generic_share > 1.0) {
        throw ConfigError("proportional_probs: generic share out of range");
    }
    int64_t rest = 0;
    for (size_t i = 1; i < corpus_sizes.size(); ++i) rest += corpus_sizes[i];
    std::vector<double> probs(corpus_sizes.size(), 0.0);
    probs[0] = generic_share;
    for (size_t i = 1; i < corpus_sizes.size(); ++i) {
        probs[i] = rest > 0 ? (1.0 - generic_share) * corpus_sizes[i] / rest : 0.0;
    }
    return probs;
}

TrainingStream::TrainingStream(std::vector<std::vector<Example>> corpora,
                               std::vector<double> probs, uint64_t seed,
                               double dr_probability)
    : corpora_(std::move(corpora)), probs_(std::move(probs)), dr_(dr_probability),
      rng_(seed) {
    if (corpora_.size() != probs_.size()) {
        throw ConfigError("TrainingStream: one probability per corpus required");
    }
    double total = 0.0;
    for (size_t i = 0; i < probs_.size(); ++i) {
        if (probs_[i] < 0.0) throw ConfigError("TrainingStream: negative probability");
        if (probs_[i] > 0.0 && corpora_[i].empty()) {
            throw ConfigError("TrainingStream: domain " + std::to_string(i) +
                              " has positive probability but an empty corpus");
        }
        total += probs_[i];
    }
    if (std::abs(total - 1.0) > 1e-9) {
        throw ConfigError("TrainingStream: probabilities sum to " + std::to_string(total));
    }
    if (dr_ < 0.0 || dr_ > 1.0) throw ConfigError("TrainingStream: bad dr probability");
}

Example TrainingStream::next() {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double r = u(rng_);
    double acc = 0.0;
    size_t d = 0;
    for (; d < probs_.size(); ++d) {
        acc += probs_[d];
        if (r < acc) break;
    }
    if (d >= probs_.size()) d = probs_.size() - 1;
    while (probs_[d] == 0.0 && d > 0) --d;  // guard against fp tail
    std::uniform_int_distribution<size_t> pick(0, corpora_[d].size() - 1);
    Example e = corpora_[d][pick(rng_)];
    e.assigned_domain = e.true_domain;
    if (dr_ > 0.0) e = domain_randomize(e, dr_, rng_);
    return e;
}

std::string TrainingStream::rng_state() const {
    std::ostringstream os;
    os << rng_;
    return os.str();
}

void TrainingStream::set_rng_state(const std::string& state) {
    std::istringstream is(state);
    is >> rng_;
    if (is.fail()) throw DataError("TrainingStream: malformed RNG state");
}

void write_corpus_tsv(const std::string& path, const std::vector<Example>& corpus) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("write_corpus_tsv: cannot open " + path);
    out << "# true_domain\tassigned_domain\tsource\ttarget\n";
    for (const Example& e : corpus) {
        out << e.true_domain << '\t' << e.assigned_domain << '\t';
        for (size_t i = 0; i < e.source.size(); ++i) {
            if (i) out << ' ';
            out << e.source[i];
        }
        out << '\t';
        for (size_t i = 0; i < e.target.size(); ++i) {
            if (i) out << ' ';
            out << e.target[i];
        }
        out << '\n';
    }
    if (!out) throw DataError("write_corpus_tsv: write failed for " + path);
}

std::vector<Example> read_corpus_tsv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("read_corpus_tsv: cannot open " + path);
    std::vector<Example> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string td, ad, src, tgt;
        if (!std::getline(ls, td, '\t') || !std::getline(ls, ad, '\t') ||
            !std::getline(ls, src, '\t') || !std::getline(ls, tgt, '\t')) {
            throw DataError("read_corpus_tsv: malformed line " + std::to_string(lineno) +
                            " in " + path);
        }
        Example e;
        try {
            e.true_domain = std::stoi(td);
            e.assigned_domain = std::stoi(ad);
            std::istringstream ss(src);
            for (int32_t t; ss >> t;) e.source.push_back(t);
            std::istringstream ts(tgt);
            for (int32_t t; ts >> t;) e.target.push_back(t);
        } catch (const std::exception&) {
            throw DataError("read_corpus_tsv: bad token ids at line " +
                            std::to_string(lineno) + " in " + path);
        }
        out.push_back(std::move(e));
    }
    return out;
}

}  // namespace moelab::data
