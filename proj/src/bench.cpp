#include "moelab/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "moelab/eval.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace moelab::bench {

namespace {

struct DecodeBatch {
    std::vector<std::vector<int32_t>> sources;
    std::vector<int32_t> labels;
};

std::vector<DecodeBatch> make_batches(const std::vector<data::Example>& testset,
                                      int64_t batch_tokens) {
    std::vector<DecodeBatch> batches;
    DecodeBatch cur;
    int64_t tokens = 0;
    for (const data::Example& e : testset) {
        cur.sources.push_back(e.source);
        cur.labels.push_back(e.assigned_domain);
        tokens += static_cast<int64_t>(e.source.size());
        if (tokens >= batch_tokens) {
            batches.push_back(std::move(cur));
            cur = DecodeBatch{};
            tokens = 0;
        }
    }
    if (!cur.sources.empty()) batches.push_back(std::move(cur));
    return batches;
}

uint64_t digest(const std::vector<data::Example>& testset) {
    std::string s;
    for (const data::Example& e : testset) {
        for (int32_t t : e.source) s += std::to_string(t) + " ";
        s += "|";
    }
    return fnv1a64(s);
}

}  // namespace

BenchResult benchmark_inference(const model::Model& m,
                                const std::vector<data::Example>& testset,
                                int64_t batch_tokens, int repeats, int warmup,
                                int64_t max_len, const std::string& config_id) {
    if (testset.empty()) throw ContractError("benchmark_inference: empty test set");
    if (repeats < 1) throw ContractError("benchmark_inference: repeats must be >= 1");
    if (warmup < 0) throw ContractError("benchmark_inference: warmup must be >= 0");

    const std::vector<DecodeBatch> batches = make_batches(testset, batch_tokens);

    auto run_once = [&]() {
        int64_t decoded = 0;
        for (const DecodeBatch& b : batches) {
            const auto hyps = eval::greedy_decode_batch(m, b.sources, b.labels, max_len);
            for (const auto& h : hyps) decoded += static_cast<int64_t>(h.size());
        }
        return decoded;
    };

    for (int i = 0; i < warmup; ++i) run_once();

    BenchResult r;
    r.config_id = config_id;
    r.batch_tokens = batch_tokens;
    r.repeats = repeats;
    r.testset_digest = digest(testset);
    for (int i = 0; i < repeats; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        const int64_t decoded = run_once();
        const auto t1 = std::chrono::steady_clock::now();
        r.times_sec.push_back(std::chrono::duration<double>(t1 - t0).count());
        if (i == 0) {
            r.decoded_tokens = decoded;
        } else if (decoded != r.decoded_tokens) {
            throw NumericError("benchmark_inference: decoded token count varied across repeats");
        }
    }
    std::vector<double> sorted = r.times_sec;
    std::sort(sorted.begin(), sorted.end());
    const size_t n = sorted.size();
    r.median_sec = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    double mean = 0;
    for (double t : r.times_sec) mean += t;
    mean /= static_cast<double>(n);
    r.mean_sec = mean;
    double var = 0;
    for (double t : r.times_sec) var += (t - mean) * (t - mean);
    var /= static_cast<double>(n);
    r.cv = mean > 0 ? std::sqrt(var) / mean : 0.0;
    r.tokens_per_sec = r.median_sec > 0 ? r.decoded_tokens / r.median_sec : 0.0;

    const char* host = std::getenv("HOSTNAME");
    r.host = host ? host : "unknown";
#ifdef _OPENMP
    r.threads = omp_get_max_threads();
#else
    r.threads = static_cast<int>(std::thread::hardware_concurrency());
#endif
    r.precision = sizeof(num::Scalar) == 8 ? "f64" : "f32";
    return r;
}

std::string BenchResult::to_json_line() const {
    nlohmann::ordered_json j;
    j["config"] = config_id;
    j["batch_tokens"] = batch_tokens;
    j["batch_unit"] = batch_unit;
    j["repeats"] = repeats;
    j["times_sec"] = times_sec;
    j["median_sec"] = median_sec;
    j["mean_sec"] = mean_sec;
    j["cv"] = cv;
    j["decoded_tokens"] = decoded_tokens;
    j["tokens_per_sec"] = tokens_per_sec;
    j["host"] = host;
    j["threads"] = threads;
    j["precision"] = precision;
    j["testset_digest"] = testset_digest;
    return j.dump();
}

std::vector<CompareRow> compare_configs(const std::vector<BenchResult>& results,
                                        const std::string& baseline_id) {
    if (results.empty()) throw ContractError("compare_configs: no results");
    const BenchResult* base = nullptr;
    for (const BenchResult& r : results) {
        if (r.config_id == baseline_id) base = &r;
        if (r.testset_digest != results.front().testset_digest ||
            r.batch_tokens != results.front().batch_tokens) {
            throw ContractError("compare_configs: results cover different test sets or batch sizes");
        }
    }
    if (!base) throw ContractError("compare_configs: baseline '" + baseline_id + "' not found");
    std::vector<CompareRow> rows;
    for (const BenchResult& r : results) {
        rows.push_back({r.config_id, r.median_sec,
                        base->median_sec > 0 ? r.median_sec / base->median_sec : 0.0});
    }
    return rows;
}

std::string compare_csv(const std::vector<CompareRow>& rows) {
    std::ostringstream os;
    os.precision(10);
    os << "config,median_sec,ratio_vs_baseline\n";
    for (const CompareRow& r : rows)
        os << r.config_id << "," << r.median_sec << "," << r.ratio << "\n";
    return os.str();
}

}  // namespace moelab::bench
