#include <doctest.h>

#include <cmath>

#include "moelab/eval.hpp"

using namespace moelab;
using namespace moelab::num;
using namespace moelab::eval;

namespace {

DomainSchema small_schema() {
    SchemaLayout l;
    l.domain_names = {"generic", "alpha", "beta"};
    l.sample_probs = {0.5, 0.25, 0.25};
    l.content_tokens = 8;
    l.shared_tokens = 4;
    l.unseen_related_tokens = 4;
    l.len_min = 2;
    l.len_max = 4;
    return build_schema(l);
}

model::Model small_model(const DomainSchema& s,
                         model::Conditioning cond = model::Conditioning::kTags,
                         uint64_t seed = 3) {
    model::ModelConfig c;
    c.d_model = 8;
    c.d_ff = 16;
    c.encoder_layers = 2;
    c.decoder_layers = 2;
    c.heads = 2;
    c.vocab_size = s.vocab_size;
    c.ffn_variant = model::FfnVariant::kSmoe;
    c.expert_count = 3;
    c.top_k = 2;
    c.conditioning = cond;
    c.seed = seed;
    return model::Model(c, s);
}

}  // namespace

TEST_CASE("greedy_decode_steps: table walk, truncation, eos-first") {
    // hand-built logit table keyed by prefix length: 5 -> 9 -> EOS
    auto table_step = [](const std::vector<int32_t>& prefix) {
        std::vector<Scalar> row(12, 0.0);
        if (prefix.empty()) {
            row[5] = 3.0;
        } else if (prefix.size() == 1) {
            row[9] = 2.0;
        } else {
            row[SpecialTokens::kEos] = 5.0;
        }
        return row;
    };
    CHECK(greedy_decode_steps(table_step, 10) == std::vector<int32_t>{5, 9});
    CHECK(greedy_decode_steps(table_step, 1) == std::vector<int32_t>{5});

    auto eos_lover = [](const std::vector<int32_t>&) {
        std::vector<Scalar> row(5, 0.0);
        row[SpecialTokens::kEos] = 1.0;
        return row;
    };
    CHECK(greedy_decode_steps(eos_lover, 10).empty());

    // ties break to the lowest token id
    auto tied = [](const std::vector<int32_t>& prefix) {
        std::vector<Scalar> row(6, 0.0);
        if (!prefix.empty()) row[SpecialTokens::kEos] = 1.0;
        else {
            row[3] = 7.0;
            row[4] = 7.0;
        }
        return row;
    };
    CHECK(greedy_decode_steps(tied, 10) == std::vector<int32_t>{3});
    CHECK_THROWS_AS(greedy_decode_steps(eos_lover, 0), ContractError);
}

TEST_CASE("greedy_decode: deterministic, batched equals single") {
    DomainSchema s = small_schema();
    model::Model m = small_model(s);
    auto corpus = data::generate_corpus(s.at(1).task, 6, 77, 1);
    std::vector<std::vector<int32_t>> sources;
    std::vector<int32_t> labels(corpus.size(), 1);
    for (const auto& e : corpus) sources.push_back(e.source);

    auto batched = greedy_decode_batch(m, sources, labels, 10);
    auto batched2 = greedy_decode_batch(m, sources, labels, 10);
    CHECK(batched == batched2);
    for (size_t i = 0; i < sources.size(); ++i) {
        CHECK(greedy_decode(m, sources[i], 1, 10) == batched[i]);
    }
}

TEST_CASE("corpus_bleu: identity, zero overlap, brevity penalty hand case") {
    std::vector<std::vector<int32_t>> refs = {{4, 5, 6, 7}, {8, 9, 10}};
    CHECK(corpus_bleu(refs, refs) == doctest::Approx(100.0).epsilon(1e-12));

    std::vector<std::vector<int32_t>> miss = {{20, 21, 22, 23}, {24, 25, 26}};
    CHECK(corpus_bleu(miss, refs) < 1e-5);  // floor-dominated

    // hyp "a b c" vs ref "a b c d": p1=p2=p3=1, no hyp 4-grams (order skipped),
    // BP = exp(1 - 4/3)
    std::vector<std::vector<int32_t>> hyp = {{1, 2, 3}};
    std::vector<std::vector<int32_t>> ref = {{1, 2, 3, 4}};
    CHECK(corpus_bleu(hyp, ref) ==
          doctest::Approx(100.0 * std::exp(1.0 - 4.0 / 3.0)).epsilon(1e-12));

    CHECK_THROWS_AS(corpus_bleu(hyp, refs), ContractError);
    CHECK_THROWS_AS(corpus_bleu({}, {}), ContractError);
}

TEST_CASE("corpus_bleu: permutation invariance over pair order") {
    std::vector<std::vector<int32_t>> hyps = {{1, 2, 3}, {9, 8}, {4, 5, 6, 7}, {1, 1}};
    std::vector<std::vector<int32_t>> refs = {{1, 2, 4}, {9, 8}, {4, 5, 7, 7}, {1, 2}};
    const double base = corpus_bleu(hyps, refs);
    const std::vector<size_t> perm = {2, 0, 3, 1};
    std::vector<std::vector<int32_t>> ph, pr;
    for (size_t i : perm) {
        ph.push_back(hyps[i]);
        pr.push_back(refs[i]);
    }
    CHECK(corpus_bleu(ph, pr) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("wrong_label_matrix: shape, contract, conditioning-independent oracle") {
    DomainSchema s = small_schema();

    // a tags model whose tag embeddings are identical rows cannot see the label
    model::Model oracle = small_model(s, model::Conditioning::kTags, 5);
    for (const DomainSpec& d : s.domains) {
        for (int64_t j = 0; j < oracle.embed_table.cols(); ++j) {
            oracle.embed_table.at(d.tag_token, j) =
                oracle.embed_table.at(s.domains[0].tag_token, j);
        }
    }
    std::vector<std::vector<data::Example>> testsets;
    std::vector<int32_t> labels;
    for (int32_t d = 0; d < s.domain_count(); ++d) {
        testsets.push_back(data::generate_corpus(s.at(d).task, 5, 900 + d, d));
        labels.push_back(d);
    }
    RobustnessMatrix mat = wrong_label_matrix(oracle, testsets, labels, "accuracy", 8);
    CHECK(mat.domains.size() == 3);
    CHECK(mat.cells.size() == 3);
    for (const auto& row : mat.cells) {
        REQUIRE(row.size() == 3);
        for (double v : row) CHECK(v == row[0]);  // label cannot matter
    }
    CHECK(mat.mean_degradation == doctest::Approx(0.0));

    const std::string csv = mat.to_csv();
    CHECK(csv.rfind("domain,generic,alpha,beta", 0) == 0);
    CHECK(mat.to_long_csv().rfind("row,col,value", 0) == 0);

    model::Model none(small_model(s, model::Conditioning::kNone, 5));
    CHECK_THROWS_AS(wrong_label_matrix(none, testsets, labels, "accuracy", 8),
                    ContractError);
    CHECK_THROWS_AS(wrong_label_matrix(oracle, testsets, labels, "nonsense", 8),
                    ContractError);
}

TEST_CASE("top1_activity: counting oracle and block normalization") {
    moe::GateTrace trace;
    trace.reset(1, 4);
    // token assignments (0, 0, 1, 2) -> (0.5, 0.25, 0.25, 0)
    for (int32_t first : {0, 0, 1, 2}) {
        std::vector<Scalar> dist = {0.25, 0.25, 0.25, 0.25};
        std::vector<int32_t> sel = {first};
        std::vector<Scalar> w = {1.0};
        trace.record(0, 0, dist, sel, w);
    }
    ActivityProfile p = top1_activity(trace);
    REQUIRE(p.values.size() == 4);
    CHECK(p.values[0] == 0.5);
    CHECK(p.values[1] == 0.25);
    CHECK(p.values[2] == 0.25);
    CHECK(p.values[3] == 0.0);

    moe::GateTrace empty;
    empty.reset(1, 4);
    CHECK_THROWS_AS(top1_activity(empty), ContractError);

    // one-hot case: every token first-routes to expert 0 in both layers
    moe::GateTrace hot;
    hot.reset(2, 2);
    for (int32_t layer : {0, 0, 1}) {
        std::vector<Scalar> dist = {0.9, 0.1};
        std::vector<int32_t> sel = {0, 1};
        std::vector<Scalar> w = {0.9, 0.1};
        hot.record(layer, 0, dist, sel, w);
    }
    ActivityProfile ph = top1_activity(hot);
    CHECK(ph.values == std::vector<double>{1.0, 0.0, 1.0, 0.0});
    for (int32_t l = 0; l < ph.layer_count; ++l) {
        double block = 0;
        for (int32_t e = 0; e < ph.expert_count; ++e)
            block += ph.values[l * ph.expert_count + e];
        CHECK(block == doctest::Approx(1.0).epsilon(1e-9));
    }
    CHECK(ph.to_csv().rfind("layer,expert,top1_activity", 0) == 0);
}

TEST_CASE("expert_similarity: exact unit self-similarity and hand cosine") {
    ActivityProfile a;
    a.layer_count = 1;
    a.expert_count = 3;
    a.values = {1.0, 1.0, 0.0};
    ActivityProfile b = a;
    b.values = {1.0, 0.0, 1.0};
    CHECK(expert_similarity(a, a) == 1.0);         // exactly
    CHECK(expert_similarity(a, b) == 0.5);         // 1 / sqrt(2*2), exactly
    ActivityProfile c = a;
    c.values = {0.0, 0.0, 1.0};
    CHECK(expert_similarity(a, c) == 0.0);          // orthogonal blocks

    ActivityProfile z = a;
    z.values = {0.0, 0.0, 0.0};
    CHECK_THROWS_AS(expert_similarity(a, z), ContractError);
    ActivityProfile wrong;
    wrong.values = {1.0};
    CHECK_THROWS_AS(expert_similarity(a, wrong), ContractError);
}

TEST_CASE("label_sweep_similarity: conditioning-free model gives exact all-ones") {
    DomainSchema s = small_schema();
    model::Model none = small_model(s, model::Conditioning::kNone, 9);
    auto dataset = data::generate_corpus(s.at(1).task, 6, 321, 1);
    std::vector<int32_t> labels = {0, 1, 2};
    auto sim = label_sweep_similarity(none, dataset, labels, 8);
    REQUIRE(sim.size() == 3);
    for (const auto& row : sim) {
        for (double v : row) CHECK(v == 1.0);
    }
}

TEST_CASE("label_sweep_similarity: symmetric with unit diagonal") {
    DomainSchema s = small_schema();
    model::Model m = small_model(s, model::Conditioning::kDomainSpecializedGate, 13);
    auto dataset = data::generate_corpus(s.at(2).task, 8, 11, 2);
    std::vector<int32_t> labels = {0, 1, 2};
    auto sim = label_sweep_similarity(m, dataset, labels, 8);
    for (size_t i = 0; i < sim.size(); ++i) {
        CHECK(sim[i][i] == 1.0);
        for (size_t j = 0; j < sim.size(); ++j) {
            CHECK(sim[i][j] == sim[j][i]);
            CHECK(sim[i][j] >= 0.0);
            CHECK(sim[i][j] <= 1.0 + 1e-12);
        }
    }

    model::ModelConfig dense_cfg = m.config();
    dense_cfg.ffn_variant = model::FfnVariant::kDense;
    dense_cfg.conditioning = model::Conditioning::kTags;
    model::Model dense(dense_cfg, s);
    CHECK_THROWS_AS(label_sweep_similarity(dense, dataset, labels, 8), ContractError);
}

TEST_CASE("score_testset: shared and unseen breakdowns populated") {
    DomainSchema s = small_schema();
    model::Model m = small_model(s);
    auto testset = data::generate_corpus(s.at(1).task, 10, 55, 1);
    TestScore sc = score_testset(m, testset, 1, 8);
    CHECK(sc.tokens > 0);
    CHECK(sc.shared_tokens > 0);
    CHECK(sc.token_accuracy >= 0.0);
    CHECK(sc.token_accuracy <= 1.0);
    CHECK(sc.bleu >= 0.0);
    CHECK(sc.bleu <= 100.0);

    auto unseen = data::generate_corpus(s.unseen_related, 10, 66, 1);
    TestScore su = score_testset(m, unseen, 0, 8);
    CHECK(su.unseen_tokens > 0);
}
