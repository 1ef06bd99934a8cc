#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "moelab/checkpoint.hpp"
#include "moelab/model.hpp"

using namespace moelab;
using namespace moelab::num;
using namespace moelab::model;

namespace {

DomainSchema small_schema(int seen = 4) {
    SchemaLayout l;
    l.domain_names = {"generic"};
    l.sample_probs = {0.5};
    for (int i = 0; i < seen; ++i) {
        l.domain_names.push_back("dom" + std::to_string(i));
        l.sample_probs.push_back(0.5 / seen);
    }
    l.content_tokens = 8;
    l.shared_tokens = 4;
    l.unseen_related_tokens = 4;
    l.len_min = 2;
    l.len_max = 4;
    return build_schema(l);
}

ModelConfig small_config(const DomainSchema& s) {
    ModelConfig c;
    c.d_model = 8;
    c.d_ff = 16;
    c.encoder_layers = 2;
    c.decoder_layers = 2;
    c.heads = 2;
    c.vocab_size = s.vocab_size;
    c.ffn_variant = FfnVariant::kSmoe;
    c.expert_count = 3;
    c.top_k = 2;
    c.conditioning = Conditioning::kTags;
    c.seed = 7;
    return c;
}

data::Example example_for(const DomainSchema& s, int32_t domain, int len, uint64_t seed) {
    auto corpus = data::generate_corpus(s.at(domain).task, 8, seed, domain);
    for (auto& e : corpus) {
        if (static_cast<int>(e.source.size()) == len + 1) return e;
    }
    return corpus[0];
}

}  // namespace

TEST_CASE("build: placement of experts and adapters") {
    DomainSchema s = small_schema();

    // dense with multiplier 1: no expert or adapter sites
    ModelConfig dense = small_config(s);
    dense.ffn_variant = FfnVariant::kDense;
    dense.conditioning = Conditioning::kNone;
    Model md(dense, s);
    CHECK(md.smoe_site_count() == 0);
    CHECK(md.adapter_site_count() == 0);

    // 6+6 with experts every second layer: exactly 3 + 3 sites
    ModelConfig deep = small_config(s);
    deep.encoder_layers = 6;
    deep.decoder_layers = 6;
    deep.expert_count = 10;
    Model m6(deep, s);
    CHECK(m6.smoe_site_count() == 6);
    int enc_sites = 0;
    for (const auto& b : m6.encoder) enc_sites += b.smoe != nullptr;
    CHECK(enc_sites == 3);
    CHECK(m6.encoder[0].smoe == nullptr);  // layer 1 (odd) is dense
    CHECK(m6.encoder[1].smoe != nullptr);  // layer 2 hosts experts

    // adapters: one bank per site, one adapter per schema domain
    ModelConfig ad = small_config(s);
    ad.ffn_variant = FfnVariant::kAdapters;
    ad.conditioning = Conditioning::kTags;
    ad.adapter_dim = 4;
    Model ma(ad, s);
    CHECK(ma.adapter_site_count() == 2);
    for (const auto& b : ma.encoder) {
        if (b.adapters) CHECK(b.adapters->adapters.size() == size_t(s.domain_count()));
    }

    // shallow decoder variant: same placement rule, no extra code path
    ModelConfig shallow = small_config(s);
    shallow.decoder_layers = 3;
    Model ms(shallow, s);
    CHECK(ms.smoe_site_count() == 1 + 1);  // enc layer 2, dec layer 2
}

TEST_CASE("build: config errors enumerate violations") {
    DomainSchema s = small_schema();
    ModelConfig c = small_config(s);
    c.heads = 3;  // does not divide d_model = 8
    c.ffn_variant = FfnVariant::kDense;
    c.conditioning = Conditioning::kDomainAwareGate;  // needs smoe
    try {
        Model m(c, s);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("heads") != std::string::npos);
        CHECK(msg.find("smoe") != std::string::npos);
    }
}

TEST_CASE("prepend_domain_tag: insertion contract") {
    DomainSchema s = small_schema();
    std::vector<int32_t> src = {20, 21, SpecialTokens::kEos};
    auto tagged = prepend_domain_tag(src, 2, s);
    CHECK(tagged.size() == src.size() + 1);
    CHECK(tagged[0] == s.at(2).tag_token);
    CHECK(tagged[1] == 20);
    CHECK(tagged.back() == SpecialTokens::kEos);

    // degenerate content
    std::vector<int32_t> empty = {SpecialTokens::kEos};
    auto tagged_empty = prepend_domain_tag(empty, 0, s);
    CHECK(tagged_empty.size() == 2);
    CHECK(tagged_empty[0] == s.at(0).tag_token);

    // applying twice is rejected
    CHECK_THROWS_AS(prepend_domain_tag(tagged, 2, s), ContractError);
    CHECK_THROWS_AS(prepend_domain_tag(std::vector<int32_t>{20, 21}, 2, s),
                    ContractError);  // no EOS
    CHECK_THROWS_AS(prepend_domain_tag(src, 99, s), LookupError);
}

TEST_CASE("forward: empty batch, row independence, token validation") {
    DomainSchema s = small_schema();
    Model m(small_config(s), s);

    ForwardResult empty = m.forward(Batch{});
    CHECK(empty.batch == 0);
    CHECK(!empty.logits.defined());
    CHECK(empty.trace.empty());

    data::Example e = example_for(s, 1, 3, 11);
    Batch b = make_batch({e, e}, m);
    ForwardResult fwd = m.forward(b);
    const int64_t rows = fwd.tgt_len;
    for (int64_t i = 0; i < rows; ++i) {
        for (int64_t jv = 0; jv < fwd.logits.cols(); ++jv) {
            CHECK(fwd.logits.at(i, jv) == fwd.logits.at(rows + i, jv));
        }
    }
    CHECK(!fwd.trace.empty());

    Batch bad = b;
    bad.source[1][0] = 9999;
    try {
        m.forward(bad);
        FAIL("expected DataError");
    } catch (const DataError& err) {
        const std::string msg = err.what();
        CHECK(msg.find("example 1") != std::string::npos);
        CHECK(msg.find("position 0") != std::string::npos);
    }
}

TEST_CASE("forward: causality over target positions") {
    DomainSchema s = small_schema();
    Model m(small_config(s), s);
    data::Example e = example_for(s, 2, 4, 13);
    Batch b = make_batch({e}, m);
    ForwardResult f1 = m.forward(b);

    // change the target at a late position; logits at earlier positions are
    // bit-identical (future keys are masked out exactly)
    Batch b2 = b;
    const size_t t = b2.target[0].size() - 2;
    b2.target[0][t] = b2.target[0][t] == 20 ? 21 : 20;
    ForwardResult f2 = m.forward(b2);
    for (size_t pos = 0; pos <= t; ++pos) {
        for (int64_t jv = 0; jv < f1.logits.cols(); ++jv) {
            CHECK(f1.logits.at(pos, jv) == f2.logits.at(pos, jv));
        }
    }
}

TEST_CASE("forward: padding neutrality") {
    DomainSchema s = small_schema();
    Model m(small_config(s), s);
    data::Example e1 = example_for(s, 1, 2, 17);
    data::Example e2 = example_for(s, 2, 4, 19);  // longer: e1 gets padded

    ForwardResult alone = m.forward(make_batch({e1}, m));
    ForwardResult padded = m.forward(make_batch({e1, e2}, m));
    for (int64_t i = 0; i < alone.tgt_len; ++i) {
        if (i >= static_cast<int64_t>(e1.target.size())) break;
        for (int64_t jv = 0; jv < alone.logits.cols(); ++jv) {
            CHECK(std::abs(alone.logits.at(i, jv) - padded.logits.at(i, jv)) < 1e-9);
        }
    }
}

TEST_CASE("forward: conditioning none ignores the supplied domain") {
    DomainSchema s = small_schema();
    ModelConfig c = small_config(s);
    c.conditioning = Conditioning::kNone;
    Model m(c, s);
    data::Example e = example_for(s, 1, 3, 23);
    Batch b1 = make_batch({e}, m, 1);
    Batch b2 = make_batch({e}, m, 3);
    ForwardResult f1 = m.forward(b1);
    ForwardResult f2 = m.forward(b2);
    for (int64_t i = 0; i < f1.logits.numel(); ++i) {
        CHECK(f1.logits.data()[i] == f2.logits.data()[i]);
    }
}

namespace {

void copy_tensor(const Tensor& src, Tensor dst) {
    REQUIRE(src.shape() == dst.shape());
    std::copy(src.data(), src.data() + src.numel(), dst.data());
}

void copy_attention(const nn::AttentionLayer& from, nn::AttentionLayer& to) {
    for (int64_t h = 0; h < from.heads; ++h) {
        copy_tensor(from.wq[h], to.wq[h]);
        copy_tensor(from.wk[h], to.wk[h]);
        copy_tensor(from.wv[h], to.wv[h]);
        copy_tensor(from.wo[h], to.wo[h]);
        copy_tensor(from.bq[h], to.bq[h]);
        copy_tensor(from.bk[h], to.bk[h]);
        copy_tensor(from.bv[h], to.bv[h]);
    }
    copy_tensor(from.bo, to.bo);
}

}  // namespace

TEST_CASE("forward: k = N with identical experts matches the dense twin") {
    DomainSchema s = small_schema();
    ModelConfig dense_cfg = small_config(s);
    dense_cfg.ffn_variant = FfnVariant::kDense;
    dense_cfg.conditioning = Conditioning::kNone;
    Model dense(dense_cfg, s);

    ModelConfig moe_cfg = small_config(s);
    moe_cfg.conditioning = Conditioning::kNone;
    moe_cfg.expert_count = 3;
    moe_cfg.top_k = 3;  // k = N
    moe_cfg.seed = 99;
    Model moe(moe_cfg, s);

    copy_tensor(dense.embed_table, moe.embed_table);
    copy_tensor(dense.out_proj, moe.out_proj);
    auto copy_stack = [&](const std::vector<LayerBlock>& from,
                          std::vector<LayerBlock>& to) {
        for (size_t i = 0; i < from.size(); ++i) {
            copy_tensor(from[i].ln1.gain, to[i].ln1.gain);
            copy_tensor(from[i].ln1.bias, to[i].ln1.bias);
            copy_tensor(from[i].ln2.gain, to[i].ln2.gain);
            copy_tensor(from[i].ln2.bias, to[i].ln2.bias);
            copy_attention(from[i].self_attn, to[i].self_attn);
            if (from[i].is_decoder) {
                copy_tensor(from[i].ln3.gain, to[i].ln3.gain);
                copy_tensor(from[i].ln3.bias, to[i].ln3.bias);
                copy_attention(from[i].cross_attn, to[i].cross_attn);
            }
            if (to[i].smoe) {
                for (auto& expert : to[i].smoe->experts) {
                    copy_tensor(from[i].ffn.w1, expert.w1);
                    copy_tensor(from[i].ffn.b1, expert.b1);
                    copy_tensor(from[i].ffn.w2, expert.w2);
                    copy_tensor(from[i].ffn.b2, expert.b2);
                }
            } else {
                copy_tensor(from[i].ffn.w1, to[i].ffn.w1);
                copy_tensor(from[i].ffn.b1, to[i].ffn.b1);
                copy_tensor(from[i].ffn.w2, to[i].ffn.w2);
                copy_tensor(from[i].ffn.b2, to[i].ffn.b2);
            }
        }
    };
    copy_stack(dense.encoder, moe.encoder);
    copy_stack(dense.decoder, moe.decoder);
    copy_tensor(dense.enc_final_ln.gain, moe.enc_final_ln.gain);
    copy_tensor(dense.enc_final_ln.bias, moe.enc_final_ln.bias);
    copy_tensor(dense.dec_final_ln.gain, moe.dec_final_ln.gain);
    copy_tensor(dense.dec_final_ln.bias, moe.dec_final_ln.bias);

    data::Example e = example_for(s, 1, 3, 29);
    ForwardResult fd = dense.forward(make_batch({e}, dense));
    ForwardResult fm = moe.forward(make_batch({e}, moe));
    for (int64_t i = 0; i < fd.logits.numel(); ++i) {
        CHECK(std::abs(fd.logits.data()[i] - fm.logits.data()[i]) < 1e-9);
    }
}

TEST_CASE("forward: single-token case matches hand composition of module oracles") {
    DomainSchema s = small_schema();
    ModelConfig c;
    c.d_model = 4;
    c.d_ff = 6;
    c.encoder_layers = 1;  // odd layer: dense FFN, no expert site
    c.decoder_layers = 1;
    c.heads = 1;
    c.vocab_size = s.vocab_size;
    c.ffn_variant = FfnVariant::kDense;
    c.conditioning = Conditioning::kNone;
    c.seed = 5;
    Model m(c, s);

    std::vector<int32_t> src = {20, SpecialTokens::kEos};
    std::vector<int32_t> tgt = {21, SpecialTokens::kEos};
    Batch b;
    b.source = {src};
    b.target = {tgt};
    b.domains = {0};
    ForwardResult fwd = m.forward(b);

    // independent composition through the public layer functions
    const double sd = std::sqrt(4.0);
    Tensor x = num::scale(nn::embedding_lookup(m.embed_table, src), sd);
    x = num::add(x, num::slice_rows(m.positions, 0, 2));
    Tensor h = nn::layer_norm_forward(m.encoder[0].ln1, x);
    Tensor mask0 = nn::padding_mask(2, {1, 1});
    x = num::add(x, nn::attention_forward(m.encoder[0].self_attn, h, h, h, mask0));
    x = num::add(x, nn::ffn_forward(m.encoder[0].ffn,
                                    nn::layer_norm_forward(m.encoder[0].ln2, x)));
    Tensor enc_out = nn::layer_norm_forward(m.enc_final_ln, x);

    std::vector<int32_t> dec_in = {SpecialTokens::kBos, 21};
    Tensor y = num::scale(nn::embedding_lookup(m.embed_table, dec_in), sd);
    y = num::add(y, num::slice_rows(m.positions, 0, 2));
    Tensor hy = nn::layer_norm_forward(m.decoder[0].ln1, y);
    y = num::add(y, nn::attention_forward(m.decoder[0].self_attn, hy, hy, hy,
                                          nn::causal_padding_mask({1, 1})));
    Tensor h2 = nn::layer_norm_forward(m.decoder[0].ln2, y);
    y = num::add(y, nn::attention_forward(m.decoder[0].cross_attn, h2, enc_out,
                                          enc_out, nn::padding_mask(2, {1, 1})));
    y = num::add(y, nn::ffn_forward(m.decoder[0].ffn,
                                    nn::layer_norm_forward(m.decoder[0].ln3, y)));
    Tensor logits = num::matmul(nn::layer_norm_forward(m.dec_final_ln, y), m.out_proj);

    REQUIRE(fwd.logits.shape() == logits.shape());
    for (int64_t i = 0; i < logits.numel(); ++i) {
        CHECK(std::abs(fwd.logits.data()[i] - logits.data()[i]) < 1e-12);
    }
}

TEST_CASE("checkpoint: bit-exact round trip and schema hash") {
    DomainSchema s = small_schema();
    Model m(small_config(s), s);
    const std::string path = "test_model_ckpt.bin";
    Checkpoint ck = snapshot(m, "cfg-echo", 42, "rngstate");
    save_checkpoint(path, ck);
    Checkpoint back = load_checkpoint(path);
    CHECK(back.config_text == "cfg-echo");
    CHECK(back.step == 42);
    CHECK(back.rng_state == "rngstate");
    CHECK(back.schema_hash == s.hash());
    REQUIRE(back.blobs.size() == ck.blobs.size());
    for (size_t i = 0; i < back.blobs.size(); ++i) {
        CHECK(back.blobs[i].name == ck.blobs[i].name);
        CHECK(back.blobs[i].values == ck.blobs[i].values);  // bitwise
    }

    // restoring into a differently-seeded twin reproduces the forward pass
    ModelConfig c2 = small_config(s);
    c2.seed = 12345;
    Model m2(c2, s);
    restore_parameters(m2, back);
    data::Example e = example_for(s, 1, 3, 31);
    ForwardResult f1 = m.forward(make_batch({e}, m));
    ForwardResult f2 = m2.forward(make_batch({e}, m2));
    for (int64_t i = 0; i < f1.logits.numel(); ++i) {
        CHECK(f1.logits.data()[i] == f2.logits.data()[i]);
    }
    std::filesystem::remove(path);
}

TEST_CASE("parameters: deterministic naming and counting") {
    DomainSchema s = small_schema();
    Model m(small_config(s), s);
    auto params = m.parameters();
    CHECK(params.front().name == "embed.table");
    int64_t total = 0;
    for (const auto& p : params) total += p.tensor.numel();
    CHECK(total == m.parameter_count());
    auto params2 = m.parameters();
    REQUIRE(params.size() == params2.size());
    for (size_t i = 0; i < params.size(); ++i) CHECK(params[i].name == params2[i].name);
}
