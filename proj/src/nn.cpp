#include "moelab/nn.hpp"

#include <cmath>

namespace moelab::nn {

using namespace num;

int64_t FfnLayer::param_count() const {
    return w1.numel() + b1.numel() + w2.numel() + b2.numel();
}

Tensor ffn_forward(const FfnLayer& layer, const Tensor& x) {
    if (x.rank() != 2 || x.cols() != layer.d_model()) {
        throw DimensionError("ffn_forward: input " + x.shape_str() +
                             " does not match d_model " +
                             std::to_string(layer.d_model()));
    }
    Tensor h = relu(add_row_bias(matmul(x, layer.w1), layer.b1));
    return add_row_bias(matmul(h, layer.w2), layer.b2);
}

Tensor layer_norm_forward(const LayerNorm& ln, const Tensor& x) {
    return layer_norm(x, ln.gain, ln.bias);
}

int64_t AttentionLayer::param_count() const {
    int64_t n = bo.numel();
    for (int64_t h = 0; h < heads; ++h) {
        n += wq[h].numel() + wk[h].numel() + wv[h].numel() + wo[h].numel();
        n += bq[h].numel() + bk[h].numel() + bv[h].numel();
    }
    return n;
}

Tensor attention_forward(const AttentionLayer& layer, const Tensor& queries,
                         const Tensor& keys, const Tensor& values,
                         const Tensor& mask) {
    const int64_t tq = queries.rows();
    const int64_t tk = keys.rows();
    if (values.rows() != tk) {
        throw DimensionError("attention_forward: keys " + keys.shape_str() +
                             " vs values " + values.shape_str());
    }
    if (mask.defined() && (mask.rank() != 2 || mask.rows() != tq || mask.cols() != tk)) {
        throw DimensionError("attention_forward: mask " + mask.shape_str() +
                             " does not match scores [" + std::to_string(tq) + "x" +
                             std::to_string(tk) + "]");
    }
    const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(layer.d_head()));
    Tensor out;
    for (int64_t h = 0; h < layer.heads; ++h) {
        Tensor q = add_row_bias(matmul(queries, layer.wq[h]), layer.bq[h]);
        Tensor k = add_row_bias(matmul(keys, layer.wk[h]), layer.bk[h]);
        Tensor v = add_row_bias(matmul(values, layer.wv[h]), layer.bv[h]);
        Tensor scores = scale(matmul(q, k, false, true), inv_sqrt);
        if (mask.defined()) scores = add(scores, mask);
        Tensor attn = softmax(scores, 1);
        Tensor mixed = matmul(attn, v);
        Tensor proj = matmul(mixed, layer.wo[h]);
        out = h == 0 ? proj : add(out, proj);
    }
    return add_row_bias(out, layer.bo);
}

Tensor causal_mask(int64_t t) {
    Tensor m({t, t});
    for (int64_t i = 0; i < t; ++i)
        for (int64_t j = i + 1; j < t; ++j) m.at(i, j) = kMaskedScore;
    return m;
}

Tensor padding_mask(int64_t tq, const std::vector<uint8_t>& key_valid) {
    const int64_t tk = static_cast<int64_t>(key_valid.size());
    Tensor m({tq, tk});
    for (int64_t i = 0; i < tq; ++i)
        for (int64_t j = 0; j < tk; ++j)
            if (!key_valid[j]) m.at(i, j) = kMaskedScore;
    return m;
}

Tensor causal_padding_mask(const std::vector<uint8_t>& key_valid) {
    const int64_t t = static_cast<int64_t>(key_valid.size());
    Tensor m = causal_mask(t);
    for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j <= i; ++j)
            if (!key_valid[j]) m.at(i, j) = kMaskedScore;
    return m;
}

int64_t Adapter::param_count() const {
    return down_w.numel() + down_b.numel() + up_w.numel() + up_b.numel();
}

Tensor adapter_forward(const AdapterBank& bank, const Tensor& x, int32_t domain) {
    if (domain < 0 || domain >= static_cast<int32_t>(bank.adapters.size())) {
        throw LookupError("adapter_forward: unknown domain id " + std::to_string(domain));
    }
    const Adapter& a = bank.adapters[domain];
    Tensor h = relu(add_row_bias(matmul(x, a.down_w), a.down_b));
    Tensor up = add_row_bias(matmul(h, a.up_w), a.up_b);
    return add(x, up);
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int32_t>& ids) {
    std::vector<int64_t> idx(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= table.rows()) {
            throw DataError("embedding_lookup: token id " + std::to_string(ids[i]) +
                            " out of vocabulary range");
        }
        idx[i] = ids[i];
    }
    return gather_rows(table, idx);
}

Tensor sinusoidal_positions(int64_t max_len, int64_t d_model) {
    Tensor pe({max_len, d_model});
    for (int64_t pos = 0; pos < max_len; ++pos) {
        for (int64_t i = 0; i < d_model; i += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / d_model);
            pe.at(pos, i) = std::sin(pos * freq);
            if (i + 1 < d_model) pe.at(pos, i + 1) = std::cos(pos * freq);
        }
    }
    return pe;
}

void init_xavier_uniform(Tensor& w, std::mt19937_64& rng) {
    const double fan_in = static_cast<double>(w.rows());
    const double fan_out = static_cast<double>(w.cols());
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (int64_t i = 0; i < w.numel(); ++i) w.data()[i] = static_cast<Scalar>(dist(rng));
}

void init_normal(Tensor& w, std::mt19937_64& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (int64_t i = 0; i < w.numel(); ++i) w.data()[i] = static_cast<Scalar>(dist(rng));
}

FfnLayer make_ffn(int64_t d_model, int64_t d_ff, std::mt19937_64& rng) {
    FfnLayer f;
    f.w1 = Tensor({d_model, d_ff});
    f.b1 = Tensor({d_ff});
    f.w2 = Tensor({d_ff, d_model});
    f.b2 = Tensor({d_model});
    init_xavier_uniform(f.w1, rng);
    init_xavier_uniform(f.w2, rng);
    return f;
}

AttentionLayer make_attention(int64_t d_model, int64_t heads, std::mt19937_64& rng) {
    if (heads <= 0 || d_model % heads != 0) {
        throw ConfigError("make_attention: heads must divide d_model");
    }
    const int64_t dh = d_model / heads;
    AttentionLayer a;
    a.heads = heads;
    a.bo = Tensor({d_model});
    for (int64_t h = 0; h < heads; ++h) {
        for (auto* group : {&a.wq, &a.wk, &a.wv}) {
            Tensor w({d_model, dh});
            init_xavier_uniform(w, rng);
            group->push_back(std::move(w));
        }
        Tensor w({dh, d_model});
        init_xavier_uniform(w, rng);
        a.wo.push_back(std::move(w));
        a.bq.push_back(Tensor({dh}));
        a.bk.push_back(Tensor({dh}));
        a.bv.push_back(Tensor({dh}));
    }
    return a;
}

LayerNorm make_layer_norm(int64_t d) {
    LayerNorm ln;
    ln.gain = Tensor::full({d}, Scalar(1));
    ln.bias = Tensor({d});
    return ln;
}

Adapter make_adapter(int64_t d_model, int64_t d_adapter, std::mt19937_64& rng) {
    Adapter a;
    a.down_w = Tensor({d_model, d_adapter});
    a.down_b = Tensor({d_adapter});
    a.up_w = Tensor({d_adapter, d_model});
    a.up_b = Tensor({d_model});
    init_xavier_uniform(a.down_w, rng);
    init_xavier_uniform(a.up_w, rng);
    return a;
}

}  // namespace moelab::nn
