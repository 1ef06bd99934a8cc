#include "moelab/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace moelab::model {

namespace {

constexpr uint32_t kMagic = 0x4b454f4d;  // "MOEK"
constexpr uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_string(std::ofstream& out, const std::string& s) {
    put(out, static_cast<uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T take(std::ifstream& in) {
    T v;
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw DataError("checkpoint: truncated file");
    return v;
}

std::string take_string(std::ifstream& in) {
    const uint32_t n = take<uint32_t>(in);
    std::string s(n, '\0');
    in.read(s.data(), n);
    if (!in) throw DataError("checkpoint: truncated string");
    return s;
}

}  // namespace

const CheckpointBlob* Checkpoint::find(const std::string& name) const {
    for (const CheckpointBlob& b : blobs)
        if (b.name == name) return &b;
    return nullptr;
}

Checkpoint snapshot(const Model& m, std::string config_text, uint64_t step,
                    std::string rng_state) {
    Checkpoint ck;
    ck.config_text = std::move(config_text);
    ck.schema_hash = m.domain_schema().hash();
    ck.step = step;
    ck.rng_state = std::move(rng_state);
    for (const NamedParam& p : m.parameters()) {
        CheckpointBlob b;
        b.name = "param/" + p.name;
        b.shape = p.tensor.shape();
        b.values.assign(p.tensor.data(), p.tensor.data() + p.tensor.numel());
        ck.blobs.push_back(std::move(b));
    }
    return ck;
}

void restore_parameters(const Model& m, const Checkpoint& ck) {
    for (const NamedParam& p : m.parameters()) {
        const CheckpointBlob* b = ck.find("param/" + p.name);
        if (!b) throw DataError("checkpoint: missing parameter blob " + p.name);
        if (b->shape != p.tensor.shape()) {
            throw DataError("checkpoint: shape mismatch for " + p.name);
        }
        Tensor t = p.tensor;
        for (int64_t i = 0; i < t.numel(); ++i)
            t.data()[i] = static_cast<num::Scalar>(b->values[i]);
    }
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("checkpoint: cannot open " + tmp + " for writing");
        put(out, kMagic);
        put(out, kVersion);
        put(out, ck.schema_hash);
        put(out, ck.step);
        put_string(out, ck.config_text);
        put_string(out, ck.rng_state);
        put(out, static_cast<uint32_t>(ck.blobs.size()));
        for (const CheckpointBlob& b : ck.blobs) {
            put_string(out, b.name);
            put(out, static_cast<uint32_t>(b.shape.size()));
            for (int64_t d : b.shape) put(out, d);
            put(out, static_cast<uint64_t>(b.values.size()));
            out.write(reinterpret_cast<const char*>(b.values.data()),
                      static_cast<std::streamsize>(b.values.size() * sizeof(double)));
        }
        if (!out) throw DataError("checkpoint: write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint: cannot open " + path);
    if (take<uint32_t>(in) != kMagic) throw DataError("checkpoint: bad magic in " + path);
    if (take<uint32_t>(in) != kVersion) throw DataError("checkpoint: unsupported version");
    Checkpoint ck;
    ck.schema_hash = take<uint64_t>(in);
    ck.step = take<uint64_t>(in);
    ck.config_text = take_string(in);
    ck.rng_state = take_string(in);
    const uint32_t nblobs = take<uint32_t>(in);
    for (uint32_t i = 0; i < nblobs; ++i) {
        CheckpointBlob b;
        b.name = take_string(in);
        const uint32_t rank = take<uint32_t>(in);
        for (uint32_t r = 0; r < rank; ++r) b.shape.push_back(take<int64_t>(in));
        const uint64_t n = take<uint64_t>(in);
        b.values.resize(n);
        in.read(reinterpret_cast<char*>(b.values.data()),
                static_cast<std::streamsize>(n * sizeof(double)));
        if (!in) throw DataError("checkpoint: truncated blob " + b.name);
        ck.blobs.push_back(std::move(b));
    }
    return ck;
}

}  // namespace moelab::model
