#pragma once

#include <string>
#include <vector>

#include "moelab/model.hpp"

namespace moelab::model {

// Checkpoint layout: header (config echo, schema hash, step count, RNG state)
// followed by named blobs of 64-bit little-endian values. Parameters and
// optimizer moments are both stored as blobs; round-trips are bit-exact.
struct CheckpointBlob {
    std::string name;
    std::vector<int64_t> shape;
    std::vector<double> values;
};

struct Checkpoint {
    std::string config_text;
    uint64_t schema_hash = 0;
    uint64_t step = 0;
    std::string rng_state;
    std::vector<CheckpointBlob> blobs;

    const CheckpointBlob* find(const std::string& name) const;
};

// Collects the model's parameters into blobs (extra blobs, e.g. optimizer
// state, can be appended by the caller).
Checkpoint snapshot(const Model& m, std::string config_text, uint64_t step,
                    std::string rng_state);

// Copies parameter blobs back into the model by name; every model parameter
// must be present with a matching shape.
void restore_parameters(const Model& m, const Checkpoint& ck);

// Atomic: writes to a temporary file and renames into place.
void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace moelab::model
