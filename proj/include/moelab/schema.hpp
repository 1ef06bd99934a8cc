#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "moelab/errors.hpp"

namespace moelab {

// Reserved vocabulary ids. Domain tag tokens follow immediately after and
// content tokens come after the tags; see build_schema.
struct SpecialTokens {
    static constexpr int32_t kPad = 0;
    static constexpr int32_t kBos = 1;
    static constexpr int32_t kEos = 2;
    static constexpr int32_t kCount = 3;
};

struct TokenRange {
    int32_t lo = 0;
    int32_t hi = 0;  // half-open [lo, hi)

    int32_t size() const { return hi - lo; }
    bool empty() const { return hi <= lo; }
    bool contains(int32_t t) const { return t >= lo && t < hi; }
};

// Synthetic transduction task: source tokens are drawn uniformly from the
// content segments plus the shared range; the target is the tokenwise
// substitution of the source. The substitution has a perfect inverse.
struct DomainTask {
    std::vector<TokenRange> content_ranges;
    TokenRange shared_range;
    std::map<int32_t, int32_t> substitution;
    int32_t len_min = 1;
    int32_t len_max = 1;

    std::vector<int32_t> source_pool() const;
    int32_t map_token(int32_t t) const;
    std::map<int32_t, int32_t> inverse() const;  // throws if not injective
    void validate() const;
};

struct DomainSpec {
    std::string name;
    int32_t tag_token = 0;
    double sample_prob = 0.0;
    DomainTask task;
};

// The full domain universe of one experiment: ordered domains with the
// generic domain first, plus the held-out unseen-related task that is only
// ever decoded with the generic label.
struct DomainSchema {
    std::vector<DomainSpec> domains;
    int32_t vocab_size = 0;
    DomainTask unseen_related;
    std::string unseen_related_host;
    TokenRange shared_range;          // the common ambiguous range
    TokenRange unseen_related_range;  // empty when the schema has none

    int32_t domain_count() const { return static_cast<int32_t>(domains.size()); }
    int32_t generic_id() const { return 0; }
    int32_t find(const std::string& name) const;
    const DomainSpec& at(int32_t id) const;

    void validate() const;
    std::string serialize() const;
    uint64_t hash() const;
};

// Parameters of the synthetic multi-domain universe.
struct SchemaLayout {
    std::vector<std::string> domain_names;  // generic first
    std::vector<double> sample_probs;       // aligned with names, sums to 1
    int32_t content_tokens = 24;            // per seen domain
    int32_t shared_tokens = 16;
    int32_t unseen_related_tokens = 12;     // carved from the host's range tail
    std::string unseen_related_host;        // seen domain name; empty = first seen
    int32_t len_min = 4;
    int32_t len_max = 8;
};

// Lays out the vocabulary (specials, tags, shared range, per-domain content
// ranges) and builds every domain's substitution task. Seen domain i maps its
// own range and the shared range by a cyclic shift of i; the generic domain
// covers every seen range except the unseen-related tail, mapping covered
// tokens with the owning domain's substitution and the shared range with the
// identity.
DomainSchema build_schema(const SchemaLayout& layout);

uint64_t fnv1a64(const std::string& text);

}  // namespace moelab
