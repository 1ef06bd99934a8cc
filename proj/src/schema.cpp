#include "moelab/schema.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace moelab {

std::vector<int32_t> DomainTask::source_pool() const {
    std::vector<int32_t> pool;
    for (const TokenRange& r : content_ranges)
        for (int32_t t = r.lo; t < r.hi; ++t) pool.push_back(t);
    for (int32_t t = shared_range.lo; t < shared_range.hi; ++t) pool.push_back(t);
    return pool;
}

int32_t DomainTask::map_token(int32_t t) const {
    auto it = substitution.find(t);
    if (it == substitution.end()) {
        throw DataError("DomainTask: token " + std::to_string(t) +
                        " has no substitution entry");
    }
    return it->second;
}

std::map<int32_t, int32_t> DomainTask::inverse() const {
    std::map<int32_t, int32_t> inv;
    for (const auto& [k, v] : substitution) {
        if (!inv.emplace(v, k).second) {
            throw DataError("DomainTask: substitution is not injective at image " +
                            std::to_string(v));
        }
    }
    return inv;
}

void DomainTask::validate() const {
    if (len_min < 1 || len_max < len_min) {
        throw ConfigError("DomainTask: invalid length bounds");
    }
    const std::vector<int32_t> pool = source_pool();
    if (pool.empty()) throw ConfigError("DomainTask: empty token ranges");
    for (int32_t t : pool) map_token(t);  // every source token must be mapped
    inverse();                            // perfect inverse exists
}

int32_t DomainSchema::find(const std::string& name) const {
    for (size_t i = 0; i < domains.size(); ++i)
        if (domains[i].name == name) return static_cast<int32_t>(i);
    return -1;
}

const DomainSpec& DomainSchema::at(int32_t id) const {
    if (id < 0 || id >= domain_count()) {
        throw LookupError("DomainSchema: unknown domain id " + std::to_string(id));
    }
    return domains[id];
}

void DomainSchema::validate() const {
    if (domains.empty()) throw ConfigError("DomainSchema: no domains");
    double p = 0.0;
    std::set<int32_t> tags;
    for (const DomainSpec& d : domains) {
        p += d.sample_prob;
        if (d.tag_token < SpecialTokens::kCount || d.tag_token >= vocab_size) {
            throw ConfigError("DomainSchema: tag token out of reserved range");
        }
        if (!tags.insert(d.tag_token).second) {
            throw ConfigError("DomainSchema: duplicate tag token");
        }
        d.task.validate();
        for (const TokenRange& r : d.task.content_ranges) {
            for (int32_t t : {r.lo, r.hi - 1}) {
                if (tags.count(t)) throw ConfigError("DomainSchema: tag inside content range");
                if (t < SpecialTokens::kCount || t >= vocab_size) {
                    throw ConfigError("DomainSchema: content token outside vocabulary");
                }
            }
        }
    }
    if (std::abs(p - 1.0) > 1e-9) {
        throw ConfigError("DomainSchema: sampling probabilities sum to " +
                          std::to_string(p) + ", expected 1");
    }
    // seen content ranges pairwise disjoint and disjoint from the shared range
    std::vector<TokenRange> seen_ranges;
    for (size_t i = 1; i < domains.size(); ++i)
        for (const TokenRange& r : domains[i].task.content_ranges)
            seen_ranges.push_back(r);
    for (size_t i = 0; i < seen_ranges.size(); ++i) {
        for (size_t j = i + 1; j < seen_ranges.size(); ++j) {
            if (seen_ranges[i].lo < seen_ranges[j].hi &&
                seen_ranges[j].lo < seen_ranges[i].hi) {
                throw ConfigError("DomainSchema: overlapping seen content ranges");
            }
        }
        if (!shared_range.empty() && seen_ranges[i].lo < shared_range.hi &&
            shared_range.lo < seen_ranges[i].hi) {
            throw ConfigError("DomainSchema: content range overlaps the shared range");
        }
    }
}

std::string DomainSchema::serialize() const {
    std::ostringstream os;
    os.precision(17);
    os << "vocab " << vocab_size << "\n";
    os << "shared " << shared_range.lo << " " << shared_range.hi << "\n";
    os << "unseen " << unseen_related_range.lo << " " << unseen_related_range.hi
       << " host " << unseen_related_host << "\n";
    auto dump_task = [&os](const DomainTask& t) {
        os << " len " << t.len_min << " " << t.len_max << " segs";
        for (const TokenRange& r : t.content_ranges) os << " " << r.lo << ":" << r.hi;
        os << " shared " << t.shared_range.lo << ":" << t.shared_range.hi << " map";
        for (const auto& [k, v] : t.substitution) os << " " << k << ">" << v;
        os << "\n";
    };
    for (const DomainSpec& d : domains) {
        os << "domain " << d.name << " tag " << d.tag_token << " prob " << d.sample_prob;
        dump_task(d.task);
    }
    if (!unseen_related_range.empty()) {
        os << "unseen_task";
        dump_task(unseen_related);
    }
    return os.str();
}

uint64_t fnv1a64(const std::string& text) {
    uint64_t h = 14695981039346656037ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

uint64_t DomainSchema::hash() const { return fnv1a64(serialize()); }

namespace {

int32_t shifted(const TokenRange& r, int32_t t, int32_t shift) {
    const int32_t n = r.size();
    return r.lo + (t - r.lo + shift % n + n) % n;
}

}  // namespace

DomainSchema build_schema(const SchemaLayout& layout) {
    const size_t dcount = layout.domain_names.size();
    if (dcount < 2) throw ConfigError("build_schema: need the generic domain plus at least one seen domain");
    if (layout.sample_probs.size() != dcount) {
        throw ConfigError("build_schema: sample_probs must match domains");
    }
    if (layout.content_tokens < 1 || layout.shared_tokens < 0 ||
        layout.unseen_related_tokens < 0) {
        throw ConfigError("build_schema: invalid token counts");
    }

    DomainSchema s;
    std::string host = layout.unseen_related_host.empty() && dcount > 1
                           ? layout.domain_names[1]
                           : layout.unseen_related_host;

    int32_t next = SpecialTokens::kCount;
    std::vector<int32_t> tag_of(dcount);
    for (size_t i = 0; i < dcount; ++i) tag_of[i] = next++;

    s.shared_range = {next, next + layout.shared_tokens};
    next = s.shared_range.hi;

    std::vector<TokenRange> range_of(dcount);  // full content range per seen domain
    for (size_t i = 1; i < dcount; ++i) {
        int32_t extra = 0;
        if (layout.unseen_related_tokens > 0 && layout.domain_names[i] == host) {
            extra = layout.unseen_related_tokens;
        }
        range_of[i] = {next, next + layout.content_tokens + extra};
        next = range_of[i].hi;
    }
    s.vocab_size = next;
    s.unseen_related_host = host;

    const int32_t host_id = [&]() {
        for (size_t i = 1; i < dcount; ++i)
            if (layout.domain_names[i] == host) return static_cast<int32_t>(i);
        throw ConfigError("build_schema: unseen_related_host '" + host +
                          "' is not a seen domain");
    }();
    if (layout.unseen_related_tokens > 0) {
        s.unseen_related_range = {range_of[host_id].hi - layout.unseen_related_tokens,
                                  range_of[host_id].hi};
    }

    // seen domain substitutions: cyclic shift by the domain index over the
    // full content range and over the shared range
    auto seen_map = [&](int32_t id) {
        std::map<int32_t, int32_t> m;
        const TokenRange& r = range_of[id];
        for (int32_t t = r.lo; t < r.hi; ++t) m[t] = shifted(r, t, id);
        for (int32_t t = s.shared_range.lo; t < s.shared_range.hi; ++t) {
            m[t] = shifted(s.shared_range, t, id);
        }
        return m;
    };

    for (size_t i = 0; i < dcount; ++i) {
        DomainSpec d;
        d.name = layout.domain_names[i];
        d.tag_token = tag_of[i];
        d.sample_prob = layout.sample_probs[i];
        d.task.len_min = layout.len_min;
        d.task.len_max = layout.len_max;
        d.task.shared_range = s.shared_range;
        if (i == 0) {
            // generic: covered ranges of every seen domain (host minus the
            // unseen-related tail), mapped with the owner's substitution;
            // identity on the shared range
            for (size_t j = 1; j < dcount; ++j) {
                TokenRange covered = range_of[j];
                if (static_cast<int32_t>(j) == host_id) {
                    covered.hi -= layout.unseen_related_tokens;
                }
                d.task.content_ranges.push_back(covered);
                const auto owner = seen_map(static_cast<int32_t>(j));
                for (int32_t t = covered.lo; t < covered.hi; ++t) {
                    d.task.substitution[t] = owner.at(t);
                }
            }
            for (int32_t t = s.shared_range.lo; t < s.shared_range.hi; ++t) {
                d.task.substitution[t] = t;
            }
        } else {
            d.task.content_ranges.push_back(range_of[i]);
            d.task.substitution = seen_map(static_cast<int32_t>(i));
        }
        s.domains.push_back(std::move(d));
    }

    if (layout.unseen_related_tokens > 0) {
        // the unseen-related domain behaves like its host: host substitution
        // over the held-out range and over the shared range
        s.unseen_related.len_min = layout.len_min;
        s.unseen_related.len_max = layout.len_max;
        s.unseen_related.content_ranges.push_back(s.unseen_related_range);
        s.unseen_related.shared_range = s.shared_range;
        const auto host_map = seen_map(host_id);
        for (int32_t t = s.unseen_related_range.lo; t < s.unseen_related_range.hi; ++t) {
            s.unseen_related.substitution[t] = host_map.at(t);
        }
        for (int32_t t = s.shared_range.lo; t < s.shared_range.hi; ++t) {
            s.unseen_related.substitution[t] = host_map.at(t);
        }
    }

    s.validate();
    return s;
}

}  // namespace moelab
