#include "moelab/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

namespace moelab::cli {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    if (a == std::string::npos) return "";
    return s.substr(a, b - a + 1);
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    // trim to the shortest representation that round-trips
    for (int prec = 1; prec < 17; ++prec) {
        char shorter[64];
        std::snprintf(shorter, sizeof(shorter), "%.*g", prec, v);
        if (std::strtod(shorter, nullptr) == v) return shorter;
    }
    return buf;
}

struct Field {
    std::string name;
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

int64_t parse_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const int64_t x = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects an integer, got '" + v + "'");
    }
}

double parse_dbl(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects a number, got '" + v + "'");
    }
}

std::vector<Field> fields() {
    std::vector<Field> f;
    auto int_field = [&](const std::string& name, int64_t ExperimentConfig::* p) {
        f.push_back({name,
                     [name, p](ExperimentConfig& c, const std::string& v) {
                         c.*p = parse_int(name, v);
                     },
                     [p](const ExperimentConfig& c) { return std::to_string(c.*p); }});
    };
    auto dbl_field = [&](const std::string& name, double ExperimentConfig::* p) {
        f.push_back({name,
                     [name, p](ExperimentConfig& c, const std::string& v) {
                         c.*p = parse_dbl(name, v);
                     },
                     [p](const ExperimentConfig& c) { return format_double(c.*p); }});
    };
    auto str_field = [&](const std::string& name, std::string ExperimentConfig::* p) {
        f.push_back({name,
                     [p](ExperimentConfig& c, const std::string& v) { c.*p = v; },
                     [p](const ExperimentConfig& c) { return c.*p; }});
    };
    auto u64_field = [&](const std::string& name, uint64_t ExperimentConfig::* p) {
        f.push_back({name,
                     [name, p](ExperimentConfig& c, const std::string& v) {
                         c.*p = static_cast<uint64_t>(parse_int(name, v));
                     },
                     [p](const ExperimentConfig& c) { return std::to_string(c.*p); }});
    };

    int_field("d_model", &ExperimentConfig::d_model);
    int_field("d_ff", &ExperimentConfig::d_ff);
    int_field("encoder_layers", &ExperimentConfig::encoder_layers);
    int_field("decoder_layers", &ExperimentConfig::decoder_layers);
    int_field("heads", &ExperimentConfig::heads);
    int_field("vocab_size", &ExperimentConfig::vocab_size);
    str_field("ffn_variant", &ExperimentConfig::ffn_variant);
    dbl_field("width_multiplier", &ExperimentConfig::width_multiplier);
    int_field("expert_count", &ExperimentConfig::expert_count);
    int_field("top_k", &ExperimentConfig::top_k);
    str_field("expert_placement", &ExperimentConfig::expert_placement);
    int_field("adapter_dim", &ExperimentConfig::adapter_dim);
    str_field("conditioning", &ExperimentConfig::conditioning);
    dbl_field("dr_probability", &ExperimentConfig::dr_probability);
    dbl_field("dropout", &ExperimentConfig::dropout);
    u64_field("seed", &ExperimentConfig::seed);
    str_field("domains", &ExperimentConfig::domains);
    str_field("sample_probs", &ExperimentConfig::sample_probs);
    int_field("content_tokens", &ExperimentConfig::content_tokens);
    int_field("shared_tokens", &ExperimentConfig::shared_tokens);
    int_field("unseen_related_tokens", &ExperimentConfig::unseen_related_tokens);
    str_field("unseen_related_host", &ExperimentConfig::unseen_related_host);
    int_field("seq_len_min", &ExperimentConfig::seq_len_min);
    int_field("seq_len_max", &ExperimentConfig::seq_len_max);
    int_field("train_examples", &ExperimentConfig::train_examples);
    int_field("valid_examples", &ExperimentConfig::valid_examples);
    int_field("test_examples", &ExperimentConfig::test_examples);
    int_field("max_steps", &ExperimentConfig::max_steps);
    int_field("batch_tokens", &ExperimentConfig::batch_tokens);
    int_field("accumulation_steps", &ExperimentConfig::accumulation_steps);
    dbl_field("lr_max", &ExperimentConfig::lr_max);
    int_field("warmup_steps", &ExperimentConfig::warmup_steps);
    dbl_field("adam_beta1", &ExperimentConfig::adam_beta1);
    dbl_field("adam_beta2", &ExperimentConfig::adam_beta2);
    dbl_field("adam_eps", &ExperimentConfig::adam_eps);
    dbl_field("label_smoothing", &ExperimentConfig::label_smoothing);
    int_field("eval_every", &ExperimentConfig::eval_every);
    return f;
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, ',')) out.push_back(trim(cur));
    return out;
}

}  // namespace

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
    ExperimentConfig cfg;
    const std::vector<Field> reg = fields();
    bool seed_seen = false;
    std::istringstream is(text);
    std::string line;
    size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::string stripped = trim(line);
        if (stripped.empty() || stripped[0] == '#') continue;
        const size_t eq = stripped.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config: line " + std::to_string(lineno) +
                              " is not 'key = value': " + stripped);
        }
        const std::string key = trim(stripped.substr(0, eq));
        const std::string value = trim(stripped.substr(eq + 1));
        const Field* field = nullptr;
        for (const Field& f : reg) {
            if (f.name == key) {
                field = &f;
                break;
            }
        }
        if (!field) throw ConfigError("config: unknown key '" + key + "'");
        field->set(cfg, value);
        if (key == "seed") seed_seen = true;
    }
    if (!seed_seen) {
        if (const char* env = std::getenv("MOELAB_SEED")) {
            cfg.seed = static_cast<uint64_t>(parse_int("MOELAB_SEED", env));
        }
    }
    return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return parse(os.str());
}

std::string ExperimentConfig::emit() const {
    std::ostringstream os;
    for (const Field& f : fields()) os << f.name << " = " << f.get(*this) << "\n";
    return os.str();
}

std::vector<std::string> ExperimentConfig::domain_names() const {
    return split_csv(domains);
}

std::vector<double> ExperimentConfig::probs() const {
    std::vector<double> out;
    for (const std::string& p : split_csv(sample_probs)) out.push_back(parse_dbl("sample_probs", p));
    return out;
}

SchemaLayout ExperimentConfig::layout() const {
    SchemaLayout l;
    l.domain_names = domain_names();
    l.sample_probs = probs();
    if (l.domain_names.size() != l.sample_probs.size()) {
        throw ConfigError("config: domains and sample_probs must have the same length");
    }
    l.content_tokens = static_cast<int32_t>(content_tokens);
    l.shared_tokens = static_cast<int32_t>(shared_tokens);
    l.unseen_related_tokens = static_cast<int32_t>(unseen_related_tokens);
    l.unseen_related_host = unseen_related_host;
    l.len_min = static_cast<int32_t>(seq_len_min);
    l.len_max = static_cast<int32_t>(seq_len_max);
    return l;
}

DomainSchema ExperimentConfig::schema() const { return build_schema(layout()); }

model::ModelConfig ExperimentConfig::model_config(const DomainSchema& s) const {
    model::ModelConfig m;
    m.d_model = d_model;
    m.d_ff = d_ff;
    m.encoder_layers = encoder_layers;
    m.decoder_layers = decoder_layers;
    m.heads = heads;
    m.vocab_size = vocab_size > 0 ? vocab_size : s.vocab_size;
    m.ffn_variant = model::ffn_variant_from_string(ffn_variant);
    m.width_multiplier = width_multiplier;
    m.expert_count = expert_count;
    m.top_k = top_k;
    m.expert_placement = expert_placement;
    m.adapter_dim = adapter_dim;
    m.conditioning = model::conditioning_from_string(conditioning);
    m.dr_probability = dr_probability;
    m.dropout = dropout;
    m.seed = seed;
    m.validate();
    return m;
}

train::TrainConfig ExperimentConfig::train_config() const {
    train::TrainConfig t;
    t.max_steps = max_steps;
    t.batch_tokens = batch_tokens;
    t.accumulation_steps = accumulation_steps;
    t.lr_max = lr_max;
    t.warmup_steps = warmup_steps;
    t.adam_beta1 = adam_beta1;
    t.adam_beta2 = adam_beta2;
    t.adam_eps = adam_eps;
    t.label_smoothing = label_smoothing;
    t.eval_every = eval_every;
    t.seed = seed;
    t.validate();
    return t;
}

}  // namespace moelab::cli
