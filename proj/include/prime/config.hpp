#pragma once

#include <cctype>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "prime/net.hpp"
#include "prime/sampler.hpp"
#include "prime/schedule.hpp"
#include "prime/trainer.hpp"

namespace prime {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Everything a run needs. Serialized as INI-style text:
///
///     # comment
///     [section]
///     key = value
///
/// Keys are `section.key` in flags and PRIME_SECTION_KEY in the environment.
struct RunConfig {
    std::uint64_t seed = 0;
    std::string out_dir = "runs";

    // 2D task: a builtin density name or a PGM/CSV path, resampled to side × side.
    std::string density = "gaussians";
    std::size_t side = 64;
    // Sequence task: CSV of token rows; overrides the density when set.
    std::string dataset;
    std::uint64_t classes = 0;  // 0: largest id in the dataset + 1

    std::size_t length = 2;  // ℓ
    std::string schedule = "linear";

    std::size_t embed_dim = 48;
    std::size_t hidden = 512;
    std::size_t layers = 4;
    std::string head = "joint";

    std::size_t steps = 1000;
    std::size_t batch_size = 4096;
    double learning_rate = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double t_min = kDefaultTMin;
    bool weighted_loss = true;
    bool carryover = true;
    std::size_t eval_every = 0;        // 0: evaluate only after the last step
    std::size_t eval_mc = 4096;        // bound draws per evaluation
    std::size_t probe_samples = 64;    // sampler runs behind isr_running
    std::size_t checkpoint_every = 0;  // 0: final checkpoint only

    std::size_t sample_steps = 1024;  // T
    bool cache = true;
    bool freeze_draws = false;
    int max_rejections = 100;

    bool has_dataset() const { return !dataset.empty(); }

    TrainConfig train_config() const {
        TrainConfig t;
        t.batch_size = batch_size;
        t.learning_rate = learning_rate;
        t.adam_beta1 = adam_beta1;
        t.adam_beta2 = adam_beta2;
        t.adam_eps = adam_eps;
        t.steps = steps;
        t.t_min = t_min;
        t.weighted_loss = weighted_loss;
        t.carryover_in_train = carryover;
        t.seed = seed;
        return t;
    }

    SamplerConfig sampler_config() const {
        SamplerConfig s;
        s.num_steps = sample_steps;
        s.schedule = parse_schedule(schedule);
        s.cache_outputs = cache;
        s.freeze_draws_on_idle = freeze_draws;
        s.max_rejections = max_rejections;
        return s;
    }

    /// Checks what can be checked without touching the data files.
    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError(m); };
        if (length < 1) fail("codec.length must be at least 1");
        if (embed_dim % length != 0)
            fail("net.embed_dim (" + std::to_string(embed_dim) + ") must be divisible by codec.length (" +
                 std::to_string(length) + ")");
        if (hidden < 1 || layers < 1) fail("net.hidden and net.layers must be positive");
        if (!has_dataset() && side < 2) fail("task.side must be at least 2");
        if (sample_steps < 1) fail("sample.steps must be at least 1");
        if (eval_mc < 1) fail("train.eval_mc must be at least 1");
        try {
            parse_schedule(schedule);
            parse_head(head);
            train_config().validate();
        } catch (const std::invalid_argument& e) {
            fail(e.what());
        }
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

inline std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

template <class T>
T parse_unsigned(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    unsigned long long x = 0;
    try {
        if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
        x = std::stoull(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != v.size()) throw ConfigError(key + ": expected a nonnegative integer, got '" + v + "'");
    return static_cast<T>(x);
}

inline double parse_real(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double x = 0.0;
    try {
        x = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
    return x;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

}  // namespace detail

/// One settable field: `section.key`, how to read it, how to write it.
struct ConfigField {
    std::string name;
    std::string help;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

inline const std::vector<ConfigField>& config_fields() {
    using detail::format_double;
    using detail::parse_bool;
    using detail::parse_real;
    using detail::parse_unsigned;
#define PRIME_UINT(sec_key, member, text)                                                                          \
    ConfigField{sec_key, text,                                                                                     \
                [](RunConfig& c, const std::string& v) { c.member = parse_unsigned<decltype(c.member)>(sec_key, v); }, \
                [](const RunConfig& c) { return std::to_string(c.member); }}
#define PRIME_REAL(sec_key, member, text)                                                  \
    ConfigField{sec_key, text, [](RunConfig& c, const std::string& v) { c.member = parse_real(sec_key, v); }, \
                [](const RunConfig& c) { return format_double(c.member); }}
#define PRIME_BOOL(sec_key, member, text)                                                  \
    ConfigField{sec_key, text, [](RunConfig& c, const std::string& v) { c.member = parse_bool(sec_key, v); }, \
                [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); }}
#define PRIME_TEXT(sec_key, member, text)                                                                       \
    ConfigField{sec_key, text, [](RunConfig& c, const std::string& v) { c.member = v; }, \
                [](const RunConfig& c) { return c.member; }}
    static const std::vector<ConfigField> fields{
        PRIME_UINT("run.seed", seed, "master seed"),
        PRIME_TEXT("run.out_dir", out_dir, "parent directory for run directories"),
        PRIME_TEXT("task.density", density, "builtin density (gaussians, checkerboard, rings) or PGM/CSV path"),
        PRIME_UINT("task.side", side, "grid side; the 2D task has C = side and L = 2"),
        PRIME_TEXT("task.dataset", dataset, "CSV of token rows; replaces the density task when set"),
        PRIME_UINT("task.classes", classes, "vocabulary size for task.dataset (0: infer)"),
        PRIME_UINT("codec.length", length, "sub-tokens per token (ℓ)"),
        PRIME_TEXT("schedule.name", schedule, "linear, cubic or poly<p>"),
        PRIME_UINT("net.embed_dim", embed_dim, "embedding width per token (D)"),
        PRIME_UINT("net.hidden", hidden, "hidden width"),
        PRIME_UINT("net.layers", layers, "linear layers"),
        PRIME_TEXT("net.head", head, "joint or independent"),
        PRIME_UINT("train.steps", steps, "optimizer steps"),
        PRIME_UINT("train.batch_size", batch_size, "examples per step"),
        PRIME_REAL("train.learning_rate", learning_rate, "Adam step size"),
        PRIME_REAL("train.adam_beta1", adam_beta1, "Adam β1"),
        PRIME_REAL("train.adam_beta2", adam_beta2, "Adam β2"),
        PRIME_REAL("train.adam_eps", adam_eps, "Adam ε"),
        PRIME_REAL("train.t_min", t_min, "lower clamp on the loss time"),
        PRIME_BOOL("train.weighted_loss", weighted_loss, "weight by -α'/(1-α)"),
        PRIME_BOOL("train.carryover", carryover, "normalize over codes consistent with y_t"),
        PRIME_UINT("train.eval_every", eval_every, "steps between evaluations (0: end only)"),
        PRIME_UINT("train.eval_mc", eval_mc, "Monte Carlo draws per bound evaluation"),
        PRIME_UINT("train.probe_samples", probe_samples, "sampler runs per evaluation for isr_running"),
        PRIME_UINT("train.checkpoint_every", checkpoint_every, "steps between checkpoints (0: final only)"),
        PRIME_UINT("sample.steps", sample_steps, "sampler steps (T)"),
        PRIME_BOOL("sample.cache", cache, "reuse model outputs while the grid is unchanged"),
        PRIME_BOOL("sample.freeze_draws", freeze_draws, "also reuse the ŷ0 draw while unchanged"),
        PRIME_UINT("sample.max_rejections", max_rejections, "rejection tries for the independent head"),
    };
#undef PRIME_UINT
#undef PRIME_REAL
#undef PRIME_BOOL
#undef PRIME_TEXT
    return fields;
}

inline const ConfigField& config_field(const std::string& name) {
    for (const auto& f : config_fields())
        if (f.name == name) return f;
    throw ConfigError("unknown config key '" + name + "'");
}

/// Applies `section.key=value`.
inline void apply_override(RunConfig& c, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("expected section.key=value, got '" + assignment + "'");
    config_field(detail::trim(assignment.substr(0, eq))).set(c, detail::trim(assignment.substr(eq + 1)));
}

inline void parse_config_text(RunConfig& c, const std::string& text, const std::string& origin = "config") {
    std::istringstream is(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const std::string where = origin + ":" + std::to_string(lineno) + ": ";
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where + "unterminated section header");
            section = detail::trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
        if (section.empty()) throw ConfigError(where + "key outside any [section]");
        try {
            config_field(section + "." + detail::trim(line.substr(0, eq))).set(c, detail::trim(line.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError(where + e.what());
        }
    }
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file '" + path + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    RunConfig c;
    parse_config_text(c, ss.str(), path);
    return c;
}

/// PRIME_TRAIN_STEPS=… overrides train.steps, and so on.
inline void apply_env_overrides(RunConfig& c) {
    for (const auto& f : config_fields()) {
        std::string var = "PRIME_";
        for (char ch : f.name) var += ch == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
        if (const char* v = std::getenv(var.c_str())) {
            try {
                f.set(c, v);
            } catch (const ConfigError& e) {
                throw ConfigError(var + ": " + e.what());
            }
        }
    }
}

inline std::string to_config_text(const RunConfig& c) {
    std::ostringstream os;
    std::string section;
    for (const auto& f : config_fields()) {
        const auto dot = f.name.find('.');
        const std::string sec = f.name.substr(0, dot);
        if (sec != section) {
            if (!section.empty()) os << '\n';
            os << '[' << sec << "]\n";
            section = sec;
        }
        os << f.name.substr(dot + 1) << " = " << f.get(c) << '\n';
    }
    return os.str();
}

}  // namespace prime
