#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "prime/analytics.hpp"
#include "prime/checkpoint.hpp"
#include "prime/config.hpp"
#include "prime/data.hpp"
#include "prime/sampler.hpp"
#include "prime/trainer.hpp"

namespace prime {

/// Exit codes shared by every subcommand.
enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitNumeric = 2 };

/// The training data behind a RunConfig: a 2D density (L = 2, C = side) or
/// rows of tokens from a CSV file.
struct Task {
    std::optional<DensityGrid> density;
    std::vector<std::vector<Token>> rows;
    std::uint64_t classes = 0;
    std::size_t tokens = 0;

    DataSampler sampler() const {
        if (density) {
            auto cells = std::make_shared<CellSampler>(*density);
            return [cells](Rng& rng) {
                const auto s = (*cells)(rng);
                return std::vector<Token>{s[0], s[1]};
            };
        }
        const auto* data = &rows;
        return [data](Rng& rng) { return (*data)[rng() % data->size()]; };
    }
};

inline Task load_task(const RunConfig& cfg) {
    Task task;
    if (cfg.has_dataset()) {
        task.rows = load_token_rows(cfg.dataset);
        if (task.rows.empty() || task.rows[0].empty()) throw DataError("dataset '" + cfg.dataset + "' is empty");
        std::uint64_t top = 0;
        for (const auto& r : task.rows)
            for (auto t : r) top = std::max<std::uint64_t>(top, t.value);
        task.classes = cfg.classes ? cfg.classes : top + 1;
        if (top >= task.classes)
            throw DataError("dataset holds token " + std::to_string(top) + " but task.classes is " +
                            std::to_string(task.classes));
        if (task.classes < 2) throw DataError("dataset needs at least two classes");
        task.tokens = task.rows[0].size();
        return task;
    }
    const auto names = builtin_density_names();
    if (std::find(names.begin(), names.end(), cfg.density) != names.end()) {
        try {
            task.density = builtin_density(cfg.density, cfg.side);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
    } else {
        task.density = load_density(cfg.density, cfg.side);
    }
    task.classes = cfg.side;
    task.tokens = 2;
    return task;
}

inline NetConfig net_config(const RunConfig& cfg, const SubTokenCodec& codec, const Task& task) {
    auto nc = NetConfig::for_codec(codec, task.tokens, cfg.embed_dim, cfg.hidden, cfg.layers, parse_head(cfg.head));
    try {
        nc.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return nc;
}

namespace detail {

inline std::string run_dir_name(std::uint64_t seed) {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y%m%d-%H%M%S") << "-seed" << seed;
    return os.str();
}

inline std::filesystem::path fresh_dir(const std::filesystem::path& base) {
    std::filesystem::path dir = base;
    for (int k = 2; std::filesystem::exists(dir); ++k) dir = base.string() + "-" + std::to_string(k);
    std::filesystem::create_directories(dir);
    return dir;
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write '" + path.string() + "'");
    os << text;
}

inline std::string nll_report_text(const NllReport& r, std::size_t tokens) {
    std::ostringstream os;
    os.precision(10);
    os << "# variational bound on -log p(x0), Monte Carlo over " << r.num_mc << " draws\n";
    os << "# nats_per_token = bound / L (L = " << tokens << "); perplexity = exp(nats_per_token);\n";
    os << "# sequence_perplexity = exp(bound), i.e. per " << tokens << "-token sequence\n";
    os << "bound_nats = " << r.bound << '\n';
    os << "nats_per_token = " << r.nats_per_token << '\n';
    os << "perplexity = " << r.perplexity << '\n';
    os << "sequence_perplexity = " << std::exp(r.bound) << '\n';
    os << "std_error = ";
    if (std::isnan(r.std_error))
        os << "N/A\n";
    else
        os << r.std_error << '\n';
    os << "num_mc = " << r.num_mc << '\n';
    return os.str();
}

// RNG stream indices under the run seed.
enum Stream : std::uint64_t { kInit = 0, kBatches = 1, kEval = 2, kProbe = 3, kSample = 4, kTv = 5 };

}  // namespace detail

struct TrainOptions {
    std::string run_dir;  // empty: <out_dir>/<UTC timestamp>-seed<seed>
};

/// Trains a model and writes config.ini, metrics.csv, checkpoints and
/// nll.txt into the run directory.
inline int cmd_train(const RunConfig& cfg, const TrainOptions& opt, std::ostream& out, std::ostream& err) {
    std::filesystem::path dir;
    Task task;
    std::optional<SubTokenCodec> codec;
    NetConfig nc;
    try {
        cfg.validate();
        task = load_task(cfg);
        codec.emplace(task.classes, cfg.length);
        nc = net_config(cfg, *codec, task);
        dir = opt.run_dir.empty() ? detail::fresh_dir(std::filesystem::path(cfg.out_dir) / detail::run_dir_name(cfg.seed))
                                  : std::filesystem::path(opt.run_dir);
        std::filesystem::create_directories(dir);
        detail::write_file(dir / "config.ini", to_config_text(cfg));
    } catch (const std::exception& e) {
        err << "prime train: " << e.what() << '\n';
        return kExitConfig;
    }

    const FilterTable filters(*codec);
    const auto sch = parse_schedule(cfg.schedule);
    const TrainConfig tc = cfg.train_config();
    const SamplerConfig sc = cfg.sampler_config();
    const auto data = task.sampler();
    Rng init = make_stream(cfg.seed, detail::kInit);
    Rng batches = make_stream(cfg.seed, detail::kBatches);
    auto net = Mlp<float>::init(nc, init);
    AdamState<float> adam(net.param_count());
    const std::string run_text = to_config_text(cfg);

    std::ofstream metrics(dir / "metrics.csv");
    metrics << "step,wallclock,loss,nll_eval,isr_running\n";
    metrics.precision(10);
    const auto start = std::chrono::steady_clock::now();
    std::size_t probe_idle = 0, probe_steps = 0;
    NllReport last_nll;
    std::vector<CleanSeq> batch;
    batch.reserve(tc.batch_size);

    auto evaluate = [&](std::size_t step) {
        Rng er = make_stream(cfg.seed, detail::kEval + 16 * step);
        last_nll = eval_nll(net, *codec, filters, data, sch, cfg.eval_mc, er, NllOptions{.carryover = cfg.carryover, .t_min = cfg.t_min});
        if (cfg.probe_samples > 0) {
            const auto runs = generate_many(NetDenoiser<float>(net), *codec, sc, cfg.probe_samples,
                                            make_stream(cfg.seed, detail::kProbe + 16 * step)());
            for (const auto& r : runs) probe_idle += r.idle_steps;
            probe_steps += cfg.probe_samples * sc.num_steps;
        }
    };

    for (std::size_t step = 1; step <= tc.steps; ++step) {
        batch.clear();
        for (std::size_t b = 0; b < tc.batch_size; ++b) batch.emplace_back(*codec, data(batches));
        LossReport rep;
        try {
            rep = train_step(net, *codec, filters, std::span<const CleanSeq>(batch), sch, adam, tc, batches);
        } catch (const NumericError& e) {
            err << "prime train: " << e.what() << "\n  run directory: " << dir.string()
                << "\n  last finite parameters saved to checkpoint_failed.bin\n";
            save_checkpoint((dir / "checkpoint_failed.bin").string(), net, run_text);
            return kExitNumeric;
        }
        const bool eval_now = step == tc.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        if (eval_now) evaluate(step);
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        metrics << step << ',' << wall << ',' << rep.loss_value << ',';
        if (eval_now) metrics << last_nll.nats_per_token;
        metrics << ',';
        if (probe_steps > 0) metrics << static_cast<double>(probe_idle) / static_cast<double>(probe_steps);
        metrics << '\n';
        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0)
            save_checkpoint((dir / ("checkpoint_step" + std::to_string(step) + ".bin")).string(), net, run_text);
    }
    if (tc.steps == 0) evaluate(0);
    metrics.close();
    save_checkpoint((dir / "checkpoint.bin").string(), net, run_text);
    detail::write_file(dir / "nll.txt", detail::nll_report_text(last_nll, nc.tokens));
    out << "run directory: " << dir.string() << '\n' << detail::nll_report_text(last_nll, nc.tokens);
    return kExitOk;
}

/// A checkpoint with the run configuration it was trained under.
struct LoadedModel {
    RunConfig config;
    Task task;
    std::optional<SubTokenCodec> codec;
    Mlp<float> net;
};

inline LoadedModel load_model(const std::string& path) {
    const auto ck = load_checkpoint(path);
    RunConfig cfg;
    parse_config_text(cfg, ck.run_config, path + " (embedded config)");
    cfg.validate();
    Task task = load_task(cfg);
    SubTokenCodec codec(task.classes, cfg.length);
    if (!(net_config(cfg, codec, task) == ck.config))
        throw ConfigError("checkpoint '" + path + "' network shape does not match its embedded run config");
    return LoadedModel{cfg, std::move(task), std::move(codec), ck.model<float>()};
}

struct SampleOptions {
    std::string checkpoint;
    std::size_t count = 1000;
    std::size_t steps = 0;  // 0: the checkpoint's sample.steps
    std::optional<std::uint64_t> seed;
    std::optional<bool> cache;
    std::optional<bool> freeze_draws;
    std::string out_dir;  // empty: next to the checkpoint
    // Imputation: which digits to keep ('1'/'0', either ℓ characters applied to
    // every token or L·ℓ characters) and a CSV of condition rows. One sample
    // is generated per condition row.
    std::string impute;
    std::string condition;
};

inline std::vector<bool> parse_keep_spec(const std::string& spec, std::size_t tokens, std::size_t length) {
    if (spec.size() != length && spec.size() != tokens * length)
        throw ConfigError("--impute expects " + std::to_string(length) + " or " + std::to_string(tokens * length) +
                          " characters of 0/1, got '" + spec + "'");
    std::vector<bool> kept(tokens * length);
    for (std::size_t e = 0; e < kept.size(); ++e) {
        const char ch = spec[spec.size() == length ? e % length : e];
        if (ch != '0' && ch != '1') throw ConfigError("--impute characters must be 0 or 1, got '" + spec + "'");
        kept[e] = ch == '1';
    }
    return kept;
}

/// Writes samples.csv (one row of L token ids per sample), idle.txt and, for
/// density tasks, histogram.pgm / histogram.csv.
inline int cmd_sample(const SampleOptions& opt, std::ostream& out, std::ostream& err) {
    std::optional<LoadedModel> m;
    SamplerConfig sc;
    std::vector<bool> kept;
    std::vector<std::vector<Token>> conditions;
    std::filesystem::path dir;
    try {
        m.emplace(load_model(opt.checkpoint));
        sc = m->config.sampler_config();
        if (opt.steps > 0) sc.num_steps = opt.steps;
        if (opt.cache) sc.cache_outputs = *opt.cache;
        if (opt.freeze_draws) sc.freeze_draws_on_idle = *opt.freeze_draws;
        const auto& nc = m->net.config();
        if (!opt.impute.empty()) {
            kept = parse_keep_spec(opt.impute, nc.tokens, nc.length);
            if (opt.condition.empty()) throw ConfigError("--impute needs --condition FILE");
            conditions = load_token_rows(opt.condition);
            for (std::size_t r = 0; r < conditions.size(); ++r) {
                if (conditions[r].size() != nc.tokens)
                    throw ConfigError("condition row " + std::to_string(r + 1) + " has " +
                                      std::to_string(conditions[r].size()) + " tokens, the model expects " +
                                      std::to_string(nc.tokens));
                for (auto t : conditions[r])
                    if (t.value >= nc.classes)
                        throw ConfigError("condition row " + std::to_string(r + 1) + " holds token " +
                                          std::to_string(t.value) + " outside the vocabulary");
            }
        }
        dir = opt.out_dir.empty() ? std::filesystem::path(opt.checkpoint).parent_path() : std::filesystem::path(opt.out_dir);
        if (dir.empty()) dir = ".";
        std::filesystem::create_directories(dir);
    } catch (const std::exception& e) {
        err << "prime sample: " << e.what() << '\n';
        return kExitConfig;
    }

    const std::uint64_t seed = opt.seed.value_or(m->config.seed);
    const NetDenoiser<float> model(m->net);
    std::vector<SampleRun> runs;
    if (!kept.empty()) {
        for (std::size_t r = 0; r < conditions.size(); ++r) {
            Rng rng = make_stream(seed, r);
            runs.push_back(impute(model, *m->codec, sc, kept, CleanSeq(*m->codec, conditions[r]), rng));
        }
    } else {
        runs = generate_many(model, *m->codec, sc, opt.count, make_stream(seed, detail::kSample)());
    }

    std::ofstream csv(dir / "samples.csv");
    for (const auto& r : runs) {
        for (std::size_t i = 0; i < r.tokens.size(); ++i) csv << (i ? "," : "") << r.tokens[i].value;
        csv << '\n';
    }
    csv.close();

    double idle = 0.0, evals = 0.0;
    std::size_t forced = 0;
    for (const auto& r : runs) {
        idle += static_cast<double>(r.idle_steps);
        evals += static_cast<double>(r.model_evals);
        forced += r.forced_final;
    }
    const double n = static_cast<double>(std::max<std::size_t>(runs.size(), 1));
    const auto& nc = m->net.config();
    // Kept digits are never revealed, so only the masked ones count towards idling.
    const auto masked = kept.empty() ? nc.tokens * nc.length
                                     : static_cast<std::size_t>(std::count(kept.begin(), kept.end(), false));
    const double isr_expected =
        masked == 0 ? 1.0 : expected_idle_steps(sc.schedule, sc.num_steps, masked) / static_cast<double>(sc.num_steps);
    std::ostringstream summary;
    summary.precision(8);
    summary << "samples = " << runs.size() << '\n'
            << "T = " << sc.num_steps << '\n'
            << "mean_idle_steps = " << idle / n << '\n'
            << "isr_measured = " << idle / n / static_cast<double>(sc.num_steps) << '\n'
            << "isr_analytic = " << isr_expected << '\n'
            << "mean_model_evals = " << evals / n << '\n'
            << "forced_final_runs = " << forced << '\n';
    detail::write_file(dir / "idle.txt", summary.str());

    if (m->task.density && !runs.empty()) {
        std::vector<CellSample> cells;
        cells.reserve(runs.size());
        for (const auto& r : runs) cells.push_back({r.tokens[0], r.tokens[1]});
        const auto h = histogram(m->config.side, cells);
        write_pgm((dir / "histogram.pgm").string(), m->config.side, h);
        write_csv_matrix((dir / "histogram.csv").string(), m->config.side, h);
    }
    out << "wrote " << runs.size() << " samples to " << (dir / "samples.csv").string() << '\n' << summary.str();
    return kExitOk;
}

struct EvalOptions {
    std::string checkpoint;
    std::size_t num_mc = 10000;
    std::size_t tv_samples = 100000;
    std::size_t steps = 0;  // sampler T; 0: the checkpoint's sample.steps
    std::optional<std::uint64_t> seed;
    NllStratification stratification = NllStratification::mask_count;
};

/// Prints the NLL bound, perplexity and (density tasks) the TV distance of
/// generated samples to the data grid.
inline int cmd_eval(const EvalOptions& opt, std::ostream& out, std::ostream& err) {
    std::optional<LoadedModel> m;
    try {
        if (opt.num_mc < 1) throw ConfigError("--num-mc must be at least 1");
        m.emplace(load_model(opt.checkpoint));
    } catch (const std::exception& e) {
        err << "prime eval: " << e.what() << '\n';
        return kExitConfig;
    }
    const std::uint64_t seed = opt.seed.value_or(m->config.seed);
    const FilterTable filters(*m->codec);
    Rng er = make_stream(seed, detail::kEval);
    NllOptions nopt;
    nopt.stratification = opt.stratification;
    nopt.carryover = m->config.carryover;
    nopt.t_min = m->config.t_min;
    const auto rep =
        eval_nll(m->net, *m->codec, filters, m->task.sampler(), parse_schedule(m->config.schedule), opt.num_mc, er, nopt);
    out << detail::nll_report_text(rep, m->net.config().tokens);
    if (m->task.density && opt.tv_samples > 0) {
        auto sc = m->config.sampler_config();
        if (opt.steps > 0) sc.num_steps = opt.steps;
        const auto runs =
            generate_many(NetDenoiser<float>(m->net), *m->codec, sc, opt.tv_samples, make_stream(seed, detail::kTv)());
        std::vector<CellSample> cells;
        cells.reserve(runs.size());
        for (const auto& r : runs) cells.push_back({r.tokens[0], r.tokens[1]});
        out << "# tv = 1/2 sum |empirical - grid| over " << runs.size() << " samples, T = " << sc.num_steps << '\n';
        out << "tv = " << tv_distance(*m->task.density, cells) << '\n';
    } else {
        out << "tv = N/A\n";
    }
    return kExitOk;
}

struct AnalyzeOptions {
    std::string schedule = "linear";
    std::size_t T = 1024;
    std::size_t L = 1024;
    std::vector<std::size_t> ells{1, 2, 3, 4, 6, 8};
    std::size_t runs = 0;
    std::uint64_t seed = 0;
    std::string output;  // empty: stdout
};

/// CSV: schedule,T,L,ell,eta,isr,sim_mean,sim_var,elbow. eta is the expected
/// idle-step count over L·ℓ sub-tokens; the elbow column repeats the
/// recommended ℓ on every row.
inline int cmd_analyze(const AnalyzeOptions& opt, std::ostream& out, std::ostream& err) {
    Schedule sch = Schedule::linear();
    try {
        sch = parse_schedule(opt.schedule);
        if (opt.T < 1 || opt.L < 1) throw ConfigError("--T and --L must be positive");
        if (opt.ells.empty()) throw ConfigError("--ells needs at least one value");
        for (std::size_t i = 0; i < opt.ells.size(); ++i) {
            if (opt.ells[i] < 1) throw ConfigError("--ells values must be positive");
            if (i > 0 && opt.ells[i] <= opt.ells[i - 1]) throw ConfigError("--ells must be strictly increasing");
            if (opt.runs > 0 && opt.ells[i] > 31) throw ConfigError("simulation supports ℓ ≤ 31");
        }
    } catch (const std::exception& e) {
        err << "prime analyze: " << e.what() << '\n';
        return kExitConfig;
    }
    std::ofstream file;
    if (!opt.output.empty()) {
        file.open(opt.output);
        if (!file) {
            err << "prime analyze: cannot write '" << opt.output << "'\n";
            return kExitConfig;
        }
    }
    std::ostream& os = opt.output.empty() ? out : file;
    std::string elbow;
    if (opt.ells.size() >= 3) elbow = std::to_string(isr_elbow(sch, opt.T, opt.L, opt.ells));
    os << "schedule,T,L,ell,eta,isr,sim_mean,sim_var,elbow\n";
    os.precision(10);
    Rng rng(opt.seed);
    for (std::size_t l : opt.ells) {
        const auto st = simulate_idle_steps(sch, opt.T, opt.L, l, opt.runs, rng);
        os << sch.name() << ',' << opt.T << ',' << opt.L << ',' << l << ',' << st.eta_prime_analytic << ',' << st.isr
           << ',';
        if (opt.runs > 0) os << st.eta_simulated_mean;
        os << ',';
        if (opt.runs > 1) os << st.eta_simulated_var;
        os << ',' << elbow << '\n';
    }
    return kExitOk;
}

}  // namespace prime
