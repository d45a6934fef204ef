// prime: train, sample, evaluate and analyze partial-masking diffusion models.

#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "prime/prime.hpp"

namespace {

std::vector<std::size_t> parse_list(const std::string& text) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(prime::detail::parse_unsigned<std::size_t>("--ells", item));
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    using namespace prime;
    CLI::App app{"Masked diffusion with partial masking over base-b sub-tokens"};
    app.require_subcommand(1);

    // train
    auto* train = app.add_subcommand("train", "train a model; writes a run directory");
    std::string config_path, run_dir;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> train_seed;
    train->add_option("-c,--config", config_path, "INI run configuration");
    train->add_option("--run-dir", run_dir, "exact run directory (default: <out_dir>/<timestamp>-seed<seed>)");
    train->add_option("--set", sets, "override a field, section.key=value (repeatable)");
    train->add_option("--seed", train_seed, "shorthand for --set run.seed=…");
    std::vector<std::pair<std::string, std::string>> field_flags;
    field_flags.reserve(config_fields().size());
    for (const auto& f : config_fields()) {
        field_flags.emplace_back(f.name, std::string{});
        train->add_option("--" + f.name, field_flags.back().second, f.help)->group("Run configuration fields");
    }

    // sample
    auto* sample = app.add_subcommand("sample", "draw samples from a checkpoint");
    SampleOptions so;
    bool no_cache = false, freeze = false;
    sample->add_option("checkpoint", so.checkpoint, "checkpoint file")->required();
    sample->add_option("-n,--count", so.count, "number of samples");
    sample->add_option("-T,--steps", so.steps, "sampler steps (default: from the checkpoint)");
    sample->add_option("--seed", so.seed, "sampling seed (default: the run seed)");
    sample->add_option("-o,--out", so.out_dir, "output directory (default: next to the checkpoint)");
    sample->add_flag("--no-cache", no_cache, "recompute model outputs on idle steps");
    sample->add_flag("--freeze-draws", freeze, "reuse the ŷ0 draw on idle steps");
    sample->add_option("--impute", so.impute, "kept digits as 0/1, ℓ or L·ℓ characters");
    sample->add_option("--condition", so.condition, "CSV of token rows to impute from");

    // eval
    auto* eval = app.add_subcommand("eval", "NLL bound, perplexity and TV distance of a checkpoint");
    EvalOptions eo;
    std::string strat = "mask_count";
    eval->add_option("checkpoint", eo.checkpoint, "checkpoint file")->required();
    eval->add_option("--num-mc", eo.num_mc, "Monte Carlo draws for the bound");
    eval->add_option("--tv-samples", eo.tv_samples, "generated samples for the TV distance (0 skips)");
    eval->add_option("-T,--steps", eo.steps, "sampler steps (default: from the checkpoint)");
    eval->add_option("--seed", eo.seed, "evaluation seed (default: the run seed)");
    eval->add_option("--stratify", strat, "mask_count or time")->check(CLI::IsMember({"mask_count", "time"}));

    // analyze
    auto* analyze = app.add_subcommand("analyze", "idle-step and ISR table, with the recommended ℓ");
    AnalyzeOptions ao;
    std::string ells_text, preset;
    analyze->add_option("--preset", preset, "text (L=1024) or image (L=3072, ℓ∈{1,2,3,4})")
        ->check(CLI::IsMember({"text", "image"}));
    analyze->add_option("--schedule", ao.schedule, "linear, cubic or poly<p>");
    analyze->add_option("-T,--steps", ao.T, "sampler steps");
    analyze->add_option("-L,--length", ao.L, "tokens per sequence");
    analyze->add_option("--ells", ells_text, "comma-separated ℓ candidates");
    analyze->add_option("--runs", ao.runs, "simulation runs per ℓ (0: analytic only)");
    analyze->add_option("--seed", ao.seed, "simulation seed");
    analyze->add_option("-o,--out", ao.output, "CSV path (default: stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*train) {
            RunConfig cfg;
            if (!config_path.empty()) cfg = load_config(config_path);
            apply_env_overrides(cfg);
            for (const auto& s : sets) apply_override(cfg, s);
            for (std::size_t i = 0; i < field_flags.size(); ++i)
                if (train->count("--" + field_flags[i].first) > 0)
                    config_field(field_flags[i].first).set(cfg, field_flags[i].second);
            if (train_seed) cfg.seed = *train_seed;
            return cmd_train(cfg, TrainOptions{run_dir}, std::cout, std::cerr);
        }
        if (*sample) {
            if (no_cache) so.cache = false;
            if (freeze) so.freeze_draws = true;
            return cmd_sample(so, std::cout, std::cerr);
        }
        if (*eval) {
            eo.stratification = strat == "time" ? NllStratification::time : NllStratification::mask_count;
            return cmd_eval(eo, std::cout, std::cerr);
        }
        if (*analyze) {
            if (preset == "image") {
                ao.L = 3072;
                ao.ells = {1, 2, 3, 4};
            }
            if (analyze->count("--length") > 0) ao.L = analyze->get_option("--length")->as<std::size_t>();
            if (!ells_text.empty()) ao.ells = parse_list(ells_text);
            return cmd_analyze(ao, std::cout, std::cerr);
        }
    } catch (const std::exception& e) {
        std::cerr << "prime: " << e.what() << '\n';
        return kExitConfig;
    }
    return kExitOk;
}
