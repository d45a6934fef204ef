#pragma once

#include <algorithm>
#include <concepts>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "prime/codec.hpp"
#include "prime/decoder.hpp"
#include "prime/diffusion.hpp"
#include "prime/net.hpp"
#include "prime/random.hpp"
#include "prime/schedule.hpp"

namespace prime {

/// Anything that maps a batch of latent grids to per-token logits laid out
/// like Mlp's output (output_dim values per grid).
template <class M>
concept Denoiser = requires(const M& m, std::span<const Digit> grids, std::size_t batch, std::vector<double>& out) {
    { m.config() } -> std::convertible_to<NetConfig>;
    m.evaluate(grids, batch, out);
};

template <class Scalar>
class NetDenoiser {
public:
    explicit NetDenoiser(const Mlp<Scalar>& net) : net_(&net) {}
    const NetConfig& config() const { return net_->config(); }
    void evaluate(std::span<const Digit> grids, std::size_t batch, std::vector<double>& out) const {
        net_->forward(grids, batch, ws_);
        out.assign(ws_.out.data(), ws_.out.data() + ws_.out.size());
    }

private:
    const Mlp<Scalar>* net_;
    mutable typename Mlp<Scalar>::Workspace ws_;
};

/// All-zero logits: the untrained symmetric model.
class UniformDenoiser {
public:
    explicit UniformDenoiser(NetConfig config) : config_(config) {}
    const NetConfig& config() const { return config_; }
    void evaluate(std::span<const Digit>, std::size_t batch, std::vector<double>& out) const {
        out.assign(batch * config_.output_dim(), 0.0);
    }

private:
    NetConfig config_;
};

struct SamplerConfig {
    std::size_t num_steps = 1024;  // T
    Schedule schedule = Schedule::linear();
    bool cache_outputs = true;          // reuse logits while the grid is unchanged
    bool freeze_draws_on_idle = false;  // also reuse the previous ŷ_0 draw while unchanged
    bool record_trajectory = false;
    int max_rejections = 100;  // independent head only
};

struct SampleRun {
    std::vector<Token> tokens;
    std::size_t idle_steps = 0;
    std::vector<std::size_t> unmask_counts;  // sub-tokens revealed at each step
    std::size_t model_evals = 0;
    bool forced_final = false;  // residual masks resolved after the last step
    std::vector<MaskedSeq> trajectory;
};

namespace detail {

struct ReverseState {
    MaskedSeq y;
    Rng* rng = nullptr;
    SampleRun run;
    std::vector<double> logits;
    bool fresh = false;  // logits correspond to the current y
    std::vector<Token> draws;
    bool draws_fresh = false;
};

// ŷ_0 for every token; rows without masks decode to themselves.
inline std::vector<Token> draw_clean(const NetConfig& nc, const SubTokenCodec& codec, const FilterTable& filters,
                                     const MaskedSeq& y, std::span<const double> logits, Rng& rng, int max_rejections) {
    std::vector<Token> out(nc.tokens);
    const std::size_t w = nc.head_width();
    for (std::size_t i = 0; i < nc.tokens; ++i) {
        const auto row = y.row(i);
        if (y.state(i) == TokenState::unmasked) {
            out[i] = codec.decode(row);
            continue;
        }
        const auto block = logits.subspan(i * w, w);
        if (nc.head == Head::joint) {
            out[i] = sample_code(filtered_softmax<double>(block, filters.valid_set(row)), rng);
        } else {
            out[i] = independent_head<double>(block, row, codec.base()).sample(codec, rng, max_rejections);
        }
    }
    return out;
}

template <Denoiser Model>
void evaluate_stale(const Model& model, std::vector<ReverseState>& states, bool cache) {
    const NetConfig& nc = model.config();
    std::vector<std::size_t> idx;
    std::vector<Digit> grids;
    for (std::size_t r = 0; r < states.size(); ++r) {
        if (cache && states[r].fresh) continue;
        if (states[r].y.masked_count() == 0) continue;
        idx.push_back(r);
        grids.insert(grids.end(), states[r].y.entries().begin(), states[r].y.entries().end());
    }
    if (idx.empty()) return;
    std::vector<double> out;
    model.evaluate(grids, idx.size(), out);
    const std::size_t od = nc.output_dim();
    for (std::size_t k = 0; k < idx.size(); ++k) {
        auto& st = states[idx[k]];
        st.logits.assign(out.begin() + static_cast<std::ptrdiff_t>(k * od),
                         out.begin() + static_cast<std::ptrdiff_t>((k + 1) * od));
        st.fresh = true;
        ++st.run.model_evals;
    }
}

/// Reverse process from each state's initial grid. Per step k, with
/// t = 1 - k/T and s = 1 - (k+1)/T, every run draws ŷ_0 token by token and
/// then applies posterior_step; both consume that run's generator in order.
template <Denoiser Model>
void run_reverse(const Model& model, const SubTokenCodec& codec, const FilterTable& filters,
                 const SamplerConfig& cfg, std::vector<ReverseState>& states) {
    if (cfg.num_steps < 1) throw std::invalid_argument("sampler needs at least one step");
    const NetConfig& nc = model.config();
    const auto T = static_cast<double>(cfg.num_steps);
    for (auto& st : states) {
        st.run.unmask_counts.reserve(cfg.num_steps);
        if (cfg.record_trajectory) st.run.trajectory.push_back(st.y);
    }
    for (std::size_t k = 0; k < cfg.num_steps; ++k) {
        const double t = 1.0 - static_cast<double>(k) / T;
        const double s = 1.0 - static_cast<double>(k + 1) / T;
        evaluate_stale(model, states, cfg.cache_outputs);
        for (auto& st : states) {
            const std::size_t before = st.y.masked_count();
            if (before == 0) {
                ++st.run.idle_steps;
                st.run.unmask_counts.push_back(0);
                if (cfg.record_trajectory) st.run.trajectory.push_back(st.y);
                continue;
            }
            if (!(cfg.freeze_draws_on_idle && st.draws_fresh)) {
                st.draws = draw_clean(nc, codec, filters, st.y, st.logits, *st.rng, cfg.max_rejections);
                st.draws_fresh = true;
            }
            const CleanSeq y0_hat(codec, st.draws);
            MaskedSeq next = posterior_step(st.y, y0_hat, std::max(s, 0.0), t, cfg.schedule, *st.rng);
            const std::size_t after = next.masked_count();
            st.run.unmask_counts.push_back(before - after);
            if (after == before) {
                ++st.run.idle_steps;
            } else {
                st.y = std::move(next);
                st.fresh = false;
                st.draws_fresh = false;
            }
            if (cfg.record_trajectory) st.run.trajectory.push_back(st.y);
        }
    }
    // Residual masks (schedule rounding): one final draw, unmasked with probability 1.
    evaluate_stale(model, states, cfg.cache_outputs);
    for (auto& st : states) {
        if (st.y.masked_count() > 0) {
            const auto draws = draw_clean(nc, codec, filters, st.y, st.logits, *st.rng, cfg.max_rejections);
            const CleanSeq y0_hat(codec, draws);
            auto dst = st.y.entries();
            auto src = y0_hat.entries();
            for (std::size_t e = 0; e < dst.size(); ++e)
                if (dst[e] == st.y.mask()) dst[e] = src[e];
            st.run.forced_final = true;
            if (cfg.record_trajectory) st.run.trajectory.push_back(st.y);
        }
        st.run.tokens.resize(nc.tokens);
        for (std::size_t i = 0; i < nc.tokens; ++i) st.run.tokens[i] = codec.decode(st.y.row(i));
    }
}

template <Denoiser Model>
void check_model(const Model& model, const SubTokenCodec& codec) {
    const NetConfig& nc = model.config();
    if (nc.length != codec.length() || nc.base != codec.base() || nc.classes != codec.num_classes())
        throw std::invalid_argument("sampler: model and codec disagree on (C, ℓ, b)");
}

}  // namespace detail

/// Ancestral sampling from the all-mask grid.
template <Denoiser Model>
SampleRun generate(const Model& model, const SubTokenCodec& codec, const SamplerConfig& cfg, Rng& rng) {
    detail::check_model(model, codec);
    const FilterTable filters(codec);
    std::vector<detail::ReverseState> states(1);
    states[0].y = MaskedSeq::all_masked(codec, model.config().tokens);
    states[0].rng = &rng;
    detail::run_reverse(model, codec, filters, cfg, states);
    return std::move(states[0].run);
}

/// `count` independent runs; run r uses make_stream(seed, r), so its result
/// equals generate() with that generator. Runs are batched through the model
/// `chunk` at a time.
template <Denoiser Model>
std::vector<SampleRun> generate_many(const Model& model, const SubTokenCodec& codec, const SamplerConfig& cfg,
                                     std::size_t count, std::uint64_t seed, std::size_t chunk = 4096) {
    detail::check_model(model, codec);
    const FilterTable filters(codec);
    std::vector<SampleRun> out;
    out.reserve(count);
    for (std::size_t begin = 0; begin < count; begin += chunk) {
        const std::size_t end = std::min(count, begin + chunk);
        std::vector<Rng> rngs;
        rngs.reserve(end - begin);
        for (std::size_t r = begin; r < end; ++r) rngs.push_back(make_stream(seed, r));
        std::vector<detail::ReverseState> states(end - begin);
        for (std::size_t r = 0; r < states.size(); ++r) {
            states[r].y = MaskedSeq::all_masked(codec, model.config().tokens);
            states[r].rng = &rngs[r];
        }
        detail::run_reverse(model, codec, filters, cfg, states);
        for (auto& st : states) out.push_back(std::move(st.run));
    }
    return out;
}

/// Conditional generation: digits where `kept` is true start (and stay) at the
/// condition's values; the rest start masked.
template <Denoiser Model>
SampleRun impute(const Model& model, const SubTokenCodec& codec, const SamplerConfig& cfg,
                 const std::vector<bool>& kept, const CleanSeq& condition, Rng& rng) {
    detail::check_model(model, codec);
    const NetConfig& nc = model.config();
    if (condition.tokens() != nc.tokens || condition.length() != nc.length)
        throw std::invalid_argument("impute: condition shape does not match the model");
    if (kept.size() != nc.entries()) throw std::invalid_argument("impute: kept mask must have L × ℓ entries");
    const FilterTable filters(codec);
    std::vector<detail::ReverseState> states(1);
    states[0].y = MaskedSeq::all_masked(codec, nc.tokens);
    auto dst = states[0].y.entries();
    for (std::size_t e = 0; e < dst.size(); ++e)
        if (kept[e]) dst[e] = condition.entries()[e];
    states[0].rng = &rng;
    detail::run_reverse(model, codec, filters, cfg, states);
    return std::move(states[0].run);
}

}  // namespace prime
