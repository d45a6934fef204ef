#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "prime/codec.hpp"
#include "prime/diffusion.hpp"
#include "prime/random.hpp"
#include "prime/schedule.hpp"

namespace prime {

struct IdleStats {
    double eta_analytic = 0.0;        // seq_len = L
    double eta_prime_analytic = 0.0;  // seq_len = L·ℓ
    double isr = 0.0;                 // eta_prime_analytic / T
    double eta_simulated_mean = std::numeric_limits<double>::quiet_NaN();
    double eta_simulated_var = std::numeric_limits<double>::quiet_NaN();
    std::size_t runs = 0;
};

/// Expected idle steps of a T-step sampler over seq_len independent entries:
/// Σ_k [1 − (α_s − α_t)]^seq_len with t = 1 − k/T, s = 1 − (k+1)/T.
inline double expected_idle_steps(const Schedule& sch, std::size_t T, std::size_t seq_len) {
    if (T < 1 || seq_len < 1) throw std::invalid_argument("expected_idle_steps needs T ≥ 1 and seq_len ≥ 1");
    const auto Td = static_cast<double>(T);
    const auto n = static_cast<double>(seq_len);
    double eta = 0.0;
    for (std::size_t k = 0; k < T; ++k) {
        const double t = 1.0 - static_cast<double>(k) / Td;
        const double s = std::max(0.0, 1.0 - static_cast<double>(k + 1) / Td);
        const double d = sch.alpha(s) - sch.alpha(t);
        if (d >= 1.0) continue;
        eta += std::exp(n * std::log1p(-d));
    }
    return eta;
}

inline double isr(const Schedule& sch, std::size_t T, std::size_t L, std::size_t ell) {
    return expected_idle_steps(sch, T, L * ell) / static_cast<double>(T);
}

/// Runs the bare mask/unmask process (no model, a fixed all-zero ŷ_0) `runs`
/// times and tallies steps in which nothing unmasks. Run r draws from
/// make_stream(seed, r) with seed taken from `rng`.
inline IdleStats simulate_idle_steps(const Schedule& sch, std::size_t T, std::size_t L, std::size_t ell,
                                     std::size_t runs, Rng& rng) {
    if (ell < 1 || ell > 31) throw std::invalid_argument("simulate_idle_steps: ℓ must be in [1, 31]");
    IdleStats st;
    st.eta_analytic = expected_idle_steps(sch, T, L);
    st.eta_prime_analytic = expected_idle_steps(sch, T, L * ell);
    st.isr = st.eta_prime_analytic / static_cast<double>(T);
    st.runs = runs;
    if (runs == 0) return st;

    const SubTokenCodec codec(std::uint64_t{1} << ell, ell);
    const std::vector<Token> zeros(L, Token{0});
    const CleanSeq oracle(codec, zeros);
    const std::uint64_t seed = rng();
    const auto Td = static_cast<double>(T);
    std::vector<double> counts(runs);
    for (std::size_t r = 0; r < runs; ++r) {
        Rng stream = make_stream(seed, r);
        MaskedSeq y = MaskedSeq::all_masked(codec, L);
        std::size_t masked = y.masked_count();
        std::size_t idle = 0;
        for (std::size_t k = 0; k < T; ++k) {
            const double t = 1.0 - static_cast<double>(k) / Td;
            const double s = std::max(0.0, 1.0 - static_cast<double>(k + 1) / Td);
            if (masked == 0) {
                ++idle;
                continue;
            }
            MaskedSeq next = posterior_step(y, oracle, s, t, sch, stream);
            const std::size_t after = next.masked_count();
            if (after == masked) ++idle;
            y = std::move(next);
            masked = after;
        }
        counts[r] = static_cast<double>(idle);
    }
    double mean = 0.0;
    for (double c : counts) mean += c;
    mean /= static_cast<double>(runs);
    double var = std::numeric_limits<double>::quiet_NaN();
    if (runs > 1) {
        var = 0.0;
        for (double c : counts) var += (c - mean) * (c - mean);
        var /= static_cast<double>(runs - 1);
    }
    st.eta_simulated_mean = mean;
    st.eta_simulated_var = var;
    return st;
}

/// Elbow of a decreasing curve: the interior candidate with the largest
/// turning angle of the polyline (ℓ, value), in the units given. Ties (within
/// 1e-12 rad) go to the smaller ℓ.
inline std::size_t curve_elbow(std::span<const std::size_t> ells, std::span<const double> values) {
    if (ells.size() != values.size()) throw std::invalid_argument("curve_elbow: size mismatch");
    if (ells.size() < 3) throw std::invalid_argument("curve_elbow needs at least three candidates");
    for (std::size_t i = 1; i < ells.size(); ++i)
        if (ells[i] <= ells[i - 1]) throw std::invalid_argument("curve_elbow: candidates must be increasing");
    std::size_t best = ells[1];
    double best_angle = -1.0;
    for (std::size_t i = 1; i + 1 < ells.size(); ++i) {
        const double ax = static_cast<double>(ells[i] - ells[i - 1]), ay = values[i] - values[i - 1];
        const double bx = static_cast<double>(ells[i + 1] - ells[i]), by = values[i + 1] - values[i];
        const double angle = std::abs(std::atan2(ax * by - ay * bx, ax * bx + ay * by));
        if (angle > best_angle + 1e-12) {
            best_angle = angle;
            best = ells[i];
        }
    }
    return best;
}

/// Recommended ℓ: elbow of the ISR curve plotted in percent.
inline std::size_t isr_elbow(const Schedule& sch, std::size_t T, std::size_t L, std::span<const std::size_t> ells) {
    std::vector<double> pct;
    pct.reserve(ells.size());
    for (auto l : ells) pct.push_back(100.0 * isr(sch, T, L, l));
    return curve_elbow(ells, pct);
}

/// I(x_t; x_0) for one token under the absorbing kernel, by direct summation
/// over the joint pmf of (x_0, x_t) with x_t ∈ {0..C−1, m}.
inline double joint_mutual_information(std::span<const double> p0, double alpha) {
    const std::size_t C = p0.size();
    std::vector<double> pt(C + 1, 0.0);  // marginal of x_t
    for (std::size_t x = 0; x < C; ++x) {
        pt[x] += alpha * p0[x];
        pt[C] += (1.0 - alpha) * p0[x];
    }
    double mi = 0.0;
    for (std::size_t x = 0; x < C; ++x) {
        if (p0[x] <= 0.0) continue;
        for (std::size_t y = 0; y <= C; ++y) {
            const double cond = y == C ? 1.0 - alpha : (y == x ? alpha : 0.0);
            const double joint = p0[x] * cond;
            if (joint <= 0.0) continue;
            mi += joint * std::log(joint / (p0[x] * pt[y]));
        }
    }
    return mi;
}

inline double entropy(std::span<const double> p) {
    double h = 0.0;
    for (double x : p)
        if (x > 0.0) h -= x * std::log(x);
    return h;
}

}  // namespace prime
