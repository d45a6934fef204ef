#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "prime/codec.hpp"
#include "prime/random.hpp"
#include "prime/schedule.hpp"

namespace prime {

enum class TokenState { masked, intermediate, unmasked };

/// Latent state y_t: an L × ℓ grid over {0..b-1} ∪ {m}, stored row-major with
/// the mask encoded as the digit value b.
class MaskedSeq {
public:
    MaskedSeq() = default;

    /// All-mask grid of `tokens` rows.
    MaskedSeq(std::size_t tokens, std::size_t length, std::uint64_t base)
        : tokens_(tokens), length_(length), mask_(static_cast<Digit>(base)),
          grid_(tokens * length, static_cast<Digit>(base)) {}

    MaskedSeq(std::size_t tokens, std::size_t length, std::uint64_t base, std::vector<Digit> grid)
        : tokens_(tokens), length_(length), mask_(static_cast<Digit>(base)), grid_(std::move(grid)) {
        if (grid_.size() != tokens * length) throw std::invalid_argument("grid size does not match L × ℓ");
        for (Digit d : grid_)
            if (d > mask_) throw std::invalid_argument("grid entry exceeds mask sentinel");
    }

    static MaskedSeq all_masked(const SubTokenCodec& codec, std::size_t tokens) {
        return MaskedSeq(tokens, codec.length(), codec.base());
    }

    std::size_t tokens() const noexcept { return tokens_; }
    std::size_t length() const noexcept { return length_; }
    std::size_t size() const noexcept { return grid_.size(); }
    Digit mask() const noexcept { return mask_; }

    Digit at(std::size_t i, std::size_t j) const { return grid_[i * length_ + j]; }
    Digit& at(std::size_t i, std::size_t j) { return grid_[i * length_ + j]; }
    bool is_masked(std::size_t i, std::size_t j) const { return at(i, j) == mask_; }

    std::span<const Digit> row(std::size_t i) const { return {grid_.data() + i * length_, length_}; }
    std::span<Digit> row(std::size_t i) { return {grid_.data() + i * length_, length_}; }
    std::span<const Digit> entries() const noexcept { return grid_; }
    std::span<Digit> entries() noexcept { return grid_; }

    std::size_t masked_count() const { return static_cast<std::size_t>(std::count(grid_.begin(), grid_.end(), mask_)); }

    TokenState state(std::size_t i) const {
        std::size_t m = 0;
        for (Digit d : row(i)) m += (d == mask_);
        if (m == 0) return TokenState::unmasked;
        if (m == length_) return TokenState::masked;
        return TokenState::intermediate;
    }

    friend bool operator==(const MaskedSeq&, const MaskedSeq&) = default;

private:
    std::size_t tokens_ = 0;
    std::size_t length_ = 0;
    Digit mask_ = 0;
    std::vector<Digit> grid_;
};

/// Clean sequence y_0 = f(x_0): every row is a valid code.
class CleanSeq {
public:
    CleanSeq() = default;

    CleanSeq(const SubTokenCodec& codec, std::span<const Token> tokens)
        : length_(codec.length()), base_(codec.base()), tokens_(tokens.begin(), tokens.end()),
          grid_(tokens.size() * codec.length()) {
        for (std::size_t i = 0; i < tokens.size(); ++i)
            codec.encode_into(tokens[i], std::span<Digit>(grid_.data() + i * length_, length_));
    }

    /// From a digit grid; throws InvalidCode if a row is not in f(X).
    static CleanSeq from_grid(const SubTokenCodec& codec, std::span<const Digit> grid) {
        const std::size_t l = codec.length();
        if (grid.size() % l != 0) throw std::invalid_argument("grid size is not a multiple of ℓ");
        std::vector<Token> toks(grid.size() / l);
        for (std::size_t i = 0; i < toks.size(); ++i) toks[i] = codec.decode(grid.subspan(i * l, l));
        return CleanSeq(codec, toks);
    }

    std::size_t tokens() const noexcept { return tokens_.size(); }
    std::size_t length() const noexcept { return length_; }
    std::span<const Token> token_values() const noexcept { return tokens_; }
    Digit at(std::size_t i, std::size_t j) const { return grid_[i * length_ + j]; }
    std::span<const Digit> row(std::size_t i) const { return {grid_.data() + i * length_, length_}; }
    std::span<const Digit> entries() const noexcept { return grid_; }

    MaskedSeq as_masked() const { return MaskedSeq(tokens_.size(), length_, base_, grid_); }

private:
    std::size_t length_ = 0;
    std::uint64_t base_ = 0;
    std::vector<Token> tokens_;
    std::vector<Digit> grid_;
};

/// q(y_t | y_0): each entry independently survives with probability α_t.
/// Consumes one uniform per entry, row-major; an entry survives iff u < α_t.
inline MaskedSeq forward_sample(const CleanSeq& y0, double t, const Schedule& sch, Rng& rng) {
    const double keep = sch.alpha(t);
    MaskedSeq out = y0.as_masked();
    for (Digit& d : out.entries())
        if (!(uniform01(rng) < keep)) d = out.mask();
    return out;
}

inline double unmask_probability(const Schedule& sch, double s, double t) {
    const double at = sch.alpha(t);
    if (at >= 1.0) return 0.0;
    return std::clamp((sch.alpha(s) - at) / (1.0 - at), 0.0, 1.0);
}

/// q(y_s | y_t, y_0 = y0_hat): unmasked entries are copied; each masked entry
/// takes y0_hat's value with probability (α_s - α_t)/(1 - α_t). One uniform is
/// consumed per masked entry, row-major.
inline MaskedSeq posterior_step(const MaskedSeq& yt, const CleanSeq& y0_hat, double s, double t, const Schedule& sch,
                                Rng& rng) {
    if (!(s >= 0.0 && s < t && t <= 1.0)) throw std::invalid_argument("posterior_step requires 0 <= s < t <= 1");
    if (y0_hat.tokens() != yt.tokens() || y0_hat.length() != yt.length())
        throw std::invalid_argument("posterior_step: shape mismatch");
    MaskedSeq out = yt;
    auto src = y0_hat.entries();
    auto dst = out.entries();
    for (std::size_t e = 0; e < dst.size(); ++e)
        if (dst[e] != out.mask() && dst[e] != src[e])
            throw std::invalid_argument("posterior_step: y0_hat disagrees with an unmasked entry at index " +
                                        std::to_string(e));
    const double p = unmask_probability(sch, s, t);
    for (std::size_t e = 0; e < dst.size(); ++e)
        if (dst[e] == out.mask() && uniform01(rng) < p) dst[e] = src[e];
    return out;
}

/// q(y_t | y_s): the mask is absorbing; other entries become masked with
/// probability (α_s - α_t)/α_s. One uniform per unmasked entry, row-major.
inline MaskedSeq transition_sample(const MaskedSeq& ys, double s, double t, const Schedule& sch, Rng& rng) {
    if (!(s <= t)) throw std::invalid_argument("transition_sample requires s <= t");
    const double as = sch.alpha(s);
    const double p = as > 0.0 ? std::clamp((as - sch.alpha(t)) / as, 0.0, 1.0) : 0.0;
    MaskedSeq out = ys;
    for (Digit& d : out.entries())
        if (d != out.mask() && uniform01(rng) < p) d = out.mask();
    return out;
}

}  // namespace prime
