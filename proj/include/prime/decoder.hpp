#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "prime/codec.hpp"
#include "prime/random.hpp"

namespace prime {

/// Fixed-width bitset over the C valid codes.
class CodeMask {
public:
    CodeMask() = default;
    explicit CodeMask(std::size_t size, bool value = false)
        : size_(size), words_((size + 63) / 64, value ? ~std::uint64_t{0} : 0) {
        trim();
    }

    std::size_t size() const noexcept { return size_; }
    bool test(std::size_t c) const { return (words_[c >> 6] >> (c & 63)) & 1u; }
    void set(std::size_t c) { words_[c >> 6] |= std::uint64_t{1} << (c & 63); }
    void reset(std::size_t c) { words_[c >> 6] &= ~(std::uint64_t{1} << (c & 63)); }

    std::size_t count() const {
        std::size_t n = 0;
        for (auto w : words_) n += static_cast<std::size_t>(std::popcount(w));
        return n;
    }
    bool none() const {
        return std::all_of(words_.begin(), words_.end(), [](std::uint64_t w) { return w == 0; });
    }

    CodeMask& operator&=(const CodeMask& o) {
        for (std::size_t w = 0; w < words_.size(); ++w) words_[w] &= o.words_[w];
        return *this;
    }
    std::span<const std::uint64_t> words() const noexcept { return words_; }

    /// Calls f(c) for each set bit in increasing order.
    template <class F>
    void for_each(F&& f) const {
        for (std::size_t w = 0; w < words_.size(); ++w) {
            std::uint64_t bits = words_[w];
            while (bits) {
                const int b = std::countr_zero(bits);
                f(w * 64 + static_cast<std::size_t>(b));
                bits &= bits - 1;
            }
        }
    }

    friend bool operator==(const CodeMask&, const CodeMask&) = default;

private:
    void trim() {
        if (size_ % 64 != 0 && !words_.empty()) words_.back() &= (std::uint64_t{1} << (size_ % 64)) - 1;
    }

    std::size_t size_ = 0;
    std::vector<std::uint64_t> words_;
};

/// Precomputed filters: for each sub-token position j and each value v in
/// {0..b-1} ∪ {m}, the set of valid codes whose digit j equals v (all codes
/// for the mask row).
class FilterTable {
public:
    FilterTable() = default;

    explicit FilterTable(const SubTokenCodec& codec)
        : classes_(codec.num_classes()), length_(codec.length()), base_(codec.base()) {
        rows_.reserve(length_ * (base_ + 1));
        for (std::size_t j = 0; j < length_; ++j) {
            for (std::uint64_t v = 0; v < base_; ++v) rows_.emplace_back(classes_);
            rows_.emplace_back(classes_, true);
            for (std::uint64_t c = 0; c < classes_; ++c) rows_[j * (base_ + 1) + codec.digit(c, j)].set(c);
        }
    }

    std::size_t num_classes() const noexcept { return classes_; }
    std::size_t length() const noexcept { return length_; }
    std::uint64_t base() const noexcept { return base_; }

    const CodeMask& row(std::size_t j, Digit v) const {
        if (j >= length_ || v > base_) throw std::out_of_range("filter row out of range");
        return rows_[j * (base_ + 1) + v];
    }

    /// V(y_t^i): AND of the ℓ rows selected by the entries of one latent token.
    CodeMask valid_set(std::span<const Digit> entries) const {
        if (entries.size() != length_) throw std::invalid_argument("valid_set: wrong number of entries");
        CodeMask out = row(0, entries[0]);
        for (std::size_t j = 1; j < length_; ++j)
            if (entries[j] != base_) out &= row(j, entries[j]);
        return out;
    }

private:
    std::size_t classes_ = 0;
    std::size_t length_ = 0;
    std::uint64_t base_ = 0;
    std::vector<CodeMask> rows_;
};

inline FilterTable build_filter_table(const SubTokenCodec& codec) { return FilterTable(codec); }

class EmptySupport : public std::runtime_error {
public:
    EmptySupport() : std::runtime_error("filtered softmax over an empty support") {}
};

/// p_θ(y_0^i | y_t) over the C valid codes.
struct DecoderDist {
    std::vector<double> probs;
    CodeMask support;
};

/// Softmax over the supported logits, zero elsewhere. Stabilized by
/// subtracting the maximum supported logit.
template <class Scalar>
DecoderDist filtered_softmax(std::span<const Scalar> logits, const CodeMask& support) {
    if (logits.size() != support.size()) throw std::invalid_argument("filtered_softmax: size mismatch");
    if (support.none()) throw EmptySupport();
    double mx = -std::numeric_limits<double>::infinity();
    support.for_each([&](std::size_t c) { mx = std::max(mx, static_cast<double>(logits[c])); });
    DecoderDist d{std::vector<double>(logits.size(), 0.0), support};
    double z = 0.0;
    support.for_each([&](std::size_t c) { z += d.probs[c] = std::exp(static_cast<double>(logits[c]) - mx); });
    support.for_each([&](std::size_t c) { d.probs[c] /= z; });
    return d;
}

inline DecoderDist filtered_softmax(std::span<const double> logits, const CodeMask& support) {
    return filtered_softmax<double>(logits, support);
}

/// Distribution of digit j under a joint code distribution.
inline std::vector<double> marginal(const DecoderDist& dist, const SubTokenCodec& codec, std::size_t j) {
    if (j >= codec.length()) throw std::out_of_range("marginal: position out of range");
    std::vector<double> m(codec.base(), 0.0);
    for (std::size_t c = 0; c < dist.probs.size(); ++c) m[codec.digit(c, j)] += dist.probs[c];
    return m;
}

/// Inverse-CDF categorical draw; consumes exactly one uniform.
inline std::size_t sample_index(std::span<const double> probs, Rng& rng) {
    const double u = uniform01(rng);
    double acc = 0.0;
    std::size_t last = probs.size();
    for (std::size_t c = 0; c < probs.size(); ++c) {
        if (probs[c] <= 0.0) continue;
        acc += probs[c];
        last = c;
        if (u < acc) return c;
    }
    if (last == probs.size()) throw EmptySupport();
    return last;  // rounding: u landed above the accumulated total
}

inline Token sample_code(const DecoderDist& dist, Rng& rng) {
    return Token{static_cast<std::uint32_t>(sample_index(dist.probs, rng))};
}

/// Factorized p(y^i | y_t) = Π_j p(y^{i,j} | y_t), the independent-head
/// alternative. Unmasked digits are point masses; invalid digit strings keep
/// their mass.
class FactorizedDist {
public:
    FactorizedDist(std::size_t length, std::uint64_t base) : length_(length), base_(base), probs_(length * base, 0.0) {}

    std::size_t length() const noexcept { return length_; }
    std::uint64_t base() const noexcept { return base_; }
    std::span<const double> position(std::size_t j) const { return {probs_.data() + j * base_, base_}; }
    std::span<double> position(std::size_t j) { return {probs_.data() + j * base_, base_}; }

    double prob(std::span<const Digit> digits) const {
        double p = 1.0;
        for (std::size_t j = 0; j < length_; ++j) p *= probs_[j * base_ + digits[j]];
        return p;
    }

    /// Mass over all b^ℓ digit strings indexed by positional value.
    std::vector<double> dense() const {
        const std::uint64_t n = detail::saturating_pow(base_, length_);
        if (n > (std::uint64_t{1} << 24)) throw std::length_error("factorized distribution too large to densify");
        std::vector<double> out(n);
        std::vector<Digit> d(length_, 0);
        for (std::uint64_t v = 0; v < n; ++v) {
            std::uint64_t r = v;
            for (std::size_t j = length_; j-- > 0;) {
                d[j] = static_cast<Digit>(r % base_);
                r /= base_;
            }
            out[v] = prob(d);
        }
        return out;
    }

    /// Mass restricted to the C valid codes (unnormalized).
    std::vector<double> on_valid_codes(const SubTokenCodec& codec) const {
        std::vector<double> out(codec.num_classes());
        std::vector<Digit> d(length_);
        for (std::uint64_t c = 0; c < codec.num_classes(); ++c) {
            for (std::size_t j = 0; j < length_; ++j) d[j] = codec.digit(c, j);
            out[c] = prob(d);
        }
        return out;
    }

    double invalid_mass(const SubTokenCodec& codec) const {
        double valid = 0.0;
        for (double p : on_valid_codes(codec)) valid += p;
        return std::max(0.0, 1.0 - valid);
    }

    /// Draws digit strings position by position and rejects invalid ones; after
    /// `max_tries` rejections returns the most probable valid code.
    Token sample(const SubTokenCodec& codec, Rng& rng, int max_tries = 100) const {
        std::vector<Digit> d(length_);
        for (int attempt = 0; attempt < max_tries; ++attempt) {
            for (std::size_t j = 0; j < length_; ++j) d[j] = static_cast<Digit>(sample_index(position(j), rng));
            const std::uint64_t v = codec.positional_value(d);
            if (v < codec.num_classes()) return Token{static_cast<std::uint32_t>(v)};
        }
        const auto valid = on_valid_codes(codec);
        return Token{static_cast<std::uint32_t>(std::max_element(valid.begin(), valid.end()) - valid.begin())};
    }

private:
    std::size_t length_;
    std::uint64_t base_;
    std::vector<double> probs_;
};

/// Independent head: a softmax per position over b digits, with masked
/// positions free and unmasked positions fixed to their observed digit.
/// `logits` holds ℓ consecutive blocks of b values.
template <class Scalar>
FactorizedDist independent_head(std::span<const Scalar> logits, std::span<const Digit> y_ti, std::uint64_t base) {
    const std::size_t length = y_ti.size();
    if (logits.size() != length * base) throw std::invalid_argument("independent_head: expected ℓ × b logits");
    FactorizedDist dist(length, base);
    for (std::size_t j = 0; j < length; ++j) {
        auto p = dist.position(j);
        if (y_ti[j] < base) {
            p[y_ti[j]] = 1.0;
            continue;
        }
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t v = 0; v < base; ++v) mx = std::max(mx, static_cast<double>(logits[j * base + v]));
        double z = 0.0;
        for (std::size_t v = 0; v < base; ++v) z += p[v] = std::exp(static_cast<double>(logits[j * base + v]) - mx);
        for (auto& x : p) x /= z;
    }
    return dist;
}

inline FactorizedDist independent_head(std::span<const double> logits, std::span<const Digit> y_ti,
                                       std::uint64_t base) {
    return independent_head<double>(logits, y_ti, base);
}

}  // namespace prime
