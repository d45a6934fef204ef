#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace prime {

/// One base-b sub-token. The value `base` is reserved as the mask sentinel in
/// latent grids (see diffusion.hpp).
using Digit = std::uint32_t;

/// A token from the alphabet {0..C-1}.
struct Token {
    std::uint32_t value = 0;
    friend auto operator<=>(const Token&, const Token&) = default;
};

/// Thrown when a digit sequence has positional value >= C, i.e. it lies outside
/// the image of the encoding.
class InvalidCode : public std::runtime_error {
public:
    explicit InvalidCode(std::uint64_t positional)
        : std::runtime_error("sub-token sequence has positional value " + std::to_string(positional) +
                             ", which is not a valid token"),
          positional_(positional) {}
    std::uint64_t positional() const noexcept { return positional_; }

private:
    std::uint64_t positional_;
};

namespace detail {

// base^exp, saturating at UINT64_MAX.
inline std::uint64_t saturating_pow(std::uint64_t base, std::size_t exp) {
    constexpr auto kMax = std::numeric_limits<std::uint64_t>::max();
    std::uint64_t r = 1;
    for (std::size_t i = 0; i < exp; ++i) {
        if (base != 0 && r > kMax / base) return kMax;
        r *= base;
    }
    return r;
}

}  // namespace detail

/// Invertible map between tokens {0..C-1} and length-ℓ base-b digit strings,
/// most-significant digit first, with b the smallest base satisfying b^ℓ >= C.
///
/// Immutable after construction. The table of valid codes is materialized when
/// C is at most `materialize_cap`; above that digits are computed on demand.
class SubTokenCodec {
public:
    static constexpr std::uint64_t kDefaultMaterializeCap = std::uint64_t{1} << 20;

    SubTokenCodec(std::uint64_t num_classes, std::size_t length,
                  std::uint64_t materialize_cap = kDefaultMaterializeCap)
        : num_classes_(num_classes), length_(length) {
        if (num_classes < 2) throw std::invalid_argument("codec needs at least 2 classes");
        if (num_classes > std::numeric_limits<std::uint32_t>::max())
            throw std::invalid_argument("codec supports at most 2^32-1 classes");
        if (length < 1) throw std::invalid_argument("codec length must be at least 1");
        base_ = smallest_base(num_classes, length);
        place_.resize(length_);
        std::uint64_t p = 1;
        for (std::size_t j = length_; j-- > 0;) {
            place_[j] = p;
            if (j > 0) p *= base_;
        }
        if (num_classes_ <= materialize_cap) {
            table_.resize(num_classes_ * length_);
            for (std::uint64_t x = 0; x < num_classes_; ++x)
                encode_into(Token{static_cast<std::uint32_t>(x)},
                            std::span<Digit>(table_.data() + x * length_, length_));
        }
    }

    /// Smallest b with b^length >= num_classes, by integer search.
    static std::uint64_t smallest_base(std::uint64_t num_classes, std::size_t length) {
        std::uint64_t lo = 1, hi = num_classes;  // hi^length >= num_classes always
        while (lo < hi) {
            std::uint64_t mid = lo + (hi - lo) / 2;
            if (detail::saturating_pow(mid, length) >= num_classes) hi = mid;
            else lo = mid + 1;
        }
        return lo;
    }

    std::uint64_t num_classes() const noexcept { return num_classes_; }
    std::size_t length() const noexcept { return length_; }
    std::uint64_t base() const noexcept { return base_; }
    Digit mask_digit() const noexcept { return static_cast<Digit>(base_); }
    bool materialized() const noexcept { return !table_.empty(); }

    void encode_into(Token x, std::span<Digit> out) const {
        if (x.value >= num_classes_)
            throw std::out_of_range("token " + std::to_string(x.value) + " is outside the alphabet of size " +
                                    std::to_string(num_classes_));
        if (out.size() != length_) throw std::invalid_argument("encode: output span has wrong length");
        std::uint64_t v = x.value;
        for (std::size_t j = length_; j-- > 0;) {
            out[j] = static_cast<Digit>(v % base_);
            v /= base_;
        }
    }

    std::vector<Digit> encode(Token x) const {
        std::vector<Digit> out(length_);
        encode_into(x, out);
        return out;
    }

    /// Positional value of a digit string; digits must be < base.
    std::uint64_t positional_value(std::span<const Digit> digits) const {
        if (digits.size() != length_) throw std::invalid_argument("decode: digit string has wrong length");
        std::uint64_t v = 0;
        for (std::size_t j = 0; j < length_; ++j) {
            if (digits[j] >= base_)
                throw std::invalid_argument("digit " + std::to_string(digits[j]) + " is not below base " +
                                            std::to_string(base_));
            v += digits[j] * place_[j];
        }
        return v;
    }

    bool is_valid(std::span<const Digit> digits) const { return positional_value(digits) < num_classes_; }

    Token decode(std::span<const Digit> digits) const {
        const std::uint64_t v = positional_value(digits);
        if (v >= num_classes_) throw InvalidCode(v);
        return Token{static_cast<std::uint32_t>(v)};
    }

    /// Digit at position j of the code for token `code`.
    Digit digit(std::uint64_t code, std::size_t j) const {
        if (!table_.empty()) return table_[code * length_ + j];
        return static_cast<Digit>((code / place_[j]) % base_);
    }

    /// Row-major C × ℓ table of valid codes; empty when not materialized.
    std::span<const Digit> valid_codes() const noexcept { return table_; }

    /// (b+1)^ℓ - (C+1): latent token states that are neither fully masked nor a
    /// clean token. Throws std::overflow_error when it does not fit in 64 bits.
    std::uint64_t intermediate_state_count() const {
        const std::uint64_t all = detail::saturating_pow(base_ + 1, length_);
        if (all == std::numeric_limits<std::uint64_t>::max())
            throw std::overflow_error("intermediate state count overflows 64 bits");
        return all - (num_classes_ + 1);
    }

private:
    std::uint64_t num_classes_;
    std::size_t length_;
    std::uint64_t base_ = 0;
    std::vector<std::uint64_t> place_;  // base^(ℓ-1-j)
    std::vector<Digit> table_;
};

inline SubTokenCodec make_codec(std::uint64_t num_classes, std::size_t length) {
    return SubTokenCodec(num_classes, length);
}

}  // namespace prime
