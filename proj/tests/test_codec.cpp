#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>
#include <set>
#include <vector>

#include "prime/codec.hpp"

using namespace prime;

namespace {

std::vector<Digit> digits(std::initializer_list<Digit> d) { return d; }

}  // namespace

TEST(Codec, SmallestBase) {
    EXPECT_EQ(make_codec(4, 2).base(), 2u);
    EXPECT_EQ(make_codec(50257, 4).base(), 15u);
    EXPECT_EQ(make_codec(7, 1).base(), 7u);
    EXPECT_EQ(make_codec(7, 3).base(), 2u);
    EXPECT_EQ(make_codec(256, 2).base(), 16u);
    EXPECT_EQ(make_codec(257, 2).base(), 17u);
}

TEST(Codec, BaseIsMinimalOverGrid) {
    for (std::uint64_t C = 2; C <= 300; ++C)
        for (std::size_t l = 1; l <= 8; ++l) {
            const auto b = SubTokenCodec::smallest_base(C, l);
            EXPECT_GE(std::pow(static_cast<double>(b), static_cast<double>(l)), static_cast<double>(C));
            EXPECT_LT(std::pow(static_cast<double>(b - 1), static_cast<double>(l)), static_cast<double>(C))
                << "C=" << C << " l=" << l;
        }
}

TEST(Codec, LargeClassCountUsesExactIntegerSearch) {
    // 65535² = 4294836225
    EXPECT_EQ(SubTokenCodec::smallest_base(4294836225ull, 2), 65535u);
    EXPECT_EQ(SubTokenCodec::smallest_base(4294836226ull, 2), 65536u);
    EXPECT_EQ(SubTokenCodec::smallest_base(4294967295ull, 2), 65536u);
}

TEST(Codec, RejectsBadArguments) {
    EXPECT_THROW(make_codec(1, 2), std::invalid_argument);
    EXPECT_THROW(make_codec(4, 0), std::invalid_argument);
}

TEST(Codec, EncodeExamples) {
    EXPECT_EQ(make_codec(4, 2).encode(Token{3}), digits({1, 1}));
    EXPECT_EQ(make_codec(7, 3).encode(Token{0}), digits({0, 0, 0}));
    EXPECT_EQ(make_codec(256, 2).encode(Token{255}), digits({15, 15}));
    EXPECT_EQ(make_codec(7, 3).encode(Token{6}), digits({1, 1, 0}));
    EXPECT_THROW(make_codec(7, 3).encode(Token{7}), std::out_of_range);
}

TEST(Codec, DecodeExamples) {
    EXPECT_EQ(make_codec(4, 2).decode(digits({1, 0})).value, 2u);
    EXPECT_THROW(make_codec(7, 3).decode(digits({1, 1, 1})), InvalidCode);
    const auto gpt2 = make_codec(50257, 4);
    ASSERT_EQ(gpt2.base(), 15u);
    try {
        gpt2.decode(digits({14, 14, 14, 14}));
        FAIL() << "expected InvalidCode";
    } catch (const InvalidCode& e) {
        EXPECT_EQ(e.positional(), 50624u);
    }
}

TEST(Codec, DecodeRejectsOutOfRangeDigits) {
    EXPECT_THROW(make_codec(7, 3).decode(digits({2, 0, 0})), std::invalid_argument);
    EXPECT_THROW(make_codec(7, 3).decode(digits({0, 0})), std::invalid_argument);
}

TEST(Codec, RoundTripExhaustive) {
    for (std::uint64_t C : {2ull, 3ull, 7ull, 16ull, 100ull, 256ull, 1000ull, 65536ull})
        for (std::size_t l : {1u, 2u, 3u, 5u}) {
            const auto codec = make_codec(C, l);
            for (std::uint64_t x = 0; x < C; ++x)
                ASSERT_EQ(codec.decode(codec.encode(Token{static_cast<std::uint32_t>(x)})).value, x);
        }
}

TEST(Codec, RoundTripSampledLargeC) {
    const auto codec = make_codec(50257, 4);
    for (std::uint32_t x = 0; x < 50257; x += 97) ASSERT_EQ(codec.decode(codec.encode(Token{x})).value, x);
    EXPECT_EQ(codec.decode(codec.encode(Token{50256})).value, 50256u);
}

TEST(Codec, InjectiveAndOrdered) {
    const auto codec = make_codec(100, 3);
    std::set<std::vector<Digit>> seen;
    for (std::uint32_t x = 0; x < 100; ++x) {
        auto d = codec.encode(Token{x});
        for (Digit v : d) EXPECT_LT(v, codec.base());
        EXPECT_TRUE(seen.insert(d).second);
        // valid_codes row x equals encode(x)
        auto row = codec.valid_codes().subspan(x * 3, 3);
        EXPECT_EQ(std::vector<Digit>(row.begin(), row.end()), d);
    }
    EXPECT_EQ(seen.size(), 100u);
}

TEST(Codec, OnDemandAboveMaterializeCap) {
    const SubTokenCodec small_cap(1000, 3, 10);
    EXPECT_FALSE(small_cap.materialized());
    const SubTokenCodec full(1000, 3);
    EXPECT_TRUE(full.materialized());
    for (std::uint64_t c = 0; c < 1000; ++c)
        for (std::size_t j = 0; j < 3; ++j) ASSERT_EQ(small_cap.digit(c, j), full.digit(c, j));
}

TEST(Codec, IdentityAtLengthOne) {
    const auto codec = make_codec(7, 1);
    for (std::uint32_t x = 0; x < 7; ++x) EXPECT_EQ(codec.encode(Token{x}), digits({x}));
    EXPECT_EQ(codec.intermediate_state_count(), 0u);
}

TEST(Codec, IntermediateStateCounts) {
    EXPECT_EQ(make_codec(256, 2).intermediate_state_count(), 32u);
    EXPECT_EQ(make_codec(256, 4).intermediate_state_count(), 368u);
    EXPECT_EQ(make_codec(256, 8).intermediate_state_count(), 6304u);
}

TEST(Codec, IntermediateStatesPositiveForLongerCodes) {
    for (std::uint64_t C = 2; C <= 512; C += 17)
        for (std::size_t l = 2; l <= 9; ++l) EXPECT_GT(make_codec(C, l).intermediate_state_count(), 0u);
}

TEST(Codec, IntermediateStatesMatchEnumeration) {
    // Enumerate {0..b-1, m}^ℓ and drop the C valid codes and the all-mask grid.
    for (auto [C, l] : {std::pair<std::uint64_t, std::size_t>{7, 3}, {10, 2}, {16, 4}, {27, 3}, {256, 2}}) {
        const auto codec = make_codec(C, l);
        const std::uint64_t b = codec.base();
        std::uint64_t states = 1;
        for (std::size_t j = 0; j < l; ++j) states *= b + 1;
        std::uint64_t count = 0;
        std::vector<Digit> e(l);
        for (std::uint64_t s = 0; s < states; ++s) {
            std::uint64_t r = s;
            std::size_t masks = 0;
            for (std::size_t j = 0; j < l; ++j) {
                e[j] = static_cast<Digit>(r % (b + 1));
                r /= b + 1;
                masks += e[j] == b;
            }
            if (masks == l) continue;
            if (masks == 0 && codec.is_valid(e)) continue;
            ++count;
        }
        EXPECT_EQ(codec.intermediate_state_count(), count) << C << "," << l;
    }
}

TEST(Codec, IntermediateStateOverflowThrows) {
    EXPECT_THROW(make_codec(4294967295ull, 64).intermediate_state_count(), std::overflow_error);
}
