#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <numeric>
#include <vector>

#include "prime/data.hpp"
#include "prime/trainer.hpp"

using namespace prime;

namespace {

NetConfig small_config(const SubTokenCodec& codec, std::size_t tokens, Head head = Head::joint) {
    return NetConfig::for_codec(codec, tokens, /*embed_dim=*/codec.length() * 4, /*hidden=*/32, /*num_layers=*/3, head);
}

std::vector<CleanSeq> random_batch(const SubTokenCodec& codec, std::size_t tokens, std::size_t B, Rng& rng) {
    std::vector<CleanSeq> out;
    for (std::size_t b = 0; b < B; ++b) {
        std::vector<Token> t(tokens);
        for (auto& x : t) x = Token{static_cast<std::uint32_t>(rng() % codec.num_classes())};
        out.emplace_back(codec, t);
    }
    return out;
}

DataSampler uniform_data(std::uint64_t C, std::size_t tokens) {
    return [C, tokens](Rng& rng) {
        std::vector<Token> t(tokens);
        for (auto& x : t) x = Token{static_cast<std::uint32_t>(rng() % C)};
        return t;
    };
}

template <class Scalar>
Mlp<Scalar> zero_output(const NetConfig& c, Rng& rng) {
    auto net = Mlp<Scalar>::init(c, rng);
    net.weight(c.num_layers - 1).setZero();
    return net;
}

double log_softmax_at(std::span<const double> logits, std::size_t k) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double v : logits) z += std::exp(v - mx);
    return logits[k] - mx - std::log(z);
}

// Plain masked-diffusion loss for ℓ = 1, written from scratch against the
// network's raw logits: draw t, mask each token with probability 1 - α_t,
// sum -log softmax over the masked positions, weight by -α'/(1-α).
double reference_mdm_loss(const Mlp<double>& net, std::span<const Token> x0, const Schedule& sch, double t_min,
                          Rng& rng) {
    const std::size_t C = net.config().classes, L = x0.size();
    const double t = t_min + (1.0 - t_min) * uniform01(rng);
    const double a = sch.alpha(t);
    std::vector<Digit> xt(L);
    for (std::size_t i = 0; i < L; ++i) xt[i] = uniform01(rng) < a ? static_cast<Digit>(x0[i].value) : static_cast<Digit>(C);
    const auto logits = net.logits(MaskedSeq(L, 1, static_cast<Digit>(C), xt));
    double nll = 0.0;
    for (std::size_t i = 0; i < L; ++i)
        if (xt[i] == C) nll -= log_softmax_at(std::span<const double>(logits).subspan(i * C, C), x0[i].value);
    return -sch.alpha_prime(t) / (1.0 - a) * nll;
}

}  // namespace

TEST(TrainConfig, Validation) {
    TrainConfig c;
    EXPECT_NO_THROW(c.validate());
    c.batch_size = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = {};
    c.learning_rate = -1;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = {};
    c.t_min = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(SequenceNll, FullyUnmaskedIsZero) {
    const auto codec = make_codec(16, 2);
    const FilterTable filters(codec);
    Rng rng(1);
    const auto net = Mlp<double>::init(small_config(codec, 3), rng);
    const auto y0 = random_batch(codec, 3, 1, rng)[0];
    const CleanSeq* p = &y0;
    for (bool carry : {true, false})
        EXPECT_EQ(sequence_nll(net, codec, filters, y0.entries(), std::span(&p, 1), carry)[0], 0.0);
}

TEST(SequenceNll, AllMaskedUniformLogitsGivesLogC) {
    const auto codec = make_codec(4, 2);
    const FilterTable filters(codec);
    Rng rng(2);
    const auto net = zero_output<double>(small_config(codec, 2), rng);
    const CleanSeq y0(codec, std::vector<Token>{Token{1}, Token{3}});
    const auto all = MaskedSeq::all_masked(codec, 2);
    const CleanSeq* p = &y0;
    EXPECT_NEAR(sequence_nll(net, codec, filters, all.entries(), std::span(&p, 1))[0], 2 * std::log(4.0), 1e-12);
}

TEST(SequenceNll, CarryOverShrinksSupport) {
    // C = 7, ℓ = 3: (1, m, m) admits codes {4, 5, 6}; without carry-over all 7 compete.
    const auto codec = make_codec(7, 3);
    const FilterTable filters(codec);
    Rng rng(3);
    const auto net = zero_output<double>(small_config(codec, 1), rng);
    const CleanSeq y0(codec, std::vector<Token>{Token{5}});
    const std::vector<Digit> g{1, 2, 2};
    const CleanSeq* p = &y0;
    EXPECT_NEAR(sequence_nll(net, codec, filters, g, std::span(&p, 1), true)[0], std::log(3.0), 1e-12);
    EXPECT_NEAR(sequence_nll(net, codec, filters, g, std::span(&p, 1), false)[0], std::log(7.0), 1e-12);
}

TEST(SequenceNll, IndependentHeadUniformLogits) {
    const auto codec = make_codec(16, 2);
    const FilterTable filters(codec);
    Rng rng(4);
    const auto net = zero_output<double>(small_config(codec, 1, Head::independent), rng);
    const CleanSeq y0(codec, std::vector<Token>{Token{9}});
    const std::vector<Digit> g{2, 4};
    const CleanSeq* p = &y0;
    EXPECT_NEAR(sequence_nll(net, codec, filters, g, std::span(&p, 1), true)[0], std::log(4.0), 1e-12);
    EXPECT_NEAR(sequence_nll(net, codec, filters, g, std::span(&p, 1), false)[0], 2 * std::log(4.0), 1e-12);
}

TEST(BatchLoss, StratifiesTime) {
    const auto codec = make_codec(16, 2);
    const FilterTable filters(codec);
    Rng rng(5);
    const auto net = Mlp<double>::init(small_config(codec, 2), rng);
    const auto batch = random_batch(codec, 2, 8, rng);
    TrainConfig cfg;
    const auto rep = batch_loss(net, codec, filters, std::span<const CleanSeq>(batch), Schedule::linear(), rng, cfg);
    ASSERT_EQ(rep.times.size(), 8u);
    for (std::size_t b = 0; b < 8; ++b) {
        const double lo = cfg.t_min + (1 - cfg.t_min) * b / 8.0, hi = cfg.t_min + (1 - cfg.t_min) * (b + 1) / 8.0;
        EXPECT_GE(rep.times[b], lo);
        EXPECT_LT(rep.times[b], hi);
    }
    EXPECT_NEAR(std::accumulate(rep.per_token.begin(), rep.per_token.end(), 0.0), rep.loss_value, 1e-9);
    EXPECT_GE(rep.loss_value, 0.0);
}

TEST(BatchLoss, LengthOneMatchesReferenceMaskedDiffusion) {
    for (const auto& sch : {Schedule::linear(), Schedule::polynomial(3)}) {
        const auto codec = make_codec(10, 1);
        const FilterTable filters(codec);
        Rng init(6);
        const auto net = Mlp<double>::init(NetConfig::for_codec(codec, 5, 8, 32, 3), init);
        TrainConfig cfg;
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            Rng data(100 + seed);
            const auto y0 = random_batch(codec, 5, 1, data)[0];
            Rng a(seed), b(seed);
            const double got = loss_estimate(net, codec, filters, y0, sch, a, cfg).loss_value;
            const double want = reference_mdm_loss(net, y0.token_values(), sch, cfg.t_min, b);
            EXPECT_NEAR(got, want, 1e-10 * std::max(1.0, std::abs(want)));
        }
    }
}

class LossGradient : public ::testing::TestWithParam<std::tuple<Head, bool>> {};

TEST_P(LossGradient, MatchesFiniteDifferences) {
    const auto [head, carry] = GetParam();
    const auto codec = make_codec(7, 3);
    const FilterTable filters(codec);
    Rng init(7);
    auto net = Mlp<double>::init(NetConfig::for_codec(codec, 2, 6, 12, 3, head), init);
    const auto batch = random_batch(codec, 2, 6, init);
    TrainConfig cfg;
    cfg.carryover_in_train = carry;
    const auto sch = Schedule::polynomial(2);
    auto loss = [&] {
        Rng r(77);
        return batch_loss(net, codec, filters, std::span<const CleanSeq>(batch), sch, r, cfg).loss_value;
    };
    std::vector<double> grad(net.param_count());
    {
        Rng r(77);
        batch_loss(net, codec, filters, std::span<const CleanSeq>(batch), sch, r, cfg, std::span<double>(grad));
    }
    const double h = 1e-5;  // central differences; smaller steps are dominated by rounding
    double worst = 0.0;
    for (std::size_t i = 0; i < net.param_count(); ++i) {
        const double keep = net.params()[i];
        net.params()[i] = keep + h;
        const double fp = loss();
        net.params()[i] = keep - h;
        const double fm = loss();
        net.params()[i] = keep;
        const double fd = (fp - fm) / (2 * h);
        worst = std::max(worst, std::abs(fd - grad[i]) / std::max(1e-5, std::abs(fd) + std::abs(grad[i])));
    }
    EXPECT_LT(worst, 1e-5);
}

INSTANTIATE_TEST_SUITE_P(HeadsAndCarry, LossGradient,
                         ::testing::Combine(::testing::Values(Head::joint, Head::independent), ::testing::Bool()));

TEST(TrainStep, ZeroLearningRateLeavesParametersUnchanged) {
    const auto codec = make_codec(16, 2);
    const FilterTable filters(codec);
    Rng rng(8);
    auto net = Mlp<float>::init(small_config(codec, 2), rng);
    const std::vector<float> before(net.params().begin(), net.params().end());
    const auto batch = random_batch(codec, 2, 16, rng);
    TrainConfig cfg;
    cfg.learning_rate = 0.0;
    AdamState<float> opt(net.param_count());
    for (int s = 0; s < 3; ++s) train_step(net, codec, filters, std::span<const CleanSeq>(batch), Schedule::linear(), opt, cfg, rng);
    EXPECT_TRUE(std::equal(before.begin(), before.end(), net.params().begin()));
}

TEST(TrainStep, SameSeedGivesIdenticalTrajectories) {
    const auto codec = make_codec(16, 2);
    const FilterTable filters(codec);
    auto run = [&] {
        Rng rng(9);
        auto net = Mlp<float>::init(small_config(codec, 2), rng);
        AdamState<float> opt(net.param_count());
        TrainConfig cfg;
        std::vector<double> losses;
        for (int s = 0; s < 5; ++s) {
            const auto batch = random_batch(codec, 2, 32, rng);
            losses.push_back(
                train_step(net, codec, filters, std::span<const CleanSeq>(batch), Schedule::linear(), opt, cfg, rng)
                    .loss_value);
        }
        return std::make_pair(losses, std::vector<float>(net.params().begin(), net.params().end()));
    };
    const auto a = run(), b = run();
    EXPECT_EQ(a.first, b.first);
    EXPECT_EQ(a.second, b.second);
}

TEST(TrainStep, NanGuardThrowsBeforeUpdating) {
    const auto codec = make_codec(16, 2);
    const FilterTable filters(codec);
    Rng rng(10);
    auto net = Mlp<double>::init(small_config(codec, 2), rng);
    net.bias(0)(0, 0) = std::numeric_limits<double>::quiet_NaN();
    const std::vector<double> before(net.params().begin(), net.params().end());
    const auto batch = random_batch(codec, 2, 4, rng);
    AdamState<double> opt(net.param_count());
    EXPECT_THROW(train_step(net, codec, filters, std::span<const CleanSeq>(batch), Schedule::linear(), opt, TrainConfig{}, rng),
                 NumericError);
    for (std::size_t i = 0; i < before.size(); ++i)
        if (!std::isnan(before[i])) {
            EXPECT_EQ(net.params()[i], before[i]);
        }
    EXPECT_EQ(opt.step, 0u);
}

TEST(TrainStep, LossDecreasesOnGaussianMixture) {
    const auto codec = make_codec(64, 2);
    const FilterTable filters(codec);
    const auto density = builtin_density("gaussians", 64);
    const CellSampler cells(density);
    Rng rng(11);
    auto net = Mlp<float>::init(NetConfig::for_codec(codec, 2, 16, 128, 3), rng);
    AdamState<float> opt(net.param_count());
    TrainConfig cfg;
    cfg.batch_size = 256;
    std::vector<double> losses;
    for (int s = 0; s < 500; ++s) {
        std::vector<CleanSeq> batch;
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            const auto cell = cells(rng);
            batch.emplace_back(codec, cell);
        }
        losses.push_back(
            train_step(net, codec, filters, std::span<const CleanSeq>(batch), Schedule::linear(), opt, cfg, rng)
                .loss_value);
    }
    const double first = std::accumulate(losses.begin(), losses.begin() + 20, 0.0) / 20;
    const double last = std::accumulate(losses.end() - 20, losses.end(), 0.0) / 20;
    EXPECT_LT(last, first - 0.5) << first << " -> " << last;
    EXPECT_LT(last, 2 * std::log(64.0));
}

TEST(EvalNll, UniformModelGivesLogC) {
    for (auto [C, l] : {std::pair<std::uint64_t, std::size_t>{16, 2}, {64, 2}, {8, 3}, {10, 1}}) {
        const auto codec = make_codec(C, l);
        const FilterTable filters(codec);
        Rng rng(12);
        const auto net = zero_output<double>(small_config(codec, 2), rng);
        const auto rep = eval_nll(net, codec, filters, uniform_data(C, 2), Schedule::linear(), 10000, rng);
        EXPECT_NEAR(rep.nats_per_token, std::log(static_cast<double>(C)), 1e-3) << C << "," << l;
        EXPECT_NEAR(rep.perplexity, static_cast<double>(C), 1e-2);
    }
}

TEST(EvalNll, TimeStratificationAgreesWithinError) {
    const auto codec = make_codec(16, 2);
    const FilterTable filters(codec);
    Rng rng(13);
    const auto net = zero_output<double>(small_config(codec, 2), rng);
    NllOptions opt;
    opt.stratification = NllStratification::time;
    const auto rep = eval_nll(net, codec, filters, uniform_data(16, 2), Schedule::linear(), 20000, rng, opt);
    ASSERT_TRUE(std::isfinite(rep.std_error));
    // The clamp at t_min removes a sliver of the integral, so the estimate sits just below ln C.
    EXPECT_NEAR(rep.nats_per_token, std::log(16.0), 4 * rep.std_error + 2e-3);
}

TEST(EvalNll, StandardErrorShrinksWithDraws) {
    const auto codec = make_codec(16, 2);
    const FilterTable filters(codec);
    Rng init(14);
    const auto net = Mlp<double>::init(small_config(codec, 2), init);
    NllOptions opt;
    opt.stratification = NllStratification::time;
    Rng a(15), b(16);
    const auto small = eval_nll(net, codec, filters, uniform_data(16, 2), Schedule::linear(), 1000, a, opt);
    const auto large = eval_nll(net, codec, filters, uniform_data(16, 2), Schedule::linear(), 10000, b, opt);
    const double ratio = small.std_error / large.std_error;
    EXPECT_GT(ratio, std::sqrt(10.0) * 0.75);
    EXPECT_LT(ratio, std::sqrt(10.0) * 1.3);
    Rng c(17);
    EXPECT_TRUE(std::isnan(eval_nll(net, codec, filters, uniform_data(16, 2), Schedule::linear(), 1, c).std_error));
}

TEST(EvalNll, RejectsBadArguments) {
    const auto codec = make_codec(16, 2);
    const FilterTable filters(codec);
    Rng rng(18);
    const auto net = Mlp<double>::init(small_config(codec, 2), rng);
    EXPECT_THROW(eval_nll(net, codec, filters, uniform_data(16, 2), Schedule::linear(), 0, rng), std::invalid_argument);
    EXPECT_THROW(eval_nll(net, codec, filters, uniform_data(16, 3), Schedule::linear(), 4, rng), std::invalid_argument);
}

TEST(ExactBound, MatchesMonteCarlo) {
    const auto codec = make_codec(8, 3);
    const FilterTable filters(codec);
    Rng rng(19);
    auto net = Mlp<double>::init(small_config(codec, 2), rng);
    for (auto& p : net.params()) p *= 2.0;
    const CleanSeq y0(codec, std::vector<Token>{Token{3}, Token{6}});
    const double exact = exact_nll_bound(net, codec, filters, y0);
    for (auto strat : {NllStratification::mask_count, NllStratification::time}) {
        NllOptions opt;
        opt.stratification = strat;
        opt.t_min = 1e-6;
        const auto rep = eval_nll(net, codec, filters, [&](Rng&) { return std::vector<Token>{Token{3}, Token{6}}; },
                                  Schedule::polynomial(2), 40000, rng, opt);
        EXPECT_NEAR(rep.bound, exact, 4 * rep.std_error * 2 + 1e-3);
    }
}

// The reverse process reveals one masked sub-token at a time, in uniformly
// random order, with the value drawn from the model's marginal at that
// position. With n = 3 sub-tokens its likelihood is an average over the
// 3! orders.
TEST(ExactBound, UpperBoundsModelLikelihood) {
    const auto codec = make_codec(8, 3);
    const FilterTable filters(codec);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(20 + seed);
        auto net = Mlp<double>::init(small_config(codec, 1), rng);
        for (auto& p : net.params()) p *= 1.5;
        double expected_nll = 0.0, expected_bound = 0.0;
        for (std::uint32_t x = 0; x < 8; ++x) {
            const CleanSeq y0(codec, std::vector<Token>{Token{x}});
            std::array<std::size_t, 3> order{0, 1, 2};
            double lik = 0.0;
            do {
                std::vector<Digit> g(3, codec.mask_digit());
                double p = 1.0;
                for (std::size_t j : order) {
                    const auto logits = net.logits(MaskedSeq(1, 3, codec.base(), g));
                    const auto dist = filtered_softmax<double>(logits, filters.valid_set(g));
                    p *= marginal(dist, codec, j)[y0.row(0)[j]];
                    g[j] = y0.row(0)[j];
                }
                lik += p / 6.0;
            } while (std::next_permutation(order.begin(), order.end()));
            expected_nll -= std::log(lik) / 8.0;
            expected_bound += exact_nll_bound(net, codec, filters, y0) / 8.0;
        }
        EXPECT_GE(expected_bound, expected_nll - 1e-12) << "seed " << seed;
    }
}

// The per-token objective scores a partially masked token once, jointly,
// where the sub-token reverse process pays for each masked digit. With two
// perfectly correlated digits the two disagree by a factor of two: the
// objective gives ln2/2 while the model's likelihood is ln2.
TEST(ExactBound, CorrelatedDigitsFallBelowModelLikelihood) {
    const auto codec = make_codec(4, 2);
    const FilterTable filters(codec);
    Rng rng(31);
    auto net = zero_output<double>(small_config(codec, 1), rng);
    const std::size_t last = net.config().num_layers - 1;
    net.bias(last)(1, 0) = -60.0;  // only codes 00 and 11 keep mass
    net.bias(last)(2, 0) = -60.0;
    const CleanSeq y0(codec, std::vector<Token>{Token{0}});
    EXPECT_NEAR(exact_nll_bound(net, codec, filters, y0), std::log(2.0) / 2, 1e-12);
    // Either reveal order: the first digit costs ln2, the second is then certain.
    std::vector<Digit> g(2, codec.mask_digit());
    const auto dist = filtered_softmax<double>(net.logits(MaskedSeq(1, 2, codec.base(), g)), filters.valid_set(g));
    EXPECT_NEAR(-std::log(marginal(dist, codec, 0)[0]), std::log(2.0), 1e-12);
}

TEST(ExactBound, LengthOneMatchesQuadratureOfTimeIntegral) {
    // Σ over mask patterns of P(pattern | t) · (-α'/(1-α)) · nll, integrated over t by
    // Gauss–Legendre; for polynomial schedules the integrand is a polynomial in t.
    const auto codec = make_codec(6, 1);
    const FilterTable filters(codec);
    Rng rng(30);
    const auto net = Mlp<double>::init(NetConfig::for_codec(codec, 4, 8, 16, 3), rng);
    const CleanSeq y0(codec, std::vector<Token>{Token{0}, Token{5}, Token{2}, Token{2}});
    const std::size_t n = 4;
    std::vector<double> nll(1u << n);
    for (std::size_t bits = 1; bits < nll.size(); ++bits) {
        std::vector<Digit> g(y0.entries().begin(), y0.entries().end());
        for (std::size_t e = 0; e < n; ++e)
            if ((bits >> e) & 1u) g[e] = codec.mask_digit();
        const auto logits = net.logits(MaskedSeq(n, 1, codec.base(), g));
        for (std::size_t e = 0; e < n; ++e)
            if ((bits >> e) & 1u)
                nll[bits] -= log_softmax_at(std::span<const double>(logits).subspan(e * 6, 6), y0.token_values()[e].value);
    }
    // 8-point Gauss–Legendre on [-1, 1]: exact to degree 15.
    const double x[4] = {0.1834346424956498, 0.5255324099163290, 0.7966664774136267, 0.9602898564975363};
    const double w[4] = {0.3626837833783620, 0.3137066458778873, 0.2223810344533745, 0.1012285362903763};
    for (const auto& sch : {Schedule::linear(), Schedule::polynomial(2)}) {
        double integral = 0.0;
        for (int i = 0; i < 4; ++i)
            for (double sgn : {-1.0, 1.0}) {
                const double t = 0.5 * (1 + sgn * x[i]);
                const double a = sch.alpha(t), da = sch.alpha_prime(t);
                double f = 0.0;
                for (std::size_t bits = 1; bits < nll.size(); ++bits) {
                    const int k = std::popcount(bits);
                    // P(pattern)/(1-α) = (1-α)^(k-1) α^(n-k)
                    f += std::pow(1 - a, k - 1) * std::pow(a, static_cast<int>(n) - k) * nll[bits];
                }
                integral += 0.5 * w[i] * (-da) * f;
            }
        EXPECT_NEAR(exact_nll_bound(net, codec, filters, y0), integral, 1e-10 * integral);
    }
}
