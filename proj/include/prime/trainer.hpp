#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "prime/codec.hpp"
#include "prime/decoder.hpp"
#include "prime/diffusion.hpp"
#include "prime/net.hpp"
#include "prime/random.hpp"
#include "prime/schedule.hpp"

namespace prime {

struct TrainConfig {
    std::size_t batch_size = 4096;
    double learning_rate = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t steps = 1000;
    double t_min = kDefaultTMin;
    bool weighted_loss = true;
    bool carryover_in_train = true;
    std::uint64_t seed = 0;

    void validate() const {
        if (batch_size < 1) throw std::invalid_argument("batch_size must be at least 1");
        if (!(learning_rate >= 0.0)) throw std::invalid_argument("learning_rate must be nonnegative");
        if (!(t_min > 0.0 && t_min < 1.0)) throw std::invalid_argument("t_min must lie in (0, 1)");
        if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0))
            throw std::invalid_argument("Adam betas must lie in [0, 1)");
        if (!(adam_eps > 0.0)) throw std::invalid_argument("adam_eps must be positive");
    }
};

/// Raised by the NaN guard.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct LossReport {
    double loss_value = 0.0;         // mean bound estimate, nats per sequence
    std::vector<double> per_token;   // mean contribution of each token position
    std::size_t masked_positions = 0;  // masked sub-tokens over the whole batch
    double t = 0.0;                  // time drawn for the first example
    std::vector<double> times;       // time drawn for every example
};

namespace detail {

/// -log p(target | y_t^i) for one token given its logits block. When `grad`
/// is non-null, adds scale · d(-log p)/d(logits) into it.
template <class Scalar>
double token_nll(Head head, std::span<const Scalar> logits, std::span<const Digit> yti, Token target,
                 std::span<const Digit> target_digits, const FilterTable& filters, bool carryover, double scale,
                 Scalar* grad) {
    const Digit mask = static_cast<Digit>(filters.base());
    const bool any_masked = std::find(yti.begin(), yti.end(), mask) != yti.end();
    if (!any_masked) return 0.0;  // nothing left to predict for this token
    if (head == Head::joint) {
        CodeMask support = carryover ? filters.valid_set(yti) : CodeMask(filters.num_classes(), true);
        if (support.count() == 1) return 0.0;
        double mx = -std::numeric_limits<double>::infinity();
        support.for_each([&](std::size_t c) { mx = std::max(mx, static_cast<double>(logits[c])); });
        double z = 0.0;
        support.for_each([&](std::size_t c) { z += std::exp(static_cast<double>(logits[c]) - mx); });
        const double lse = mx + std::log(z);
        if (grad) {
            support.for_each([&](std::size_t c) {
                grad[c] += static_cast<Scalar>(scale * std::exp(static_cast<double>(logits[c]) - lse));
            });
            grad[target.value] -= static_cast<Scalar>(scale);
        }
        return lse - static_cast<double>(logits[target.value]);
    }
    const std::size_t b = filters.base();
    double nll = 0.0;
    for (std::size_t j = 0; j < yti.size(); ++j) {
        if (carryover && yti[j] != mask) continue;
        const Scalar* l = logits.data() + j * b;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t v = 0; v < b; ++v) mx = std::max(mx, static_cast<double>(l[v]));
        double z = 0.0;
        for (std::size_t v = 0; v < b; ++v) z += std::exp(static_cast<double>(l[v]) - mx);
        const double lse = mx + std::log(z);
        nll += lse - static_cast<double>(l[target_digits[j]]);
        if (grad) {
            for (std::size_t v = 0; v < b; ++v)
                grad[j * b + v] += static_cast<Scalar>(scale * std::exp(static_cast<double>(l[v]) - lse));
            grad[j * b + target_digits[j]] -= static_cast<Scalar>(scale);
        }
    }
    return nll;
}

template <class Scalar>
void check_shapes(const Mlp<Scalar>& net, const SubTokenCodec& codec) {
    const auto& c = net.config();
    if (c.length != codec.length() || c.base != codec.base() || c.classes != codec.num_classes())
        throw std::invalid_argument("network and codec disagree on (C, ℓ, b)");
}

}  // namespace detail

/// Σ_i -log p_θ(y_0^i | y_t) for each of `batch` latent grids (stored back to
/// back) against their clean sequences.
template <class Scalar>
std::vector<double> sequence_nll(const Mlp<Scalar>& net, const SubTokenCodec& codec, const FilterTable& filters,
                                 std::span<const Digit> grids, std::span<const CleanSeq* const> clean,
                                 bool carryover = true) {
    detail::check_shapes(net, codec);
    typename Mlp<Scalar>::Workspace ws;
    const std::size_t batch = clean.size();
    net.forward(grids, batch, ws);
    const auto& cfg = net.config();
    const std::size_t n = cfg.entries(), l = cfg.length, w = cfg.head_width();
    std::vector<double> out(batch, 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
        const Scalar* col = ws.out.data() + b * cfg.output_dim();
        for (std::size_t i = 0; i < cfg.tokens; ++i)
            out[b] += detail::token_nll<Scalar>(cfg.head, {col + i * w, w}, grids.subspan(b * n + i * l, l),
                                                clean[b]->token_values()[i], clean[b]->row(i), filters, carryover,
                                                0.0, nullptr);
    }
    return out;
}

/// Monte Carlo estimate of the variational bound with its gradient.
///
/// Example b draws t_b = t_min + (1 - t_min)(b + u_b)/B (one stratum per
/// example), then y_t ~ q(·|y_0) via forward_sample. The per-sequence loss is
/// -(α'_t/(1-α_t)) Σ_i log p(y_0^i|y_t) when weighted, plain cross-entropy
/// otherwise. Reports the batch mean; `grad` (if non-empty) receives the
/// gradient of that mean.
template <class Scalar>
LossReport batch_loss(const Mlp<Scalar>& net, const SubTokenCodec& codec, const FilterTable& filters,
                      std::span<const CleanSeq> batch, const Schedule& sch, Rng& rng, const TrainConfig& cfg,
                      std::span<Scalar> grad = {}) {
    detail::check_shapes(net, codec);
    const auto& nc = net.config();
    const std::size_t B = batch.size();
    if (B == 0) throw std::invalid_argument("batch_loss: empty batch");
    const std::size_t n = nc.entries(), l = nc.length, w = nc.head_width();
    LossReport rep;
    rep.per_token.assign(nc.tokens, 0.0);
    rep.times.resize(B);
    std::vector<Digit> grids(B * n);
    for (std::size_t b = 0; b < B; ++b) {
        if (batch[b].tokens() != nc.tokens || batch[b].length() != l)
            throw std::invalid_argument("batch_loss: example shape does not match the network");
        const double u = uniform01(rng);
        const double t = cfg.t_min + (1.0 - cfg.t_min) * (static_cast<double>(b) + u) / static_cast<double>(B);
        rep.times[b] = t;
        const MaskedSeq yt = forward_sample(batch[b], t, sch, rng);
        rep.masked_positions += yt.masked_count();
        std::copy(yt.entries().begin(), yt.entries().end(), grids.begin() + static_cast<std::ptrdiff_t>(b * n));
    }
    rep.t = rep.times[0];

    typename Mlp<Scalar>::Workspace ws;
    net.forward(grids, B, ws);
    const bool want_grad = !grad.empty();
    typename Mlp<Scalar>::Matrix upstream;
    if (want_grad) upstream = Mlp<Scalar>::Matrix::Zero(ws.out.rows(), ws.out.cols());

    double total = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        const double weight = cfg.weighted_loss ? -sch.loss_weight(rep.times[b], cfg.t_min) : 1.0;
        const Scalar* col = ws.out.data() + b * nc.output_dim();
        for (std::size_t i = 0; i < nc.tokens; ++i) {
            Scalar* g = want_grad ? upstream.data() + b * nc.output_dim() + i * w : nullptr;
            const double nll = detail::token_nll<Scalar>(nc.head, {col + i * w, w}, {grids.data() + b * n + i * l, l},
                                                         batch[b].token_values()[i], batch[b].row(i), filters,
                                                         cfg.carryover_in_train, weight / static_cast<double>(B), g);
            total += weight * nll;
            rep.per_token[i] += weight * nll / static_cast<double>(B);
        }
    }
    rep.loss_value = total / static_cast<double>(B);
    if (want_grad) net.backward(grids, ws, upstream, grad);
    return rep;
}

/// Single-sequence bound estimate (one t, one mask draw).
template <class Scalar>
LossReport loss_estimate(const Mlp<Scalar>& net, const SubTokenCodec& codec, const FilterTable& filters,
                         const CleanSeq& y0, const Schedule& sch, Rng& rng, const TrainConfig& cfg) {
    return batch_loss(net, codec, filters, std::span<const CleanSeq>(&y0, 1), sch, rng, cfg);
}

template <class Scalar>
struct AdamState {
    using Vector = typename Mlp<Scalar>::Vector;
    Vector m;
    Vector v;
    std::size_t step = 0;

    explicit AdamState(std::size_t n = 0) : m(Vector::Zero(static_cast<Eigen::Index>(n))), v(m) {}
};

template <class Scalar>
void adam_update(Mlp<Scalar>& net, std::span<const Scalar> grad, AdamState<Scalar>& opt, const TrainConfig& cfg) {
    using Vector = typename Mlp<Scalar>::Vector;
    if (opt.m.size() != static_cast<Eigen::Index>(net.param_count())) opt = AdamState<Scalar>(net.param_count());
    ++opt.step;
    const Eigen::Map<const Vector> g(grad.data(), static_cast<Eigen::Index>(grad.size()));
    const auto b1 = static_cast<Scalar>(cfg.adam_beta1), b2 = static_cast<Scalar>(cfg.adam_beta2);
    opt.m = b1 * opt.m + (Scalar(1) - b1) * g;
    opt.v = b2 * opt.v + (Scalar(1) - b2) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(opt.step));
    const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(opt.step));
    const auto lr = static_cast<Scalar>(cfg.learning_rate / c1);
    const auto eps = static_cast<Scalar>(cfg.adam_eps);
    const auto inv_c2 = static_cast<Scalar>(1.0 / c2);
    if (cfg.learning_rate == 0.0) return;
    net.param_vector().array() -= lr * opt.m.array() / ((opt.v.array() * inv_c2).sqrt() + eps);
}

/// One optimizer step on the mean loss over `batch`. Throws NumericError if
/// the loss or gradient is not finite; parameters are left untouched then.
template <class Scalar>
LossReport train_step(Mlp<Scalar>& net, const SubTokenCodec& codec, const FilterTable& filters,
                      std::span<const CleanSeq> batch, const Schedule& sch, AdamState<Scalar>& opt,
                      const TrainConfig& cfg, Rng& rng) {
    // Eigen storage keeps the buffer packet-aligned, so the vectorized Adam
    // update takes the same path (and rounds the same way) on every run.
    typename Mlp<Scalar>::Vector grad = Mlp<Scalar>::Vector::Zero(static_cast<Eigen::Index>(net.param_count()));
    LossReport rep = batch_loss(net, codec, filters, batch, sch, rng, cfg, std::span<Scalar>(grad.data(), net.param_count()));
    if (!std::isfinite(rep.loss_value))
        throw NumericError("non-finite loss " + std::to_string(rep.loss_value) + " at optimizer step " +
                           std::to_string(opt.step + 1));
    for (Eigen::Index i = 0; i < grad.size(); ++i)
        if (!std::isfinite(static_cast<double>(grad[i])))
            throw NumericError("non-finite gradient in parameter " + std::to_string(i) + " at optimizer step " +
                               std::to_string(opt.step + 1));
    adam_update(net, std::span<const Scalar>(grad.data(), net.param_count()), opt, cfg);
    return rep;
}

/// How eval_nll spreads its Monte Carlo draws.
enum class NllStratification {
    /// Integrates t analytically: with k of the n = L·ℓ sub-tokens masked the
    /// bound weight is 1/k for every schedule, so draws stratify k over 1..n
    /// and mask a uniformly random k-subset. Zero variance for models whose
    /// loss depends only on the number of masked sub-tokens.
    mask_count,
    /// Stratifies t over [t_min, 1] and weights by -α'_t/(1-α_t).
    time,
};

struct NllOptions {
    NllStratification stratification = NllStratification::mask_count;
    bool carryover = true;
    double t_min = kDefaultTMin;
    std::size_t batch = 4096;
};

struct NllReport {
    double bound = 0.0;            // nats per sequence
    double nats_per_token = 0.0;
    double perplexity = 0.0;       // exp(nats_per_token)
    double std_error = std::numeric_limits<double>::quiet_NaN();  // of nats_per_token; NaN if num_mc == 1
    std::size_t num_mc = 0;
};

using DataSampler = std::function<std::vector<Token>(Rng&)>;

/// Monte Carlo estimate of the expected NLL bound over the data distribution.
template <class Scalar>
NllReport eval_nll(const Mlp<Scalar>& net, const SubTokenCodec& codec, const FilterTable& filters,
                   const DataSampler& data, const Schedule& sch, std::size_t num_mc, Rng& rng,
                   const NllOptions& opt = {}) {
    if (num_mc < 1) throw std::invalid_argument("eval_nll: num_mc must be at least 1");
    detail::check_shapes(net, codec);
    const auto& nc = net.config();
    const std::size_t n = nc.entries();
    const Digit mask = codec.mask_digit();
    std::vector<double> values;
    values.reserve(num_mc);
    std::vector<CleanSeq> clean;
    std::vector<double> factor;
    std::vector<Digit> grids;
    std::vector<std::size_t> perm(n);

    auto flush = [&] {
        if (clean.empty()) return;
        std::vector<const CleanSeq*> ptrs(clean.size());
        for (std::size_t i = 0; i < clean.size(); ++i) ptrs[i] = &clean[i];
        const auto nll = sequence_nll(net, codec, filters, grids, ptrs, opt.carryover);
        for (std::size_t i = 0; i < nll.size(); ++i) values.push_back(factor[i] * nll[i]);
        clean.clear();
        factor.clear();
        grids.clear();
    };

    for (std::size_t m = 0; m < num_mc; ++m) {
        const auto toks = data(rng);
        if (toks.size() != nc.tokens) throw std::invalid_argument("eval_nll: data sampler returned wrong length");
        clean.emplace_back(codec, toks);
        const CleanSeq& y0 = clean.back();
        const double u = (static_cast<double>(m) + uniform01(rng)) / static_cast<double>(num_mc);
        if (opt.stratification == NllStratification::mask_count) {
            const std::size_t k = std::min(n, 1 + static_cast<std::size_t>(u * static_cast<double>(n)));
            std::iota(perm.begin(), perm.end(), std::size_t{0});
            for (std::size_t i = 0; i < k; ++i) {
                const std::size_t r = i + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n - i));
                std::swap(perm[i], perm[std::min(r, n - 1)]);
            }
            std::vector<Digit> g(y0.entries().begin(), y0.entries().end());
            for (std::size_t i = 0; i < k; ++i) g[perm[i]] = mask;
            grids.insert(grids.end(), g.begin(), g.end());
            factor.push_back(static_cast<double>(n) / static_cast<double>(k));
        } else {
            const double t = opt.t_min + (1.0 - opt.t_min) * u;
            const MaskedSeq yt = forward_sample(y0, t, sch, rng);
            grids.insert(grids.end(), yt.entries().begin(), yt.entries().end());
            factor.push_back(-sch.loss_weight(t, opt.t_min) * (1.0 - opt.t_min));
        }
        if (clean.size() >= opt.batch) flush();
    }
    flush();

    NllReport rep;
    rep.num_mc = num_mc;
    const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(num_mc);
    rep.bound = mean;
    rep.nats_per_token = mean / static_cast<double>(nc.tokens);
    rep.perplexity = std::exp(rep.nats_per_token);
    if (num_mc > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - mean) * (v - mean);
        rep.std_error = std::sqrt(ss / static_cast<double>(num_mc - 1) / static_cast<double>(num_mc)) /
                        static_cast<double>(nc.tokens);
    }
    return rep;
}

/// The bound for one sequence computed exactly by enumerating all 2^n mask
/// patterns of its n = L·ℓ sub-tokens, each weighted 1/(k·binom(n, k)) for k
/// masked entries. Practical for n up to about 20.
template <class Scalar>
double exact_nll_bound(const Mlp<Scalar>& net, const SubTokenCodec& codec, const FilterTable& filters,
                       const CleanSeq& y0, bool carryover = true) {
    const std::size_t n = y0.entries().size();
    if (n > 24) throw std::invalid_argument("exact_nll_bound: too many sub-tokens to enumerate");
    const Digit mask = codec.mask_digit();
    std::vector<double> binom(n + 1, 1.0);
    for (std::size_t k = 1; k <= n; ++k) binom[k] = binom[k - 1] * static_cast<double>(n - k + 1) / static_cast<double>(k);
    const std::size_t patterns = std::size_t{1} << n;
    double bound = 0.0;
    std::vector<Digit> grids;
    std::vector<double> weights;
    auto flush = [&] {
        if (weights.empty()) return;
        std::vector<const CleanSeq*> ptrs(weights.size(), &y0);
        const auto nll = sequence_nll(net, codec, filters, grids, ptrs, carryover);
        for (std::size_t i = 0; i < nll.size(); ++i) bound += weights[i] * nll[i];
        grids.clear();
        weights.clear();
    };
    for (std::size_t bits = 1; bits < patterns; ++bits) {
        const auto k = static_cast<std::size_t>(std::popcount(bits));
        for (std::size_t e = 0; e < n; ++e) grids.push_back(((bits >> e) & 1u) ? mask : y0.entries()[e]);
        weights.push_back(1.0 / (static_cast<double>(k) * binom[k]));
        if (weights.size() >= 4096) flush();
    }
    flush();
    return bound;
}

}  // namespace prime
