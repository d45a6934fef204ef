#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "prime/codec.hpp"
#include "prime/diffusion.hpp"
#include "prime/random.hpp"

namespace prime {

/// Output layer design: one C-way logit vector per token (joint) or ℓ
/// separate b-way vectors per token (independent, comparison only).
enum class Head { joint, independent };

inline const char* head_name(Head h) { return h == Head::joint ? "joint" : "independent"; }

inline Head parse_head(const std::string& s) {
    if (s == "joint") return Head::joint;
    if (s == "independent") return Head::independent;
    throw std::invalid_argument("unknown head '" + s + "' (expected joint or independent)");
}

struct NetConfig {
    std::size_t tokens = 2;      // L
    std::size_t length = 1;      // ℓ
    std::uint64_t base = 2;      // b
    std::uint64_t classes = 2;   // C
    std::size_t embed_dim = 48;  // D, split into ℓ sub-token slots of D/ℓ
    std::size_t hidden = 512;
    std::size_t num_layers = 4;  // affine layers; all but the last are followed by Swish
    Head head = Head::joint;

    static NetConfig for_codec(const SubTokenCodec& codec, std::size_t tokens, std::size_t embed_dim = 48,
                               std::size_t hidden = 512, std::size_t num_layers = 4, Head head = Head::joint) {
        NetConfig c;
        c.tokens = tokens;
        c.length = codec.length();
        c.base = codec.base();
        c.classes = codec.num_classes();
        c.embed_dim = embed_dim;
        c.hidden = hidden;
        c.num_layers = num_layers;
        c.head = head;
        c.validate();
        return c;
    }

    void validate() const {
        if (tokens == 0 || length == 0 || base == 0 || classes == 0 || embed_dim == 0 || hidden == 0 ||
            num_layers == 0)
            throw std::invalid_argument("net config: all dimensions must be positive");
        if (embed_dim % length != 0)
            throw std::invalid_argument("net config: embed_dim " + std::to_string(embed_dim) +
                                        " is not divisible by ℓ = " + std::to_string(length));
    }

    std::size_t sub_dim() const { return embed_dim / length; }
    std::size_t input_dim() const { return tokens * embed_dim; }
    std::size_t entries() const { return tokens * length; }
    std::size_t head_width() const { return head == Head::joint ? classes : length * base; }
    std::size_t output_dim() const { return tokens * head_width(); }
    std::size_t layer_in(std::size_t k) const { return k == 0 ? input_dim() : hidden; }
    std::size_t layer_out(std::size_t k) const { return k + 1 == num_layers ? output_dim() : hidden; }

    friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

template <class Scalar>
Scalar swish(Scalar x) {
    return x / (Scalar(1) + std::exp(-x));
}

template <class Scalar>
Scalar swish_derivative(Scalar x) {
    const Scalar s = Scalar(1) / (Scalar(1) + std::exp(-x));
    return s * (Scalar(1) + x * (Scalar(1) - s));
}

/// E_θ: sub-token embedding lookup (one table shared across positions plus a
/// learned vector per position), concatenation into token and sequence
/// embeddings, then an MLP with Swish activations.
///
/// Parameters live in one flat vector in this order: the embedding table as
/// b+1 columns of D/ℓ values (column b is the mask), the ℓ positional columns,
/// then for each layer its weight matrix (column-major, out × in) followed by
/// its bias.
template <class Scalar>
class Mlp {
public:
    using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
    using MatrixMap = Eigen::Map<Matrix>;
    using ConstMatrixMap = Eigen::Map<const Matrix>;

    /// Activations kept for the backward pass.
    struct Workspace {
        Matrix input;
        std::vector<Matrix> pre;
        std::vector<Matrix> act;
        Matrix out;
        std::size_t batch = 0;
    };

    explicit Mlp(NetConfig config) : config_(config) {
        config_.validate();
        std::size_t off = 0;
        embedding_offset_ = off;
        off += config_.sub_dim() * (config_.base + 1);
        positional_offset_ = off;
        off += config_.sub_dim() * config_.length;
        for (std::size_t k = 0; k < config_.num_layers; ++k) {
            weight_offset_.push_back(off);
            off += config_.layer_out(k) * config_.layer_in(k);
            bias_offset_.push_back(off);
            off += config_.layer_out(k);
        }
        params_ = Vector::Zero(static_cast<Eigen::Index>(off));
    }

    /// Weights uniform with variance 1/fan_in, biases zero, embeddings and
    /// positional vectors uniform on [-1, 1].
    static Mlp init(const NetConfig& config, Rng& rng) {
        Mlp m(config);
        auto fill = [&](std::size_t begin, std::size_t count, double bound) {
            for (std::size_t i = 0; i < count; ++i)
                m.params_[static_cast<Eigen::Index>(begin + i)] = static_cast<Scalar>((2.0 * uniform01(rng) - 1.0) * bound);
        };
        fill(m.embedding_offset_, m.positional_offset_ - m.embedding_offset_, 1.0);
        fill(m.positional_offset_, m.weight_offset_[0] - m.positional_offset_, 1.0);
        for (std::size_t k = 0; k < config.num_layers; ++k)
            fill(m.weight_offset_[k], config.layer_out(k) * config.layer_in(k),
                 std::sqrt(3.0 / static_cast<double>(config.layer_in(k))));
        return m;
    }

    const NetConfig& config() const noexcept { return config_; }
    std::size_t param_count() const noexcept { return static_cast<std::size_t>(params_.size()); }
    std::span<Scalar> params() noexcept { return {params_.data(), param_count()}; }
    std::span<const Scalar> params() const noexcept { return {params_.data(), param_count()}; }
    Vector& param_vector() noexcept { return params_; }
    const Vector& param_vector() const noexcept { return params_; }

    MatrixMap embedding() { return block(embedding_offset_, config_.sub_dim(), config_.base + 1); }
    ConstMatrixMap embedding() const { return cblock(embedding_offset_, config_.sub_dim(), config_.base + 1); }
    MatrixMap positional() { return block(positional_offset_, config_.sub_dim(), config_.length); }
    ConstMatrixMap positional() const { return cblock(positional_offset_, config_.sub_dim(), config_.length); }
    MatrixMap weight(std::size_t k) { return block(weight_offset_[k], config_.layer_out(k), config_.layer_in(k)); }
    ConstMatrixMap weight(std::size_t k) const {
        return cblock(weight_offset_[k], config_.layer_out(k), config_.layer_in(k));
    }
    MatrixMap bias(std::size_t k) { return block(bias_offset_[k], config_.layer_out(k), 1); }
    ConstMatrixMap bias(std::size_t k) const { return cblock(bias_offset_[k], config_.layer_out(k), 1); }

    std::size_t embedding_offset() const noexcept { return embedding_offset_; }
    std::size_t positional_offset() const noexcept { return positional_offset_; }
    std::size_t weight_offset(std::size_t k) const { return weight_offset_[k]; }
    std::size_t bias_offset(std::size_t k) const { return bias_offset_[k]; }

    /// Forward pass on `batch` grids stored back to back (each L·ℓ entries).
    /// Leaves output_dim × batch logits in ws.out.
    void forward(std::span<const Digit> grids, std::size_t batch, Workspace& ws) const {
        const std::size_t n = config_.entries();
        const std::size_t e = config_.sub_dim();
        if (grids.size() != n * batch) throw std::invalid_argument("net forward: grid batch has wrong size");
        const auto emb = embedding();
        const auto pos = positional();
        ws.batch = batch;
        ws.input.resize(static_cast<Eigen::Index>(config_.input_dim()), static_cast<Eigen::Index>(batch));
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t k = 0; k < n; ++k) {
                const Digit d = grids[b * n + k];
                if (d > config_.base) throw std::invalid_argument("net forward: entry outside {0..b-1, m}");
                ws.input.col(static_cast<Eigen::Index>(b)).segment(static_cast<Eigen::Index>(k * e),
                                                                   static_cast<Eigen::Index>(e)) =
                    emb.col(d) + pos.col(static_cast<Eigen::Index>(k % config_.length));
            }
        }
        const std::size_t layers = config_.num_layers;
        ws.pre.resize(layers - 1);
        ws.act.resize(layers - 1);
        const Matrix* h = &ws.input;
        for (std::size_t k = 0; k < layers; ++k) {
            Matrix& z = (k + 1 == layers) ? ws.out : ws.pre[k];
            z.noalias() = weight(k) * (*h);
            z.colwise() += bias(k).col(0);
            if (k + 1 < layers) {
                ws.act[k] = (z.array() / (Scalar(1) + (-z.array()).exp())).matrix();
                h = &ws.act[k];
            }
        }
    }

    /// Gradient of Σ upstream ⊙ logits with respect to every parameter,
    /// written into `grad` (overwritten). Requires the workspace of the
    /// matching forward call.
    void backward(std::span<const Digit> grids, const Workspace& ws, const Matrix& upstream,
                  std::span<Scalar> grad) const {
        if (grad.size() != param_count()) throw std::invalid_argument("net backward: gradient size mismatch");
        if (upstream.rows() != static_cast<Eigen::Index>(config_.output_dim()) ||
            upstream.cols() != static_cast<Eigen::Index>(ws.batch))
            throw std::invalid_argument("net backward: upstream shape mismatch");
        Eigen::Map<Vector> g(grad.data(), static_cast<Eigen::Index>(grad.size()));
        g.setZero();
        auto gblock = [&](std::size_t off, std::size_t r, std::size_t c) {
            return MatrixMap(grad.data() + off, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
        };
        const std::size_t layers = config_.num_layers;
        Matrix delta = upstream;
        Matrix next;
        for (std::size_t k = layers; k-- > 0;) {
            const Matrix& h = (k == 0) ? ws.input : ws.act[k - 1];
            gblock(weight_offset_[k], config_.layer_out(k), config_.layer_in(k)).noalias() = delta * h.transpose();
            gblock(bias_offset_[k], config_.layer_out(k), 1) = delta.rowwise().sum();
            next.noalias() = weight(k).transpose() * delta;
            if (k > 0) {
                const auto z = ws.pre[k - 1].array();
                const Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic> s = Scalar(1) / (Scalar(1) + (-z).exp());
                next.array() *= s * (Scalar(1) + z * (Scalar(1) - s));
            }
            delta.swap(next);
        }
        // delta now holds d/d(input); scatter into the lookup tables.
        const std::size_t n = config_.entries();
        const std::size_t e = config_.sub_dim();
        auto gemb = gblock(embedding_offset_, e, config_.base + 1);
        auto gpos = gblock(positional_offset_, e, config_.length);
        for (std::size_t b = 0; b < ws.batch; ++b) {
            for (std::size_t k = 0; k < n; ++k) {
                const auto seg = delta.col(static_cast<Eigen::Index>(b)).segment(static_cast<Eigen::Index>(k * e),
                                                                                 static_cast<Eigen::Index>(e));
                gemb.col(grids[b * n + k]) += seg;
                gpos.col(static_cast<Eigen::Index>(k % config_.length)) += seg;
            }
        }
    }

    /// Logits for one latent grid as doubles, laid out token by token.
    std::vector<double> logits(const MaskedSeq& y) const {
        if (y.tokens() != config_.tokens || y.length() != config_.length || y.mask() != config_.base)
            throw std::invalid_argument("net forward: sequence shape does not match the network");
        Workspace ws;
        forward(y.entries(), 1, ws);
        std::vector<double> out(config_.output_dim());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(ws.out(static_cast<Eigen::Index>(i), 0));
        return out;
    }

    /// Copy with parameters converted to another scalar type.
    template <class Other>
    Mlp<Other> cast() const {
        Mlp<Other> m(config_);
        m.param_vector() = params_.template cast<Other>();
        return m;
    }

private:
    MatrixMap block(std::size_t off, std::size_t r, std::size_t c) {
        return MatrixMap(params_.data() + off, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    }
    ConstMatrixMap cblock(std::size_t off, std::size_t r, std::size_t c) const {
        return ConstMatrixMap(params_.data() + off, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    }

    NetConfig config_;
    Vector params_;
    std::size_t embedding_offset_ = 0;
    std::size_t positional_offset_ = 0;
    std::vector<std::size_t> weight_offset_;
    std::vector<std::size_t> bias_offset_;
};

}  // namespace prime
