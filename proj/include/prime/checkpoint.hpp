#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "prime/net.hpp"

namespace prime {

/// Binary checkpoint, all integers and floats little-endian:
///
///   magic      8 bytes  "PRIMECKP"
///   version    u32      (1)
///   reserved   u32      (0)
///   tokens, length, base, classes, embed_dim, hidden, num_layers, head   u64 each
///   text_len   u64, then text_len bytes of resolved run config
///   count      u64, then count f64 parameters in Mlp's flat order
inline constexpr std::array<char, 8> kCheckpointMagic{'P', 'R', 'I', 'M', 'E', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Checkpoint {
    NetConfig config;
    std::string run_config;
    std::vector<double> params;

    template <class Scalar>
    Mlp<Scalar> model() const {
        Mlp<Scalar> m(config);
        if (m.param_count() != params.size())
            throw CheckpointError("checkpoint holds " + std::to_string(params.size()) + " parameters but its config needs " +
                                  std::to_string(m.param_count()));
        for (std::size_t i = 0; i < params.size(); ++i) m.params()[i] = static_cast<Scalar>(params[i]);
        return m;
    }
};

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 8);
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 4);
}

inline std::uint64_t get_u(std::istream& is, int bytes) {
    unsigned char b[8] = {};
    if (!is.read(reinterpret_cast<char*>(b), bytes)) throw CheckpointError("checkpoint is truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= std::uint64_t{b[i]} << (8 * i);
    return v;
}

}  // namespace detail

template <class Scalar>
void save_checkpoint(const std::string& path, const Mlp<Scalar>& model, const std::string& run_config = {}) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("cannot open '" + path + "' for writing");
    os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
    detail::put_u32(os, kCheckpointVersion);
    detail::put_u32(os, 0);
    const NetConfig& c = model.config();
    for (std::uint64_t v : {std::uint64_t{c.tokens}, std::uint64_t{c.length}, c.base, c.classes,
                            std::uint64_t{c.embed_dim}, std::uint64_t{c.hidden}, std::uint64_t{c.num_layers},
                            std::uint64_t{c.head == Head::joint ? 0u : 1u}})
        detail::put_u64(os, v);
    detail::put_u64(os, run_config.size());
    os.write(run_config.data(), static_cast<std::streamsize>(run_config.size()));
    detail::put_u64(os, model.param_count());
    for (Scalar p : model.params()) {
        const double d = static_cast<double>(p);
        std::uint64_t bits;
        std::memcpy(&bits, &d, 8);
        detail::put_u64(os, bits);
    }
    if (!os) throw CheckpointError("failed writing '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open checkpoint '" + path + "'");
    std::array<char, 8> magic{};
    if (!is.read(magic.data(), magic.size()) || magic != kCheckpointMagic)
        throw CheckpointError("'" + path + "' is not a checkpoint (bad magic)");
    const auto version = detail::get_u(is, 4);
    if (version != kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    detail::get_u(is, 4);
    Checkpoint ck;
    ck.config.tokens = detail::get_u(is, 8);
    ck.config.length = detail::get_u(is, 8);
    ck.config.base = detail::get_u(is, 8);
    ck.config.classes = detail::get_u(is, 8);
    ck.config.embed_dim = detail::get_u(is, 8);
    ck.config.hidden = detail::get_u(is, 8);
    ck.config.num_layers = detail::get_u(is, 8);
    const auto head = detail::get_u(is, 8);
    if (head > 1) throw CheckpointError("checkpoint has unknown head kind");
    ck.config.head = head == 0 ? Head::joint : Head::independent;
    try {
        ck.config.validate();
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(std::string("checkpoint config is invalid: ") + e.what());
    }
    const auto text_len = detail::get_u(is, 8);
    if (text_len > (std::uint64_t{1} << 24)) throw CheckpointError("checkpoint config text is implausibly large");
    ck.run_config.resize(text_len);
    if (!is.read(ck.run_config.data(), static_cast<std::streamsize>(text_len)))
        throw CheckpointError("checkpoint is truncated");
    const auto count = detail::get_u(is, 8);
    if (count != Mlp<double>(ck.config).param_count())
        throw CheckpointError("checkpoint parameter count does not match its config");
    ck.params.resize(count);
    for (auto& p : ck.params) {
        const std::uint64_t bits = detail::get_u(is, 8);
        std::memcpy(&p, &bits, 8);
    }
    return ck;
}

}  // namespace prime
