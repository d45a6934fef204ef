#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "prime/codec.hpp"
#include "prime/random.hpp"

namespace prime {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A pmf over a side × side grid of cells, row-major. A cell (r, c) is the
/// token pair (r, c) with C = side.
struct DensityGrid {
    std::size_t side = 0;
    std::vector<double> probs;

    double at(std::size_t r, std::size_t c) const { return probs[r * side + c]; }
};

using CellSample = std::array<Token, 2>;

namespace detail {

inline void normalize(DensityGrid& g) {
    double total = 0.0;
    for (double p : g.probs) {
        if (!(p >= 0.0) || !std::isfinite(p)) throw DataError("density has a negative or non-finite cell");
        total += p;
    }
    if (total <= 0.0) throw DataError("density is all zero");
    for (double& p : g.probs) p /= total;
}

// Center-crop to a square, then nearest-neighbour resample to side × side.
inline DensityGrid resample(const std::vector<double>& img, std::size_t rows, std::size_t cols, std::size_t side) {
    const std::size_t n = std::min(rows, cols);
    const std::size_t r0 = (rows - n) / 2, c0 = (cols - n) / 2;
    DensityGrid g{side, std::vector<double>(side * side)};
    for (std::size_t r = 0; r < side; ++r)
        for (std::size_t c = 0; c < side; ++c) {
            const std::size_t sr = r0 + r * n / side, sc = c0 + c * n / side;
            g.probs[r * side + c] = img[sr * cols + sc];
        }
    normalize(g);
    return g;
}

inline std::string next_pnm_token(std::istream& is) {
    std::string tok;
    int ch;
    while ((ch = is.get()) != EOF) {
        if (ch == '#') {
            while ((ch = is.get()) != EOF && ch != '\n') {}
            continue;
        }
        if (std::isspace(ch)) {
            if (!tok.empty()) break;
            continue;
        }
        tok.push_back(static_cast<char>(ch));
    }
    if (tok.empty()) throw DataError("truncated graymap header");
    return tok;
}

inline std::size_t parse_size(const std::string& s, const char* what) {
    try {
        std::size_t pos = 0;
        const auto v = std::stoull(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
        throw DataError(std::string("bad ") + what + " '" + s + "' in graymap header");
    }
}

inline std::vector<double> read_pgm(std::istream& is, const std::string& magic, std::size_t& rows, std::size_t& cols) {
    cols = parse_size(next_pnm_token(is), "width");
    rows = parse_size(next_pnm_token(is), "height");
    const std::size_t maxval = parse_size(next_pnm_token(is), "maxval");
    if (rows == 0 || cols == 0 || maxval == 0 || maxval > 65535) throw DataError("graymap header out of range");
    std::vector<double> img(rows * cols);
    if (magic == "P2") {
        for (auto& v : img) v = static_cast<double>(parse_size(next_pnm_token(is), "pixel"));
    } else {
        const bool wide = maxval > 255;
        for (auto& v : img) {
            unsigned char b[2] = {};
            if (!is.read(reinterpret_cast<char*>(b), wide ? 2 : 1)) throw DataError("truncated graymap raster");
            v = wide ? static_cast<double>((b[0] << 8) | b[1]) : static_cast<double>(b[0]);
        }
    }
    return img;
}

inline std::vector<double> read_csv_matrix(std::istream& is, std::size_t& rows, std::size_t& cols) {
    std::vector<double> img;
    rows = cols = 0;
    std::string line;
    while (std::getline(is, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::stringstream ss(line);
        std::string cell;
        std::size_t n = 0;
        while (std::getline(ss, cell, ',')) {
            try {
                img.push_back(std::stod(cell));
            } catch (const std::exception&) {
                throw DataError("non-numeric CSV cell '" + cell + "' on row " + std::to_string(rows + 1));
            }
            ++n;
        }
        if (cols == 0) cols = n;
        if (n != cols) throw DataError("ragged CSV matrix at row " + std::to_string(rows + 1));
        ++rows;
    }
    if (rows == 0) throw DataError("empty CSV matrix");
    return img;
}

}  // namespace detail

/// Reads a plain (P2) or binary (P5) graymap, or a comma-separated matrix,
/// and turns its intensities into a side × side pmf.
inline DensityGrid load_density(const std::string& path, std::size_t side) {
    if (side == 0) throw std::invalid_argument("load_density: side must be positive");
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot read density file '" + path + "'");
    char m[2] = {};
    is.read(m, 2);
    std::size_t rows = 0, cols = 0;
    std::vector<double> img;
    const std::string magic(m, static_cast<std::size_t>(is.gcount()));
    if (magic == "P2" || magic == "P5") {
        img = detail::read_pgm(is, magic, rows, cols);
    } else {
        is.clear();
        is.seekg(0);
        img = detail::read_csv_matrix(is, rows, cols);
    }
    try {
        return detail::resample(img, rows, cols, side);
    } catch (const DataError& e) {
        throw DataError("'" + path + "': " + e.what());
    }
}

inline std::vector<std::string> builtin_density_names() { return {"gaussians", "checkerboard", "rings"}; }

/// Parametric densities:
///   gaussians     two isotropic Gaussians, σ = 0.08·side, centred at
///                 (0.3, 0.3)·(side−1) and its point reflection through the
///                 grid centre; each normalized on the grid, mixed 1:1
///   checkerboard  8 × 8 blocks, uniform mass on blocks with even (row+col)
///   rings         uniform annulus 0.25·side ≤ d ≤ 0.4·side around the centre
inline DensityGrid builtin_density(const std::string& name, std::size_t side) {
    if (side < 8) throw std::invalid_argument("builtin densities need side ≥ 8");
    DensityGrid g{side, std::vector<double>(side * side, 0.0)};
    const double centre = 0.5 * static_cast<double>(side - 1);
    if (name == "gaussians") {
        const double sigma = 0.08 * static_cast<double>(side);
        const double a = 0.3 * static_cast<double>(side - 1);
        const double b = static_cast<double>(side - 1) - a;
        std::vector<double> g1(side * side), g2(side * side);
        for (std::size_t r = 0; r < side; ++r)
            for (std::size_t c = 0; c < side; ++c) {
                const double y = static_cast<double>(r), x = static_cast<double>(c);
                g1[r * side + c] = std::exp(-((y - a) * (y - a) + (x - a) * (x - a)) / (2 * sigma * sigma));
                g2[r * side + c] = std::exp(-((y - b) * (y - b) + (x - b) * (x - b)) / (2 * sigma * sigma));
            }
        const double z1 = std::accumulate(g1.begin(), g1.end(), 0.0);
        const double z2 = std::accumulate(g2.begin(), g2.end(), 0.0);
        for (std::size_t k = 0; k < g.probs.size(); ++k) g.probs[k] = 0.5 * g1[k] / z1 + 0.5 * g2[k] / z2;
    } else if (name == "checkerboard") {
        for (std::size_t r = 0; r < side; ++r)
            for (std::size_t c = 0; c < side; ++c)
                if ((r * 8 / side + c * 8 / side) % 2 == 0) g.probs[r * side + c] = 1.0;
    } else if (name == "rings") {
        const double lo = 0.25 * static_cast<double>(side), hi = 0.4 * static_cast<double>(side);
        for (std::size_t r = 0; r < side; ++r)
            for (std::size_t c = 0; c < side; ++c) {
                const double d = std::hypot(static_cast<double>(r) - centre, static_cast<double>(c) - centre);
                if (d >= lo && d <= hi) g.probs[r * side + c] = 1.0;
            }
    } else {
        throw std::invalid_argument("unknown density '" + name + "' (expected gaussians, checkerboard or rings)");
    }
    detail::normalize(g);
    return g;
}

/// Inverse-CDF sampler over the cells; one uniform per draw.
class CellSampler {
public:
    explicit CellSampler(const DensityGrid& grid) : side_(grid.side), cdf_(grid.probs.size()) {
        std::partial_sum(grid.probs.begin(), grid.probs.end(), cdf_.begin());
    }

    CellSample operator()(Rng& rng) const {
        const double u = uniform01(rng) * cdf_.back();
        auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
        std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(it - cdf_.begin()), cdf_.size() - 1);
        const auto r = static_cast<std::uint32_t>(k / side_), c = static_cast<std::uint32_t>(k % side_);
        return {Token{r}, Token{c}};
    }

private:
    std::size_t side_;
    std::vector<double> cdf_;
};

inline std::vector<CellSample> sample_data(const DensityGrid& grid, std::size_t n, Rng& rng) {
    const CellSampler draw(grid);
    std::vector<CellSample> out(n);
    for (auto& s : out) s = draw(rng);
    return out;
}

/// Empirical cell frequencies.
inline std::vector<double> histogram(std::size_t side, std::span<const CellSample> samples) {
    std::vector<double> h(side * side, 0.0);
    for (const auto& s : samples) {
        if (s[0].value >= side || s[1].value >= side) throw std::out_of_range("sample outside the grid");
        h[s[0].value * side + s[1].value] += 1.0;
    }
    if (!samples.empty())
        for (double& x : h) x /= static_cast<double>(samples.size());
    return h;
}

/// ½ Σ |empirical − grid| over cells.
inline double tv_distance(const DensityGrid& grid, std::span<const CellSample> samples) {
    if (samples.empty()) throw std::invalid_argument("tv_distance needs at least one sample");
    const auto h = histogram(grid.side, samples);
    double tv = 0.0;
    for (std::size_t k = 0; k < h.size(); ++k) tv += std::abs(h[k] - grid.probs[k]);
    return 0.5 * tv;
}

/// Binary graymap (P5, maxval 255), intensities scaled so the largest value is 255.
inline void write_pgm(const std::string& path, std::size_t side, std::span<const double> values) {
    if (values.size() != side * side) throw std::invalid_argument("write_pgm: expected side² values");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write '" + path + "'");
    os << "P5\n" << side << ' ' << side << "\n255\n";
    const double mx = values.empty() ? 0.0 : *std::max_element(values.begin(), values.end());
    for (double v : values) {
        const double scaled = mx > 0.0 ? 255.0 * v / mx : 0.0;
        os.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(scaled, 0.0, 255.0)))));
    }
    if (!os) throw DataError("failed writing '" + path + "'");
}

inline void write_csv_matrix(const std::string& path, std::size_t side, std::span<const double> values) {
    if (values.size() != side * side) throw std::invalid_argument("write_csv_matrix: expected side² values");
    std::ofstream os(path);
    if (!os) throw DataError("cannot write '" + path + "'");
    os.precision(17);
    for (std::size_t r = 0; r < side; ++r) {
        for (std::size_t c = 0; c < side; ++c) os << (c ? "," : "") << values[r * side + c];
        os << '\n';
    }
}

/// Rows of comma-separated token ids, all of the same length.
inline std::vector<std::vector<Token>> load_token_rows(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot read token file '" + path + "'");
    std::size_t rows = 0, cols = 0;
    const auto flat = detail::read_csv_matrix(is, rows, cols);
    std::vector<std::vector<Token>> out(rows, std::vector<Token>(cols));
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
            const double v = flat[r * cols + c];
            if (v < 0 || v != std::floor(v) || v > 4294967295.0)
                throw DataError("token file '" + path + "' has a non-integer id on row " + std::to_string(r + 1));
            out[r][c] = Token{static_cast<std::uint32_t>(v)};
        }
    return out;
}

}  // namespace prime
