#include "dlab/grid.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "dlab/error.hpp"
#include "dlab/numeric.hpp"

namespace dlab {

LatentGrid::LatentGrid(int channels, int rows, int cols, double fill)
    : channels_(channels), rows_(rows), cols_(cols) {
    if (channels <= 0 || rows <= 0 || cols <= 0) {
        throw ShapeError("LatentGrid dimensions must be positive");
    }
    data_.assign(static_cast<std::size_t>(channels) * rows * cols, fill);
}

LatentGrid LatentGrid::channel(int c) const {
    LatentGrid out(1, rows_, cols_);
    auto src = plane(c);
    std::copy(src.begin(), src.end(), out.data_.begin());
    return out;
}

void LatentGrid::set_channel(int c, const LatentGrid& single) {
    if (single.channels_ != 1 || single.rows_ != rows_ || single.cols_ != cols_) {
        throw ShapeError("set_channel: expected 1x" + std::to_string(rows_) + "x" + std::to_string(cols_) +
                         ", got " + single.shape_string());
    }
    auto dst = plane(c);
    std::copy(single.data_.begin(), single.data_.end(), dst.begin());
}

bool LatentGrid::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

std::string LatentGrid::shape_string() const {
    return std::to_string(channels_) + "x" + std::to_string(rows_) + "x" + std::to_string(cols_);
}

void require_same_shape(const LatentGrid& a, const LatentGrid& b, const char* context) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(context) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
    }
}

LatentGrid axpby(double alpha, const LatentGrid& a, double beta, const LatentGrid& b) {
    require_same_shape(a, b, "axpby");
    LatentGrid out = a;
    auto o  = out.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = alpha * o[i] + beta * bd[i];
    return out;
}

double l2_norm(const LatentGrid& g) {
    KahanSum acc;
    for (double v : g.data()) acc.add(v * v);
    return std::sqrt(acc.value());
}

namespace {

std::uint32_t to_le(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
    }
}

}  // namespace

void write_f32(const LatentGrid& g, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open " + path + " for writing");
    for (double v : g.data()) {
        auto bits = to_le(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        out.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
    }
    if (!out) throw DataError("short write to " + path);
}

LatentGrid read_f32(const std::string& path, int channels, int rows, int cols) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    LatentGrid g(channels, rows, cols);
    std::size_t offset = 0;
    for (double& v : g.data()) {
        std::uint32_t bits = 0;
        in.read(reinterpret_cast<char*>(&bits), sizeof(bits));
        if (!in) throw FormatError("truncated f32 file " + path, offset);
        v = std::bit_cast<float>(to_le(bits));
        offset += sizeof(bits);
    }
    return g;
}

}  // namespace dlab
