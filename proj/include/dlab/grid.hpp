#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace dlab {

// Real channels x M x N array, row-major within a channel. Stands in for
// x_0, x_t and eps in every diffusion operation.
class LatentGrid {
public:
    LatentGrid() = default;
    LatentGrid(int channels, int rows, int cols, double fill = 0.0);

    int channels() const { return channels_; }
    int rows() const { return rows_; }
    int cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    std::size_t plane_size() const { return static_cast<std::size_t>(rows_) * cols_; }

    double& at(int c, int r, int col) { return data_[index(c, r, col)]; }
    double at(int c, int r, int col) const { return data_[index(c, r, col)]; }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }

    std::span<double> plane(int c) { return {data_.data() + c * plane_size(), plane_size()}; }
    std::span<const double> plane(int c) const { return {data_.data() + c * plane_size(), plane_size()}; }

    LatentGrid channel(int c) const;
    void set_channel(int c, const LatentGrid& single);

    bool same_shape(const LatentGrid& other) const {
        return channels_ == other.channels_ && rows_ == other.rows_ && cols_ == other.cols_;
    }
    bool all_finite() const;
    std::string shape_string() const;

    friend bool operator==(const LatentGrid&, const LatentGrid&) = default;

private:
    std::size_t index(int c, int r, int col) const {
        return (static_cast<std::size_t>(c) * rows_ + r) * cols_ + col;
    }

    int channels_ = 0;
    int rows_     = 0;
    int cols_     = 0;
    std::vector<double> data_;
};

// Throws ShapeError naming `context` when shapes differ.
void require_same_shape(const LatentGrid& a, const LatentGrid& b, const char* context);

// Elementwise alpha*a + beta*b.
LatentGrid axpby(double alpha, const LatentGrid& a, double beta, const LatentGrid& b);

double l2_norm(const LatentGrid& g);

// Flat little-endian float32 dump, channel-major.
void write_f32(const LatentGrid& g, const std::string& path);
LatentGrid read_f32(const std::string& path, int channels, int rows, int cols);

}  // namespace dlab
