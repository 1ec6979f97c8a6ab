#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace dtcmr {

/// In-plane vector in pixel units. x runs along columns, y along rows.
struct Vec2 {
    double x = 0.0;
    double y = 0.0;

    friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
    friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
    friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
    friend bool operator==(Vec2 a, Vec2 b) = default;
    double norm() const { return std::hypot(x, y); }
};

/// Row-major H x W grid. Pixel (row, col) sits at continuous coordinate (x=col, y=row).
template <typename T>
class Grid {
public:
    Grid() = default;
    Grid(std::size_t height, std::size_t width, T fill = T{})
        : height_(height), width_(width), data_(height * width, fill) {}

    std::size_t height() const { return height_; }
    std::size_t width() const { return width_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    bool same_shape(const auto& other) const {
        return height_ == other.height() && width_ == other.width();
    }

    T& operator()(std::size_t row, std::size_t col) { return data_[row * width_ + col]; }
    const T& operator()(std::size_t row, std::size_t col) const { return data_[row * width_ + col]; }
    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    auto begin() { return data_.begin(); }
    auto end() { return data_.end(); }
    auto begin() const { return data_.begin(); }
    auto end() const { return data_.end(); }

    friend bool operator==(const Grid&, const Grid&) = default;

private:
    std::size_t height_ = 0;
    std::size_t width_ = 0;
    std::vector<T> data_;
};

using Image = Grid<double>;

/// Dense per-pixel displacement. A pull-back warp reads the source at p + displacement(p).
using DenseField = Grid<Vec2>;

double max_abs(const Image& image);
double frobenius_norm(const Image& image);
double max_displacement(const DenseField& field);

/// Separable 5-tap binomial smoothing (1 4 6 4 1)/16 with clamped borders.
Image binomial_blur(const Image& image);

}  // namespace dtcmr
