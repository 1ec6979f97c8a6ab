#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <utility>
#include <vector>

#include "dtcmr/image.hpp"

namespace dtcmr {

using Direction = std::array<double, 3>;

/// Frame stack of one slice: every frame shares H x W. Directions are (x=column, y=row, z=slice normal).
struct DiffusionSeries {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<Image> frames;
    std::vector<double> bvalues;      // s/mm^2
    std::vector<Direction> directions;
    std::vector<int> rep_index;

    std::size_t frame_count() const { return frames.size(); }

    /// Frames whose b-value is zero, in series order.
    std::vector<std::size_t> b0_indices() const;

    /// Copy restricted to the given frame indices (in the given order).
    DiffusionSeries subset(const std::vector<std::size_t>& indices) const;

    /// Same metadata, different pixel data.
    DiffusionSeries with_frames(std::vector<Image> new_frames) const;
};

/// Throws Error on any invariant violation: empty stack, shape mismatch,
/// negative or non-finite b, non-unit direction with b > 0, missing b = 0 frame.
void validate_series(const DiffusionSeries& series);

/// Symmetric tensor as (Dxx, Dxy, Dxz, Dyy, Dyz, Dzz) in mm^2/s.
using Sym3 = std::array<double, 6>;
using Mat3 = std::array<std::array<double, 3>, 3>;

Mat3 to_matrix(const Sym3& d);
Sym3 from_matrix(const Mat3& m);

/// g^T D g
double quadratic_form(const Sym3& d, const Direction& g);

struct TensorField {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<Sym3> d;
    Image s0;

    TensorField() = default;
    TensorField(std::size_t h, std::size_t w) : height(h), width(w), d(h * w, Sym3{}), s0(h, w) {}

    Sym3& at(std::size_t row, std::size_t col) { return d[row * width + col]; }
    const Sym3& at(std::size_t row, std::size_t col) const { return d[row * width + col]; }
};

struct MyocardiumMask {
    Grid<std::uint8_t> labels;
    Vec2 centroid;
    std::vector<Vec2> endo_contour;
    std::vector<Vec2> epi_contour;

    std::size_t height() const { return labels.height(); }
    std::size_t width() const { return labels.width(); }
    std::size_t count() const;
    bool contains(std::size_t row, std::size_t col) const { return labels(row, col) != 0; }

    /// Builds a mask whose centroid is the mean of the labelled pixel centres.
    static MyocardiumMask from_labels(Grid<std::uint8_t> labels);

    Image as_image() const;
};

void save_series(const DiffusionSeries& series, const std::filesystem::path& dir);
DiffusionSeries load_series(const std::filesystem::path& dir);

struct NormalizedSeries {
    DiffusionSeries series;
    double scale = 1.0;
};

/// Divides by the given intensity percentile (default 99.9) and clamps to [0, 1].
NormalizedSeries normalize_intensities(const DiffusionSeries& series, double percentile = 99.9);

/// Linear-interpolated percentile (0..100) of all pixels of all frames.
double intensity_percentile(const DiffusionSeries& series, double percentile);

// Raw little-endian files. Masks are uint8 0/1; fields are (u, v) float32 pairs;
// tensor files hold s0 followed by the six components per pixel.
void save_mask(const MyocardiumMask& mask, const std::filesystem::path& file);
MyocardiumMask load_mask(const std::filesystem::path& file, std::size_t height, std::size_t width);
void save_field(const DenseField& field, const std::filesystem::path& file);
DenseField load_field(const std::filesystem::path& file, std::size_t height, std::size_t width);
void save_tensor(const TensorField& tensor, const std::filesystem::path& file);
TensorField load_tensor(const std::filesystem::path& file, std::size_t height, std::size_t width);

/// Reads height/width from a series manifest without loading frames.
std::pair<std::size_t, std::size_t> read_manifest_dims(const std::filesystem::path& dir);

}  // namespace dtcmr
