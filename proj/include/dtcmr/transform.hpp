#pragma once

#include <vector>

#include "dtcmr/image.hpp"

namespace dtcmr {

/// Stationary velocity field on a cubic B-spline lattice. Control node (i, j) sits at
/// pixel position ((j - 1) * spacing, (i - 1) * spacing), so the lattice covers the image
/// with one node of margin on the low side and two on the high side.
struct BSplineWarp {
    std::size_t grid_rows = 0;
    std::size_t grid_cols = 0;
    double spacing = 8.0;
    int integration_steps = 6;
    std::vector<Vec2> control_velocities;

    /// Zero velocities on a lattice sized for an image of the given dimensions.
    static BSplineWarp zero(std::size_t height, std::size_t width, double spacing = 8.0, int integration_steps = 6);

    Vec2& node(std::size_t i, std::size_t j) { return control_velocities[i * grid_cols + j]; }
    const Vec2& node(std::size_t i, std::size_t j) const { return control_velocities[i * grid_cols + j]; }
    std::size_t parameter_count() const { return control_velocities.size() * 2; }
};

/// Dense cubic-B-spline evaluation of the control velocities.
DenseField evaluate_velocity(const BSplineWarp& warp, std::size_t height, std::size_t width);

/// Transpose of evaluate_velocity: accumulates a dense per-pixel gradient onto the control nodes.
std::vector<Vec2> bspline_adjoint(const BSplineWarp& warp, const DenseField& dense_gradient);

/// exp(v) by scaling and squaring with warp.integration_steps halvings; 0 steps returns v itself.
DenseField integrate(const BSplineWarp& warp, std::size_t height, std::size_t width);

/// Same, for an already-dense velocity field.
DenseField scaling_and_squaring(const DenseField& velocity, int steps);

/// Displacement of the map p -> inner_map(outer_map(p)), i.e. outer(p) + inner(p + outer(p)).
/// Border-clamped bilinear sampling of `inner`.
DenseField compose_fields(const DenseField& outer, const DenseField& inner);

DenseField uniform_field(std::size_t height, std::size_t width, Vec2 displacement);
DenseField add_fields(const DenseField& a, const DenseField& b);

/// Bilinear sample with zero padding outside the grid.
double sample_bilinear(const Image& image, double x, double y);

/// Pull-back resampling out(p) = image(p + field(p)), bilinear, zero padding.
Image warp_image(const Image& image, const DenseField& field);

/// As warp_image, also returning d out(p) / d field(p) (the sampled image gradient).
Image warp_image(const Image& image, const DenseField& field, DenseField& sample_gradient);

/// det d(p + u(p))/dp with central differences (one-sided at the border).
Image jacobian_determinant(const DenseField& field);

/// Minimum determinant over pixels at least one pixel away from the border.
double min_interior_jacobian(const DenseField& field);

}  // namespace dtcmr
