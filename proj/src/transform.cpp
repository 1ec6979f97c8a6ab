#include "dtcmr/transform.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "dtcmr/diagnostics.hpp"

namespace dtcmr {
namespace {

struct SplineTap {
    std::size_t base;  // first of four node indices
    std::array<double, 4> w;
};

std::array<double, 4> cubic_weights(double u) {
    const double u2 = u * u, u3 = u2 * u;
    const double v = 1.0 - u;
    return {v * v * v / 6.0, (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0, (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
            u3 / 6.0};
}

std::vector<SplineTap> taps(std::size_t length, double spacing) {
    std::vector<SplineTap> out(length);
    for (std::size_t i = 0; i < length; ++i) {
        const double t = static_cast<double>(i) / spacing;
        const double cell = std::floor(t);
        out[i] = {static_cast<std::size_t>(cell), cubic_weights(t - cell)};
    }
    return out;
}

Vec2 sample_clamped(const DenseField& f, double x, double y) {
    const double maxx = static_cast<double>(f.width() - 1), maxy = static_cast<double>(f.height() - 1);
    x = std::clamp(x, 0.0, maxx);
    y = std::clamp(y, 0.0, maxy);
    const auto x0 = static_cast<std::size_t>(std::min(std::floor(x), std::max(maxx - 1.0, 0.0)));
    const auto y0 = static_cast<std::size_t>(std::min(std::floor(y), std::max(maxy - 1.0, 0.0)));
    const std::size_t x1 = std::min(x0 + 1, f.width() - 1), y1 = std::min(y0 + 1, f.height() - 1);
    const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
    const Vec2 a = f(y0, x0), b = f(y0, x1), c = f(y1, x0), d = f(y1, x1);
    return {(1 - fy) * ((1 - fx) * a.x + fx * b.x) + fy * ((1 - fx) * c.x + fx * d.x),
            (1 - fy) * ((1 - fx) * a.y + fx * b.y) + fy * ((1 - fx) * c.y + fx * d.y)};
}

// Catmull-Rom sampling with clamped coordinates and edge-replicated neighbours.
Vec2 sample_cubic_clamped(const DenseField& f, double x, double y) {
    const long w = static_cast<long>(f.width()), h = static_cast<long>(f.height());
    if (w < 4 || h < 4) return sample_clamped(f, x, y);
    x = std::clamp(x, 0.0, static_cast<double>(w - 1));
    y = std::clamp(y, 0.0, static_cast<double>(h - 1));
    const long ix = static_cast<long>(std::floor(x)), iy = static_cast<long>(std::floor(y));
    const double tx = x - static_cast<double>(ix), ty = y - static_cast<double>(iy);
    const auto weights = [](double t) {
        const double t2 = t * t, t3 = t2 * t;
        return std::array<double, 4>{0.5 * (-t3 + 2 * t2 - t), 0.5 * (3 * t3 - 5 * t2 + 2), 0.5 * (-3 * t3 + 4 * t2 + t),
                                     0.5 * (t3 - t2)};
    };
    const auto wx = weights(tx), wy = weights(ty);
    Vec2 out;
    for (int j = 0; j < 4; ++j) {
        const auto yy = static_cast<std::size_t>(std::clamp(iy - 1 + j, 0L, h - 1));
        Vec2 row;
        for (int i = 0; i < 4; ++i) {
            const Vec2 v = f(yy, static_cast<std::size_t>(std::clamp(ix - 1 + i, 0L, w - 1)));
            row.x += wx[i] * v.x;
            row.y += wx[i] * v.y;
        }
        out.x += wy[j] * row.x;
        out.y += wy[j] * row.y;
    }
    return out;
}

void check_grid(const BSplineWarp& warp, std::size_t height, std::size_t width) {
    if (!(warp.spacing > 0.0)) throw Error("control spacing must be positive");
    const auto need = [&](std::size_t len) {
        return static_cast<std::size_t>(std::floor(static_cast<double>(len - 1) / warp.spacing)) + 4;
    };
    if (warp.grid_rows < need(height) || warp.grid_cols < need(width) ||
        warp.control_velocities.size() != warp.grid_rows * warp.grid_cols)
        throw Error("control lattice does not cover the image");
    if (warp.integration_steps < 0) throw Error("integration steps must be >= 0");
}

}  // namespace

BSplineWarp BSplineWarp::zero(std::size_t height, std::size_t width, double spacing, int integration_steps) {
    if (height < 2 || width < 2 || !(spacing > 0.0)) throw Error("degenerate control lattice");
    BSplineWarp w;
    w.spacing = spacing;
    w.integration_steps = integration_steps;
    w.grid_rows = static_cast<std::size_t>(std::floor(static_cast<double>(height - 1) / spacing)) + 4;
    w.grid_cols = static_cast<std::size_t>(std::floor(static_cast<double>(width - 1) / spacing)) + 4;
    w.control_velocities.assign(w.grid_rows * w.grid_cols, Vec2{});
    return w;
}

DenseField evaluate_velocity(const BSplineWarp& warp, std::size_t height, std::size_t width) {
    check_grid(warp, height, width);
    const auto tx = taps(width, warp.spacing);
    const auto ty = taps(height, warp.spacing);
    DenseField out(height, width);
    for (std::size_t r = 0; r < height; ++r) {
        const SplineTap& sy = ty[r];
        for (std::size_t c = 0; c < width; ++c) {
            const SplineTap& sx = tx[c];
            Vec2 v;
            for (int a = 0; a < 4; ++a) {
                const Vec2* row = &warp.control_velocities[(sy.base + a) * warp.grid_cols + sx.base];
                double px = 0.0, py = 0.0;
                for (int b = 0; b < 4; ++b) {
                    px += sx.w[b] * row[b].x;
                    py += sx.w[b] * row[b].y;
                }
                v.x += sy.w[a] * px;
                v.y += sy.w[a] * py;
            }
            out(r, c) = v;
        }
    }
    return out;
}

std::vector<Vec2> bspline_adjoint(const BSplineWarp& warp, const DenseField& g) {
    check_grid(warp, g.height(), g.width());
    const auto tx = taps(g.width(), warp.spacing);
    const auto ty = taps(g.height(), warp.spacing);
    std::vector<Vec2> out(warp.control_velocities.size());
    for (std::size_t r = 0; r < g.height(); ++r) {
        const SplineTap& sy = ty[r];
        for (std::size_t c = 0; c < g.width(); ++c) {
            const SplineTap& sx = tx[c];
            const Vec2 v = g(r, c);
            for (int a = 0; a < 4; ++a) {
                Vec2* row = &out[(sy.base + a) * warp.grid_cols + sx.base];
                for (int b = 0; b < 4; ++b) {
                    const double w = sy.w[a] * sx.w[b];
                    row[b].x += w * v.x;
                    row[b].y += w * v.y;
                }
            }
        }
    }
    return out;
}

DenseField scaling_and_squaring(const DenseField& velocity, int steps) {
    if (steps < 0) throw Error("integration steps must be >= 0");
    DenseField u = velocity;
    if (steps == 0) return u;
    const double scale = std::ldexp(1.0, -steps);
    for (Vec2& v : u) v = scale * v;
    DenseField next(u.height(), u.width());
    for (int s = 0; s < steps; ++s) {
        for (std::size_t r = 0; r < u.height(); ++r)
            for (std::size_t c = 0; c < u.width(); ++c) {
                const Vec2 d = u(r, c);
                next(r, c) = d + sample_cubic_clamped(u, static_cast<double>(c) + d.x, static_cast<double>(r) + d.y);
            }
        std::swap(u, next);
    }
    return u;
}

DenseField integrate(const BSplineWarp& warp, std::size_t height, std::size_t width) {
    return scaling_and_squaring(evaluate_velocity(warp, height, width), warp.integration_steps);
}

DenseField compose_fields(const DenseField& outer, const DenseField& inner) {
    if (!outer.same_shape(inner)) throw Error("field dimension mismatch");
    DenseField out(outer.height(), outer.width());
    for (std::size_t r = 0; r < outer.height(); ++r)
        for (std::size_t c = 0; c < outer.width(); ++c) {
            const Vec2 d = outer(r, c);
            out(r, c) = d + sample_cubic_clamped(inner, static_cast<double>(c) + d.x, static_cast<double>(r) + d.y);
        }
    return out;
}

DenseField uniform_field(std::size_t height, std::size_t width, Vec2 displacement) {
    return DenseField(height, width, displacement);
}

DenseField add_fields(const DenseField& a, const DenseField& b) {
    if (!a.same_shape(b)) throw Error("field dimension mismatch");
    DenseField out(a.height(), a.width());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

double sample_bilinear(const Image& image, double x, double y) {
    const double fx0 = std::floor(x), fy0 = std::floor(y);
    const double fx = x - fx0, fy = y - fy0;
    const auto ix = static_cast<long>(fx0), iy = static_cast<long>(fy0);
    const long w = static_cast<long>(image.width()), h = static_cast<long>(image.height());
    auto at = [&](long yy, long xx) {
        return (xx < 0 || yy < 0 || xx >= w || yy >= h) ? 0.0
                                                        : image(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
    };
    return (1 - fy) * ((1 - fx) * at(iy, ix) + fx * at(iy, ix + 1)) +
           fy * ((1 - fx) * at(iy + 1, ix) + fx * at(iy + 1, ix + 1));
}

Image warp_image(const Image& image, const DenseField& field) {
    if (!image.same_shape(field)) throw Error("image/field dimension mismatch");
    Image out(image.height(), image.width());
    for (std::size_t r = 0; r < image.height(); ++r)
        for (std::size_t c = 0; c < image.width(); ++c) {
            const Vec2 d = field(r, c);
            out(r, c) = sample_bilinear(image, static_cast<double>(c) + d.x, static_cast<double>(r) + d.y);
        }
    return out;
}

Image warp_image(const Image& image, const DenseField& field, DenseField& grad) {
    if (!image.same_shape(field)) throw Error("image/field dimension mismatch");
    const long w = static_cast<long>(image.width()), h = static_cast<long>(image.height());
    auto at = [&](long yy, long xx) {
        return (xx < 0 || yy < 0 || xx >= w || yy >= h) ? 0.0
                                                        : image(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
    };
    Image out(image.height(), image.width());
    grad = DenseField(image.height(), image.width());
    for (std::size_t r = 0; r < image.height(); ++r)
        for (std::size_t c = 0; c < image.width(); ++c) {
            const Vec2 d = field(r, c);
            const double x = static_cast<double>(c) + d.x, y = static_cast<double>(r) + d.y;
            const double fx0 = std::floor(x), fy0 = std::floor(y);
            const double fx = x - fx0, fy = y - fy0;
            const auto ix = static_cast<long>(fx0), iy = static_cast<long>(fy0);
            const double i00 = at(iy, ix), i01 = at(iy, ix + 1), i10 = at(iy + 1, ix), i11 = at(iy + 1, ix + 1);
            out(r, c) = (1 - fy) * ((1 - fx) * i00 + fx * i01) + fy * ((1 - fx) * i10 + fx * i11);
            grad(r, c) = {(1 - fy) * (i01 - i00) + fy * (i11 - i10), (1 - fx) * (i10 - i00) + fx * (i11 - i01)};
        }
    return out;
}

Image jacobian_determinant(const DenseField& f) {
    const std::size_t h = f.height(), w = f.width();
    if (h < 2 || w < 2) throw Error("field too small for a Jacobian");
    Image det(h, w);
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
            const std::size_t cl = c == 0 ? 0 : c - 1, cr = c + 1 == w ? c : c + 1;
            const std::size_t ru = r == 0 ? 0 : r - 1, rd = r + 1 == h ? r : r + 1;
            const double dx = static_cast<double>(cr - cl), dy = static_cast<double>(rd - ru);
            const Vec2 ddx = (1.0 / dx) * (f(r, cr) - f(r, cl));
            const Vec2 ddy = (1.0 / dy) * (f(rd, c) - f(ru, c));
            det(r, c) = (1.0 + ddx.x) * (1.0 + ddy.y) - ddy.x * ddx.y;
        }
    return det;
}

double min_interior_jacobian(const DenseField& field) {
    const Image det = jacobian_determinant(field);
    double m = std::numeric_limits<double>::infinity();
    for (std::size_t r = 1; r + 1 < det.height(); ++r)
        for (std::size_t c = 1; c + 1 < det.width(); ++c) m = std::min(m, det(r, c));
    return m;
}

}  // namespace dtcmr
