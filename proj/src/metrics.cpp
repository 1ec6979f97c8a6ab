#include "dtcmr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <set>

#include "dtcmr/diagnostics.hpp"

namespace dtcmr {
namespace {

using V3 = std::array<double, 3>;

double dot(const V3& a, const V3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
V3 cross(const V3& a, const V3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
V3 scaled(const V3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
V3 mat_vec(const Mat3& m, const V3& v) {
    return {dot(m[0], v), dot(m[1], v), dot(m[2], v)};
}

// Unit vectors u, w completing e to a right-handed orthonormal basis.
void complement(const V3& e, V3& u, V3& w) {
    if (std::abs(e[0]) > std::abs(e[1])) {
        const double inv = 1.0 / std::hypot(e[0], e[2]);
        u = {-e[2] * inv, 0.0, e[0] * inv};
    } else {
        const double inv = 1.0 / std::hypot(e[1], e[2]);
        u = {0.0, e[2] * inv, -e[1] * inv};
    }
    w = cross(e, u);
}

V3 eigenvector_for(const Mat3& a, double lambda) {
    const V3 r0{a[0][0] - lambda, a[0][1], a[0][2]};
    const V3 r1{a[1][0], a[1][1] - lambda, a[1][2]};
    const V3 r2{a[2][0], a[2][1], a[2][2] - lambda};
    const V3 c[3] = {cross(r0, r1), cross(r0, r2), cross(r1, r2)};
    int best = 0;
    double best_norm = dot(c[0], c[0]);
    for (int k = 1; k < 3; ++k) {
        const double n = dot(c[k], c[k]);
        if (n > best_norm) {
            best_norm = n;
            best = k;
        }
    }
    if (best_norm <= 0.0) return {1.0, 0.0, 0.0};
    return scaled(c[best], 1.0 / std::sqrt(best_norm));
}

double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double percentile_of(std::vector<double> v, double pct) {
    std::sort(v.begin(), v.end());
    const double pos = pct / 100.0 * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

void check_mask(const MyocardiumMask& mask, std::size_t h, std::size_t w) {
    if (mask.height() != h || mask.width() != w) throw Error("mask dimension mismatch");
}

}  // namespace

EigenSystem eig3_symmetric(const Sym3& d, const std::optional<Direction>& circumferential) {
    for (double v : d)
        if (!std::isfinite(v)) throw Error("eig3_symmetric: non-finite tensor component");
    EigenSystem out;
    double scale = 0.0;
    for (double v : d) scale = std::max(scale, std::abs(v));
    if (scale == 0.0) {
        out.values = {0.0, 0.0, 0.0};
        out.vectors = {V3{1, 0, 0}, V3{0, 1, 0}, V3{0, 0, 1}};
        return out;
    }
    Sym3 s;
    for (std::size_t k = 0; k < 6; ++k) s[k] = d[k] / scale;
    const Mat3 a = to_matrix(s);

    const double q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    const double off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
    const double b00 = a[0][0] - q, b11 = a[1][1] - q, b22 = a[2][2] - q;
    const double p2 = b00 * b00 + b11 * b11 + b22 * b22 + 2.0 * off;
    V3 e0, u, w;
    double lambda0;
    if (p2 <= 0.0) {
        out.values = {q * scale, q * scale, q * scale};
        out.vectors = {V3{1, 0, 0}, V3{0, 1, 0}, V3{0, 0, 1}};
        return out;
    }
    const double p = std::sqrt(p2 / 6.0);
    const double det = b00 * (b11 * b22 - a[1][2] * a[1][2]) - a[0][1] * (a[0][1] * b22 - a[1][2] * a[0][2]) +
                       a[0][2] * (a[0][1] * a[1][2] - b11 * a[0][2]);
    const double half_det = std::clamp(det / (2.0 * p * p * p), -1.0, 1.0);
    const double phi = std::acos(half_det) / 3.0;
    // The extreme root farther from the middle one is the better conditioned start.
    if (half_det >= 0.0)
        lambda0 = q + 2.0 * p * std::cos(phi);
    else
        lambda0 = q + 2.0 * p * std::cos(phi + 2.0 * std::numbers::pi / 3.0);
    e0 = eigenvector_for(a, lambda0);
    complement(e0, u, w);

    // Remaining pair from the 2x2 restriction to span(u, w).
    const V3 au = mat_vec(a, u), aw = mat_vec(a, w);
    const double m00 = dot(u, au), m01 = dot(u, aw), m11 = dot(w, aw);
    const double theta = 0.5 * std::atan2(2.0 * m01, m00 - m11);
    const double c = std::cos(theta), sn = std::sin(theta);
    const V3 e1{c * u[0] + sn * w[0], c * u[1] + sn * w[1], c * u[2] + sn * w[2]};
    const V3 e2{-sn * u[0] + c * w[0], -sn * u[1] + c * w[1], -sn * u[2] + c * w[2]};
    const double l1 = c * c * m00 + 2.0 * c * sn * m01 + sn * sn * m11;
    const double l2 = sn * sn * m00 - 2.0 * c * sn * m01 + c * c * m11;
    const double l0 = dot(e0, mat_vec(a, e0));

    std::array<std::pair<double, V3>, 3> pairs{{{l0, e0}, {l1, e1}, {l2, e2}}};
    std::sort(pairs.begin(), pairs.end(), [](const auto& x, const auto& y) { return x.first > y.first; });
    for (std::size_t k = 0; k < 3; ++k) {
        out.values[k] = pairs[k].first * scale;
        out.vectors[k] = pairs[k].second;
    }
    V3& e = out.vectors[0];
    double sign = 1.0;
    if (circumferential) {
        sign = dot(e, *circumferential) < 0.0 ? -1.0 : 1.0;
    } else {
        std::size_t big = 0;
        for (std::size_t k = 1; k < 3; ++k)
            if (std::abs(e[k]) > std::abs(e[big])) big = k;
        sign = e[big] < 0.0 ? -1.0 : 1.0;
    }
    e = scaled(e, sign);
    // Keep the frame right-handed.
    const V3 c12 = cross(out.vectors[0], out.vectors[1]);
    if (dot(c12, out.vectors[2]) < 0.0) out.vectors[2] = scaled(out.vectors[2], -1.0);
    return out;
}

NeReport negative_eigen_percent(const TensorField& tensor, const MyocardiumMask& mask) {
    check_mask(mask, tensor.height, tensor.width);
    NeReport report;
    for (std::size_t r = 0; r < tensor.height; ++r)
        for (std::size_t c = 0; c < tensor.width; ++c) {
            if (!mask.contains(r, c)) continue;
            ++report.counted_pixels;
            if (eig3_symmetric(tensor.at(r, c)).values[2] < 0.0) report.flagged_pixels.emplace_back(r, c);
        }
    if (report.counted_pixels == 0) throw Error("negative_eigen_percent: empty mask");
    report.ne_percent =
        100.0 * static_cast<double>(report.flagged_pixels.size()) / static_cast<double>(report.counted_pixels);
    return report;
}

Image helix_angle_map(const TensorField& tensor, const MyocardiumMask& mask) {
    check_mask(mask, tensor.height, tensor.width);
    Image ha(tensor.height, tensor.width, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t r = 0; r < tensor.height; ++r)
        for (std::size_t c = 0; c < tensor.width; ++c) {
            if (!mask.contains(r, c)) continue;
            const double rx = static_cast<double>(c) - mask.centroid.x;
            const double ry = static_cast<double>(r) - mask.centroid.y;
            const double len = std::hypot(rx, ry);
            if (len < 1e-9) continue;
            const V3 circ{-ry / len, rx / len, 0.0};
            const EigenSystem es = eig3_symmetric(tensor.at(r, c), circ);
            const V3& e = es.vectors[0];
            double angle = std::atan2(e[2], dot(e, circ)) * 180.0 / std::numbers::pi;
            if (angle > 90.0) angle -= 180.0;
            if (angle < -90.0) angle += 180.0;
            ha(r, c) = angle;
        }
    return ha;
}

HagReport hag_line_profiles(const Image& ha_map, const MyocardiumMask& mask, int n_profiles) {
    check_mask(mask, ha_map.height(), ha_map.width());
    if (n_profiles < 1) throw Error("hag_line_profiles: need at least one profile");
    if (mask.count() == 0) throw Error("hag_line_profiles: empty mask");
    const double reach = std::hypot(static_cast<double>(ha_map.height()), static_cast<double>(ha_map.width()));
    const auto h = static_cast<long>(ha_map.height()), w = static_cast<long>(ha_map.width());

    HagReport report;
    double sum_r2 = 0.0, sum_rmse = 0.0;
    for (int k = 0; k < n_profiles; ++k) {
        HagProfile prof;
        prof.angle_deg = 360.0 * k / n_profiles;
        const double a = prof.angle_deg * std::numbers::pi / 180.0;
        const double dx = std::cos(a), dy = std::sin(a);

        std::set<std::pair<long, long>> seen;
        std::vector<std::pair<double, double>> radius_ha;
        for (double t = 0.0; t <= reach; t += 0.25) {
            const long c = std::lround(mask.centroid.x + t * dx);
            const long r = std::lround(mask.centroid.y + t * dy);
            if (r < 0 || c < 0 || r >= h || c >= w) break;
            if (!seen.insert({r, c}).second) continue;
            const auto ur = static_cast<std::size_t>(r), uc = static_cast<std::size_t>(c);
            if (!mask.contains(ur, uc) || !std::isfinite(ha_map(ur, uc))) continue;
            const double rad = std::hypot(static_cast<double>(c) - mask.centroid.x, static_cast<double>(r) - mask.centroid.y);
            radius_ha.emplace_back(rad, ha_map(ur, uc));
        }
        if (radius_ha.size() < 3) {
            prof.too_short = true;
            ++report.short_count;
            report.profiles.push_back(std::move(prof));
            continue;
        }
        double rmin = radius_ha.front().first, rmax = rmin;
        for (const auto& [rad, _] : radius_ha) {
            rmin = std::min(rmin, rad);
            rmax = std::max(rmax, rad);
        }
        const double span = rmax - rmin;
        for (const auto& [rad, angle] : radius_ha)
            prof.samples.emplace_back(span > 0.0 ? 100.0 * (rad - rmin) / span : 0.0, angle);

        const auto n = static_cast<double>(prof.samples.size());
        double mx = 0.0, my = 0.0;
        for (const auto& [x, y] : prof.samples) {
            mx += x;
            my += y;
        }
        mx /= n;
        my /= n;
        double sxx = 0.0, sxy = 0.0, syy = 0.0;
        for (const auto& [x, y] : prof.samples) {
            sxx += (x - mx) * (x - mx);
            sxy += (x - mx) * (y - my);
            syy += (y - my) * (y - my);
        }
        prof.slope = sxx > 0.0 ? sxy / sxx : 0.0;
        prof.intercept = my - prof.slope * mx;
        double ss_res = 0.0;
        for (const auto& [x, y] : prof.samples) {
            const double e = y - (prof.intercept + prof.slope * x);
            ss_res += e * e;
        }
        prof.r2 = syy > 0.0 ? 1.0 - ss_res / syy : 0.0;
        prof.rmse = std::sqrt(ss_res / n);
        prof.included = prof.slope < 0.0 && prof.r2 > 0.3;
        if (prof.included) {
            ++report.included_count;
            sum_r2 += prof.r2;
            sum_rmse += prof.rmse;
        }
        report.profiles.push_back(std::move(prof));
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    const auto count = static_cast<double>(report.included_count);
    report.mean_r2 = report.included_count ? sum_r2 / count : nan;
    report.mean_rmse = report.included_count ? sum_rmse / count : nan;
    return report;
}

FieldErrorStats field_error(const DenseField& recovered, const DenseField& truth, const MyocardiumMask* mask) {
    if (!recovered.same_shape(truth)) throw Error("field_error: dimension mismatch");
    if (mask) check_mask(*mask, truth.height(), truth.width());
    std::vector<double> err;
    for (std::size_t p = 0; p < truth.size(); ++p) {
        if (mask && mask->labels[p] == 0) continue;
        err.push_back((recovered[p] - truth[p]).norm());
    }
    if (err.empty()) throw Error("field_error: no pixels to compare");
    FieldErrorStats s;
    s.pixels = err.size();
    double sum = 0.0;
    for (double e : err) sum += e;
    s.mean = sum / static_cast<double>(err.size());
    s.median = median_of(err);
    s.p95 = percentile_of(err, 95.0);
    return s;
}

FieldErrorStats field_error(const std::vector<DenseField>& recovered, const std::vector<DenseField>& truth,
                            const MyocardiumMask* mask) {
    if (recovered.size() != truth.size()) throw Error("field_error: field count mismatch");
    std::vector<double> err;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (!recovered[i].same_shape(truth[i])) throw Error("field_error: dimension mismatch");
        if (mask) check_mask(*mask, truth[i].height(), truth[i].width());
        for (std::size_t p = 0; p < truth[i].size(); ++p) {
            if (mask && mask->labels[p] == 0) continue;
            err.push_back((recovered[i][p] - truth[i][p]).norm());
        }
    }
    if (err.empty()) throw Error("field_error: no pixels to compare");
    FieldErrorStats s;
    s.pixels = err.size();
    double sum = 0.0;
    for (double e : err) sum += e;
    s.mean = sum / static_cast<double>(err.size());
    s.median = median_of(err);
    s.p95 = percentile_of(err, 95.0);
    return s;
}

}  // namespace dtcmr
