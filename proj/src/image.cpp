#include "dtcmr/image.hpp"

#include <algorithm>
#include <array>

namespace dtcmr {

double max_abs(const Image& image) {
    double m = 0.0;
    for (double v : image) m = std::max(m, std::abs(v));
    return m;
}

double frobenius_norm(const Image& image) {
    double s = 0.0;
    for (double v : image) s += v * v;
    return std::sqrt(s);
}

double max_displacement(const DenseField& field) {
    double m = 0.0;
    for (const Vec2& d : field) m = std::max(m, d.norm());
    return m;
}

Image binomial_blur(const Image& image) {
    constexpr std::array<double, 5> k{1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};
    const auto h = static_cast<std::ptrdiff_t>(image.height());
    const auto w = static_cast<std::ptrdiff_t>(image.width());
    Image rows(image.height(), image.width());
    Image out(image.height(), image.width());
    for (std::ptrdiff_t r = 0; r < h; ++r)
        for (std::ptrdiff_t c = 0; c < w; ++c) {
            double v = 0.0;
            for (std::ptrdiff_t d = -2; d <= 2; ++d)
                v += k[static_cast<std::size_t>(d + 2)] * image(static_cast<std::size_t>(r), static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(c + d, 0, w - 1)));
            rows(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = v;
        }
    for (std::ptrdiff_t r = 0; r < h; ++r)
        for (std::ptrdiff_t c = 0; c < w; ++c) {
            double v = 0.0;
            for (std::ptrdiff_t d = -2; d <= 2; ++d)
                v += k[static_cast<std::size_t>(d + 2)] * rows(static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(r + d, 0, h - 1)), static_cast<std::size_t>(c));
            out(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = v;
        }
    return out;
}

}  // namespace dtcmr
