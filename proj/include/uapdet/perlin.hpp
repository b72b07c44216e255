#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>

#include "uapdet/tensor.hpp"

namespace uapdet {

// Unit gradient assigned to an integer lattice point.
using LatticeGradient = std::function<void(int64_t ix, int64_t iy, float& gx, float& gy)>;

// Default lattice gradients: a seeded integer hash chooses an angle.
inline LatticeGradient hashed_gradients(uint64_t seed) {
    return [seed](int64_t ix, int64_t iy, float& gx, float& gy) {
        uint64_t h = static_cast<uint64_t>(ix) * 0x9e3779b97f4a7c15ull ^
                     static_cast<uint64_t>(iy) * 0xc2b2ae3d27d4eb4full ^ seed;
        h ^= h >> 30;
        h *= 0xbf58476d1ce4e5b9ull;
        h ^= h >> 27;
        h *= 0x94d049bb133111ebull;
        h ^= h >> 31;
        const float angle = static_cast<float>(h >> 40) * 0x1.0p-24f * 2.0f *
                            std::numbers::pi_v<float>;
        gx = std::cos(angle);
        gy = std::sin(angle);
    };
}

namespace detail {
// classic quintic fade, zero slope at the lattice points
inline float fade(float t) { return t * t * t * (t * (t * 6.0f - 15.0f) + 10.0f); }
inline float lerp(float a, float b, float t) { return a + t * (b - a); }
}  // namespace detail

// 2D gradient-lattice noise at lattice coordinates (x, y).
inline float perlin2d(float x, float y, const LatticeGradient& grad) {
    const int64_t x0 = static_cast<int64_t>(std::floor(x));
    const int64_t y0 = static_cast<int64_t>(std::floor(y));
    const float fx = x - static_cast<float>(x0);
    const float fy = y - static_cast<float>(y0);

    float g00x, g00y, g10x, g10y, g01x, g01y, g11x, g11y;
    grad(x0, y0, g00x, g00y);
    grad(x0 + 1, y0, g10x, g10y);
    grad(x0, y0 + 1, g01x, g01y);
    grad(x0 + 1, y0 + 1, g11x, g11y);

    const float n00 = g00x * fx + g00y * fy;
    const float n10 = g10x * (fx - 1.0f) + g10y * fy;
    const float n01 = g01x * fx + g01y * (fy - 1.0f);
    const float n11 = g11x * (fx - 1.0f) + g11y * (fy - 1.0f);

    const float u = detail::fade(fx);
    const float v = detail::fade(fy);
    return detail::lerp(detail::lerp(n00, n10, u), detail::lerp(n01, n11, u), v);
}

// Procedural noise image: sign(sin(perlin(x/wl_x, y/wl_y) * 2*pi*phi)) * eps,
// with sign(0) taken as +1 so a degenerate (zero-gradient) lattice gives a
// constant +eps field.
inline Tensor perlin_sine_mask(int64_t H, int64_t W, float wavelength_x, float wavelength_y,
                               float phi_sine, float eps, const LatticeGradient& grad) {
    if (wavelength_x <= 0.0f || wavelength_y <= 0.0f)
        throw ArgumentError("perlin_sine_mask: wavelengths must be positive");
    Tensor out({H, W});
    for (int64_t y = 0; y < H; ++y) {
        for (int64_t x = 0; x < W; ++x) {
            const float p = perlin2d(static_cast<float>(x) / wavelength_x,
                                     static_cast<float>(y) / wavelength_y, grad);
            const float s = std::sin(p * 2.0f * std::numbers::pi_v<float> * phi_sine);
            out.at(y, x) = (s < 0.0f ? -1.0f : 1.0f) * eps;
        }
    }
    return out;
}

}  // namespace uapdet
