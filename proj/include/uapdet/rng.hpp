#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace uapdet {

// Small deterministic generator (splitmix64). Every seeded component of the
// pipeline uses this so that runs are reproducible byte-for-byte.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    uint64_t below(uint64_t n) { return next() % n; }

    // uniform in [0, 1)
    float uniform() { return static_cast<float>(next() >> 40) * 0x1.0p-24f; }

    float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller
    float normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        float u1 = uniform();
        while (u1 <= 1e-12f) u1 = uniform();
        const float u2 = uniform();
        const float r = std::sqrt(-2.0f * std::log(u1));
        const float theta = 2.0f * std::numbers::pi_v<float> * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t state_;
    float spare_ = 0.0f;
    bool have_spare_ = false;
};

}  // namespace uapdet
