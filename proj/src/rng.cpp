#include "refgame/rng.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace refgame {

uint64_t mix_seed(uint64_t seed, uint64_t key) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (key + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

uint64_t Rng::below(uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
        x = engine_();
    } while (x >= limit);
    return x % n;
}

int Rng::range_int(int lo, int hi_inclusive) {
    if (hi_inclusive < lo) throw std::invalid_argument("Rng::range_int: empty range");
    return lo + static_cast<int>(below(static_cast<uint64_t>(hi_inclusive - lo) + 1));
}

double Rng::normal() {
    // u strictly inside (0,1): avoids log(0)
    double u = 0.0;
    while (u <= 0.0) u = uniform();
    const double v = uniform();
    return std::sqrt(-2.0 * std::log(u)) * std::cos(2.0 * M_PI * v);
}

double Rng::gumbel() {
    double u = 0.0;
    while (u <= 0.0) u = uniform();
    return -std::log(-std::log(u) + 1e-300);
}

size_t Rng::categorical(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    if (!(total > 0.0)) throw std::invalid_argument("Rng::categorical: weights sum to zero");
    const double r = uniform() * total;
    double c = 0.0;
    for (size_t i = 0; i < weights.size(); ++i) {
        c += weights[i];
        if (r < c) return i;
    }
    return weights.size() - 1;
}

Rng Rng::split(uint64_t key) const {
    return Rng(mix_seed(seed_, key));
}

std::string Rng::state_string() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
}

void Rng::restore_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (!is) throw std::runtime_error("Rng::restore_state: malformed state string");
}

}  // namespace refgame
