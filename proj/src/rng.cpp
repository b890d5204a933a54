#include "ldp/rng.hpp"

#include "ldp/errors.hpp"

namespace ldp {

uint64_t Rng::below(uint64_t n) {
    if (n == 0) {
        throw ContractError("Rng::below: n must be positive");
    }
    // Rejection sampling over the largest multiple of n that fits in 64 bits.
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
        x = eng_();
    } while (x >= limit);
    return x % n;
}

uint64_t Rng::mix(uint64_t a, uint64_t b) {
    // splitmix64 finalizer over the combined words.
    uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace ldp
