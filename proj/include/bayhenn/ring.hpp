#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

// Exact arithmetic in the negacyclic ring Z_q[X]/(X^N + 1).
//
// Multiplication runs through a negacyclic NTT (forward transform merges the
// powers of the 2N-th root psi, so pointwise products correspond to
// negacyclic convolution). All coefficients live in [0, q); there is no
// floating point anywhere in this module.

namespace bayhenn {

struct RingParams;
using RingParamsPtr = std::shared_ptr<const RingParams>;

struct RingParams {
    uint32_t n = 0;          // ring degree, power of two
    uint64_t q = 0;          // ciphertext modulus, prime, q ≡ 1 mod 2n
    uint64_t t = 0;          // plaintext modulus, prime, t < q
    uint64_t delta_q = 0;    // floor(q/t), message scaling factor
    double sigma_noise = 4.0;
    std::string preset;      // non-empty when built from a named preset

    // NTT tables: psi^brv(i) (and inverse) with Shoup precomputations,
    // n_inv = n^{-1} mod q for the inverse transform.
    std::vector<uint64_t> psi_brv, psi_brv_shoup;
    std::vector<uint64_t> psi_inv_brv, psi_inv_brv_shoup;
    uint64_t n_inv = 0, n_inv_shoup = 0;

    bool same_ring(const RingParams& o) const { return n == o.n && q == o.q && t == o.t; }
};

// Validates the invariants (power-of-two n, primality, q ≡ 1 mod 2n,
// delta_q ≥ 2) and precomputes the twiddle tables. Throws std::invalid_argument.
RingParamsPtr make_ring_params(uint32_t n, uint64_t q, uint64_t t, double sigma_noise = 4.0);

// Named presets so client and server cannot end up on mismatched ad-hoc
// parameter combinations. "bhn2048" is the default inference parameter set
// (N=2048, 54-bit q, 20-bit t, sigma 4); "test256" is a small set for tests.
RingParamsPtr ring_preset(const std::string& name);
RingParamsPtr default_ring_params();  // bhn2048

enum class Domain : uint8_t { Coeff = 0, Ntt = 1 };

class RingElement {
  public:
    RingElement() = default;
    RingElement(RingParamsPtr params, Domain d = Domain::Coeff);  // zero element
    static RingElement from_coeffs(RingParamsPtr params, std::vector<uint64_t> coeffs,
                                   Domain d = Domain::Coeff);

    bool empty() const { return params_ == nullptr; }
    const RingParams& params() const { return *params_; }
    const RingParamsPtr& params_ptr() const { return params_; }
    Domain domain() const { return domain_; }

    std::span<const uint64_t> coeffs() const { return coeffs_; }
    std::span<uint64_t> coeffs_mut() { return coeffs_; }
    uint64_t operator[](size_t i) const { return coeffs_[i]; }

    bool operator==(const RingElement& o) const {
        return domain_ == o.domain_ && coeffs_ == o.coeffs_;
    }

  private:
    RingParamsPtr params_;
    std::vector<uint64_t> coeffs_;
    Domain domain_ = Domain::Coeff;
    friend RingElement ntt_forward(const RingElement&);
    friend RingElement ntt_inverse(const RingElement&);
};

// Elementwise ring operations. Operands must share parameters and domain.
RingElement poly_add(const RingElement& a, const RingElement& b);
RingElement poly_sub(const RingElement& a, const RingElement& b);
RingElement poly_neg(const RingElement& a);

// Full negacyclic product. Coeff-domain operands are transformed internally
// (result in coefficient domain); Ntt-domain operands multiply pointwise
// (result stays in Ntt domain). Mixing domains is an error.
RingElement poly_mul(const RingElement& a, const RingElement& b);

// Explicit transforms; forward requires Coeff input, inverse requires Ntt.
// ntt_inverse(ntt_forward(a)) == a exactly.
RingElement ntt_forward(const RingElement& a);
RingElement ntt_inverse(const RingElement& a);
// Pointwise product of two Ntt-domain elements.
RingElement poly_mul_pointwise(const RingElement& a, const RingElement& b);

// Scale every coefficient by c mod q (domain preserved).
RingElement poly_scale(const RingElement& a, uint64_t c);

class Rng {
  public:
    // Entropy-seeded generator for key and noise material.
    static Rng system();
    // Deterministic generator: the same seed reproduces the same stream.
    explicit Rng(uint64_t seed);

    uint64_t next_u64();
    uint64_t uniform_below(uint64_t bound);  // unbiased, bound > 0
    double uniform01();                      // [0, 1)
    double normal(double sigma);             // Box-Muller, mean 0
    Rng fork();                              // independent child stream

  private:
    Rng() = default;
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Coefficients uniform in [0, q).
RingElement sample_uniform(const RingParamsPtr& params, Rng& rng);
// Discretized centered Gaussian with sd params->sigma_noise, reduced mod q.
RingElement sample_noise(const RingParamsPtr& params, Rng& rng);
// Ternary uniform {-1, 0, 1} mapped into [0, q).
RingElement sample_secret(const RingParamsPtr& params, Rng& rng);

// Serialization: (n, q) header, domain byte, then little-endian u64 coefficients.
void write_ring_element(std::vector<uint8_t>& out, const RingElement& e);
// Reads one element starting at `pos`, advancing it. Throws on malformed or
// truncated input or parameter mismatch.
RingElement read_ring_element(std::span<const uint8_t> in, size_t& pos,
                              const RingParamsPtr& expected);

namespace modops {
inline uint64_t add_mod(uint64_t a, uint64_t b, uint64_t q) {
    uint64_t s = a + b;  // q < 2^63 so no overflow
    return s >= q ? s - q : s;
}
inline uint64_t sub_mod(uint64_t a, uint64_t b, uint64_t q) {
    return a >= b ? a - b : a + q - b;
}
inline uint64_t mul_mod(uint64_t a, uint64_t b, uint64_t q) {
    return static_cast<uint64_t>((static_cast<unsigned __int128>(a) * b) % q);
}
uint64_t pow_mod(uint64_t base, uint64_t exp, uint64_t q);
bool is_prime_u64(uint64_t x);  // deterministic Miller-Rabin
// Shoup lazy multiplication by a constant w with precomputed
// w_shoup = floor(w * 2^64 / q); requires a < q.
inline uint64_t mul_mod_shoup(uint64_t a, uint64_t w, uint64_t w_shoup, uint64_t q) {
    uint64_t hi = static_cast<uint64_t>((static_cast<unsigned __int128>(a) * w_shoup) >> 64);
    uint64_t r = a * w - hi * q;  // wraps mod 2^64 by design
    return r >= q ? r - q : r;
}
inline uint64_t shoup_precompute(uint64_t w, uint64_t q) {
    return static_cast<uint64_t>((static_cast<unsigned __int128>(w) << 64) / q);
}
}  // namespace modops

}  // namespace bayhenn
