#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bayhenn/ring.hpp"

// Textbook public-key BFV with delta_q message scaling: keygen, randomized
// encryption, rounding decryption, ciphertext-ciphertext addition and
// ciphertext-plaintext multiplication. There is no relinearization, modulus
// switching or rotation machinery; the protocol re-encrypts every round, so
// a depth of one plaintext multiplication is all a ciphertext ever carries
// (tracked by the level flag).

namespace bayhenn {

class Plaintext {
  public:
    Plaintext() = default;
    // coeffs must all be < t (messages are residues mod t; signed values are
    // mapped via [-t/2, t/2) -> [0, t) by the encoding layer).
    static Plaintext from_coeffs(RingParamsPtr params, std::vector<uint64_t> coeffs);
    static Plaintext zero(RingParamsPtr params);

    const RingElement& poly() const { return poly_; }
    const RingParams& params() const { return poly_.params(); }
    std::span<const uint64_t> coeffs() const { return poly_.coeffs(); }
    bool operator==(const Plaintext& o) const { return poly_ == o.poly_; }

  private:
    RingElement poly_;  // coefficient domain, all values < t
};

struct SecretKey {
    RingElement s;      // ternary, coefficient domain
    RingElement s_ntt;  // cached transform for decryption
};

struct PublicKey {
    RingElement p0, p1;  // p0 = -(p1*s + e), coefficient domain
};

enum class CtLevel : uint8_t { Fresh = 0, PostMultiply = 1 };

struct Ciphertext {
    RingElement c0, c1;  // both share one domain
    CtLevel level = CtLevel::Fresh;

    Domain domain() const { return c0.domain(); }
    const RingParams& params() const { return c0.params(); }
};

std::pair<PublicKey, SecretKey> keygen(const RingParamsPtr& params, Rng& rng);

Ciphertext encrypt(const Plaintext& m, const PublicKey& pk, Rng& rng);
Plaintext decrypt(const Ciphertext& ct, const SecretKey& sk);

// Ciphertext-ciphertext addition: component-wise in the ring; the result
// level is the max of the two.
Ciphertext ct_add(const Ciphertext& a, const Ciphertext& b);
// Ciphertext-plaintext multiplication: both components multiplied by p in
// the ring. The multiplier is lifted to its centered mod-q representative
// internally so noise scales with the signed magnitude, not the raw
// residue. Rejects ciphertexts that already carry a multiplication.
Ciphertext ct_pt_mul(const Ciphertext& a, const Plaintext& p);

// Domain conversions for the evaluation hot path (exact, reversible).
Ciphertext ct_to_ntt(const Ciphertext& ct);
Ciphertext ct_to_coeff(const Ciphertext& ct);

// Precomputed multiplier for repeated ct_pt_mul with the same plaintext:
// centered lift followed by the forward transform.
RingElement multiplier_ntt(const Plaintext& p);
// Pointwise product of an NTT-domain fresh ciphertext with a precomputed
// multiplier; same contract as ct_pt_mul.
Ciphertext ct_pt_mul_ntt(const Ciphertext& a_ntt, const RingElement& mult_ntt);

// Holds NTT-transformed key material so repeated encryptions skip two
// forward transforms per call. encrypt() above is the one-shot form.
class Encryptor {
  public:
    Encryptor(RingParamsPtr params, const PublicKey& pk);
    Ciphertext encrypt(const Plaintext& m, Rng& rng) const;

  private:
    RingParamsPtr params_;
    RingElement p0_ntt_, p1_ntt_;
};

// Diagnostic for tests only: infinity norm of the decryption noise
// (distance of c0 + c1*s from the nearest valid message embedding).
uint64_t noise_infnorm(const Ciphertext& ct, const SecretKey& sk);
// Remaining headroom in bits: log2((delta_q/2) / noise). Negative means the
// ciphertext is already corrupt.
double noise_budget_bits(const Ciphertext& ct, const SecretKey& sk);

// ---- wire formats (versioned, little-endian, bit-exact) ----
// Ciphertext: magic "BHCT", version, level, n, q, t, then raw c0 and c1
// coefficient arrays (always serialized in coefficient domain):
// total = 26 + 2*n*8 bytes.
std::vector<uint8_t> serialize(const Ciphertext& ct);
Ciphertext deserialize_ciphertext(std::span<const uint8_t> in, const RingParamsPtr& session);
size_t ciphertext_wire_size(const RingParams& params);
// Bit-packed size if coefficients were stored at ceil(log2 q) bits
// (reported by the benchmark alongside actual bytes).
size_t ciphertext_bitpacked_size(const RingParams& params);

std::vector<uint8_t> serialize(const PublicKey& pk, const RingParams& params);
PublicKey deserialize_public_key(std::span<const uint8_t> in, const RingParamsPtr& session);
size_t public_key_wire_size(const RingParams& params);

// Key files on disk use the wire encodings (secret keys are files only:
// no protocol message can carry one).
void save_secret_key(const std::string& path, const SecretKey& sk, const RingParams& params);
SecretKey load_secret_key(const std::string& path, const RingParamsPtr& session);
void save_public_key(const std::string& path, const PublicKey& pk, const RingParams& params);
PublicKey load_public_key(const std::string& path, const RingParamsPtr& session);

}  // namespace bayhenn
