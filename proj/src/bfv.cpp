#include "bayhenn/bfv.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace bayhenn {

namespace {

// Centered lift into [0, q): residues above t/2 represent negatives.
uint64_t lift_centered(uint64_t v, uint64_t t, uint64_t q) {
    return v <= t / 2 ? v : q - (t - v);
}

// delta_q * centered(m) mod q, the message embedding used by encryption.
RingElement embed_message(const Plaintext& m) {
    const RingParams& P = m.params();
    RingElement e(m.poly().params_ptr(), Domain::Coeff);
    auto out = e.coeffs_mut();
    auto in = m.coeffs();
    for (size_t i = 0; i < in.size(); ++i) {
        uint64_t c = lift_centered(in[i], P.t, P.q);
        out[i] = modops::mul_mod(c, P.delta_q, P.q);
    }
    return e;
}

RingElement lift_multiplier(const Plaintext& p) {
    const RingParams& P = p.params();
    RingElement e(p.poly().params_ptr(), Domain::Coeff);
    auto out = e.coeffs_mut();
    auto in = p.coeffs();
    for (size_t i = 0; i < in.size(); ++i) out[i] = lift_centered(in[i], P.t, P.q);
    return e;
}

// round(t*v/q) mod t per coefficient.
uint64_t scale_round(uint64_t v, uint64_t t, uint64_t q) {
    unsigned __int128 num = static_cast<unsigned __int128>(v) * t + q / 2;
    return static_cast<uint64_t>(num / q) % t;
}

void require_same_ring(const RingParams& a, const RingParams& b, const char* what) {
    if (!a.same_ring(b)) throw std::invalid_argument(std::string(what) + ": parameter mismatch");
}

}  // namespace

Plaintext Plaintext::from_coeffs(RingParamsPtr params, std::vector<uint64_t> coeffs) {
    for (uint64_t c : coeffs)
        if (c >= params->t) throw std::invalid_argument("plaintext: coefficient >= t");
    Plaintext m;
    m.poly_ = RingElement::from_coeffs(std::move(params), std::move(coeffs), Domain::Coeff);
    return m;
}

Plaintext Plaintext::zero(RingParamsPtr params) {
    Plaintext m;
    m.poly_ = RingElement(std::move(params), Domain::Coeff);
    return m;
}

std::pair<PublicKey, SecretKey> keygen(const RingParamsPtr& params, Rng& rng) {
    RingElement s = sample_secret(params, rng);
    RingElement a = sample_uniform(params, rng);
    RingElement e = sample_noise(params, rng);
    // p0 = -(a*s + e), p1 = a
    RingElement p0 = poly_neg(poly_add(poly_mul(a, s), e));
    SecretKey sk{s, ntt_forward(s)};
    PublicKey pk{std::move(p0), std::move(a)};
    return {std::move(pk), std::move(sk)};
}

Encryptor::Encryptor(RingParamsPtr params, const PublicKey& pk)
    : params_(std::move(params)),
      p0_ntt_(ntt_forward(pk.p0)),
      p1_ntt_(ntt_forward(pk.p1)) {
    require_same_ring(*params_, pk.p0.params(), "encryptor");
}

Ciphertext Encryptor::encrypt(const Plaintext& m, Rng& rng) const {
    require_same_ring(*params_, m.params(), "encrypt");
    RingElement u_ntt = ntt_forward(sample_secret(params_, rng));
    RingElement e1 = sample_noise(params_, rng);
    RingElement e2 = sample_noise(params_, rng);
    RingElement c0 = poly_add(poly_add(ntt_inverse(poly_mul_pointwise(p0_ntt_, u_ntt)), e1),
                              embed_message(m));
    RingElement c1 = poly_add(ntt_inverse(poly_mul_pointwise(p1_ntt_, u_ntt)), e2);
    return Ciphertext{std::move(c0), std::move(c1), CtLevel::Fresh};
}

Ciphertext encrypt(const Plaintext& m, const PublicKey& pk, Rng& rng) {
    Encryptor enc(m.poly().params_ptr(), pk);
    return enc.encrypt(m, rng);
}

Plaintext decrypt(const Ciphertext& ct, const SecretKey& sk) {
    const RingParams& P = ct.params();
    require_same_ring(P, sk.s.params(), "decrypt");
    RingElement v;
    if (ct.domain() == Domain::Ntt) {
        v = ntt_inverse(poly_add(ct.c0, poly_mul_pointwise(ct.c1, sk.s_ntt)));
    } else {
        v = poly_add(ct.c0, ntt_inverse(poly_mul_pointwise(ntt_forward(ct.c1), sk.s_ntt)));
    }
    std::vector<uint64_t> out(P.n);
    auto vc = v.coeffs();
    for (size_t i = 0; i < out.size(); ++i) out[i] = scale_round(vc[i], P.t, P.q);
    return Plaintext::from_coeffs(ct.c0.params_ptr(), std::move(out));
}

Ciphertext ct_add(const Ciphertext& a, const Ciphertext& b) {
    require_same_ring(a.params(), b.params(), "ct_add");
    CtLevel lvl = (a.level == CtLevel::PostMultiply || b.level == CtLevel::PostMultiply)
                      ? CtLevel::PostMultiply
                      : CtLevel::Fresh;
    return Ciphertext{poly_add(a.c0, b.c0), poly_add(a.c1, b.c1), lvl};
}

Ciphertext ct_pt_mul(const Ciphertext& a, const Plaintext& p) {
    require_same_ring(a.params(), p.params(), "ct_pt_mul");
    if (a.level == CtLevel::PostMultiply)
        throw std::invalid_argument("ct_pt_mul: ciphertext already carries a multiplication");
    RingElement lifted = lift_multiplier(p);
    if (a.domain() == Domain::Ntt) {
        RingElement p_ntt = ntt_forward(lifted);
        return Ciphertext{poly_mul_pointwise(a.c0, p_ntt), poly_mul_pointwise(a.c1, p_ntt),
                          CtLevel::PostMultiply};
    }
    return Ciphertext{poly_mul(a.c0, lifted), poly_mul(a.c1, lifted), CtLevel::PostMultiply};
}

Ciphertext ct_to_ntt(const Ciphertext& ct) {
    if (ct.domain() == Domain::Ntt) return ct;
    return Ciphertext{ntt_forward(ct.c0), ntt_forward(ct.c1), ct.level};
}

RingElement multiplier_ntt(const Plaintext& p) { return ntt_forward(lift_multiplier(p)); }

Ciphertext ct_pt_mul_ntt(const Ciphertext& a_ntt, const RingElement& mult_ntt) {
    if (a_ntt.domain() != Domain::Ntt || mult_ntt.domain() != Domain::Ntt)
        throw std::invalid_argument("ct_pt_mul_ntt: operands must be in NTT domain");
    if (a_ntt.level == CtLevel::PostMultiply)
        throw std::invalid_argument("ct_pt_mul_ntt: ciphertext already carries a multiplication");
    return Ciphertext{poly_mul_pointwise(a_ntt.c0, mult_ntt), poly_mul_pointwise(a_ntt.c1, mult_ntt),
                      CtLevel::PostMultiply};
}

Ciphertext ct_to_coeff(const Ciphertext& ct) {
    if (ct.domain() == Domain::Coeff) return ct;
    return Ciphertext{ntt_inverse(ct.c0), ntt_inverse(ct.c1), ct.level};
}

uint64_t noise_infnorm(const Ciphertext& ct, const SecretKey& sk) {
    const RingParams& P = ct.params();
    Ciphertext c = ct_to_coeff(ct);
    RingElement v = poly_add(c.c0, ntt_inverse(poly_mul_pointwise(ntt_forward(c.c1), sk.s_ntt)));
    uint64_t worst = 0;
    for (uint64_t vi : v.coeffs()) {
        uint64_t m = scale_round(vi, P.t, P.q);
        uint64_t embedded = modops::mul_mod(lift_centered(m, P.t, P.q), P.delta_q, P.q);
        uint64_t d = modops::sub_mod(vi, embedded, P.q);
        uint64_t mag = d > P.q / 2 ? P.q - d : d;
        worst = std::max(worst, mag);
    }
    return worst;
}

double noise_budget_bits(const Ciphertext& ct, const SecretKey& sk) {
    uint64_t noise = noise_infnorm(ct, sk);
    double half_delta = static_cast<double>(ct.params().delta_q) / 2.0;
    if (noise == 0) return std::log2(half_delta);
    return std::log2(half_delta / static_cast<double>(noise));
}

// ---- serialization ----

namespace {

constexpr uint32_t kMagicCiphertext = 0x54434842;  // "BHCT"
constexpr uint32_t kMagicPublicKey = 0x4B504842;   // "BHPK"
constexpr uint32_t kMagicSecretKey = 0x4B534842;   // "BHSK"
constexpr uint8_t kWireVersion = 1;

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
void put_u64(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
uint32_t get_u32(std::span<const uint8_t> in, size_t& pos) {
    if (pos + 4 > in.size()) throw std::runtime_error("bfv: truncated payload");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(in[pos + i]) << (8 * i);
    pos += 4;
    return v;
}
uint64_t get_u64(std::span<const uint8_t> in, size_t& pos) {
    if (pos + 8 > in.size()) throw std::runtime_error("bfv: truncated payload");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(in[pos + i]) << (8 * i);
    pos += 8;
    return v;
}

void put_coeffs(std::vector<uint8_t>& out, const RingElement& e) {
    for (uint64_t c : e.coeffs()) put_u64(out, c);
}

RingElement get_coeffs(std::span<const uint8_t> in, size_t& pos, const RingParamsPtr& params) {
    std::vector<uint64_t> coeffs(params->n);
    for (uint32_t i = 0; i < params->n; ++i) {
        coeffs[i] = get_u64(in, pos);
        if (coeffs[i] >= params->q) throw std::runtime_error("bfv: coefficient out of range");
    }
    return RingElement::from_coeffs(params, std::move(coeffs), Domain::Coeff);
}

// Shared header: magic, version, flag byte, n, q, t.
void put_header(std::vector<uint8_t>& out, uint32_t magic, uint8_t flag, const RingParams& P) {
    put_u32(out, magic);
    out.push_back(kWireVersion);
    out.push_back(flag);
    put_u32(out, P.n);
    put_u64(out, P.q);
    put_u64(out, P.t);
}

uint8_t check_header(std::span<const uint8_t> in, size_t& pos, uint32_t magic,
                     const RingParams& P) {
    if (get_u32(in, pos) != magic) throw std::runtime_error("bfv: bad magic");
    if (pos + 2 > in.size()) throw std::runtime_error("bfv: truncated payload");
    uint8_t version = in[pos++];
    if (version != kWireVersion) throw std::runtime_error("bfv: unsupported wire version");
    uint8_t flag = in[pos++];
    uint32_t n = get_u32(in, pos);
    uint64_t q = get_u64(in, pos);
    uint64_t t = get_u64(in, pos);
    if (n != P.n || q != P.q || t != P.t)
        throw std::runtime_error("bfv: parameters do not match session");
    return flag;
}

constexpr size_t kHeaderSize = 4 + 1 + 1 + 4 + 8 + 8;

}  // namespace

size_t ciphertext_wire_size(const RingParams& params) {
    return kHeaderSize + 2ull * params.n * 8;
}

size_t ciphertext_bitpacked_size(const RingParams& params) {
    uint32_t bits = 0;
    while ((params.q >> bits) != 0) ++bits;
    return kHeaderSize + (2ull * params.n * bits + 7) / 8;
}

size_t public_key_wire_size(const RingParams& params) {
    return kHeaderSize + 2ull * params.n * 8;
}

std::vector<uint8_t> serialize(const Ciphertext& ct) {
    Ciphertext c = ct_to_coeff(ct);  // canonical form on the wire
    std::vector<uint8_t> out;
    out.reserve(ciphertext_wire_size(c.params()));
    put_header(out, kMagicCiphertext, static_cast<uint8_t>(c.level), c.params());
    put_coeffs(out, c.c0);
    put_coeffs(out, c.c1);
    return out;
}

Ciphertext deserialize_ciphertext(std::span<const uint8_t> in, const RingParamsPtr& session) {
    size_t pos = 0;
    uint8_t flag = check_header(in, pos, kMagicCiphertext, *session);
    if (flag > 1) throw std::runtime_error("bfv: bad level flag");
    RingElement c0 = get_coeffs(in, pos, session);
    RingElement c1 = get_coeffs(in, pos, session);
    if (pos != in.size()) throw std::runtime_error("bfv: trailing bytes in ciphertext");
    return Ciphertext{std::move(c0), std::move(c1), static_cast<CtLevel>(flag)};
}

std::vector<uint8_t> serialize(const PublicKey& pk, const RingParams& params) {
    std::vector<uint8_t> out;
    out.reserve(public_key_wire_size(params));
    put_header(out, kMagicPublicKey, 0, params);
    put_coeffs(out, pk.p0);
    put_coeffs(out, pk.p1);
    return out;
}

PublicKey deserialize_public_key(std::span<const uint8_t> in, const RingParamsPtr& session) {
    size_t pos = 0;
    check_header(in, pos, kMagicPublicKey, *session);
    RingElement p0 = get_coeffs(in, pos, session);
    RingElement p1 = get_coeffs(in, pos, session);
    if (pos != in.size()) throw std::runtime_error("bfv: trailing bytes in public key");
    return PublicKey{std::move(p0), std::move(p1)};
}

namespace {
void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("bfv: cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("bfv: short write to '" + path + "'");
}
std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("bfv: cannot open '" + path + "'");
    return std::vector<uint8_t>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}
}  // namespace

void save_secret_key(const std::string& path, const SecretKey& sk, const RingParams& params) {
    std::vector<uint8_t> out;
    put_header(out, kMagicSecretKey, 0, params);
    put_coeffs(out, sk.s);
    write_file(path, out);
}

SecretKey load_secret_key(const std::string& path, const RingParamsPtr& session) {
    std::vector<uint8_t> in = read_file(path);
    size_t pos = 0;
    check_header(in, pos, kMagicSecretKey, *session);
    RingElement s = get_coeffs(in, pos, session);
    if (pos != in.size()) throw std::runtime_error("bfv: trailing bytes in secret key");
    RingElement s_ntt = ntt_forward(s);
    return SecretKey{std::move(s), std::move(s_ntt)};
}

void save_public_key(const std::string& path, const PublicKey& pk, const RingParams& params) {
    write_file(path, serialize(pk, params));
}

PublicKey load_public_key(const std::string& path, const RingParamsPtr& session) {
    std::vector<uint8_t> in = read_file(path);
    return deserialize_public_key(in, session);
}

}  // namespace bayhenn

