#include "bayhenn/ring.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace bayhenn {

using modops::add_mod;
using modops::mul_mod;
using modops::mul_mod_shoup;
using modops::pow_mod;
using modops::shoup_precompute;
using modops::sub_mod;

namespace modops {

uint64_t pow_mod(uint64_t base, uint64_t exp, uint64_t q) {
    uint64_t acc = 1;
    base %= q;
    while (exp) {
        if (exp & 1) acc = mul_mod(acc, base, q);
        base = mul_mod(base, base, q);
        exp >>= 1;
    }
    return acc;
}

bool is_prime_u64(uint64_t x) {
    if (x < 2) return false;
    for (uint64_t p : {2ull, 3ull, 5ull, 7ull, 11ull, 13ull, 17ull, 19ull, 23ull, 29ull, 31ull, 37ull}) {
        if (x == p) return true;
        if (x % p == 0) return false;
    }
    uint64_t d = x - 1;
    int r = 0;
    while ((d & 1) == 0) { d >>= 1; ++r; }
    // deterministic witness set for 64-bit integers
    for (uint64_t a : {2ull, 3ull, 5ull, 7ull, 11ull, 13ull, 17ull, 19ull, 23ull, 29ull, 31ull, 37ull}) {
        uint64_t y = pow_mod(a, d, x);
        if (y == 1 || y == x - 1) continue;
        bool composite = true;
        for (int i = 1; i < r; ++i) {
            y = mul_mod(y, y, x);
            if (y == x - 1) { composite = false; break; }
        }
        if (composite) return false;
    }
    return true;
}

}  // namespace modops

namespace {

uint32_t bit_reverse(uint32_t v, int bits) {
    uint32_t r = 0;
    for (int i = 0; i < bits; ++i) {
        r = (r << 1) | (v & 1);
        v >>= 1;
    }
    return r;
}

// Smallest 2n-th root of unity psi with psi^n = -1 found by trying small
// bases; deterministic for a given (q, n).
uint64_t find_psi(uint64_t q, uint32_t n) {
    uint64_t order = 2ull * n;
    if ((q - 1) % order != 0) throw std::invalid_argument("ring: q != 1 mod 2n");
    for (uint64_t base = 2;; ++base) {
        uint64_t c = pow_mod(base, (q - 1) / order, q);
        if (pow_mod(c, n, q) == q - 1) return c;
        if (base > 1000) throw std::invalid_argument("ring: no 2n-th root found");
    }
}

}  // namespace

RingParamsPtr make_ring_params(uint32_t n, uint64_t q, uint64_t t, double sigma_noise) {
    if (n == 0 || (n & (n - 1)) != 0) throw std::invalid_argument("ring: n must be a power of two");
    if (q >= (1ull << 62)) throw std::invalid_argument("ring: q too large");
    if (!modops::is_prime_u64(q)) throw std::invalid_argument("ring: q must be prime");
    if (!modops::is_prime_u64(t)) throw std::invalid_argument("ring: t must be prime");
    if (t >= q) throw std::invalid_argument("ring: t must be < q");
    if (q % (2ull * n) != 1) throw std::invalid_argument("ring: q != 1 mod 2n");
    if (q / t < 2) throw std::invalid_argument("ring: delta_q = floor(q/t) must be >= 2");
    if (sigma_noise <= 0) throw std::invalid_argument("ring: sigma must be positive");

    auto p = std::make_shared<RingParams>();
    p->n = n;
    p->q = q;
    p->t = t;
    p->delta_q = q / t;
    p->sigma_noise = sigma_noise;

    uint64_t psi = find_psi(q, n);
    uint64_t psi_inv = pow_mod(psi, q - 2, q);
    int logn = 0;
    while ((1u << logn) < n) ++logn;

    p->psi_brv.resize(n);
    p->psi_inv_brv.resize(n);
    uint64_t pw = 1, pwi = 1;
    for (uint32_t i = 0; i < n; ++i) {
        p->psi_brv[bit_reverse(i, logn)] = pw;
        p->psi_inv_brv[bit_reverse(i, logn)] = pwi;
        pw = mul_mod(pw, psi, q);
        pwi = mul_mod(pwi, psi_inv, q);
    }
    p->psi_brv_shoup.resize(n);
    p->psi_inv_brv_shoup.resize(n);
    for (uint32_t i = 0; i < n; ++i) {
        p->psi_brv_shoup[i] = shoup_precompute(p->psi_brv[i], q);
        p->psi_inv_brv_shoup[i] = shoup_precompute(p->psi_inv_brv[i], q);
    }
    p->n_inv = pow_mod(n % q, q - 2, q);
    p->n_inv_shoup = shoup_precompute(p->n_inv, q);
    return p;
}

RingParamsPtr ring_preset(const std::string& name) {
    // bhn2048: the BFV parameter set used for inference. Degree 2048 with a
    // single 54-bit prime (the conventional size for this degree at the
    // 128-bit security level) and the smallest 20-bit prime t ≡ 1 mod 2N.
    // q ≡ 1 mod t so the q-mod-t rounding term vanishes from the
    // ciphertext-plaintext product error.
    if (name == "bhn2048") {
        static RingParamsPtr p = [] {
            auto r = make_ring_params(2048, 18014292871987201ull, 557057ull, 4.0);
            const_cast<RingParams&>(*r).preset = "bhn2048";
            return r;
        }();
        return p;
    }
    if (name == "test256") {
        static RingParamsPtr p = [] {
            auto r = make_ring_params(256, 35170493358593ull, 557057ull, 4.0);
            const_cast<RingParams&>(*r).preset = "test256";
            return r;
        }();
        return p;
    }
    throw std::invalid_argument("ring: unknown preset '" + name + "'");
}

RingParamsPtr default_ring_params() { return ring_preset("bhn2048"); }

RingElement::RingElement(RingParamsPtr params, Domain d)
    : params_(std::move(params)), coeffs_(params_->n, 0), domain_(d) {}

RingElement RingElement::from_coeffs(RingParamsPtr params, std::vector<uint64_t> coeffs, Domain d) {
    if (coeffs.size() != params->n) throw std::invalid_argument("ring: coefficient count != n");
    for (uint64_t c : coeffs)
        if (c >= params->q) throw std::invalid_argument("ring: coefficient out of range");
    RingElement e;
    e.params_ = std::move(params);
    e.coeffs_ = std::move(coeffs);
    e.domain_ = d;
    return e;
}

namespace {
void require_compatible(const RingElement& a, const RingElement& b) {
    if (a.empty() || b.empty()) throw std::invalid_argument("ring: empty element");
    if (!a.params().same_ring(b.params())) throw std::invalid_argument("ring: parameter mismatch");
    if (a.domain() != b.domain()) throw std::invalid_argument("ring: domain mismatch");
}
}  // namespace

RingElement poly_add(const RingElement& a, const RingElement& b) {
    require_compatible(a, b);
    const uint64_t q = a.params().q;
    RingElement r(a.params_ptr(), a.domain());
    auto rc = r.coeffs_mut();
    auto ac = a.coeffs();
    auto bc = b.coeffs();
    for (size_t i = 0; i < ac.size(); ++i) rc[i] = add_mod(ac[i], bc[i], q);
    return r;
}

RingElement poly_sub(const RingElement& a, const RingElement& b) {
    require_compatible(a, b);
    const uint64_t q = a.params().q;
    RingElement r(a.params_ptr(), a.domain());
    auto rc = r.coeffs_mut();
    auto ac = a.coeffs();
    auto bc = b.coeffs();
    for (size_t i = 0; i < ac.size(); ++i) rc[i] = sub_mod(ac[i], bc[i], q);
    return r;
}

RingElement poly_neg(const RingElement& a) {
    if (a.empty()) throw std::invalid_argument("ring: empty element");
    const uint64_t q = a.params().q;
    RingElement r(a.params_ptr(), a.domain());
    auto rc = r.coeffs_mut();
    auto ac = a.coeffs();
    for (size_t i = 0; i < ac.size(); ++i) rc[i] = ac[i] == 0 ? 0 : q - ac[i];
    return r;
}

RingElement poly_scale(const RingElement& a, uint64_t c) {
    if (a.empty()) throw std::invalid_argument("ring: empty element");
    const uint64_t q = a.params().q;
    c %= q;
    uint64_t c_shoup = shoup_precompute(c, q);
    RingElement r(a.params_ptr(), a.domain());
    auto rc = r.coeffs_mut();
    auto ac = a.coeffs();
    for (size_t i = 0; i < ac.size(); ++i) rc[i] = mul_mod_shoup(ac[i], c, c_shoup, q);
    return r;
}

// Cooley-Tukey forward / Gentleman-Sande inverse with the psi powers merged
// into the twiddles (negacyclic convolution becomes a pointwise product).
RingElement ntt_forward(const RingElement& a) {
    if (a.empty()) throw std::invalid_argument("ring: empty element");
    if (a.domain() != Domain::Coeff) throw std::invalid_argument("ntt_forward: input not in coefficient domain");
    const RingParams& P = a.params();
    const uint64_t q = P.q;
    RingElement r = a;
    r.domain_ = Domain::Ntt;
    uint64_t* x = r.coeffs_mut().data();
    const uint32_t n = P.n;
    uint32_t t = n, m = 1;
    while (m < n) {
        t >>= 1;
        for (uint32_t i = 0; i < m; ++i) {
            uint32_t j1 = 2 * i * t;
            uint64_t w = P.psi_brv[m + i];
            uint64_t ws = P.psi_brv_shoup[m + i];
            for (uint32_t j = j1; j < j1 + t; ++j) {
                uint64_t u = x[j];
                uint64_t v = mul_mod_shoup(x[j + t], w, ws, q);
                x[j] = add_mod(u, v, q);
                x[j + t] = sub_mod(u, v, q);
            }
        }
        m <<= 1;
    }
    return r;
}

RingElement ntt_inverse(const RingElement& a) {
    if (a.empty()) throw std::invalid_argument("ring: empty element");
    if (a.domain() != Domain::Ntt) throw std::invalid_argument("ntt_inverse: input not in NTT domain");
    const RingParams& P = a.params();
    const uint64_t q = P.q;
    RingElement r = a;
    r.domain_ = Domain::Coeff;
    uint64_t* x = r.coeffs_mut().data();
    const uint32_t n = P.n;
    uint32_t t = 1, m = n;
    while (m > 1) {
        uint32_t j1 = 0;
        uint32_t h = m >> 1;
        for (uint32_t i = 0; i < h; ++i) {
            uint64_t w = P.psi_inv_brv[h + i];
            uint64_t ws = P.psi_inv_brv_shoup[h + i];
            for (uint32_t j = j1; j < j1 + t; ++j) {
                uint64_t u = x[j];
                uint64_t v = x[j + t];
                x[j] = add_mod(u, v, q);
                x[j + t] = mul_mod_shoup(sub_mod(u, v, q), w, ws, q);
            }
            j1 += 2 * t;
        }
        t <<= 1;
        m = h;
    }
    for (uint32_t i = 0; i < n; ++i) x[i] = mul_mod_shoup(x[i], P.n_inv, P.n_inv_shoup, q);
    return r;
}

RingElement poly_mul_pointwise(const RingElement& a, const RingElement& b) {
    require_compatible(a, b);
    if (a.domain() != Domain::Ntt) throw std::invalid_argument("pointwise: operands not in NTT domain");
    const uint64_t q = a.params().q;
    RingElement r(a.params_ptr(), Domain::Ntt);
    auto rc = r.coeffs_mut();
    auto ac = a.coeffs();
    auto bc = b.coeffs();
    for (size_t i = 0; i < ac.size(); ++i) rc[i] = mul_mod(ac[i], bc[i], q);
    return r;
}

RingElement poly_mul(const RingElement& a, const RingElement& b) {
    require_compatible(a, b);
    if (a.domain() == Domain::Ntt) return poly_mul_pointwise(a, b);
    return ntt_inverse(poly_mul_pointwise(ntt_forward(a), ntt_forward(b)));
}

// ---- random sampling ----

Rng Rng::system() {
    std::random_device rd;
    std::seed_seq seq{rd(), rd(), rd(), rd(), rd(), rd(), rd(), rd()};
    Rng r;
    r.gen_ = std::mt19937_64(seq);
    return r;
}

Rng::Rng(uint64_t seed) : gen_(seed) {}

uint64_t Rng::next_u64() { return gen_(); }

uint64_t Rng::uniform_below(uint64_t bound) {
    if (bound == 0) throw std::invalid_argument("rng: bound must be positive");
    // rejection sampling for an unbiased draw
    uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    uint64_t v;
    do {
        v = gen_();
    } while (v >= limit);
    return v % bound;
}

double Rng::uniform01() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
}

double Rng::normal(double sigma) {
    if (have_spare_) {
        have_spare_ = false;
        return spare_ * sigma;
    }
    // Box-Muller; u1 in (0,1] to keep the log finite
    double u1 = (static_cast<double>(gen_() >> 11) + 1.0) * 0x1.0p-53;
    double u2 = uniform01();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta) * sigma;
}

Rng Rng::fork() {
    // splitmix the drawn seed so parent and child streams decorrelate
    uint64_t s = gen_();
    s += 0x9E3779B97F4A7C15ull;
    s = (s ^ (s >> 30)) * 0xBF58476D1CE4E5B9ull;
    s = (s ^ (s >> 27)) * 0x94D049BB133111EBull;
    return Rng(s ^ (s >> 31));
}

RingElement sample_uniform(const RingParamsPtr& params, Rng& rng) {
    RingElement e(params);
    auto c = e.coeffs_mut();
    for (auto& v : c) v = rng.uniform_below(params->q);
    return e;
}

RingElement sample_noise(const RingParamsPtr& params, Rng& rng) {
    RingElement e(params);
    const uint64_t q = params->q;
    auto c = e.coeffs_mut();
    for (auto& v : c) {
        int64_t z = std::llround(rng.normal(params->sigma_noise));
        v = z >= 0 ? static_cast<uint64_t>(z) % q : q - (static_cast<uint64_t>(-z) % q);
    }
    return e;
}

RingElement sample_secret(const RingParamsPtr& params, Rng& rng) {
    RingElement e(params);
    const uint64_t q = params->q;
    auto c = e.coeffs_mut();
    for (auto& v : c) {
        uint64_t r = rng.uniform_below(3);
        v = r == 0 ? q - 1 : r - 1;  // {-1, 0, 1}
    }
    return e;
}

// ---- serialization ----

namespace {
void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
void put_u64(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
uint32_t get_u32(std::span<const uint8_t> in, size_t& pos) {
    if (pos + 4 > in.size()) throw std::runtime_error("ring: truncated element");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(in[pos + i]) << (8 * i);
    pos += 4;
    return v;
}
uint64_t get_u64(std::span<const uint8_t> in, size_t& pos) {
    if (pos + 8 > in.size()) throw std::runtime_error("ring: truncated element");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(in[pos + i]) << (8 * i);
    pos += 8;
    return v;
}
}  // namespace

void write_ring_element(std::vector<uint8_t>& out, const RingElement& e) {
    if (e.empty()) throw std::invalid_argument("ring: empty element");
    put_u32(out, e.params().n);
    put_u64(out, e.params().q);
    out.push_back(static_cast<uint8_t>(e.domain()));
    for (uint64_t c : e.coeffs()) put_u64(out, c);
}

RingElement read_ring_element(std::span<const uint8_t> in, size_t& pos,
                              const RingParamsPtr& expected) {
    uint32_t n = get_u32(in, pos);
    uint64_t q = get_u64(in, pos);
    if (n != expected->n || q != expected->q)
        throw std::runtime_error("ring: element parameters do not match session");
    if (pos >= in.size()) throw std::runtime_error("ring: truncated element");
    uint8_t dom = in[pos++];
    if (dom > 1) throw std::runtime_error("ring: bad domain flag");
    std::vector<uint64_t> coeffs(n);
    for (uint32_t i = 0; i < n; ++i) {
        coeffs[i] = get_u64(in, pos);
        if (coeffs[i] >= q) throw std::runtime_error("ring: coefficient out of range");
    }
    return RingElement::from_coeffs(expected, std::move(coeffs), static_cast<Domain>(dom));
}

}  // namespace bayhenn
