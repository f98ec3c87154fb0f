#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "bayhenn/bfv.hpp"
#include "bayhenn/errors.hpp"
#include "bayhenn/ring.hpp"

// The floating-point <-> ring bridge. Activations and weight rows are
// fixed-point quantized and packed into polynomial coefficients so that one
// ciphertext-plaintext multiplication evaluates many inner products at once:
// the input vector sits in coefficients 0..d-1, weight row j is stored
// reversed at offset j*d, and the negacyclic product then carries
// <a, w_j> at coefficient (j+1)*d - 1.

namespace bayhenn {

struct FixedPointScale {
    uint32_t log2_delta_a = 6;  // activation scale 2^6
    uint32_t log2_delta_w = 6;  // weight scale 2^6
    double clamp_bound = 8.0;   // maximum representable magnitude C

    uint64_t delta_a() const { return 1ull << log2_delta_a; }
    uint64_t delta_w() const { return 1ull << log2_delta_w; }
    uint64_t delta_zz() const { return 1ull << (log2_delta_a + log2_delta_w); }
    bool operator==(const FixedPointScale&) const = default;
};

struct QuantStats {
    uint64_t saturated = 0;  // inputs clamped to +-clamp_bound
};

// round-half-away-from-zero (fixed tie-break), clamp to [-clamp, clamp],
// map signed results into [0, t).
std::vector<uint64_t> quantize(std::span<const double> x, uint64_t delta, double clamp,
                               uint64_t t, QuantStats* stats = nullptr);
std::vector<double> dequantize(std::span<const uint64_t> v, uint64_t delta, uint64_t t);
// Residue centered into [-t/2, t/2).
int64_t center_residue(uint64_t v, uint64_t t);

struct PackedVector {
    uint32_t d = 0;  // source length; coefficients >= d are zero
    Plaintext pt;
};

PackedVector pack_vector(std::span<const double> a, const FixedPointScale& scale,
                         const RingParamsPtr& params, QuantStats* stats = nullptr);
// Layout roundtrip without crypto: reads back the quantized values.
std::vector<double> unpack_vector(const PackedVector& v, const FixedPointScale& scale);

struct OutputMap {
    std::vector<uint32_t> targets;  // strictly increasing, < N
};

// Rows per plaintext at width d. The closed form floor((N-d+1)/d), with a
// floor of one: a single row at offset 0 is always safe because wrapped
// monomials land strictly below the target coefficient d-1.
uint32_t block_capacity(uint32_t n, uint32_t d);

struct PackedWeightBlock {
    uint32_t d = 0;
    uint32_t rows = 0;
    Plaintext pt;
    OutputMap map;  // target coefficient (j+1)*d - 1 for row j
};

// rows_flat is row_count x d, row-major.
PackedWeightBlock pack_weight_rows(std::span<const double> rows_flat, uint32_t row_count,
                                   uint32_t d, const FixedPointScale& scale,
                                   const RingParamsPtr& params);

// Biases quantized at delta_a*delta_w, placed exactly at the map's targets.
Plaintext pack_bias(std::span<const double> b, const OutputMap& map,
                    const FixedPointScale& scale, const RingParamsPtr& params);

// Raw centered inner products at the target coefficients, still carrying the
// combined scale delta_a*delta_w.
std::vector<int64_t> extract_raw(const Plaintext& p, const OutputMap& map);
// Centered and divided by the combined scale.
std::vector<double> extract_outputs(const Plaintext& p, const OutputMap& map,
                                    const FixedPointScale& scale);

// How a linear layer maps onto ciphertexts. Inputs wider than N are split
// into chunk_count slices of chunk_width (the last one zero-padded); each
// chunk is one input ciphertext, per-chunk partial products are combined
// under encryption with ct_add. Output neurons are grouped into blocks of
// block_capacity rows; each block is one output ciphertext.
struct LayerPlan {
    uint32_t d_in = 0, n_out = 0;
    uint32_t chunk_count = 0, chunk_width = 0;
    uint32_t block_capacity = 0, block_count = 0;

    uint32_t input_cts_per_sample() const { return chunk_count; }
    uint32_t output_cts_per_sample() const { return block_count; }
    uint32_t rows_in_block(uint32_t b) const;
    uint32_t row_begin(uint32_t b) const { return b * block_capacity; }
    OutputMap map_for_block(uint32_t b) const;
    bool operator==(const LayerPlan&) const = default;
};

LayerPlan plan_layer(uint32_t d_in, uint32_t n_out, uint32_t n);

// Plan-driven packing helpers shared by the client and server paths.
// Input side: one PackedVector per chunk (zero-padded slices).
std::vector<PackedVector> pack_layer_input(std::span<const double> a, const LayerPlan& plan,
                                           const FixedPointScale& scale,
                                           const RingParamsPtr& params,
                                           QuantStats* stats = nullptr);
// Weight side: block b restricted to chunk c's input columns.
// W is n_out x d_in row-major.
PackedWeightBlock pack_layer_weights(std::span<const double> W, const LayerPlan& plan,
                                     uint32_t block, uint32_t chunk,
                                     const FixedPointScale& scale, const RingParamsPtr& params);
Plaintext pack_layer_bias(std::span<const double> bias, const LayerPlan& plan, uint32_t block,
                          const FixedPointScale& scale, const RingParamsPtr& params);

// Empirical per-layer ranges recorded at training time.
struct LayerRanges {
    double max_abs_in = 0;  // max |a^(i-1)| seen
    double max_abs_w = 0;   // max |W|, |b|
    double max_abs_z = 0;   // max |z^(i)| seen
};

// Model-load validation: the accumulated quantized magnitude (with a safety
// margin on max|z|) plus worst-case rounding error must stay below t/2.
// Without empirical ranges the conservative bound d*(C*da)*(C*dw) < t/2
// applies, which rejects wide layers by design. Throws ConfigError.
void check_layer_headroom(const LayerPlan& plan, const FixedPointScale& scale, uint64_t t,
                          const std::optional<LayerRanges>& ranges);

}  // namespace bayhenn
