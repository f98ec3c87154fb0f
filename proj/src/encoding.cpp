#include "bayhenn/encoding.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace bayhenn {

namespace {
uint64_t map_signed(int64_t v, uint64_t t) {
    return v >= 0 ? static_cast<uint64_t>(v) : t - static_cast<uint64_t>(-v);
}
}  // namespace

std::vector<uint64_t> quantize(std::span<const double> x, uint64_t delta, double clamp,
                               uint64_t t, QuantStats* stats) {
    std::vector<uint64_t> out(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        double v = x[i];
        if (v > clamp) {
            v = clamp;
            if (stats) ++stats->saturated;
        } else if (v < -clamp) {
            v = -clamp;
            if (stats) ++stats->saturated;
        }
        int64_t q = std::llround(v * static_cast<double>(delta));  // half away from zero
        out[i] = map_signed(q, t);
    }
    return out;
}

int64_t center_residue(uint64_t v, uint64_t t) {
    return v <= t / 2 ? static_cast<int64_t>(v) : static_cast<int64_t>(v) - static_cast<int64_t>(t);
}

std::vector<double> dequantize(std::span<const uint64_t> v, uint64_t delta, uint64_t t) {
    std::vector<double> out(v.size());
    for (size_t i = 0; i < v.size(); ++i)
        out[i] = static_cast<double>(center_residue(v[i], t)) / static_cast<double>(delta);
    return out;
}

PackedVector pack_vector(std::span<const double> a, const FixedPointScale& scale,
                         const RingParamsPtr& params, QuantStats* stats) {
    if (a.size() > params->n)
        throw ConfigError("pack_vector: vector wider than the ring degree; split upstream");
    if (a.empty()) throw ConfigError("pack_vector: empty vector");
    std::vector<uint64_t> q =
        quantize(a, scale.delta_a(), scale.clamp_bound, params->t, stats);
    q.resize(params->n, 0);
    PackedVector pv;
    pv.d = static_cast<uint32_t>(a.size());
    pv.pt = Plaintext::from_coeffs(params, std::move(q));
    return pv;
}

std::vector<double> unpack_vector(const PackedVector& v, const FixedPointScale& scale) {
    auto c = v.pt.coeffs();
    return dequantize(c.subspan(0, v.d), scale.delta_a(), v.pt.params().t);
}

uint32_t block_capacity(uint32_t n, uint32_t d) {
    if (d == 0 || d > n) throw ConfigError("block_capacity: need 1 <= d <= N");
    uint32_t b = (n - d + 1) / d;
    return b == 0 ? 1 : b;
}

PackedWeightBlock pack_weight_rows(std::span<const double> rows_flat, uint32_t row_count,
                                   uint32_t d, const FixedPointScale& scale,
                                   const RingParamsPtr& params) {
    uint32_t cap = block_capacity(params->n, d);
    if (row_count == 0) throw ConfigError("pack_weight_rows: no rows");
    if (row_count > cap)
        throw ConfigError("pack_weight_rows: " + std::to_string(row_count) +
                          " rows exceed block capacity " + std::to_string(cap));
    if (rows_flat.size() != static_cast<size_t>(row_count) * d)
        throw ConfigError("pack_weight_rows: row length mismatch");

    std::vector<uint64_t> coeffs(params->n, 0);
    for (uint32_t j = 0; j < row_count; ++j) {
        std::vector<uint64_t> q = quantize(rows_flat.subspan(static_cast<size_t>(j) * d, d),
                                           scale.delta_w(), scale.clamp_bound, params->t);
        // row j reversed at offset j*d: coefficient j*d + (d-1-i) holds w[i]
        for (uint32_t i = 0; i < d; ++i) coeffs[j * d + (d - 1 - i)] = q[i];
    }
    PackedWeightBlock blk;
    blk.d = d;
    blk.rows = row_count;
    blk.pt = Plaintext::from_coeffs(params, std::move(coeffs));
    blk.map.targets.resize(row_count);
    for (uint32_t j = 0; j < row_count; ++j) blk.map.targets[j] = (j + 1) * d - 1;
    return blk;
}

Plaintext pack_bias(std::span<const double> b, const OutputMap& map,
                    const FixedPointScale& scale, const RingParamsPtr& params) {
    if (b.size() != map.targets.size()) throw ConfigError("pack_bias: count mismatch");
    std::vector<uint64_t> q = quantize(b, scale.delta_zz(), scale.clamp_bound, params->t);
    std::vector<uint64_t> coeffs(params->n, 0);
    for (size_t j = 0; j < b.size(); ++j) {
        if (map.targets[j] >= params->n) throw ConfigError("pack_bias: target out of range");
        coeffs[map.targets[j]] = q[j];
    }
    return Plaintext::from_coeffs(params, std::move(coeffs));
}

std::vector<int64_t> extract_raw(const Plaintext& p, const OutputMap& map) {
    const uint64_t t = p.params().t;
    auto c = p.coeffs();
    std::vector<int64_t> out(map.targets.size());
    for (size_t j = 0; j < map.targets.size(); ++j) {
        if (map.targets[j] >= c.size()) throw ConfigError("extract: target index out of range");
        out[j] = center_residue(c[map.targets[j]], t);
    }
    return out;
}

std::vector<double> extract_outputs(const Plaintext& p, const OutputMap& map,
                                    const FixedPointScale& scale) {
    std::vector<int64_t> raw = extract_raw(p, map);
    std::vector<double> out(raw.size());
    for (size_t j = 0; j < raw.size(); ++j)
        out[j] = static_cast<double>(raw[j]) / static_cast<double>(scale.delta_zz());
    return out;
}

uint32_t LayerPlan::rows_in_block(uint32_t b) const {
    uint32_t begin = b * block_capacity;
    return std::min(block_capacity, n_out - begin);
}

OutputMap LayerPlan::map_for_block(uint32_t b) const {
    OutputMap m;
    uint32_t rows = rows_in_block(b);
    m.targets.resize(rows);
    for (uint32_t j = 0; j < rows; ++j) m.targets[j] = (j + 1) * chunk_width - 1;
    return m;
}

LayerPlan plan_layer(uint32_t d_in, uint32_t n_out, uint32_t n) {
    if (d_in == 0 || n_out == 0) throw ConfigError("plan_layer: zero dimension");
    LayerPlan p;
    p.d_in = d_in;
    p.n_out = n_out;
    p.chunk_count = (d_in + n - 1) / n;
    p.chunk_width = (d_in + p.chunk_count - 1) / p.chunk_count;  // balanced slices
    p.block_capacity = block_capacity(n, p.chunk_width);
    p.block_count = (n_out + p.block_capacity - 1) / p.block_capacity;
    return p;
}

std::vector<PackedVector> pack_layer_input(std::span<const double> a, const LayerPlan& plan,
                                           const FixedPointScale& scale,
                                           const RingParamsPtr& params, QuantStats* stats) {
    if (a.size() != plan.d_in) throw ConfigError("pack_layer_input: width mismatch");
    std::vector<PackedVector> out;
    out.reserve(plan.chunk_count);
    std::vector<double> padded(plan.chunk_width);
    for (uint32_t c = 0; c < plan.chunk_count; ++c) {
        size_t begin = static_cast<size_t>(c) * plan.chunk_width;
        size_t len = std::min<size_t>(plan.chunk_width, a.size() - begin);
        std::fill(padded.begin(), padded.end(), 0.0);
        std::copy(a.begin() + begin, a.begin() + begin + len, padded.begin());
        out.push_back(pack_vector(padded, scale, params, stats));
    }
    return out;
}

PackedWeightBlock pack_layer_weights(std::span<const double> W, const LayerPlan& plan,
                                     uint32_t block, uint32_t chunk,
                                     const FixedPointScale& scale, const RingParamsPtr& params) {
    if (W.size() != static_cast<size_t>(plan.d_in) * plan.n_out)
        throw ConfigError("pack_layer_weights: matrix shape mismatch");
    if (block >= plan.block_count || chunk >= plan.chunk_count)
        throw ConfigError("pack_layer_weights: block/chunk out of range");
    uint32_t rows = plan.rows_in_block(block);
    uint32_t r0 = plan.row_begin(block);
    size_t col0 = static_cast<size_t>(chunk) * plan.chunk_width;
    size_t cols = std::min<size_t>(plan.chunk_width, plan.d_in - col0);
    std::vector<double> flat(static_cast<size_t>(rows) * plan.chunk_width, 0.0);
    for (uint32_t j = 0; j < rows; ++j) {
        const double* src = W.data() + static_cast<size_t>(r0 + j) * plan.d_in + col0;
        std::copy(src, src + cols, flat.begin() + static_cast<size_t>(j) * plan.chunk_width);
    }
    return pack_weight_rows(flat, rows, plan.chunk_width, scale, params);
}

Plaintext pack_layer_bias(std::span<const double> bias, const LayerPlan& plan, uint32_t block,
                          const FixedPointScale& scale, const RingParamsPtr& params) {
    if (bias.size() != plan.n_out) throw ConfigError("pack_layer_bias: count mismatch");
    uint32_t rows = plan.rows_in_block(block);
    return pack_bias(bias.subspan(plan.row_begin(block), rows), plan.map_for_block(block),
                     scale, params);
}

void check_layer_headroom(const LayerPlan& plan, const FixedPointScale& scale, uint64_t t,
                          const std::optional<LayerRanges>& ranges) {
    const double da = static_cast<double>(scale.delta_a());
    const double dw = static_cast<double>(scale.delta_w());
    const double half_t = static_cast<double>(t) / 2.0;
    const double d = static_cast<double>(plan.d_in);

    // per-coefficient quantized magnitude
    if (scale.clamp_bound * da >= half_t || scale.clamp_bound * dw >= half_t)
        throw ConfigError("headroom: clamp*delta exceeds t/2");

    if (!ranges) {
        double worst = d * (scale.clamp_bound * da) * (scale.clamp_bound * dw);
        if (worst >= half_t)
            throw ConfigError(
                "headroom: no activation-range statistics and the worst-case bound d*(C*da)*(C*dw) "
                "= " + std::to_string(worst) + " exceeds t/2 = " + std::to_string(half_t));
        return;
    }

    const double margin = 1.25;  // test-set drift allowance over the recorded training ranges
    double ca = std::min(ranges->max_abs_in, scale.clamp_bound);
    double cw = ranges->max_abs_w;
    // accumulated rounding error: each product term contributes at most
    // (cw*dw)/2 + (ca*da)/2 + 1/4 quantization units, plus 1/2 for the bias
    double round_err = d * ((cw * dw) / 2.0 + (ca * da) / 2.0 + 0.25) + 0.5;
    double z_mag = margin * ranges->max_abs_z * da * dw;
    if (z_mag + round_err >= half_t)
        throw ConfigError("headroom: layer needs " + std::to_string(z_mag + round_err) +
                          " quantization units but t/2 = " + std::to_string(half_t) +
                          "; lower the scales or widen t");
}

}  // namespace bayhenn
