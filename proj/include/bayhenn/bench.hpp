#pragma once

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "bayhenn/dataset.hpp"
#include "bayhenn/net.hpp"

// The measurement harness: end-to-end latency (protocol setup + compute +
// communication) and exact communication accounting per inference, plus the
// kernel-level serial/parallel comparisons.

namespace bayhenn {

struct BenchReport {
    std::string model_id;
    uint16_t ensemble_size = 0;
    uint32_t count = 0;

    double mean_latency_s = 0;
    double p95_latency_s = 0;
    double mean_setup_s = 0;
    std::vector<double> mean_layer_round_s;

    // measured over all sessions (frame prefixes included)
    uint64_t bytes_sent = 0, bytes_received = 0;
    std::map<MsgType, uint64_t> sent_by_type, received_by_type;

    // analytic prediction from the packing plan, same framing
    uint64_t predicted_sent = 0, predicted_received = 0;
    uint64_t predicted_bitpacked_total = 0;  // ceil(log2 q)-bit coefficients
    bool prediction_matches = false;

    uint32_t label_matches_oracle = 0;  // only when an oracle is supplied
};

// Runs `count` inferences against a serving endpoint, one connection each.
// When keys are given they are reused across sessions (the keygen CLI flow);
// otherwise a fresh keypair is generated per session.
BenchReport run_bench(const std::string& addr, const Dataset& data, uint32_t count,
                      const RingParamsPtr& params, std::optional<ClientKeys> keys, uint64_t seed);

void print_bench_table(const BenchReport& r, std::FILE* out);
void print_bench_jsonl(const BenchReport& r, std::FILE* out);

// ---- kernel benchmarks (serial reference vs the production kernels) ----

struct KernelBenchRow {
    std::string name;
    double serial_ms = 0;
    double fast_ms = 0;
};

// negacyclic multiply (schoolbook vs NTT), matvec (serial vs OpenMP),
// one SLC layer (serial loop vs OpenMP fan-out)
std::vector<KernelBenchRow> run_kernel_bench(const RingParamsPtr& params, uint32_t d_in,
                                             uint32_t n_out, uint16_t S, int reps);

struct SlcScaling {
    double s1_wall_s = 0;
    double s4_wall_s = 0;
    double ratio = 0;  // s4 / s1
    int hw_threads = 0;
};

// Wall time of the layer fan-out at S=1 vs S=4 over `reps` runs.
SlcScaling measure_slc_scaling(const RingParamsPtr& params, uint32_t d_in, uint32_t n_out,
                               int reps);

}  // namespace bayhenn
