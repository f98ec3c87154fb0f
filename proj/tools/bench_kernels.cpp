// Compares the serial reference kernels against the production paths:
// schoolbook vs NTT multiplication, serial vs OpenMP matvec, and the
// serial-loop vs OpenMP SLC layer fan-out, plus the S=1 vs S=4 wall-time
// scaling of the fan-out.

#include <CLI11.hpp>

#include <cstdio>

#include "bayhenn/bench.hpp"

using namespace bayhenn;

int main(int argc, char** argv) {
    CLI::App app{"serial-reference vs production kernel comparison"};
    std::string preset = "bhn2048";
    uint32_t d_in = 784, n_out = 256;
    uint16_t samples = 4;
    int reps = 5;
    app.add_option("--preset", preset, "ring parameter preset");
    app.add_option("--d-in", d_in, "layer input width");
    app.add_option("--n-out", n_out, "layer neuron count");
    app.add_option("--samples", samples, "ensemble size for the fan-out bench");
    app.add_option("--reps", reps, "repetitions per measurement");
    CLI11_PARSE(app, argc, argv);

    RingParamsPtr params = ring_preset(preset);
    std::printf("preset %s (N=%u, %u-bit q), layer %ux%u, S=%u, %d reps\n\n", preset.c_str(),
                params->n, 64 - __builtin_clzll(params->q), d_in, n_out, samples, reps);

    std::printf("%-44s %12s %12s %8s\n", "kernel", "serial ms", "fast ms", "speedup");
    for (const KernelBenchRow& r : run_kernel_bench(params, d_in, n_out, samples, reps))
        std::printf("%-44s %12.3f %12.3f %7.1fx\n", r.name.c_str(), r.serial_ms, r.fast_ms,
                    r.serial_ms / r.fast_ms);

    SlcScaling sc = measure_slc_scaling(params, d_in, n_out, reps);
    std::printf("\nSLC fan-out wall time: S=1 %.3f ms, S=4 %.3f ms, ratio %.2fx (%d hw threads)\n",
                sc.s1_wall_s * 1e3, sc.s4_wall_s * 1e3, sc.ratio, sc.hw_threads);
    return 0;
}
