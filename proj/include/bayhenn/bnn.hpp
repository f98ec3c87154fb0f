#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bayhenn/dataset.hpp"
#include "bayhenn/errors.hpp"
#include "bayhenn/ring.hpp"

// Bayesian network over diagonal Gaussian posteriors: every weight is
// (mu, rho) with sd = softplus(rho), trained by minimizing
// NLL + kappa * KL(q || N(0, prior_sigma^2)) through the reparameterization
// w = mu + softplus(rho) * eps. Sampling a model draws concrete weights;
// convolutions are lowered to dense matrices at sampling time so the
// protocol only ever sees linear maps.

namespace bayhenn {

struct Matrix {
    uint32_t rows = 0, cols = 0;
    std::vector<double> v;

    Matrix() = default;
    Matrix(uint32_t r, uint32_t c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, 0.0) {}
    double& at(uint32_t r, uint32_t c) { return v[static_cast<size_t>(r) * cols + c]; }
    double at(uint32_t r, uint32_t c) const { return v[static_cast<size_t>(r) * cols + c]; }
    double* row(uint32_t r) { return v.data() + static_cast<size_t>(r) * cols; }
    const double* row(uint32_t r) const { return v.data() + static_cast<size_t>(r) * cols; }
    bool operator==(const Matrix&) const = default;
};

// OpenMP kernels; each output element is accumulated serially in index
// order, so results are bit-identical for any thread count.
void gemm(const Matrix& A, const Matrix& B, Matrix& C);          // C = A*B
void gemm_at_bt(const Matrix& dZ, const Matrix& A, Matrix& dW);  // dW = dZ * A^T
void gemm_ta(const Matrix& W, const Matrix& dZ, Matrix& dA);     // dA = W^T * dZ
void matvec(const Matrix& W, std::span<const double> x, std::span<double> y);

enum class Activation : uint8_t { Identity = 0, ReLU = 1, Sigmoid = 2, Tanh = 3 };
enum class PoolKind : uint8_t { None = 0, Avg = 1, Max = 2 };

struct PoolSpec {
    PoolKind kind = PoolKind::None;
    uint16_t channels = 0, in_h = 0, in_w = 0, window = 0, stride = 0;

    uint32_t out_h() const { return (in_h - window) / stride + 1; }
    uint32_t out_w() const { return (in_w - window) / stride + 1; }
    uint32_t in_dim() const { return static_cast<uint32_t>(channels) * in_h * in_w; }
    uint32_t out_dim() const { return channels * out_h() * out_w(); }
    bool operator==(const PoolSpec&) const = default;
};

// The non-linear step after a linear layer: an elementwise activation,
// optionally followed by pooling (both run client-side in the protocol).
struct NonLinearStage {
    Activation act = Activation::Identity;
    PoolSpec pool;

    uint32_t out_dim(uint32_t in) const { return pool.kind == PoolKind::None ? in : pool.out_dim(); }
    bool operator==(const NonLinearStage&) const = default;
};

struct ConvSpec {
    uint16_t in_c = 0, in_h = 0, in_w = 0;
    uint16_t out_c = 0, kernel = 0, stride = 1, pad = 0;

    uint32_t out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
    uint32_t out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
    uint32_t positions() const { return out_h() * out_w(); }
    uint32_t patch_dim() const { return static_cast<uint32_t>(in_c) * kernel * kernel; }
    uint32_t in_dim() const { return static_cast<uint32_t>(in_c) * in_h * in_w; }
    uint32_t out_dim() const { return out_c * positions(); }
    bool operator==(const ConvSpec&) const = default;
};

struct LinearLayerDef {
    enum class Kind : uint8_t { Dense = 0, Conv = 1 };
    Kind kind = Kind::Dense;
    uint32_t d_in = 0, d_out = 0;  // dims of the lowered linear map
    ConvSpec conv;                 // meaningful when kind == Conv
    NonLinearStage stage;
    bool operator==(const LinearLayerDef&) const = default;
};

struct NetworkArch {
    uint32_t input_dim = 0, num_classes = 0;
    std::vector<LinearLayerDef> layers;

    void validate() const;  // dimension chaining; throws ConfigError
    static NetworkArch mlp(uint32_t input, const std::vector<uint32_t>& hidden, uint32_t classes,
                           Activation act = Activation::ReLU);
    bool operator==(const NetworkArch&) const = default;
};

// Per-layer Gaussian posterior. Dense layers store d_out x d_in parameter
// matrices; conv layers store out_c x (in_c*k*k) kernel parameters.
struct VariationalLinear {
    Matrix mu_W, rho_W;
    std::vector<double> mu_b, rho_b;
};

struct LayerStats {
    double max_abs_in = 0, max_abs_w = 0, max_abs_z = 0;
};

struct Posterior {
    NetworkArch arch;
    std::vector<VariationalLinear> layers;
    double prior_sigma = 0.1;
    std::vector<LayerStats> stats;  // empty until trained
    std::string model_id = "unnamed";
};

double softplus(double x);

// mu ~ uniform fan-in, rho constant (sd ~= softplus(rho_init)).
Posterior init_posterior(const NetworkArch& arch, Rng& rng, double prior_sigma = 0.1,
                         double rho_init = -5.0);

// One concrete weight set; convolutions already lowered to dense maps.
struct SampledModel {
    std::shared_ptr<const NetworkArch> arch;
    std::vector<Matrix> W;               // d_out x d_in (lowered)
    std::vector<std::vector<double>> b;  // d_out (lowered)
    uint32_t sample_index = 0;
};

SampledModel sample_model(const Posterior& post, Rng& rng);
SampledModel mean_model(const Posterior& post);  // sigma = 0: w = mu

// Dense lowering of a convolution (kernels: out_c x patch_dim).
Matrix lower_conv(const ConvSpec& spec, const Matrix& kernels);
std::vector<double> lower_conv_bias(const ConvSpec& spec, std::span<const double> bias);

std::vector<double> softmax(std::span<const double> z);
uint32_t argmax_lowest_tie(std::span<const double> p);
std::vector<double> apply_stage(const NonLinearStage& stage, std::vector<double> z);

struct ForwardTrace {
    std::vector<std::vector<double>> z;  // pre-activation per layer
    std::vector<std::vector<double>> a;  // post-stage per layer
};

// Alternating linear / non-linear evaluation ending in softmax. This is the
// reference oracle for the encrypted path.
std::vector<double> forward_plain(const SampledModel& model, std::span<const double> x,
                                  ForwardTrace* trace = nullptr);

struct EnsemblePrediction {
    std::vector<double> p;
    uint32_t label = 0;
};

EnsemblePrediction predict_with_models(std::span<const SampledModel> models,
                                       std::span<const double> x);
// Draws S models then averages their softmax outputs (label = argmax,
// lowest index on ties).
EnsemblePrediction predict_ensemble(const Posterior& post, std::span<const double> x, uint32_t S,
                                    Rng& rng);

// Batched dataset accuracy with a fresh S-sample ensemble.
double evaluate_accuracy(const Posterior& post, const Dataset& data, uint32_t S, Rng& rng,
                         uint32_t batch_size = 256);

// ---- training ----

struct TrainConfig {
    uint32_t ensemble_size = 4;  // S
    double lr = 0.001;           // Adam step size
    uint32_t epochs = 10;
    uint32_t batch_size = 128;
    double prior_sigma = 0.1;
    double kl_scale = 0.0;  // 0 -> 1/num_batches per epoch
    uint64_t seed = 1;
    bool bayes = true;  // false: sigma frozen at 0 and KL dropped
    double rho_init = -5.0;
    bool verbose = false;
};

struct TrainReport {
    double final_loss = 0;
    double train_accuracy = 0;
    double test_accuracy = 0;
    uint32_t epochs_run = 0;
};

// Reparameterization noise, one draw per parameter.
struct LayerNoise {
    Matrix eps_W;
    std::vector<double> eps_b;
};
using NoiseBundle = std::vector<LayerNoise>;

NoiseBundle draw_noise(const Posterior& post, Rng& rng);
NoiseBundle zero_noise(const Posterior& post);

struct ParamGrads {
    std::vector<VariationalLinear> g;  // d/d_mu in mu_*, d/d_rho in rho_*
};

// loss = sum-NLL(batch | mu + softplus(rho)*eps) + kl_scale * KL(q || prior).
// X is input_dim x batch. With bayes = false the noise is ignored and the KL
// term dropped. Throws on non-finite loss. range_accum, when given, absorbs
// per-layer max |a_in| / max |z| over the batch (headroom bookkeeping).
double elbo_loss(const Posterior& post, const Matrix& X, std::span<const uint8_t> labels,
                 const NoiseBundle& noise, double kl_scale, bool bayes,
                 ParamGrads* grads, std::vector<LayerStats>* range_accum = nullptr);

// Bayes-by-Backprop with Adam; records per-layer activation ranges for the
// encoding headroom checks and fills the report with train/test accuracy.
Posterior train(const NetworkArch& arch, const Dataset& train_data, const Dataset* eval_data,
                const TrainConfig& cfg, TrainReport* report = nullptr);

// ---- persistence (versioned binary; save-load-save is byte identical) ----
void save_model(const std::string& path, const Posterior& post);
Posterior load_model(const std::string& path);
std::vector<uint8_t> serialize_model(const Posterior& post);
Posterior deserialize_model(std::span<const uint8_t> bytes);

// Sampled-model export for the debug path (protocol oracle comparisons).
void save_sampled_models(const std::string& path, std::span<const SampledModel> models);
std::vector<SampledModel> load_sampled_models(const std::string& path);

}  // namespace bayhenn
