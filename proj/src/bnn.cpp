#include "bayhenn/bnn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace bayhenn {

// ---- kernels ----

void gemm(const Matrix& A, const Matrix& B, Matrix& C) {
    if (A.cols != B.rows || C.rows != A.rows || C.cols != B.cols)
        throw ConfigError("gemm: shape mismatch");
    std::fill(C.v.begin(), C.v.end(), 0.0);
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < static_cast<int64_t>(A.rows); ++i) {
        double* crow = C.row(static_cast<uint32_t>(i));
        const double* arow = A.row(static_cast<uint32_t>(i));
        for (uint32_t k = 0; k < A.cols; ++k) {
            double a = arow[k];
            if (a == 0.0) continue;
            const double* brow = B.row(k);
            for (uint32_t j = 0; j < B.cols; ++j) crow[j] += a * brow[j];
        }
    }
}

void gemm_at_bt(const Matrix& dZ, const Matrix& A, Matrix& dW) {
    // dW(r,k) = sum_c dZ(r,c) * A(k,c)
    if (dZ.cols != A.cols || dW.rows != dZ.rows || dW.cols != A.rows)
        throw ConfigError("gemm_at_bt: shape mismatch");
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < static_cast<int64_t>(dZ.rows); ++r) {
        const double* zrow = dZ.row(static_cast<uint32_t>(r));
        double* wrow = dW.row(static_cast<uint32_t>(r));
        for (uint32_t k = 0; k < A.rows; ++k) {
            const double* arow = A.row(k);
            double acc = 0.0;
            for (uint32_t c = 0; c < dZ.cols; ++c) acc += zrow[c] * arow[c];
            wrow[k] = acc;
        }
    }
}

void gemm_ta(const Matrix& W, const Matrix& dZ, Matrix& dA) {
    // dA(k,c) = sum_r W(r,k) * dZ(r,c)
    if (W.rows != dZ.rows || dA.rows != W.cols || dA.cols != dZ.cols)
        throw ConfigError("gemm_ta: shape mismatch");
    std::fill(dA.v.begin(), dA.v.end(), 0.0);
#pragma omp parallel for schedule(static)
    for (int64_t k = 0; k < static_cast<int64_t>(W.cols); ++k) {
        double* arow = dA.row(static_cast<uint32_t>(k));
        for (uint32_t r = 0; r < W.rows; ++r) {
            double w = W.at(r, static_cast<uint32_t>(k));
            if (w == 0.0) continue;
            const double* zrow = dZ.row(r);
            for (uint32_t c = 0; c < dZ.cols; ++c) arow[c] += w * zrow[c];
        }
    }
}

void matvec(const Matrix& W, std::span<const double> x, std::span<double> y) {
    if (x.size() != W.cols || y.size() != W.rows) throw ConfigError("matvec: shape mismatch");
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < static_cast<int64_t>(W.rows); ++r) {
        const double* row = W.row(static_cast<uint32_t>(r));
        double acc = 0.0;
        for (uint32_t k = 0; k < W.cols; ++k) acc += row[k] * x[k];
        y[r] = acc;
    }
}

// ---- architecture ----

void NetworkArch::validate() const {
    if (input_dim == 0 || num_classes == 0 || layers.empty())
        throw ConfigError("arch: empty network");
    uint32_t dim = input_dim;
    for (size_t i = 0; i < layers.size(); ++i) {
        const LinearLayerDef& l = layers[i];
        if (l.kind == LinearLayerDef::Kind::Conv) {
            if (l.d_in != l.conv.in_dim() || l.d_out != l.conv.out_dim())
                throw ConfigError("arch: conv dims inconsistent at layer " + std::to_string(i));
            if (l.conv.kernel == 0 || l.conv.stride == 0)
                throw ConfigError("arch: bad conv spec at layer " + std::to_string(i));
        }
        if (l.d_in != dim)
            throw ConfigError("arch: layer " + std::to_string(i) + " expects input " +
                              std::to_string(l.d_in) + " but gets " + std::to_string(dim));
        if (l.d_in == 0 || l.d_out == 0) throw ConfigError("arch: zero-width layer");
        if (l.stage.pool.kind != PoolKind::None && l.stage.pool.in_dim() != l.d_out)
            throw ConfigError("arch: pool shape mismatch at layer " + std::to_string(i));
        dim = l.stage.out_dim(l.d_out);
    }
    if (dim != num_classes) throw ConfigError("arch: final width != class count");
}

NetworkArch NetworkArch::mlp(uint32_t input, const std::vector<uint32_t>& hidden,
                             uint32_t classes, Activation act) {
    NetworkArch a;
    a.input_dim = input;
    a.num_classes = classes;
    uint32_t dim = input;
    for (uint32_t h : hidden) {
        LinearLayerDef l;
        l.d_in = dim;
        l.d_out = h;
        l.stage.act = act;
        a.layers.push_back(l);
        dim = h;
    }
    LinearLayerDef out;
    out.d_in = dim;
    out.d_out = classes;
    out.stage.act = Activation::Identity;  // softmax applied at prediction time
    a.layers.push_back(out);
    a.validate();
    return a;
}

// ---- posterior ----

double softplus(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return x >= 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

namespace {
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// parameter shapes: dense d_out x d_in; conv out_c x patch_dim
std::pair<uint32_t, uint32_t> param_shape(const LinearLayerDef& l) {
    if (l.kind == LinearLayerDef::Kind::Conv) return {l.conv.out_c, l.conv.patch_dim()};
    return {l.d_out, l.d_in};
}
}  // namespace

Posterior init_posterior(const NetworkArch& arch, Rng& rng, double prior_sigma, double rho_init) {
    arch.validate();
    Posterior post;
    post.arch = arch;
    post.prior_sigma = prior_sigma;
    for (const LinearLayerDef& l : arch.layers) {
        auto [rows, cols] = param_shape(l);
        VariationalLinear vl;
        vl.mu_W = Matrix(rows, cols);
        vl.rho_W = Matrix(rows, cols);
        double bound = 1.0 / std::sqrt(static_cast<double>(cols));
        for (double& v : vl.mu_W.v) v = (rng.uniform01() * 2.0 - 1.0) * bound;
        for (double& v : vl.rho_W.v) v = rho_init;
        vl.mu_b.assign(rows, 0.0);
        vl.rho_b.assign(rows, rho_init);
        post.layers.push_back(std::move(vl));
    }
    return post;
}

// ---- sampling & lowering ----

Matrix lower_conv(const ConvSpec& c, const Matrix& kernels) {
    if (kernels.rows != c.out_c || kernels.cols != c.patch_dim())
        throw ConfigError("lower_conv: kernel shape mismatch");
    Matrix W(c.out_dim(), c.in_dim());
    const uint32_t oh = c.out_h(), ow = c.out_w(), pos_count = oh * ow;
    for (uint32_t oc = 0; oc < c.out_c; ++oc)
        for (uint32_t oy = 0; oy < oh; ++oy)
            for (uint32_t ox = 0; ox < ow; ++ox) {
                uint32_t out_row = oc * pos_count + oy * ow + ox;
                for (uint32_t ic = 0; ic < c.in_c; ++ic)
                    for (uint32_t ky = 0; ky < c.kernel; ++ky)
                        for (uint32_t kx = 0; kx < c.kernel; ++kx) {
                            int64_t iy = static_cast<int64_t>(oy) * c.stride - c.pad + ky;
                            int64_t ix = static_cast<int64_t>(ox) * c.stride - c.pad + kx;
                            if (iy < 0 || iy >= c.in_h || ix < 0 || ix >= c.in_w) continue;
                            uint32_t in_col =
                                (ic * c.in_h + static_cast<uint32_t>(iy)) * c.in_w +
                                static_cast<uint32_t>(ix);
                            W.at(out_row, in_col) = kernels.at(oc, (ic * c.kernel + ky) * c.kernel + kx);
                        }
            }
    return W;
}

std::vector<double> lower_conv_bias(const ConvSpec& c, std::span<const double> bias) {
    if (bias.size() != c.out_c) throw ConfigError("lower_conv_bias: count mismatch");
    std::vector<double> out(c.out_dim());
    for (uint32_t oc = 0; oc < c.out_c; ++oc)
        std::fill_n(out.begin() + static_cast<size_t>(oc) * c.positions(), c.positions(), bias[oc]);
    return out;
}

namespace {
SampledModel realize_model(const Posterior& post, Rng* rng) {
    SampledModel m;
    m.arch = std::make_shared<const NetworkArch>(post.arch);
    for (size_t i = 0; i < post.layers.size(); ++i) {
        const VariationalLinear& vl = post.layers[i];
        Matrix w = vl.mu_W;
        std::vector<double> b = vl.mu_b;
        if (rng) {
            for (size_t j = 0; j < w.v.size(); ++j)
                w.v[j] += softplus(vl.rho_W.v[j]) * rng->normal(1.0);
            for (size_t j = 0; j < b.size(); ++j)
                b[j] += softplus(vl.rho_b[j]) * rng->normal(1.0);
        }
        const LinearLayerDef& def = post.arch.layers[i];
        if (def.kind == LinearLayerDef::Kind::Conv) {
            m.W.push_back(lower_conv(def.conv, w));
            m.b.push_back(lower_conv_bias(def.conv, b));
        } else {
            m.W.push_back(std::move(w));
            m.b.push_back(std::move(b));
        }
    }
    return m;
}
}  // namespace

SampledModel sample_model(const Posterior& post, Rng& rng) { return realize_model(post, &rng); }
SampledModel mean_model(const Posterior& post) { return realize_model(post, nullptr); }

// ---- activations / stages ----

std::vector<double> softmax(std::span<const double> z) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : z) mx = std::max(mx, v);
    std::vector<double> p(z.size());
    double sum = 0.0;
    for (size_t i = 0; i < z.size(); ++i) {
        p[i] = std::exp(z[i] - mx);
        sum += p[i];
    }
    for (double& v : p) v /= sum;
    return p;
}

uint32_t argmax_lowest_tie(std::span<const double> p) {
    uint32_t best = 0;
    for (uint32_t i = 1; i < p.size(); ++i)
        if (p[i] > p[best]) best = i;
    return best;
}

namespace {
double apply_act(Activation a, double v) {
    switch (a) {
        case Activation::Identity: return v;
        case Activation::ReLU: return v > 0.0 ? v : 0.0;
        case Activation::Sigmoid: return sigmoid(v);
        case Activation::Tanh: return std::tanh(v);
    }
    throw ConfigError("unknown activation");
}

std::vector<double> apply_pool(const PoolSpec& p, const std::vector<double>& a) {
    if (a.size() != p.in_dim()) throw ConfigError("pool: input shape mismatch");
    const uint32_t oh = p.out_h(), ow = p.out_w();
    std::vector<double> out(p.out_dim());
    for (uint32_t c = 0; c < p.channels; ++c)
        for (uint32_t oy = 0; oy < oh; ++oy)
            for (uint32_t ox = 0; ox < ow; ++ox) {
                double best = -std::numeric_limits<double>::infinity();
                double sum = 0.0;
                for (uint32_t wy = 0; wy < p.window; ++wy)
                    for (uint32_t wx = 0; wx < p.window; ++wx) {
                        uint32_t iy = oy * p.stride + wy;
                        uint32_t ix = ox * p.stride + wx;
                        double v = a[(c * p.in_h + iy) * p.in_w + ix];
                        best = std::max(best, v);
                        sum += v;
                    }
                out[(c * oh + oy) * ow + ox] =
                    p.kind == PoolKind::Max ? best : sum / (p.window * p.window);
            }
    return out;
}
}  // namespace

std::vector<double> apply_stage(const NonLinearStage& stage, std::vector<double> z) {
    for (double& v : z) v = apply_act(stage.act, v);
    if (stage.pool.kind == PoolKind::None) return z;
    return apply_pool(stage.pool, z);
}

// ---- forward / prediction ----

std::vector<double> forward_plain(const SampledModel& model, std::span<const double> x,
                                  ForwardTrace* trace) {
    if (x.size() != model.arch->input_dim) throw ConfigError("forward: input width mismatch");
    std::vector<double> a(x.begin(), x.end());
    for (size_t i = 0; i < model.W.size(); ++i) {
        std::vector<double> z(model.W[i].rows);
        matvec(model.W[i], a, z);
        for (size_t j = 0; j < z.size(); ++j) z[j] += model.b[i][j];
        if (trace) trace->z.push_back(z);
        a = apply_stage(model.arch->layers[i].stage, std::move(z));
        if (trace) trace->a.push_back(a);
    }
    return softmax(a);
}

EnsemblePrediction predict_with_models(std::span<const SampledModel> models,
                                       std::span<const double> x) {
    if (models.empty()) throw ConfigError("predict: no models");
    EnsemblePrediction out;
    out.p.assign(models[0].arch->num_classes, 0.0);
    for (const SampledModel& m : models) {
        std::vector<double> p = forward_plain(m, x);
        for (size_t i = 0; i < p.size(); ++i) out.p[i] += p[i];
    }
    for (double& v : out.p) v /= static_cast<double>(models.size());
    out.label = argmax_lowest_tie(out.p);
    return out;
}

EnsemblePrediction predict_ensemble(const Posterior& post, std::span<const double> x, uint32_t S,
                                    Rng& rng) {
    if (S == 0) throw ConfigError("predict_ensemble: S must be >= 1");
    std::vector<SampledModel> models;
    models.reserve(S);
    for (uint32_t k = 0; k < S; ++k) {
        models.push_back(sample_model(post, rng));
        models.back().sample_index = k;
    }
    return predict_with_models(models, x);
}

double evaluate_accuracy(const Posterior& post, const Dataset& data, uint32_t S, Rng& rng,
                         uint32_t batch_size) {
    std::vector<SampledModel> models;
    for (uint32_t k = 0; k < S; ++k) models.push_back(sample_model(post, rng));

    uint32_t correct = 0;
    Matrix A(post.arch.input_dim, batch_size);
    for (uint32_t begin = 0; begin < data.count; begin += batch_size) {
        uint32_t b = std::min(batch_size, data.count - begin);
        if (b != A.cols) A = Matrix(post.arch.input_dim, b);
        for (uint32_t c = 0; c < b; ++c) {
            const float* px = data.sample(begin + c);
            for (uint32_t r = 0; r < data.dim; ++r) A.at(r, c) = px[r];
        }
        // average the per-model softmax outputs, batched through the stages
        Matrix acc(post.arch.num_classes, b);
        for (const SampledModel& m : models) {
            Matrix cur = A;
            for (size_t i = 0; i < m.W.size(); ++i) {
                Matrix z(m.W[i].rows, cur.cols);
                gemm(m.W[i], cur, z);
                for (uint32_t r = 0; r < z.rows; ++r)
                    for (uint32_t c = 0; c < z.cols; ++c) z.at(r, c) += m.b[i][r];
                const NonLinearStage& st = m.arch->layers[i].stage;
                if (st.pool.kind == PoolKind::None) {
                    for (double& v : z.v) v = apply_act(st.act, v);
                    cur = std::move(z);
                } else {
                    Matrix pooled(st.pool.out_dim(), z.cols);
                    std::vector<double> col(z.rows);
                    for (uint32_t c = 0; c < z.cols; ++c) {
                        for (uint32_t r = 0; r < z.rows; ++r) col[r] = apply_act(st.act, z.at(r, c));
                        std::vector<double> pc = apply_pool(st.pool, col);
                        for (uint32_t r = 0; r < pooled.rows; ++r) pooled.at(r, c) = pc[r];
                    }
                    cur = std::move(pooled);
                }
            }
            std::vector<double> col(cur.rows);
            for (uint32_t c = 0; c < cur.cols; ++c) {
                for (uint32_t r = 0; r < cur.rows; ++r) col[r] = cur.at(r, c);
                std::vector<double> p = softmax(col);
                for (uint32_t r = 0; r < cur.rows; ++r) acc.at(r, c) += p[r];
            }
        }
        std::vector<double> col(acc.rows);
        for (uint32_t c = 0; c < b; ++c) {
            for (uint32_t r = 0; r < acc.rows; ++r) col[r] = acc.at(r, c);
            if (argmax_lowest_tie(col) == data.labels[begin + c]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(data.count);
}

// ---- ELBO / training ----

NoiseBundle draw_noise(const Posterior& post, Rng& rng) {
    NoiseBundle nb;
    for (const VariationalLinear& vl : post.layers) {
        LayerNoise ln;
        ln.eps_W = Matrix(vl.mu_W.rows, vl.mu_W.cols);
        for (double& v : ln.eps_W.v) v = rng.normal(1.0);
        ln.eps_b.resize(vl.mu_b.size());
        for (double& v : ln.eps_b) v = rng.normal(1.0);
        nb.push_back(std::move(ln));
    }
    return nb;
}

NoiseBundle zero_noise(const Posterior& post) {
    NoiseBundle nb;
    for (const VariationalLinear& vl : post.layers) {
        LayerNoise ln;
        ln.eps_W = Matrix(vl.mu_W.rows, vl.mu_W.cols);
        ln.eps_b.assign(vl.mu_b.size(), 0.0);
        nb.push_back(std::move(ln));
    }
    return nb;
}

namespace {

struct LayerCache {
    Matrix a_in;                    // d_in x B
    Matrix z;                       // d_out x B (post-linear)
    Matrix a_act;                   // d_out x B (post-activation, pre-pool)
    std::vector<uint32_t> max_src;  // max-pool winner per (out_row, col)
    std::vector<Matrix> patches;    // conv: per-sample patch_dim x positions
};

void build_patches(const ConvSpec& c, const double* col, Matrix& P) {
    const uint32_t oh = c.out_h(), ow = c.out_w();
    for (uint32_t ic = 0; ic < c.in_c; ++ic)
        for (uint32_t ky = 0; ky < c.kernel; ++ky)
            for (uint32_t kx = 0; kx < c.kernel; ++kx) {
                uint32_t pd = (ic * c.kernel + ky) * c.kernel + kx;
                double* prow = P.row(pd);
                for (uint32_t oy = 0; oy < oh; ++oy)
                    for (uint32_t ox = 0; ox < ow; ++ox) {
                        int64_t iy = static_cast<int64_t>(oy) * c.stride - c.pad + ky;
                        int64_t ix = static_cast<int64_t>(ox) * c.stride - c.pad + kx;
                        double v = 0.0;
                        if (iy >= 0 && iy < c.in_h && ix >= 0 && ix < c.in_w)
                            v = col[(ic * c.in_h + iy) * c.in_w + ix];
                        prow[oy * ow + ox] = v;
                    }
            }
}

void scatter_patches(const ConvSpec& c, const Matrix& dP, double* col) {
    const uint32_t oh = c.out_h(), ow = c.out_w();
    for (uint32_t ic = 0; ic < c.in_c; ++ic)
        for (uint32_t ky = 0; ky < c.kernel; ++ky)
            for (uint32_t kx = 0; kx < c.kernel; ++kx) {
                uint32_t pd = (ic * c.kernel + ky) * c.kernel + kx;
                const double* prow = dP.row(pd);
                for (uint32_t oy = 0; oy < oh; ++oy)
                    for (uint32_t ox = 0; ox < ow; ++ox) {
                        int64_t iy = static_cast<int64_t>(oy) * c.stride - c.pad + ky;
                        int64_t ix = static_cast<int64_t>(ox) * c.stride - c.pad + kx;
                        if (iy >= 0 && iy < c.in_h && ix >= 0 && ix < c.in_w)
                            col[(ic * c.in_h + iy) * c.in_w + ix] += prow[oy * ow + ox];
                    }
            }
}

double act_grad(Activation a, double z, double y) {
    switch (a) {
        case Activation::Identity: return 1.0;
        case Activation::ReLU: return z > 0.0 ? 1.0 : 0.0;
        case Activation::Sigmoid: return y * (1.0 - y);
        case Activation::Tanh: return 1.0 - y * y;
    }
    throw ConfigError("unknown activation");
}

}  // namespace

double elbo_loss(const Posterior& post, const Matrix& X, std::span<const uint8_t> labels,
                 const NoiseBundle& noise, double kl_scale, bool bayes, ParamGrads* grads,
                 std::vector<LayerStats>* range_accum) {
    if (labels.empty() || X.cols != labels.size()) throw ConfigError("elbo: batch shape mismatch");
    if (X.rows != post.arch.input_dim) throw ConfigError("elbo: input width mismatch");
    const uint32_t B = X.cols;
    const size_t L = post.layers.size();

    // effective weights w = mu + softplus(rho) * eps
    std::vector<Matrix> W(L);
    std::vector<std::vector<double>> bvec(L);
    for (size_t i = 0; i < L; ++i) {
        const VariationalLinear& vl = post.layers[i];
        W[i] = vl.mu_W;
        bvec[i] = vl.mu_b;
        if (bayes) {
            for (size_t j = 0; j < W[i].v.size(); ++j)
                W[i].v[j] += softplus(vl.rho_W.v[j]) * noise[i].eps_W.v[j];
            for (size_t j = 0; j < bvec[i].size(); ++j)
                bvec[i][j] += softplus(vl.rho_b[j]) * noise[i].eps_b[j];
        }
    }

    // forward
    std::vector<LayerCache> cache(L);
    Matrix cur = X;
    for (size_t i = 0; i < L; ++i) {
        const LinearLayerDef& def = post.arch.layers[i];
        LayerCache& cc = cache[i];
        cc.a_in = std::move(cur);
        cc.z = Matrix(def.d_out, B);
        if (def.kind == LinearLayerDef::Kind::Dense) {
            gemm(W[i], cc.a_in, cc.z);
        } else {
            const ConvSpec& cs = def.conv;
            cc.patches.assign(B, Matrix());
#pragma omp parallel for schedule(static)
            for (int64_t s = 0; s < static_cast<int64_t>(B); ++s) {
                Matrix P(cs.patch_dim(), cs.positions());
                std::vector<double> col(def.d_in);
                for (uint32_t r = 0; r < def.d_in; ++r) col[r] = cc.a_in.at(r, static_cast<uint32_t>(s));
                build_patches(cs, col.data(), P);
                Matrix Zc(cs.out_c, cs.positions());
                gemm(W[i], P, Zc);
                for (uint32_t oc = 0; oc < cs.out_c; ++oc)
                    for (uint32_t pos = 0; pos < cs.positions(); ++pos)
                        cc.z.at(oc * cs.positions() + pos, static_cast<uint32_t>(s)) = Zc.at(oc, pos);
                cc.patches[s] = std::move(P);
            }
        }
        if (def.kind == LinearLayerDef::Kind::Dense)
            for (uint32_t r = 0; r < cc.z.rows; ++r)
                for (uint32_t c = 0; c < B; ++c) cc.z.at(r, c) += bvec[i][r];
        else
            for (uint32_t r = 0; r < cc.z.rows; ++r)
                for (uint32_t c = 0; c < B; ++c)
                    cc.z.at(r, c) += bvec[i][r / def.conv.positions()];

        // activation
        cc.a_act = cc.z;
        for (double& v : cc.a_act.v) v = apply_act(def.stage.act, v);

        // pooling
        if (def.stage.pool.kind == PoolKind::None) {
            cur = cc.a_act;
        } else {
            const PoolSpec& ps = def.stage.pool;
            Matrix pooled(ps.out_dim(), B);
            cc.max_src.assign(static_cast<size_t>(ps.out_dim()) * B, 0);
            const uint32_t oh = ps.out_h(), ow = ps.out_w();
#pragma omp parallel for schedule(static)
            for (int64_t c = 0; c < static_cast<int64_t>(B); ++c)
                for (uint32_t ch = 0; ch < ps.channels; ++ch)
                    for (uint32_t oy = 0; oy < oh; ++oy)
                        for (uint32_t ox = 0; ox < ow; ++ox) {
                            double best = -std::numeric_limits<double>::infinity();
                            uint32_t best_idx = 0;
                            double sum = 0.0;
                            for (uint32_t wy = 0; wy < ps.window; ++wy)
                                for (uint32_t wx = 0; wx < ps.window; ++wx) {
                                    uint32_t iy = oy * ps.stride + wy;
                                    uint32_t ix = ox * ps.stride + wx;
                                    uint32_t idx = (ch * ps.in_h + iy) * ps.in_w + ix;
                                    double v = cc.a_act.at(idx, static_cast<uint32_t>(c));
                                    if (v > best) {
                                        best = v;
                                        best_idx = idx;
                                    }
                                    sum += v;
                                }
                            uint32_t orow = (ch * oh + oy) * ow + ox;
                            pooled.at(orow, static_cast<uint32_t>(c)) =
                                ps.kind == PoolKind::Max ? best : sum / (ps.window * ps.window);
                            cc.max_src[static_cast<size_t>(orow) * B + c] = best_idx;
                        }
            cur = std::move(pooled);
        }
    }

    if (range_accum) {
        range_accum->resize(L);
        for (size_t i = 0; i < L; ++i) {
            LayerStats& st = (*range_accum)[i];
            for (double v : cache[i].a_in.v) st.max_abs_in = std::max(st.max_abs_in, std::abs(v));
            for (double v : cache[i].z.v) st.max_abs_z = std::max(st.max_abs_z, std::abs(v));
        }
    }

    // softmax cross-entropy, summed over the batch
    double nll = 0.0;
    Matrix dcur(cur.rows, B);
    {
        std::vector<double> col(cur.rows);
        for (uint32_t c = 0; c < B; ++c) {
            for (uint32_t r = 0; r < cur.rows; ++r) col[r] = cur.at(r, c);
            std::vector<double> p = softmax(col);
            nll -= std::log(std::max(p[labels[c]], 1e-300));
            for (uint32_t r = 0; r < cur.rows; ++r)
                dcur.at(r, c) = p[r] - (r == labels[c] ? 1.0 : 0.0);
        }
    }

    // KL(q || N(0, sp^2)) and total loss
    const double sp = post.prior_sigma;
    double kl = 0.0;
    if (bayes) {
        for (const VariationalLinear& vl : post.layers) {
            auto accum = [&](const std::vector<double>& mu, const std::vector<double>& rho) {
                for (size_t j = 0; j < mu.size(); ++j) {
                    double s = softplus(rho[j]);
                    kl += std::log(sp / s) + (s * s + mu[j] * mu[j]) / (2.0 * sp * sp) - 0.5;
                }
            };
            accum(vl.mu_W.v, vl.rho_W.v);
            accum(vl.mu_b, vl.rho_b);
        }
    }
    double loss = nll + kl_scale * kl;
    if (!std::isfinite(loss)) throw ModelDataError("elbo: non-finite loss");
    if (!grads) return loss;

    // backward
    grads->g.assign(L, VariationalLinear{});
    for (size_t li = L; li-- > 0;) {
        const LinearLayerDef& def = post.arch.layers[li];
        LayerCache& cc = cache[li];

        // through pooling
        Matrix da_act;
        if (def.stage.pool.kind == PoolKind::None) {
            da_act = std::move(dcur);
        } else {
            const PoolSpec& ps = def.stage.pool;
            da_act = Matrix(def.d_out, B);
            const double inv = 1.0 / (ps.window * ps.window);
            for (uint32_t orow = 0; orow < dcur.rows; ++orow)
                for (uint32_t c = 0; c < B; ++c) {
                    double g = dcur.at(orow, c);
                    if (ps.kind == PoolKind::Max) {
                        da_act.at(cc.max_src[static_cast<size_t>(orow) * B + c], c) += g;
                    } else {
                        uint32_t ch = orow / (ps.out_h() * ps.out_w());
                        uint32_t rem = orow % (ps.out_h() * ps.out_w());
                        uint32_t oy = rem / ps.out_w(), ox = rem % ps.out_w();
                        for (uint32_t wy = 0; wy < ps.window; ++wy)
                            for (uint32_t wx = 0; wx < ps.window; ++wx) {
                                uint32_t iy = oy * ps.stride + wy;
                                uint32_t ix = ox * ps.stride + wx;
                                da_act.at((ch * ps.in_h + iy) * ps.in_w + ix, c) += g * inv;
                            }
                    }
                }
        }

        // through the activation
        Matrix dz = std::move(da_act);
        for (uint32_t r = 0; r < dz.rows; ++r)
            for (uint32_t c = 0; c < B; ++c)
                dz.at(r, c) *= act_grad(def.stage.act, cc.z.at(r, c), cc.a_act.at(r, c));

        // through the linear map
        auto [prow, pcol] = param_shape(def);
        Matrix dW(prow, pcol);
        std::vector<double> db(prow, 0.0);
        Matrix da_in(def.d_in, B);
        if (def.kind == LinearLayerDef::Kind::Dense) {
            gemm_at_bt(dz, cc.a_in, dW);
            gemm_ta(W[li], dz, da_in);
            for (uint32_t r = 0; r < dz.rows; ++r) {
                double acc = 0.0;
                for (uint32_t c = 0; c < B; ++c) acc += dz.at(r, c);
                db[r] = acc;
            }
        } else {
            const ConvSpec& cs = def.conv;
            const uint32_t npos = cs.positions();
            // dK rows in parallel, samples accumulated serially inside
#pragma omp parallel for schedule(static)
            for (int64_t oc = 0; oc < static_cast<int64_t>(cs.out_c); ++oc) {
                double* wrow = dW.row(static_cast<uint32_t>(oc));
                double bacc = 0.0;
                for (uint32_t s = 0; s < B; ++s) {
                    const Matrix& P = cc.patches[s];
                    for (uint32_t pos = 0; pos < npos; ++pos) {
                        double g = dz.at(static_cast<uint32_t>(oc) * npos + pos, s);
                        if (g == 0.0) continue;
                        bacc += g;
                        const double* pcolv = &P.v[pos];
                        for (uint32_t pd = 0; pd < cs.patch_dim(); ++pd)
                            wrow[pd] += g * pcolv[static_cast<size_t>(pd) * npos];
                    }
                }
                db[oc] = bacc;
            }
            std::fill(da_in.v.begin(), da_in.v.end(), 0.0);
#pragma omp parallel for schedule(static)
            for (int64_t s = 0; s < static_cast<int64_t>(B); ++s) {
                Matrix dZc(cs.out_c, npos);
                for (uint32_t oc = 0; oc < cs.out_c; ++oc)
                    for (uint32_t pos = 0; pos < npos; ++pos)
                        dZc.at(oc, pos) = dz.at(oc * npos + pos, static_cast<uint32_t>(s));
                Matrix dP(cs.patch_dim(), npos);
                gemm_ta(W[li], dZc, dP);
                std::vector<double> col(def.d_in, 0.0);
                scatter_patches(cs, dP, col.data());
                for (uint32_t r = 0; r < def.d_in; ++r) da_in.at(r, static_cast<uint32_t>(s)) = col[r];
            }
        }

        // reparameterization + KL gradients
        VariationalLinear& g = grads->g[li];
        const VariationalLinear& vl = post.layers[li];
        g.mu_W = Matrix(prow, pcol);
        g.rho_W = Matrix(prow, pcol);
        g.mu_b.assign(prow, 0.0);
        g.rho_b.assign(prow, 0.0);
        const double sp2 = sp * sp;
        for (size_t j = 0; j < dW.v.size(); ++j) {
            double mu = vl.mu_W.v[j];
            g.mu_W.v[j] = dW.v[j] + (bayes ? kl_scale * mu / sp2 : 0.0);
            if (bayes) {
                double rho = vl.rho_W.v[j];
                double s = softplus(rho);
                double dkl_ds = -1.0 / s + s / sp2;
                g.rho_W.v[j] = (dW.v[j] * noise[li].eps_W.v[j] + kl_scale * dkl_ds) * sigmoid(rho);
            }
        }
        for (size_t j = 0; j < db.size(); ++j) {
            double mu = vl.mu_b[j];
            g.mu_b[j] = db[j] + (bayes ? kl_scale * mu / sp2 : 0.0);
            if (bayes) {
                double rho = vl.rho_b[j];
                double s = softplus(rho);
                double dkl_ds = -1.0 / s + s / sp2;
                g.rho_b[j] = (db[j] * noise[li].eps_b[j] + kl_scale * dkl_ds) * sigmoid(rho);
            }
        }

        dcur = std::move(da_in);
    }
    return loss;
}

// ---- Adam ----

namespace {

struct AdamState {
    std::vector<VariationalLinear> m, v;
    uint64_t step = 0;
};

void adam_init(AdamState& st, const Posterior& post) {
    st.m.clear();
    st.v.clear();
    for (const VariationalLinear& vl : post.layers) {
        VariationalLinear zm, zv;
        zm.mu_W = Matrix(vl.mu_W.rows, vl.mu_W.cols);
        zm.rho_W = Matrix(vl.rho_W.rows, vl.rho_W.cols);
        zm.mu_b.assign(vl.mu_b.size(), 0.0);
        zm.rho_b.assign(vl.rho_b.size(), 0.0);
        st.m.push_back(zm);
        st.v.push_back(std::move(zm));
    }
    st.step = 0;
}

void adam_update_one(double& param, double g, double& m, double& v, double lr, double bc1,
                     double bc2) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    param -= lr * (m / bc1) / (std::sqrt(v / bc2) + eps);
}

void adam_step(Posterior& post, const ParamGrads& grads, AdamState& st, double lr, bool bayes) {
    ++st.step;
    double bc1 = 1.0 - std::pow(0.9, static_cast<double>(st.step));
    double bc2 = 1.0 - std::pow(0.999, static_cast<double>(st.step));
    for (size_t i = 0; i < post.layers.size(); ++i) {
        VariationalLinear& vl = post.layers[i];
        const VariationalLinear& g = grads.g[i];
        for (size_t j = 0; j < vl.mu_W.v.size(); ++j)
            adam_update_one(vl.mu_W.v[j], g.mu_W.v[j], st.m[i].mu_W.v[j], st.v[i].mu_W.v[j], lr, bc1, bc2);
        for (size_t j = 0; j < vl.mu_b.size(); ++j)
            adam_update_one(vl.mu_b[j], g.mu_b[j], st.m[i].mu_b[j], st.v[i].mu_b[j], lr, bc1, bc2);
        if (bayes) {
            for (size_t j = 0; j < vl.rho_W.v.size(); ++j)
                adam_update_one(vl.rho_W.v[j], g.rho_W.v[j], st.m[i].rho_W.v[j], st.v[i].rho_W.v[j], lr, bc1, bc2);
            for (size_t j = 0; j < vl.rho_b.size(); ++j)
                adam_update_one(vl.rho_b[j], g.rho_b[j], st.m[i].rho_b[j], st.v[i].rho_b[j], lr, bc1, bc2);
        }
    }
}

}  // namespace

Posterior train(const NetworkArch& arch, const Dataset& train_data, const Dataset* eval_data,
                const TrainConfig& cfg, TrainReport* report) {
    arch.validate();
    if (train_data.count == 0) throw ModelDataError("train: empty dataset");
    if (train_data.dim != arch.input_dim) throw ModelDataError("train: dataset width mismatch");
    for (uint8_t l : train_data.labels)
        if (l >= arch.num_classes) throw ModelDataError("train: label out of range");

    Rng rng(cfg.seed);
    Posterior post = init_posterior(arch, rng, cfg.prior_sigma,
                                    cfg.bayes ? cfg.rho_init : -40.0);
    AdamState adam;
    adam_init(adam, post);

    const uint32_t num_batches = (train_data.count + cfg.batch_size - 1) / cfg.batch_size;
    const double kl_scale =
        cfg.bayes ? (cfg.kl_scale > 0 ? cfg.kl_scale : 1.0 / static_cast<double>(num_batches))
                  : 0.0;

    std::vector<uint32_t> order(train_data.count);
    for (uint32_t i = 0; i < order.size(); ++i) order[i] = i;

    std::vector<LayerStats> ranges(arch.layers.size());
    double last_loss = 0.0;
    for (uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        // Fisher-Yates driven by the run rng: deterministic for a given seed
        for (uint32_t i = static_cast<uint32_t>(order.size()) - 1; i > 0; --i)
            std::swap(order[i], order[rng.uniform_below(i + 1)]);

        const bool record = epoch + 1 == cfg.epochs;
        for (uint32_t bi = 0; bi < num_batches; ++bi) {
            uint32_t begin = bi * cfg.batch_size;
            uint32_t bsz = std::min(cfg.batch_size, train_data.count - begin);
            Matrix X(arch.input_dim, bsz);
            std::vector<uint8_t> labels(bsz);
            for (uint32_t c = 0; c < bsz; ++c) {
                const float* px = train_data.sample(order[begin + c]);
                for (uint32_t r = 0; r < arch.input_dim; ++r) X.at(r, c) = px[r];
                labels[c] = train_data.labels[order[begin + c]];
            }
            NoiseBundle noise = cfg.bayes ? draw_noise(post, rng) : zero_noise(post);
            ParamGrads grads;
            double loss;
            try {
                loss = elbo_loss(post, X, labels, noise, kl_scale, cfg.bayes, &grads,
                                 record ? &ranges : nullptr);
            } catch (const ModelDataError&) {
                throw ModelDataError("train: diverged (non-finite loss) at epoch " +
                                     std::to_string(epoch) + " batch " + std::to_string(bi));
            }
            adam_step(post, grads, adam, cfg.lr, cfg.bayes);
            last_loss = loss;
        }
        if (cfg.verbose)
            std::fprintf(stderr, "epoch %u/%u loss %.4f\n", epoch + 1, cfg.epochs, last_loss);
    }

    // weight magnitude envelope: |mu| + 3*sigma covers sampled draws
    for (size_t li = 0; li < post.layers.size(); ++li) {
        const VariationalLinear& vl = post.layers[li];
        double mw = 0.0;
        for (size_t j = 0; j < vl.mu_W.v.size(); ++j)
            mw = std::max(mw, std::abs(vl.mu_W.v[j]) + 3.0 * softplus(vl.rho_W.v[j]));
        for (size_t j = 0; j < vl.mu_b.size(); ++j)
            mw = std::max(mw, std::abs(vl.mu_b[j]) + 3.0 * softplus(vl.rho_b[j]));
        ranges[li].max_abs_w = mw;
    }
    post.stats = ranges;

    if (report) {
        report->final_loss = last_loss;
        report->epochs_run = cfg.epochs;
        Rng eval_rng = rng.fork();
        report->train_accuracy = evaluate_accuracy(post, train_data, cfg.ensemble_size, eval_rng);
        if (eval_data)
            report->test_accuracy = evaluate_accuracy(post, *eval_data, cfg.ensemble_size, eval_rng);
    }
    return post;
}

// ---- persistence ----

namespace {

void put_u16(std::vector<uint8_t>& o, uint16_t v) {
    o.push_back(static_cast<uint8_t>(v));
    o.push_back(static_cast<uint8_t>(v >> 8));
}
void put_u32v(std::vector<uint8_t>& o, uint32_t v) {
    for (int i = 0; i < 4; ++i) o.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
void put_u64v(std::vector<uint8_t>& o, uint64_t v) {
    for (int i = 0; i < 8; ++i) o.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
void put_f64(std::vector<uint8_t>& o, double d) {
    uint64_t v;
    std::memcpy(&v, &d, 8);
    put_u64v(o, v);
}

struct Reader {
    std::span<const uint8_t> in;
    size_t pos = 0;
    uint8_t u8() {
        if (pos + 1 > in.size()) throw ModelDataError("model: truncated");
        return in[pos++];
    }
    uint16_t u16() {
        uint16_t v = u8();
        return static_cast<uint16_t>(v | (static_cast<uint16_t>(u8()) << 8));
    }
    uint32_t u32() {
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(u8()) << (8 * i);
        return v;
    }
    uint64_t u64() {
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(u8()) << (8 * i);
        return v;
    }
    double f64() {
        uint64_t v = u64();
        double d;
        std::memcpy(&d, &v, 8);
        return d;
    }
};

constexpr uint32_t kModelMagic = 0x4D4E4842;  // "BHNM"

void put_matrix(std::vector<uint8_t>& o, const Matrix& m) {
    put_u32v(o, m.rows);
    put_u32v(o, m.cols);
    for (double d : m.v) put_f64(o, d);
}
Matrix get_matrix(Reader& r) {
    uint32_t rows = r.u32(), cols = r.u32();
    if (static_cast<uint64_t>(rows) * cols > (1ull << 28))
        throw ModelDataError("model: implausible tensor size");
    Matrix m(rows, cols);
    for (double& d : m.v) d = r.f64();
    return m;
}
void put_vec(std::vector<uint8_t>& o, const std::vector<double>& v) {
    put_u32v(o, static_cast<uint32_t>(v.size()));
    for (double d : v) put_f64(o, d);
}
std::vector<double> get_vec(Reader& r) {
    uint32_t n = r.u32();
    if (n > (1u << 26)) throw ModelDataError("model: implausible vector size");
    std::vector<double> v(n);
    for (double& d : v) d = r.f64();
    return v;
}

}  // namespace

std::vector<uint8_t> serialize_model(const Posterior& post) {
    std::vector<uint8_t> o;
    put_u32v(o, kModelMagic);
    put_u32v(o, 1);  // version
    put_u16(o, static_cast<uint16_t>(post.model_id.size()));
    o.insert(o.end(), post.model_id.begin(), post.model_id.end());
    put_f64(o, post.prior_sigma);
    put_u32v(o, post.arch.input_dim);
    put_u32v(o, post.arch.num_classes);
    put_u16(o, static_cast<uint16_t>(post.arch.layers.size()));
    for (const LinearLayerDef& l : post.arch.layers) {
        o.push_back(static_cast<uint8_t>(l.kind));
        put_u32v(o, l.d_in);
        put_u32v(o, l.d_out);
        const ConvSpec& c = l.conv;
        for (uint16_t v : {c.in_c, c.in_h, c.in_w, c.out_c, c.kernel, c.stride, c.pad}) put_u16(o, v);
        o.push_back(static_cast<uint8_t>(l.stage.act));
        o.push_back(static_cast<uint8_t>(l.stage.pool.kind));
        const PoolSpec& p = l.stage.pool;
        for (uint16_t v : {p.channels, p.in_h, p.in_w, p.window, p.stride}) put_u16(o, v);
    }
    for (const VariationalLinear& vl : post.layers) {
        put_matrix(o, vl.mu_W);
        put_matrix(o, vl.rho_W);
        put_vec(o, vl.mu_b);
        put_vec(o, vl.rho_b);
    }
    put_u16(o, static_cast<uint16_t>(post.stats.size()));
    for (const LayerStats& s : post.stats) {
        put_f64(o, s.max_abs_in);
        put_f64(o, s.max_abs_w);
        put_f64(o, s.max_abs_z);
    }
    return o;
}

Posterior deserialize_model(std::span<const uint8_t> bytes) {
    Reader r{bytes};
    if (r.u32() != kModelMagic) throw ModelDataError("model: bad magic");
    if (r.u32() != 1) throw ModelDataError("model: unsupported version");
    Posterior post;
    uint16_t idlen = r.u16();
    post.model_id.resize(idlen);
    for (auto& ch : post.model_id) ch = static_cast<char>(r.u8());
    post.prior_sigma = r.f64();
    post.arch.input_dim = r.u32();
    post.arch.num_classes = r.u32();
    uint16_t nl = r.u16();
    for (uint16_t i = 0; i < nl; ++i) {
        LinearLayerDef l;
        l.kind = static_cast<LinearLayerDef::Kind>(r.u8());
        l.d_in = r.u32();
        l.d_out = r.u32();
        l.conv.in_c = r.u16();
        l.conv.in_h = r.u16();
        l.conv.in_w = r.u16();
        l.conv.out_c = r.u16();
        l.conv.kernel = r.u16();
        l.conv.stride = r.u16();
        l.conv.pad = r.u16();
        l.stage.act = static_cast<Activation>(r.u8());
        l.stage.pool.kind = static_cast<PoolKind>(r.u8());
        l.stage.pool.channels = r.u16();
        l.stage.pool.in_h = r.u16();
        l.stage.pool.in_w = r.u16();
        l.stage.pool.window = r.u16();
        l.stage.pool.stride = r.u16();
        post.arch.layers.push_back(l);
    }
    for (uint16_t i = 0; i < nl; ++i) {
        VariationalLinear vl;
        vl.mu_W = get_matrix(r);
        vl.rho_W = get_matrix(r);
        vl.mu_b = get_vec(r);
        vl.rho_b = get_vec(r);
        post.layers.push_back(std::move(vl));
    }
    uint16_t ns = r.u16();
    for (uint16_t i = 0; i < ns; ++i) {
        LayerStats s;
        s.max_abs_in = r.f64();
        s.max_abs_w = r.f64();
        s.max_abs_z = r.f64();
        post.stats.push_back(s);
    }
    if (r.pos != bytes.size()) throw ModelDataError("model: trailing bytes");
    post.arch.validate();
    for (size_t i = 0; i < post.layers.size(); ++i) {
        auto [rows, cols] = param_shape(post.arch.layers[i]);
        const VariationalLinear& vl = post.layers[i];
        if (vl.mu_W.rows != rows || vl.mu_W.cols != cols || vl.rho_W.rows != rows ||
            vl.rho_W.cols != cols || vl.mu_b.size() != rows || vl.rho_b.size() != rows)
            throw ModelDataError("model: tensor shape mismatch at layer " + std::to_string(i));
        for (double v : vl.mu_W.v)
            if (!std::isfinite(v)) throw ModelDataError("model: non-finite parameter");
        for (double v : vl.rho_W.v)
            if (!std::isfinite(v)) throw ModelDataError("model: non-finite parameter");
    }
    return post;
}

void save_model(const std::string& path, const Posterior& post) {
    std::vector<uint8_t> bytes = serialize_model(post);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw ModelDataError("model: cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw ModelDataError("model: short write");
}

Posterior load_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ModelDataError("model: cannot open '" + path + "'");
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    return deserialize_model(bytes);
}

void save_sampled_models(const std::string& path, std::span<const SampledModel> models) {
    std::vector<uint8_t> o;
    put_u32v(o, 0x53484842);  // "BHHS" sampled-set container
    put_u16(o, static_cast<uint16_t>(models.size()));
    for (const SampledModel& m : models) {
        put_u16(o, static_cast<uint16_t>(m.W.size()));
        put_u32v(o, m.arch->input_dim);
        put_u32v(o, m.arch->num_classes);
        for (size_t i = 0; i < m.W.size(); ++i) {
            o.push_back(static_cast<uint8_t>(m.arch->layers[i].stage.act));
            o.push_back(static_cast<uint8_t>(m.arch->layers[i].stage.pool.kind));
            const PoolSpec& p = m.arch->layers[i].stage.pool;
            for (uint16_t v : {p.channels, p.in_h, p.in_w, p.window, p.stride}) put_u16(o, v);
            put_matrix(o, m.W[i]);
            put_vec(o, m.b[i]);
        }
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw ModelDataError("sampled models: cannot open '" + path + "'");
    f.write(reinterpret_cast<const char*>(o.data()), static_cast<std::streamsize>(o.size()));
}

std::vector<SampledModel> load_sampled_models(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ModelDataError("sampled models: cannot open '" + path + "'");
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    Reader r{bytes};
    if (r.u32() != 0x53484842) throw ModelDataError("sampled models: bad magic");
    uint16_t count = r.u16();
    std::vector<SampledModel> out;
    for (uint16_t k = 0; k < count; ++k) {
        SampledModel m;
        uint16_t nl = r.u16();
        auto arch = std::make_shared<NetworkArch>();
        arch->input_dim = r.u32();
        arch->num_classes = r.u32();
        for (uint16_t i = 0; i < nl; ++i) {
            LinearLayerDef l;
            l.stage.act = static_cast<Activation>(r.u8());
            l.stage.pool.kind = static_cast<PoolKind>(r.u8());
            l.stage.pool.channels = r.u16();
            l.stage.pool.in_h = r.u16();
            l.stage.pool.in_w = r.u16();
            l.stage.pool.window = r.u16();
            l.stage.pool.stride = r.u16();
            m.W.push_back(get_matrix(r));
            m.b.push_back(get_vec(r));
            l.d_out = m.W.back().rows;
            l.d_in = m.W.back().cols;
            arch->layers.push_back(l);
        }
        m.arch = arch;
        m.sample_index = k;
        out.push_back(std::move(m));
    }
    return out;
}

}  // namespace bayhenn
