#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <zlib.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "bayhenn/bnn.hpp"
#include "bayhenn/ref_kernels.hpp"

using namespace bayhenn;

namespace {

// Direct sliding-window convolution, independent of im2col and lowering.
std::vector<double> naive_conv(const ConvSpec& c, const Matrix& kernels,
                               std::span<const double> bias, std::span<const double> x) {
    std::vector<double> out(c.out_dim(), 0.0);
    for (uint32_t oc = 0; oc < c.out_c; ++oc)
        for (uint32_t oy = 0; oy < c.out_h(); ++oy)
            for (uint32_t ox = 0; ox < c.out_w(); ++ox) {
                double acc = bias[oc];
                for (uint32_t ic = 0; ic < c.in_c; ++ic)
                    for (uint32_t ky = 0; ky < c.kernel; ++ky)
                        for (uint32_t kx = 0; kx < c.kernel; ++kx) {
                            int64_t iy = static_cast<int64_t>(oy) * c.stride - c.pad + ky;
                            int64_t ix = static_cast<int64_t>(ox) * c.stride - c.pad + kx;
                            if (iy < 0 || iy >= c.in_h || ix < 0 || ix >= c.in_w) continue;
                            acc += kernels.at(oc, (ic * c.kernel + ky) * c.kernel + kx) *
                                   x[(ic * c.in_h + iy) * c.in_w + ix];
                        }
                out[(oc * c.out_h() + oy) * c.out_w() + ox] = acc;
            }
    return out;
}

Dataset toy_separable(uint32_t n, uint64_t seed) {
    Rng rng(seed);
    Dataset d;
    d.count = n;
    d.dim = 2;
    d.classes = 2;
    for (uint32_t i = 0; i < n; ++i) {
        float a = static_cast<float>(rng.uniform01());
        float b = static_cast<float>(rng.uniform01());
        // keep a margin so the task is cleanly separable
        while (std::abs(a - b) < 0.05f) {
            a = static_cast<float>(rng.uniform01());
            b = static_cast<float>(rng.uniform01());
        }
        d.pixels.push_back(a * 255.0f / 255.0f);
        d.pixels.push_back(b);
        d.labels.push_back(a > b ? 1 : 0);
    }
    return d;
}

}  // namespace

TEST_CASE("matrix kernels match the serial reference exactly") {
    Rng rng(10);
    Matrix A(17, 23), B(23, 9);
    for (double& v : A.v) v = rng.uniform01() * 2 - 1;
    for (double& v : B.v) v = rng.uniform01() * 2 - 1;
    Matrix C(17, 9);
    gemm(A, B, C);
    std::vector<double> Cref(17 * 9);
    ref::gemm_serial(A.v.data(), B.v.data(), Cref.data(), 17, 23, 9);
    for (size_t i = 0; i < Cref.size(); ++i) CHECK(C.v[i] == Cref[i]);

    std::vector<double> x(23), y(17), yref(17);
    for (double& v : x) v = rng.uniform01();
    matvec(A, x, y);
    ref::matvec_serial(A.v.data(), 17, 23, x.data(), yref.data());
    for (size_t i = 0; i < y.size(); ++i) CHECK(y[i] == yref[i]);
}

TEST_CASE("degenerate posterior samples equal the mean") {
    NetworkArch arch = NetworkArch::mlp(4, {3}, 2);
    Rng rng(5);
    Posterior post = init_posterior(arch, rng, 0.1, -40.0);  // sigma ~= 4e-18
    Rng draw(7);
    SampledModel s = sample_model(post, draw);
    SampledModel m = mean_model(post);
    for (size_t i = 0; i < s.W.size(); ++i) {
        for (size_t j = 0; j < s.W[i].v.size(); ++j)
            CHECK(s.W[i].v[j] == doctest::Approx(m.W[i].v[j]).epsilon(1e-14));
        for (size_t j = 0; j < s.b[i].size(); ++j)
            CHECK(s.b[i][j] == doctest::Approx(m.b[i][j]).epsilon(1e-14));
    }
}

TEST_CASE("sampling is deterministic under a seed") {
    NetworkArch arch = NetworkArch::mlp(6, {5}, 3);
    Rng rng(5);
    Posterior post = init_posterior(arch, rng);
    Rng d1(99), d2(99);
    SampledModel a = sample_model(post, d1);
    SampledModel b = sample_model(post, d2);
    for (size_t i = 0; i < a.W.size(); ++i) {
        CHECK(a.W[i] == b.W[i]);
        CHECK(a.b[i] == b.b[i]);
    }
}

TEST_CASE("sample statistics match (mu, softplus(rho))") {
    NetworkArch arch = NetworkArch::mlp(1, {}, 1);  // wait: mlp needs classes >= 1
    // single weight: 1 -> 1 linear layer
    arch = NetworkArch::mlp(1, {}, 1);
    Rng rng(31);
    Posterior post = init_posterior(arch, rng);
    post.layers[0].mu_W.at(0, 0) = 0.7;
    post.layers[0].rho_W.at(0, 0) = -1.0;  // sigma = softplus(-1) ~ 0.3133
    double sigma = softplus(-1.0);

    Rng draw(1234);
    const int n = 10'000;
    double sum = 0, sumsq = 0;
    for (int i = 0; i < n; ++i) {
        SampledModel m = sample_model(post, draw);
        double w = m.W[0].at(0, 0);
        sum += w;
        sumsq += w * w;
    }
    double mean = sum / n;
    double sd = std::sqrt(sumsq / n - mean * mean);
    double se_mean = sigma / std::sqrt(n);              // sd of the sample mean
    double se_sd = sigma / std::sqrt(2.0 * n);          // sd of the sample sd
    CHECK(std::abs(mean - 0.7) < 3 * se_mean);
    CHECK(std::abs(sd - sigma) < 3 * se_sd);
}

TEST_CASE("identity network forwards its input") {
    NetworkArch arch = NetworkArch::mlp(3, {}, 3, Activation::Identity);
    Posterior post;
    post.arch = arch;
    VariationalLinear vl;
    vl.mu_W = Matrix(3, 3);
    for (uint32_t i = 0; i < 3; ++i) vl.mu_W.at(i, i) = 1.0;
    vl.rho_W = Matrix(3, 3);
    for (double& v : vl.rho_W.v) v = -40.0;
    vl.mu_b.assign(3, 0.0);
    vl.rho_b.assign(3, -40.0);
    post.layers.push_back(vl);

    std::vector<double> x{0.3, -1.2, 2.5};
    ForwardTrace tr;
    std::vector<double> p = forward_plain(mean_model(post), x, &tr);
    CHECK(tr.z[0] == x);          // the linear stage is the identity
    CHECK(p == softmax(x));       // prediction ends in softmax

    double sum = 0;
    for (double v : p) sum += v;
    CHECK(std::abs(sum - 1.0) < 1e-9);
}

TEST_CASE("softmax normalizes random vectors") {
    Rng rng(3);
    for (int it = 0; it < 100; ++it) {
        std::vector<double> z(10);
        for (double& v : z) v = rng.normal(5.0);
        std::vector<double> p = softmax(z);
        double sum = 0;
        for (double v : p) {
            CHECK(v >= 0.0);
            sum += v;
        }
        CHECK(std::abs(sum - 1.0) < 1e-9);
    }
}

TEST_CASE("conv lowering equals the naive sliding window") {
    ConvSpec c;
    c.in_c = 2;
    c.in_h = 9;
    c.in_w = 9;
    c.out_c = 4;
    c.kernel = 3;
    c.stride = 2;
    c.pad = 1;
    Rng rng(41);
    Matrix K(c.out_c, c.patch_dim());
    for (double& v : K.v) v = rng.uniform01() * 2 - 1;
    std::vector<double> bias(c.out_c);
    for (double& v : bias) v = rng.uniform01() - 0.5;
    std::vector<double> x(c.in_dim());
    for (double& v : x) v = rng.uniform01() * 2 - 1;

    Matrix W = lower_conv(c, K);
    std::vector<double> blow = lower_conv_bias(c, bias);
    std::vector<double> y(c.out_dim());
    matvec(W, x, y);
    for (size_t i = 0; i < y.size(); ++i) y[i] += blow[i];

    std::vector<double> want = naive_conv(c, K, bias, x);
    for (size_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(want[i]).epsilon(1e-12));
}

TEST_CASE("im2col training path agrees with the naive convolution") {
    // single conv layer network, sigma ~ 0: the batched forward inside the
    // loss must equal the naive oracle
    ConvSpec c;
    c.in_c = 1;
    c.in_h = 4;
    c.in_w = 4;
    c.out_c = 2;
    c.kernel = 3;
    c.stride = 1;
    c.pad = 0;
    NetworkArch arch;
    arch.input_dim = c.in_dim();
    arch.num_classes = c.out_dim();  // 2*2*2 = 8
    LinearLayerDef l;
    l.kind = LinearLayerDef::Kind::Conv;
    l.conv = c;
    l.d_in = c.in_dim();
    l.d_out = c.out_dim();
    arch.layers.push_back(l);
    arch.validate();

    Rng rng(77);
    Posterior post = init_posterior(arch, rng, 0.1, -40.0);
    std::vector<double> x(c.in_dim());
    for (double& v : x) v = rng.uniform01();
    Matrix X(c.in_dim(), 1);
    for (uint32_t r = 0; r < X.rows; ++r) X.at(r, 0) = x[r];
    std::vector<uint8_t> label{3};

    double loss = elbo_loss(post, X, label, zero_noise(post), 0.0, false, nullptr);
    std::vector<double> z = naive_conv(c, post.layers[0].mu_W, post.layers[0].mu_b, x);
    double want = -std::log(softmax(z)[3]);
    CHECK(loss == doctest::Approx(want).epsilon(1e-9));
}

TEST_CASE("ensemble prediction") {
    NetworkArch arch = NetworkArch::mlp(5, {6}, 3);
    Rng rng(21);
    Posterior post = init_posterior(arch, rng);
    std::vector<double> x{0.1, -0.4, 0.9, 0.0, 0.2};

    // S = 1 equals the single sampled forward
    Rng d1(7), d2(7);
    EnsemblePrediction e1 = predict_ensemble(post, x, 1, d1);
    std::vector<double> p1 = forward_plain(sample_model(post, d2), x);
    CHECK(e1.p == p1);

    // degenerate posterior: any S gives the deterministic network output
    Posterior frozen = post;
    for (VariationalLinear& vl : frozen.layers) {
        for (double& v : vl.rho_W.v) v = -40.0;
        for (double& v : vl.rho_b) v = -40.0;
    }
    Rng d3(1);
    EnsemblePrediction ef = predict_ensemble(frozen, x, 5, d3);
    std::vector<double> pm = forward_plain(mean_model(frozen), x);
    for (size_t i = 0; i < pm.size(); ++i) CHECK(ef.p[i] == doctest::Approx(pm[i]).epsilon(1e-12));

    // S = 4 equals the explicit average over the same seeded draws
    Rng d4(99), d5(99);
    EnsemblePrediction e4 = predict_ensemble(post, x, 4, d4);
    std::vector<double> acc(3, 0.0);
    for (int k = 0; k < 4; ++k) {
        std::vector<double> p = forward_plain(sample_model(post, d5), x);
        for (size_t i = 0; i < 3; ++i) acc[i] += p[i];
    }
    for (size_t i = 0; i < 3; ++i) CHECK(e4.p[i] == acc[i] / 4.0);
    CHECK(e4.label == argmax_lowest_tie(e4.p));
}

TEST_CASE("stage activations match the scalar formulas") {
    Rng rng(23);
    std::vector<double> z(64);
    for (double& v : z) v = rng.normal(3.0);

    std::vector<double> sig = apply_stage({Activation::Sigmoid, {}}, z);
    std::vector<double> th = apply_stage({Activation::Tanh, {}}, z);
    std::vector<double> re = apply_stage({Activation::ReLU, {}}, z);
    for (size_t i = 0; i < z.size(); ++i) {
        CHECK(std::abs(sig[i] - 1.0 / (1.0 + std::exp(-z[i]))) <= 1e-12);
        CHECK(std::abs(th[i] - std::tanh(z[i])) <= 1e-12);
        CHECK(re[i] == (z[i] > 0 ? z[i] : 0.0));  // negatives zeroed exactly
    }
}

TEST_CASE("divergence is reported with epoch and batch") {
    Dataset data = toy_separable(64, 3);
    NetworkArch arch = NetworkArch::mlp(2, {4}, 2);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 16;
    cfg.lr = 1e160;  // one step pushes the squared parameters past the double range
    cfg.seed = 1;
    try {
        train(arch, data, nullptr, cfg, nullptr);
        FAIL("expected divergence");
    } catch (const ModelDataError& e) {
        std::string msg = e.what();
        CHECK(msg.find("diverged") != std::string::npos);
        CHECK(msg.find("epoch") != std::string::npos);
        CHECK(msg.find("batch") != std::string::npos);
    }
}

TEST_CASE("argmax is stable under common positive scaling") {
    Rng rng(17);
    for (int it = 0; it < 100; ++it) {
        std::vector<double> p(7);
        for (double& v : p) v = rng.uniform01();
        uint32_t a = argmax_lowest_tie(p);
        std::vector<double> scaled = p;
        for (double& v : scaled) v *= 13.5;
        CHECK(argmax_lowest_tie(scaled) == a);
    }
    // lowest-index tie-break is literal
    std::vector<double> tie{0.25, 0.5, 0.5, 0.1};
    CHECK(argmax_lowest_tie(tie) == 1);
}

TEST_CASE("KL term vanishes when the posterior equals the prior") {
    NetworkArch arch = NetworkArch::mlp(2, {2}, 2);
    Rng rng(3);
    Posterior post = init_posterior(arch, rng, 0.1);
    double rho_prior = std::log(std::exp(0.1) - 1.0);  // softplus(rho) = 0.1
    for (VariationalLinear& vl : post.layers) {
        for (double& v : vl.mu_W.v) v = 0.0;
        for (double& v : vl.mu_b) v = 0.0;
        for (double& v : vl.rho_W.v) v = rho_prior;
        for (double& v : vl.rho_b) v = rho_prior;
    }
    Matrix X(2, 4);
    std::vector<uint8_t> labels{0, 1, 0, 1};
    Rng noise_rng(5);
    NoiseBundle noise = draw_noise(post, noise_rng);
    double with_kl = elbo_loss(post, X, labels, noise, 1e6, true, nullptr);
    double without = elbo_loss(post, X, labels, noise, 0.0, true, nullptr);
    CHECK(std::abs(with_kl - without) < 1e-6);
}

TEST_CASE("KL is nonnegative for random posteriors") {
    NetworkArch arch = NetworkArch::mlp(3, {4}, 2);
    Rng rng(9);
    Matrix X(3, 2);
    std::vector<uint8_t> labels{0, 1};
    for (int it = 0; it < 20; ++it) {
        Posterior post = init_posterior(arch, rng);
        for (VariationalLinear& vl : post.layers) {
            for (double& v : vl.mu_W.v) v = rng.normal(0.3);
            for (double& v : vl.rho_W.v) v = rng.normal(2.0) - 3.0;
        }
        NoiseBundle noise = zero_noise(post);
        double l1 = elbo_loss(post, X, labels, noise, 1.0, true, nullptr);
        double l0 = elbo_loss(post, X, labels, noise, 0.0, true, nullptr);
        CHECK(l1 - l0 >= -1e-12);  // kl_scale * KL >= 0
    }
}

namespace {
// central finite differences with the reparameterization noise held fixed
void check_gradients(Posterior& post, const Matrix& X, std::span<const uint8_t> labels,
                     const NoiseBundle& noise, double kl_scale, bool bayes) {
    ParamGrads grads;
    elbo_loss(post, X, labels, noise, kl_scale, bayes, &grads);
    const double h = 1e-6;
    auto loss_at = [&]() { return elbo_loss(post, X, labels, noise, kl_scale, bayes, nullptr); };
    for (size_t li = 0; li < post.layers.size(); ++li) {
        VariationalLinear& vl = post.layers[li];
        auto check_param = [&](double& p, double analytic) {
            double keep = p;
            p = keep + h;
            double up = loss_at();
            p = keep - h;
            double down = loss_at();
            p = keep;
            double fd = (up - down) / (2 * h);
            double denom = std::max({std::abs(fd), std::abs(analytic), 1e-10});
            CHECK(std::abs(fd - analytic) / denom < 1e-4);
        };
        for (size_t j = 0; j < vl.mu_W.v.size(); ++j) check_param(vl.mu_W.v[j], grads.g[li].mu_W.v[j]);
        for (size_t j = 0; j < vl.mu_b.size(); ++j) check_param(vl.mu_b[j], grads.g[li].mu_b[j]);
        if (bayes) {
            for (size_t j = 0; j < vl.rho_W.v.size(); ++j)
                check_param(vl.rho_W.v[j], grads.g[li].rho_W.v[j]);
            for (size_t j = 0; j < vl.rho_b.size(); ++j)
                check_param(vl.rho_b[j], grads.g[li].rho_b[j]);
        }
    }
}
}  // namespace

TEST_CASE("analytic gradients match finite differences on a 2-2-2 network") {
    NetworkArch arch = NetworkArch::mlp(2, {2}, 2);
    Rng rng(123);
    Posterior post = init_posterior(arch, rng, 0.1, -2.0);
    Matrix X(2, 8);
    std::vector<uint8_t> labels(8);
    for (uint32_t c = 0; c < 8; ++c) {
        X.at(0, c) = rng.uniform01() * 2 - 1;
        X.at(1, c) = rng.uniform01() * 2 - 1;
        labels[c] = static_cast<uint8_t>(rng.uniform_below(2));
    }
    Rng noise_rng(7);
    NoiseBundle noise = draw_noise(post, noise_rng);
    check_gradients(post, X, labels, noise, 0.25, true);
}

TEST_CASE("analytic gradients match finite differences through conv and pooling") {
    ConvSpec c;
    c.in_c = 1;
    c.in_h = 6;
    c.in_w = 6;
    c.out_c = 2;
    c.kernel = 3;
    c.stride = 1;
    c.pad = 0;  // out 2x4x4
    NetworkArch arch;
    arch.input_dim = c.in_dim();
    arch.num_classes = 2;
    LinearLayerDef l1;
    l1.kind = LinearLayerDef::Kind::Conv;
    l1.conv = c;
    l1.d_in = c.in_dim();
    l1.d_out = c.out_dim();
    l1.stage.act = Activation::ReLU;
    l1.stage.pool = PoolSpec{PoolKind::Max, 2, 4, 4, 2, 2};  // 2x2x2 = 8
    arch.layers.push_back(l1);
    LinearLayerDef l2;
    l2.d_in = 8;
    l2.d_out = 2;
    l2.stage.act = Activation::Identity;
    arch.layers.push_back(l2);
    arch.validate();

    Rng rng(55);
    Posterior post = init_posterior(arch, rng, 0.1, -2.0);
    Matrix X(c.in_dim(), 4);
    std::vector<uint8_t> labels(4);
    for (uint32_t col = 0; col < 4; ++col) {
        for (uint32_t r = 0; r < X.rows; ++r) X.at(r, col) = rng.uniform01() * 2 - 1;
        labels[col] = static_cast<uint8_t>(rng.uniform_below(2));
    }
    Rng noise_rng(11);
    NoiseBundle noise = draw_noise(post, noise_rng);
    check_gradients(post, X, labels, noise, 0.1, true);

    // and through avg pooling with tanh
    arch.layers[0].stage.act = Activation::Tanh;
    arch.layers[0].stage.pool.kind = PoolKind::Avg;
    Posterior post2 = init_posterior(arch, rng, 0.1, -2.0);
    NoiseBundle noise2 = draw_noise(post2, noise_rng);
    check_gradients(post2, X, labels, noise2, 0.1, true);
}

TEST_CASE("training separates a toy problem") {
    Dataset data = toy_separable(200, 42);
    NetworkArch arch = NetworkArch::mlp(2, {8}, 2);
    TrainConfig cfg;
    cfg.epochs = 50;
    cfg.batch_size = 32;
    cfg.lr = 0.01;
    cfg.seed = 7;
    cfg.prior_sigma = 1.0;  // 2-wide inputs leave the 0.1 default data-starved
    TrainReport report;
    Posterior post = train(arch, data, nullptr, cfg, &report);
    CHECK(report.train_accuracy >= 0.99);
    CHECK(post.stats.size() == arch.layers.size());
    CHECK(post.stats[0].max_abs_z > 0.0);

    // sigma stays strictly positive after optimization
    for (const VariationalLinear& vl : post.layers) {
        for (double rho : vl.rho_W.v) CHECK(softplus(rho) > 0.0);
        for (double rho : vl.rho_b) CHECK(softplus(rho) > 0.0);
    }
}

TEST_CASE("seeded training is reproducible") {
    Dataset data = toy_separable(100, 9);
    NetworkArch arch = NetworkArch::mlp(2, {4}, 2);
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.batch_size = 16;
    cfg.seed = 31337;
    TrainReport r1, r2;
    Posterior p1 = train(arch, data, nullptr, cfg, &r1);
    Posterior p2 = train(arch, data, nullptr, cfg, &r2);
    CHECK(r1.final_loss == r2.final_loss);
    CHECK(p1.layers[0].mu_W == p2.layers[0].mu_W);
    CHECK(p1.layers[0].rho_W == p2.layers[0].rho_W);
}

TEST_CASE("normal mode trains with sigma frozen at zero") {
    Dataset data = toy_separable(200, 4242);
    NetworkArch arch = NetworkArch::mlp(2, {8}, 2);
    TrainConfig cfg;
    cfg.epochs = 40;
    cfg.batch_size = 32;
    cfg.lr = 0.01;
    cfg.bayes = false;
    TrainReport report;
    Posterior post = train(arch, data, nullptr, cfg, &report);
    CHECK(report.train_accuracy >= 0.99);
    for (const VariationalLinear& vl : post.layers)
        for (double rho : vl.rho_W.v) CHECK(softplus(rho) < 1e-15);  // frozen
}

TEST_CASE("model persistence roundtrips byte-exactly") {
    NetworkArch arch = NetworkArch::mlp(6, {5, 4}, 3);
    Rng rng(77);
    Posterior post = init_posterior(arch, rng);
    post.model_id = "mlp-6-5-4-3";
    post.stats.assign(arch.layers.size(), LayerStats{1.0, 0.5, 7.25});

    std::vector<uint8_t> bytes = serialize_model(post);
    Posterior back = deserialize_model(bytes);
    CHECK(back.arch == post.arch);
    CHECK(back.model_id == post.model_id);
    CHECK(back.layers[0].mu_W == post.layers[0].mu_W);
    CHECK(back.stats[2].max_abs_z == 7.25);
    CHECK(serialize_model(back) == bytes);  // save -> load -> save identical

    save_model("/tmp/bhn_model_test.bin", post);
    Posterior loaded = load_model("/tmp/bhn_model_test.bin");
    CHECK(serialize_model(loaded) == bytes);

    // truncation is a parse error, not a crash
    std::vector<uint8_t> cut(bytes.begin(), bytes.begin() + bytes.size() / 3);
    CHECK_THROWS_AS(deserialize_model(cut), ModelDataError);
}

TEST_CASE("sampled-model export roundtrips") {
    NetworkArch arch = NetworkArch::mlp(4, {3}, 2);
    Rng rng(88);
    Posterior post = init_posterior(arch, rng);
    std::vector<SampledModel> models;
    for (int k = 0; k < 3; ++k) models.push_back(sample_model(post, rng));
    save_sampled_models("/tmp/bhn_theta_test.bin", models);
    std::vector<SampledModel> back = load_sampled_models("/tmp/bhn_theta_test.bin");
    REQUIRE(back.size() == 3);
    std::vector<double> x{0.1, 0.2, 0.3, 0.4};
    for (int k = 0; k < 3; ++k) {
        CHECK(back[k].W[0] == models[k].W[0]);
        CHECK(forward_plain(back[k], x) == forward_plain(models[k], x));
    }
}

TEST_CASE("IDX parsing") {
    // hand-built IDX pair: 3 images of 2x2, labels 0,1,2
    std::vector<uint8_t> img{0, 0, 8, 3, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0, 2,
                             10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110, 120};
    std::vector<uint8_t> lab{0, 0, 8, 1, 0, 0, 0, 3, 0, 1, 2};
    auto write = [](const char* path, const std::vector<uint8_t>& b) {
        std::ofstream f(path, std::ios::binary);
        f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
    };
    write("/tmp/bhn_img.idx", img);
    write("/tmp/bhn_lab.idx", lab);

    Dataset d = load_idx("/tmp/bhn_img.idx", "/tmp/bhn_lab.idx", 10);
    CHECK(d.count == 3);
    CHECK(d.dim == 4);
    CHECK(d.labels == std::vector<uint8_t>{0, 1, 2});
    CHECK(d.pixels[0] == doctest::Approx(10.0 / 255.0));
    CHECK(d.pixels[11] == doctest::Approx(120.0 / 255.0));

    // gzip-compressed variant loads identically
    auto gzip_file = [](const char* src, const char* dst) {
        std::ifstream in(src, std::ios::binary);
        std::vector<uint8_t> raw((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
        z_stream zs{};
        deflateInit2(&zs, Z_DEFAULT_COMPRESSION, Z_DEFLATED, 16 + MAX_WBITS, 8,
                     Z_DEFAULT_STRATEGY);
        std::vector<uint8_t> out(raw.size() + 1024);
        zs.next_in = raw.data();
        zs.avail_in = static_cast<uInt>(raw.size());
        zs.next_out = out.data();
        zs.avail_out = static_cast<uInt>(out.size());
        deflate(&zs, Z_FINISH);
        out.resize(out.size() - zs.avail_out);
        deflateEnd(&zs);
        std::ofstream o(dst, std::ios::binary);
        o.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    };
    gzip_file("/tmp/bhn_img.idx", "/tmp/bhn_img.idx.gz");
    gzip_file("/tmp/bhn_lab.idx", "/tmp/bhn_lab.idx.gz");
    Dataset dz = load_idx("/tmp/bhn_img.idx.gz", "/tmp/bhn_lab.idx.gz", 10);
    CHECK(dz.pixels == d.pixels);
    CHECK(dz.labels == d.labels);

    // malformed inputs are loud, structured errors
    std::vector<uint8_t> bad = img;
    bad[3] = 9;
    write("/tmp/bhn_bad.idx", bad);
    CHECK_THROWS_AS(load_idx("/tmp/bhn_bad.idx", "/tmp/bhn_lab.idx", 10), ModelDataError);
    std::vector<uint8_t> cut(img.begin(), img.begin() + 20);
    write("/tmp/bhn_cut.idx", cut);
    CHECK_THROWS_AS(load_idx("/tmp/bhn_cut.idx", "/tmp/bhn_lab.idx", 10), ModelDataError);
    CHECK_THROWS_AS(load_idx("/tmp/bhn_missing.idx", "/tmp/bhn_lab.idx", 10), ModelDataError);
}

TEST_CASE("CSV parsing") {
    {
        std::ofstream f("/tmp/bhn_data.csv");
        f << "1,0,128,255\n0,10,20,30\n";
    }
    Dataset d = load_csv("/tmp/bhn_data.csv", 2);
    CHECK(d.count == 2);
    CHECK(d.dim == 3);
    CHECK(d.labels == std::vector<uint8_t>{1, 0});
    CHECK(d.pixels[1] == doctest::Approx(128.0 / 255.0));

    {
        std::ofstream f("/tmp/bhn_ragged.csv");
        f << "1,1,2,3\n0,1,2\n";
    }
    CHECK_THROWS_AS(load_csv("/tmp/bhn_ragged.csv", 2), ModelDataError);
    {
        std::ofstream f("/tmp/bhn_badlabel.csv");
        f << "7,1,2,3\n";
    }
    CHECK_THROWS_AS(load_csv("/tmp/bhn_badlabel.csv", 2), ModelDataError);
}
