// Command-line surface: keygen, train, serve, infer, bench.
//
// Exit codes: 0 success, 2 usage, 3 protocol failure, 4 model/data error.
// BAYHENN_ADDR and BAYHENN_PRESET provide defaults for --addr / --preset.

#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <thread>

#include "bayhenn/bench.hpp"
#include "bayhenn/bfv.hpp"
#include "bayhenn/bnn.hpp"
#include "bayhenn/net.hpp"

using namespace bayhenn;
using nlohmann::json;

namespace {

std::atomic<bool> g_stop{false};
void handle_signal(int) { g_stop.store(true); }

std::string env_or(const char* name, const std::string& fallback) {
    const char* v = std::getenv(name);
    return v && *v ? std::string(v) : fallback;
}

int cmd_keygen(const std::string& out_dir, const std::string& preset) {
    RingParamsPtr params = ring_preset(preset);
    std::filesystem::create_directories(out_dir);
    Rng rng = Rng::system();
    auto [pk, sk] = keygen(params, rng);
    save_public_key(out_dir + "/pk.bin", pk, *params);
    save_secret_key(out_dir + "/sk.bin", sk, *params);
    std::printf("wrote %s/pk.bin and %s/sk.bin (preset %s)\n", out_dir.c_str(), out_dir.c_str(),
                preset.c_str());
    return 0;
}

NetworkArch arch_from_config(const json& cfg, uint32_t input_dim, uint32_t classes) {
    std::string type = cfg.value("type", "mlp");
    if (type != "mlp") throw ConfigError("train: only mlp architectures are configurable here");
    std::vector<uint32_t> hidden = cfg.value("hidden", std::vector<uint32_t>{256});
    return NetworkArch::mlp(input_dim, hidden, classes);
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_path) {
    std::ifstream f(config_path);
    if (!f) throw ModelDataError("train: cannot open config '" + config_path + "'");
    json cfg = json::parse(f, nullptr, true, true);  // allow comments

    Dataset train_data, test_data;
    bool have_test = false;
    if (cfg.value("data_format", "idx") == "csv") {
        train_data = load_csv(data_dir + "/train.csv", cfg.value("classes", 10));
        std::string test_csv = data_dir + "/test.csv";
        if (std::ifstream(test_csv)) {
            test_data = load_csv(test_csv, train_data.classes);
            have_test = true;
        }
    } else {
        train_data = load_mnist_dir(data_dir, true);
        try {
            test_data = load_mnist_dir(data_dir, false);
            have_test = true;
        } catch (const ModelDataError&) {
            have_test = false;
        }
    }

    TrainConfig tc;
    tc.epochs = cfg.value("epochs", 10u);
    tc.batch_size = cfg.value("batch_size", 128u);
    tc.lr = cfg.value("lr", 0.001);
    tc.ensemble_size = cfg.value("samples", 4u);
    tc.seed = cfg.value("seed", 1ull);
    tc.prior_sigma = cfg.value("prior_sigma", 0.1);
    tc.bayes = cfg.value("mode", "bayes") != "normal";
    tc.verbose = true;

    NetworkArch arch = arch_from_config(cfg.value("arch", json::object()), train_data.dim,
                                        train_data.classes);
    TrainReport report;
    Posterior post = train(arch, train_data, have_test ? &test_data : nullptr, tc, &report);
    post.model_id = cfg.value("model_id", std::string("mlp"));
    save_model(out_path, post);
    std::printf("trained %s: loss %.4f, train acc %.4f%s\n", post.model_id.c_str(),
                report.final_loss, report.train_accuracy,
                have_test ? (", test acc " + std::to_string(report.test_accuracy)).c_str() : "");
    return 0;
}

int cmd_serve(const std::string& model_path, const std::string& listen_addr, uint16_t samples,
              const std::string& preset, uint64_t seed, const std::string& theta_dir) {
    Posterior post = load_model(model_path);
    RingParamsPtr params = ring_preset(preset);
    ServerOptions opts;
    opts.ensemble_size = samples;
    opts.seed = seed;
    opts.theta_export_dir = theta_dir;
    if (!theta_dir.empty()) std::filesystem::create_directories(theta_dir);
    InferenceServer server(std::move(post), params, opts);
    server.start(listen_addr);
    std::printf("serving %s on %s (S=%u, preset %s)\n", model_path.c_str(), listen_addr.c_str(),
                samples, preset.c_str());
    std::fflush(stdout);

    std::signal(SIGINT, handle_signal);
    std::signal(SIGTERM, handle_signal);
    while (!g_stop.load()) std::this_thread::sleep_for(std::chrono::milliseconds(200));
    server.stop();
    std::printf("served %llu sessions\n",
                static_cast<unsigned long long>(server.sessions_served()));
    return 0;
}

std::vector<double> load_input_vector(const std::string& path, uint32_t index, bool skip_label) {
    // IDX images: pick one by --index; CSV: the --index-th row
    if (path.size() > 4 && path.substr(path.size() - 4) == ".csv") {
        std::ifstream f(path);
        if (!f) throw ModelDataError("infer: cannot open '" + path + "'");
        std::string line;
        for (uint32_t i = 0; i <= index; ++i)
            if (!std::getline(f, line))
                throw ModelDataError("infer: row " + std::to_string(index) + " out of range");
        std::vector<double> vals;
        std::stringstream ss(line);
        std::string cell;
        bool first = true;
        while (std::getline(ss, cell, ',')) {
            if (first && skip_label) {
                first = false;
                continue;
            }
            first = false;
            vals.push_back(std::stod(cell) / 255.0);
        }
        if (vals.empty()) throw ModelDataError("infer: empty CSV row");
        return vals;
    }
    // bare IDX image file: reuse the pair loader against a synthetic label file
    // is overkill; parse the image file directly
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ModelDataError("infer: cannot open '" + path + "'");
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    auto be32 = [&](size_t pos) -> uint32_t {
        if (pos + 4 > bytes.size()) throw ModelDataError("infer: truncated IDX file");
        return (uint32_t(bytes[pos]) << 24) | (uint32_t(bytes[pos + 1]) << 16) |
               (uint32_t(bytes[pos + 2]) << 8) | uint32_t(bytes[pos + 3]);
    };
    if (be32(0) != 0x00000803) throw ModelDataError("infer: not an IDX image file");
    uint32_t count = be32(4), rows = be32(8), cols = be32(12);
    if (index >= count) throw ModelDataError("infer: image index out of range");
    size_t dim = static_cast<size_t>(rows) * cols;
    size_t off = 16 + static_cast<size_t>(index) * dim;
    if (off + dim > bytes.size()) throw ModelDataError("infer: truncated IDX payload");
    std::vector<double> x(dim);
    for (size_t i = 0; i < dim; ++i) x[i] = bytes[off + i] / 255.0;
    return x;
}

int cmd_infer(const std::string& addr, const std::string& input_path, const std::string& keys_dir,
              const std::string& preset, uint32_t index, bool skip_label) {
    RingParamsPtr params = ring_preset(preset);
    std::vector<double> x = load_input_vector(input_path, index, skip_label);

    std::optional<ClientKeys> keys;
    if (!keys_dir.empty()) {
        PublicKey pk = load_public_key(keys_dir + "/pk.bin", params);
        SecretKey sk = load_secret_key(keys_dir + "/sk.bin", params);
        keys = ClientKeys{std::move(pk), std::move(sk)};
    }

    auto [host, port] = parse_addr(addr);
    TcpTransport transport(TcpStream::connect(host, port));
    InferenceTimings timings;
    EnsemblePrediction pred =
        run_inference(transport, params, x, std::move(keys), Rng::system(), &timings);

    std::printf("label: %u\n", pred.label);
    std::printf("p:");
    for (double v : pred.p) std::printf(" %.6f", v);
    std::printf("\nlatency: %.3f s (setup %.3f s)\n", timings.total_s, timings.setup_s);
    return 0;
}

int cmd_bench(const std::string& addr, const std::string& data_dir, uint32_t count,
              const std::string& format, const std::string& keys_dir, const std::string& preset,
              uint64_t seed) {
    RingParamsPtr params = ring_preset(preset);
    Dataset data = load_mnist_dir(data_dir, false);

    std::optional<ClientKeys> keys;
    if (!keys_dir.empty()) {
        PublicKey pk = load_public_key(keys_dir + "/pk.bin", params);
        SecretKey sk = load_secret_key(keys_dir + "/sk.bin", params);
        keys = ClientKeys{std::move(pk), std::move(sk)};
    }

    BenchReport r = run_bench(addr, data, count, params, std::move(keys), seed);
    if (format == "jsonl")
        print_bench_jsonl(r, stdout);
    else
        print_bench_table(r, stdout);
    return r.prediction_matches ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"interactive encrypted inference over a Bayesian network ensemble"};
    app.require_subcommand(1);
    std::string default_preset = env_or("BAYHENN_PRESET", "bhn2048");
    std::string default_addr = env_or("BAYHENN_ADDR", "127.0.0.1:7744");

    auto* kg = app.add_subcommand("keygen", "generate a client keypair");
    std::string kg_out = "keys";
    std::string kg_preset = default_preset;
    kg->add_option("--out", kg_out, "output directory");
    kg->add_option("--preset", kg_preset, "ring parameter preset");

    auto* tr = app.add_subcommand("train", "train a variational model");
    std::string tr_config, tr_data, tr_out = "model.bhn";
    tr->add_option("--config", tr_config, "JSON training config")->required();
    tr->add_option("--data", tr_data, "dataset directory")->required();
    tr->add_option("--out", tr_out, "output model file");

    auto* sv = app.add_subcommand("serve", "serve encrypted inference sessions");
    std::string sv_model, sv_listen = default_addr, sv_preset = default_preset, sv_theta;
    uint16_t sv_samples = 4;
    uint64_t sv_seed = 0;
    sv->add_option("--model", sv_model, "trained model file")->required();
    sv->add_option("--listen", sv_listen, "bind address host:port");
    sv->add_option("--samples", sv_samples, "ensemble size S");
    sv->add_option("--preset", sv_preset, "ring parameter preset");
    sv->add_option("--seed", sv_seed, "weight-draw seed (0: entropy)");
    sv->add_option("--debug-theta", sv_theta, "export per-session weight draws to DIR");

    auto* in = app.add_subcommand("infer", "run one encrypted inference");
    std::string in_addr = default_addr, in_input, in_keys, in_preset = default_preset;
    uint32_t in_index = 0;
    bool in_skip_label = false;
    in->add_option("--addr", in_addr, "server address host:port");
    in->add_option("--input", in_input, "input file (.csv row or IDX images)")->required();
    in->add_option("--keys", in_keys, "key directory from keygen");
    in->add_option("--preset", in_preset, "ring parameter preset");
    in->add_option("--index", in_index, "row / image index within the file");
    in->add_flag("--skip-label", in_skip_label, "ignore a leading label column in CSV rows");

    auto* be = app.add_subcommand("bench", "measure latency and communication");
    std::string be_addr = default_addr, be_data, be_format = "table", be_keys,
                be_preset = default_preset;
    uint32_t be_count = 10;
    uint64_t be_seed = 0;
    be->add_option("--addr", be_addr, "server address host:port");
    be->add_option("--data", be_data, "dataset directory")->required();
    be->add_option("--count", be_count, "number of inferences");
    be->add_option("--format", be_format, "table or jsonl")
        ->check(CLI::IsMember({"table", "jsonl"}));
    be->add_option("--keys", be_keys, "key directory (fresh keys per session otherwise)");
    be->add_option("--preset", be_preset, "ring parameter preset");
    be->add_option("--seed", be_seed, "client rng seed (0: entropy)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;  // --help exits 0; everything else is usage
    }

    try {
        if (kg->parsed()) return cmd_keygen(kg_out, kg_preset);
        if (tr->parsed()) return cmd_train(tr_config, tr_data, tr_out);
        if (sv->parsed())
            return cmd_serve(sv_model, sv_listen, sv_samples, sv_preset, sv_seed, sv_theta);
        if (in->parsed())
            return cmd_infer(in_addr, in_input, in_keys, in_preset, in_index, in_skip_label);
        if (be->parsed())
            return cmd_bench(be_addr, be_data, be_count, be_format, be_keys, be_preset, be_seed);
    } catch (const TransportError& e) {
        std::fprintf(stderr, "transport error: %s\n", e.what());
        return 3;
    } catch (const ProtocolError& e) {
        std::fprintf(stderr, "protocol error: %s\n", e.what());
        return 3;
    } catch (const ModelDataError& e) {
        std::fprintf(stderr, "model/data error: %s\n", e.what());
        return 4;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
