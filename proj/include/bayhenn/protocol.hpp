#pragma once

#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "bayhenn/bfv.hpp"
#include "bayhenn/bnn.hpp"
#include "bayhenn/encoding.hpp"
#include "bayhenn/errors.hpp"

// The interactive inference protocol. A session alternates between the
// server-side encrypted linear step (one message per layer carrying all S
// sample results) and the client-side plaintext non-linear step. The client
// never sees weights; the server never sees activations or the secret key.
//
// Message envelope (little-endian): type u8, version u8, session id u64,
// sequence u64, layer u16, sample-group count u16, payload length u32,
// payload. Sequence numbers increase strictly per direction. The full field
// layout is documented in docs/WIRE.md.

namespace bayhenn {

enum class MsgType : uint8_t {
    ClientHello = 1,
    ServerHello = 2,
    EncActivations = 3,
    EncPreactivations = 4,
    Done = 5,
    Abort = 6,
};

constexpr uint8_t kProtocolVersion = 1;
constexpr uint16_t kBroadcastSample = 0xFFFF;
constexpr size_t kEnvelopeSize = 1 + 1 + 8 + 8 + 2 + 2 + 4;

struct ProtocolMessage {
    MsgType type{};
    uint64_t session_id = 0;
    uint64_t seq = 0;
    uint16_t layer = 0;
    uint16_t samples = 0;
    std::vector<uint8_t> payload;
};

std::vector<uint8_t> encode_message(const ProtocolMessage& msg);
ProtocolMessage decode_message(std::span<const uint8_t> bytes);

// Per-layer wire description: dimensions, the non-linear stage the client
// must apply, the fixed-point scales, and the packing plan. No weights.
struct LayerWire {
    uint32_t d_in = 0, n_out = 0;
    NonLinearStage stage;
    FixedPointScale scale;
    LayerPlan plan;
    bool operator==(const LayerWire&) const = default;
};

struct ModelManifest {
    std::string model_id;
    std::string ring_preset;
    uint32_t n = 0;
    uint64_t q = 0, t = 0;
    double sigma_noise = 0;
    uint16_t ensemble_size = 0;  // S
    uint32_t input_dim = 0, classes = 0;
    std::vector<LayerWire> layers;
    bool operator==(const ModelManifest&) const = default;
};

std::vector<uint8_t> encode_manifest(const ModelManifest& m);
ModelManifest decode_manifest(std::span<const uint8_t> bytes);

struct EncLayerPayload {
    // sample_index per group; kBroadcastSample for the layer-1 broadcast
    std::vector<uint16_t> sample_index;
    std::vector<std::vector<Ciphertext>> cts;
};

std::vector<uint8_t> encode_enc_layer(const EncLayerPayload& p);
EncLayerPayload decode_enc_layer(std::span<const uint8_t> bytes, const RingParamsPtr& params);

// Derives plans and scales from the posterior's architecture and recorded
// activation ranges; validates headroom per layer (throws ConfigError).
ModelManifest build_manifest(const Posterior& post, uint16_t S, const RingParamsPtr& params);

// ---- analytic communication prediction (what the wire must cost) ----
struct SessionBytePrediction {
    uint64_t client_to_server = 0, server_to_client = 0;
    uint32_t messages_client_to_server = 0, messages_server_to_client = 0;

    uint64_t total() const { return client_to_server + server_to_client; }
};
// frame_overhead is added once per message (the transport's length prefix).
SessionBytePrediction predict_session_bytes(const ModelManifest& m, const RingParamsPtr& params,
                                            size_t frame_overhead);
// Same shape with coefficients at the bit-packed theoretical width.
SessionBytePrediction predict_session_bytes_bitpacked(const ModelManifest& m,
                                                      const RingParamsPtr& params,
                                                      size_t frame_overhead);

// ---- server side ----

// Session-ids this server has already seen (replay rejection).
class SessionRegistry {
  public:
    // false when the id was already used
    bool claim(uint64_t session_id);

  private:
    std::mutex mu_;
    std::set<uint64_t> used_;
};

class ServerSession {
  public:
    // Draws nothing yet; theta is sampled when the ClientHello arrives.
    ServerSession(std::shared_ptr<const Posterior> posterior, uint16_t S, RingParamsPtr params,
                  Rng rng, SessionRegistry* registry = nullptr);

    // Feed one client message, get the reply. Throws ProtocolError on any
    // schema or state violation (the caller aborts the session).
    ProtocolMessage handle(const ProtocolMessage& msg);
    bool finished() const { return phase_ == Phase::Finished; }

    const ModelManifest& manifest() const { return manifest_; }
    // Debug export of the sampled weight sets (never crosses the wire).
    const std::vector<SampledModel>& theta() const { return theta_; }
    // Test hook: replace the session's weight draws (e.g. permuted sample
    // order) after the hello; repacks everything.
    void reset_theta_for_tests(std::vector<SampledModel> theta);

    // The encrypted linear step for one layer, Encode(W_k) (x) a_k (+) E(b_k)
    // per sample: parallel across the S x blocks grid when run_parallel is
    // set, plain loops otherwise (the serial reference); both orders produce
    // identical ciphertexts.
    std::vector<std::vector<Ciphertext>> compute_preactivations(
        uint16_t layer, const std::vector<std::vector<Ciphertext>>& per_sample_inputs,
        bool run_parallel) const;

  private:
    enum class Phase { AwaitHello, AwaitActivations, Finished };

    ProtocolMessage on_hello(const ProtocolMessage& msg);
    ProtocolMessage on_activations(const ProtocolMessage& msg);
    void precompute_layer_weights();

    std::shared_ptr<const Posterior> posterior_;
    uint16_t S_;
    RingParamsPtr params_;
    Rng rng_;
    SessionRegistry* registry_;

    Phase phase_ = Phase::AwaitHello;
    uint64_t session_id_ = 0;
    uint64_t next_seq_ = 1;
    uint64_t last_recv_seq_ = 0;
    uint16_t expected_layer_ = 1;

    ModelManifest manifest_;
    std::vector<SampledModel> theta_;
    std::optional<PublicKey> client_pk_;

    // [layer][sample][block][chunk] lifted+transformed weight multipliers
    std::vector<std::vector<std::vector<std::vector<RingElement>>>> w_ntt_;
    // [layer][sample][block] encrypted biases, kept in NTT domain
    std::vector<std::vector<std::vector<Ciphertext>>> bias_ct_;
};

// ---- client side ----

struct ClientKeys {
    PublicKey pk;
    SecretKey sk;
};

class ClientSession {
  public:
    // Keys may be supplied (keygen CLI output) or generated per session.
    ClientSession(RingParamsPtr params, std::span<const double> x, Rng rng);
    ClientSession(RingParamsPtr params, std::span<const double> x, ClientKeys keys, Rng rng);

    ProtocolMessage hello();
    void on_server_hello(const ProtocolMessage& msg);
    ProtocolMessage first_activations();
    // Returns the next EncActivations, or nothing after the last layer.
    std::optional<ProtocolMessage> on_preactivations(const ProtocolMessage& msg);
    ProtocolMessage done_message();

    bool finished() const { return finished_; }
    EnsemblePrediction finalize() const;  // softmax per sample, then average
    const ModelManifest& manifest() const { return manifest_; }
    uint64_t saturated_count() const { return quant_stats_.saturated; }

  private:
    void validate_reply(const ProtocolMessage& msg);

    RingParamsPtr params_;
    std::vector<double> x_;
    ClientKeys keys_;
    std::unique_ptr<Encryptor> encryptor_;
    Rng rng_;

    uint64_t session_id_ = 0;
    uint64_t next_seq_ = 1;
    uint64_t last_recv_seq_ = 0;
    uint16_t current_layer_ = 0;  // layer whose preactivations we await
    bool hello_sent_ = false;
    bool manifest_received_ = false;
    bool finished_ = false;

    ModelManifest manifest_;
    std::vector<std::vector<double>> final_logits_;  // one per sample after layer n
    QuantStats quant_stats_;
};

// ---- transport-agnostic drivers ----

class Transport {
  public:
    virtual ~Transport() = default;
    virtual void send(const ProtocolMessage& msg) = 0;
    virtual ProtocolMessage recv() = 0;
};

// In-memory pair for tests; send on one end is recv on the other.
std::pair<std::unique_ptr<Transport>, std::unique_ptr<Transport>> make_loopback_pair();

struct InferenceTimings {
    double setup_s = 0;                  // hello round trip
    std::vector<double> layer_round_s;   // per-layer SLC round trip + SNC
    double total_s = 0;
};

// Drives a full client session over the transport. Throws ProtocolError /
// TransportError on failure; the server side discards its state.
EnsemblePrediction run_inference(Transport& t, const RingParamsPtr& params,
                                 std::span<const double> x, std::optional<ClientKeys> keys,
                                 Rng rng, InferenceTimings* timings = nullptr,
                                 ModelManifest* manifest_out = nullptr);

// Serves exactly one session on the transport (used by the TCP server with
// one worker per connection). Aborts are sent before rethrowing.
void serve_session(Transport& t, std::shared_ptr<const Posterior> posterior, uint16_t S,
                   const RingParamsPtr& params, Rng rng, SessionRegistry* registry = nullptr,
                   std::vector<SampledModel>* theta_out = nullptr);

}  // namespace bayhenn
