#include "bayhenn/protocol.hpp"

#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstring>
#include <deque>

namespace bayhenn {

// ---- byte helpers ----

namespace {

void put_u16(std::vector<uint8_t>& o, uint16_t v) {
    o.push_back(static_cast<uint8_t>(v));
    o.push_back(static_cast<uint8_t>(v >> 8));
}
void put_u32(std::vector<uint8_t>& o, uint32_t v) {
    for (int i = 0; i < 4; ++i) o.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
void put_u64(std::vector<uint8_t>& o, uint64_t v) {
    for (int i = 0; i < 8; ++i) o.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
void put_f64(std::vector<uint8_t>& o, double d) {
    uint64_t v;
    std::memcpy(&v, &d, 8);
    put_u64(o, v);
}

struct Cursor {
    std::span<const uint8_t> in;
    size_t pos = 0;
    void need(size_t n) const {
        if (pos + n > in.size()) throw ProtocolError("message: truncated payload");
    }
    uint8_t u8() {
        need(1);
        return in[pos++];
    }
    uint16_t u16() {
        need(2);
        uint16_t v = static_cast<uint16_t>(in[pos] | (in[pos + 1] << 8));
        pos += 2;
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(in[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(in[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    double f64() {
        uint64_t v = u64();
        double d;
        std::memcpy(&d, &v, 8);
        return d;
    }
    std::string str(size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(in.data() + pos), n);
        pos += n;
        return s;
    }
    std::span<const uint8_t> bytes(size_t n) {
        need(n);
        auto s = in.subspan(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace

// ---- envelope ----

std::vector<uint8_t> encode_message(const ProtocolMessage& msg) {
    std::vector<uint8_t> o;
    o.reserve(kEnvelopeSize + msg.payload.size());
    o.push_back(static_cast<uint8_t>(msg.type));
    o.push_back(kProtocolVersion);
    put_u64(o, msg.session_id);
    put_u64(o, msg.seq);
    put_u16(o, msg.layer);
    put_u16(o, msg.samples);
    put_u32(o, static_cast<uint32_t>(msg.payload.size()));
    o.insert(o.end(), msg.payload.begin(), msg.payload.end());
    return o;
}

ProtocolMessage decode_message(std::span<const uint8_t> bytes) {
    Cursor c{bytes};
    ProtocolMessage m;
    uint8_t type = c.u8();
    if (type < 1 || type > 6) throw ProtocolError("message: unknown type tag");
    m.type = static_cast<MsgType>(type);
    uint8_t version = c.u8();
    if (version != kProtocolVersion) throw ProtocolError("message: protocol version mismatch");
    m.session_id = c.u64();
    m.seq = c.u64();
    m.layer = c.u16();
    m.samples = c.u16();
    uint32_t plen = c.u32();
    if (bytes.size() - c.pos != plen) throw ProtocolError("message: payload length mismatch");
    m.payload.assign(bytes.begin() + static_cast<ptrdiff_t>(c.pos), bytes.end());
    return m;
}

// ---- manifest ----

std::vector<uint8_t> encode_manifest(const ModelManifest& m) {
    std::vector<uint8_t> o;
    put_u16(o, static_cast<uint16_t>(m.model_id.size()));
    o.insert(o.end(), m.model_id.begin(), m.model_id.end());
    o.push_back(static_cast<uint8_t>(m.ring_preset.size()));
    o.insert(o.end(), m.ring_preset.begin(), m.ring_preset.end());
    put_u32(o, m.n);
    put_u64(o, m.q);
    put_u64(o, m.t);
    put_f64(o, m.sigma_noise);
    put_u16(o, m.ensemble_size);
    put_u32(o, m.input_dim);
    put_u32(o, m.classes);
    put_u16(o, static_cast<uint16_t>(m.layers.size()));
    for (const LayerWire& l : m.layers) {
        put_u32(o, l.d_in);
        put_u32(o, l.n_out);
        o.push_back(static_cast<uint8_t>(l.stage.act));
        o.push_back(static_cast<uint8_t>(l.stage.pool.kind));
        for (uint16_t v : {l.stage.pool.channels, l.stage.pool.in_h, l.stage.pool.in_w,
                           l.stage.pool.window, l.stage.pool.stride})
            put_u16(o, v);
        o.push_back(static_cast<uint8_t>(l.scale.log2_delta_a));
        o.push_back(static_cast<uint8_t>(l.scale.log2_delta_w));
        put_f64(o, l.scale.clamp_bound);
        put_u32(o, l.plan.d_in);
        put_u32(o, l.plan.n_out);
        put_u32(o, l.plan.chunk_count);
        put_u32(o, l.plan.chunk_width);
        put_u32(o, l.plan.block_capacity);
        put_u32(o, l.plan.block_count);
    }
    return o;
}

ModelManifest decode_manifest(std::span<const uint8_t> bytes) {
    Cursor c{bytes};
    ModelManifest m;
    m.model_id = c.str(c.u16());
    m.ring_preset = c.str(c.u8());
    m.n = c.u32();
    m.q = c.u64();
    m.t = c.u64();
    m.sigma_noise = c.f64();
    m.ensemble_size = c.u16();
    m.input_dim = c.u32();
    m.classes = c.u32();
    uint16_t nl = c.u16();
    for (uint16_t i = 0; i < nl; ++i) {
        LayerWire l;
        l.d_in = c.u32();
        l.n_out = c.u32();
        uint8_t act = c.u8();
        if (act > 3) throw ProtocolError("manifest: unknown activation id");
        l.stage.act = static_cast<Activation>(act);
        uint8_t pk = c.u8();
        if (pk > 2) throw ProtocolError("manifest: unknown pool kind");
        l.stage.pool.kind = static_cast<PoolKind>(pk);
        l.stage.pool.channels = c.u16();
        l.stage.pool.in_h = c.u16();
        l.stage.pool.in_w = c.u16();
        l.stage.pool.window = c.u16();
        l.stage.pool.stride = c.u16();
        l.scale.log2_delta_a = c.u8();
        l.scale.log2_delta_w = c.u8();
        l.scale.clamp_bound = c.f64();
        l.plan.d_in = c.u32();
        l.plan.n_out = c.u32();
        l.plan.chunk_count = c.u32();
        l.plan.chunk_width = c.u32();
        l.plan.block_capacity = c.u32();
        l.plan.block_count = c.u32();
        m.layers.push_back(l);
    }
    if (c.pos != bytes.size()) throw ProtocolError("manifest: trailing bytes");
    return m;
}

// ---- enc layer payload ----

std::vector<uint8_t> encode_enc_layer(const EncLayerPayload& p) {
    if (p.sample_index.size() != p.cts.size())
        throw ProtocolError("enc payload: group shape mismatch");
    std::vector<uint8_t> o;
    for (size_t g = 0; g < p.cts.size(); ++g) {
        put_u16(o, p.sample_index[g]);
        put_u32(o, static_cast<uint32_t>(p.cts[g].size()));
        for (const Ciphertext& ct : p.cts[g]) {
            std::vector<uint8_t> bytes = serialize(ct);
            o.insert(o.end(), bytes.begin(), bytes.end());
        }
    }
    return o;
}

EncLayerPayload decode_enc_layer(std::span<const uint8_t> bytes, const RingParamsPtr& params) {
    EncLayerPayload p;
    Cursor c{bytes};
    const size_t ct_size = ciphertext_wire_size(*params);
    while (c.pos < bytes.size()) {
        uint16_t idx = c.u16();
        uint32_t count = c.u32();
        if (count > (1u << 20)) throw ProtocolError("enc payload: implausible ciphertext count");
        std::vector<Ciphertext> cts;
        cts.reserve(count);
        for (uint32_t i = 0; i < count; ++i) {
            std::span<const uint8_t> ct_bytes = c.bytes(ct_size);
            try {
                cts.push_back(deserialize_ciphertext(ct_bytes, params));
            } catch (const std::exception& e) {
                throw ProtocolError(std::string("enc payload: ") + e.what());
            }
        }
        p.sample_index.push_back(idx);
        p.cts.push_back(std::move(cts));
    }
    return p;
}

ModelManifest build_manifest(const Posterior& post, uint16_t S, const RingParamsPtr& params) {
    if (S == 0) throw ConfigError("manifest: S must be >= 1");
    post.arch.validate();
    ModelManifest m;
    m.model_id = post.model_id;
    m.ring_preset = params->preset;
    m.n = params->n;
    m.q = params->q;
    m.t = params->t;
    m.sigma_noise = params->sigma_noise;
    m.ensemble_size = S;
    m.input_dim = post.arch.input_dim;
    m.classes = post.arch.num_classes;
    for (size_t i = 0; i < post.arch.layers.size(); ++i) {
        const LinearLayerDef& def = post.arch.layers[i];
        LayerWire l;
        l.d_in = def.d_in;
        l.n_out = def.d_out;
        l.stage = def.stage;
        l.plan = plan_layer(def.d_in, def.d_out, params->n);
        std::optional<LayerRanges> ranges;
        if (i < post.stats.size()) {
            const LayerStats& st = post.stats[i];
            ranges = LayerRanges{st.max_abs_in, st.max_abs_w, st.max_abs_z};
            // widen the clamp when recorded activations exceed the default
            double need = st.max_abs_in * 1.25;
            if (need > l.scale.clamp_bound)
                l.scale.clamp_bound = std::exp2(std::ceil(std::log2(need)));
        }
        check_layer_headroom(l.plan, l.scale, params->t, ranges);
        m.layers.push_back(l);
    }
    return m;
}

// ---- byte prediction ----

namespace {
SessionBytePrediction predict_bytes_impl(const ModelManifest& m, const RingParamsPtr& params,
                                         size_t frame_overhead, size_t ct_size) {
    SessionBytePrediction p;
    const size_t env = kEnvelopeSize;
    const uint16_t S = m.ensemble_size;

    // client -> server: hello, n activation messages, done
    size_t hello_c2s = env + 1 + m.ring_preset.size() + 4 + 8 + 8 + public_key_wire_size(*params);
    p.client_to_server += hello_c2s + frame_overhead;
    ++p.messages_client_to_server;
    for (size_t i = 0; i < m.layers.size(); ++i) {
        uint64_t groups = i == 0 ? 1 : S;
        uint64_t sz = env + groups * (2 + 4) + groups * m.layers[i].plan.chunk_count * ct_size;
        p.client_to_server += sz + frame_overhead;
        ++p.messages_client_to_server;
    }
    p.client_to_server += env + frame_overhead;  // done
    ++p.messages_client_to_server;

    // server -> client: hello, n preactivation messages
    p.server_to_client += env + encode_manifest(m).size() + frame_overhead;
    ++p.messages_server_to_client;
    for (const LayerWire& l : m.layers) {
        uint64_t sz = env + static_cast<uint64_t>(S) * (2 + 4) +
                      static_cast<uint64_t>(S) * l.plan.block_count * ct_size;
        p.server_to_client += sz + frame_overhead;
        ++p.messages_server_to_client;
    }
    return p;
}
}  // namespace

SessionBytePrediction predict_session_bytes(const ModelManifest& m, const RingParamsPtr& params,
                                            size_t frame_overhead) {
    return predict_bytes_impl(m, params, frame_overhead, ciphertext_wire_size(*params));
}

SessionBytePrediction predict_session_bytes_bitpacked(const ModelManifest& m,
                                                      const RingParamsPtr& params,
                                                      size_t frame_overhead) {
    return predict_bytes_impl(m, params, frame_overhead, ciphertext_bitpacked_size(*params));
}

// ---- server ----

bool SessionRegistry::claim(uint64_t session_id) {
    std::lock_guard<std::mutex> lk(mu_);
    return used_.insert(session_id).second;
}

ServerSession::ServerSession(std::shared_ptr<const Posterior> posterior, uint16_t S,
                             RingParamsPtr params, Rng rng, SessionRegistry* registry)
    : posterior_(std::move(posterior)),
      S_(S),
      params_(std::move(params)),
      rng_(rng),
      registry_(registry) {
    manifest_ = build_manifest(*posterior_, S_, params_);
}

ProtocolMessage ServerSession::handle(const ProtocolMessage& msg) {
    if (msg.seq != last_recv_seq_ + 1)
        throw ProtocolError("server: sequence number must increase by one");
    last_recv_seq_ = msg.seq;
    switch (phase_) {
        case Phase::AwaitHello:
            if (msg.type != MsgType::ClientHello)
                throw ProtocolError("server: expected ClientHello");
            return on_hello(msg);
        case Phase::AwaitActivations:
            if (msg.type == MsgType::Done) {
                if (expected_layer_ != manifest_.layers.size() + 1)
                    throw ProtocolError("server: premature Done");
                phase_ = Phase::Finished;
                return ProtocolMessage{};  // Done has no reply
            }
            if (msg.type != MsgType::EncActivations)
                throw ProtocolError("server: expected EncActivations");
            return on_activations(msg);
        case Phase::Finished:
            throw ProtocolError("server: session already finished");
    }
    throw ProtocolError("server: bad phase");
}

ProtocolMessage ServerSession::on_hello(const ProtocolMessage& msg) {
    Cursor c{msg.payload};
    std::string preset = c.str(c.u8());
    uint32_t n = c.u32();
    uint64_t q = c.u64();
    uint64_t t = c.u64();
    if (n != params_->n || q != params_->q || t != params_->t)
        throw ProtocolError("server: ring parameter mismatch in hello");
    if (!preset.empty() && !params_->preset.empty() && preset != params_->preset)
        throw ProtocolError("server: preset mismatch in hello");
    std::span<const uint8_t> pk_bytes = c.bytes(public_key_wire_size(*params_));
    if (c.pos != msg.payload.size()) throw ProtocolError("server: trailing bytes in hello");
    try {
        client_pk_ = deserialize_public_key(pk_bytes, params_);
    } catch (const std::exception& e) {
        throw ProtocolError(std::string("server: bad public key: ") + e.what());
    }
    if (registry_ && !registry_->claim(msg.session_id))
        throw ProtocolError("server: session id already used");
    session_id_ = msg.session_id;

    // fresh theta for this session
    theta_.clear();
    for (uint16_t k = 0; k < S_; ++k) {
        theta_.push_back(sample_model(*posterior_, rng_));
        theta_.back().sample_index = k;
    }
    precompute_layer_weights();
    phase_ = Phase::AwaitActivations;
    expected_layer_ = 1;

    ProtocolMessage reply;
    reply.type = MsgType::ServerHello;
    reply.session_id = session_id_;
    reply.seq = next_seq_++;
    reply.payload = encode_manifest(manifest_);
    return reply;
}

void ServerSession::reset_theta_for_tests(std::vector<SampledModel> theta) {
    if (!client_pk_) throw ProtocolError("server: no session established");
    if (theta.size() != S_) throw ProtocolError("server: theta count must equal S");
    theta_ = std::move(theta);
    precompute_layer_weights();
}

void ServerSession::precompute_layer_weights() {
    const size_t L = manifest_.layers.size();
    Encryptor enc(params_, *client_pk_);
    w_ntt_.assign(L, {});
    bias_ct_.assign(L, {});
    for (size_t li = 0; li < L; ++li) {
        const LayerWire& lw = manifest_.layers[li];
        w_ntt_[li].resize(S_);
        bias_ct_[li].resize(S_);
        for (uint16_t k = 0; k < S_; ++k) {
            const Matrix& W = theta_[k].W[li];
            const std::vector<double>& b = theta_[k].b[li];
            auto& blocks = w_ntt_[li][k];
            blocks.resize(lw.plan.block_count);
#pragma omp parallel for schedule(static)
            for (int64_t blk = 0; blk < static_cast<int64_t>(lw.plan.block_count); ++blk) {
                auto& per_chunk = blocks[blk];
                per_chunk.reserve(lw.plan.chunk_count);
                for (uint32_t ch = 0; ch < lw.plan.chunk_count; ++ch)
                    per_chunk.push_back(multiplier_ntt(
                        pack_layer_weights(W.v, lw.plan, static_cast<uint32_t>(blk), ch, lw.scale,
                                           params_)
                            .pt));
            }
            for (uint32_t blk = 0; blk < lw.plan.block_count; ++blk)
                bias_ct_[li][k].push_back(ct_to_ntt(
                    enc.encrypt(pack_layer_bias(b, lw.plan, blk, lw.scale, params_), rng_)));
        }
    }
}

std::vector<std::vector<Ciphertext>> ServerSession::compute_preactivations(
    uint16_t layer, const std::vector<std::vector<Ciphertext>>& per_sample_inputs,
    bool run_parallel) const {
    const LayerWire& lw = manifest_.layers[layer - 1];
    const bool broadcast = per_sample_inputs.size() == 1;

    // one NTT pass over the inputs, shared by every block
    std::vector<std::vector<Ciphertext>> in_ntt(per_sample_inputs.size());
    for (size_t g = 0; g < per_sample_inputs.size(); ++g) {
        in_ntt[g].reserve(per_sample_inputs[g].size());
        for (const Ciphertext& ct : per_sample_inputs[g]) in_ntt[g].push_back(ct_to_ntt(ct));
    }

    std::vector<std::vector<Ciphertext>> out(S_);
    for (auto& v : out) v.resize(lw.plan.block_count);
    const int64_t total = static_cast<int64_t>(S_) * lw.plan.block_count;
#pragma omp parallel for schedule(static) if (run_parallel)
    for (int64_t idx = 0; idx < total; ++idx) {
        uint16_t k = static_cast<uint16_t>(idx / lw.plan.block_count);
        uint32_t blk = static_cast<uint32_t>(idx % lw.plan.block_count);
        const std::vector<Ciphertext>& input = in_ntt[broadcast ? 0 : k];
        Ciphertext acc;
        for (uint32_t ch = 0; ch < lw.plan.chunk_count; ++ch) {
            Ciphertext prod = ct_pt_mul_ntt(input[ch], w_ntt_[layer - 1][k][blk][ch]);
            acc = ch == 0 ? std::move(prod) : ct_add(acc, prod);
        }
        acc = ct_add(acc, bias_ct_[layer - 1][k][blk]);
        out[k][blk] = ct_to_coeff(acc);
    }
    return out;
}

ProtocolMessage ServerSession::on_activations(const ProtocolMessage& msg) {
    if (msg.session_id != session_id_) throw ProtocolError("server: wrong session id");
    if (msg.layer != expected_layer_)
        throw ProtocolError("server: expected layer " + std::to_string(expected_layer_) +
                            " but got " + std::to_string(msg.layer));
    if (expected_layer_ > manifest_.layers.size())
        throw ProtocolError("server: all layers already processed");
    const LayerWire& lw = manifest_.layers[expected_layer_ - 1];

    EncLayerPayload payload = decode_enc_layer(msg.payload, params_);
    if (payload.cts.size() != msg.samples)
        throw ProtocolError("server: sample-group count does not match header");
    if (expected_layer_ == 1) {
        if (payload.cts.size() != 1 || payload.sample_index[0] != kBroadcastSample)
            throw ProtocolError("server: layer 1 must carry a single broadcast group");
    } else {
        if (payload.cts.size() != S_)
            throw ProtocolError("server: expected " + std::to_string(S_) + " sample groups");
        for (uint16_t k = 0; k < S_; ++k)
            if (payload.sample_index[k] != k)
                throw ProtocolError("server: sample groups out of order");
    }
    for (const auto& group : payload.cts) {
        if (group.size() != lw.plan.chunk_count)
            throw ProtocolError("server: wrong ciphertext count for the layer plan");
        for (const Ciphertext& ct : group)
            if (ct.level != CtLevel::Fresh)
                throw ProtocolError("server: activation ciphertexts must be fresh");
    }

    std::vector<std::vector<Ciphertext>> z =
        compute_preactivations(expected_layer_, payload.cts, true);

    EncLayerPayload out;
    for (uint16_t k = 0; k < S_; ++k) {
        out.sample_index.push_back(k);
        out.cts.push_back(std::move(z[k]));
    }
    ProtocolMessage reply;
    reply.type = MsgType::EncPreactivations;
    reply.session_id = session_id_;
    reply.seq = next_seq_++;
    reply.layer = expected_layer_;
    reply.samples = S_;
    reply.payload = encode_enc_layer(out);
    ++expected_layer_;
    return reply;
}

// ---- client ----

ClientSession::ClientSession(RingParamsPtr params, std::span<const double> x, Rng rng)
    : params_(std::move(params)), x_(x.begin(), x.end()), rng_(rng) {
    auto [pk, sk] = keygen(params_, rng_);
    keys_ = ClientKeys{std::move(pk), std::move(sk)};
    encryptor_ = std::make_unique<Encryptor>(params_, keys_.pk);
    session_id_ = rng_.next_u64();
}

ClientSession::ClientSession(RingParamsPtr params, std::span<const double> x, ClientKeys keys,
                             Rng rng)
    : params_(std::move(params)), x_(x.begin(), x.end()), keys_(std::move(keys)), rng_(rng) {
    encryptor_ = std::make_unique<Encryptor>(params_, keys_.pk);
    session_id_ = rng_.next_u64();
}

ProtocolMessage ClientSession::hello() {
    if (hello_sent_) throw ProtocolError("client: hello already sent");
    hello_sent_ = true;
    ProtocolMessage m;
    m.type = MsgType::ClientHello;
    m.session_id = session_id_;
    m.seq = next_seq_++;
    m.payload.push_back(static_cast<uint8_t>(params_->preset.size()));
    m.payload.insert(m.payload.end(), params_->preset.begin(), params_->preset.end());
    put_u32(m.payload, params_->n);
    put_u64(m.payload, params_->q);
    put_u64(m.payload, params_->t);
    std::vector<uint8_t> pk = serialize(keys_.pk, *params_);
    m.payload.insert(m.payload.end(), pk.begin(), pk.end());
    return m;
}

void ClientSession::validate_reply(const ProtocolMessage& msg) {
    if (msg.type == MsgType::Abort) {
        Cursor c{msg.payload};
        uint16_t code = c.u16();
        std::string reason = c.str(c.u16());
        throw ProtocolError("server aborted (code " + std::to_string(code) + "): " + reason);
    }
    if (msg.session_id != session_id_) throw ProtocolError("client: wrong session id");
    if (msg.seq != last_recv_seq_ + 1)
        throw ProtocolError("client: sequence number must increase by one");
    last_recv_seq_ = msg.seq;
}

void ClientSession::on_server_hello(const ProtocolMessage& msg) {
    validate_reply(msg);
    if (manifest_received_) throw ProtocolError("client: duplicate ServerHello");
    if (msg.type != MsgType::ServerHello) throw ProtocolError("client: expected ServerHello");
    manifest_ = decode_manifest(msg.payload);
    if (manifest_.n != params_->n || manifest_.q != params_->q || manifest_.t != params_->t)
        throw ProtocolError("client: manifest ring parameters mismatch");
    if (manifest_.input_dim != x_.size())
        throw ProtocolError("client: input width does not match the model");
    if (manifest_.layers.empty() || manifest_.ensemble_size == 0)
        throw ProtocolError("client: empty manifest");
    manifest_received_ = true;
}

ProtocolMessage ClientSession::first_activations() {
    if (!manifest_received_) throw ProtocolError("client: no manifest yet");
    if (current_layer_ != 0) throw ProtocolError("client: first activations already sent");
    const LayerWire& l0 = manifest_.layers[0];
    EncLayerPayload p;
    p.sample_index.push_back(kBroadcastSample);
    std::vector<Ciphertext> cts;
    for (const PackedVector& pv : pack_layer_input(x_, l0.plan, l0.scale, params_, &quant_stats_))
        cts.push_back(encryptor_->encrypt(pv.pt, rng_));
    p.cts.push_back(std::move(cts));

    ProtocolMessage m;
    m.type = MsgType::EncActivations;
    m.session_id = session_id_;
    m.seq = next_seq_++;
    m.layer = 1;
    m.samples = 1;
    m.payload = encode_enc_layer(p);
    current_layer_ = 1;
    return m;
}

std::optional<ProtocolMessage> ClientSession::on_preactivations(const ProtocolMessage& msg) {
    validate_reply(msg);
    if (msg.type != MsgType::EncPreactivations)
        throw ProtocolError("client: expected EncPreactivations");
    if (current_layer_ == 0 || finished_) throw ProtocolError("client: unexpected preactivations");
    if (msg.layer != current_layer_)
        throw ProtocolError("client: expected layer " + std::to_string(current_layer_));

    const uint16_t S = manifest_.ensemble_size;
    const LayerWire& lw = manifest_.layers[current_layer_ - 1];
    EncLayerPayload payload = decode_enc_layer(msg.payload, params_);
    if (payload.cts.size() != S) throw ProtocolError("client: expected one group per sample");
    for (uint16_t k = 0; k < S; ++k) {
        if (payload.sample_index[k] != k) throw ProtocolError("client: groups out of order");
        if (payload.cts[k].size() != lw.plan.block_count)
            throw ProtocolError("client: wrong ciphertext count for the layer plan");
    }

    // decrypt all S x blocks ciphertexts, then decode and apply the stage
    std::vector<std::vector<Plaintext>> dec(S);
    for (auto& v : dec) v.resize(lw.plan.block_count);
    const int64_t total = static_cast<int64_t>(S) * lw.plan.block_count;
#pragma omp parallel for schedule(static)
    for (int64_t idx = 0; idx < total; ++idx) {
        uint16_t k = static_cast<uint16_t>(idx / lw.plan.block_count);
        uint32_t blk = static_cast<uint32_t>(idx % lw.plan.block_count);
        dec[k][blk] = decrypt(payload.cts[k][blk], keys_.sk);
    }

    std::vector<std::vector<double>> a(S);
    for (uint16_t k = 0; k < S; ++k) {
        std::vector<double> z(lw.n_out);
        for (uint32_t blk = 0; blk < lw.plan.block_count; ++blk) {
            std::vector<double> vals =
                extract_outputs(dec[k][blk], lw.plan.map_for_block(blk), lw.scale);
            std::copy(vals.begin(), vals.end(), z.begin() + lw.plan.row_begin(blk));
        }
        a[k] = apply_stage(lw.stage, std::move(z));
    }

    if (current_layer_ == manifest_.layers.size()) {
        final_logits_ = std::move(a);
        finished_ = true;
        return std::nullopt;
    }

    // re-encrypt per sample for the next layer
    const LayerWire& next = manifest_.layers[current_layer_];
    EncLayerPayload out;
    for (uint16_t k = 0; k < S; ++k) {
        out.sample_index.push_back(k);
        std::vector<Ciphertext> cts;
        for (const PackedVector& pv :
             pack_layer_input(a[k], next.plan, next.scale, params_, &quant_stats_))
            cts.push_back(encryptor_->encrypt(pv.pt, rng_));
        out.cts.push_back(std::move(cts));
    }
    ++current_layer_;
    ProtocolMessage m;
    m.type = MsgType::EncActivations;
    m.session_id = session_id_;
    m.seq = next_seq_++;
    m.layer = current_layer_;
    m.samples = S;
    m.payload = encode_enc_layer(out);
    return m;
}

ProtocolMessage ClientSession::done_message() {
    if (!finished_) throw ProtocolError("client: cannot send Done before the last layer");
    ProtocolMessage m;
    m.type = MsgType::Done;
    m.session_id = session_id_;
    m.seq = next_seq_++;
    return m;
}

EnsemblePrediction ClientSession::finalize() const {
    if (!finished_) throw ProtocolError("client: finalize before the last layer");
    EnsemblePrediction out;
    out.p.assign(manifest_.classes, 0.0);
    for (const std::vector<double>& logits : final_logits_) {
        std::vector<double> p = softmax(logits);
        for (size_t i = 0; i < p.size(); ++i) out.p[i] += p[i];
    }
    for (double& v : out.p) v /= static_cast<double>(final_logits_.size());
    out.label = argmax_lowest_tie(out.p);
    return out;
}

// ---- loopback transport ----

namespace {

struct LoopbackQueue {
    std::mutex mu;
    std::condition_variable cv;
    std::deque<std::vector<uint8_t>> q;
    bool closed = false;
};

class LoopbackEnd : public Transport {
  public:
    LoopbackEnd(std::shared_ptr<LoopbackQueue> out, std::shared_ptr<LoopbackQueue> in)
        : out_(std::move(out)), in_(std::move(in)) {}

    ~LoopbackEnd() override {
        std::lock_guard<std::mutex> lk(out_->mu);
        out_->closed = true;
        out_->cv.notify_all();
    }

    void send(const ProtocolMessage& msg) override {
        std::vector<uint8_t> bytes = encode_message(msg);
        std::lock_guard<std::mutex> lk(out_->mu);
        if (out_->closed) throw TransportError("loopback: peer closed");
        out_->q.push_back(std::move(bytes));
        out_->cv.notify_one();
    }

    ProtocolMessage recv() override {
        std::unique_lock<std::mutex> lk(in_->mu);
        in_->cv.wait(lk, [&] { return !in_->q.empty() || in_->closed; });
        if (in_->q.empty()) throw TransportError("loopback: connection closed");
        std::vector<uint8_t> bytes = std::move(in_->q.front());
        in_->q.pop_front();
        lk.unlock();
        return decode_message(bytes);
    }

  private:
    std::shared_ptr<LoopbackQueue> out_, in_;
};

}  // namespace

std::pair<std::unique_ptr<Transport>, std::unique_ptr<Transport>> make_loopback_pair() {
    auto a = std::make_shared<LoopbackQueue>();
    auto b = std::make_shared<LoopbackQueue>();
    return {std::make_unique<LoopbackEnd>(a, b), std::make_unique<LoopbackEnd>(b, a)};
}

// ---- drivers ----

EnsemblePrediction run_inference(Transport& t, const RingParamsPtr& params,
                                 std::span<const double> x, std::optional<ClientKeys> keys,
                                 Rng rng, InferenceTimings* timings, ModelManifest* manifest_out) {
    using clock = std::chrono::steady_clock;
    auto t0 = clock::now();
    auto secs = [](auto a, auto b) { return std::chrono::duration<double>(b - a).count(); };

    ClientSession session =
        keys ? ClientSession(params, x, std::move(*keys), rng) : ClientSession(params, x, rng);
    t.send(session.hello());
    session.on_server_hello(t.recv());
    if (manifest_out) *manifest_out = session.manifest();
    auto t1 = clock::now();
    if (timings) timings->setup_s = secs(t0, t1);

    ProtocolMessage next = session.first_activations();
    while (true) {
        auto lr0 = clock::now();
        t.send(next);
        ProtocolMessage reply = t.recv();
        std::optional<ProtocolMessage> cont = session.on_preactivations(reply);
        if (timings) timings->layer_round_s.push_back(secs(lr0, clock::now()));
        if (!cont) break;
        next = std::move(*cont);
    }
    t.send(session.done_message());
    EnsemblePrediction pred = session.finalize();
    if (timings) timings->total_s = secs(t0, clock::now());
    return pred;
}

void serve_session(Transport& t, std::shared_ptr<const Posterior> posterior, uint16_t S,
                   const RingParamsPtr& params, Rng rng, SessionRegistry* registry,
                   std::vector<SampledModel>* theta_out) {
    ServerSession session(std::move(posterior), S, params, rng, registry);
    try {
        while (!session.finished()) {
            ProtocolMessage msg = t.recv();
            ProtocolMessage reply = session.handle(msg);
            if (session.finished()) break;
            t.send(reply);
            if (theta_out) *theta_out = session.theta();
        }
    } catch (const TransportError&) {
        throw;  // peer vanished; nothing to tell it
    } catch (const std::exception& e) {
        ProtocolMessage abort;
        abort.type = MsgType::Abort;
        abort.session_id = 0;
        abort.seq = 1;
        put_u16(abort.payload, 1);
        std::string reason = e.what();
        if (reason.size() > 512) reason.resize(512);
        put_u16(abort.payload, static_cast<uint16_t>(reason.size()));
        abort.payload.insert(abort.payload.end(), reason.begin(), reason.end());
        try {
            t.send(abort);
        } catch (...) {
        }
        throw;
    }
}

}  // namespace bayhenn
