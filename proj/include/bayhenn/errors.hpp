#pragma once

#include <stdexcept>

namespace bayhenn {

// Bad parameter combinations detected at configuration or model-load time.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed model or dataset files.
struct ModelDataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Violations of the message schema or session state machine.
struct ProtocolError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Connection-level failures (EOF mid-frame, refused, oversize frame).
struct TransportError : ProtocolError {
    using ProtocolError::ProtocolError;
};

}  // namespace bayhenn
