#pragma once

#include <stdexcept>
#include <string>

namespace cosmos {

// Base for everything this library throws on purpose.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape or rank mismatch between tensors. Message names both shapes.
struct ShapeError : Error {
    using Error::Error;
};

// A precondition on values was violated (non-normalized rows, bad index,
// degenerate input, scalar expected, ...).
struct ContractError : Error {
    using Error::Error;
};

// Invalid or inconsistent run configuration.
struct ConfigError : Error {
    using Error::Error;
};

// Malformed file contents (checkpoint, image, manifest).
struct FormatError : Error {
    using Error::Error;
};

// Filesystem-level failure (open, read, write, rename).
struct IoError : Error {
    using Error::Error;
};

// Loss or gradients became non-finite during training.
struct DivergenceError : Error {
    using Error::Error;
};

// Stored state does not match the configuration it is being loaded into.
struct CompatibilityError : Error {
    using Error::Error;
};

// Dataset or text input failed validation (missing file, empty caption,
// id out of vocabulary, duplicate sample id).
struct ValidationError : Error {
    using Error::Error;
};

}  // namespace cosmos
