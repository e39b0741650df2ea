#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cosmos/config.hpp"
#include "cosmos/data.hpp"
#include "cosmos/losses.hpp"
#include "cosmos/nn.hpp"
#include "cosmos/tokenizer.hpp"

namespace cosmos {

struct StepMetrics {
    std::uint64_t step = 0;  // index of the completed update, 0-based
    double clip = 0.0;
    double cosmos = 0.0;
    double total = 0.0;
    double lr = 0.0;
    double tau = 0.0;

    std::string to_jsonl() const;  // one-line JSON object, fixed key order
};

// First and second Adam moments, aligned with the student store's name order.
template <typename T>
struct AdamMoments {
    std::vector<std::vector<T>> m, v;
};

template <typename T>
struct TrainState {
    ParameterStore<T> student;
    ParameterStore<T> teacher;
    AdamMoments<T> moments;
    std::uint64_t step = 0;
    std::uint64_t seed = 0;
};

template <typename T>
TrainState<T> init_train_state(const RunConfig& cfg);

// Learning rate of 1-based update number `update`: linear 0 -> lr across the
// warmup updates, cosine lr -> 0 across the rest. lr_at(0) == 0,
// lr_at(warmup) == lr, lr_at(total) == 0.
double lr_at(const OptimConfig& cfg, std::uint64_t total_updates, std::uint64_t update);

// One decoupled-weight-decay Adam update from the gradients stored in the
// params. t is the 1-based update count for bias correction. Norm gains,
// biases and the temperature are exempt from decay. Non-finite gradients
// throw.
template <typename T>
void adamw_step(ParameterStore<T>& params, AdamMoments<T>& moments, double lr,
                const OptimConfig& cfg, std::uint64_t t);

// teacher <- lambda * teacher + (1 - lambda) * student, elementwise over the
// teacher's names. Missing or misshapen student counterparts throw.
template <typename T>
void ema_update(ParameterStore<T>& teacher, const ParameterStore<T>& student, double lambda);

// Runs the student on every crop and the teacher on the global crops only
// (off the gradient tape, detached). Cross-modal embeddings use the first
// global crop of the opposite modality as the kv sequence. All embeddings
// are row-normalized, stacked to [B x embed_dim] per crop.
template <typename T>
ForwardBundle<T> build_bundle(const Batch<T>& batch, const ParameterStore<T>& student,
                              const ParameterStore<T>& teacher, const RunConfig& cfg);

// Forward, backward, AdamW on the student, then the EMA teacher update.
// Non-finite loss or gradient throws DivergenceError naming step and seed.
template <typename T>
StepMetrics train_step(TrainState<T>& state, const Batch<T>& batch, const RunConfig& cfg);

template <typename T>
struct Checkpoint {
    TrainState<T> state;
    RunConfig config;
    Vocab vocab;
};

// Peeks at a checkpoint header and returns its dtype string.
std::string checkpoint_dtype(const std::filesystem::path& path);

// Binary checkpoint: magic, version, JSON header (names, shapes, dtype, step,
// seed, config, vocab), then raw little-endian value blobs in header order.
// The write goes to a temp file first and is renamed into place.
template <typename T>
void save_checkpoint(const TrainState<T>& state, const RunConfig& cfg, const Vocab& vocab,
                     const std::filesystem::path& path);

// Restores a checkpoint byte-exactly: parameters, teacher, optimizer moments,
// step and seed. Truncated or malformed files throw FormatError; a dtype or
// shape set that does not match the embedded config throws
// CompatibilityError.
template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace cosmos
