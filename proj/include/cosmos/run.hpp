#pragma once

#include <filesystem>

#include "cosmos/config.hpp"
#include "cosmos/gradcheck.hpp"

namespace cosmos {

struct RunResult {
    std::filesystem::path metrics;     // metrics.jsonl inside out_dir
    std::filesystem::path checkpoint;  // final checkpoint
};

// Trains cfg.steps updates over the dataset in data_dir. Writes per-step
// metrics JSONL, a rolling per-epoch checkpoint, the final checkpoint, and
// the resolved config and vocab into out_dir. A non-empty resume path
// restores that checkpoint (its config digest must match) and continues to
// the same horizon.
RunResult run_train(const RunConfig& cfg, const std::filesystem::path& data_dir,
                    const std::filesystem::path& out_dir,
                    const std::filesystem::path& resume = {});

// Finite-difference audit of the full training objective on a tiny
// double-precision model (width 8, depth 1, two heads, batch of two, one
// global and one local crop per modality). corrupt_backward injects a known
// backward-pass fault to prove the audit catches one.
GradCheckReport run_gradcheck(std::size_t dim, double eps, double tolerance,
                              bool corrupt_backward);

}  // namespace cosmos
