#pragma once

#include <cstdint>
#include <string>

#include "cosmos/error.hpp"

namespace cosmos {

// Defaults describe the desk-scale model: minutes of CPU training while every
// mechanism stays intact.

struct VisionConfig {
    std::size_t image_size = 32;  // side of the global view
    std::size_t local_size = 16;  // side of the local view
    std::size_t patch = 8;
    std::size_t width = 64;
    std::size_t depth = 4;
    std::size_t heads = 4;

    std::size_t grid() const { return image_size / patch; }        // per-axis patches, global
    std::size_t local_grid() const { return local_size / patch; }  // per-axis patches, local
};

struct TextConfig {
    std::size_t vocab = 256;
    std::size_t max_len = 32;
    std::size_t width = 64;
    std::size_t depth = 4;
    std::size_t heads = 4;
};

struct ModelConfig {
    VisionConfig vision;
    TextConfig text;
    std::size_t embed_dim = 64;    // shared space both encoders project into
    std::size_t fusion_heads = 4;  // heads of the cross-modal attention block

    void validate() const;
};

struct CropConfig {
    std::size_t global_images = 2;
    std::size_t local_images = 6;
    std::size_t global_texts = 2;
    std::size_t local_texts = 6;
    double global_scale_lo = 0.4, global_scale_hi = 1.0;   // area fraction range
    double local_scale_lo = 0.05, local_scale_hi = 0.4;
    double aspect_lo = 0.75, aspect_hi = 4.0 / 3.0;
    double flip_p = 0.5;
    std::size_t global_max_sentences = 5;  // global text crop draws 1..this many sentences
    std::size_t local_sentences = 1;

    void validate() const;
};

struct OptimConfig {
    double lr = 5e-4;
    std::size_t warmup = 100;
    double weight_decay = 0.5;
    double beta1 = 0.9, beta2 = 0.98;
    double adam_eps = 1e-8;
    double ema_momentum = 0.99;  // fixed, not scheduled
    double tau_init = 0.07;
    double inv_tau_max = 100.0;  // clamp on 1/tau

    void validate() const;
};

struct RunConfig {
    ModelConfig model;
    CropConfig crops;
    OptimConfig optim;
    std::size_t batch_size = 32;
    std::size_t steps = 300;  // total optimizer steps; also the schedule horizon
    std::uint64_t seed = 0;
    std::string dtype = "f32";  // "f32" or "f64"
    bool clip_only = false;     // drop the distillation term (ablation arm)
    std::size_t checkpoint_every = 0;  // extra periodic checkpoints; 0 = final only

    void validate() const;

    // Serialization emits every field in a fixed order, so the digest is a
    // stable fingerprint of the resolved configuration.
    std::string to_json() const;
    static RunConfig from_json(const std::string& text);
    std::string digest() const;
};

}  // namespace cosmos
