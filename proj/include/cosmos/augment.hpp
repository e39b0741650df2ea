#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cosmos/config.hpp"
#include "cosmos/rng.hpp"
#include "cosmos/tensor.hpp"

namespace cosmos {

// Provenance of one image crop. area_frac is the sampled area fraction
// (before integer rounding of the box).
struct CropBox {
    std::size_t x = 0, y = 0, w = 0, h = 0;
    double area_frac = 1.0;
    bool flipped = false;
};

template <typename T>
struct ImageCrops {
    std::vector<Tensor<T>> globals, locals;  // [side x side x 3]
    std::vector<CropBox> global_boxes, local_boxes;
};

struct TextCrops {
    std::vector<std::string> globals, locals;
    std::vector<std::vector<std::size_t>> global_sentences, local_sentences;  // indices
};

// One sample's views for one training step.
template <typename T>
struct CropBundle {
    ImageCrops<T> images;
    TextCrops texts;
};

// Splits at '.', '!' or '?' followed by whitespace or end of string, keeping
// the delimiter with its sentence and dropping empty fragments.
std::vector<std::string> split_sentences(const std::string& caption);

// Global crops: 1..min(config limit, count) distinct sentences, original
// order. Local crops: one sentence each. All draws uniform.
TextCrops sample_text_crops(const std::vector<std::string>& sentences, const CropConfig& cfg,
                            Rng& rng);

// Random resized crops: area fraction uniform in the scale range, aspect
// log-uniform, up to 10 attempts then a centered fallback box; bilinear
// resize to the output side; independent horizontal flips.
template <typename T>
ImageCrops<T> sample_image_crops(const Tensor<T>& image, const CropConfig& cfg,
                                 std::size_t global_side, std::size_t local_side, Rng& rng);

// align_corners=false bilinear resampling of [H x W x 3] to [side x side x 3].
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& image, std::size_t out_side);

// Image and text streams are derived independently from (seed, sample_key),
// so changing how many draws one modality makes never shifts the other.
template <typename T>
CropBundle<T> make_crop_bundle(const Tensor<T>& image, const std::vector<std::string>& sentences,
                               const CropConfig& cfg, std::size_t global_side,
                               std::size_t local_side, std::uint64_t seed,
                               std::uint64_t sample_key);

}  // namespace cosmos
