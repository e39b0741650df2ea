#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "cosmos/config.hpp"
#include "cosmos/nn.hpp"
#include "cosmos/tensor.hpp"

namespace cosmos {

template <typename T>
struct EncodedImage {
    Tensor<T> cls;           // [embed_dim]
    Tensor<T> patch_tokens;  // [P x embed_dim], shared space, cls excluded
};

template <typename T>
struct EncodedText {
    Tensor<T> eot;          // [embed_dim], the projected token at eot_index
    Tensor<T> word_tokens;  // [(eot_index+1) x embed_dim], positions 0..eot_index
    std::size_t eot_index = 0;
};

template <typename T>
struct CrossModalEmbed {
    Tensor<T> embed;  // [embed_dim]
    Tensor<T> attn;   // [heads x 1 x K] post-softmax weights, detached
};

// Flattens a [S x S x 3] image in [0,1] into patch rows of length 3*patch^2,
// mapping pixels through (x - 0.5) / 0.5. Patches are ordered row-major, and
// so are pixels (then channels) inside each patch. Output is a constant.
template <typename T>
Tensor<T> patchify(const Tensor<T>& pixels, std::size_t patch);

// Bilinear interpolation table taking a global position grid (g x g, row-major
// rows) to a local one (l x l). Each output row's weights sum to 1.
std::vector<std::vector<std::pair<std::size_t, double>>> pos_interp_weights(std::size_t g,
                                                                            std::size_t l);

// ViT forward: patchify, linear embed, prepend cls, add positions (bilinearly
// interpolated when the side is the local one), depth pre-norm blocks, final
// norm, projection of every token to the shared space.
template <typename T>
EncodedImage<T> encode_image(const Tensor<T>& pixels, const ParameterStore<T>& store,
                             const ModelConfig& cfg);

// Causal text transformer over positions 0..eot_index. Later positions never
// influence these tokens, so they are not computed at all.
template <typename T>
EncodedText<T> encode_text(std::span<const std::int32_t> ids, std::size_t eot_index,
                           const ParameterStore<T>& store, const ModelConfig& cfg);

// Cross-modal image embedding: cls attends over text tokens, readout added
// back onto cls. The kv set is a text crop's full computed token sequence.
template <typename T>
CrossModalEmbed<T> cross_modal_image_embed(const Tensor<T>& cls, const Tensor<T>& word_tokens,
                                           const ParameterStore<T>& store, const ModelConfig& cfg);

// Mirror image: eot attends over patch tokens.
template <typename T>
CrossModalEmbed<T> cross_modal_text_embed(const Tensor<T>& eot, const Tensor<T>& patch_tokens,
                                          const ParameterStore<T>& store, const ModelConfig& cfg);

}  // namespace cosmos
