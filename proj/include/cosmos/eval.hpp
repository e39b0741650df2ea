#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cosmos/config.hpp"
#include "cosmos/data.hpp"
#include "cosmos/nn.hpp"
#include "cosmos/tensor.hpp"
#include "cosmos/tokenizer.hpp"

namespace cosmos {

template <typename T>
struct CorpusEmbeddings {
    Tensor<T> images;  // [N x embed_dim], rows unit length
    Tensor<T> texts;   // [N x embed_dim], rows unit length
};

// Deterministic eval-time embeddings: each record's base image resized to the
// global side (no crop, no flip) through the vision tower's cls; each
// record's captions joined into one string through the text tower's eot.
// The fusion blocks are not involved.
template <typename T>
CorpusEmbeddings<T> embed_corpus(const ParameterStore<T>& params, const ModelConfig& cfg,
                                 const Dataset& dataset, const std::vector<Tensor<T>>& images,
                                 const Vocab& vocab);

struct RetrievalReport {
    std::size_t n = 0;
    std::vector<std::size_t> ks;
    std::vector<double> image_to_text;  // recall@k, aligned with ks
    std::vector<double> text_to_image;

    std::string to_json() const;
};

// Recall@k in both directions, pairing row i with row i. Candidates are
// ordered by descending similarity; equal scores rank the lower index first.
// k values beyond n are clamped with a warning.
template <typename T>
RetrievalReport retrieval(const Tensor<T>& image_embeds, const Tensor<T>& text_embeds,
                          std::vector<std::size_t> ks);

struct ZeroShotReport {
    std::size_t n = 0;
    std::size_t correct = 0;
    double accuracy = 0.0;

    std::string to_json() const;
};

// Prompt-set classification: each class embedding is the re-normalized mean
// of its prompt embeddings; each image picks the highest-scoring class, ties
// resolving to the lowest class index. A record label absent from the class
// list is an error.
template <typename T>
ZeroShotReport zero_shot_classify(
    const ParameterStore<T>& params, const ModelConfig& cfg, const Dataset& dataset,
    const std::vector<Tensor<T>>& images, const Vocab& vocab,
    const std::vector<std::pair<std::string, std::vector<std::string>>>& class_prompts);

struct AttentionMapResult {
    std::vector<double> patch_raw;   // head-averaged text-query weights, one per patch
    std::vector<double> patch_norm;  // min-max normalized; all-equal maps to all zeros
    std::vector<double> token_raw;   // head-averaged image-query weights, one per kv token
    std::vector<double> token_norm;
    std::vector<std::vector<double>> patch_heads;  // per-head weights before averaging
    std::vector<std::vector<double>> token_heads;
    std::vector<std::string> tokens;  // kv token strings, aligned with token_raw
    std::size_t grid = 0;             // patches per axis of the global view
};

// Fusion-block attention for one (image, caption) pair: where the text query
// looks in the image, and where the image query looks in the caption.
template <typename T>
AttentionMapResult attention_map(const ParameterStore<T>& params, const ModelConfig& cfg,
                                 const Vocab& vocab, const Tensor<T>& image,
                                 const std::string& caption);

// Writes <prefix>_heat.ppm (grayscale patch map, nearest-neighbor upsampled),
// <prefix>_overlay.ppm (map blended over the resized image), and
// <prefix>_tokens.csv (token,weight rows, min-max normalized weights).
template <typename T>
void write_attention_files(const AttentionMapResult& result, const Tensor<T>& image,
                           const ModelConfig& cfg, const std::string& prefix);

}  // namespace cosmos
