#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cosmos/augment.hpp"
#include "cosmos/config.hpp"
#include "cosmos/tensor.hpp"
#include "cosmos/tokenizer.hpp"

namespace cosmos {

struct ManifestRecord {
    std::string id;
    std::string image;                  // path relative to the manifest directory
    std::vector<std::string> captions;  // one or more non-empty caption strings
    std::string label;                  // optional "color shape" class name, empty when absent
};

struct Dataset {
    std::filesystem::path root;  // directory holding the manifest and images
    std::vector<ManifestRecord> records;

    bool has_labels() const;
};

// Reads a JSONL manifest. Malformed lines throw (fail_fast) or are skipped
// with a stderr warning; duplicate ids always throw. An empty manifest is
// returned with a warning.
Dataset load_manifest(const std::filesystem::path& path, bool fail_fast = true);

// Writes one JSON object per record; the label key is omitted when empty.
// load_manifest(save_manifest(ds)) reproduces ds record for record.
void save_manifest(const Dataset& dataset, const std::filesystem::path& path);

// Binary PPM (P6, maxval 255). decode maps bytes to [0,1]; encode rounds to
// the nearest byte, so encode(decode(bytes)) reproduces the input exactly.
template <typename T>
Tensor<T> decode_ppm(const std::vector<std::uint8_t>& bytes);
template <typename T>
std::vector<std::uint8_t> encode_ppm(const Tensor<T>& image);

template <typename T>
Tensor<T> load_ppm(const std::filesystem::path& path);
template <typename T>
void save_ppm(const Tensor<T>& image, const std::filesystem::path& path);

template <typename T>
std::vector<Tensor<T>> load_images(const Dataset& dataset);

// Writes n generated records (PPM images plus manifest.jsonl) into out_dir
// and returns the dataset. Each image holds 1..3 non-overlapping colored
// shapes on a noisy gray background; captions describe every shape and the
// background, and the label names the largest shape.
Dataset gen_synthetic_dataset(std::size_t n, std::uint64_t seed,
                              const std::filesystem::path& out_dir,
                              std::size_t base_side = 64);

// Shuffled epoch batching; the trailing partial batch is dropped.
std::vector<std::vector<std::size_t>> make_batches(std::size_t count, std::size_t batch_size,
                                                   std::uint64_t epoch_seed);

template <typename T>
struct SampleViews {
    std::size_t index = 0;                     // record index within the dataset
    CropBundle<T> crops;
    std::vector<TokenizedText> global_tokens;  // aligned with crops.texts.globals
    std::vector<TokenizedText> local_tokens;   // aligned with crops.texts.locals
};

template <typename T>
struct Batch {
    std::vector<SampleViews<T>> samples;
};

// Crops and tokenizes the selected records. The augmentation stream for each
// sample depends only on (seed, epoch, record id), never on batch order.
template <typename T>
Batch<T> prepare_batch(const Dataset& dataset, const std::vector<Tensor<T>>& images,
                       const std::vector<std::size_t>& indices, const Vocab& vocab,
                       const CropConfig& crops, const ModelConfig& model, std::uint64_t seed,
                       std::uint64_t epoch);

}  // namespace cosmos
