#include "cosmos/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cosmos/error.hpp"
#include "cosmos/parallel.hpp"
#include "cosmos/rng.hpp"

namespace cosmos {

namespace {

using json = nlohmann::json;

constexpr std::uint64_t kShapeStream = 0x73686170;  // shape placement draws
constexpr std::uint64_t kNoiseStream = 0x6e6f6973;  // background noise pixels

std::string manifest_error(const std::filesystem::path& path, std::size_t line,
                           const std::string& what) {
    std::ostringstream os;
    os << path.string() << ":" << line << ": " << what;
    return os.str();
}

ManifestRecord parse_record(const json& j, const std::filesystem::path& path, std::size_t line) {
    if (!j.is_object()) throw ValidationError(manifest_error(path, line, "record is not an object"));
    ManifestRecord rec;
    if (!j.contains("id") || !j.at("id").is_string())
        throw ValidationError(manifest_error(path, line, "missing string field 'id'"));
    rec.id = j.at("id").get<std::string>();
    if (rec.id.empty()) throw ValidationError(manifest_error(path, line, "empty id"));
    if (!j.contains("image") || !j.at("image").is_string())
        throw ValidationError(manifest_error(path, line, "missing string field 'image'"));
    rec.image = j.at("image").get<std::string>();
    if (rec.image.empty()) throw ValidationError(manifest_error(path, line, "empty image path"));
    if (!j.contains("captions") || !j.at("captions").is_array())
        throw ValidationError(manifest_error(path, line, "missing array field 'captions'"));
    for (const auto& c : j.at("captions")) {
        if (!c.is_string() || c.get<std::string>().empty())
            throw ValidationError(manifest_error(path, line, "captions must be non-empty strings"));
        rec.captions.push_back(c.get<std::string>());
    }
    if (rec.captions.empty())
        throw ValidationError(manifest_error(path, line, "record has no captions"));
    if (j.contains("label")) {
        if (!j.at("label").is_string())
            throw ValidationError(manifest_error(path, line, "field 'label' must be a string"));
        rec.label = j.at("label").get<std::string>();
    }
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (key != "id" && key != "image" && key != "captions" && key != "label")
            throw ValidationError(manifest_error(path, line, "unknown field '" + key + "'"));
    }
    return rec;
}

}  // namespace

bool Dataset::has_labels() const {
    return !records.empty() &&
           std::all_of(records.begin(), records.end(),
                       [](const ManifestRecord& r) { return !r.label.empty(); });
}

Dataset load_manifest(const std::filesystem::path& path, bool fail_fast) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest: " + path.string());
    Dataset ds;
    ds.root = path.parent_path();
    std::set<std::string> seen_ids;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        ManifestRecord rec;
        try {
            rec = parse_record(json::parse(line), path, line_no);
        } catch (const json::parse_error& e) {
            const std::string msg = manifest_error(path, line_no, std::string("invalid JSON: ") + e.what());
            if (fail_fast) throw ValidationError(msg);
            std::cerr << "warning: skipping record: " << msg << "\n";
            continue;
        } catch (const ValidationError& e) {
            if (fail_fast) throw;
            std::cerr << "warning: skipping record: " << e.what() << "\n";
            continue;
        }
        if (!seen_ids.insert(rec.id).second)
            throw ValidationError(manifest_error(path, line_no, "duplicate id '" + rec.id + "'"));
        ds.records.push_back(std::move(rec));
    }
    if (ds.records.empty())
        std::cerr << "warning: manifest " << path.string() << " holds no records\n";
    return ds;
}

namespace {

// Reads one PPM header token, skipping whitespace and '#' comment lines.
std::string next_ppm_token(const std::vector<std::uint8_t>& bytes, std::size_t& pos) {
    while (pos < bytes.size()) {
        const char c = static_cast<char>(bytes[pos]);
        if (c == '#') {
            while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        } else if (std::isspace(static_cast<unsigned char>(c))) {
            ++pos;
        } else {
            break;
        }
    }
    std::string token;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos])) &&
           bytes[pos] != '#') {
        token.push_back(static_cast<char>(bytes[pos]));
        ++pos;
    }
    if (token.empty()) throw FormatError("ppm: truncated header");
    return token;
}

std::size_t parse_ppm_number(const std::string& token) {
    if (token.empty() || !std::all_of(token.begin(), token.end(), [](char c) {
            return std::isdigit(static_cast<unsigned char>(c));
        }))
        throw FormatError("ppm: invalid header number '" + token + "'");
    return static_cast<std::size_t>(std::stoull(token));
}

}  // namespace

template <typename T>
Tensor<T> decode_ppm(const std::vector<std::uint8_t>& bytes) {
    std::size_t pos = 0;
    if (next_ppm_token(bytes, pos) != "P6") throw FormatError("ppm: expected magic P6");
    const std::size_t width = parse_ppm_number(next_ppm_token(bytes, pos));
    const std::size_t height = parse_ppm_number(next_ppm_token(bytes, pos));
    const std::size_t maxval = parse_ppm_number(next_ppm_token(bytes, pos));
    if (maxval != 255) throw FormatError("ppm: only maxval 255 is supported");
    if (width == 0 || height == 0) throw FormatError("ppm: zero image dimension");
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
        throw FormatError("ppm: missing separator before pixel data");
    ++pos;
    const std::size_t need = width * height * 3;
    if (bytes.size() - pos < need) throw FormatError("ppm: truncated pixel data");
    Tensor<T> img = Tensor<T>::zeros({height, width, 3});
    auto& v = img.node()->value;
    for (std::size_t i = 0; i < need; ++i)
        v[i] = static_cast<T>(bytes[pos + i] / 255.0);
    return img;
}

template <typename T>
std::vector<std::uint8_t> encode_ppm(const Tensor<T>& image) {
    if (image.rank() != 3 || image.shape()[2] != 3)
        throw ShapeError("encode_ppm: image must be [h, w, 3]");
    const std::size_t height = image.shape()[0];
    const std::size_t width = image.shape()[1];
    std::ostringstream header;
    header << "P6\n" << width << " " << height << "\n255\n";
    const std::string h = header.str();
    std::vector<std::uint8_t> bytes(h.begin(), h.end());
    bytes.reserve(bytes.size() + height * width * 3);
    const auto& v = image.node()->value;
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double x = std::clamp(static_cast<double>(v[i]), 0.0, 1.0);
        bytes.push_back(static_cast<std::uint8_t>(std::lround(x * 255.0)));
    }
    return bytes;
}

template <typename T>
Tensor<T> load_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open image: " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    try {
        return decode_ppm<T>(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

template <typename T>
void save_ppm(const Tensor<T>& image, const std::filesystem::path& path) {
    const auto bytes = encode_ppm(image);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write image: " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write: " + path.string());
}

template <typename T>
std::vector<Tensor<T>> load_images(const Dataset& dataset) {
    std::vector<Tensor<T>> images(dataset.records.size());
    parallel_for(dataset.records.size(), [&](std::size_t i) {
        images[i] = load_ppm<T>(dataset.root / dataset.records[i].image);
    });
    return images;
}

namespace {

struct ShapeSpec {
    std::size_t kind = 0;   // 0 circle, 1 square, 2 triangle
    std::size_t color = 0;  // palette index
    std::size_t cx = 0, cy = 0, half = 0;
    std::size_t pixels = 0;  // painted pixel count
};

constexpr std::array<const char*, 3> kShapeNames = {"circle", "square", "triangle"};
constexpr std::array<const char*, 6> kColorNames = {"red", "green", "blue",
                                                    "yellow", "purple", "orange"};
// Each row is (r, g, b) with a unique dominant channel argmax pattern strong
// enough to survive background noise at the shape center.
constexpr std::array<std::array<double, 3>, 6> kPalette = {{
    {0.90, 0.10, 0.10},  // red
    {0.10, 0.80, 0.15},  // green
    {0.15, 0.20, 0.90},  // blue
    {0.95, 0.85, 0.10},  // yellow
    {0.55, 0.15, 0.85},  // purple
    {0.95, 0.55, 0.10},  // orange
}};

bool inside_shape(const ShapeSpec& s, std::size_t x, std::size_t y) {
    const double dx = static_cast<double>(x) - static_cast<double>(s.cx);
    const double dy = static_cast<double>(y) - static_cast<double>(s.cy);
    const double h = static_cast<double>(s.half);
    switch (s.kind) {
        case 0: return dx * dx + dy * dy <= h * h;
        case 1: return std::abs(dx) <= h && std::abs(dy) <= h;
        default: return dy >= -h && dy <= h && std::abs(dx) <= (dy + h) / 2.0;
    }
}

bool boxes_overlap(const ShapeSpec& a, const ShapeSpec& b) {
    const auto lo = [](const ShapeSpec& s, bool x) {
        return static_cast<long>(x ? s.cx : s.cy) - static_cast<long>(s.half) - 1;
    };
    const auto hi = [](const ShapeSpec& s, bool x) {
        return static_cast<long>(x ? s.cx : s.cy) + static_cast<long>(s.half) + 1;
    };
    return lo(a, true) <= hi(b, true) && lo(b, true) <= hi(a, true) &&
           lo(a, false) <= hi(b, false) && lo(b, false) <= hi(a, false);
}

std::string position_phrase(std::size_t cx, std::size_t cy, std::size_t side) {
    if (cx * 3 < side) return "on the left";
    if (cx * 3 >= side * 2) return "on the right";
    if (cy * 3 < side) return "at the top";
    if (cy * 3 >= side * 2) return "at the bottom";
    return "in the center";
}

}  // namespace

void save_manifest(const Dataset& dataset, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write manifest: " + path.string());
    for (const auto& rec : dataset.records) {
        json j;
        j["id"] = rec.id;
        j["image"] = rec.image;
        j["captions"] = rec.captions;
        if (!rec.label.empty()) j["label"] = rec.label;
        out << j.dump() << "\n";
    }
    if (!out) throw IoError("short manifest write: " + path.string());
}

Dataset gen_synthetic_dataset(std::size_t n, std::uint64_t seed,
                              const std::filesystem::path& out_dir, std::size_t base_side) {
    if (n == 0) throw ConfigError("gen_synthetic_dataset: n must be positive");
    if (base_side < 32) throw ConfigError("gen_synthetic_dataset: base_side must be at least 32");
    std::filesystem::create_directories(out_dir);
    Dataset ds;
    ds.root = out_dir;
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(mix_seed(seed, i, kShapeStream));
        Rng noise(mix_seed(seed, i, kNoiseStream));
        const std::size_t side = base_side;

        const std::size_t level_idx = rng.uniform_int(3);
        const double level = 0.25 + 0.25 * static_cast<double>(level_idx);
        const char* level_word = level_idx == 0 ? "dark" : (level_idx == 1 ? "gray" : "light");
        const bool rough = rng.uniform_int(2) == 1;
        const double amp = rough ? 0.10 : 0.02;

        Tensor<double> img = Tensor<double>::zeros({side, side, 3});
        auto& pix = img.node()->value;
        for (std::size_t p = 0; p < side * side; ++p) {
            const double v = std::clamp(level + amp * (2.0 * noise.uniform() - 1.0), 0.0, 1.0);
            pix[p * 3 + 0] = v;
            pix[p * 3 + 1] = v;
            pix[p * 3 + 2] = v;
        }

        const std::size_t want = 1 + rng.uniform_int(3);
        std::vector<ShapeSpec> shapes;
        for (std::size_t s = 0; s < want; ++s) {
            bool placed = false;
            for (std::size_t attempt = 0; attempt < 50 && !placed; ++attempt) {
                ShapeSpec spec;
                spec.kind = rng.uniform_int(3);
                spec.color = rng.uniform_int(6);
                const std::size_t min_half = side / 10;
                const std::size_t max_half = side / 5;
                spec.half = min_half + rng.uniform_int(max_half - min_half + 1);
                const std::size_t span = side - 2 * spec.half - 2;
                spec.cx = spec.half + 1 + rng.uniform_int(span);
                spec.cy = spec.half + 1 + rng.uniform_int(span);
                placed = std::none_of(shapes.begin(), shapes.end(), [&](const ShapeSpec& other) {
                    return boxes_overlap(spec, other);
                });
                if (placed) shapes.push_back(spec);
            }
        }
        if (shapes.empty()) throw ContractError("gen_synthetic_dataset: failed to place any shape");

        for (auto& s : shapes) {
            const auto& color = kPalette[s.color];
            for (std::size_t y = s.cy - s.half; y <= s.cy + s.half; ++y)
                for (std::size_t x = s.cx - s.half; x <= s.cx + s.half; ++x)
                    if (inside_shape(s, x, y)) {
                        double* p = &pix[(y * side + x) * 3];
                        p[0] = color[0];
                        p[1] = color[1];
                        p[2] = color[2];
                        ++s.pixels;
                    }
        }

        ManifestRecord rec;
        rec.id = std::to_string(i);
        {
            char name[32];
            std::snprintf(name, sizeof(name), "img_%05zu.ppm", i);
            rec.image = name;
        }
        for (const auto& s : shapes) {
            std::ostringstream cap;
            cap << "a " << kColorNames[s.color] << " " << kShapeNames[s.kind] << " "
                << position_phrase(s.cx, s.cy, side) << ".";
            rec.captions.push_back(cap.str());
        }
        {
            std::ostringstream cap;
            cap << "the " << (rough ? "rough" : "smooth") << " background is " << level_word << ".";
            rec.captions.push_back(cap.str());
        }
        const auto largest = std::max_element(
            shapes.begin(), shapes.end(),
            [](const ShapeSpec& a, const ShapeSpec& b) { return a.pixels < b.pixels; });
        rec.label = std::string(kColorNames[largest->color]) + " " + kShapeNames[largest->kind];

        save_ppm(img, out_dir / rec.image);
        ds.records.push_back(std::move(rec));
    }
    save_manifest(ds, out_dir / "manifest.jsonl");
    return ds;
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t count, std::size_t batch_size,
                                                   std::uint64_t epoch_seed) {
    if (batch_size < 2) throw ContractError("make_batches: batch_size must be at least 2");
    if (count < batch_size)
        throw ContractError("make_batches: dataset smaller than one batch");
    std::vector<std::size_t> perm(count);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng rng(splitmix64(epoch_seed));
    rng.shuffle(perm);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t lo = 0; lo + batch_size <= count; lo += batch_size)
        batches.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(lo),
                             perm.begin() + static_cast<std::ptrdiff_t>(lo + batch_size));
    return batches;
}

template <typename T>
Batch<T> prepare_batch(const Dataset& dataset, const std::vector<Tensor<T>>& images,
                       const std::vector<std::size_t>& indices, const Vocab& vocab,
                       const CropConfig& crops, const ModelConfig& model, std::uint64_t seed,
                       std::uint64_t epoch) {
    if (images.size() != dataset.records.size())
        throw ContractError("prepare_batch: image cache size does not match dataset");
    Batch<T> batch;
    batch.samples.resize(indices.size());
    const std::uint64_t effective_seed = mix_seed(seed, epoch);
    parallel_for(indices.size(), [&](std::size_t i) {
        const std::size_t idx = indices[i];
        if (idx >= dataset.records.size())
            throw ContractError("prepare_batch: record index out of range");
        const auto& rec = dataset.records[idx];
        std::vector<std::string> sentences;
        for (const auto& caption : rec.captions) {
            auto parts = split_sentences(caption);
            sentences.insert(sentences.end(), parts.begin(), parts.end());
        }
        SampleViews<T> views;
        views.index = idx;
        views.crops = make_crop_bundle(images[idx], sentences, crops,
                                       model.vision.image_size, model.vision.local_size,
                                       effective_seed, fnv1a(rec.id));
        for (const auto& text : views.crops.texts.globals)
            views.global_tokens.push_back(encode_caption(text, vocab, model.text.max_len));
        for (const auto& text : views.crops.texts.locals)
            views.local_tokens.push_back(encode_caption(text, vocab, model.text.max_len));
        batch.samples[i] = std::move(views);
    });
    return batch;
}

#define COSMOS_INSTANTIATE_DATA(T)                                                     \
    template Tensor<T> decode_ppm<T>(const std::vector<std::uint8_t>&);                \
    template std::vector<std::uint8_t> encode_ppm<T>(const Tensor<T>&);                \
    template Tensor<T> load_ppm<T>(const std::filesystem::path&);                      \
    template void save_ppm<T>(const Tensor<T>&, const std::filesystem::path&);         \
    template std::vector<Tensor<T>> load_images<T>(const Dataset&);                    \
    template Batch<T> prepare_batch<T>(const Dataset&, const std::vector<Tensor<T>>&,  \
                                       const std::vector<std::size_t>&, const Vocab&,  \
                                       const CropConfig&, const ModelConfig&,          \
                                       std::uint64_t, std::uint64_t);

COSMOS_INSTANTIATE_DATA(float)
COSMOS_INSTANTIATE_DATA(double)

}  // namespace cosmos
