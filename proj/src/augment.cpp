#include "cosmos/augment.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>

namespace cosmos {

namespace {
// Modality tags for sub-stream derivation.
constexpr std::uint64_t kImageStream = 0x696d6167;
constexpr std::uint64_t kTextStream = 0x74657874;

bool has_alnum(const std::string& s) {
    return std::any_of(s.begin(), s.end(),
                       [](unsigned char c) { return std::isalnum(c) != 0; });
}

std::string trimmed(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}
}  // namespace

std::vector<std::string> split_sentences(const std::string& caption) {
    std::vector<std::string> out;
    std::string cur;
    for (std::size_t i = 0; i < caption.size(); ++i) {
        const char c = caption[i];
        cur.push_back(c);
        const bool terminal = (c == '.' || c == '!' || c == '?');
        const bool boundary =
            terminal && (i + 1 == caption.size() ||
                         std::isspace(static_cast<unsigned char>(caption[i + 1])));
        if (boundary) {
            auto t = trimmed(cur);
            if (has_alnum(t)) out.push_back(std::move(t));
            cur.clear();
        }
    }
    auto t = trimmed(cur);
    if (has_alnum(t)) out.push_back(std::move(t));
    if (out.empty())
        throw ValidationError("split_sentences: no sentences with content in \"" + caption +
                              "\"");
    return out;
}

namespace {

// k distinct indices out of n, uniform, returned in ascending order.
std::vector<std::size_t> draw_distinct(std::size_t n, std::size_t k, Rng& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    rng.shuffle(idx);
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

std::string join_sentences(const std::vector<std::string>& sentences,
                           const std::vector<std::size_t>& idx) {
    std::string out;
    for (const std::size_t i : idx) {
        if (!out.empty()) out.push_back(' ');
        out += sentences[i];
    }
    return out;
}

}  // namespace

TextCrops sample_text_crops(const std::vector<std::string>& sentences, const CropConfig& cfg,
                            Rng& rng) {
    if (sentences.empty()) throw ContractError("sample_text_crops: no sentences");
    const std::size_t n = sentences.size();
    TextCrops out;
    for (std::size_t c = 0; c < cfg.global_texts; ++c) {
        const std::size_t kmax = std::min(cfg.global_max_sentences, n);
        const std::size_t k = 1 + static_cast<std::size_t>(rng.uniform_int(kmax));
        auto idx = draw_distinct(n, k, rng);
        out.globals.push_back(join_sentences(sentences, idx));
        out.global_sentences.push_back(std::move(idx));
    }
    for (std::size_t c = 0; c < cfg.local_texts; ++c) {
        const std::size_t k = std::min(cfg.local_sentences, n);
        auto idx = draw_distinct(n, k, rng);
        out.locals.push_back(join_sentences(sentences, idx));
        out.local_sentences.push_back(std::move(idx));
    }
    return out;
}

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& image, std::size_t out_side) {
    if (image.rank() != 3 || image.dim(2) != 3)
        throw ShapeError("resize_bilinear: expected [H x W x 3], got " +
                         shape_str(image.shape()));
    if (out_side == 0) throw ContractError("resize_bilinear: zero output side");
    const std::size_t h = image.dim(0), w = image.dim(1);
    auto out = Tensor<T>::zeros({out_side, out_side, 3});
    auto src_axis = [](std::size_t o, std::size_t out_n, std::size_t in_n) {
        double s = (static_cast<double>(o) + 0.5) * static_cast<double>(in_n) /
                       static_cast<double>(out_n) -
                   0.5;
        s = std::clamp(s, 0.0, static_cast<double>(in_n - 1));
        const std::size_t lo = static_cast<std::size_t>(std::floor(s));
        const std::size_t hi = std::min(lo + 1, in_n - 1);
        return std::tuple<std::size_t, std::size_t, double>(lo, hi, s - static_cast<double>(lo));
    };
    for (std::size_t oy = 0; oy < out_side; ++oy) {
        const auto [y0, y1, fy] = src_axis(oy, out_side, h);
        for (std::size_t ox = 0; ox < out_side; ++ox) {
            const auto [x0, x1, fx] = src_axis(ox, out_side, w);
            for (std::size_t c = 0; c < 3; ++c) {
                const double v00 = static_cast<double>(image.data()[(y0 * w + x0) * 3 + c]);
                const double v01 = static_cast<double>(image.data()[(y0 * w + x1) * 3 + c]);
                const double v10 = static_cast<double>(image.data()[(y1 * w + x0) * 3 + c]);
                const double v11 = static_cast<double>(image.data()[(y1 * w + x1) * 3 + c]);
                const double top = v00 * (1 - fx) + v01 * fx;
                const double bot = v10 * (1 - fx) + v11 * fx;
                out.data()[(oy * out_side + ox) * 3 + c] =
                    static_cast<T>(top * (1 - fy) + bot * fy);
            }
        }
    }
    return out;
}

namespace {

template <typename T>
Tensor<T> extract_box(const Tensor<T>& image, const CropBox& box) {
    const std::size_t w = image.dim(1);
    auto out = Tensor<T>::zeros({box.h, box.w, 3});
    for (std::size_t y = 0; y < box.h; ++y)
        for (std::size_t x = 0; x < box.w; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                out.data()[(y * box.w + x) * 3 + c] =
                    image.data()[((box.y + y) * w + box.x + x) * 3 + c];
    return out;
}

template <typename T>
void flip_horizontal(Tensor<T>& image) {
    const std::size_t s = image.dim(0);
    for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s / 2; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                std::swap(image.data()[(y * s + x) * 3 + c],
                          image.data()[(y * s + s - 1 - x) * 3 + c]);
}

// One random resized crop: up to 10 area/aspect draws, then a centered box
// clipped to the aspect range.
template <typename T>
std::pair<Tensor<T>, CropBox> one_crop(const Tensor<T>& image, double scale_lo, double scale_hi,
                                       const CropConfig& cfg, std::size_t side, Rng& rng) {
    const std::size_t ih = image.dim(0), iw = image.dim(1);
    const double area = static_cast<double>(ih) * static_cast<double>(iw);
    CropBox box;
    bool placed = false;
    for (int attempt = 0; attempt < 10 && !placed; ++attempt) {
        const double frac = rng.uniform(scale_lo, scale_hi);
        const double aspect = rng.log_uniform(cfg.aspect_lo, cfg.aspect_hi);
        const double target = frac * area;
        const auto w = static_cast<std::size_t>(std::lround(std::sqrt(target * aspect)));
        const auto h = static_cast<std::size_t>(std::lround(std::sqrt(target / aspect)));
        if (w >= 1 && h >= 1 && w <= iw && h <= ih) {
            box.w = w;
            box.h = h;
            box.x = static_cast<std::size_t>(rng.uniform_int(iw - w + 1));
            box.y = static_cast<std::size_t>(rng.uniform_int(ih - h + 1));
            box.area_frac = frac;
            placed = true;
        }
    }
    if (!placed) {
        const double in_ratio = static_cast<double>(iw) / static_cast<double>(ih);
        if (in_ratio < cfg.aspect_lo) {
            box.w = iw;
            box.h = static_cast<std::size_t>(
                std::lround(static_cast<double>(iw) / cfg.aspect_lo));
        } else if (in_ratio > cfg.aspect_hi) {
            box.h = ih;
            box.w = static_cast<std::size_t>(
                std::lround(static_cast<double>(ih) * cfg.aspect_hi));
        } else {
            box.w = iw;
            box.h = ih;
        }
        box.x = (iw - box.w) / 2;
        box.y = (ih - box.h) / 2;
        box.area_frac = static_cast<double>(box.w) * static_cast<double>(box.h) / area;
    }
    auto crop = resize_bilinear(extract_box(image, box), side);
    box.flipped = rng.bernoulli(cfg.flip_p);
    if (box.flipped) flip_horizontal(crop);
    return {std::move(crop), box};
}

}  // namespace

template <typename T>
ImageCrops<T> sample_image_crops(const Tensor<T>& image, const CropConfig& cfg,
                                 std::size_t global_side, std::size_t local_side, Rng& rng) {
    if (image.rank() != 3 || image.dim(2) != 3)
        throw ShapeError("sample_image_crops: expected [H x W x 3], got " +
                         shape_str(image.shape()));
    ImageCrops<T> out;
    for (std::size_t i = 0; i < cfg.global_images; ++i) {
        auto [crop, box] =
            one_crop(image, cfg.global_scale_lo, cfg.global_scale_hi, cfg, global_side, rng);
        out.globals.push_back(std::move(crop));
        out.global_boxes.push_back(box);
    }
    for (std::size_t i = 0; i < cfg.local_images; ++i) {
        auto [crop, box] =
            one_crop(image, cfg.local_scale_lo, cfg.local_scale_hi, cfg, local_side, rng);
        out.locals.push_back(std::move(crop));
        out.local_boxes.push_back(box);
    }
    return out;
}

template <typename T>
CropBundle<T> make_crop_bundle(const Tensor<T>& image, const std::vector<std::string>& sentences,
                               const CropConfig& cfg, std::size_t global_side,
                               std::size_t local_side, std::uint64_t seed,
                               std::uint64_t sample_key) {
    Rng img_rng(mix_seed(seed, sample_key, kImageStream));
    Rng txt_rng(mix_seed(seed, sample_key, kTextStream));
    CropBundle<T> out;
    out.images = sample_image_crops(image, cfg, global_side, local_side, img_rng);
    out.texts = sample_text_crops(sentences, cfg, txt_rng);
    return out;
}

#define COSMOS_INSTANTIATE_AUGMENT(T)                                                       \
    template Tensor<T> resize_bilinear<T>(const Tensor<T>&, std::size_t);                   \
    template ImageCrops<T> sample_image_crops<T>(const Tensor<T>&, const CropConfig&,       \
                                                 std::size_t, std::size_t, Rng&);           \
    template CropBundle<T> make_crop_bundle<T>(const Tensor<T>&,                            \
                                               const std::vector<std::string>&,             \
                                               const CropConfig&, std::size_t, std::size_t, \
                                               std::uint64_t, std::uint64_t);

COSMOS_INSTANTIATE_AUGMENT(float)
COSMOS_INSTANTIATE_AUGMENT(double)

}  // namespace cosmos
