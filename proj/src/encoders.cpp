#include "cosmos/encoders.hpp"

#include <algorithm>
#include <cmath>

namespace cosmos {

template <typename T>
Tensor<T> patchify(const Tensor<T>& pixels, std::size_t patch) {
    if (pixels.rank() != 3 || pixels.dim(2) != 3)
        throw ShapeError("patchify: expected [S x S x 3] pixels, got " +
                         shape_str(pixels.shape()));
    const std::size_t s = pixels.dim(0);
    if (pixels.dim(1) != s)
        throw ShapeError("patchify: image must be square, got " + shape_str(pixels.shape()));
    if (patch == 0 || s % patch != 0)
        throw ShapeError("patchify: side " + std::to_string(s) + " not divisible by patch " +
                         std::to_string(patch));
    for (const T v : pixels.data())
        if (!(v >= T(-1e-6) && v <= T(1) + T(1e-6)))
            throw ContractError("patchify: pixel values must lie in [0,1]");
    const std::size_t g = s / patch;
    auto out = Tensor<T>::zeros({g * g, 3 * patch * patch});
    const std::size_t cols = 3 * patch * patch;
    for (std::size_t py = 0; py < g; ++py)
        for (std::size_t px = 0; px < g; ++px) {
            const std::size_t r = py * g + px;
            std::size_t c = 0;
            for (std::size_t y = 0; y < patch; ++y)
                for (std::size_t x = 0; x < patch; ++x)
                    for (std::size_t ch = 0; ch < 3; ++ch) {
                        const T v = pixels.data()[((py * patch + y) * s + px * patch + x) * 3 + ch];
                        out.data()[r * cols + c++] = (v - T(0.5)) / T(0.5);
                    }
        }
    return out;
}

std::vector<std::vector<std::pair<std::size_t, double>>> pos_interp_weights(std::size_t g,
                                                                            std::size_t l) {
    if (g == 0 || l == 0) throw ContractError("pos_interp_weights: empty grid");
    std::vector<std::vector<std::pair<std::size_t, double>>> mix(l * l);
    const double ratio = static_cast<double>(g) / static_cast<double>(l);
    for (std::size_t oy = 0; oy < l; ++oy)
        for (std::size_t ox = 0; ox < l; ++ox) {
            auto axis = [&](std::size_t o) {
                double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
                src = std::clamp(src, 0.0, static_cast<double>(g - 1));
                const std::size_t lo = static_cast<std::size_t>(std::floor(src));
                const std::size_t hi = std::min(lo + 1, g - 1);
                const double frac = src - static_cast<double>(lo);
                return std::tuple<std::size_t, std::size_t, double>(lo, hi, frac);
            };
            const auto [y0, y1, fy] = axis(oy);
            const auto [x0, x1, fx] = axis(ox);
            auto& row = mix[oy * l + ox];
            auto push = [&](std::size_t y, std::size_t x, double w) {
                if (w == 0.0) return;
                const std::size_t src = y * g + x;
                for (auto& [s, acc] : row)
                    if (s == src) {
                        acc += w;
                        return;
                    }
                row.emplace_back(src, w);
            };
            push(y0, x0, (1 - fy) * (1 - fx));
            push(y0, x1, (1 - fy) * fx);
            push(y1, x0, fy * (1 - fx));
            push(y1, x1, fy * fx);
        }
    return mix;
}

template <typename T>
EncodedImage<T> encode_image(const Tensor<T>& pixels, const ParameterStore<T>& store,
                             const ModelConfig& cfg) {
    if (pixels.rank() != 3)
        throw ShapeError("encode_image: expected [S x S x 3] pixels, got " +
                         shape_str(pixels.shape()));
    const std::size_t s = pixels.dim(0);
    if (s != cfg.vision.image_size && s != cfg.vision.local_size)
        throw ShapeError("encode_image: side " + std::to_string(s) +
                         " is neither the configured global (" +
                         std::to_string(cfg.vision.image_size) + ") nor local (" +
                         std::to_string(cfg.vision.local_size) + ") size");
    const std::size_t grid = s / cfg.vision.patch;
    const std::size_t p2 = grid * grid;

    auto patches = patchify(pixels, cfg.vision.patch);
    auto tok = linear(patches, store.get("visual.patch_embed.weight"),
                      store.get("visual.patch_embed.bias"));
    Tensor<T> pos;
    if (s == cfg.vision.image_size) {
        pos = store.get("visual.pos_grid");
    } else {
        pos = combine_rows(store.get("visual.pos_grid"),
                           pos_interp_weights(cfg.vision.grid(), grid));
    }
    tok = add(tok, pos);
    auto cls0 = reshape(add(store.get("visual.cls"), store.get("visual.pos_cls")),
                        {1, cfg.vision.width});
    auto x = concat_rows<T>({cls0, tok});
    for (std::size_t i = 0; i < cfg.vision.depth; ++i)
        x = transformer_block(
            x, block_view(store, "visual.blocks." + std::to_string(i), cfg.vision.heads), false);
    auto ln = layer_norm_view(store, "visual.ln_final");
    x = layer_norm(x, ln.gain, ln.bias, kLayerNormEps);
    auto y = matmul(x, store.get("visual.proj"));
    return {row(y, 0), slice_rows(y, 1, p2)};
}

template <typename T>
EncodedText<T> encode_text(std::span<const std::int32_t> ids, std::size_t eot_index,
                           const ParameterStore<T>& store, const ModelConfig& cfg) {
    if (eot_index >= cfg.text.max_len)
        throw ContractError("encode_text: eot index " + std::to_string(eot_index) +
                            " exceeds max length " + std::to_string(cfg.text.max_len));
    if (ids.size() <= eot_index)
        throw ContractError("encode_text: " + std::to_string(ids.size()) +
                            " ids but eot index " + std::to_string(eot_index));
    const std::size_t n = eot_index + 1;
    std::vector<std::int32_t> used(ids.begin(), ids.begin() + n);
    for (const std::int32_t id : used)
        if (id < 0 || static_cast<std::size_t>(id) >= cfg.text.vocab)
            throw ValidationError("encode_text: token id " + std::to_string(id) +
                                  " outside vocabulary of " + std::to_string(cfg.text.vocab));
    auto x = add(embedding_rows(store.get("text.token_embed"), used),
                 slice_rows(store.get("text.pos"), 0, n));
    for (std::size_t i = 0; i < cfg.text.depth; ++i)
        x = transformer_block(
            x, block_view(store, "text.blocks." + std::to_string(i), cfg.text.heads), true);
    auto ln = layer_norm_view(store, "text.ln_final");
    x = layer_norm(x, ln.gain, ln.bias, kLayerNormEps);
    auto y = matmul(x, store.get("text.proj"));
    return {row(y, eot_index), y, eot_index};
}

template <typename T>
CrossModalEmbed<T> cross_modal_image_embed(const Tensor<T>& cls, const Tensor<T>& word_tokens,
                                           const ParameterStore<T>& store,
                                           const ModelConfig& cfg) {
    if (cls.rank() != 1)
        throw ContractError("cross_modal_image_embed: cls must be rank 1, got " +
                            shape_str(cls.shape()));
    auto q = reshape(cls, {1, cls.dim(0)});
    auto res = cross_attention_block(q, word_tokens,
                                     fusion_view(store, "fusion.img", cfg.fusion_heads));
    return {add(reshape(res.out, {cls.dim(0)}), cls), res.weights};
}

template <typename T>
CrossModalEmbed<T> cross_modal_text_embed(const Tensor<T>& eot, const Tensor<T>& patch_tokens,
                                          const ParameterStore<T>& store, const ModelConfig& cfg) {
    if (eot.rank() != 1)
        throw ContractError("cross_modal_text_embed: eot must be rank 1, got " +
                            shape_str(eot.shape()));
    auto q = reshape(eot, {1, eot.dim(0)});
    auto res = cross_attention_block(q, patch_tokens,
                                     fusion_view(store, "fusion.txt", cfg.fusion_heads));
    return {add(reshape(res.out, {eot.dim(0)}), eot), res.weights};
}

#define COSMOS_INSTANTIATE_ENCODERS(T)                                                          \
    template Tensor<T> patchify<T>(const Tensor<T>&, std::size_t);                              \
    template EncodedImage<T> encode_image<T>(const Tensor<T>&, const ParameterStore<T>&,        \
                                             const ModelConfig&);                               \
    template EncodedText<T> encode_text<T>(std::span<const std::int32_t>, std::size_t,          \
                                           const ParameterStore<T>&, const ModelConfig&);       \
    template CrossModalEmbed<T> cross_modal_image_embed<T>(                                     \
        const Tensor<T>&, const Tensor<T>&, const ParameterStore<T>&, const ModelConfig&);      \
    template CrossModalEmbed<T> cross_modal_text_embed<T>(                                      \
        const Tensor<T>&, const Tensor<T>&, const ParameterStore<T>&, const ModelConfig&);

COSMOS_INSTANTIATE_ENCODERS(float)
COSMOS_INSTANTIATE_ENCODERS(double)

}  // namespace cosmos
