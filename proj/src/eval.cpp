#include "cosmos/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "cosmos/augment.hpp"
#include "cosmos/encoders.hpp"
#include "cosmos/error.hpp"
#include "cosmos/parallel.hpp"

namespace cosmos {

namespace {

using ordered_json = nlohmann::ordered_json;

// Copies a rank-1 embedding into row r of a value matrix, L2-normalized.
// A degenerate (near-zero) embedding becomes a zero row.
template <typename T>
void write_unit_row(Tensor<T>& matrix, std::size_t r, const Tensor<T>& embed) {
    const auto& v = embed.node()->value;
    const std::size_t d = matrix.cols();
    if (v.size() != d) throw ShapeError("write_unit_row: embedding width mismatch");
    double sq = 0.0;
    for (const T x : v) sq += static_cast<double>(x) * static_cast<double>(x);
    const double norm = std::sqrt(sq);
    auto& out = matrix.node()->value;
    for (std::size_t c = 0; c < d; ++c)
        out[r * d + c] = norm < 1e-12 ? T(0) : static_cast<T>(static_cast<double>(v[c]) / norm);
}

std::string joined_caption(const ManifestRecord& rec) {
    std::string text;
    for (const auto& c : rec.captions) {
        if (!text.empty()) text += ' ';
        text += c;
    }
    return text;
}

template <typename T>
Tensor<T> image_embed_raw(const ParameterStore<T>& params, const ModelConfig& cfg,
                          const Tensor<T>& image) {
    TapeScope<T> off;
    return encode_image(resize_bilinear(image, cfg.vision.image_size), params, cfg).cls;
}

template <typename T>
Tensor<T> text_embed_raw(const ParameterStore<T>& params, const ModelConfig& cfg,
                         const Vocab& vocab, const std::string& text) {
    TapeScope<T> off;
    const TokenizedText tok = encode_caption(text, vocab, cfg.text.max_len);
    return encode_text<T>(tok.ids, tok.eot_index, params, cfg).eot;
}

}  // namespace

template <typename T>
CorpusEmbeddings<T> embed_corpus(const ParameterStore<T>& params, const ModelConfig& cfg,
                                 const Dataset& dataset, const std::vector<Tensor<T>>& images,
                                 const Vocab& vocab) {
    const std::size_t n = dataset.records.size();
    if (n == 0) throw ContractError("embed_corpus: empty dataset");
    if (images.size() != n) throw ContractError("embed_corpus: image cache size mismatch");
    CorpusEmbeddings<T> out;
    out.images = Tensor<T>::zeros({n, cfg.embed_dim});
    out.texts = Tensor<T>::zeros({n, cfg.embed_dim});
    parallel_for(n, [&](std::size_t i) {
        write_unit_row(out.images, i, image_embed_raw(params, cfg, images[i]));
        write_unit_row(out.texts, i,
                       text_embed_raw(params, cfg, vocab, joined_caption(dataset.records[i])));
    });
    return out;
}

std::string RetrievalReport::to_json() const {
    ordered_json j;
    j["n"] = n;
    j["ks"] = ks;
    j["image_to_text"] = image_to_text;
    j["text_to_image"] = text_to_image;
    return j.dump();
}

template <typename T>
RetrievalReport retrieval(const Tensor<T>& image_embeds, const Tensor<T>& text_embeds,
                          std::vector<std::size_t> ks) {
    if (image_embeds.rank() != 2 || text_embeds.rank() != 2 ||
        image_embeds.shape() != text_embeds.shape())
        throw ShapeError("retrieval: embedding matrices must share an [n x d] shape");
    const std::size_t n = image_embeds.rows();
    if (n == 0) throw ContractError("retrieval: empty corpus");
    const std::size_t d = image_embeds.cols();
    RetrievalReport report;
    report.n = n;
    for (auto& k : ks) {
        if (k == 0) throw ContractError("retrieval: k must be positive");
        if (k > n) {
            std::cerr << "warning: recall@" << k << " clamped to corpus size " << n << "\n";
            k = n;
        }
    }
    report.ks = ks;

    const auto& iv = image_embeds.node()->value;
    const auto& tv = text_embeds.node()->value;
    std::vector<double> sims(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c)
                s += static_cast<double>(iv[i * d + c]) * static_cast<double>(tv[j * d + c]);
            sims[i * n + j] = s;
        }

    // rank of the true match: one plus the number of strictly better
    // candidates, plus equal-scored candidates with a lower index
    std::vector<std::size_t> rank_i2t(n), rank_t2i(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double truth = sims[i * n + i];
        std::size_t r = 1;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            if (sims[i * n + j] > truth || (sims[i * n + j] == truth && j < i)) ++r;
        }
        rank_i2t[i] = r;
    }
    for (std::size_t j = 0; j < n; ++j) {
        const double truth = sims[j * n + j];
        std::size_t r = 1;
        for (std::size_t i = 0; i < n; ++i) {
            if (i == j) continue;
            if (sims[i * n + j] > truth || (sims[i * n + j] == truth && i < j)) ++r;
        }
        rank_t2i[j] = r;
    }
    for (const std::size_t k : ks) {
        const auto hit = [&](const std::vector<std::size_t>& ranks) {
            std::size_t c = 0;
            for (const std::size_t r : ranks) c += r <= k ? 1 : 0;
            return static_cast<double>(c) / static_cast<double>(n);
        };
        report.image_to_text.push_back(hit(rank_i2t));
        report.text_to_image.push_back(hit(rank_t2i));
    }
    return report;
}

std::string ZeroShotReport::to_json() const {
    ordered_json j;
    j["n"] = n;
    j["correct"] = correct;
    j["accuracy"] = accuracy;
    return j.dump();
}

template <typename T>
ZeroShotReport zero_shot_classify(
    const ParameterStore<T>& params, const ModelConfig& cfg, const Dataset& dataset,
    const std::vector<Tensor<T>>& images, const Vocab& vocab,
    const std::vector<std::pair<std::string, std::vector<std::string>>>& class_prompts) {
    const std::size_t n = dataset.records.size();
    if (n == 0) throw ContractError("zero_shot_classify: empty dataset");
    if (images.size() != n) throw ContractError("zero_shot_classify: image cache size mismatch");
    if (class_prompts.empty()) throw ContractError("zero_shot_classify: no classes");

    const std::size_t d = cfg.embed_dim;
    std::map<std::string, std::size_t> class_of;
    std::vector<std::vector<double>> class_embed(class_prompts.size(),
                                                 std::vector<double>(d, 0.0));
    for (std::size_t c = 0; c < class_prompts.size(); ++c) {
        const auto& [name, prompts] = class_prompts[c];
        if (prompts.empty())
            throw ContractError("zero_shot_classify: class '" + name + "' has no prompts");
        if (!class_of.emplace(name, c).second)
            throw ContractError("zero_shot_classify: duplicate class '" + name + "'");
        auto& acc = class_embed[c];
        for (const auto& prompt : prompts) {
            const auto e = text_embed_raw(params, cfg, vocab, prompt);
            const auto& v = e.node()->value;
            double sq = 0.0;
            for (const T x : v) sq += static_cast<double>(x) * static_cast<double>(x);
            const double norm = std::sqrt(sq);
            if (norm < 1e-12) continue;
            for (std::size_t i = 0; i < d; ++i) acc[i] += static_cast<double>(v[i]) / norm;
        }
        for (auto& x : acc) x /= static_cast<double>(prompts.size());
        double sq = 0.0;
        for (const double x : acc) sq += x * x;
        const double norm = std::sqrt(sq);
        if (norm >= 1e-12)
            for (auto& x : acc) x /= norm;
    }

    std::vector<std::size_t> truth(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& label = dataset.records[i].label;
        const auto it = class_of.find(label);
        if (it == class_of.end())
            throw ValidationError("zero_shot_classify: record '" + dataset.records[i].id +
                                  "' has unknown label '" + label + "'");
        truth[i] = it->second;
    }

    std::vector<std::size_t> predicted(n);
    parallel_for(n, [&](std::size_t i) {
        const auto e = image_embed_raw(params, cfg, images[i]);
        const auto& v = e.node()->value;
        double sq = 0.0;
        for (const T x : v) sq += static_cast<double>(x) * static_cast<double>(x);
        const double norm = std::sqrt(sq);
        std::size_t best = 0;
        double best_score = -1e300;
        for (std::size_t c = 0; c < class_embed.size(); ++c) {
            double s = 0.0;
            if (norm >= 1e-12)
                for (std::size_t k = 0; k < d; ++k)
                    s += (static_cast<double>(v[k]) / norm) * class_embed[c][k];
            if (s > best_score) {
                best_score = s;
                best = c;
            }
        }
        predicted[i] = best;
    });

    ZeroShotReport report;
    report.n = n;
    for (std::size_t i = 0; i < n; ++i) report.correct += predicted[i] == truth[i] ? 1 : 0;
    report.accuracy = static_cast<double>(report.correct) / static_cast<double>(n);
    return report;
}

namespace {

std::vector<double> min_max(const std::vector<double>& raw) {
    const auto [lo_it, hi_it] = std::minmax_element(raw.begin(), raw.end());
    const double lo = *lo_it, hi = *hi_it;
    std::vector<double> out(raw.size(), 0.0);
    if (hi - lo < 1e-12) return out;
    for (std::size_t i = 0; i < raw.size(); ++i) out[i] = (raw[i] - lo) / (hi - lo);
    return out;
}

template <typename T>
std::vector<std::vector<double>> per_head(const Tensor<T>& w) {
    const std::size_t heads = w.shape()[0];
    const std::size_t k = w.shape()[2];
    std::vector<std::vector<double>> out(heads, std::vector<double>(k));
    const auto& v = w.node()->value;
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < k; ++i) out[h][i] = static_cast<double>(v[h * k + i]);
    return out;
}

std::vector<double> head_mean(const std::vector<std::vector<double>>& heads) {
    std::vector<double> out(heads.at(0).size(), 0.0);
    for (const auto& row : heads)
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += row[i];
    for (auto& x : out) x /= static_cast<double>(heads.size());
    return out;
}

}  // namespace

template <typename T>
AttentionMapResult attention_map(const ParameterStore<T>& params, const ModelConfig& cfg,
                                 const Vocab& vocab, const Tensor<T>& image,
                                 const std::string& caption) {
    TapeScope<T> off;
    const auto resized = resize_bilinear(image, cfg.vision.image_size);
    const auto enc = encode_image(resized, params, cfg);
    const TokenizedText tok = encode_caption(caption, vocab, cfg.text.max_len);
    const auto txt = encode_text<T>(tok.ids, tok.eot_index, params, cfg);

    AttentionMapResult r;
    r.grid = cfg.vision.grid();
    r.patch_heads = per_head(cross_modal_text_embed(txt.eot, enc.patch_tokens, params, cfg).attn);
    r.token_heads = per_head(cross_modal_image_embed(enc.cls, txt.word_tokens, params, cfg).attn);
    r.patch_raw = head_mean(r.patch_heads);
    r.token_raw = head_mean(r.token_heads);
    r.patch_norm = min_max(r.patch_raw);
    r.token_norm = min_max(r.token_raw);
    for (std::size_t i = 0; i <= tok.eot_index; ++i)
        r.tokens.push_back(vocab.token(tok.ids[i]));
    return r;
}

template <typename T>
void write_attention_files(const AttentionMapResult& result, const Tensor<T>& image,
                           const ModelConfig& cfg, const std::string& prefix) {
    const std::size_t side = cfg.vision.image_size;
    const std::size_t grid = result.grid;
    if (grid == 0 || result.patch_norm.size() != grid * grid)
        throw ContractError("write_attention_files: patch map does not fill the grid");
    const auto resized = resize_bilinear(image, side);
    const auto& base = resized.node()->value;

    Tensor<T> heat = Tensor<T>::zeros({side, side, 3});
    Tensor<T> overlay = Tensor<T>::zeros({side, side, 3});
    auto& hv = heat.node()->value;
    auto& ov = overlay.node()->value;
    for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) {
            const std::size_t py = y * grid / side;
            const std::size_t px = x * grid / side;
            const double w = result.patch_norm[py * grid + px];
            const std::size_t at = (y * side + x) * 3;
            for (std::size_t c = 0; c < 3; ++c) hv[at + c] = static_cast<T>(w);
            ov[at + 0] = static_cast<T>(0.5 * static_cast<double>(base[at + 0]) + 0.5 * w);
            ov[at + 1] = static_cast<T>(0.5 * static_cast<double>(base[at + 1]));
            ov[at + 2] = static_cast<T>(0.5 * static_cast<double>(base[at + 2]));
        }
    save_ppm(heat, prefix + "_heat.ppm");
    save_ppm(overlay, prefix + "_overlay.ppm");

    std::ofstream csv(prefix + "_tokens.csv", std::ios::trunc);
    if (!csv) throw IoError("cannot write " + prefix + "_tokens.csv");
    csv << "token,weight\n";
    for (std::size_t i = 0; i < result.tokens.size(); ++i) {
        char buf[40];
        std::snprintf(buf, sizeof(buf), "%.17g", result.token_norm[i]);
        csv << result.tokens[i] << "," << buf << "\n";
    }
    if (!csv) throw IoError("short write: " + prefix + "_tokens.csv");
}

#define COSMOS_INSTANTIATE_EVAL(T)                                                           \
    template CorpusEmbeddings<T> embed_corpus<T>(const ParameterStore<T>&, const ModelConfig&, \
                                                 const Dataset&, const std::vector<Tensor<T>>&, \
                                                 const Vocab&);                              \
    template RetrievalReport retrieval<T>(const Tensor<T>&, const Tensor<T>&,                \
                                          std::vector<std::size_t>);                         \
    template ZeroShotReport zero_shot_classify<T>(                                           \
        const ParameterStore<T>&, const ModelConfig&, const Dataset&,                        \
        const std::vector<Tensor<T>>&, const Vocab&,                                         \
        const std::vector<std::pair<std::string, std::vector<std::string>>>&);               \
    template AttentionMapResult attention_map<T>(const ParameterStore<T>&, const ModelConfig&, \
                                                 const Vocab&, const Tensor<T>&,             \
                                                 const std::string&);                        \
    template void write_attention_files<T>(const AttentionMapResult&, const Tensor<T>&,      \
                                           const ModelConfig&, const std::string&);

COSMOS_INSTANTIATE_EVAL(float)
COSMOS_INSTANTIATE_EVAL(double)

}  // namespace cosmos
