#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <doctest.h>

#include "cosmos/config.hpp"
#include "cosmos/encoders.hpp"
#include "cosmos/error.hpp"
#include "cosmos/nn.hpp"
#include "cosmos/rng.hpp"
#include "cosmos/tensor.hpp"

using namespace cosmos;

namespace {

ModelConfig tiny_model() {
    ModelConfig cfg;
    cfg.vision.image_size = 16;
    cfg.vision.local_size = 8;
    cfg.vision.patch = 8;
    cfg.vision.width = 8;
    cfg.vision.depth = 2;
    cfg.vision.heads = 2;
    cfg.text.vocab = 32;
    cfg.text.max_len = 16;
    cfg.text.width = 8;
    cfg.text.depth = 2;
    cfg.text.heads = 2;
    cfg.embed_dim = 8;
    cfg.fusion_heads = 2;
    return cfg;
}

Tensor<double> rand_image(Rng& rng, std::size_t side) {
    auto img = Tensor<double>::zeros({side, side, 3});
    for (auto& v : img.data()) v = rng.uniform();
    return img;
}

}  // namespace

TEST_CASE("patchify splits a 16x16 image into four 192-wide rows") {
    Rng rng(3);
    auto img = rand_image(rng, 16);
    auto p = patchify(img, 8);
    REQUIRE(p.rows() == 4);
    REQUIRE(p.cols() == 192);
    // Patch row 3 is the bottom-right patch; its first entry is pixel (8,8,R)
    // rescaled from [0,1] to [-1,1].
    const double expect = (img.data()[(8 * 16 + 8) * 3] - 0.5) / 0.5;
    CHECK(p.at(3, 0) == doctest::Approx(expect).epsilon(1e-12));
    // Within a patch the layout runs y, then x, then channel.
    const double expect2 = (img.data()[(0 * 16 + 1) * 3 + 2] - 0.5) / 0.5;
    CHECK(p.at(0, 5) == doctest::Approx(expect2).epsilon(1e-12));
}

TEST_CASE("patchify validates shape, divisibility and pixel range") {
    CHECK_THROWS_AS(patchify(Tensor<double>::zeros({16, 8, 3}), 8), ShapeError);
    CHECK_THROWS_AS(patchify(Tensor<double>::zeros({12, 12, 3}), 8), ShapeError);
    auto bad = Tensor<double>::zeros({8, 8, 3});
    bad.data()[0] = 1.5;
    CHECK_THROWS_AS(patchify(bad, 8), ContractError);
}

TEST_CASE("position interpolation is the identity on equal grids") {
    auto mix = pos_interp_weights(4, 4);
    REQUIRE(mix.size() == 16);
    for (std::size_t i = 0; i < 16; ++i) {
        REQUIRE(mix[i].size() == 1);
        CHECK(mix[i][0].first == i);
        CHECK(mix[i][0].second == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("position interpolation rows are convex combinations") {
    auto mix = pos_interp_weights(4, 2);
    REQUIRE(mix.size() == 4);
    for (const auto& row : mix) {
        double sum = 0;
        for (const auto& [src, w] : row) {
            CHECK(src < 16);
            CHECK(w > 0.0);
            sum += w;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("image encoding accepts global and local sides only") {
    auto cfg = tiny_model();
    auto store = init_params<double>(cfg, 7, 0.07);
    Rng rng(5);
    auto g = encode_image(rand_image(rng, 16), store, cfg);
    CHECK(g.cls.dim(0) == cfg.embed_dim);
    CHECK(g.patch_tokens.rows() == 4);
    auto l = encode_image(rand_image(rng, 8), store, cfg);
    CHECK(l.patch_tokens.rows() == 1);
    CHECK_THROWS_AS(encode_image(rand_image(rng, 12), store, cfg), ShapeError);
}

TEST_CASE("image encoding is permutation equivariant with zeroed positions") {
    auto cfg = tiny_model();
    auto store = init_params<double>(cfg, 9, 0.07);
    for (auto& v : store.get("visual.pos_grid").data()) v = 0.0;
    Rng rng(13);
    auto img = rand_image(rng, 16);
    // Swap the two top patches by swapping 8x8 pixel blocks.
    auto swapped = img.clone();
    for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                std::swap(swapped.data()[(y * 16 + x) * 3 + c],
                          swapped.data()[(y * 16 + x + 8) * 3 + c]);
    auto a = encode_image(img, store, cfg);
    auto b = encode_image(swapped, store, cfg);
    for (std::size_t j = 0; j < cfg.embed_dim; ++j)
        CHECK(a.cls.data()[j] == doctest::Approx(b.cls.data()[j]).epsilon(1e-9));
    for (std::size_t j = 0; j < cfg.embed_dim; ++j) {
        CHECK(a.patch_tokens.at(0, j) == doctest::Approx(b.patch_tokens.at(1, j)).epsilon(1e-9));
        CHECK(a.patch_tokens.at(1, j) == doctest::Approx(b.patch_tokens.at(0, j)).epsilon(1e-9));
        CHECK(a.patch_tokens.at(2, j) == doctest::Approx(b.patch_tokens.at(2, j)).epsilon(1e-9));
    }
}

TEST_CASE("text encoding ignores ids after the eot position") {
    auto cfg = tiny_model();
    auto store = init_params<double>(cfg, 11, 0.07);
    std::vector<std::int32_t> a = {1, 5, 9, 2, 0, 0, 0, 0};
    std::vector<std::int32_t> b = {1, 5, 9, 2, 7, 7, 7, 7};
    auto ea = encode_text<double>(a, 3, store, cfg);
    auto eb = encode_text<double>(b, 3, store, cfg);
    REQUIRE(ea.word_tokens.rows() == 4);
    for (std::size_t i = 0; i < ea.word_tokens.numel(); ++i)
        CHECK(ea.word_tokens.data()[i] == eb.word_tokens.data()[i]);
    for (std::size_t j = 0; j < cfg.embed_dim; ++j)
        CHECK(ea.eot.data()[j] == eb.eot.data()[j]);
}

TEST_CASE("text encoding validates the eot index and token ids") {
    auto cfg = tiny_model();
    auto store = init_params<double>(cfg, 11, 0.07);
    std::vector<std::int32_t> ids = {1, 5, 2};
    CHECK_THROWS_AS(encode_text<double>(ids, 16, store, cfg), ContractError);
    CHECK_THROWS_AS(encode_text<double>(ids, 3, store, cfg), ContractError);
    std::vector<std::int32_t> bad = {1, 99, 2};
    CHECK_THROWS_AS(encode_text<double>(bad, 2, store, cfg), ValidationError);
}

TEST_CASE("fresh fusion blocks leave cls and eot unchanged") {
    auto cfg = tiny_model();
    auto store = init_params<double>(cfg, 17, 0.07);
    Rng rng(19);
    auto enc = encode_image(rand_image(rng, 16), store, cfg);
    std::vector<std::int32_t> ids = {1, 4, 6, 2};
    auto txt = encode_text<double>(ids, 3, store, cfg);
    auto hi = cross_modal_image_embed(enc.cls, txt.word_tokens, store, cfg);
    auto ht = cross_modal_text_embed(txt.eot, enc.patch_tokens, store, cfg);
    for (std::size_t j = 0; j < cfg.embed_dim; ++j) {
        CHECK(hi.embed.data()[j] == enc.cls.data()[j]);
        CHECK(ht.embed.data()[j] == txt.eot.data()[j]);
    }
}

TEST_CASE("fusion attention weights are a distribution and sit off the graph") {
    auto cfg = tiny_model();
    auto store = init_params<double>(cfg, 23, 0.07);
    for (auto& v : store.get("fusion.img.attn.out.weight").data()) v = 0.01;
    Rng rng(29);
    auto enc = encode_image(rand_image(rng, 16), store, cfg);
    std::vector<std::int32_t> ids = {1, 4, 6, 8, 2};
    auto txt = encode_text<double>(ids, 4, store, cfg);
    Tape<double> tape;
    {
        TapeScope<double> scope(tape);
        auto hi = cross_modal_image_embed(enc.cls, txt.word_tokens, store, cfg);
        REQUIRE(hi.attn.shape() == Shape{cfg.fusion_heads, 1, 5});
        for (std::size_t h = 0; h < cfg.fusion_heads; ++h) {
            double sum = 0;
            for (std::size_t k = 0; k < 5; ++k) sum += hi.attn.data()[h * 5 + k];
            CHECK(std::abs(sum - 1.0) < 1e-6);
        }
        CHECK_FALSE(hi.attn.requires_grad());
    }
}

TEST_CASE("encoder outputs ignore fusion parameter perturbations") {
    auto cfg = tiny_model();
    auto store = init_params<double>(cfg, 31, 0.07);
    Rng rng(37);
    auto img = rand_image(rng, 16);
    std::vector<std::int32_t> ids = {1, 3, 2};
    auto cls_before = encode_image(img, store, cfg).cls;
    auto eot_before = encode_text<double>(ids, 2, store, cfg).eot;
    for (const auto& name : store.names())
        if (name.rfind("fusion.", 0) == 0)
            for (auto& v : store.get(name).data()) v += 0.37;
    auto cls_after = encode_image(img, store, cfg).cls;
    auto eot_after = encode_text<double>(ids, 2, store, cfg).eot;
    for (std::size_t j = 0; j < cfg.embed_dim; ++j) {
        CHECK(cls_before.data()[j] == cls_after.data()[j]);
        CHECK(eot_before.data()[j] == eot_after.data()[j]);
    }
}

TEST_CASE("encoding is deterministic across repeated calls") {
    auto cfg = tiny_model();
    auto store = init_params<double>(cfg, 41, 0.07);
    Rng rng(43);
    auto img = rand_image(rng, 16);
    auto a = encode_image(img, store, cfg);
    auto b = encode_image(img, store, cfg);
    for (std::size_t j = 0; j < cfg.embed_dim; ++j) CHECK(a.cls.data()[j] == b.cls.data()[j]);
}
