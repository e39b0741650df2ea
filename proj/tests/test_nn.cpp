#include <cmath>
#include <string>
#include <vector>

#include <doctest.h>

#include "cosmos/config.hpp"
#include "cosmos/error.hpp"
#include "cosmos/nn.hpp"
#include "cosmos/rng.hpp"
#include "cosmos/tensor.hpp"

using namespace cosmos;

namespace {

Tensor<double> rand_tensor(Rng& rng, Shape shape, double lo = -0.5, double hi = 0.5) {
    auto t = Tensor<double>::zeros(std::move(shape));
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

AttentionView<double> rand_attention(Rng& rng, std::size_t d, std::size_t heads) {
    AttentionView<double> p;
    p.q_w = rand_tensor(rng, {d, d});
    p.q_b = rand_tensor(rng, {d});
    p.k_w = rand_tensor(rng, {d, d});
    p.k_b = rand_tensor(rng, {d});
    p.v_w = rand_tensor(rng, {d, d});
    p.v_b = rand_tensor(rng, {d});
    p.out_w = rand_tensor(rng, {d, d});
    p.out_b = rand_tensor(rng, {d});
    p.heads = heads;
    return p;
}

// Plain-loop attention reference: per head, scaled dot product softmax over
// keys, then the concatenated readout through the output projection.
std::vector<double> naive_attention(const std::vector<double>& x, std::size_t L, std::size_t d,
                                    const AttentionView<double>& p, bool causal) {
    const std::size_t H = p.heads, hd = d / H;
    auto apply = [&](const Tensor<double>& w, const Tensor<double>& b, std::size_t i,
                     std::size_t j) {
        double s = b.data()[j];
        for (std::size_t k = 0; k < d; ++k) s += x[i * d + k] * w.data()[k * d + j];
        return s;
    };
    std::vector<double> q(L * d), k(L * d), v(L * d), merged(L * d), out(L * d);
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            q[i * d + j] = apply(p.q_w, p.q_b, i, j);
            k[i * d + j] = apply(p.k_w, p.k_b, i, j);
            v[i * d + j] = apply(p.v_w, p.v_b, i, j);
        }
    for (std::size_t h = 0; h < H; ++h)
        for (std::size_t i = 0; i < L; ++i) {
            std::vector<double> scores(L, -1e300);
            const std::size_t limit = causal ? i + 1 : L;
            double mx = -1e300;
            for (std::size_t j = 0; j < limit; ++j) {
                double s = 0;
                for (std::size_t c = 0; c < hd; ++c)
                    s += q[i * d + h * hd + c] * k[j * d + h * hd + c];
                scores[j] = s / std::sqrt(static_cast<double>(hd));
                mx = std::max(mx, scores[j]);
            }
            double z = 0;
            for (std::size_t j = 0; j < limit; ++j) z += std::exp(scores[j] - mx);
            for (std::size_t c = 0; c < hd; ++c) {
                double acc = 0;
                for (std::size_t j = 0; j < limit; ++j)
                    acc += std::exp(scores[j] - mx) / z * v[j * d + h * hd + c];
                merged[i * d + h * hd + c] = acc;
            }
        }
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            double s = p.out_b.data()[j];
            for (std::size_t c = 0; c < d; ++c) s += merged[i * d + c] * p.out_w.data()[c * d + j];
            out[i * d + j] = s;
        }
    return out;
}

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

}  // namespace

TEST_CASE("parameter store preserves insertion order and rejects duplicates") {
    ParameterStore<double> s;
    s.add("b", Tensor<double>::zeros({2}));
    s.add("a", Tensor<double>::zeros({2}));
    REQUIRE(s.names().size() == 2);
    CHECK(s.names()[0] == "b");
    CHECK(s.names()[1] == "a");
    CHECK_THROWS_AS(s.add("a", Tensor<double>::zeros({2})), ContractError);
    CHECK_THROWS_AS(s.get("missing"), ContractError);
}

TEST_CASE("self attention over one token is the projected value row") {
    Rng rng(41);
    const std::size_t d = 6;
    auto p = rand_attention(rng, d, 2);
    auto x = rand_tensor(rng, {1, d});
    auto y = self_attention(x, p, false);
    auto ref = naive_attention(x.data(), 1, d, p, false);
    for (std::size_t j = 0; j < d; ++j)
        CHECK(y.at(0, j) == doctest::Approx(ref[j]).epsilon(1e-12));
}

TEST_CASE("self attention matches the plain-loop reference") {
    Rng rng(43);
    const std::size_t d = 8, L = 3;
    auto p = rand_attention(rng, d, 2);
    auto x = rand_tensor(rng, {L, d});
    for (bool causal : {false, true}) {
        auto y = self_attention(x, p, causal);
        auto ref = naive_attention(x.data(), L, d, p, causal);
        for (std::size_t i = 0; i < L * d; ++i)
            CHECK(y.data()[i] == doctest::Approx(ref[i]).epsilon(1e-5));
    }
}

TEST_CASE("causal first position is unaffected by later tokens") {
    Rng rng(47);
    const std::size_t d = 8;
    auto p = rand_attention(rng, d, 2);
    auto x = rand_tensor(rng, {4, d});
    auto full = self_attention(x, p, true);
    auto head = self_attention(slice_rows(x, 0, 1), p, true);
    for (std::size_t j = 0; j < d; ++j)
        CHECK(full.at(0, j) == doctest::Approx(head.at(0, j)).epsilon(1e-12));
}

TEST_CASE("cross attention with a single key weights it fully") {
    Rng rng(53);
    const std::size_t d = 8;
    auto p = rand_attention(rng, d, 2);
    auto q = rand_tensor(rng, {1, d});
    auto kv = rand_tensor(rng, {1, d});
    auto r = cross_attention(q, kv, p);
    REQUIRE(r.weights.shape() == Shape{2, 1, 1});
    CHECK(r.weights.data()[0] == 1.0);
    CHECK(r.weights.data()[1] == 1.0);
}

TEST_CASE("cross attention weight rows sum to one per head and query") {
    Rng rng(59);
    const std::size_t d = 8, Q = 2, K = 5;
    auto p = rand_attention(rng, d, 4);
    auto q = rand_tensor(rng, {Q, d});
    auto kv = rand_tensor(rng, {K, d});
    auto r = cross_attention(q, kv, p);
    for (std::size_t h = 0; h < 4; ++h)
        for (std::size_t i = 0; i < Q; ++i) {
            double sum = 0;
            for (std::size_t j = 0; j < K; ++j) sum += r.weights.data()[(h * Q + i) * K + j];
            CHECK(std::abs(sum - 1.0) < 1e-6);
        }
}

TEST_CASE("cross attention is invariant to duplicated key/value rows") {
    Rng rng(61);
    const std::size_t d = 8, K = 3;
    auto p = rand_attention(rng, d, 2);
    auto q = rand_tensor(rng, {1, d});
    auto kv = rand_tensor(rng, {K, d});
    auto doubled = concat_rows<double>({kv, kv});
    auto a = cross_attention(q, kv, p);
    auto b = cross_attention(q, doubled, p);
    for (std::size_t j = 0; j < d; ++j)
        CHECK(a.out.at(0, j) == doctest::Approx(b.out.at(0, j)).epsilon(1e-10));
}

TEST_CASE("transformer block with zero projections is the identity") {
    Rng rng(67);
    const std::size_t d = 8;
    BlockView<double> p;
    p.ln1.gain = rand_tensor(rng, {d}, 0.5, 1.5);
    p.ln1.bias = rand_tensor(rng, {d});
    p.ln2.gain = rand_tensor(rng, {d}, 0.5, 1.5);
    p.ln2.bias = rand_tensor(rng, {d});
    p.attn = rand_attention(rng, d, 2);
    p.attn.out_w = Tensor<double>::zeros({d, d});
    p.attn.out_b = Tensor<double>::zeros({d});
    p.fc1_w = rand_tensor(rng, {d, 4 * d});
    p.fc1_b = rand_tensor(rng, {4 * d});
    p.fc2_w = Tensor<double>::zeros({4 * d, d});
    p.fc2_b = Tensor<double>::zeros({d});
    auto x = rand_tensor(rng, {3, d});
    auto y = transformer_block(x, p, false);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("init_params is deterministic and seed sensitive") {
    auto cfg = tiny_model();
    auto a = init_params<double>(cfg, 7, 0.07);
    auto b = init_params<double>(cfg, 7, 0.07);
    auto c = init_params<double>(cfg, 8, 0.07);
    REQUIRE(a.names() == b.names());
    REQUIRE(a.names() == c.names());
    bool any_diff = false;
    for (const auto& name : a.names()) {
        const auto& va = a.get(name).data();
        const auto& vb = b.get(name).data();
        REQUIRE(va.size() == vb.size());
        for (std::size_t i = 0; i < va.size(); ++i) CHECK(va[i] == vb[i]);
        const auto& vc = c.get(name).data();
        for (std::size_t i = 0; i < va.size(); ++i)
            if (va[i] != vc[i]) any_diff = true;
    }
    CHECK(any_diff);
}

TEST_CASE("init_params weight spread matches the truncated normal") {
    ModelConfig cfg;
    cfg.vision.width = 64;
    cfg.vision.depth = 2;
    cfg.text.width = 64;
    cfg.text.depth = 2;
    auto s = init_params<double>(cfg, 11, 0.07);
    double sum = 0, sq = 0;
    std::size_t n = 0;
    for (const auto& name : s.names()) {
        if (name.find(".mlp.fc1.weight") == std::string::npos) continue;
        for (double v : s.get(name).data()) {
            CHECK(std::abs(v) <= 0.04 + 1e-12);
            sum += v;
            sq += v * v;
            ++n;
        }
    }
    REQUIRE(n >= 10000);
    const double mean = sum / static_cast<double>(n);
    const double sd = std::sqrt(sq / static_cast<double>(n) - mean * mean);
    CHECK(sd > 0.016);
    CHECK(sd < 0.024);
}

TEST_CASE("init_params zeroes biases, ones gains, zeroes fusion readout") {
    auto s = init_params<double>(tiny_model(), 3, 0.07);
    for (const auto& name : s.names()) {
        const auto& v = s.get(name).data();
        if (name.size() > 5 && name.compare(name.size() - 5, 5, ".bias") == 0)
            for (double x : v) CHECK(x == 0.0);
        if (name.size() > 5 && name.compare(name.size() - 5, 5, ".gain") == 0)
            for (double x : v) CHECK(x == 1.0);
    }
    for (double x : s.get("fusion.img.attn.out.weight").data()) CHECK(x == 0.0);
    for (double x : s.get("fusion.txt.attn.out.weight").data()) CHECK(x == 0.0);
    CHECK(s.get("temperature").data()[0] ==
          doctest::Approx(std::log(1.0 / 0.07)).epsilon(1e-12));
}

TEST_CASE("teacher copies the encoder subset without fusion or temperature") {
    auto s = init_params<double>(tiny_model(), 5, 0.07);
    auto t = make_teacher(s);
    CHECK(t.size() > 0);
    for (const auto& name : t.names()) {
        CHECK(name.rfind("fusion.", 0) != 0);
        CHECK(name != "temperature");
        const auto& sv = s.get(name).data();
        const auto& tv = t.get(name).data();
        REQUIRE(sv.size() == tv.size());
        for (std::size_t i = 0; i < sv.size(); ++i) CHECK(sv[i] == tv[i]);
        CHECK_FALSE(t.get(name).requires_grad());
    }
    std::size_t expected = 0;
    for (const auto& name : s.names())
        if (is_teacher_param(name)) ++expected;
    CHECK(t.size() == expected);
}

TEST_CASE("decay exemptions cover gains, biases and the temperature") {
    CHECK(decays("visual.blocks.0.attn.q.weight"));
    CHECK(decays("text.proj"));
    CHECK_FALSE(decays("visual.blocks.0.ln1.gain"));
    CHECK_FALSE(decays("visual.blocks.0.attn.q.bias"));
    CHECK_FALSE(decays("temperature"));
}
