#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <doctest.h>

#include "cosmos/config.hpp"
#include "cosmos/data.hpp"
#include "cosmos/error.hpp"
#include "cosmos/nn.hpp"
#include "cosmos/rng.hpp"
#include "cosmos/tensor.hpp"
#include "cosmos/tokenizer.hpp"
#include "cosmos/trainer.hpp"

using namespace cosmos;
namespace fs = std::filesystem;

namespace {

RunConfig micro_config() {
    RunConfig cfg;
    cfg.model.vision.image_size = 16;
    cfg.model.vision.local_size = 8;
    cfg.model.vision.patch = 8;
    cfg.model.vision.width = 8;
    cfg.model.vision.depth = 1;
    cfg.model.vision.heads = 2;
    cfg.model.text.vocab = 64;
    cfg.model.text.max_len = 16;
    cfg.model.text.width = 8;
    cfg.model.text.depth = 1;
    cfg.model.text.heads = 2;
    cfg.model.embed_dim = 8;
    cfg.model.fusion_heads = 2;
    cfg.crops.global_images = 1;
    cfg.crops.local_images = 1;
    cfg.crops.global_texts = 1;
    cfg.crops.local_texts = 1;
    cfg.batch_size = 2;
    cfg.steps = 10;
    cfg.optim.warmup = 2;
    cfg.dtype = "f64";
    cfg.seed = 7;
    return cfg;
}

struct Fixture {
    RunConfig cfg;
    Dataset dataset;
    std::vector<Tensor<double>> images;
    Vocab vocab;
    Batch<double> batch;
};

Fixture micro_fixture(std::uint64_t seed = 7) {
    Fixture f;
    f.cfg = micro_config();
    f.cfg.seed = seed;
    f.dataset.records.push_back(
        {"0", "", {"a small red circle sits on the left. the background is dark."}, ""});
    f.dataset.records.push_back(
        {"1", "", {"one blue square floats at the top. the background is light."}, ""});
    f.dataset.records.push_back(
        {"2", "", {"a yellow triangle rests at the bottom. the background is gray."}, ""});
    f.dataset.records.push_back(
        {"3", "", {"two green squares stand on the right. the background is rough."}, ""});
    Rng rng(splitmix64(seed));
    for (std::size_t i = 0; i < f.dataset.records.size(); ++i) {
        auto img = Tensor<double>::zeros({24, 24, 3});
        for (auto& v : img.data()) v = rng.uniform();
        f.images.push_back(std::move(img));
    }
    std::vector<std::string> corpus;
    for (const auto& rec : f.dataset.records)
        for (const auto& cap : rec.captions) corpus.push_back(cap);
    f.vocab = Vocab::build(corpus, f.cfg.model.text.vocab);
    f.batch = prepare_batch(f.dataset, f.images, {0, 1, 2, 3}, f.vocab, f.cfg.crops, f.cfg.model,
                            f.cfg.seed, 0);
    return f;
}

bool stores_equal(const ParameterStore<double>& a, const ParameterStore<double>& b) {
    if (a.names() != b.names()) return false;
    for (const auto& name : a.names()) {
        const auto& va = a.get(name).data();
        const auto& vb = b.get(name).data();
        if (va.size() != vb.size()) return false;
        for (std::size_t i = 0; i < va.size(); ++i)
            if (va[i] != vb[i]) return false;
    }
    return true;
}

ParameterStore<double> snapshot(const ParameterStore<double>& s) {
    ParameterStore<double> out;
    for (const auto& name : s.names()) out.add(name, s.get(name).clone());
    return out;
}

fs::path temp_file(const std::string& tag) {
    auto dir = fs::temp_directory_path() / "cosmos_test_trainer";
    fs::create_directories(dir);
    return dir / tag;
}

}  // namespace

TEST_CASE("the learning rate ramps, peaks and decays to zero") {
    OptimConfig cfg;
    cfg.lr = 5e-4;
    cfg.warmup = 100;
    CHECK(lr_at(cfg, 300, 0) == 0.0);
    CHECK(lr_at(cfg, 300, 50) == doctest::Approx(2.5e-4).epsilon(1e-12));
    CHECK(lr_at(cfg, 300, 100) == doctest::Approx(5e-4).epsilon(1e-12));
    CHECK(lr_at(cfg, 300, 200) == doctest::Approx(5e-4 * 0.5 * (1.0 + std::cos(M_PI * 0.5)))
                                      .epsilon(1e-12));
    CHECK(lr_at(cfg, 300, 300) == doctest::Approx(0.0).epsilon(1e-15));
    for (std::uint64_t u = 1; u <= 100; ++u) CHECK(lr_at(cfg, 300, u) > lr_at(cfg, 300, u - 1));
    CHECK_THROWS_AS(lr_at(cfg, 300, 301), ContractError);
}

TEST_CASE("adamw leaves parameters alone for zero gradients without decay") {
    ParameterStore<double> s;
    s.add("w.weight", Tensor<double>::from({2}, {1.5, -2.0}));
    AdamMoments<double> m;
    m.m = {{0.0, 0.0}};
    m.v = {{0.0, 0.0}};
    OptimConfig cfg;
    cfg.weight_decay = 0.0;
    s.get("w.weight").node()->grad = {0.0, 0.0};
    adamw_step(s, m, 0.1, cfg, 1);
    CHECK(s.get("w.weight").data()[0] == 1.5);
    CHECK(s.get("w.weight").data()[1] == -2.0);
}

TEST_CASE("adamw takes a bias-corrected unit step") {
    ParameterStore<double> s;
    s.add("w.weight", Tensor<double>::from({1}, {1.0}));
    AdamMoments<double> m;
    m.m = {{0.0}};
    m.v = {{0.0}};
    OptimConfig cfg;
    cfg.weight_decay = 0.0;
    s.get("w.weight").node()->grad = {1.0};
    adamw_step(s, m, 0.1, cfg, 1);
    const double expect = 1.0 - 0.1 * 1.0 / (1.0 + cfg.adam_eps);
    CHECK(s.get("w.weight").data()[0] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("adamw matches a two-step hand oracle with decay") {
    ParameterStore<double> s;
    s.add("w.weight", Tensor<double>::from({1}, {0.8}));
    s.add("w.bias", Tensor<double>::from({1}, {0.3}));
    AdamMoments<double> m;
    m.m = {{0.0}, {0.0}};
    m.v = {{0.0}, {0.0}};
    OptimConfig cfg;
    const double lr = 0.05;
    double w = 0.8, b = 0.3;
    double mw = 0, vw = 0, mb = 0, vb = 0;
    const std::vector<double> gw = {0.4, -0.2}, gb = {1.0, 0.5};
    for (std::uint64_t t = 1; t <= 2; ++t) {
        s.get("w.weight").node()->grad = {gw[t - 1]};
        s.get("w.bias").node()->grad = {gb[t - 1]};
        adamw_step(s, m, lr, cfg, t);
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
        mw = cfg.beta1 * mw + (1 - cfg.beta1) * gw[t - 1];
        vw = cfg.beta2 * vw + (1 - cfg.beta2) * gw[t - 1] * gw[t - 1];
        w *= 1.0 - lr * cfg.weight_decay;
        w -= lr * (mw / bc1) / (std::sqrt(vw / bc2) + cfg.adam_eps);
        mb = cfg.beta1 * mb + (1 - cfg.beta1) * gb[t - 1];
        vb = cfg.beta2 * vb + (1 - cfg.beta2) * gb[t - 1] * gb[t - 1];
        b -= lr * (mb / bc1) / (std::sqrt(vb / bc2) + cfg.adam_eps);
        CHECK(s.get("w.weight").data()[0] == doctest::Approx(w).epsilon(1e-15));
        CHECK(s.get("w.bias").data()[0] == doctest::Approx(b).epsilon(1e-15));
    }
}

TEST_CASE("adamw applies decoupled decay on zero gradients") {
    ParameterStore<double> s;
    s.add("w.weight", Tensor<double>::from({1}, {2.0}));
    AdamMoments<double> m;
    m.m = {{0.0}};
    m.v = {{0.0}};
    OptimConfig cfg;
    cfg.weight_decay = 0.5;
    s.get("w.weight").node()->grad = {0.0};
    adamw_step(s, m, 0.1, cfg, 1);
    CHECK(s.get("w.weight").data()[0] == doctest::Approx(2.0 * (1.0 - 0.1 * 0.5)).epsilon(1e-15));
}

TEST_CASE("adamw rejects non-finite gradients and zero step counts") {
    ParameterStore<double> s;
    s.add("w.weight", Tensor<double>::from({1}, {1.0}));
    AdamMoments<double> m;
    m.m = {{0.0}};
    m.v = {{0.0}};
    OptimConfig cfg;
    CHECK_THROWS_AS(adamw_step(s, m, 0.1, cfg, 0), ContractError);
    s.get("w.weight").node()->grad = {std::nan("")};
    CHECK_THROWS_AS(adamw_step(s, m, 0.1, cfg, 1), DivergenceError);
}

TEST_CASE("the teacher average follows its closed form") {
    ParameterStore<double> teacher;
    teacher.add("visual.proj", Tensor<double>::from({2}, {1.0, 2.0}));
    ParameterStore<double> student;
    student.add("visual.proj", Tensor<double>::from({2}, {0.0, 4.0}));
    student.add("temperature", Tensor<double>::scalar(2.66));

    auto t = snapshot(teacher);
    ema_update(t, student, 0.0);
    CHECK(t.get("visual.proj").data()[0] == 0.0);
    CHECK(t.get("visual.proj").data()[1] == 4.0);

    t = snapshot(teacher);
    ema_update(t, student, 1.0);
    CHECK(t.get("visual.proj").data()[0] == 1.0);
    CHECK(t.get("visual.proj").data()[1] == 2.0);

    t = snapshot(teacher);
    ema_update(t, student, 0.5);
    CHECK(t.get("visual.proj").data()[0] == 0.5);
    CHECK(t.get("visual.proj").data()[1] == 3.0);

    CHECK_THROWS_AS(ema_update(t, student, 1.5), ContractError);
    ParameterStore<double> orphan;
    orphan.add("missing", Tensor<double>::zeros({2}));
    CHECK_THROWS_AS(ema_update(orphan, student, 0.5), ContractError);
}

TEST_CASE("a fresh train state pairs the teacher with the student") {
    auto cfg = micro_config();
    auto state = init_train_state<double>(cfg);
    CHECK(state.step == 0);
    CHECK(state.seed == cfg.seed);
    REQUIRE(state.moments.m.size() == state.student.names().size());
    for (const auto& name : state.teacher.names()) {
        const auto& sv = state.student.get(name).data();
        const auto& tv = state.teacher.get(name).data();
        REQUIRE(sv.size() == tv.size());
        for (std::size_t i = 0; i < sv.size(); ++i) CHECK(sv[i] == tv[i]);
    }
    CHECK_FALSE(state.teacher.has("temperature"));
    CHECK_FALSE(state.teacher.has("fusion.img.attn.q.weight"));
}

TEST_CASE("one train step updates the student and moves the teacher by the average") {
    auto f = micro_fixture();
    auto state = init_train_state<double>(f.cfg);
    auto student_before = snapshot(state.student);
    auto teacher_before = snapshot(state.teacher);
    auto metrics = train_step(state, f.batch, f.cfg);
    CHECK(state.step == 1);
    CHECK(metrics.step == 0);
    CHECK(std::isfinite(metrics.total));
    CHECK(metrics.total == doctest::Approx(metrics.clip + metrics.cosmos).epsilon(1e-12));
    CHECK(metrics.lr == doctest::Approx(lr_at(f.cfg.optim, f.cfg.steps, 1)).epsilon(1e-15));
    CHECK(metrics.tau > 0.0);
    bool student_moved = false;
    for (const auto& name : state.student.names())
        if (state.student.get(name).data() != student_before.get(name).data())
            student_moved = true;
    CHECK(student_moved);
    const double lam = f.cfg.optim.ema_momentum;
    for (const auto& name : state.teacher.names()) {
        const auto& tv = state.teacher.get(name).data();
        const auto& t0 = teacher_before.get(name).data();
        const auto& sv = state.student.get(name).data();
        for (std::size_t i = 0; i < tv.size(); ++i) {
            const double expect = lam * t0[i] + (1.0 - lam) * sv[i];
            CHECK(tv[i] == expect);
        }
    }
}

TEST_CASE("a frozen teacher stays bitwise put while the student learns") {
    auto f = micro_fixture();
    f.cfg.optim.ema_momentum = 1.0;
    auto state = init_train_state<double>(f.cfg);
    auto teacher_before = snapshot(state.teacher);
    for (int s = 0; s < 3; ++s) train_step(state, f.batch, f.cfg);
    CHECK(stores_equal(state.teacher, teacher_before));
    CHECK_FALSE(stores_equal(state.student, state.teacher));
}

TEST_CASE("train steps refuse tiny batches and report clip-only runs") {
    auto f = micro_fixture();
    Batch<double> small;
    small.samples.push_back(f.batch.samples[0]);
    auto state = init_train_state<double>(f.cfg);
    CHECK_THROWS_AS(train_step(state, small, f.cfg), ContractError);

    f.cfg.clip_only = true;
    auto state2 = init_train_state<double>(f.cfg);
    auto metrics = train_step(state2, f.batch, f.cfg);
    CHECK(metrics.cosmos == 0.0);
    CHECK(metrics.total == doctest::Approx(metrics.clip).epsilon(1e-15));
}

TEST_CASE("metrics serialize with a fixed key order") {
    StepMetrics m;
    m.step = 3;
    m.clip = 1.5;
    m.cosmos = 2.5;
    m.total = 4.0;
    m.lr = 1e-4;
    m.tau = 0.07;
    const auto line = m.to_jsonl();
    const auto step_at = line.find("\"step\"");
    const auto clip_at = line.find("\"clip\"");
    const auto cosmos_at = line.find("\"cosmos\"");
    const auto total_at = line.find("\"total\"");
    const auto lr_at_pos = line.find("\"lr\"");
    const auto tau_at = line.find("\"tau\"");
    REQUIRE(step_at != std::string::npos);
    CHECK(step_at < clip_at);
    CHECK(clip_at < cosmos_at);
    CHECK(cosmos_at < total_at);
    CHECK(total_at < lr_at_pos);
    CHECK(lr_at_pos < tau_at);
    CHECK(line.find('\n') == std::string::npos);
}

TEST_CASE("checkpoints restore training state bitwise") {
    auto f = micro_fixture();
    auto state = init_train_state<double>(f.cfg);
    train_step(state, f.batch, f.cfg);
    train_step(state, f.batch, f.cfg);
    auto path = temp_file("roundtrip.bin");
    save_checkpoint(state, f.cfg, f.vocab, path);
    CHECK(checkpoint_dtype(path) == "f64");
    auto loaded = load_checkpoint<double>(path);
    CHECK(loaded.state.step == 2);
    CHECK(loaded.state.seed == f.cfg.seed);
    CHECK(stores_equal(loaded.state.student, state.student));
    CHECK(stores_equal(loaded.state.teacher, state.teacher));
    REQUIRE(loaded.state.moments.m.size() == state.moments.m.size());
    for (std::size_t k = 0; k < state.moments.m.size(); ++k) {
        CHECK(loaded.state.moments.m[k] == state.moments.m[k]);
        CHECK(loaded.state.moments.v[k] == state.moments.v[k]);
    }
    CHECK(loaded.config.digest() == f.cfg.digest());
    CHECK(loaded.vocab.size() == f.vocab.size());
    for (std::int32_t i = 0; i < static_cast<std::int32_t>(f.vocab.size()); ++i)
        CHECK(loaded.vocab.token(i) == f.vocab.token(i));
}

TEST_CASE("a restored state continues exactly like the original") {
    auto f = micro_fixture();
    auto state = init_train_state<double>(f.cfg);
    train_step(state, f.batch, f.cfg);
    auto path = temp_file("resume.bin");
    save_checkpoint(state, f.cfg, f.vocab, path);
    auto restored = load_checkpoint<double>(path);
    auto m1 = train_step(state, f.batch, f.cfg);
    auto m2 = train_step(restored.state, f.batch, f.cfg);
    CHECK(m1.to_jsonl() == m2.to_jsonl());
    CHECK(stores_equal(state.student, restored.state.student));
}

TEST_CASE("mangled checkpoint files are rejected whole") {
    auto f = micro_fixture();
    auto state = init_train_state<double>(f.cfg);
    auto path = temp_file("mangle.bin");
    save_checkpoint(state, f.cfg, f.vocab, path);

    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();

    auto truncated = temp_file("truncated.bin");
    std::ofstream(truncated, std::ios::binary) << bytes.substr(0, bytes.size() - 9);
    CHECK_THROWS_AS(load_checkpoint<double>(truncated), FormatError);

    auto padded = temp_file("padded.bin");
    std::ofstream(padded, std::ios::binary) << bytes << "xx";
    CHECK_THROWS_AS(load_checkpoint<double>(padded), FormatError);

    auto magic = temp_file("magic.bin");
    std::string evil = bytes;
    evil[0] = 'X';
    std::ofstream(magic, std::ios::binary) << evil;
    CHECK_THROWS_AS(load_checkpoint<double>(magic), FormatError);

    CHECK_THROWS_AS(load_checkpoint<double>(temp_file("missing.bin")), IoError);

    CHECK_THROWS_AS(load_checkpoint<float>(path), CompatibilityError);

    bool leftover = false;
    for (const auto& entry : fs::directory_iterator(path.parent_path()))
        if (entry.path().filename().string().find(".tmp") != std::string::npos) leftover = true;
    CHECK_FALSE(leftover);
}

TEST_CASE("divergence reports carry step and seed") {
    auto f = micro_fixture();
    auto state = init_train_state<double>(f.cfg);
    for (auto& v : state.student.get("visual.proj").data()) v = 1e200;
    try {
        train_step(state, f.batch, f.cfg);
        FAIL("expected divergence");
    } catch (const DivergenceError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("step") != std::string::npos);
        CHECK(msg.find("seed") != std::string::npos);
    } catch (const ContractError&) {
        // Degenerate embeddings can surface first; either failure mode stops
        // the run before any parameter update.
        auto fresh = init_train_state<double>(f.cfg);
        CHECK(stores_equal(state.teacher, fresh.teacher));
    }
}
