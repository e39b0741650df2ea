#include <array>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <doctest.h>

#include "cosmos/config.hpp"
#include "cosmos/data.hpp"
#include "cosmos/error.hpp"
#include "cosmos/tokenizer.hpp"

using namespace cosmos;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    auto dir = fs::temp_directory_path() / ("cosmos_test_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    out << content;
}

const std::array<std::array<double, 3>, 6> kExpectedPalette = {{
    {0.90, 0.10, 0.10},  // red
    {0.10, 0.80, 0.15},  // green
    {0.15, 0.20, 0.90},  // blue
    {0.95, 0.85, 0.10},  // yellow
    {0.55, 0.15, 0.85},  // purple
    {0.95, 0.55, 0.10},  // orange
}};
const std::array<const char*, 6> kExpectedColors = {"red",    "green",  "blue",
                                                    "yellow", "purple", "orange"};

}  // namespace

TEST_CASE("manifest loading parses records in order") {
    auto dir = temp_dir("manifest_ok");
    write_file(dir / "m.jsonl",
               R"({"id":"a","image":"a.ppm","captions":["one red circle."]})"
               "\n"
               R"({"id":"b","image":"b.ppm","captions":["a blue square.","two parts."],"label":"blue square"})"
               "\n");
    auto ds = load_manifest(dir / "m.jsonl");
    CHECK(ds.root == dir);
    REQUIRE(ds.records.size() == 2);
    CHECK(ds.records[0].id == "a");
    CHECK(ds.records[0].captions.size() == 1);
    CHECK(ds.records[0].label.empty());
    CHECK(ds.records[1].captions.size() == 2);
    CHECK(ds.records[1].label == "blue square");
    CHECK_FALSE(ds.has_labels());

    write_file(dir / "labeled.jsonl",
               R"({"id":"a","image":"a.ppm","captions":["one red circle."],"label":"red circle"})"
               "\n");
    CHECK(load_manifest(dir / "labeled.jsonl").has_labels());
}

TEST_CASE("manifest loading names the offending line") {
    auto dir = temp_dir("manifest_bad");
    write_file(dir / "m.jsonl",
               R"({"id":"a","image":"a.ppm","captions":["x."]})"
               "\n{not json\n");
    try {
        load_manifest(dir / "m.jsonl", true);
        FAIL("expected a validation error");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find(":2:") != std::string::npos);
    }
    auto ds = load_manifest(dir / "m.jsonl", false);
    CHECK(ds.records.size() == 1);
}

TEST_CASE("manifest loading rejects duplicates and unknown fields") {
    auto dir = temp_dir("manifest_dup");
    write_file(dir / "dup.jsonl",
               R"({"id":"a","image":"a.ppm","captions":["x."]})"
               "\n"
               R"({"id":"a","image":"b.ppm","captions":["y."]})"
               "\n");
    CHECK_THROWS_AS(load_manifest(dir / "dup.jsonl", false), ValidationError);
    write_file(dir / "extra.jsonl", R"({"id":"a","image":"a.ppm","captions":["x."],"oops":1})"
                                    "\n");
    CHECK_THROWS_AS(load_manifest(dir / "extra.jsonl", true), ValidationError);
    write_file(dir / "empty.jsonl", "");
    auto ds = load_manifest(dir / "empty.jsonl");
    CHECK(ds.records.empty());
}

TEST_CASE("manifest save then load is a fixed point") {
    auto dir = temp_dir("manifest_fp");
    write_file(dir / "m.jsonl",
               R"({"id":"a","image":"a.ppm","captions":["one red circle.","dark."]})"
               "\n"
               R"({"id":"b","image":"b.ppm","captions":["a blue square."],"label":"blue square"})"
               "\n");
    auto first = load_manifest(dir / "m.jsonl");
    save_manifest(first, dir / "copy.jsonl");
    auto second = load_manifest(dir / "copy.jsonl");
    REQUIRE(first.records.size() == second.records.size());
    for (std::size_t i = 0; i < first.records.size(); ++i) {
        CHECK(first.records[i].id == second.records[i].id);
        CHECK(first.records[i].image == second.records[i].image);
        CHECK(first.records[i].captions == second.records[i].captions);
        CHECK(first.records[i].label == second.records[i].label);
    }
}

TEST_CASE("a one-pixel white image decodes to ones") {
    const std::string ppm = std::string("P6\n1 1\n255\n") + "\xff\xff\xff";
    std::vector<std::uint8_t> bytes(ppm.begin(), ppm.end());
    auto img = decode_ppm<double>(bytes);
    REQUIRE(img.shape() == Shape{1, 1, 3});
    for (auto v : img.data()) CHECK(v == 1.0);
}

TEST_CASE("image decoding rejects foreign formats") {
    const std::string p5 = "P5\n1 1\n255\n\xff";
    CHECK_THROWS_AS(decode_ppm<double>(std::vector<std::uint8_t>(p5.begin(), p5.end())),
                    FormatError);
    const std::string deep = std::string("P6\n1 1\n65535\n") + "\xff\xff\xff\xff\xff\xff";
    CHECK_THROWS_AS(decode_ppm<double>(std::vector<std::uint8_t>(deep.begin(), deep.end())),
                    FormatError);
    const std::string cut = "P6\n2 1\n255\n\xff";
    CHECK_THROWS_AS(decode_ppm<double>(std::vector<std::uint8_t>(cut.begin(), cut.end())),
                    FormatError);
}

TEST_CASE("image decoding skips header comments") {
    const std::string ppm = std::string("P6\n# side\n2 1\n# depth\n255\n") + std::string(6, '\x80');
    std::vector<std::uint8_t> bytes(ppm.begin(), ppm.end());
    auto img = decode_ppm<double>(bytes);
    REQUIRE(img.shape() == Shape{1, 2, 3});
    for (auto v : img.data()) CHECK(v == doctest::Approx(128.0 / 255.0).epsilon(1e-12));
}

TEST_CASE("encode then decode reproduces the byte stream") {
    const std::string ppm = std::string("P6\n3 2\n255\n") + std::string("abcdefghijklmnopqr", 18);
    std::vector<std::uint8_t> bytes(ppm.begin(), ppm.end());
    auto img = decode_ppm<double>(bytes);
    auto back = encode_ppm(img);
    REQUIRE(back.size() == bytes.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) CHECK(back[i] == bytes[i]);
}

TEST_CASE("image files survive a save and load round trip") {
    auto dir = temp_dir("ppm_rt");
    auto img = Tensor<double>::zeros({4, 4, 3});
    for (std::size_t i = 0; i < img.numel(); ++i)
        img.data()[i] = static_cast<double>(i % 256) / 255.0;
    save_ppm(img, dir / "x.ppm");
    auto back = load_ppm<double>(dir / "x.ppm");
    for (std::size_t i = 0; i < img.numel(); ++i)
        CHECK(back.data()[i] == doctest::Approx(img.data()[i]).epsilon(1e-9));
}

TEST_CASE("the synthetic generator is reproducible") {
    auto dir_a = temp_dir("gen_a");
    auto dir_b = temp_dir("gen_b");
    auto a = gen_synthetic_dataset(6, 99, dir_a, 32);
    auto b = gen_synthetic_dataset(6, 99, dir_b, 32);
    REQUIRE(a.records.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(a.records[i].captions == b.records[i].captions);
        CHECK(a.records[i].label == b.records[i].label);
        auto ia = load_ppm<double>(dir_a / a.records[i].image);
        auto ib = load_ppm<double>(dir_b / b.records[i].image);
        REQUIRE(ia.numel() == ib.numel());
        for (std::size_t p = 0; p < ia.numel(); ++p) CHECK(ia.data()[p] == ib.data()[p]);
    }
    auto c = gen_synthetic_dataset(6, 100, dir_b, 32);
    bool differs = false;
    for (std::size_t i = 0; i < 6; ++i)
        if (c.records[i].captions != a.records[i].captions) differs = true;
    auto ia = load_ppm<double>(dir_a / a.records[0].image);
    auto ic = load_ppm<double>(dir_b / c.records[0].image);
    for (std::size_t p = 0; p < ia.numel() && !differs; ++p)
        if (ia.data()[p] != ic.data()[p]) differs = true;
    CHECK(differs);
}

TEST_CASE("every generated record pairs a shape caption with a background caption") {
    auto dir = temp_dir("gen_caps");
    auto ds = gen_synthetic_dataset(40, 5, dir, 32);
    for (const auto& rec : ds.records) {
        REQUIRE(rec.captions.size() >= 2);
        const auto& bg = rec.captions.back();
        CHECK(bg.find("background is") != std::string::npos);
        bool label_caption = false;
        for (const auto& cap : rec.captions)
            if (cap.find(rec.label) != std::string::npos) label_caption = true;
        CHECK(label_caption);
        CHECK_FALSE(rec.label.empty());
    }
}

TEST_CASE("caption color words match the painted pixels for 1000 samples") {
    auto dir = temp_dir("gen_color");
    auto ds = gen_synthetic_dataset(1000, 123, dir, 32);
    std::size_t captions_checked = 0;
    for (const auto& rec : ds.records) {
        auto img = load_ppm<double>(dir / rec.image);
        const std::size_t pixels = img.dim(0) * img.dim(1);
        std::array<std::size_t, 6> counts{};
        for (std::size_t p = 0; p < pixels; ++p)
            for (std::size_t c = 0; c < 6; ++c) {
                bool match = true;
                for (std::size_t ch = 0; ch < 3; ++ch)
                    if (std::abs(img.data()[p * 3 + ch] - kExpectedPalette[c][ch]) > 1.0 / 255.0)
                        match = false;
                if (match) {
                    // The named palette colors disagree pairwise in at least
                    // one channel by far more than a rounding step, so a pixel
                    // matches at most one of them.
                    ++counts[c];
                }
            }
        for (const auto& cap : rec.captions) {
            if (cap.find("background") != std::string::npos) continue;
            std::size_t color_idx = 6;
            for (std::size_t c = 0; c < 6; ++c)
                if (cap.find(std::string(" ") + kExpectedColors[c] + " ") != std::string::npos)
                    color_idx = c;
            REQUIRE(color_idx < 6);
            CHECK(counts[color_idx] > 0);
            ++captions_checked;
        }
        const std::string label_color = rec.label.substr(0, rec.label.find(' '));
        std::size_t label_idx = 6;
        for (std::size_t c = 0; c < 6; ++c)
            if (label_color == kExpectedColors[c]) label_idx = c;
        REQUIRE(label_idx < 6);
        CHECK(counts[label_idx] > 0);
    }
    CHECK(captions_checked >= 1000);
}

TEST_CASE("batch making shuffles, drops the remainder and validates") {
    auto batches = make_batches(10, 4, 7);
    REQUIRE(batches.size() == 2);
    std::set<std::size_t> seen;
    for (const auto& b : batches) {
        REQUIRE(b.size() == 4);
        for (auto i : b) {
            CHECK(i < 10);
            CHECK(seen.insert(i).second);
        }
    }
    CHECK_THROWS_AS(make_batches(3, 4, 7), ContractError);
    CHECK_THROWS_AS(make_batches(10, 1, 7), ContractError);
}

TEST_CASE("batch order depends on the epoch seed") {
    std::set<std::vector<std::size_t>> orders;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        auto batches = make_batches(64, 64, seed);
        orders.insert(batches[0]);
    }
    CHECK(orders.size() == 100);
}

TEST_CASE("sample augmentation follows the record, not the batch position") {
    auto dir = temp_dir("prep");
    auto ds = gen_synthetic_dataset(6, 11, dir, 32);
    auto images = load_images<double>(ds);
    std::vector<std::string> corpus;
    for (const auto& rec : ds.records)
        for (const auto& cap : rec.captions) corpus.push_back(cap);
    auto vocab = Vocab::build(corpus, 256);
    CropConfig crops;
    ModelConfig model;
    auto a = prepare_batch(ds, images, {0, 1, 2}, vocab, crops, model, 5, 0);
    auto b = prepare_batch(ds, images, {2, 0, 1}, vocab, crops, model, 5, 0);
    REQUIRE(a.samples.size() == 3);
    const auto& a0 = a.samples[0];
    const auto& b1 = b.samples[1];
    REQUIRE(a0.index == b1.index);
    REQUIRE(a0.crops.images.globals.size() == b1.crops.images.globals.size());
    for (std::size_t c = 0; c < a0.crops.images.globals.size(); ++c)
        for (std::size_t i = 0; i < a0.crops.images.globals[c].numel(); ++i)
            CHECK(a0.crops.images.globals[c].data()[i] == b1.crops.images.globals[c].data()[i]);
    CHECK(a0.crops.texts.globals == b1.crops.texts.globals);
    REQUIRE(a0.global_tokens.size() == b1.global_tokens.size());
    for (std::size_t c = 0; c < a0.global_tokens.size(); ++c)
        CHECK(a0.global_tokens[c].ids == b1.global_tokens[c].ids);

    auto later = prepare_batch(ds, images, {0, 1, 2}, vocab, crops, model, 5, 1);
    bool differs = false;
    for (std::size_t i = 0; i < a0.crops.images.globals[0].numel(); ++i)
        if (a0.crops.images.globals[0].data()[i] !=
            later.samples[0].crops.images.globals[0].data()[i])
            differs = true;
    CHECK(differs);
}

TEST_CASE("batch preparation is stable across thread budgets") {
    auto dir = temp_dir("prep_threads");
    auto ds = gen_synthetic_dataset(8, 21, dir, 32);
    auto images = load_images<double>(ds);
    std::vector<std::string> corpus;
    for (const auto& rec : ds.records)
        for (const auto& cap : rec.captions) corpus.push_back(cap);
    auto vocab = Vocab::build(corpus, 256);
    CropConfig crops;
    ModelConfig model;
    setenv("COSMOS_THREADS", "1", 1);
    auto serial = prepare_batch(ds, images, {0, 1, 2, 3, 4, 5, 6, 7}, vocab, crops, model, 9, 0);
    setenv("COSMOS_THREADS", "4", 1);
    auto parallel = prepare_batch(ds, images, {0, 1, 2, 3, 4, 5, 6, 7}, vocab, crops, model, 9, 0);
    unsetenv("COSMOS_THREADS");
    REQUIRE(serial.samples.size() == parallel.samples.size());
    for (std::size_t s = 0; s < serial.samples.size(); ++s) {
        const auto& x = serial.samples[s];
        const auto& y = parallel.samples[s];
        for (std::size_t c = 0; c < x.crops.images.globals.size(); ++c)
            for (std::size_t i = 0; i < x.crops.images.globals[c].numel(); ++i)
                CHECK(x.crops.images.globals[c].data()[i] == y.crops.images.globals[c].data()[i]);
        CHECK(x.crops.texts.globals == y.crops.texts.globals);
        CHECK(x.crops.texts.locals == y.crops.texts.locals);
    }
}
