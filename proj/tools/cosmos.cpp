#include <algorithm>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cosmos/data.hpp"
#include "cosmos/error.hpp"
#include "cosmos/eval.hpp"
#include "cosmos/run.hpp"
#include "cosmos/trainer.hpp"

namespace {

using cosmos::RunConfig;
using ordered_json = nlohmann::ordered_json;

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitDiverged = 3;

RunConfig load_config(const std::string& path) {
    if (path.empty()) return RunConfig{};
    std::ifstream in(path);
    if (!in) throw cosmos::IoError("cannot open config: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return RunConfig::from_json(ss.str());
}

std::vector<std::string> prompts_for(const std::string& label) {
    return {"a photo of a " + label + ".", "a " + label + ".",
            "an image showing a " + label + "."};
}

template <typename T>
int eval_with(const cosmos::Checkpoint<T>& ckpt, const std::string& data_dir,
              const std::string& task) {
    const auto dataset = cosmos::load_manifest(std::filesystem::path(data_dir) / "manifest.jsonl");
    const auto images = cosmos::load_images<T>(dataset);
    if (task == "retrieval") {
        const auto embeds = cosmos::embed_corpus(ckpt.state.student, ckpt.config.model, dataset,
                                                 images, ckpt.vocab);
        const auto report = cosmos::retrieval(embeds.images, embeds.texts, {1, 5, 10});
        std::cout << report.to_json() << "\n";
        return kExitOk;
    }
    std::set<std::string> labels;
    for (const auto& rec : dataset.records) {
        if (rec.label.empty())
            throw cosmos::ValidationError("record '" + rec.id + "' has no label");
        labels.insert(rec.label);
    }
    std::vector<std::pair<std::string, std::vector<std::string>>> class_prompts;
    for (const auto& label : labels) class_prompts.emplace_back(label, prompts_for(label));
    const auto report = cosmos::zero_shot_classify(ckpt.state.student, ckpt.config.model, dataset,
                                                   images, ckpt.vocab, class_prompts);
    std::cout << report.to_json() << "\n";
    return kExitOk;
}

template <typename T>
int attmap_with(const cosmos::Checkpoint<T>& ckpt, const std::string& image_path,
                const std::string& caption, const std::string& out_prefix) {
    const auto image = cosmos::load_ppm<T>(image_path);
    const auto result =
        cosmos::attention_map(ckpt.state.student, ckpt.config.model, ckpt.vocab, image, caption);
    cosmos::write_attention_files(result, image, ckpt.config.model, out_prefix);
    ordered_json j;
    j["grid"] = result.grid;
    j["tokens"] = result.tokens;
    j["heat"] = out_prefix + "_heat.ppm";
    j["overlay"] = out_prefix + "_overlay.ppm";
    j["csv"] = out_prefix + "_tokens.csv";
    std::cout << j.dump() << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale contrastive vision-language training with cross-modal distillation"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic captioned shape dataset");
    std::size_t gen_n = 256, gen_side = 64;
    std::uint64_t gen_seed = 0;
    std::string gen_out;
    gen->add_option("--n", gen_n, "record count");
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--side", gen_side, "base image side in pixels");
    gen->add_option("--out", gen_out, "output directory")->required();

    auto* train = app.add_subcommand("train", "train a model");
    std::string train_config, train_data, train_out, train_resume, train_dtype;
    std::size_t train_steps = 0, train_batch = 0;
    std::uint64_t train_seed = 0;
    bool train_clip_only = false;
    train->add_option("--config", train_config, "JSON run config; defaults when omitted");
    train->add_option("--data", train_data, "dataset directory")->required();
    train->add_option("--out", train_out, "output directory")->required();
    train->add_option("--resume", train_resume, "checkpoint to continue from");
    train->add_option("--steps", train_steps, "override total update count");
    train->add_option("--batch-size", train_batch, "override batch size");
    train->add_option("--seed", train_seed, "override run seed");
    train->add_option("--dtype", train_dtype, "override dtype: f32 or f64");
    train->add_flag("--clip-only", train_clip_only, "drop the distillation term");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string eval_ckpt, eval_data, eval_task = "retrieval";
    ev->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
    ev->add_option("--data", eval_data, "dataset directory")->required();
    ev->add_option("--task", eval_task, "retrieval or classify");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference audit of the backward pass");
    double gc_eps = 1e-4, gc_tol = 1e-3;
    std::size_t gc_dim = 8;
    bool gc_corrupt = false;
    gc->add_option("--dim", gc_dim, "encoder width of the audit model");
    gc->add_option("--eps", gc_eps, "finite-difference step");
    gc->add_option("--tol", gc_tol, "relative error tolerance");
    gc->add_flag("--corrupt-backward", gc_corrupt,
                 "inject a known backward fault; the audit must then fail");

    auto* am = app.add_subcommand("attmap", "export cross-attention maps for one pair");
    std::string am_ckpt, am_image, am_caption, am_out = "attmap";
    am->add_option("--ckpt", am_ckpt, "checkpoint path")->required();
    am->add_option("--image", am_image, "PPM image path")->required();
    am->add_option("--caption", am_caption, "caption text")->required();
    am->add_option("--out", am_out, "output file prefix");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (gen->parsed()) {
            if (gen_n == 0) throw cosmos::ConfigError("--n must be positive");
            cosmos::gen_synthetic_dataset(gen_n, gen_seed, gen_out, gen_side);
            ordered_json j;
            j["records"] = gen_n;
            j["dir"] = gen_out;
            std::cout << j.dump() << "\n";
            return kExitOk;
        }
        if (train->parsed()) {
            RunConfig cfg = load_config(train_config);
            if (train->count("--steps") != 0) cfg.steps = train_steps;
            if (train->count("--batch-size") != 0) cfg.batch_size = train_batch;
            if (train->count("--seed") != 0) cfg.seed = train_seed;
            if (train->count("--dtype") != 0) cfg.dtype = train_dtype;
            if (train_clip_only) cfg.clip_only = true;
            const auto result = cosmos::run_train(cfg, train_data, train_out, train_resume);
            ordered_json j;
            j["metrics"] = result.metrics.string();
            j["checkpoint"] = result.checkpoint.string();
            std::cout << j.dump() << "\n";
            return kExitOk;
        }
        if (ev->parsed()) {
            if (eval_task != "retrieval" && eval_task != "classify")
                throw cosmos::ConfigError("--task must be retrieval or classify");
            if (cosmos::checkpoint_dtype(eval_ckpt) == "f64")
                return eval_with(cosmos::load_checkpoint<double>(eval_ckpt), eval_data, eval_task);
            return eval_with(cosmos::load_checkpoint<float>(eval_ckpt), eval_data, eval_task);
        }
        if (gc->parsed()) {
            const auto report = cosmos::run_gradcheck(gc_dim, gc_eps, gc_tol, gc_corrupt);
            std::cout << report.to_json() << "\n";
            return report.pass ? kExitOk : kExitCheckFailed;
        }
        if (am->parsed()) {
            if (cosmos::checkpoint_dtype(am_ckpt) == "f64")
                return attmap_with(cosmos::load_checkpoint<double>(am_ckpt), am_image, am_caption,
                                   am_out);
            return attmap_with(cosmos::load_checkpoint<float>(am_ckpt), am_image, am_caption,
                               am_out);
        }
    } catch (const cosmos::DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitDiverged;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}
