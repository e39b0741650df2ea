#include "cosmos/run.hpp"

#include <fstream>

#include "cosmos/data.hpp"
#include "cosmos/error.hpp"
#include "cosmos/eval.hpp"
#include "cosmos/rng.hpp"
#include "cosmos/trainer.hpp"

namespace cosmos {

namespace {

constexpr std::uint64_t kShuffleStream = 0x73687566;  // epoch shuffle draws

template <typename T>
RunResult run_train_impl(const RunConfig& cfg, const Dataset& dataset, Vocab vocab,
                         const std::filesystem::path& out_dir,
                         const std::filesystem::path& resume) {
    const auto images = load_images<T>(dataset);
    TrainState<T> state;
    if (resume.empty()) {
        state = init_train_state<T>(cfg);
    } else {
        auto ckpt = load_checkpoint<T>(resume);
        if (ckpt.config.digest() != cfg.digest())
            throw CompatibilityError("resume checkpoint " + resume.string() +
                                     " was written under a different config");
        state = std::move(ckpt.state);
        vocab = std::move(ckpt.vocab);
        if (state.step >= cfg.steps)
            throw ConfigError("resume checkpoint already reached the schedule horizon");
    }

    const std::size_t per_epoch = dataset.records.size() / cfg.batch_size;
    if (per_epoch == 0) throw ConfigError("dataset smaller than one batch");

    const auto metrics_path = out_dir / "metrics.jsonl";
    std::ofstream metrics(metrics_path,
                          resume.empty() ? std::ios::trunc : std::ios::app);
    if (!metrics) throw IoError("cannot write " + metrics_path.string());

    while (state.step < cfg.steps) {
        const std::uint64_t epoch = state.step / per_epoch;
        const auto batches = make_batches(dataset.records.size(), cfg.batch_size,
                                          mix_seed(cfg.seed, epoch, kShuffleStream));
        for (std::size_t b = state.step % per_epoch;
             b < batches.size() && state.step < cfg.steps; ++b) {
            const auto batch = prepare_batch(dataset, images, batches[b], vocab, cfg.crops,
                                             cfg.model, cfg.seed, epoch);
            const StepMetrics m = train_step(state, batch, cfg);
            metrics << m.to_jsonl() << "\n";
            metrics.flush();
            if (cfg.checkpoint_every != 0 && state.step % cfg.checkpoint_every == 0)
                save_checkpoint(state, cfg, vocab,
                                out_dir / ("ckpt_" + std::to_string(state.step) + ".bin"));
        }
        save_checkpoint(state, cfg, vocab, out_dir / "ckpt_last.bin");
    }
    const auto final_path = out_dir / "ckpt_final.bin";
    save_checkpoint(state, cfg, vocab, final_path);

    std::ofstream cfg_out(out_dir / "config.json", std::ios::trunc);
    cfg_out << cfg.to_json() << "\n";
    std::ofstream vocab_out(out_dir / "vocab.json", std::ios::trunc);
    vocab_out << vocab.to_json() << "\n";
    return {metrics_path, final_path};
}

}  // namespace

RunResult run_train(const RunConfig& cfg, const std::filesystem::path& data_dir,
                    const std::filesystem::path& out_dir,
                    const std::filesystem::path& resume) {
    cfg.validate();
    std::filesystem::create_directories(out_dir);
    const Dataset dataset = load_manifest(data_dir / "manifest.jsonl", true);
    if (dataset.records.empty()) throw ValidationError("training needs a non-empty dataset");
    std::vector<std::string> corpus;
    for (const auto& rec : dataset.records)
        for (const auto& cap : rec.captions) corpus.push_back(cap);
    const Vocab vocab = Vocab::build(corpus, cfg.model.text.vocab);
    if (cfg.dtype == "f64") return run_train_impl<double>(cfg, dataset, vocab, out_dir, resume);
    return run_train_impl<float>(cfg, dataset, vocab, out_dir, resume);
}

GradCheckReport run_gradcheck(std::size_t dim, double eps, double tolerance,
                              bool corrupt_backward) {
    if (dim < 2 || dim % 2 != 0)
        throw ConfigError("run_gradcheck: dim must be even and at least 2");
    RunConfig cfg;
    cfg.model.vision.image_size = 16;
    cfg.model.vision.local_size = 8;
    cfg.model.vision.patch = 8;
    cfg.model.vision.width = dim;
    cfg.model.vision.depth = 1;
    cfg.model.vision.heads = 2;
    cfg.model.text.vocab = 32;
    cfg.model.text.max_len = 16;
    cfg.model.text.width = dim;
    cfg.model.text.depth = 1;
    cfg.model.text.heads = 2;
    cfg.model.embed_dim = dim;
    cfg.model.fusion_heads = 2;
    cfg.crops.global_images = 1;
    cfg.crops.local_images = 1;
    cfg.crops.global_texts = 1;
    cfg.crops.local_texts = 1;
    cfg.batch_size = 2;
    cfg.steps = 1;
    cfg.optim.warmup = 1;
    cfg.dtype = "f64";
    cfg.seed = 7;
    cfg.validate();

    Dataset dataset;
    dataset.records.push_back(
        {"0", "", {"a small red circle sits on the left. the background is dark."}, ""});
    dataset.records.push_back(
        {"1", "", {"one blue square floats at the top. the background is light."}, ""});
    std::vector<Tensor<double>> images;
    Rng rng(splitmix64(cfg.seed));
    for (std::size_t i = 0; i < dataset.records.size(); ++i) {
        auto img = Tensor<double>::zeros({24, 24, 3});
        for (auto& v : img.node()->value) v = rng.uniform();
        images.push_back(std::move(img));
    }
    std::vector<std::string> corpus;
    for (const auto& rec : dataset.records)
        for (const auto& cap : rec.captions) corpus.push_back(cap);
    const Vocab vocab = Vocab::build(corpus, cfg.model.text.vocab);
    const Batch<double> batch = prepare_batch(dataset, images, {0, 1}, vocab, cfg.crops,
                                              cfg.model, cfg.seed, 0);

    TrainState<double> state = init_train_state<double>(cfg);
    std::vector<std::pair<std::string, Tensor<double>>> params;
    for (const auto& name : state.student.names())
        params.emplace_back(name, state.student.get(name));

    const bool previous = debug::corrupt_gelu_backward;
    debug::corrupt_gelu_backward = corrupt_backward;
    GradCheckReport report;
    try {
        report = finite_diff_check(
            params,
            [&] {
                const auto bundle = build_bundle(batch, state.student, state.teacher, cfg);
                const Temperature<double> temp{state.student.get("temperature"),
                                               cfg.optim.inv_tau_max};
                return total_loss(bundle, temp).total;
            },
            eps, tolerance);
    } catch (...) {
        debug::corrupt_gelu_backward = previous;
        throw;
    }
    debug::corrupt_gelu_backward = previous;
    return report;
}

}  // namespace cosmos
