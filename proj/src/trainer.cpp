#include "cosmos/trainer.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "cosmos/encoders.hpp"
#include "cosmos/error.hpp"

namespace cosmos {

namespace {

using ordered_json = nlohmann::ordered_json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are written as raw little-endian values");

constexpr double kMinEmbedNorm = 1e-8;

template <typename T>
const char* dtype_name() {
    return std::is_same_v<T, float> ? "f32" : "f64";
}

}  // namespace

std::string StepMetrics::to_jsonl() const {
    ordered_json j;
    j["step"] = step;
    j["clip"] = clip;
    j["cosmos"] = cosmos;
    j["total"] = total;
    j["lr"] = lr;
    j["tau"] = tau;
    return j.dump();
}

template <typename T>
TrainState<T> init_train_state(const RunConfig& cfg) {
    cfg.validate();
    TrainState<T> state;
    state.student = init_params<T>(cfg.model, cfg.seed, cfg.optim.tau_init);
    state.teacher = make_teacher(state.student);
    state.seed = cfg.seed;
    state.step = 0;
    for (const auto& name : state.student.names()) {
        const std::size_t n = state.student.get(name).node()->value.size();
        state.moments.m.emplace_back(n, T(0));
        state.moments.v.emplace_back(n, T(0));
    }
    return state;
}

double lr_at(const OptimConfig& cfg, std::uint64_t total_updates, std::uint64_t update) {
    if (update > total_updates) throw ContractError("lr_at: update beyond the schedule horizon");
    if (update == 0) return 0.0;
    if (update <= cfg.warmup)
        return cfg.lr * static_cast<double>(update) / static_cast<double>(cfg.warmup);
    if (total_updates <= cfg.warmup) return 0.0;
    const double progress = static_cast<double>(update - cfg.warmup) /
                            static_cast<double>(total_updates - cfg.warmup);
    return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
void adamw_step(ParameterStore<T>& params, AdamMoments<T>& moments, double lr,
                const OptimConfig& cfg, std::uint64_t t) {
    const auto& names = params.names();
    if (moments.m.size() != names.size() || moments.v.size() != names.size())
        throw ContractError("adamw_step: moments misaligned with the parameter store");
    if (t == 0) throw ContractError("adamw_step: update count is 1-based");
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (std::size_t k = 0; k < names.size(); ++k) {
        auto& p = params.get(names[k]);
        auto& val = p.node()->value;
        const auto& grad = p.node()->grad;
        auto& m = moments.m[k];
        auto& v = moments.v[k];
        if (m.size() != val.size() || v.size() != val.size())
            throw ContractError("adamw_step: moment shape mismatch for " + names[k]);
        const bool decayed = decays(names[k]);
        for (std::size_t i = 0; i < val.size(); ++i) {
            const double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
            if (!std::isfinite(g))
                throw DivergenceError("non-finite gradient in " + names[k]);
            const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * g;
            const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * g * g;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            double x = static_cast<double>(val[i]);
            if (decayed) x *= 1.0 - lr * cfg.weight_decay;
            x -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.adam_eps);
            val[i] = static_cast<T>(x);
        }
    }
}

template <typename T>
void ema_update(ParameterStore<T>& teacher, const ParameterStore<T>& student, double lambda) {
    if (lambda < 0.0 || lambda > 1.0) throw ContractError("ema_update: lambda outside [0, 1]");
    for (const auto& name : teacher.names()) {
        if (!student.has(name))
            throw ContractError("ema_update: student is missing parameter " + name);
        auto& tv = teacher.get(name).node()->value;
        const auto& sv = student.get(name).node()->value;
        if (tv.size() != sv.size())
            throw ContractError("ema_update: shape mismatch for " + name);
        for (std::size_t i = 0; i < tv.size(); ++i)
            tv[i] = static_cast<T>(lambda * static_cast<double>(tv[i]) +
                                   (1.0 - lambda) * static_cast<double>(sv[i]));
    }
}

template <typename T>
ForwardBundle<T> build_bundle(const Batch<T>& batch, const ParameterStore<T>& student,
                              const ParameterStore<T>& teacher, const RunConfig& cfg) {
    const std::size_t B = batch.samples.size();
    if (B == 0) throw ContractError("build_bundle: empty batch");
    const auto& mc = cfg.model;
    const std::size_t n_gi = batch.samples[0].crops.images.globals.size();
    const std::size_t n_li = batch.samples[0].crops.images.locals.size();
    const std::size_t n_gt = batch.samples[0].global_tokens.size();
    const std::size_t n_lt = batch.samples[0].local_tokens.size();
    if (n_gi == 0 || n_gt == 0)
        throw ContractError("build_bundle: need a global crop in each modality");
    for (const auto& s : batch.samples)
        if (s.crops.images.globals.size() != n_gi || s.crops.images.locals.size() != n_li ||
            s.global_tokens.size() != n_gt || s.local_tokens.size() != n_lt)
            throw ContractError("build_bundle: ragged crop counts across the batch");

    auto grid = [B](std::size_t crops) {
        return std::vector<std::vector<Tensor<T>>>(crops, std::vector<Tensor<T>>(B));
    };
    auto cls_g = grid(n_gi), cls_l = grid(n_li);
    auto eot_g = grid(n_gt), eot_l = grid(n_lt);
    auto h_img = grid(n_gi + n_li), h_txt = grid(n_gt + n_lt);
    auto t_cls = grid(n_gi), t_eot = grid(n_gt);

    for (std::size_t b = 0; b < B; ++b) {
        const auto& smp = batch.samples[b];
        Tensor<T> kv_img, kv_txt;
        std::vector<Tensor<T>> img_cls, txt_eot;
        for (std::size_t g = 0; g < n_gi; ++g) {
            auto enc = encode_image(smp.crops.images.globals[g], student, mc);
            cls_g[g][b] = enc.cls;
            img_cls.push_back(enc.cls);
            if (g == 0) kv_img = enc.patch_tokens;
        }
        for (std::size_t l = 0; l < n_li; ++l) {
            auto enc = encode_image(smp.crops.images.locals[l], student, mc);
            cls_l[l][b] = enc.cls;
            img_cls.push_back(enc.cls);
        }
        for (std::size_t g = 0; g < n_gt; ++g) {
            const auto& tk = smp.global_tokens[g];
            auto enc = encode_text<T>(tk.ids, tk.eot_index, student, mc);
            eot_g[g][b] = enc.eot;
            txt_eot.push_back(enc.eot);
            if (g == 0) kv_txt = enc.word_tokens;
        }
        for (std::size_t l = 0; l < n_lt; ++l) {
            const auto& tk = smp.local_tokens[l];
            auto enc = encode_text<T>(tk.ids, tk.eot_index, student, mc);
            eot_l[l][b] = enc.eot;
            txt_eot.push_back(enc.eot);
        }
        for (std::size_t c = 0; c < img_cls.size(); ++c)
            h_img[c][b] = cross_modal_image_embed(img_cls[c], kv_txt, student, mc).embed;
        for (std::size_t c = 0; c < txt_eot.size(); ++c)
            h_txt[c][b] = cross_modal_text_embed(txt_eot[c], kv_img, student, mc).embed;
        {
            TapeScope<T> off;
            for (std::size_t g = 0; g < n_gi; ++g)
                t_cls[g][b] =
                    encode_image(smp.crops.images.globals[g], teacher, mc).cls.detach();
            for (std::size_t g = 0; g < n_gt; ++g) {
                const auto& tk = smp.global_tokens[g];
                t_eot[g][b] = encode_text<T>(tk.ids, tk.eot_index, teacher, mc).eot.detach();
            }
        }
    }

    auto pack = [](std::vector<std::vector<Tensor<T>>>& rows) {
        std::vector<Tensor<T>> out;
        out.reserve(rows.size());
        for (auto& r : rows) out.push_back(l2_normalize(stack_rows(r), kMinEmbedNorm));
        return out;
    };
    ForwardBundle<T> bundle;
    bundle.cls_global = pack(cls_g);
    bundle.cls_local = pack(cls_l);
    bundle.eot_global = pack(eot_g);
    bundle.eot_local = pack(eot_l);
    bundle.h_img = pack(h_img);
    bundle.h_txt = pack(h_txt);
    bundle.teacher_cls = pack(t_cls);
    bundle.teacher_eot = pack(t_eot);
    return bundle;
}

namespace {

std::string diverged(const char* what, std::uint64_t step, std::uint64_t seed) {
    std::ostringstream os;
    os << "training diverged at step " << step << " (seed " << seed << "): " << what;
    return os.str();
}

}  // namespace

template <typename T>
StepMetrics train_step(TrainState<T>& state, const Batch<T>& batch, const RunConfig& cfg) {
    if (batch.samples.size() < 2)
        throw ContractError("train_step: batch must hold at least two samples");
    state.student.zero_grads();
    StepMetrics metrics;
    Tape<T> tape;
    {
        TapeScope<T> scope(tape);
        auto bundle = build_bundle(batch, state.student, state.teacher, cfg);
        Temperature<T> temp{state.student.get("temperature"), cfg.optim.inv_tau_max};
        Tensor<T> objective;
        if (cfg.clip_only) {
            objective = clip_loss(bundle, temp);
            metrics.clip = static_cast<double>(objective.item());
            metrics.cosmos = 0.0;
            metrics.total = metrics.clip;
        } else {
            auto parts = total_loss(bundle, temp);
            objective = parts.total;
            metrics.clip = static_cast<double>(parts.clip.item());
            metrics.cosmos = static_cast<double>(parts.cosmos.item());
            metrics.total = static_cast<double>(parts.total.item());
        }
        if (!std::isfinite(metrics.total))
            throw DivergenceError(diverged("non-finite loss", state.step, state.seed));
        tape.backward(objective);
    }
    for (const auto& name : state.student.names())
        for (const T g : state.student.get(name).node()->grad)
            if (!std::isfinite(static_cast<double>(g)))
                throw DivergenceError(
                    diverged(("non-finite gradient in " + name).c_str(), state.step, state.seed));
    const double lr = lr_at(cfg.optim, cfg.steps, state.step + 1);
    adamw_step(state.student, state.moments, lr, cfg.optim, state.step + 1);
    ema_update(state.teacher, state.student, cfg.optim.ema_momentum);
    metrics.step = state.step;
    metrics.lr = lr;
    metrics.tau = Temperature<T>{state.student.get("temperature"), cfg.optim.inv_tau_max}.tau();
    state.step += 1;
    return metrics;
}

namespace {

constexpr char kMagic[4] = {'C', 'S', 'M', 'S'};
constexpr std::uint32_t kCheckpointVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(b, 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(b, 8);
}

std::uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw FormatError("checkpoint: truncated prelude");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint64_t read_u64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) throw FormatError("checkpoint: truncated prelude");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

ordered_json read_header(std::istream& in, const std::string& what) {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError(what + ": bad magic");
    const std::uint32_t version = read_u32(in);
    if (version != kCheckpointVersion)
        throw CompatibilityError(what + ": unsupported version " + std::to_string(version));
    const std::uint64_t hlen = read_u64(in);
    if (hlen == 0 || hlen > (std::uint64_t{1} << 26))
        throw FormatError(what + ": implausible header length");
    std::string text(hlen, '\0');
    in.read(text.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw FormatError(what + ": truncated header");
    try {
        return ordered_json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(what + ": malformed header: " + e.what());
    }
}

// The four blob namespaces, in file order. Teacher entries cover only the
// parameters that have a teacher counterpart.
template <typename T>
std::vector<std::pair<std::string, std::vector<T>*>> checkpoint_entries(TrainState<T>& state) {
    std::vector<std::pair<std::string, std::vector<T>*>> entries;
    for (const auto& name : state.student.names())
        entries.emplace_back("student." + name, &state.student.get(name).node()->value);
    for (const auto& name : state.teacher.names())
        entries.emplace_back("teacher." + name, &state.teacher.get(name).node()->value);
    const auto& names = state.student.names();
    for (std::size_t k = 0; k < names.size(); ++k)
        entries.emplace_back("adam_m." + names[k], &state.moments.m[k]);
    for (std::size_t k = 0; k < names.size(); ++k)
        entries.emplace_back("adam_v." + names[k], &state.moments.v[k]);
    return entries;
}

template <typename T>
std::vector<std::size_t> entry_shape(const TrainState<T>& state, const std::string& full_name) {
    const auto dot = full_name.find('.');
    const std::string space = full_name.substr(0, dot);
    const std::string name = full_name.substr(dot + 1);
    if (space == "teacher") return state.teacher.get(name).shape();
    return state.student.get(name).shape();
}

}  // namespace

template <typename T>
void save_checkpoint(const TrainState<T>& state, const RunConfig& cfg, const Vocab& vocab,
                     const std::filesystem::path& path) {
    const auto entries = checkpoint_entries(const_cast<TrainState<T>&>(state));
    ordered_json header;
    header["dtype"] = dtype_name<T>();
    header["step"] = state.step;
    header["seed"] = state.seed;
    header["config_digest"] = cfg.digest();
    ordered_json names = ordered_json::array();
    ordered_json shapes = ordered_json::array();
    for (const auto& [name, data] : entries) {
        (void)data;
        names.push_back(name);
        shapes.push_back(entry_shape(state, name));
    }
    header["names"] = std::move(names);
    header["shapes"] = std::move(shapes);
    header["config"] = ordered_json::parse(cfg.to_json());
    header["vocab"] = ordered_json::parse(vocab.to_json());
    const std::string text = header.dump();

    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write checkpoint: " + tmp.string());
        out.write(kMagic, 4);
        write_u32(out, kCheckpointVersion);
        write_u64(out, text.size());
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& [name, data] : entries) {
            (void)name;
            out.write(reinterpret_cast<const char*>(data->data()),
                      static_cast<std::streamsize>(data->size() * sizeof(T)));
        }
        if (!out) throw IoError("short checkpoint write: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::string checkpoint_dtype(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path.string());
    const auto header = read_header(in, path.string());
    if (!header.contains("dtype") || !header.at("dtype").is_string())
        throw FormatError(path.string() + ": header is missing dtype");
    return header.at("dtype").get<std::string>();
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path.string());
    const auto header = read_header(in, path.string());
    for (const char* key : {"dtype", "step", "seed", "config_digest", "names", "shapes",
                            "config", "vocab"})
        if (!header.contains(key))
            throw FormatError(path.string() + ": header is missing '" + std::string(key) + "'");
    if (header.at("dtype").get<std::string>() != dtype_name<T>())
        throw CompatibilityError(path.string() + ": dtype " +
                                 header.at("dtype").get<std::string>() + " does not match " +
                                 dtype_name<T>());

    Checkpoint<T> ckpt;
    ckpt.config = RunConfig::from_json(header.at("config").dump());
    ckpt.vocab = Vocab::from_json(header.at("vocab").dump());
    ckpt.state.step = header.at("step").get<std::uint64_t>();
    ckpt.state.seed = header.at("seed").get<std::uint64_t>();

    // Shape authority is the embedded config, never the header.
    TrainState<T> expected = init_train_state<T>(ckpt.config);
    const auto entries = checkpoint_entries(expected);
    const auto& names = header.at("names");
    const auto& shapes = header.at("shapes");
    if (!names.is_array() || !shapes.is_array() || names.size() != shapes.size() ||
        names.size() != entries.size())
        throw CompatibilityError(path.string() + ": parameter list does not match the config");
    for (std::size_t k = 0; k < entries.size(); ++k) {
        if (names[k].get<std::string>() != entries[k].first)
            throw CompatibilityError(path.string() + ": unexpected parameter " +
                                     names[k].get<std::string>());
        const auto want = entry_shape(expected, entries[k].first);
        if (shapes[k].get<std::vector<std::size_t>>() != want)
            throw CompatibilityError(path.string() + ": shape mismatch for " + entries[k].first);
    }
    for (const auto& [name, data] : entries) {
        (void)name;
        in.read(reinterpret_cast<char*>(data->data()),
                static_cast<std::streamsize>(data->size() * sizeof(T)));
        if (!in) throw FormatError(path.string() + ": truncated parameter data");
    }
    char extra;
    if (in.read(&extra, 1)) throw FormatError(path.string() + ": trailing bytes after data");

    ckpt.state.student = std::move(expected.student);
    ckpt.state.teacher = std::move(expected.teacher);
    ckpt.state.moments = std::move(expected.moments);
    return ckpt;
}

#define COSMOS_INSTANTIATE_TRAINER(T)                                                        \
    template TrainState<T> init_train_state<T>(const RunConfig&);                            \
    template void adamw_step<T>(ParameterStore<T>&, AdamMoments<T>&, double,                 \
                                const OptimConfig&, std::uint64_t);                          \
    template void ema_update<T>(ParameterStore<T>&, const ParameterStore<T>&, double);       \
    template ForwardBundle<T> build_bundle<T>(const Batch<T>&, const ParameterStore<T>&,     \
                                              const ParameterStore<T>&, const RunConfig&);   \
    template StepMetrics train_step<T>(TrainState<T>&, const Batch<T>&, const RunConfig&);   \
    template void save_checkpoint<T>(const TrainState<T>&, const RunConfig&, const Vocab&,   \
                                     const std::filesystem::path&);                          \
    template Checkpoint<T> load_checkpoint<T>(const std::filesystem::path&);

COSMOS_INSTANTIATE_TRAINER(float)
COSMOS_INSTANTIATE_TRAINER(double)

}  // namespace cosmos
