#include "cosmos/config.hpp"

#include <json.hpp>

#include "cosmos/rng.hpp"

namespace cosmos {

using nlohmann::ordered_json;

void ModelConfig::validate() const {
    if (vision.width == 0 || vision.depth == 0 || vision.heads == 0 || text.width == 0 ||
        text.depth == 0 || text.heads == 0 || embed_dim == 0 || fusion_heads == 0)
        throw ConfigError("model: widths, depths and head counts must be positive");
    if (vision.width % vision.heads != 0)
        throw ConfigError("model: vision width " + std::to_string(vision.width) +
                          " not divisible by " + std::to_string(vision.heads) + " heads");
    if (text.width % text.heads != 0)
        throw ConfigError("model: text width " + std::to_string(text.width) +
                          " not divisible by " + std::to_string(text.heads) + " heads");
    if (embed_dim % fusion_heads != 0)
        throw ConfigError("model: embed dim " + std::to_string(embed_dim) +
                          " not divisible by " + std::to_string(fusion_heads) +
                          " fusion heads");
    if (vision.patch == 0 || vision.image_size % vision.patch != 0 ||
        vision.local_size % vision.patch != 0)
        throw ConfigError("model: patch size must divide both image sides");
    if (vision.local_size >= vision.image_size)
        throw ConfigError("model: local side must be smaller than the global side");
    if (text.vocab < 4) throw ConfigError("model: vocab must hold the four reserved tokens");
    if (text.max_len < 3) throw ConfigError("model: text max length must be at least 3");
}

void CropConfig::validate() const {
    if (global_images == 0 || global_texts == 0)
        throw ConfigError("crops: at least one global crop per modality");
    auto range_ok = [](double lo, double hi) { return lo > 0.0 && lo <= hi && hi <= 1.0; };
    if (!range_ok(global_scale_lo, global_scale_hi) || !range_ok(local_scale_lo, local_scale_hi))
        throw ConfigError("crops: scale ranges must satisfy 0 < lo <= hi <= 1");
    if (aspect_lo <= 0.0 || aspect_lo > aspect_hi)
        throw ConfigError("crops: aspect range must satisfy 0 < lo <= hi");
    if (flip_p < 0.0 || flip_p > 1.0) throw ConfigError("crops: flip probability outside [0,1]");
    if (global_max_sentences == 0 || local_sentences == 0)
        throw ConfigError("crops: sentence counts must be positive");
}

void OptimConfig::validate() const {
    if (lr <= 0.0) throw ConfigError("optim: lr must be positive");
    if (weight_decay < 0.0) throw ConfigError("optim: weight decay must be non-negative");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
        throw ConfigError("optim: betas must lie in [0,1)");
    if (adam_eps <= 0.0) throw ConfigError("optim: adam eps must be positive");
    if (ema_momentum < 0.0 || ema_momentum > 1.0)
        throw ConfigError("optim: ema momentum outside [0,1]");
    if (tau_init <= 0.0) throw ConfigError("optim: tau must be positive");
    if (inv_tau_max <= 0.0) throw ConfigError("optim: 1/tau clamp must be positive");
}

void RunConfig::validate() const {
    model.validate();
    crops.validate();
    optim.validate();
    if (batch_size < 2) throw ConfigError("run: batch size must be at least 2");
    if (steps == 0) throw ConfigError("run: steps must be positive");
    if (optim.warmup > steps)
        throw ConfigError("run: warmup (" + std::to_string(optim.warmup) +
                          ") exceeds total steps (" + std::to_string(steps) + ")");
    if (dtype != "f32" && dtype != "f64")
        throw ConfigError("run: dtype must be \"f32\" or \"f64\", got \"" + dtype + "\"");
}

namespace {

void check_keys(const ordered_json& j, std::initializer_list<const char*> allowed,
                const char* where) {
    if (!j.is_object()) throw ConfigError(std::string("config: ") + where + " must be an object");
    for (const auto& [key, value] : j.items()) {
        (void)value;
        bool ok = false;
        for (const char* a : allowed)
            if (key == a) {
                ok = true;
                break;
            }
        if (!ok)
            throw ConfigError(std::string("config: unknown key \"") + key + "\" in " + where);
    }
}

template <typename V>
void read_field(const ordered_json& j, const char* key, V& out) {
    if (!j.contains(key)) return;
    const auto& v = j.at(key);
    try {
        if constexpr (std::is_same_v<V, bool>) {
            if (!v.is_boolean()) throw ConfigError("");
            out = v.get<bool>();
        } else if constexpr (std::is_same_v<V, std::string>) {
            if (!v.is_string()) throw ConfigError("");
            out = v.get<std::string>();
        } else if constexpr (std::is_integral_v<V>) {
            if (!v.is_number_integer() && !v.is_number_unsigned()) throw ConfigError("");
            if (v.is_number_integer() && v.get<long long>() < 0) throw ConfigError("");
            out = v.get<V>();
        } else {
            if (!v.is_number()) throw ConfigError("");
            out = v.get<V>();
        }
    } catch (const std::exception&) {
        throw ConfigError(std::string("config: field \"") + key + "\" has the wrong type");
    }
}

}  // namespace

std::string RunConfig::to_json() const {
    ordered_json j;
    j["model"] = {
        {"vision",
         {{"image_size", model.vision.image_size},
          {"local_size", model.vision.local_size},
          {"patch", model.vision.patch},
          {"width", model.vision.width},
          {"depth", model.vision.depth},
          {"heads", model.vision.heads}}},
        {"text",
         {{"vocab", model.text.vocab},
          {"max_len", model.text.max_len},
          {"width", model.text.width},
          {"depth", model.text.depth},
          {"heads", model.text.heads}}},
        {"embed_dim", model.embed_dim},
        {"fusion_heads", model.fusion_heads}};
    j["crops"] = {{"global_images", crops.global_images},
                  {"local_images", crops.local_images},
                  {"global_texts", crops.global_texts},
                  {"local_texts", crops.local_texts},
                  {"global_scale", {crops.global_scale_lo, crops.global_scale_hi}},
                  {"local_scale", {crops.local_scale_lo, crops.local_scale_hi}},
                  {"aspect", {crops.aspect_lo, crops.aspect_hi}},
                  {"flip_p", crops.flip_p},
                  {"global_max_sentences", crops.global_max_sentences},
                  {"local_sentences", crops.local_sentences}};
    j["optim"] = {{"lr", optim.lr},
                  {"warmup", optim.warmup},
                  {"weight_decay", optim.weight_decay},
                  {"beta1", optim.beta1},
                  {"beta2", optim.beta2},
                  {"adam_eps", optim.adam_eps},
                  {"ema_momentum", optim.ema_momentum},
                  {"tau_init", optim.tau_init},
                  {"inv_tau_max", optim.inv_tau_max}};
    j["batch_size"] = batch_size;
    j["steps"] = steps;
    j["seed"] = seed;
    j["dtype"] = dtype;
    j["clip_only"] = clip_only;
    j["checkpoint_every"] = checkpoint_every;
    return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    RunConfig c;
    check_keys(j, {"model", "crops", "optim", "batch_size", "steps", "seed", "dtype", "clip_only",
                   "checkpoint_every"},
               "top level");
    if (j.contains("model")) {
        const auto& m = j.at("model");
        check_keys(m, {"vision", "text", "embed_dim", "fusion_heads"}, "model");
        if (m.contains("vision")) {
            const auto& v = m.at("vision");
            check_keys(v, {"image_size", "local_size", "patch", "width", "depth", "heads"},
                       "model.vision");
            read_field(v, "image_size", c.model.vision.image_size);
            read_field(v, "local_size", c.model.vision.local_size);
            read_field(v, "patch", c.model.vision.patch);
            read_field(v, "width", c.model.vision.width);
            read_field(v, "depth", c.model.vision.depth);
            read_field(v, "heads", c.model.vision.heads);
        }
        if (m.contains("text")) {
            const auto& t = m.at("text");
            check_keys(t, {"vocab", "max_len", "width", "depth", "heads"}, "model.text");
            read_field(t, "vocab", c.model.text.vocab);
            read_field(t, "max_len", c.model.text.max_len);
            read_field(t, "width", c.model.text.width);
            read_field(t, "depth", c.model.text.depth);
            read_field(t, "heads", c.model.text.heads);
        }
        read_field(m, "embed_dim", c.model.embed_dim);
        read_field(m, "fusion_heads", c.model.fusion_heads);
    }
    if (j.contains("crops")) {
        const auto& cr = j.at("crops");
        check_keys(cr,
                   {"global_images", "local_images", "global_texts", "local_texts", "global_scale",
                    "local_scale", "aspect", "flip_p", "global_max_sentences", "local_sentences"},
                   "crops");
        read_field(cr, "global_images", c.crops.global_images);
        read_field(cr, "local_images", c.crops.local_images);
        read_field(cr, "global_texts", c.crops.global_texts);
        read_field(cr, "local_texts", c.crops.local_texts);
        auto read_pair = [&](const char* key, double& lo, double& hi) {
            if (!cr.contains(key)) return;
            const auto& p = cr.at(key);
            if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number())
                throw ConfigError(std::string("config: crops.") + key +
                                  " must be a [lo, hi] number pair");
            lo = p[0].get<double>();
            hi = p[1].get<double>();
        };
        read_pair("global_scale", c.crops.global_scale_lo, c.crops.global_scale_hi);
        read_pair("local_scale", c.crops.local_scale_lo, c.crops.local_scale_hi);
        read_pair("aspect", c.crops.aspect_lo, c.crops.aspect_hi);
        read_field(cr, "flip_p", c.crops.flip_p);
        read_field(cr, "global_max_sentences", c.crops.global_max_sentences);
        read_field(cr, "local_sentences", c.crops.local_sentences);
    }
    if (j.contains("optim")) {
        const auto& o = j.at("optim");
        check_keys(o,
                   {"lr", "warmup", "weight_decay", "beta1", "beta2", "adam_eps", "ema_momentum",
                    "tau_init", "inv_tau_max"},
                   "optim");
        read_field(o, "lr", c.optim.lr);
        read_field(o, "warmup", c.optim.warmup);
        read_field(o, "weight_decay", c.optim.weight_decay);
        read_field(o, "beta1", c.optim.beta1);
        read_field(o, "beta2", c.optim.beta2);
        read_field(o, "adam_eps", c.optim.adam_eps);
        read_field(o, "ema_momentum", c.optim.ema_momentum);
        read_field(o, "tau_init", c.optim.tau_init);
        read_field(o, "inv_tau_max", c.optim.inv_tau_max);
    }
    read_field(j, "batch_size", c.batch_size);
    read_field(j, "steps", c.steps);
    read_field(j, "seed", c.seed);
    read_field(j, "dtype", c.dtype);
    read_field(j, "clip_only", c.clip_only);
    read_field(j, "checkpoint_every", c.checkpoint_every);
    c.validate();
    return c;
}

std::string RunConfig::digest() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a(to_json())));
    return std::string(buf);
}

}  // namespace cosmos
