#include "cosmos/nn.hpp"

#include <cmath>

#include "cosmos/rng.hpp"

namespace cosmos {

// ---- ParameterStore ----------------------------------------------------------

template <typename T>
Tensor<T>& ParameterStore<T>::add(const std::string& name, Tensor<T> t) {
    if (map_.count(name))
        throw ContractError("parameter store: duplicate name \"" + name + "\"");
    order_.push_back(name);
    return map_.emplace(name, std::move(t)).first->second;
}

template <typename T>
Tensor<T>& ParameterStore<T>::get(const std::string& name) {
    auto it = map_.find(name);
    if (it == map_.end()) throw ContractError("parameter store: no parameter \"" + name + "\"");
    return it->second;
}

template <typename T>
const Tensor<T>& ParameterStore<T>::get(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw ContractError("parameter store: no parameter \"" + name + "\"");
    return it->second;
}

template <typename T>
std::size_t ParameterStore<T>::total_elements() const {
    std::size_t n = 0;
    for (const auto& name : order_) n += get(name).numel();
    return n;
}

template <typename T>
ParameterStore<T> ParameterStore<T>::clone() const {
    ParameterStore<T> out;
    for (const auto& name : order_) out.add(name, get(name).clone());
    return out;
}

template <typename T>
void ParameterStore<T>::zero_grads() {
    for (const auto& name : order_) get(name).zero_grad();
}

// ---- views -------------------------------------------------------------------

template <typename T>
LayerNormView<T> layer_norm_view(const ParameterStore<T>& s, const std::string& prefix) {
    return {s.get(prefix + ".gain"), s.get(prefix + ".bias")};
}

template <typename T>
AttentionView<T> attention_view(const ParameterStore<T>& s, const std::string& prefix,
                                std::size_t heads) {
    AttentionView<T> v;
    v.q_w = s.get(prefix + ".q.weight");
    v.q_b = s.get(prefix + ".q.bias");
    v.k_w = s.get(prefix + ".k.weight");
    v.k_b = s.get(prefix + ".k.bias");
    v.v_w = s.get(prefix + ".v.weight");
    v.v_b = s.get(prefix + ".v.bias");
    v.out_w = s.get(prefix + ".out.weight");
    v.out_b = s.get(prefix + ".out.bias");
    v.heads = heads;
    return v;
}

template <typename T>
BlockView<T> block_view(const ParameterStore<T>& s, const std::string& prefix,
                        std::size_t heads) {
    BlockView<T> v;
    v.ln1 = layer_norm_view(s, prefix + ".ln1");
    v.ln2 = layer_norm_view(s, prefix + ".ln2");
    v.attn = attention_view(s, prefix + ".attn", heads);
    v.fc1_w = s.get(prefix + ".mlp.fc1.weight");
    v.fc1_b = s.get(prefix + ".mlp.fc1.bias");
    v.fc2_w = s.get(prefix + ".mlp.fc2.weight");
    v.fc2_b = s.get(prefix + ".mlp.fc2.bias");
    return v;
}

template <typename T>
FusionView<T> fusion_view(const ParameterStore<T>& s, const std::string& prefix,
                          std::size_t heads) {
    FusionView<T> v;
    v.ln_q = layer_norm_view(s, prefix + ".ln_q");
    v.ln_kv = layer_norm_view(s, prefix + ".ln_kv");
    v.attn = attention_view(s, prefix + ".attn", heads);
    return v;
}

// ---- forward ops ---------------------------------------------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    return add_rowvec(matmul(x, w), b);
}

namespace {

template <typename T>
void check_attention_dims(const Tensor<T>& x, const AttentionView<T>& p, const char* op) {
    const std::size_t d = x.cols();
    if (p.q_w.rows() != d)
        throw ContractError(std::string(op) + ": token width " + std::to_string(d) +
                            " does not match projection width " + std::to_string(p.q_w.rows()));
    if (p.q_w.cols() % p.heads != 0)
        throw ConfigError(std::string(op) + ": width " + std::to_string(p.q_w.cols()) +
                          " not divisible by " + std::to_string(p.heads) + " heads");
}

}  // namespace

template <typename T>
Tensor<T> self_attention(const Tensor<T>& x, const AttentionView<T>& p, bool causal) {
    check_attention_dims(x, p, "self_attention");
    const std::size_t d = p.q_w.cols();
    const std::size_t hd = d / p.heads;
    auto q = linear(x, p.q_w, p.q_b);
    auto k = linear(x, p.k_w, p.k_b);
    auto v = linear(x, p.v_w, p.v_b);
    std::vector<Tensor<T>> heads_out;
    heads_out.reserve(p.heads);
    for (std::size_t h = 0; h < p.heads; ++h) {
        auto qh = slice_cols(q, h * hd, hd);
        auto kh = slice_cols(k, h * hd, hd);
        auto vh = slice_cols(v, h * hd, hd);
        auto scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(hd)));
        auto probs = causal ? causal_softmax_rows(scores) : softmax(scores, 1);
        heads_out.push_back(matmul(probs, vh));
    }
    return linear(concat_cols(heads_out), p.out_w, p.out_b);
}

template <typename T>
CrossAttentionResult<T> cross_attention(const Tensor<T>& q_tokens, const Tensor<T>& kv_tokens,
                                        const AttentionView<T>& p) {
    if (q_tokens.cols() != kv_tokens.cols())
        throw ContractError("cross_attention: query width " + std::to_string(q_tokens.cols()) +
                            " vs kv width " + std::to_string(kv_tokens.cols()));
    check_attention_dims(q_tokens, p, "cross_attention");
    const std::size_t d = p.q_w.cols();
    const std::size_t hd = d / p.heads;
    const std::size_t Q = q_tokens.rows(), K = kv_tokens.rows();
    if (K == 0) throw ContractError("cross_attention: empty key/value set");
    auto q = linear(q_tokens, p.q_w, p.q_b);
    auto k = linear(kv_tokens, p.k_w, p.k_b);
    auto v = linear(kv_tokens, p.v_w, p.v_b);
    auto weights = Tensor<T>::zeros({p.heads, Q, K});
    std::vector<Tensor<T>> heads_out;
    heads_out.reserve(p.heads);
    for (std::size_t h = 0; h < p.heads; ++h) {
        auto qh = slice_cols(q, h * hd, hd);
        auto kh = slice_cols(k, h * hd, hd);
        auto vh = slice_cols(v, h * hd, hd);
        auto scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(hd)));
        auto probs = softmax(scores, 1);
        std::copy_n(probs.data().begin(), Q * K, weights.data().begin() + h * Q * K);
        heads_out.push_back(matmul(probs, vh));
    }
    return {linear(concat_cols(heads_out), p.out_w, p.out_b), weights};
}

template <typename T>
Tensor<T> transformer_block(const Tensor<T>& x, const BlockView<T>& p, bool causal) {
    auto a = self_attention(layer_norm(x, p.ln1.gain, p.ln1.bias, kLayerNormEps), p.attn, causal);
    auto x1 = add(x, a);
    auto h = gelu(linear(layer_norm(x1, p.ln2.gain, p.ln2.bias, kLayerNormEps), p.fc1_w, p.fc1_b));
    return add(x1, linear(h, p.fc2_w, p.fc2_b));
}

template <typename T>
CrossAttentionResult<T> cross_attention_block(const Tensor<T>& q_tokens,
                                              const Tensor<T>& kv_tokens, const FusionView<T>& p) {
    auto qn = layer_norm(q_tokens, p.ln_q.gain, p.ln_q.bias, kLayerNormEps);
    auto kvn = layer_norm(kv_tokens, p.ln_kv.gain, p.ln_kv.bias, kLayerNormEps);
    return cross_attention(qn, kvn, p.attn);
}

// ---- init ----------------------------------------------------------------------

namespace {

template <typename T>
Tensor<T> trunc_normal_tensor(Rng& rng, Shape shape, double sigma) {
    auto t = Tensor<T>::zeros(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(rng.trunc_normal(sigma));
    return t;
}

template <typename T>
void add_param(ParameterStore<T>& s, const std::string& name, Tensor<T> t) {
    t.set_requires_grad(true);
    s.add(name, std::move(t));
}

template <typename T>
void add_layer_norm(ParameterStore<T>& s, const std::string& prefix, std::size_t d) {
    add_param(s, prefix + ".gain", Tensor<T>::full({d}, T(1)));
    add_param(s, prefix + ".bias", Tensor<T>::zeros({d}));
}

template <typename T>
void add_attention(ParameterStore<T>& s, Rng& rng, const std::string& prefix, std::size_t d,
                   bool zero_out_proj) {
    const double sigma = 0.02;
    for (const char* part : {"q", "k", "v"}) {
        add_param(s, prefix + "." + part + ".weight", trunc_normal_tensor<T>(rng, {d, d}, sigma));
        add_param(s, prefix + "." + part + ".bias", Tensor<T>::zeros({d}));
    }
    add_param(s, prefix + ".out.weight",
              zero_out_proj ? Tensor<T>::zeros({d, d}) : trunc_normal_tensor<T>(rng, {d, d}, sigma));
    add_param(s, prefix + ".out.bias", Tensor<T>::zeros({d}));
}

template <typename T>
void add_block(ParameterStore<T>& s, Rng& rng, const std::string& prefix, std::size_t d) {
    const double sigma = 0.02;
    add_layer_norm(s, prefix + ".ln1", d);
    add_attention(s, rng, prefix + ".attn", d, false);
    add_layer_norm(s, prefix + ".ln2", d);
    add_param(s, prefix + ".mlp.fc1.weight", trunc_normal_tensor<T>(rng, {d, 4 * d}, sigma));
    add_param(s, prefix + ".mlp.fc1.bias", Tensor<T>::zeros({4 * d}));
    add_param(s, prefix + ".mlp.fc2.weight", trunc_normal_tensor<T>(rng, {4 * d, d}, sigma));
    add_param(s, prefix + ".mlp.fc2.bias", Tensor<T>::zeros({d}));
}

}  // namespace

template <typename T>
ParameterStore<T> init_params(const ModelConfig& cfg, std::uint64_t seed, double tau_init) {
    cfg.validate();
    if (tau_init <= 0.0) throw ConfigError("init_params: tau must be positive");
    const double sigma = 0.02;
    Rng rng(splitmix64(seed));
    ParameterStore<T> s;

    const std::size_t vw = cfg.vision.width;
    const std::size_t patch_dim = 3 * cfg.vision.patch * cfg.vision.patch;
    const std::size_t grid = cfg.vision.grid();
    add_param(s, "visual.patch_embed.weight", trunc_normal_tensor<T>(rng, {patch_dim, vw}, sigma));
    add_param(s, "visual.patch_embed.bias", Tensor<T>::zeros({vw}));
    add_param(s, "visual.cls", trunc_normal_tensor<T>(rng, {vw}, sigma));
    add_param(s, "visual.pos_cls", trunc_normal_tensor<T>(rng, {vw}, sigma));
    add_param(s, "visual.pos_grid", trunc_normal_tensor<T>(rng, {grid * grid, vw}, sigma));
    for (std::size_t i = 0; i < cfg.vision.depth; ++i)
        add_block(s, rng, "visual.blocks." + std::to_string(i), vw);
    add_layer_norm(s, "visual.ln_final", vw);
    add_param(s, "visual.proj", trunc_normal_tensor<T>(rng, {vw, cfg.embed_dim}, sigma));

    const std::size_t tw = cfg.text.width;
    add_param(s, "text.token_embed", trunc_normal_tensor<T>(rng, {cfg.text.vocab, tw}, sigma));
    add_param(s, "text.pos", trunc_normal_tensor<T>(rng, {cfg.text.max_len, tw}, sigma));
    for (std::size_t i = 0; i < cfg.text.depth; ++i)
        add_block(s, rng, "text.blocks." + std::to_string(i), tw);
    add_layer_norm(s, "text.ln_final", tw);
    add_param(s, "text.proj", trunc_normal_tensor<T>(rng, {tw, cfg.embed_dim}, sigma));

    for (const char* side : {"fusion.img", "fusion.txt"}) {
        add_layer_norm(s, std::string(side) + ".ln_q", cfg.embed_dim);
        add_layer_norm(s, std::string(side) + ".ln_kv", cfg.embed_dim);
        add_attention(s, rng, std::string(side) + ".attn", cfg.embed_dim, true);
    }

    add_param(s, "temperature", Tensor<T>::scalar(static_cast<T>(std::log(1.0 / tau_init))));
    return s;
}

template <typename T>
ParameterStore<T> make_teacher(const ParameterStore<T>& student) {
    ParameterStore<T> t;
    for (const auto& name : student.names()) {
        if (!is_teacher_param(name)) continue;
        auto p = student.get(name).clone();
        p.set_requires_grad(false);
        t.add(name, std::move(p));
    }
    return t;
}

// ---- explicit instantiations -----------------------------------------------

#define COSMOS_INSTANTIATE_NN(T)                                                                \
    template class ParameterStore<T>;                                                          \
    template LayerNormView<T> layer_norm_view<T>(const ParameterStore<T>&, const std::string&); \
    template AttentionView<T> attention_view<T>(const ParameterStore<T>&, const std::string&,   \
                                                std::size_t);                                   \
    template BlockView<T> block_view<T>(const ParameterStore<T>&, const std::string&,           \
                                        std::size_t);                                           \
    template FusionView<T> fusion_view<T>(const ParameterStore<T>&, const std::string&,         \
                                          std::size_t);                                         \
    template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);         \
    template Tensor<T> self_attention<T>(const Tensor<T>&, const AttentionView<T>&, bool);      \
    template CrossAttentionResult<T> cross_attention<T>(const Tensor<T>&, const Tensor<T>&,     \
                                                        const AttentionView<T>&);               \
    template Tensor<T> transformer_block<T>(const Tensor<T>&, const BlockView<T>&, bool);       \
    template CrossAttentionResult<T> cross_attention_block<T>(                                  \
        const Tensor<T>&, const Tensor<T>&, const FusionView<T>&);                              \
    template ParameterStore<T> init_params<T>(const ModelConfig&, std::uint64_t, double);       \
    template ParameterStore<T> make_teacher<T>(const ParameterStore<T>&);

COSMOS_INSTANTIATE_NN(float)
COSMOS_INSTANTIATE_NN(double)

}  // namespace cosmos
