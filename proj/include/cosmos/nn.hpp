#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "cosmos/config.hpp"
#include "cosmos/tensor.hpp"

namespace cosmos {

// Named parameters with a deterministic iteration order (insertion order).
// Handles share storage with the map, so optimizer and EMA writes through the
// store are visible to every view taken from it.
template <typename T>
class ParameterStore {
public:
    Tensor<T>& add(const std::string& name, Tensor<T> t);
    bool has(const std::string& name) const { return map_.count(name) != 0; }
    Tensor<T>& get(const std::string& name);
    const Tensor<T>& get(const std::string& name) const;
    const std::vector<std::string>& names() const { return order_; }
    std::size_t size() const { return order_.size(); }
    std::size_t total_elements() const;

    // Deep copy: fresh storage, same names, shapes, values and flags.
    ParameterStore clone() const;
    void zero_grads();

private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, Tensor<T>> map_;
};

template <typename T>
struct LayerNormView {
    Tensor<T> gain, bias;
};

template <typename T>
struct AttentionView {
    Tensor<T> q_w, q_b, k_w, k_b, v_w, v_b, out_w, out_b;
    std::size_t heads = 1;
};

template <typename T>
struct BlockView {
    LayerNormView<T> ln1, ln2;
    AttentionView<T> attn;
    Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b;
};

// The cross-modal attention block: pre-norms for query and kv streams plus
// one multi-head cross-attention with output projection. No MLP.
template <typename T>
struct FusionView {
    LayerNormView<T> ln_q, ln_kv;
    AttentionView<T> attn;
};

template <typename T>
LayerNormView<T> layer_norm_view(const ParameterStore<T>& s, const std::string& prefix);
template <typename T>
AttentionView<T> attention_view(const ParameterStore<T>& s, const std::string& prefix,
                                std::size_t heads);
template <typename T>
BlockView<T> block_view(const ParameterStore<T>& s, const std::string& prefix, std::size_t heads);
template <typename T>
FusionView<T> fusion_view(const ParameterStore<T>& s, const std::string& prefix,
                          std::size_t heads);

inline constexpr double kLayerNormEps = 1e-5;

// x [L x din] * w [din x dout] + b.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

// Multi-head scaled dot-product self-attention over a token sequence,
// optionally causal (position i sees only j <= i).
template <typename T>
Tensor<T> self_attention(const Tensor<T>& x, const AttentionView<T>& p, bool causal);

template <typename T>
struct CrossAttentionResult {
    Tensor<T> out;      // [Q x d], readout before any residual
    Tensor<T> weights;  // [heads x Q x K] post-softmax, detached from the graph
};

// Multi-head cross-attention: queries from one token set, keys/values from
// another. Attention weights are returned for visualization.
template <typename T>
CrossAttentionResult<T> cross_attention(const Tensor<T>& q_tokens, const Tensor<T>& kv_tokens,
                                        const AttentionView<T>& p);

// Pre-norm residual block: x + attn(ln(x)), then + mlp(ln(.)).
template <typename T>
Tensor<T> transformer_block(const Tensor<T>& x, const BlockView<T>& p, bool causal);

// Pre-norm cross-attention readout (no residual, no MLP).
template <typename T>
CrossAttentionResult<T> cross_attention_block(const Tensor<T>& q_tokens,
                                              const Tensor<T>& kv_tokens, const FusionView<T>& p);

// Builds the full student parameter set: vision and text towers, shared-space
// projections, the two cross-modal attention blocks, and the temperature.
// Weights are truncated-normal(sigma=0.02, cut at 2 sigma), biases zero, norm
// gains one. The fusion output projections start at zero so the cross-modal
// embeddings coincide with cls/eot at step 0.
template <typename T>
ParameterStore<T> init_params(const ModelConfig& cfg, std::uint64_t seed, double tau_init);

// Teacher = the student's encoder/projection subset, copied, gradient-free.
// Fusion and temperature have no teacher counterpart.
template <typename T>
ParameterStore<T> make_teacher(const ParameterStore<T>& student);

inline bool is_teacher_param(const std::string& name) {
    return name.rfind("fusion.", 0) != 0 && name != "temperature";
}

// Weight decay exemptions: norm gains, all biases, the temperature.
inline bool decays(const std::string& name) {
    auto ends_with = [&](const char* suf) {
        const std::string s(suf);
        return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    return !ends_with(".bias") && !ends_with(".gain") && name != "temperature";
}

}  // namespace cosmos
