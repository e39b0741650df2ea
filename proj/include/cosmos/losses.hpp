#pragma once

#include <vector>

#include "cosmos/tensor.hpp"

namespace cosmos {

// Learnable temperature, stored as log(1/tau) so positivity is structural.
// The exponentiated value is clamped above, and the clamp kills the gradient
// when active.
template <typename T>
struct Temperature {
    Tensor<T> log_inv_tau;  // rank-0
    double inv_tau_max = 100.0;

    // 1/tau as a graph node (gradients flow back into log_inv_tau).
    Tensor<T> inv_tau() const { return exp_clamped(log_inv_tau, inv_tau_max); }
    double tau() const;
};

// Everything one training step's losses consume. Each member is a list of
// [B x d] matrices, one per crop/view, rows L2-normalized, batch rows aligned
// across all members. Teacher members are detached from the graph.
template <typename T>
struct ForwardBundle {
    std::vector<Tensor<T>> cls_global, cls_local;    // student image embeddings
    std::vector<Tensor<T>> eot_global, eot_local;    // student text embeddings
    std::vector<Tensor<T>> h_img;                    // cross-modal, one per image crop
    std::vector<Tensor<T>> h_txt;                    // cross-modal, one per text crop
    std::vector<Tensor<T>> teacher_cls, teacher_eot; // one per global view
};

// -(1/B) sum_i log[ exp(<x_i,y_i>/tau) / sum_j exp(<x_j,y_i>/tau) ].
// The denominator runs over x_j for fixed y_i. Rows must be unit length
// within 1e-3.
template <typename T>
Tensor<T> info_nce(const Tensor<T>& x, const Tensor<T>& y, const Temperature<T>& temp);

template <typename T>
Tensor<T> sym_nce(const Tensor<T>& x, const Tensor<T>& y, const Temperature<T>& temp);

// Mean of sym_nce(global image cls, text eot) over all global-image x
// text-crop pairs. Text crops include locals; image locals are excluded.
template <typename T>
Tensor<T> clip_loss(const ForwardBundle<T>& b, const Temperature<T>& temp);

// Quarter-sum of the four distillation terms: {h_img, h_txt} x {teacher cls,
// teacher eot}, each term averaged over every student-crop/teacher-view pair.
template <typename T>
Tensor<T> cosmos_loss(const ForwardBundle<T>& b, const Temperature<T>& temp);

template <typename T>
struct LossParts {
    Tensor<T> total, clip, cosmos;
};

// total = clip + cosmos, coefficients exactly one.
template <typename T>
LossParts<T> total_loss(const ForwardBundle<T>& b, const Temperature<T>& temp);

}  // namespace cosmos
