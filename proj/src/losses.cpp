#include "cosmos/losses.hpp"

#include <algorithm>
#include <cmath>

namespace cosmos {

template <typename T>
double Temperature<T>::tau() const {
    const double inv = std::min(std::exp(static_cast<double>(log_inv_tau.item())), inv_tau_max);
    return 1.0 / inv;
}

namespace {

template <typename T>
void check_unit_rows(const Tensor<T>& m, const char* who) {
    const std::size_t r = m.rows(), c = m.cols();
    for (std::size_t i = 0; i < r; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < c; ++j) {
            const double v = static_cast<double>(m.data()[i * c + j]);
            s += v * v;
        }
        if (std::abs(std::sqrt(s) - 1.0) > 1e-3)
            throw ContractError(std::string(who) + ": row " + std::to_string(i) +
                                " is not unit length (norm " + std::to_string(std::sqrt(s)) +
                                ")");
    }
}

// Shared implementation taking the already-built 1/tau node so one training
// step exponentiates the temperature exactly once.
template <typename T>
Tensor<T> info_nce_impl(const Tensor<T>& x, const Tensor<T>& y, const Tensor<T>& inv_tau) {
    if (x.rank() != 2 || y.rank() != 2 || x.shape() != y.shape())
        throw ShapeError("info_nce: need equal [B x d] inputs, got " + shape_str(x.shape()) +
                         " vs " + shape_str(y.shape()));
    if (x.rows() < 1) throw ContractError("info_nce: empty batch");
    check_unit_rows(x, "info_nce x");
    check_unit_rows(y, "info_nce y");
    // logits[a][b] = <x_a, y_b> / tau; softmax over a for fixed b.
    auto logits = mul_scalar(matmul(x, transpose(y)), inv_tau);
    auto logp = log_softmax(logits, 0);
    return scale(mean(diag(logp)), -1.0);
}

template <typename T>
Tensor<T> sym_nce_impl(const Tensor<T>& x, const Tensor<T>& y, const Tensor<T>& inv_tau) {
    return scale(add(info_nce_impl(x, y, inv_tau), info_nce_impl(y, x, inv_tau)), 0.5);
}

template <typename T>
Tensor<T> mean_of(std::vector<Tensor<T>> terms) {
    auto acc = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
    return scale(acc, 1.0 / static_cast<double>(terms.size()));
}

template <typename T>
void check_batch_rows(const ForwardBundle<T>& b) {
    std::size_t rows = 0;
    auto visit = [&](const std::vector<Tensor<T>>& group, const char* name) {
        for (const auto& m : group) {
            if (m.rank() != 2)
                throw ShapeError(std::string("bundle ") + name + ": expected [B x d] matrices");
            if (rows == 0) rows = m.rows();
            if (m.rows() != rows)
                throw ContractError(std::string("bundle ") + name +
                                    ": batch dimension mismatch, " + std::to_string(m.rows()) +
                                    " vs " + std::to_string(rows));
        }
    };
    visit(b.cls_global, "cls_global");
    visit(b.cls_local, "cls_local");
    visit(b.eot_global, "eot_global");
    visit(b.eot_local, "eot_local");
    visit(b.h_img, "h_img");
    visit(b.h_txt, "h_txt");
    visit(b.teacher_cls, "teacher_cls");
    visit(b.teacher_eot, "teacher_eot");
}

template <typename T>
Tensor<T> clip_loss_impl(const ForwardBundle<T>& b, const Tensor<T>& inv_tau) {
    if (b.cls_global.empty()) throw ContractError("clip_loss: no global image views");
    if (b.eot_global.empty()) throw ContractError("clip_loss: no global text crops");
    check_batch_rows(b);
    std::vector<Tensor<T>> terms;
    for (const auto& cls : b.cls_global) {
        for (const auto& eot : b.eot_global) terms.push_back(sym_nce_impl(cls, eot, inv_tau));
        for (const auto& eot : b.eot_local) terms.push_back(sym_nce_impl(cls, eot, inv_tau));
    }
    return mean_of(std::move(terms));
}

template <typename T>
Tensor<T> cosmos_loss_impl(const ForwardBundle<T>& b, const Tensor<T>& inv_tau) {
    if (b.teacher_cls.empty() || b.teacher_eot.empty())
        throw ContractError("cosmos_loss: missing teacher views");
    if (b.h_img.empty() || b.h_txt.empty())
        throw ContractError("cosmos_loss: missing cross-modal embeddings");
    for (const auto* group : {&b.teacher_cls, &b.teacher_eot})
        for (const auto& t : *group)
            if (t.requires_grad() && !t.stop_gradient())
                throw ContractError("cosmos_loss: teacher views must carry stop-gradient");
    check_batch_rows(b);
    auto term = [&](const std::vector<Tensor<T>>& students,
                    const std::vector<Tensor<T>>& targets) {
        std::vector<Tensor<T>> pairs;
        for (const auto& h : students)
            for (const auto& t : targets) pairs.push_back(sym_nce_impl(h, t, inv_tau));
        return mean_of(std::move(pairs));
    };
    auto s = add(add(term(b.h_img, b.teacher_cls), term(b.h_img, b.teacher_eot)),
                 add(term(b.h_txt, b.teacher_cls), term(b.h_txt, b.teacher_eot)));
    return scale(s, 0.25);
}

}  // namespace

template <typename T>
Tensor<T> info_nce(const Tensor<T>& x, const Tensor<T>& y, const Temperature<T>& temp) {
    return info_nce_impl(x, y, temp.inv_tau());
}

template <typename T>
Tensor<T> sym_nce(const Tensor<T>& x, const Tensor<T>& y, const Temperature<T>& temp) {
    return sym_nce_impl(x, y, temp.inv_tau());
}

template <typename T>
Tensor<T> clip_loss(const ForwardBundle<T>& b, const Temperature<T>& temp) {
    return clip_loss_impl(b, temp.inv_tau());
}

template <typename T>
Tensor<T> cosmos_loss(const ForwardBundle<T>& b, const Temperature<T>& temp) {
    return cosmos_loss_impl(b, temp.inv_tau());
}

template <typename T>
LossParts<T> total_loss(const ForwardBundle<T>& b, const Temperature<T>& temp) {
    auto inv_tau = temp.inv_tau();
    LossParts<T> parts;
    parts.clip = clip_loss_impl(b, inv_tau);
    parts.cosmos = cosmos_loss_impl(b, inv_tau);
    parts.total = add(parts.clip, parts.cosmos);
    return parts;
}

#define COSMOS_INSTANTIATE_LOSSES(T)                                                          \
    template struct Temperature<T>;                                                           \
    template Tensor<T> info_nce<T>(const Tensor<T>&, const Tensor<T>&, const Temperature<T>&); \
    template Tensor<T> sym_nce<T>(const Tensor<T>&, const Tensor<T>&, const Temperature<T>&); \
    template Tensor<T> clip_loss<T>(const ForwardBundle<T>&, const Temperature<T>&);          \
    template Tensor<T> cosmos_loss<T>(const ForwardBundle<T>&, const Temperature<T>&);        \
    template LossParts<T> total_loss<T>(const ForwardBundle<T>&, const Temperature<T>&);

COSMOS_INSTANTIATE_LOSSES(float)
COSMOS_INSTANTIATE_LOSSES(double)

}  // namespace cosmos
