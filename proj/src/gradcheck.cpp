#include "cosmos/gradcheck.hpp"

#include <cmath>

#include <json.hpp>

namespace cosmos {

std::string GradCheckReport::to_json() const {
    nlohmann::ordered_json j;
    j["eps"] = eps;
    j["tolerance"] = tolerance;
    j["pass"] = pass;
    nlohmann::ordered_json entries = nlohmann::ordered_json::array();
    for (const auto& e : per_param) {
        entries.push_back({{"name", e.name},
                           {"max_rel_err", e.max_rel_err},
                           {"worst_index", e.worst_index}});
    }
    j["params"] = entries;
    return j.dump(2);
}

GradCheckReport finite_diff_check(
    const std::vector<std::pair<std::string, Tensor<double>>>& params,
    const std::function<Tensor<double>()>& loss_builder, double eps, double tolerance) {
    if (eps <= 0.0) throw ContractError("finite_diff_check: eps must be positive");

    // Two evaluations at the same point must agree bit for bit, otherwise the
    // differences below would measure noise, not gradients.
    const double probe1 = loss_builder().item();
    const double probe2 = loss_builder().item();
    if (probe1 != probe2)
        throw ContractError("finite_diff_check: loss_builder is not deterministic (" +
                            std::to_string(probe1) + " vs " + std::to_string(probe2) + ")");

    for (const auto& [name, p] : params) p.node()->grad.clear();
    Tape<double> tape;
    {
        TapeScope<double> scope(tape);
        auto loss = loss_builder();
        tape.backward(loss);
    }
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& [name, p] : params) {
        if (p.has_grad())
            analytic.push_back(p.grad());
        else
            analytic.emplace_back(p.numel(), 0.0);  // unused by the loss
    }

    GradCheckReport report;
    report.eps = eps;
    report.tolerance = tolerance;
    report.pass = true;
    for (std::size_t k = 0; k < params.size(); ++k) {
        const auto& [name, p] = params[k];
        auto& value = p.node()->value;
        GradCheckReport::Entry entry;
        entry.name = name;
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double saved = value[i];
            value[i] = saved + eps;
            const double fp = loss_builder().item();
            value[i] = saved - eps;
            const double fm = loss_builder().item();
            value[i] = saved;
            const double fd = (fp - fm) / (2.0 * eps);
            const double a = analytic[k][i];
            const double denom = std::max({std::abs(a), std::abs(fd), 1e-6});
            const double rel = std::abs(a - fd) / denom;
            if (rel > entry.max_rel_err) {
                entry.max_rel_err = rel;
                entry.worst_index = i;
            }
        }
        if (entry.max_rel_err > tolerance) report.pass = false;
        report.per_param.push_back(std::move(entry));
    }
    return report;
}

}  // namespace cosmos
