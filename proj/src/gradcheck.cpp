// SPDX-License-Identifier: Apache-2.0
#include "slotmerge/gradcheck.hpp"

#include <cmath>

namespace slotmerge {

GradCheckReport gradient_check(const std::function<Tensor(Graph&)>& build_loss,
                               const std::vector<std::pair<std::string, Tensor>>& leaves,
                               double step) {
    std::vector<std::vector<double>> analytic;
    {
        Graph graph;
        Tensor loss = build_loss(graph);
        if (!std::isfinite(loss.value()))
            throw CalibrationError("gradient_check: non-finite loss");
        for (const auto& [name, leaf] : leaves) {
            Tensor t = leaf;
            t.zero_grad();
        }
        graph.backward(loss);
        for (const auto& [name, leaf] : leaves) {
            auto g = leaf.grad();
            analytic.emplace_back(g.begin(), g.end());
        }
    }

    auto eval = [&]() {
        Graph graph(false);
        const double v = build_loss(graph).value();
        if (!std::isfinite(v))
            throw CalibrationError("gradient_check: non-finite loss at perturbed point");
        return v;
    };

    GradCheckReport report;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        Tensor leaf = leaves[li].second;
        for (std::size_t i = 0; i < leaf.numel(); ++i) {
            const double saved = leaf.at(i);
            leaf.at(i) = saved + step;
            const double f_plus = eval();
            leaf.at(i) = saved - step;
            const double f_minus = eval();
            leaf.at(i) = saved;
            const double numeric = (f_plus - f_minus) / (2.0 * step);
            const double a = analytic[li][i];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
            const double rel = std::fabs(a - numeric) / denom;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_leaf = leaves[li].first;
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    return report;
}

}  // namespace slotmerge
