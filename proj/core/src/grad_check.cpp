#include "micl/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "micl/common.hpp"

namespace micl {

GradCheckReport grad_check(const std::function<double(std::span<const double>)>& loss,
                           std::span<const double> params,
                           std::span<const double> analytic_grad,
                           const GradCheckOptions& opts) {
    if (params.size() != analytic_grad.size()) {
        throw ShapeError("grad_check: " + std::to_string(params.size()) + " parameters vs " +
                         std::to_string(analytic_grad.size()) + " gradient entries");
    }
    GradCheckReport report;
    report.numeric.assign(params.size(), std::numeric_limits<double>::quiet_NaN());
    std::vector<double> p(params.begin(), params.end());
    double sum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double saved = p[i];
        p[i] = saved + opts.h;
        const double up = loss(p);
        p[i] = saved - opts.h;
        const double down = loss(p);
        p[i] = saved;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            report.non_finite.push_back(i);
            continue;
        }
        const double numeric = (up - down) / (2.0 * opts.h);
        report.numeric[i] = numeric;
        const double a = analytic_grad[i];
        const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
        sum += rel;
        ++report.checked;
        report.max_rel_err = std::max(report.max_rel_err, rel);
        report.worst.push_back({i, a, numeric, rel});
        std::sort(report.worst.begin(), report.worst.end(),
                  [](const CoordinateError& x, const CoordinateError& y) { return x.rel_err > y.rel_err; });
        if (report.worst.size() > opts.max_recorded) report.worst.resize(opts.max_recorded);
    }
    report.mean_rel_err = report.checked > 0 ? sum / static_cast<double>(report.checked) : 0.0;
    return report;
}

double GradCheckReport::norm_rel_err(std::span<const double> analytic, std::size_t begin,
                                     std::size_t end) const {
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = begin; i < end; ++i) {
        if (!std::isfinite(numeric[i])) continue;
        const double d = analytic[i] - numeric[i];
        diff2 += d * d;
        a2 += analytic[i] * analytic[i];
        n2 += numeric[i] * numeric[i];
    }
    return std::sqrt(diff2) / std::max(1e-8, std::sqrt(a2) + std::sqrt(n2));
}

}  // namespace micl
