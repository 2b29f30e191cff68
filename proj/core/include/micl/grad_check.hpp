#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace micl {

struct GradCheckOptions {
    double h = 1e-5;              // central-difference step
    std::size_t max_recorded = 16;  // how many worst coordinates to keep
};

struct CoordinateError {
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    double mean_rel_err = 0.0;
    std::size_t checked = 0;
    std::vector<CoordinateError> worst;        // sorted by rel_err, descending
    std::vector<std::size_t> non_finite;       // coordinates with non-finite perturbed loss
    std::vector<double> numeric;               // full numeric gradient (NaN where non-finite)

    // ||a - n|| / max(1e-8, ||a|| + ||n||) over a coordinate range; robust to
    // the double-precision FD noise floor on near-zero coordinates.
    double norm_rel_err(std::span<const double> analytic, std::size_t begin, std::size_t end) const;
};

// Compares an analytic gradient against central finite differences of `loss`
// at `params`. Relative error per coordinate is |a-n| / max(1e-8, |a|+|n|).
// Coordinates where either perturbed loss evaluation is non-finite are
// reported separately and excluded from the aggregates.
GradCheckReport grad_check(const std::function<double(std::span<const double>)>& loss,
                           std::span<const double> params,
                           std::span<const double> analytic_grad,
                           const GradCheckOptions& opts = {});

}  // namespace micl
