#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace care {

struct GradCheckOptions {
    std::uint64_t seed = 1;
    int cases = 50;
    double step = 1e-5;       // central difference half-width
    double tolerance = 1e-4;  // max relative error per case
    int coordinates = 48;     // random coordinates checked per case (scalars always included)
    double inject = 0.0;      // added to every analytic component, to prove the check can fail
};

struct GradCheckCase {
    int index = 0;
    std::string kind;  // clip_inactive, clip_active, kl_full, kl_high_acc, kl_separate, sft
    bool constrained = true;
    int coordinates = 0;
    double max_rel_err = 0.0;
    double max_abs_grad = 0.0;
    bool pass = false;
};

struct GradCheckReport {
    std::vector<GradCheckCase> cases;
    int passed = 0;
    double max_rel_err = 0.0;
    double tolerance = 0.0;

    bool ok() const { return passed == static_cast<int>(cases.size()); }
    std::string to_text() const;
};

/// Relative error |a - n| / max(|a|, |n|, floor). The suite uses
/// floor = 1e-6 * max(1, |objective|).
double relative_error(double analytic, double numeric, double floor = 1e-6);

/// Central finite differences against the analytic surrogate and SFT
/// gradients on small random models; kinds cycle so every KL mode and both
/// sides of the clip are covered.
GradCheckReport run_gradcheck(const GradCheckOptions& opts = {});

}  // namespace care
