#pragma once

#include <string>

namespace meltr {

struct GradcheckOptions {
    // Test fixture: negate the engine gradient of the first composite before
    // comparison; the report must then fail.
    bool inject_sign_flip = false;
    int first_order_trials = 100;
    int hvp_trials = 25;
    int quad_instances = 50;
};

struct GradcheckReport {
    double worst_first_order = 0;  // vs central differences
    double worst_hvp = 0;          // vs FD of gradients
    double worst_quad_closed_form = 0;  // exact scheme vs analytic oracle
    double worst_quad_fd = 0;           // analytic oracle vs dense FD over phi
    bool pass_first_order = false;
    bool pass_hvp = false;
    bool pass_quad = false;

    bool passed() const { return pass_first_order && pass_hvp && pass_quad; }
    std::string summary() const;
};

/// Run the finite-difference suite (first order), the Hessian-vector suite and
/// the quadratic hypergradient oracle suite with pinned tolerances.
GradcheckReport run_gradcheck(const GradcheckOptions& opt = {});

}  // namespace meltr
