#pragma once

#include "subdiff/common.hpp"
#include "subdiff/time_schedule.hpp"

namespace subdiff {

// One draw from the forward transition kernel N(alpha(t) x0, h(t) I_D).
// t = 0 is the degenerate kernel and returns x0 exactly.
inline VectorXd forward_kernel_sample(const TimeSchedule& sched, const VectorXd& x0, double t,
                                      Rng& rng) {
    double a = sched.alpha(t);
    double h = sched.h(t);
    if (t == 0.0) return x0;
    return a * x0 + std::sqrt(h) * gaussian_vector(int(x0.size()), rng);
}

// Conditional score grad_{xt} log phi_t(xt | x0) = -(xt - alpha(t) x0) / h(t),
// the regression target of denoising score matching. Valid on [t0, T] only;
// below t0 the 1/h weight blows up and the domain is excluded.
inline VectorXd noise_score_target(const TimeSchedule& sched, const VectorXd& x0,
                                   const VectorXd& xt, double t) {
    if (t < sched.early_stop()) throw std::domain_error("noise_score_target: t < t0");
    double a = sched.alpha(t);
    double h = sched.h(t);
    return -(xt - a * x0) / h;
}

}  // namespace subdiff
