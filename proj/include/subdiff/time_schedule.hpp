#pragma once

#include <cmath>
#include <stdexcept>
#include <utility>

#include "subdiff/common.hpp"

namespace subdiff {

// Variance-preserving OU schedule with unit drift weight:
//   alpha(t) = exp(-t/2), h(t) = 1 - exp(-t), so h + alpha^2 = 1.
// The horizon is [0, T], training/sampling live on [t0, T] and
// (T - t0)/eta must be an integer number of backward steps.
class TimeSchedule {
  public:
    TimeSchedule(double T, double t0, double eta, double g = 1.0)
        : T_(T), t0_(t0), eta_(eta) {
        if (g != 1.0) throw std::invalid_argument("TimeSchedule: only g == 1 is supported");
        if (!(T > 0.0)) throw std::invalid_argument("TimeSchedule: T must be positive");
        if (!(t0 > 0.0 && t0 < T)) throw std::invalid_argument("TimeSchedule: need 0 < t0 < T");
        if (!(eta > 0.0)) throw std::invalid_argument("TimeSchedule: eta must be positive");
        double steps = (T - t0) / eta;
        double rounded = std::round(steps);
        if (std::abs(steps - rounded) > 1e-9 * std::max(1.0, steps) || rounded < 1.0)
            throw std::invalid_argument("TimeSchedule: (T - t0)/eta must be a positive integer");
        n_steps_ = static_cast<long>(rounded);
    }

    double horizon() const { return T_; }
    double early_stop() const { return t0_; }
    double step() const { return eta_; }
    long backward_steps() const { return n_steps_; }

    double alpha(double t) const {
        check_time(t);
        return std::exp(-0.5 * t);
    }

    double h(double t) const {
        check_time(t);
        // -expm1(-t) = 1 - exp(-t), accurate for small t
        return -std::expm1(-t);
    }

    std::pair<double, double> alpha_h(double t) const { return {alpha(t), h(t)}; }

    bool in_training_window(double t) const { return t >= t0_ && t <= T_; }

  private:
    void check_time(double t) const {
        if (t < 0.0 || t > T_) throw std::domain_error("TimeSchedule: t outside [0, T]");
    }

    double T_;
    double t0_;
    double eta_;
    long n_steps_;
};

}  // namespace subdiff
