#include "dlab/schedule.hpp"

#include <cmath>
#include <string>

#include "dlab/error.hpp"

namespace dlab {

NoiseSchedule build_schedule(const ScheduleParams& p) {
    if (!(p.beta_min > 0.0 && p.beta_min < p.beta_max && p.beta_max < 1.0)) {
        throw ParameterError("build_schedule: require 0 < beta_min < beta_max < 1");
    }
    if (p.train_steps < 1 || p.sample_steps < 1 || p.sample_steps > p.train_steps) {
        throw ParameterError("build_schedule: require 1 <= sample_steps <= train_steps");
    }
    if (p.train_steps % p.sample_steps != 0) {
        throw ParameterError("build_schedule: sample_steps must divide train_steps (" +
                             std::to_string(p.train_steps) + " % " + std::to_string(p.sample_steps) + " != 0)");
    }

    NoiseSchedule s;
    s.params = p;
    s.alpha_bar.resize(p.train_steps + 1);
    s.alpha_bar[0] = 1.0;
    for (int t = 1; t <= p.train_steps; ++t) {
        // beta_1 = beta_min, beta_T = beta_max
        double frac = p.train_steps == 1 ? 1.0 : static_cast<double>(t - 1) / (p.train_steps - 1);
        double beta = p.beta_min + (p.beta_max - p.beta_min) * frac;
        s.alpha_bar[t] = s.alpha_bar[t - 1] * (1.0 - beta);
    }

    int stride = p.train_steps / p.sample_steps;
    s.ddim_steps.reserve(p.sample_steps);
    for (int k = 1; k <= p.sample_steps; ++k) s.ddim_steps.push_back(k * stride);
    return s;
}

namespace {

void check_timestep(int t, const NoiseSchedule& sched, const char* what) {
    if (t < 0 || t > sched.train_steps()) {
        throw ParameterError(std::string(what) + ": timestep " + std::to_string(t) + " outside [0, " +
                             std::to_string(sched.train_steps()) + "]");
    }
}

}  // namespace

LatentGrid forward_noise(const LatentGrid& x0, int t, const LatentGrid& eps, const NoiseSchedule& sched) {
    require_same_shape(x0, eps, "forward_noise");
    check_timestep(t, sched, "forward_noise");
    double ab = sched.alpha_bar[t];
    return axpby(std::sqrt(ab), x0, std::sqrt(1.0 - ab), eps);
}

LatentGrid ddim_step(const LatentGrid& x_t, int t, int t_prev, const LatentGrid& eps_hat, const NoiseSchedule& sched) {
    require_same_shape(x_t, eps_hat, "ddim_step");
    check_timestep(t, sched, "ddim_step");
    check_timestep(t_prev, sched, "ddim_step");
    if (t_prev > t) {
        throw OrderingError("ddim_step: t_prev (" + std::to_string(t_prev) + ") must not exceed t (" +
                            std::to_string(t) + ")");
    }
    if (t_prev == t) return x_t;

    double ab      = sched.alpha_bar[t];
    double ab_prev = sched.alpha_bar[t_prev];
    double sig     = std::sqrt(1.0 - ab);
    double inv_sa  = 1.0 / std::sqrt(ab);
    double sa_prev = std::sqrt(ab_prev);
    double sig_prev = std::sqrt(1.0 - ab_prev);

    LatentGrid out = x_t;
    auto o = out.data();
    auto e = eps_hat.data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        double x0_hat = (o[i] - sig * e[i]) * inv_sa;
        o[i] = sa_prev * x0_hat + sig_prev * e[i];
    }
    return out;
}

}  // namespace dlab
