#pragma once

#include <vector>

#include "dlab/grid.hpp"

namespace dlab {

struct ScheduleParams {
    int train_steps  = 1000;
    double beta_min  = 1e-4;
    double beta_max  = 0.02;
    int sample_steps = 50;
};

// alpha_bar[t] for t = 0..train_steps (alpha_bar[0] == 1) plus the uniform
// DDIM subsequence {T/S, 2T/S, ..., T}.
struct NoiseSchedule {
    ScheduleParams params;
    std::vector<double> alpha_bar;
    std::vector<int> ddim_steps;

    int train_steps() const { return params.train_steps; }
    int sample_steps() const { return static_cast<int>(ddim_steps.size()); }

    // Timestep at sampled-step rank in [1, S]; rank 0 maps to t = 0.
    int timestep_at_rank(int rank) const { return rank == 0 ? 0 : ddim_steps.at(rank - 1); }
};

NoiseSchedule build_schedule(const ScheduleParams& params);

// sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps
LatentGrid forward_noise(const LatentGrid& x0, int t, const LatentGrid& eps, const NoiseSchedule& sched);

// Deterministic (eta = 0) DDIM update from t to t_prev <= t:
//   x0_hat = (x_t - sqrt(1 - ab_t) * eps_hat) / sqrt(ab_t)
//   x_prev = sqrt(ab_prev) * x0_hat + sqrt(1 - ab_prev) * eps_hat
LatentGrid ddim_step(const LatentGrid& x_t, int t, int t_prev, const LatentGrid& eps_hat, const NoiseSchedule& sched);

}  // namespace dlab
