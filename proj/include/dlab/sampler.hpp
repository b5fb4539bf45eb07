#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dlab/denoiser.hpp"
#include "dlab/grid.hpp"
#include "dlab/prompt.hpp"
#include "dlab/schedule.hpp"

namespace dlab {

// How the condition is injected along the S sampled steps. The boundary `a`
// is compared against the 0-based step index i = rank - 1, so rank S is the
// first (noisiest) step and rank 1 the last.
//   drop_late : full CFG while i >= a, unconditional pass only while i < a
//   drop_early: mirrored (condition only while i < a)
//   switch_   : full CFG throughout; condition 1 while i >= a, condition 2 below
//   full      : full CFG throughout (same as drop_late with a = 0)
enum class GuidanceMode { drop_late, drop_early, switch_, full };

struct GuidancePolicy {
    double w = 7.5;
    int a    = 0;
    GuidanceMode mode = GuidanceMode::full;
};

const char* to_string(GuidanceMode mode);
GuidanceMode parse_mode(const std::string& s);

struct EvalCounter {
    int cond   = 0;
    int uncond = 0;
    int total() const { return cond + uncond; }
};

struct GuidedPrediction {
    LatentGrid eps;
    std::optional<LatentGrid> eps_cond;
    LatentGrid eps_uncond;
    // Attention of the conditional pass when it ran, else the unconditional one.
    AttentionMap attention;
    bool attention_conditional = false;
};

// uncond + w * (cond - uncond), elementwise.
LatentGrid guidance_combine(const LatentGrid& uncond, const LatentGrid& cond, double w);

// eps(null) + w * (eps(cond) - eps(null)); w == 0 skips the conditional pass.
GuidedPrediction cfg_predict(const DenoiserModel& model, int t, const LatentGrid& x, const TokenSequence& cond,
                             const TokenSequence& null_cond, double w, EvalCounter& counter,
                             const TokenSequence* untouched = nullptr);

struct Conditions {
    TokenSequence cond;
    std::optional<TokenSequence> cond2;  // required for switch_ mode
    TokenSequence null_cond;
    // Untouched sequences for key/value-only substitution.
    std::optional<TokenSequence> untouched;
    std::optional<TokenSequence> untouched2;
};

// Guided prediction at sampled-step rank in [1, S] under `policy`.
GuidedPrediction staged_predict(const DenoiserModel& model, const NoiseSchedule& sched, int rank, const LatentGrid& x,
                                const Conditions& conds, const GuidancePolicy& policy, EvalCounter& counter);

// Whether the conditional branch is active at `rank` for drop policies.
bool condition_active(const GuidancePolicy& policy, int rank);

struct TrajectoryRecord {
    int step_rank = 0;  // S..1 for sampled steps, 0 for the terminal record
    int t         = 0;  // timestep of `x`
    LatentGrid x;       // latent at timestep t
    std::optional<LatentGrid> eps_hat;
    std::optional<LatentGrid> eps_cond;
    std::optional<LatentGrid> eps_uncond;
    std::optional<AttentionMap> attention;
    bool attention_conditional = false;
    int cond_evals   = 0;
    int uncond_evals = 0;
};

// S + 1 records: one per sampled step (holding the latent the prediction was
// made from, starting with the initial noise), then the terminal x_0.
struct Trajectory {
    std::vector<TrajectoryRecord> records;
    GuidancePolicy policy;
    std::uint64_t seed = 0;
    ScheduleParams schedule;

    const LatentGrid& final_image() const { return records.back().x; }
    int cond_evals() const;
    int uncond_evals() const;
    int total_evals() const { return cond_evals() + uncond_evals(); }
};

Trajectory sample_trajectory(const DenoiserModel& model, const NoiseSchedule& sched, const GuidancePolicy& policy,
                             const Conditions& conds, std::uint64_t seed);

// 1 - evals(traj) / evals(baseline).
double eval_savings(const Trajectory& traj, const Trajectory& baseline);

// meta.json, manifest.csv and x_{t}.f32 per record into `dir`.
void export_trajectory(const Trajectory& traj, const std::string& dir);

}  // namespace dlab
