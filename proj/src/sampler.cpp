#include "dlab/sampler.hpp"

#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "dlab/error.hpp"
#include "dlab/rng.hpp"

namespace dlab {

const char* to_string(GuidanceMode mode) {
    switch (mode) {
        case GuidanceMode::drop_late: return "drop-late";
        case GuidanceMode::drop_early: return "drop-early";
        case GuidanceMode::switch_: return "switch";
        case GuidanceMode::full: return "full";
    }
    return "?";
}

GuidanceMode parse_mode(const std::string& s) {
    if (s == "drop-late" || s == "DROP_LATE") return GuidanceMode::drop_late;
    if (s == "drop-early" || s == "DROP_EARLY") return GuidanceMode::drop_early;
    if (s == "switch" || s == "SWITCH") return GuidanceMode::switch_;
    if (s == "full" || s == "FULL") return GuidanceMode::full;
    throw ParameterError("unknown guidance mode '" + s + "'");
}

LatentGrid guidance_combine(const LatentGrid& uncond, const LatentGrid& cond, double w) {
    require_same_shape(uncond, cond, "guidance_combine");
    LatentGrid out = uncond;
    auto o = out.data();
    auto c = cond.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += w * (c[i] - o[i]);
    return out;
}

GuidedPrediction cfg_predict(const DenoiserModel& model, int t, const LatentGrid& x, const TokenSequence& cond,
                             const TokenSequence& null_cond, double w, EvalCounter& counter,
                             const TokenSequence* untouched) {
    NoisePrediction un = predict_noise(model, t, x, null_cond);
    ++counter.uncond;
    if (w == 0.0) {
        GuidedPrediction out{un.eps, std::nullopt, un.eps, std::move(un.attention), false};
        return out;
    }
    NoisePrediction co = predict_noise(model, t, x, cond, untouched);
    ++counter.cond;
    GuidedPrediction out{guidance_combine(un.eps, co.eps, w), co.eps, un.eps, std::move(co.attention), true};
    return out;
}

bool condition_active(const GuidancePolicy& policy, int rank) {
    int index = rank - 1;
    switch (policy.mode) {
        case GuidanceMode::drop_late: return index >= policy.a;
        case GuidanceMode::drop_early: return index < policy.a;
        case GuidanceMode::switch_:
        case GuidanceMode::full: return true;
    }
    return true;
}

GuidedPrediction staged_predict(const DenoiserModel& model, const NoiseSchedule& sched, int rank, const LatentGrid& x,
                                const Conditions& conds, const GuidancePolicy& policy, EvalCounter& counter) {
    const int S = sched.sample_steps();
    if (policy.a < 0 || policy.a > S) {
        throw ParameterError("staged_predict: a = " + std::to_string(policy.a) + " outside [0, " +
                             std::to_string(S) + "]");
    }
    if (rank < 1 || rank > S) {
        throw ParameterError("staged_predict: rank " + std::to_string(rank) + " outside [1, " + std::to_string(S) +
                             "]");
    }
    const int t = sched.timestep_at_rank(rank);
    const TokenSequence* untouched = conds.untouched ? &*conds.untouched : nullptr;

    if (policy.mode == GuidanceMode::switch_) {
        if (!conds.cond2) throw ConfigurationError("switch mode needs a second condition");
        bool first = rank - 1 >= policy.a;
        const TokenSequence& c = first ? conds.cond : *conds.cond2;
        const TokenSequence* u = first ? untouched : (conds.untouched2 ? &*conds.untouched2 : nullptr);
        return cfg_predict(model, t, x, c, conds.null_cond, policy.w, counter, u);
    }
    if (condition_active(policy, rank)) {
        return cfg_predict(model, t, x, conds.cond, conds.null_cond, policy.w, counter, untouched);
    }
    return cfg_predict(model, t, x, conds.cond, conds.null_cond, 0.0, counter);
}

int Trajectory::cond_evals() const {
    int n = 0;
    for (const auto& r : records) n += r.cond_evals;
    return n;
}

int Trajectory::uncond_evals() const {
    int n = 0;
    for (const auto& r : records) n += r.uncond_evals;
    return n;
}

Trajectory sample_trajectory(const DenoiserModel& model, const NoiseSchedule& sched, const GuidancePolicy& policy,
                             const Conditions& conds, std::uint64_t seed) {
    if (policy.mode == GuidanceMode::switch_ && !conds.cond2) {
        throw ConfigurationError("sample_trajectory: switch mode requires cond2");
    }
    if (policy.mode != GuidanceMode::switch_ && conds.cond2) {
        throw ConfigurationError("sample_trajectory: cond2 is only valid in switch mode");
    }
    const auto& h = model.hyper;
    const int S   = sched.sample_steps();

    Trajectory traj;
    traj.policy   = policy;
    traj.seed     = seed;
    traj.schedule = sched.params;
    traj.records.reserve(S + 1);

    Rng rng(seed);
    LatentGrid x(h.channels, h.rows, h.cols);
    for (double& v : x.data()) v = rng.gaussian();

    for (int rank = S; rank >= 1; --rank) {
        const int t      = sched.timestep_at_rank(rank);
        const int t_prev = sched.timestep_at_rank(rank - 1);
        EvalCounter counter;
        GuidedPrediction pred = staged_predict(model, sched, rank, x, conds, policy, counter);

        TrajectoryRecord rec;
        rec.step_rank  = rank;
        rec.t          = t;
        rec.x          = x;
        rec.eps_hat    = pred.eps;
        rec.eps_cond   = pred.eps_cond;
        rec.eps_uncond = pred.eps_uncond;
        rec.attention  = std::move(pred.attention);
        rec.attention_conditional = pred.attention_conditional;
        rec.cond_evals   = counter.cond;
        rec.uncond_evals = counter.uncond;

        x = ddim_step(x, t, t_prev, pred.eps, sched);
        traj.records.push_back(std::move(rec));
    }
    TrajectoryRecord last;
    last.step_rank = 0;
    last.t         = 0;
    last.x         = std::move(x);
    traj.records.push_back(std::move(last));
    return traj;
}

double eval_savings(const Trajectory& traj, const Trajectory& baseline) {
    int base = baseline.total_evals();
    if (base == 0) throw AccountingError("eval_savings: baseline executed no forward passes");
    return 1.0 - static_cast<double>(traj.total_evals()) / static_cast<double>(base);
}

void export_trajectory(const Trajectory& traj, const std::string& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::ordered_json meta;
    meta["schedule"] = {{"train_steps", traj.schedule.train_steps},
                        {"beta_min", traj.schedule.beta_min},
                        {"beta_max", traj.schedule.beta_max},
                        {"sample_steps", traj.schedule.sample_steps}};
    meta["policy"]       = {{"w", traj.policy.w}, {"a", traj.policy.a}, {"mode", to_string(traj.policy.mode)}};
    meta["seed"]         = traj.seed;
    meta["cond_evals"]   = traj.cond_evals();
    meta["uncond_evals"] = traj.uncond_evals();
    meta["records"]      = traj.records.size();
    {
        std::ofstream out(dir + "/meta.json");
        if (!out) throw DataError("cannot write " + dir + "/meta.json");
        out << meta.dump(2) << '\n';
    }
    std::ofstream man(dir + "/manifest.csv");
    if (!man) throw DataError("cannot write " + dir + "/manifest.csv");
    man << "step_rank,t,cond_evals,uncond_evals\n";
    for (const auto& r : traj.records) {
        man << r.step_rank << ',' << r.t << ',' << r.cond_evals << ',' << r.uncond_evals << '\n';
        write_f32(r.x, dir + "/x_" + std::to_string(r.t) + ".f32");
    }
}

}  // namespace dlab
