#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <string>

#include "dlab/error.hpp"
#include "dlab/rng.hpp"
#include "dlab/sampler.hpp"

using namespace dlab;

namespace {

struct Fixture {
    Vocabulary vocab = Vocabulary::standard();
    PromptEncoder enc{vocab, EncoderConfig{}};
    NoiseSchedule sched = build_schedule({});
    DenoiserModel model = init_model({});
    TokenSequence cond  = enc.encode(make_prompt(vocab, 0, 0));
    TokenSequence cond2 = enc.encode(make_prompt(vocab, 3, 7));
    TokenSequence null_cond = enc.null_condition();

    Conditions conds() const { return Conditions{cond, std::nullopt, null_cond, std::nullopt, std::nullopt}; }
    Conditions switched() const { return Conditions{cond, cond2, null_cond, std::nullopt, std::nullopt}; }

    LatentGrid noise(std::uint64_t seed) const {
        Rng rng(seed);
        LatentGrid x(3, 16, 16);
        for (double& v : x.data()) v = rng.gaussian();
        return x;
    }
};

bool same_images(const Trajectory& a, const Trajectory& b) {
    if (a.records.size() != b.records.size()) return false;
    for (std::size_t i = 0; i < a.records.size(); ++i) {
        if (!(a.records[i].x == b.records[i].x)) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("guidance_combine examples") {
    LatentGrid u(1, 1, 1, 0.1), c(1, 1, 1, 0.3);
    CHECK(guidance_combine(u, c, 7.5).data()[0] == doctest::Approx(1.6).epsilon(1e-12));
    CHECK(guidance_combine(u, c, 0.0) == u);
    CHECK(guidance_combine(u, c, 1.0).data()[0] == doctest::Approx(0.3).epsilon(1e-15));
    CHECK_THROWS_AS(guidance_combine(u, LatentGrid(1, 1, 2), 1.0), ShapeError);
}

TEST_CASE("cfg_predict counts passes and skips the conditional one at w = 0") {
    Fixture f;
    LatentGrid x = f.noise(1);
    EvalCounter n0;
    GuidedPrediction p0 = cfg_predict(f.model, 500, x, f.cond, f.null_cond, 0.0, n0);
    CHECK(n0.cond == 0);
    CHECK(n0.uncond == 1);
    CHECK(!p0.eps_cond);
    CHECK(p0.eps == predict_noise(f.model, 500, x, f.null_cond).eps);

    EvalCounter n1;
    GuidedPrediction p1 = cfg_predict(f.model, 500, x, f.cond, f.null_cond, 7.5, n1);
    CHECK(n1.cond == 1);
    CHECK(n1.uncond == 1);
    REQUIRE(p1.eps_cond);
    CHECK(*p1.eps_cond == predict_noise(f.model, 500, x, f.cond).eps);
    CHECK(p1.eps == guidance_combine(p1.eps_uncond, *p1.eps_cond, 7.5));
    CHECK(p1.attention_conditional);
}

TEST_CASE("condition_active: boundary is the 0-based step index") {
    auto active = [](GuidancePolicy p) {
        int n = 0;
        for (int rank = 1; rank <= 50; ++rank) n += condition_active(p, rank);
        return n;
    };
    for (int a : {0, 1, 10, 20, 49, 50}) {
        CHECK(active({7.5, a, GuidanceMode::drop_late}) == 50 - a);
        CHECK(active({7.5, a, GuidanceMode::drop_early}) == a);
        CHECK(active({7.5, a, GuidanceMode::full}) == 50);
    }
    // drop_late keeps the noisiest steps conditional.
    CHECK(condition_active({7.5, 20, GuidanceMode::drop_late}, 50));
    CHECK(!condition_active({7.5, 20, GuidanceMode::drop_late}, 1));
}

TEST_CASE("staged_predict validates its arguments") {
    Fixture f;
    LatentGrid x = f.noise(2);
    EvalCounter n;
    CHECK_THROWS_AS(staged_predict(f.model, f.sched, 1, x, f.conds(), {7.5, 51, GuidanceMode::drop_late}, n),
                    ParameterError);
    CHECK_THROWS_AS(staged_predict(f.model, f.sched, 1, x, f.conds(), {7.5, -1, GuidanceMode::drop_late}, n),
                    ParameterError);
    CHECK_THROWS_AS(staged_predict(f.model, f.sched, 0, x, f.conds(), {7.5, 0, GuidanceMode::full}, n),
                    ParameterError);
    CHECK_THROWS_AS(staged_predict(f.model, f.sched, 51, x, f.conds(), {7.5, 0, GuidanceMode::full}, n),
                    ParameterError);
    CHECK_THROWS_AS(staged_predict(f.model, f.sched, 3, x, f.conds(), {7.5, 0, GuidanceMode::switch_}, n),
                    ConfigurationError);
}

TEST_CASE("sample_trajectory: layout and attention normalization") {
    Fixture f;
    Trajectory tr = sample_trajectory(f.model, f.sched, {7.5, 0, GuidanceMode::full}, f.conds(), 9);
    REQUIRE(tr.records.size() == 51);
    CHECK(tr.records.front().step_rank == 50);
    CHECK(tr.records.front().t == 1000);
    CHECK(tr.records.front().x == f.noise(9));
    CHECK(tr.records.back().step_rank == 0);
    CHECK(tr.records.back().t == 0);
    CHECK(!tr.records.back().eps_hat);
    CHECK(tr.final_image().all_finite());
    for (std::size_t i = 0; i + 1 < tr.records.size(); ++i) {
        const auto& r = tr.records[i];
        CHECK(r.t == 1000 - 20 * static_cast<int>(i));
        REQUIRE(r.attention);
        for (int p = 0; p < r.attention->pixels; ++p) {
            double s = 0.0;
            for (int k = 0; k < r.attention->tokens; ++k) s += r.attention->at(p, k);
            CHECK(std::fabs(s - 1.0) <= 1e-6);
        }
    }
    CHECK(tr.cond_evals() == 50);
    CHECK(tr.uncond_evals() == 50);
}

TEST_CASE("sample_trajectory: determinism and seed sensitivity") {
    Fixture f;
    GuidancePolicy pol{7.5, 20, GuidanceMode::drop_late};
    Trajectory a = sample_trajectory(f.model, f.sched, pol, f.conds(), 4);
    Trajectory b = sample_trajectory(f.model, f.sched, pol, f.conds(), 4);
    Trajectory c = sample_trajectory(f.model, f.sched, pol, f.conds(), 5);
    CHECK(same_images(a, b));
    CHECK(!(a.final_image() == c.final_image()));
}

TEST_CASE("drop_late accounting: a = 0 equals the baseline and savings are a / 2S") {
    Fixture f;
    Trajectory base = sample_trajectory(f.model, f.sched, {7.5, 0, GuidanceMode::full}, f.conds(), 12);
    Trajectory a0   = sample_trajectory(f.model, f.sched, {7.5, 0, GuidanceMode::drop_late}, f.conds(), 12);
    CHECK(same_images(base, a0));
    CHECK(eval_savings(a0, base) == 0.0);
    for (int a : {10, 20, 30, 50}) {
        Trajectory tr = sample_trajectory(f.model, f.sched, {7.5, a, GuidanceMode::drop_late}, f.conds(), 12);
        CHECK(tr.cond_evals() == 50 - a);
        CHECK(tr.uncond_evals() == 50);
        CHECK(eval_savings(tr, base) == doctest::Approx(a / 100.0).epsilon(1e-15));
        // Steps before the boundary are untouched.
        for (int i = 0; i < 50 - a; ++i) CHECK(tr.records[i].x == base.records[i].x);
    }
    Trajectory none = sample_trajectory(f.model, f.sched, {7.5, 50, GuidanceMode::drop_late}, f.conds(), 12);
    Trajectory w0   = sample_trajectory(f.model, f.sched, {0.0, 0, GuidanceMode::full}, f.conds(), 12);
    CHECK(same_images(none, w0));
}

TEST_CASE("switch mode boundaries reduce to single-condition runs") {
    Fixture f;
    Conditions only2 = f.conds();
    only2.cond       = f.cond2;
    Trajectory full1 = sample_trajectory(f.model, f.sched, {7.5, 0, GuidanceMode::full}, f.conds(), 3);
    Trajectory full2 = sample_trajectory(f.model, f.sched, {7.5, 0, GuidanceMode::full}, only2, 3);
    Trajectory s0    = sample_trajectory(f.model, f.sched, {7.5, 0, GuidanceMode::switch_}, f.switched(), 3);
    Trajectory sS    = sample_trajectory(f.model, f.sched, {7.5, 50, GuidanceMode::switch_}, f.switched(), 3);
    CHECK(same_images(s0, full1));
    CHECK(same_images(sS, full2));
    CHECK(s0.total_evals() == 100);

    CHECK_THROWS_AS(sample_trajectory(f.model, f.sched, {7.5, 0, GuidanceMode::switch_}, f.conds(), 3),
                    ConfigurationError);
    CHECK_THROWS_AS(sample_trajectory(f.model, f.sched, {7.5, 0, GuidanceMode::full}, f.switched(), 3),
                    ConfigurationError);
}

TEST_CASE("eval_savings rejects an empty baseline") {
    Trajectory empty;
    CHECK_THROWS_AS(eval_savings(empty, empty), AccountingError);
}

TEST_CASE("parse_mode roundtrip") {
    for (GuidanceMode m : {GuidanceMode::drop_late, GuidanceMode::drop_early, GuidanceMode::switch_, GuidanceMode::full}) {
        CHECK(parse_mode(to_string(m)) == m);
    }
    CHECK_THROWS_AS(parse_mode("sometimes"), ParameterError);
}

TEST_CASE("export_trajectory writes a manifest and one latent per record") {
    Fixture f;
    Trajectory tr = sample_trajectory(f.model, f.sched, {7.5, 10, GuidanceMode::drop_late}, f.conds(), 8);
    auto dir = std::filesystem::temp_directory_path() / "dlab_test_traj";
    std::filesystem::remove_all(dir);
    export_trajectory(tr, dir.string());
    CHECK(std::filesystem::exists(dir / "meta.json"));
    std::ifstream man(dir / "manifest.csv");
    std::string line;
    std::getline(man, line);
    CHECK(line == "step_rank,t,cond_evals,uncond_evals");
    int rows = 0;
    while (std::getline(man, line)) ++rows;
    CHECK(rows == 51);
    LatentGrid back = read_f32(dir.string() + "/x_0.f32", 3, 16, 16);
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back.data()[i] == static_cast<double>(static_cast<float>(tr.final_image().data()[i])));
    }
    std::filesystem::remove_all(dir);
}
