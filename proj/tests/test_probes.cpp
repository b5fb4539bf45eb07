#include <doctest.h>

#include <cmath>
#include <numeric>

#include "dlab/error.hpp"
#include "dlab/probes.hpp"
#include "dlab/rng.hpp"

using namespace dlab;

namespace {

AttentionMap random_map(Rng& rng, int pixels, int tokens) {
    AttentionMap m{pixels, tokens, std::vector<double>(static_cast<std::size_t>(pixels) * tokens)};
    for (int p = 0; p < pixels; ++p) {
        double s = 0.0;
        for (int k = 0; k < tokens; ++k) s += m.weights[p * tokens + k] = std::exp(2.0 * rng.gaussian());
        for (int k = 0; k < tokens; ++k) m.weights[p * tokens + k] /= s;
    }
    return m;
}

EdgeMap map_from(int rows, int cols, const std::vector<std::pair<int, int>>& on) {
    EdgeMap e{rows, cols, std::vector<std::uint8_t>(static_cast<std::size_t>(rows) * cols, 0)};
    for (auto [r, c] : on) e.on[r * cols + c] = 1;
    return e;
}

}  // namespace

TEST_CASE("canny: constant image has no edges") {
    EdgeMap e = canny_edges(LatentGrid(3, 16, 16, 0.3));
    CHECK(e.count() == 0);
}

TEST_CASE("canny: vertical step gives a single vertical line") {
    LatentGrid step(3, 16, 16, -1.0);
    for (int ch = 0; ch < 3; ++ch) {
        for (int r = 0; r < 16; ++r) {
            for (int c = 8; c < 16; ++c) step.at(ch, r, c) = 1.0;
        }
    }
    EdgeMap e = canny_edges(step);
    // Golden: the step sits between columns 7 and 8; NMS keeps column 8 only.
    for (int r = 0; r < 16; ++r) {
        for (int c = 0; c < 16; ++c) CHECK(e.at(r, c) == (c == 8));
    }
    CHECK(canny_edges(step) == e);
}

TEST_CASE("canny: parameter validation") {
    LatentGrid g(1, 8, 8);
    CHECK_THROWS_AS(canny_edges(g, {1.0, 0.3, 0.2}), ParameterError);
    CHECK_THROWS_AS(canny_edges(g, {1.0, 0.0, 0.2}), ParameterError);
}

TEST_CASE("edge_f1 examples") {
    EdgeMap a = map_from(8, 8, {{1, 1}, {1, 2}, {1, 3}, {1, 4}});
    CHECK(edge_f1(a, a, 0) == 1.0);

    EdgeMap far = map_from(8, 8, {{7, 7}});
    CHECK(edge_f1(a, far, 0) == 0.0);

    EdgeMap half = map_from(8, 8, {{1, 1}, {1, 2}});
    CHECK(edge_f1(a, half, 0) == doctest::Approx(2.0 / 3.0));

    EdgeMap empty = map_from(8, 8, {});
    CHECK(edge_f1(empty, empty, 1) == 1.0);
    CHECK(edge_f1(a, empty, 1) == 0.0);

    EdgeMap shifted = map_from(8, 8, {{2, 1}, {2, 2}, {2, 3}, {2, 4}});
    CHECK(edge_f1(a, shifted, 0) == 0.0);
    CHECK(edge_f1(a, shifted, 1) == 1.0);

    CHECK_THROWS_AS(edge_f1(a, map_from(8, 9, {}), 0), ShapeError);
}

TEST_CASE("edge_f1 is symmetric at tol 0") {
    Rng rng(21);
    for (int trial = 0; trial < 50; ++trial) {
        EdgeMap a{10, 10, std::vector<std::uint8_t>(100)}, b{10, 10, std::vector<std::uint8_t>(100)};
        for (auto& v : a.on) v = rng.uniform(0, 1) < 0.3;
        for (auto& v : b.on) v = rng.uniform(0, 1) < 0.3;
        CHECK(edge_f1(a, b, 0) == doctest::Approx(edge_f1(b, a, 0)).epsilon(1e-15));
    }
}

TEST_CASE("class_weights: uniform attention") {
    std::vector<TokenClass> tags{TokenClass::sos, TokenClass::sem, TokenClass::sem, TokenClass::sem,
                                 TokenClass::eos, TokenClass::eos, TokenClass::eos, TokenClass::eos};
    AttentionMap u{16, 8, std::vector<double>(128, 1.0 / 8.0)};
    ClassWeights w = class_weights(u, tags);
    CHECK(w.sos == doctest::Approx(1.0 / 8));
    CHECK(w.sem == doctest::Approx(1.0 / 8));
    CHECK(w.eos == doctest::Approx(1.0 / 8));
    CHECK(w.sos_total == doctest::Approx(1.0 / 8));
    CHECK(w.sem_total == doctest::Approx(3.0 / 8));
    CHECK(w.eos_total == doctest::Approx(4.0 / 8));

    Rng rng(3);
    ClassWeights r = class_weights(random_map(rng, 64, 8), tags);
    CHECK(std::fabs(r.sos_total + r.sem_total + r.eos_total - 1.0) < 1e-6);
}

TEST_CASE("attention_kl") {
    Rng rng(5);
    AttentionMap p = random_map(rng, 32, 8);
    CHECK(attention_kl(p, p) == 0.0);
    for (int trial = 0; trial < 20; ++trial) CHECK(attention_kl(random_map(rng, 32, 8), random_map(rng, 32, 8)) >= 0.0);

    // KL(P || uniform) = log L - mean row entropy.
    AttentionMap u{32, 8, std::vector<double>(256, 1.0 / 8.0)};
    double entropy = 0.0;
    for (int r = 0; r < 32; ++r) {
        for (int k = 0; k < 8; ++k) entropy -= p.at(r, k) * std::log(p.at(r, k));
    }
    entropy /= 32.0;
    CHECK(std::fabs(attention_kl(p, u) - (std::log(8.0) - entropy)) < 1e-6);

    CHECK_THROWS_AS(attention_kl(p, random_map(rng, 16, 8)), ShapeError);
}

TEST_CASE("l1_distance and cosine_alignment") {
    Rng rng(8);
    LatentGrid a(3, 4, 4);
    for (double& v : a.data()) v = rng.gaussian();
    CHECK(l1_distance(a, a) == 0.0);
    CHECK(l1_distance(LatentGrid(1, 3, 3, 0.25), LatentGrid(1, 3, 3, -0.5)) == doctest::Approx(0.75));
    CHECK_THROWS_AS(l1_distance(a, LatentGrid(3, 4, 5)), ShapeError);

    CHECK(cosine_alignment(a, a) == doctest::Approx(1.0));
    CHECK(cosine_alignment(a, axpby(-1.0, a, 0.0, a)) == doctest::Approx(-1.0));
    LatentGrid x(1, 1, 2), y(1, 1, 2);
    x.data()[0] = 1.0, x.data()[1] = 1.0;
    y.data()[0] = 1.0, y.data()[1] = -1.0;
    CHECK(std::fabs(cosine_alignment(x, y)) < 1e-9);
    CHECK_THROWS_AS(cosine_alignment(LatentGrid(1, 2, 2), LatentGrid(1, 2, 2)), DataError);
}

TEST_CASE("prompt_alignment: self-consistency over the bank") {
    Vocabulary vocab  = Vocabulary::standard();
    TemplateBank bank = make_template_bank(vocab, 16, 16);
    REQUIRE(bank.images.size() == 80);
    for (std::size_t i = 0; i < bank.images.size(); ++i) {
        AlignmentReport r = prompt_alignment(bank.images[i], bank.prompts[i], bank);
        CHECK(r.combined == 1.0);
    }
    CHECK_THROWS_AS(prompt_alignment(bank.images[0], bank.prompts[0], TemplateBank{}), ConfigurationError);
}

TEST_CASE("prompt_alignment: noise images score near chance on shape") {
    Vocabulary vocab  = Vocabulary::standard();
    TemplateBank bank = make_template_bank(vocab, 16, 16);
    Rng rng(31);
    std::vector<LatentGrid> imgs;
    std::vector<PromptSpec> ps;
    for (int i = 0; i < 800; ++i) {
        LatentGrid g(3, 16, 16);
        for (double& v : g.data()) v = rng.gaussian() * 0.5;
        imgs.push_back(std::move(g));
        ps.push_back(make_prompt(vocab, static_cast<int>(rng.below(8)), static_cast<int>(rng.below(10))));
    }
    AlignmentReport r = prompt_alignment(imgs, ps, bank);
    // Labels are independent of the images, so accuracy is 1/8 up to sampling error
    // (binomial sd ~ 0.012 at n = 800).
    CHECK(std::fabs(r.shape_accuracy - 0.125) < 0.05);
    CHECK(r.combined == doctest::Approx(0.5 * (r.shape_accuracy + r.attribute_accuracy)));
}

TEST_CASE("relative_score") {
    std::vector<double> v{3.0, 1.0, 2.0};
    auto s = relative_score(v);
    CHECK(s[0] == 1.0);
    CHECK(s[1] == 0.0);
    CHECK(s[2] == 0.5);
    CHECK_THROWS_AS(relative_score({2.0, 2.0}), DataError);

    Rng rng(17);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> x(10);
        for (double& e : x) e = rng.gaussian();
        double alpha = std::exp(rng.gaussian()), beta = rng.gaussian() * 5;
        std::vector<double> y(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = alpha * x[i] + beta;
        auto sx = relative_score(x), sy = relative_score(y);
        for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::fabs(sx[i] - sy[i]) < 1e-12);
    }
}

TEST_CASE("spearman") {
    CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
    CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
    CHECK(spearman({1, 2, 3, 4}, {1, 1, 2, 2}) == doctest::Approx(0.894427191));
}
