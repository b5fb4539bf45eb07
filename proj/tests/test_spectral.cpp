#include <doctest.h>

#include <cmath>
#include <complex>
#include <numbers>

#include "dlab/error.hpp"
#include "dlab/prompt.hpp"
#include "dlab/rng.hpp"
#include "dlab/spectral.hpp"

using namespace dlab;
using cd = std::complex<double>;

namespace {

LatentGrid random_plane(Rng& rng, int m, int n) {
    LatentGrid g(1, m, n);
    for (double& v : g.data()) v = rng.gaussian();
    return g;
}

// The defining double sum, evaluated directly.
cd direct_coeff(const LatentGrid& x, int u, int v) {
    const int M = x.rows(), N = x.cols();
    cd acc = 0.0;
    for (int k = 0; k < M; ++k) {
        for (int l = 0; l < N; ++l) {
            double ang = -2.0 * std::numbers::pi * (static_cast<double>(k) * u / M + static_cast<double>(l) * v / N);
            acc += x.at(0, k, l) * std::polar(1.0, ang);
        }
    }
    return acc / static_cast<double>(M * N);
}

}  // namespace

TEST_CASE("dft2: constant grid is DC only") {
    LatentGrid g(1, 8, 6, 2.5);
    Spectrum s = dft2(g);
    for (int u = 0; u < 8; ++u) {
        for (int v = 0; v < 6; ++v) {
            cd expect = (u == 0 && v == 0) ? cd(2.5, 0.0) : cd(0.0, 0.0);
            CHECK(std::abs(s.at(u, v) - expect) < 1e-12);
        }
    }
}

TEST_CASE("dft2: unit impulse has a flat spectrum") {
    LatentGrid g(1, 8, 8);
    g.at(0, 0, 0) = 1.0;
    Spectrum s = dft2(g);
    for (const auto& c : s.coeffs) CHECK(std::abs(c - cd(1.0 / 64.0, 0.0)) < 1e-15);
}

TEST_CASE("dft2 matches the direct double sum and satisfies Parseval") {
    Rng rng(10);
    LatentGrid g = random_plane(rng, 8, 8);
    Spectrum s   = dft2(g);
    double power = 0.0, energy = 0.0;
    for (int u = 0; u < 8; ++u) {
        for (int v = 0; v < 8; ++v) {
            cd direct = direct_coeff(g, u, v);
            CHECK(std::abs(s.at(u, v) - direct) < 1e-12);
            power += std::norm(direct);
        }
    }
    for (double v : g.data()) energy += v * v;
    CHECK(std::fabs(power - energy / 64.0) < 1e-9);
}

TEST_CASE("dft2: conjugate symmetry for real input") {
    Rng rng(11);
    LatentGrid g = random_plane(rng, 6, 10);
    Spectrum s   = dft2(g);
    for (int u = 0; u < 6; ++u) {
        for (int v = 0; v < 10; ++v) {
            CHECK(std::abs(s.at(u, v) - std::conj(s.at((6 - u) % 6, (10 - v) % 10))) < 1e-13);
        }
    }
}

TEST_CASE("dft2 is linear") {
    Rng rng(12);
    for (int trial = 0; trial < 10; ++trial) {
        LatentGrid x = random_plane(rng, 12, 12), y = random_plane(rng, 12, 12);
        double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2);
        Spectrum lhs = dft2(axpby(a, x, b, y));
        Spectrum sx = dft2(x), sy = dft2(y);
        for (std::size_t i = 0; i < lhs.coeffs.size(); ++i) {
            CHECK(std::abs(lhs.coeffs[i] - (a * sx.coeffs[i] + b * sy.coeffs[i])) < 1e-10);
        }
    }
}

TEST_CASE("idft2 inverts dft2") {
    Rng rng(13);
    LatentGrid g = random_plane(rng, 16, 16);
    double imag  = 1.0;
    LatentGrid back = idft2(dft2(g), &imag);
    double worst = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) worst = std::max(worst, std::fabs(back.data()[i] - g.data()[i]));
    CHECK(worst < 1e-9);
    CHECK(imag < 1e-9);

    Spectrum zero{8, 8, std::vector<cd>(64, 0.0)};
    LatentGrid back_zero = idft2(zero);
    for (double v : back_zero.data()) CHECK(v == 0.0);
}

TEST_CASE("idft2: a conjugate bin pair is a real sinusoid") {
    const int M = 8, N = 8, u0 = 1, v0 = 2;
    const cd c(0.3, -0.2);
    Spectrum s{M, N, std::vector<cd>(M * N, 0.0)};
    s.at(u0, v0)                       = c;
    s.at((M - u0) % M, (N - v0) % N) = std::conj(c);
    double imag  = 1.0;
    LatentGrid x = idft2(s, &imag);
    CHECK(imag < 1e-12);
    for (int k = 0; k < M; ++k) {
        for (int l = 0; l < N; ++l) {
            double ang = 2.0 * std::numbers::pi * (static_cast<double>(k) * u0 / M + static_cast<double>(l) * v0 / N);
            double expect = 2.0 * (c * std::polar(1.0, ang)).real();
            CHECK(x.at(0, k, l) == doctest::Approx(expect).epsilon(1e-12));
        }
    }
}

TEST_CASE("band mask partitions bins, keeps DC low and is conjugation closed") {
    for (auto [m, n] : {std::pair{16, 16}, std::pair{8, 12}, std::pair{7, 9}}) {
        BandMask mask = make_band_mask(m, n, 0.2);
        CHECK(mask.is_low(0, 0));
        int floor_count = static_cast<int>(std::floor(0.2 * m * n));
        CHECK(mask.low_count() >= floor_count);
        // Only the boundary tie group may push the count past the floor.
        double r_max = 0.0;
        for (int u = 0; u < m; ++u) {
            for (int v = 0; v < n; ++v) {
                if (mask.is_low(u, v)) r_max = std::max(r_max, radial_frequency(u, v, m, n));
            }
        }
        int inner = 0;
        for (int u = 0; u < m; ++u) {
            for (int v = 0; v < n; ++v) inner += mask.is_low(u, v) && radial_frequency(u, v, m, n) < r_max;
        }
        CHECK(inner <= floor_count);
        for (int u = 0; u < m; ++u) {
            for (int v = 0; v < n; ++v) CHECK(mask.is_low(u, v) == mask.is_low((m - u) % m, (n - v) % n));
        }
    }
    CHECK_THROWS_AS(make_band_mask(8, 8, 0.0), ParameterError);
    CHECK_THROWS_AS(make_band_mask(8, 8, 1.0), ParameterError);
}

TEST_CASE("band mask selects the smallest radii") {
    BandMask mask = make_band_mask(16, 16, 0.2);
    double max_low = 0.0, min_high = 1e9;
    for (int u = 0; u < 16; ++u) {
        for (int v = 0; v < 16; ++v) {
            double r = radial_frequency(u, v, 16, 16);
            if (mask.is_low(u, v)) {
                max_low = std::max(max_low, r);
            } else {
                min_high = std::min(min_high, r);
            }
        }
    }
    CHECK(max_low <= min_high);
}

TEST_CASE("band_split: partition and special images") {
    Rng rng(14);
    LatentGrid x(3, 16, 16);
    for (double& v : x.data()) v = rng.gaussian();
    BandSplit sp = band_split(x, 0.2);
    LatentGrid sum = axpby(1.0, sp.low, 1.0, sp.high);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::fabs(sum.data()[i] - x.data()[i]) < 1e-9);

    LatentGrid flat(3, 16, 16, -0.4);
    BandSplit fs = band_split(flat, 0.2);
    for (std::size_t i = 0; i < flat.size(); ++i) {
        CHECK(std::fabs(fs.low.data()[i] - flat.data()[i]) < 1e-12);
        CHECK(std::fabs(fs.high.data()[i]) < 1e-12);
    }

    // Nyquist checkerboard: all energy at the max-radius bin, hence high band.
    LatentGrid board(1, 16, 16);
    for (int r = 0; r < 16; ++r) {
        for (int c = 0; c < 16; ++c) board.at(0, r, c) = ((r + c) % 2 == 0) ? 1.0 : -1.0;
    }
    Spectrum bs = dft2(board);
    CHECK(std::abs(bs.at(8, 8) - cd(1.0, 0.0)) < 1e-12);
    BandSplit cb = band_split(board, 0.2);
    CHECK(l2_norm(cb.low) < 1e-10);
    CHECK(std::fabs(l2_norm(cb.high) - l2_norm(board)) < 1e-10);

    CHECK_THROWS_AS(band_split(x, 1.5), ParameterError);
}

TEST_CASE("verify_noise_concentration: 1x1 and small grids") {
    ConcentrationReport one = verify_noise_concentration(1, 1, 20000, 3);
    CHECK(one.expected == 1.0);
    CHECK(std::fabs(one.mean_bin_power - 1.0) < 0.05);

    ConcentrationReport r = verify_noise_concentration(16, 16, 400, 4);
    CHECK(std::fabs(r.mean_bin_power / r.expected - 1.0) < 0.02);
    CHECK(r.violation_rate <= 0.05);
    CHECK(r.max_bin_power > r.expected);

    CHECK_THROWS_AS(verify_noise_concentration(0, 8, 200, 1), ParameterError);
    CHECK_THROWS_AS(verify_noise_concentration(8, 8, 99, 1), ParameterError);
}

TEST_CASE("verify_noise_concentration is reproducible") {
    ConcentrationReport a = verify_noise_concentration(8, 8, 150, 42);
    ConcentrationReport b = verify_noise_concentration(8, 8, 150, 42);
    CHECK(a.mean_bin_power == b.mean_bin_power);
    CHECK(a.max_bin_power == b.max_bin_power);
    CHECK(a.violation_rate == b.violation_rate);
}

TEST_CASE("corruption_curves: t=0 has zero variation and closed-form expectation holds") {
    Vocabulary vocab = Vocabulary::standard();
    auto prompts     = build_promptset({8, 6, 4, 40}, 3);
    auto data        = make_dataset(vocab, prompts, 1, 9, 16, 16);
    std::vector<LatentGrid> batch;
    for (const auto& e : data) batch.push_back(e.image);
    NoiseSchedule sched = build_schedule({});
    CurveTable table    = corruption_curves(batch, sched, 0.2, 77);

    CHECK(table.at(0, Band::low).variation_ratio == 0.0);
    CHECK(table.at(0, Band::high).variation_ratio == 0.0);
    CHECK(table.flagged.empty());

    // E||x_t^B - x0^B||^2 / ||x0^B||^2 = (1 - sqrt(ab))^2 + (1 - ab) * C * |B| / ||x0^B||^2
    BandMask mask = make_band_mask(16, 16, 0.2);
    const double low_bins = mask.low_count(), high_bins = 256.0 - low_bins;
    for (int t : {200, 500, 800}) {
        double ab = sched.alpha_bar[t];
        for (Band b : {Band::low, Band::high}) {
            double expect = 0.0;
            for (const auto& x : batch) {
                BandSplit sp = band_split(x, mask);
                double n2    = std::pow(l2_norm(b == Band::low ? sp.low : sp.high), 2);
                double bins  = b == Band::low ? low_bins : high_bins;
                expect += std::pow(1.0 - std::sqrt(ab), 2) + (1.0 - ab) * 3.0 * bins / n2;
            }
            expect /= static_cast<double>(batch.size());
            CHECK(std::fabs(table.at(t, b).mean_sq_ratio / expect - 1.0) < 0.05);
        }
    }
}

TEST_CASE("corruption_curves flags images with an empty band") {
    NoiseSchedule sched = build_schedule({1000, 1e-4, 0.02, 10});
    std::vector<LatentGrid> batch{LatentGrid(1, 8, 8, 0.5)};
    CurveTable table = corruption_curves(batch, sched, 0.2, 1);
    REQUIRE(table.flagged.size() == 1);
    CHECK(table.flagged[0].second == Band::high);
    CHECK(table.at(100, Band::high).n_images == 0);
    CHECK(table.at(100, Band::low).n_images == 1);
    CHECK_THROWS_AS(corruption_curves({}, sched, 0.2, 1), DataError);
}
