#pragma once

#include <complex>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dlab/grid.hpp"
#include "dlab/schedule.hpp"

namespace dlab {

// F(u, v) = 1/(MN) * sum_{k,l} x_kl exp(-2 pi i (ku/M + lv/N)), row-major.
struct Spectrum {
    int rows = 0;
    int cols = 0;
    std::vector<std::complex<double>> coeffs;

    std::complex<double>& at(int u, int v) { return coeffs[static_cast<std::size_t>(u) * cols + v]; }
    const std::complex<double>& at(int u, int v) const { return coeffs[static_cast<std::size_t>(u) * cols + v]; }
};

// Single-channel grid in, spectrum out. Evaluated separably (rows, then
// columns) with exact integer-reduced twiddle angles.
Spectrum dft2(const LatentGrid& x);

// Inverse of dft2. `max_imag`, when given, receives the largest |Im| of the
// reconstruction before it is dropped.
LatentGrid idft2(const Spectrum& s, double* max_imag = nullptr);

// Normalized radial frequency of bin (u, v).
double radial_frequency(int u, int v, int rows, int cols);

struct BandMask {
    int rows = 0;
    int cols = 0;
    double fraction = 0.0;
    std::vector<bool> low;  // row-major; complement is the high band

    bool is_low(int u, int v) const { return low[static_cast<std::size_t>(u) * cols + v]; }
    int low_count() const;
};

// Bins ordered by radial frequency, ties by (u, v); the first
// floor(fraction * M * N) bins are low, plus the conjugate partner of the last
// one if it would otherwise be split off, so each band stays real.
BandMask make_band_mask(int rows, int cols, double fraction);

struct BandSplit {
    LatentGrid low;
    LatentGrid high;
};

// Per-channel low/high split; low + high == x.
BandSplit band_split(const LatentGrid& x, double fraction);
BandSplit band_split(const LatentGrid& x, const BandMask& mask);

struct ConcentrationReport {
    int rows   = 0;
    int cols   = 0;
    int trials = 0;
    double mean_bin_power = 0.0;
    double expected       = 0.0;  // 1 / (MN)
    double max_bin_power  = 0.0;  // max over bins of the per-bin trial mean
    double violation_rate = 0.0;  // fraction of (trial, bin) above the bound
    double bound          = 0.0;
};

// Upper tail bound (1/(MN)) * (1 + sqrt(8 log(2 MN / delta))).
double concentration_bound(int rows, int cols, double delta);

ConcentrationReport verify_noise_concentration(int rows, int cols, int trials, std::uint64_t seed,
                                               double delta = 0.05);

void write_prop1_csv(const std::vector<ConcentrationReport>& reports, const std::string& path);

enum class Band { low, high };
const char* to_string(Band b);

struct CurveRow {
    int t = 0;
    Band band = Band::low;
    double signal_norm     = 0.0;  // mean ||sqrt(ab) x0^B||
    double noise_norm      = 0.0;  // mean ||sqrt(1 - ab) eps^B||
    double variation_ratio = 0.0;  // mean ||x_t^B - x0^B|| / ||x0^B||
    double mean_sq_ratio   = 0.0;  // mean of the squared ratio
    int n_images = 0;
};

struct CurveTable {
    std::vector<CurveRow> rows;
    // (image index, band) pairs excluded from the ratio because ||x0^B|| == 0.
    std::vector<std::pair<int, Band>> flagged;

    const CurveRow& at(int t, Band b) const;
};

// Rows for t = 0 and every sampled timestep, low band first.
CurveTable corruption_curves(const std::vector<LatentGrid>& x0_batch, const NoiseSchedule& sched, double fraction,
                             std::uint64_t seed);

void write_curves_csv(const CurveTable& table, const std::string& path);

}  // namespace dlab
