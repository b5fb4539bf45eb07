#include "dlab/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <tuple>

#include "dlab/error.hpp"
#include "dlab/numeric.hpp"
#include "dlab/rng.hpp"

namespace dlab {

namespace {

using cd = std::complex<double>;

// table[j] = exp(sign * 2 pi i j / n)
std::vector<cd> twiddles(int n, double sign) {
    std::vector<cd> t(n);
    for (int j = 0; j < n; ++j) t[j] = std::polar(1.0, sign * 2.0 * std::numbers::pi * j / n);
    return t;
}

// out[u] = sum_k in[k * stride] * tw[(k*u) mod n]
void dft1(const cd* in, std::size_t stride, int n, const std::vector<cd>& tw, cd* out, std::size_t out_stride) {
    for (int u = 0; u < n; ++u) {
        cd acc = 0.0;
        for (int k = 0; k < n; ++k) {
            acc += in[k * stride] * tw[(static_cast<long>(k) * u) % n];
        }
        out[u * out_stride] = acc;
    }
}

std::vector<cd> transform(std::vector<cd> data, int rows, int cols, double sign) {
    auto tw_c = twiddles(cols, sign);
    auto tw_r = twiddles(rows, sign);
    std::vector<cd> tmp(data.size());
    for (int r = 0; r < rows; ++r) {
        dft1(data.data() + static_cast<std::size_t>(r) * cols, 1, cols, tw_c,
             tmp.data() + static_cast<std::size_t>(r) * cols, 1);
    }
    for (int c = 0; c < cols; ++c) dft1(tmp.data() + c, cols, rows, tw_r, data.data() + c, cols);
    return data;
}

}  // namespace

Spectrum dft2(const LatentGrid& x) {
    if (x.channels() != 1) throw ShapeError("dft2 expects a single-channel grid, got " + x.shape_string());
    const int M = x.rows(), N = x.cols();
    std::vector<cd> data(x.data().begin(), x.data().end());
    Spectrum s{M, N, transform(std::move(data), M, N, -1.0)};
    const double scale = 1.0 / (static_cast<double>(M) * N);
    for (auto& c : s.coeffs) c *= scale;
    return s;
}

LatentGrid idft2(const Spectrum& s, double* max_imag) {
    std::vector<cd> data = transform(s.coeffs, s.rows, s.cols, 1.0);
    LatentGrid out(1, s.rows, s.cols);
    double worst = 0.0;
    auto o = out.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
        o[i]  = data[i].real();
        worst = std::max(worst, std::fabs(data[i].imag()));
    }
    if (max_imag != nullptr) *max_imag = worst;
    return out;
}

double radial_frequency(int u, int v, int rows, int cols) {
    double fu = static_cast<double>(std::min(u, rows - u)) / rows;
    double fv = static_cast<double>(std::min(v, cols - v)) / cols;
    return std::sqrt(fu * fu + fv * fv);
}

int BandMask::low_count() const { return static_cast<int>(std::count(low.begin(), low.end(), true)); }

BandMask make_band_mask(int rows, int cols, double fraction) {
    if (!(fraction > 0.0 && fraction < 1.0)) {
        throw ParameterError("band fraction must lie in (0, 1), got " + std::to_string(fraction));
    }
    if (rows <= 0 || cols <= 0) throw ParameterError("band mask dimensions must be positive");

    struct Bin {
        double r;
        int u, v;
    };
    std::vector<Bin> bins;
    bins.reserve(static_cast<std::size_t>(rows) * cols);
    for (int u = 0; u < rows; ++u) {
        for (int v = 0; v < cols; ++v) bins.push_back({radial_frequency(u, v, rows, cols), u, v});
    }
    std::stable_sort(bins.begin(), bins.end(), [](const Bin& a, const Bin& b) {
        if (a.r != b.r) return a.r < b.r;
        return std::tie(a.u, a.v) < std::tie(b.u, b.v);
    });

    BandMask m{rows, cols, fraction, std::vector<bool>(static_cast<std::size_t>(rows) * cols, false)};
    auto take = static_cast<std::size_t>(std::floor(fraction * rows * cols));
    take      = std::max<std::size_t>(take, 1);  // DC is always low
    for (std::size_t i = 0; i < take; ++i) {
        m.low[static_cast<std::size_t>(bins[i].u) * cols + bins[i].v] = true;
    }
    // Close under conjugation: (u, v) and (-u, -v) share a radius, so at most
    // the boundary tie group can be split.
    for (std::size_t i = 0; i < take; ++i) {
        int cu = (rows - bins[i].u) % rows;
        int cv = (cols - bins[i].v) % cols;
        m.low[static_cast<std::size_t>(cu) * cols + cv] = true;
    }
    return m;
}

BandSplit band_split(const LatentGrid& x, double fraction) {
    return band_split(x, make_band_mask(x.rows(), x.cols(), fraction));
}

BandSplit band_split(const LatentGrid& x, const BandMask& mask) {
    if (mask.rows != x.rows() || mask.cols != x.cols()) throw ShapeError("band_split: mask shape mismatch");
    BandSplit out{LatentGrid(x.channels(), x.rows(), x.cols()), LatentGrid(x.channels(), x.rows(), x.cols())};
    for (int c = 0; c < x.channels(); ++c) {
        Spectrum s = dft2(x.channel(c));
        Spectrum lo = s, hi = s;
        for (std::size_t i = 0; i < s.coeffs.size(); ++i) {
            if (mask.low[i]) {
                hi.coeffs[i] = 0.0;
            } else {
                lo.coeffs[i] = 0.0;
            }
        }
        out.low.set_channel(c, idft2(lo));
        out.high.set_channel(c, idft2(hi));
    }
    return out;
}

// ---------------------------------------------------------------------------

double concentration_bound(int rows, int cols, double delta) {
    double mn = static_cast<double>(rows) * cols;
    return (1.0 / mn) * (1.0 + std::sqrt(8.0 * std::log(2.0 * mn / delta)));
}

ConcentrationReport verify_noise_concentration(int rows, int cols, int trials, std::uint64_t seed, double delta) {
    if (rows <= 0 || cols <= 0) throw ParameterError("verify_noise_concentration: M*N must be positive");
    if (trials < 100) throw ParameterError("verify_noise_concentration: need at least 100 trials");

    const std::size_t bins = static_cast<std::size_t>(rows) * cols;
    const double bound     = concentration_bound(rows, cols, delta);
    std::vector<KahanSum> per_bin(bins);
    KahanSum grand;
    std::uint64_t violations = 0;

    LatentGrid eps(1, rows, cols);
    for (int trial = 0; trial < trials; ++trial) {
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(trial)));
        for (double& v : eps.data()) v = rng.gaussian();
        Spectrum s = dft2(eps);
        for (std::size_t b = 0; b < bins; ++b) {
            double p = std::norm(s.coeffs[b]);
            per_bin[b].add(p);
            grand.add(p);
            if (p > bound) ++violations;
        }
    }

    ConcentrationReport rep;
    rep.rows   = rows;
    rep.cols   = cols;
    rep.trials = trials;
    rep.bound  = bound;
    const double n = static_cast<double>(trials) * static_cast<double>(bins);
    rep.mean_bin_power = grand.value() / n;
    rep.expected       = 1.0 / static_cast<double>(bins);
    for (const auto& b : per_bin) rep.max_bin_power = std::max(rep.max_bin_power, b.value() / trials);
    rep.violation_rate = static_cast<double>(violations) / n;
    return rep;
}

void write_prop1_csv(const std::vector<ConcentrationReport>& reports, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out.precision(17);
    out << "M,N,trials,mean_bin_power,expected,max_bin_power,violation_rate\n";
    for (const auto& r : reports) {
        out << r.rows << ',' << r.cols << ',' << r.trials << ',' << r.mean_bin_power << ',' << r.expected << ','
            << r.max_bin_power << ',' << r.violation_rate << '\n';
    }
}

// ---------------------------------------------------------------------------

const char* to_string(Band b) { return b == Band::low ? "low" : "high"; }

const CurveRow& CurveTable::at(int t, Band b) const {
    for (const auto& r : rows) {
        if (r.t == t && r.band == b) return r;
    }
    throw DataError("curve table has no row for t=" + std::to_string(t));
}

CurveTable corruption_curves(const std::vector<LatentGrid>& x0_batch, const NoiseSchedule& sched, double fraction,
                             std::uint64_t seed) {
    if (x0_batch.empty()) throw DataError("corruption_curves: empty batch");
    for (const auto& x : x0_batch) require_same_shape(x0_batch.front(), x, "corruption_curves");
    const BandMask mask = make_band_mask(x0_batch.front().rows(), x0_batch.front().cols(), fraction);

    std::vector<BandSplit> clean;
    clean.reserve(x0_batch.size());
    for (const auto& x : x0_batch) clean.push_back(band_split(x, mask));

    CurveTable table;
    std::vector<std::vector<bool>> usable(2, std::vector<bool>(x0_batch.size(), true));
    for (std::size_t i = 0; i < clean.size(); ++i) {
        for (Band b : {Band::low, Band::high}) {
            const LatentGrid& part = b == Band::low ? clean[i].low : clean[i].high;
            // Exact zeros come back from the transform as rounding residue.
            if (l2_norm(part) <= 1e-12 * std::max(1.0, l2_norm(x0_batch[i]))) {
                usable[static_cast<int>(b)][i] = false;
                table.flagged.emplace_back(static_cast<int>(i), b);
            }
        }
    }

    std::vector<int> times{0};
    times.insert(times.end(), sched.ddim_steps.begin(), sched.ddim_steps.end());
    for (int t : times) {
        const double ab = sched.alpha_bar[t];
        KahanSum sig[2], noi[2], ratio[2], sq[2];
        int used[2] = {0, 0};
        for (std::size_t i = 0; i < x0_batch.size(); ++i) {
            Rng rng(mix_seed(mix_seed(seed, i), static_cast<std::uint64_t>(t)));
            LatentGrid eps(x0_batch[i].channels(), x0_batch[i].rows(), x0_batch[i].cols());
            for (double& v : eps.data()) v = rng.gaussian();
            BandSplit noise = band_split(eps, mask);
            BandSplit noisy = band_split(forward_noise(x0_batch[i], t, eps, sched), mask);
            for (Band b : {Band::low, Band::high}) {
                int k = static_cast<int>(b);
                const LatentGrid& x0b = b == Band::low ? clean[i].low : clean[i].high;
                const LatentGrid& eb  = b == Band::low ? noise.low : noise.high;
                const LatentGrid& xtb = b == Band::low ? noisy.low : noisy.high;
                double x0n = l2_norm(x0b);
                sig[k].add(std::sqrt(ab) * x0n);
                noi[k].add(std::sqrt(1.0 - ab) * l2_norm(eb));
                if (!usable[k][i]) continue;
                double r = l2_norm(axpby(1.0, xtb, -1.0, x0b)) / x0n;
                ratio[k].add(r);
                sq[k].add(r * r);
                ++used[k];
            }
        }
        const double n = static_cast<double>(x0_batch.size());
        for (Band b : {Band::low, Band::high}) {
            int k = static_cast<int>(b);
            CurveRow row;
            row.t           = t;
            row.band        = b;
            row.signal_norm = sig[k].value() / n;
            row.noise_norm  = noi[k].value() / n;
            row.n_images    = used[k];
            if (used[k] > 0) {
                row.variation_ratio = ratio[k].value() / used[k];
                row.mean_sq_ratio   = sq[k].value() / used[k];
            }
            table.rows.push_back(row);
        }
    }
    return table;
}

void write_curves_csv(const CurveTable& table, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out.precision(17);
    out << "t,band,signal_norm,noise_norm,variation_ratio,n_images\n";
    for (const auto& r : table.rows) {
        out << r.t << ',' << to_string(r.band) << ',' << r.signal_norm << ',' << r.noise_norm << ','
            << r.variation_ratio << ',' << r.n_images << '\n';
    }
}

}  // namespace dlab
