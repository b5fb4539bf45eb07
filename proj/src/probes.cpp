#include "dlab/probes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "dlab/error.hpp"
#include "dlab/numeric.hpp"

namespace dlab {

int EdgeMap::count() const { return static_cast<int>(std::count(on.begin(), on.end(), std::uint8_t{1})); }

namespace {

std::vector<double> grayscale(const LatentGrid& img) {
    std::vector<double> g(img.plane_size(), 0.0);
    for (int c = 0; c < img.channels(); ++c) {
        auto p = img.plane(c);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += p[i];
    }
    for (double& v : g) v /= img.channels();
    return g;
}

std::vector<double> gaussian_blur(const std::vector<double>& src, int rows, int cols, double sigma) {
    if (sigma <= 0.0) return src;
    int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (double& v : k) v /= sum;

    auto clamp = [](int v, int n) { return std::clamp(v, 0, n - 1); };
    std::vector<double> tmp(src.size()), out(src.size());
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * src[r * cols + clamp(c + i, cols)];
            tmp[r * cols + c] = acc;
        }
    }
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp[clamp(r + i, rows) * cols + c];
            out[r * cols + c] = acc;
        }
    }
    return out;
}

}  // namespace

EdgeMap canny_edges(const LatentGrid& img, const CannyParams& params) {
    if (!(params.t_low > 0.0 && params.t_low < params.t_high && params.t_high <= 1.0)) {
        throw ParameterError("canny: require 0 < t_low < t_high <= 1");
    }
    const int rows = img.rows(), cols = img.cols();
    std::vector<double> g = gaussian_blur(grayscale(img), rows, cols, params.sigma);

    auto px = [&](int r, int c) { return g[std::clamp(r, 0, rows - 1) * cols + std::clamp(c, 0, cols - 1)]; };
    std::vector<double> mag(g.size()), gx(g.size()), gy(g.size());
    double max_mag = 0.0;
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            double sx = (px(r - 1, c + 1) + 2 * px(r, c + 1) + px(r + 1, c + 1)) -
                        (px(r - 1, c - 1) + 2 * px(r, c - 1) + px(r + 1, c - 1));
            double sy = (px(r + 1, c - 1) + 2 * px(r + 1, c) + px(r + 1, c + 1)) -
                        (px(r - 1, c - 1) + 2 * px(r - 1, c) + px(r - 1, c + 1));
            std::size_t i = static_cast<std::size_t>(r) * cols + c;
            gx[i] = sx;
            gy[i] = sy;
            mag[i] = std::hypot(sx, sy);
            max_mag = std::max(max_mag, mag[i]);
        }
    }

    EdgeMap out{rows, cols, std::vector<std::uint8_t>(g.size(), 0)};
    // Flat images have no edges; the tiny floor keeps round-off from a
    // constant input out of the threshold.
    if (max_mag <= 1e-12) return out;

    auto m = [&](int r, int c) {
        if (r < 0 || r >= rows || c < 0 || c >= cols) return 0.0;
        return mag[static_cast<std::size_t>(r) * cols + c];
    };
    std::vector<double> thin(g.size(), 0.0);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            std::size_t i = static_cast<std::size_t>(r) * cols + c;
            if (mag[i] == 0.0) continue;
            double angle = std::atan2(gy[i], gx[i]) * 180.0 / 3.14159265358979323846;
            if (angle < 0) angle += 180.0;
            int dr = 0, dc = 0;
            if (angle < 22.5 || angle >= 157.5) {
                dc = 1;  // horizontal gradient
            } else if (angle < 67.5) {
                dr = 1, dc = 1;
            } else if (angle < 112.5) {
                dr = 1;
            } else {
                dr = 1, dc = -1;
            }
            // Ties with the forward neighbour keep the earlier pixel only.
            if (mag[i] >= m(r - dr, c - dc) && mag[i] > m(r + dr, c + dc)) thin[i] = mag[i];
        }
    }

    const double lo = params.t_low * max_mag, hi = params.t_high * max_mag;
    std::vector<std::size_t> stack;
    for (std::size_t i = 0; i < thin.size(); ++i) {
        if (thin[i] >= hi) {
            out.on[i] = 1;
            stack.push_back(i);
        }
    }
    while (!stack.empty()) {
        std::size_t i = stack.back();
        stack.pop_back();
        int r = static_cast<int>(i) / cols, c = static_cast<int>(i) % cols;
        for (int dr = -1; dr <= 1; ++dr) {
            for (int dc = -1; dc <= 1; ++dc) {
                int rr = r + dr, cc = c + dc;
                if (rr < 0 || rr >= rows || cc < 0 || cc >= cols) continue;
                std::size_t j = static_cast<std::size_t>(rr) * cols + cc;
                if (!out.on[j] && thin[j] >= lo) {
                    out.on[j] = 1;
                    stack.push_back(j);
                }
            }
        }
    }
    return out;
}

double edge_f1(const EdgeMap& a, const EdgeMap& b, int tol_px) {
    if (a.rows != b.rows || a.cols != b.cols) throw ShapeError("edge_f1: edge maps differ in size");
    if (tol_px < 0) throw ParameterError("edge_f1: tol_px must be >= 0");
    const int na = a.count(), nb = b.count();
    if (na == 0 && nb == 0) return 1.0;
    if (na == 0 || nb == 0) return 0.0;

    std::vector<std::uint8_t> used(b.on.size(), 0);
    int matched = 0;
    for (int r = 0; r < a.rows; ++r) {
        for (int c = 0; c < a.cols; ++c) {
            if (!a.at(r, c)) continue;
            bool hit = false;
            for (int dr = -tol_px; dr <= tol_px && !hit; ++dr) {
                for (int dc = -tol_px; dc <= tol_px && !hit; ++dc) {
                    int rr = r + dr, cc = c + dc;
                    if (rr < 0 || rr >= b.rows || cc < 0 || cc >= b.cols) continue;
                    std::size_t j = static_cast<std::size_t>(rr) * b.cols + cc;
                    if (b.on[j] && !used[j]) {
                        used[j] = 1;
                        hit     = true;
                    }
                }
            }
            matched += hit;
        }
    }
    if (matched == 0) return 0.0;
    double precision = static_cast<double>(matched) / na;
    double recall    = static_cast<double>(matched) / nb;
    return 2.0 * precision * recall / (precision + recall);
}

void write_pgm(const EdgeMap& e, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out << "P5\n" << e.cols << ' ' << e.rows << "\n255\n";
    for (auto v : e.on) out.put(static_cast<char>(v ? 255 : 0));
}

// ---------------------------------------------------------------------------

std::vector<RelativeF1Point> relative_f1_curve(const Trajectory& traj, const std::vector<TokenClass>& tags,
                                               const CannyParams& params, int tol_px) {
    const LatentGrid& final_img = traj.final_image();
    EdgeMap final_edges = canny_edges(final_img, params);
    const int rows = final_img.rows(), cols = final_img.cols();

    std::vector<RelativeF1Point> curve;
    for (const auto& rec : traj.records) {
        if (!rec.attention) continue;
        const AttentionMap& map = *rec.attention;
        if (static_cast<int>(tags.size()) != map.tokens) throw ShapeError("relative_f1_curve: tag count mismatch");
        if (map.pixels != rows * cols) throw ShapeError("relative_f1_curve: attention map does not match image");
        KahanSum f1;
        int used = 0;
        for (int k = 0; k < map.tokens; ++k) {
            if (tags[k] == TokenClass::sos) continue;
            LatentGrid m(1, rows, cols);
            double lo = std::numeric_limits<double>::infinity(), hi = -lo;
            for (int p = 0; p < map.pixels; ++p) {
                lo = std::min(lo, map.at(p, k));
                hi = std::max(hi, map.at(p, k));
            }
            for (int p = 0; p < map.pixels; ++p) {
                m.data()[p] = hi > lo ? 2.0 * (map.at(p, k) - lo) / (hi - lo) - 1.0 : 0.0;
            }
            f1.add(edge_f1(canny_edges(m, params), final_edges, tol_px));
            ++used;
        }
        curve.push_back({rec.step_rank, rec.t, used ? f1.value() / used : 0.0, 0.0});
    }
    if (curve.empty()) throw DataError("relative_f1_curve: trajectory has no attention maps");
    double last = curve.back().f1;
    if (last == 0.0) throw DataError("relative_f1_curve: degenerate trajectory, F1 at the final step is 0");
    for (auto& p : curve) p.relative = p.f1 / last;
    curve.back().relative = 1.0;
    return curve;
}

ClassWeights class_weights(const AttentionMap& map, const std::vector<TokenClass>& tags) {
    if (static_cast<int>(tags.size()) != map.tokens) throw ShapeError("class_weights: tag count mismatch");
    KahanSum total[3];
    int counts[3] = {0, 0, 0};
    for (auto t : tags) ++counts[static_cast<int>(t)];
    for (int p = 0; p < map.pixels; ++p) {
        for (int k = 0; k < map.tokens; ++k) total[static_cast<int>(tags[k])].add(map.at(p, k));
    }
    ClassWeights w;
    double mass[3];
    double per_token[3];
    for (int c = 0; c < 3; ++c) {
        mass[c]      = total[c].value() / map.pixels;
        per_token[c] = counts[c] ? mass[c] / counts[c] : 0.0;
    }
    w.sos = per_token[0], w.sem = per_token[1], w.eos = per_token[2];
    w.sos_total = mass[0], w.sem_total = mass[1], w.eos_total = mass[2];
    return w;
}

std::vector<ClassWeights> attention_class_weights(const Trajectory& traj, const std::vector<TokenClass>& tags) {
    std::vector<ClassWeights> out;
    for (const auto& rec : traj.records) {
        if (!rec.attention) continue;
        ClassWeights w = class_weights(*rec.attention, tags);
        w.step_rank    = rec.step_rank;
        w.t            = rec.t;
        out.push_back(w);
    }
    return out;
}

double attention_kl(const AttentionMap& p, const AttentionMap& q) {
    if (p.pixels != q.pixels || p.tokens != q.tokens) throw ShapeError("attention_kl: map dimensions differ");
    constexpr double smooth = 1e-8;
    KahanSum acc;
    for (int r = 0; r < p.pixels; ++r) {
        double sp = 0.0, sq = 0.0;
        for (int k = 0; k < p.tokens; ++k) {
            sp += p.at(r, k) + smooth;
            sq += q.at(r, k) + smooth;
        }
        double kl = 0.0;
        for (int k = 0; k < p.tokens; ++k) {
            double a = (p.at(r, k) + smooth) / sp;
            double b = (q.at(r, k) + smooth) / sq;
            kl += a * std::log(a / b);
        }
        acc.add(kl);
    }
    return std::max(0.0, acc.value() / p.pixels);
}

double l1_distance(const LatentGrid& a, const LatentGrid& b) {
    require_same_shape(a, b, "l1_distance");
    KahanSum s;
    auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < x.size(); ++i) s.add(std::fabs(x[i] - y[i]));
    return s.value() / static_cast<double>(x.size());
}

double cosine_alignment(const LatentGrid& a, const LatentGrid& b) {
    require_same_shape(a, b, "cosine_alignment");
    KahanSum dot, na, nb;
    auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
        dot.add(x[i] * y[i]);
        na.add(x[i] * x[i]);
        nb.add(y[i] * y[i]);
    }
    if (na.value() == 0.0 && nb.value() == 0.0) throw DataError("cosine_alignment: both inputs are zero");
    // One zero vector: cosine is 0 by convention.
    if (na.value() == 0.0 || nb.value() == 0.0) return 0.0;
    return std::clamp(dot.value() / std::sqrt(na.value() * nb.value()), -1.0, 1.0);
}

TemplateBank make_template_bank(const Vocabulary& vocab, int rows, int cols) {
    TemplateBank bank;
    for (int n = 0; n < vocab.n_nouns(); ++n) {
        for (int a = 0; a < vocab.n_attrs(); ++a) {
            PromptSpec p = make_prompt(vocab, n, a);
            bank.prompts.push_back(p);
            bank.images.push_back(render_example(vocab, p, 0, rows, cols, 0.0));
        }
    }
    return bank;
}

PromptSpec classify(const LatentGrid& img, const TemplateBank& bank) {
    if (bank.images.empty()) throw ConfigurationError("prompt_alignment: empty template bank");
    std::size_t best = 0;
    double best_d    = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < bank.images.size(); ++i) {
        double d = l1_distance(img, bank.images[i]);
        if (d < best_d) {
            best_d = d;
            best   = i;
        }
    }
    return bank.prompts[best];
}

AlignmentReport prompt_alignment(const LatentGrid& img, const PromptSpec& p, const TemplateBank& bank) {
    PromptSpec guess = classify(img, bank);
    AlignmentReport r;
    r.shape_accuracy     = guess.noun_id == p.noun_id ? 1.0 : 0.0;
    r.attribute_accuracy = guess.attribute_id == p.attribute_id ? 1.0 : 0.0;
    r.combined           = 0.5 * (r.shape_accuracy + r.attribute_accuracy);
    return r;
}

AlignmentReport prompt_alignment(const std::vector<LatentGrid>& imgs, const std::vector<PromptSpec>& prompts,
                                 const TemplateBank& bank) {
    if (imgs.size() != prompts.size()) throw ShapeError("prompt_alignment: images and prompts differ in count");
    if (bank.images.empty()) throw ConfigurationError("prompt_alignment: empty template bank");
    AlignmentReport sum;
    if (imgs.empty()) return sum;
    for (std::size_t i = 0; i < imgs.size(); ++i) {
        AlignmentReport r = prompt_alignment(imgs[i], prompts[i], bank);
        sum.shape_accuracy += r.shape_accuracy;
        sum.attribute_accuracy += r.attribute_accuracy;
    }
    double n = static_cast<double>(imgs.size());
    sum.shape_accuracy /= n;
    sum.attribute_accuracy /= n;
    sum.combined = 0.5 * (sum.shape_accuracy + sum.attribute_accuracy);
    return sum;
}

std::vector<double> relative_score(const std::vector<double>& values) {
    if (values.empty()) throw DataError("relative_score: empty input");
    auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    if (!(*hi > *lo)) throw DataError("relative_score: degenerate range (all values equal)");
    std::vector<double> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - *lo) / (*hi - *lo);
    return out;
}

std::vector<GapNorms> guidance_gap_norms(const Trajectory& traj) {
    const double w = traj.policy.w;
    std::vector<GapNorms> out;
    for (const auto& rec : traj.records) {
        if (!rec.eps_hat) continue;
        if (!rec.eps_uncond) throw DataError("guidance_gap_norms: record lacks the unconditional prediction");
        GapNorms g;
        g.step_rank  = rec.step_rank;
        g.t          = rec.t;
        double dim   = static_cast<double>(rec.eps_uncond->size());
        g.uncond_rms = l2_norm(*rec.eps_uncond) / std::sqrt(dim);
        if (w != 0.0) {
            if (!rec.eps_cond) {
                throw DataError("guidance_gap_norms: missing conditional prediction at rank " +
                                std::to_string(rec.step_rank) + " (sample in full mode)");
            }
            g.gap_rms = std::fabs(w) * l2_norm(axpby(1.0, *rec.eps_cond, -1.0, *rec.eps_uncond)) / std::sqrt(dim);
        }
        out.push_back(g);
    }
    return out;
}

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw DataError("spearman: need two equal-length series (n >= 2)");
    auto rx = ranks(x), ry = ranks(y);
    double mx = compensated_mean(rx), my = compensated_mean(ry);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

}  // namespace dlab
