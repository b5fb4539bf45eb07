#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dlab/denoiser.hpp"
#include "dlab/grid.hpp"
#include "dlab/prompt.hpp"
#include "dlab/sampler.hpp"

namespace dlab {

struct EdgeMap {
    int rows = 0;
    int cols = 0;
    std::vector<std::uint8_t> on;  // row-major, 0 or 1

    bool at(int r, int c) const { return on[static_cast<std::size_t>(r) * cols + c] != 0; }
    int count() const;
    friend bool operator==(const EdgeMap&, const EdgeMap&) = default;
};

struct CannyParams {
    double sigma  = 1.0;
    double t_low  = 0.1;  // fractions of the max gradient magnitude
    double t_high = 0.2;
};

// Channel-mean grayscale, Gaussian blur, Sobel, non-maximum suppression along
// the quantized gradient direction, 8-connected hysteresis.
EdgeMap canny_edges(const LatentGrid& img, const CannyParams& params = {});

// Greedy matching within Chebyshev radius tol_px; two empty maps score 1.
double edge_f1(const EdgeMap& a, const EdgeMap& b, int tol_px);

void write_pgm(const EdgeMap& e, const std::string& path);

struct RelativeF1Point {
    int step_rank = 0;
    int t         = 0;
    double f1     = 0.0;
    double relative = 0.0;  // f1 / f1 at rank 1
};

// Canny edges of each non-SOS token's attention map (min-max normalized to
// [-1, 1]) against the final image, averaged over tokens, per sampled step.
std::vector<RelativeF1Point> relative_f1_curve(const Trajectory& traj, const std::vector<TokenClass>& tags,
                                               const CannyParams& params = {}, int tol_px = 1);

struct ClassWeights {
    int step_rank = 0;
    int t         = 0;
    double sos = 0.0, sem = 0.0, eos = 0.0;              // mean weight per token of the class
    double sos_total = 0.0, sem_total = 0.0, eos_total = 0.0;  // per-pixel class mass
};

std::vector<ClassWeights> attention_class_weights(const Trajectory& traj, const std::vector<TokenClass>& tags);
ClassWeights class_weights(const AttentionMap& map, const std::vector<TokenClass>& tags);

// Mean over pixels of KL(P_row || Q_row), each row smoothed by 1e-8 and renormalized.
double attention_kl(const AttentionMap& p, const AttentionMap& q);

double l1_distance(const LatentGrid& a, const LatentGrid& b);
double cosine_alignment(const LatentGrid& a, const LatentGrid& b);

// Zero-jitter renders of every (noun, attribute) pair.
struct TemplateBank {
    std::vector<PromptSpec> prompts;
    std::vector<LatentGrid> images;
};

TemplateBank make_template_bank(const Vocabulary& vocab, int rows, int cols);

struct AlignmentReport {
    double shape_accuracy     = 0.0;
    double attribute_accuracy = 0.0;
    double combined           = 0.0;
};

// Nearest-template (L1) classification of `img`, scored against `p`.
AlignmentReport prompt_alignment(const LatentGrid& img, const PromptSpec& p, const TemplateBank& bank);
AlignmentReport prompt_alignment(const std::vector<LatentGrid>& imgs, const std::vector<PromptSpec>& prompts,
                                 const TemplateBank& bank);
PromptSpec classify(const LatentGrid& img, const TemplateBank& bank);

// (v - min) / (max - min)
std::vector<double> relative_score(const std::vector<double>& values);

struct GapNorms {
    int step_rank = 0;
    int t         = 0;
    double uncond_rms = 0.0;  // ||eps(null)|| / sqrt(dim)
    double gap_rms    = 0.0;  // ||w (eps(C) - eps(null))|| / sqrt(dim)
};

std::vector<GapNorms> guidance_gap_norms(const Trajectory& traj);

double spearman(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace dlab
