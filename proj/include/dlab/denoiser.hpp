#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "dlab/grid.hpp"
#include "dlab/prompt.hpp"
#include "dlab/schedule.hpp"

namespace dlab {

struct DenoiserHyper {
    int channels  = 3;
    int rows      = 16;
    int cols      = 16;
    int d         = 32;   // attention / feature width
    int hidden    = 128;  // MLP head width
    int token_len = 8;
    int token_dim = 16;
    std::uint64_t seed = 7;

    int pixels() const { return rows * cols; }
    int patch_size() const { return channels * 9; }

    friend bool operator==(const DenoiserHyper&, const DenoiserHyper&) = default;
};

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

// Parameter set of eps_theta. Per pixel p:
//   phi_p = enc_w * patch3x3(x)_p + enc_b + pos_p + time_w * sinusoid(t) + time_b
//   attn  = softmax(Q K^T / sqrt(d)),  Q = phi W_Q^T, K = C W_K^T, V = C W_V^T
//   z_p   = phi_p + (attn V)_p
//   F_p   = head2_w * silu(head1_w * z_p + head1_b) + head2_b
//   eps_p = sqrt(1 - abar_t) x_p + sqrt(abar_t) F_p   (standard linear schedule)
template <typename Scalar>
struct DenoiserParams {
    Mat<Scalar> enc_w, enc_b;      // d x patch, d x 1
    Mat<Scalar> pos;               // pixels x d
    Mat<Scalar> time_w, time_b;    // d x d, d x 1
    Mat<Scalar> wq, wk, wv;        // d x d, d x token_dim, d x token_dim
    Mat<Scalar> head1_w, head1_b;  // hidden x d, hidden x 1
    Mat<Scalar> head2_w, head2_b;  // channels x hidden, channels x 1

    template <typename F>
    void visit(F&& f) {
        f("enc_w", enc_w), f("enc_b", enc_b), f("pos", pos), f("time_w", time_w), f("time_b", time_b);
        f("wq", wq), f("wk", wk), f("wv", wv);
        f("head1_w", head1_w), f("head1_b", head1_b), f("head2_w", head2_w), f("head2_b", head2_b);
    }
    template <typename F>
    void visit(F&& f) const {
        const_cast<DenoiserParams*>(this)->visit([&](const char* name, const Mat<Scalar>& m) { f(name, m); });
    }

    // Same shapes, all zeros.
    DenoiserParams zeros_like() const;
    std::size_t count() const;

    template <typename Other>
    DenoiserParams<Other> cast() const;
};

struct DenoiserModel {
    DenoiserHyper hyper;
    DenoiserParams<float> params;
    std::uint64_t train_step = 0;
    std::string rng_state;  // snapshot of the training RNG, empty before training
};

DenoiserModel init_model(const DenoiserHyper& hyper);

// pixels x tokens row-stochastic attention weights.
struct AttentionMap {
    int pixels = 0;
    int tokens = 0;
    std::vector<double> weights;

    double at(int p, int k) const { return weights[static_cast<std::size_t>(p) * tokens + k]; }
    friend bool operator==(const AttentionMap&, const AttentionMap&) = default;
};

struct NoisePrediction {
    LatentGrid eps;
    AttentionMap attention;
};

// eps_theta(t, x, tokens). When tokens.kv_scope is key_only (value_only) the
// surgically altered `tokens` feed K (V) only and `untouched` feeds the other
// side; `untouched` is required in that case and ignored for kv_scope both.
NoisePrediction predict_noise(const DenoiserModel& m, int t, const LatentGrid& x, const TokenSequence& tokens,
                              const TokenSequence* untouched = nullptr);

// One training example for the eps-prediction objective.
struct LossSample {
    LatentGrid x0;
    LatentGrid eps;
    int t = 1;
    TokenSequence tokens;
    double weight = 1.0;  // multiplies the loss
};

// weight * mean((eps_theta(t, x_t, tokens) - eps)^2) and its gradient with respect to
// every parameter, evaluated at precision Scalar.
template <typename Scalar>
double loss_and_gradient(const DenoiserParams<Scalar>& params, const DenoiserHyper& hyper, const LossSample& sample,
                         const NoiseSchedule& sched, DenoiserParams<Scalar>* grad);

struct TrainItem {
    LatentGrid x0;
    TokenSequence tokens;
};

// eps: plain noise-prediction loss. v: the same loss weighted by 1 / abar_t,
// which equals the v-prediction loss since v - v_hat = (eps - eps_hat) / sqrt(abar_t).
enum class Objective { eps, v };

struct TrainConfig {
    int epochs            = 60;
    int batch_size        = 16;
    double lr             = 1e-3;
    double cond_dropout_p = 0.1;
    std::uint64_t seed    = 11;
    Objective objective   = Objective::v;
};

struct TrainResult {
    DenoiserModel model;
    std::vector<double> loss_curve;  // mean loss per epoch, index 0 = epoch 1
    std::uint64_t unconditional_samples = 0;
    std::uint64_t total_samples         = 0;
};

// Adam on the objective's loss with t ~ U{1..T}, fresh Gaussian eps and the
// condition replaced by `null_cond` with probability cond_dropout_p.
TrainResult train(DenoiserModel model, const std::vector<TrainItem>& data, const TokenSequence& null_cond,
                  const NoiseSchedule& sched, const TrainConfig& config);

void write_loss_curve(const std::vector<double>& curve, const std::string& path);

struct GradProbe {
    std::string tensor;
    int row = 0;
    int col = 0;
    double analytic = 0.0;
    double numeric  = 0.0;
    double rel_err  = 0.0;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::vector<GradProbe> probes;
};

// Central finite differences (h = 1e-4, float64) against the analytic
// gradient on `probe_count` parameters chosen uniformly over all entries.
GradCheckReport grad_check(const DenoiserModel& m, const LossSample& sample, const NoiseSchedule& sched,
                           int probe_count, std::uint64_t seed);

// Single-entry probe, for targeted checks.
GradProbe grad_probe(const DenoiserModel& m, const LossSample& sample, const NoiseSchedule& sched,
                     const std::string& tensor, int row, int col);

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const DenoiserModel& m, const std::string& path);
DenoiserModel load_checkpoint(const std::string& path);

}  // namespace dlab
