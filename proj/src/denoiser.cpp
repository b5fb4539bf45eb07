#include "dlab/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "dlab/error.hpp"
#include "dlab/numeric.hpp"
#include "dlab/rng.hpp"

namespace dlab {

template <typename Scalar>
DenoiserParams<Scalar> DenoiserParams<Scalar>::zeros_like() const {
    DenoiserParams out = *this;
    out.visit([](const char*, Mat<Scalar>& m) { m.setZero(); });
    return out;
}

template <typename Scalar>
std::size_t DenoiserParams<Scalar>::count() const {
    std::size_t n = 0;
    visit([&](const char*, const Mat<Scalar>& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
}

template <typename Scalar>
template <typename Other>
DenoiserParams<Other> DenoiserParams<Scalar>::cast() const {
    DenoiserParams<Other> out;
    std::vector<const Mat<Scalar>*> src;
    visit([&](const char*, const Mat<Scalar>& m) { src.push_back(&m); });
    std::size_t i = 0;
    out.visit([&](const char*, Mat<Other>& m) { m = src[i++]->template cast<Other>(); });
    return out;
}

template struct DenoiserParams<float>;
template struct DenoiserParams<double>;
template DenoiserParams<double> DenoiserParams<float>::cast<double>() const;
template DenoiserParams<float> DenoiserParams<double>::cast<float>() const;

DenoiserModel init_model(const DenoiserHyper& h) {
    if (h.channels <= 0 || h.rows <= 0 || h.cols <= 0 || h.d <= 0 || h.hidden <= 0 || h.token_len <= 0 ||
        h.token_dim <= 0) {
        throw ParameterError("init_model: all dimensions must be positive");
    }
    if (h.d % 2 != 0) throw ParameterError("init_model: d must be even for the sinusoidal time embedding");

    Rng rng(h.seed);
    auto uniform = [&](int rows, int cols, double bound) {
        Mat<float> m(rows, cols);
        for (int j = 0; j < cols; ++j) {
            for (int i = 0; i < rows; ++i) m(i, j) = static_cast<float>(rng.uniform(-bound, bound));
        }
        return m;
    };
    auto fan = [](int fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };

    DenoiserModel m;
    m.hyper = h;
    auto& p = m.params;
    p.enc_w   = uniform(h.d, h.patch_size(), fan(h.patch_size()));
    p.enc_b   = Mat<float>::Zero(h.d, 1);
    p.pos     = uniform(h.pixels(), h.d, 0.5);
    p.time_w  = uniform(h.d, h.d, fan(h.d));
    p.time_b  = Mat<float>::Zero(h.d, 1);
    p.wq      = uniform(h.d, h.d, fan(h.d));
    p.wk      = uniform(h.d, h.token_dim, fan(h.token_dim));
    p.wv      = uniform(h.d, h.token_dim, fan(h.token_dim));
    p.head1_w = uniform(h.hidden, h.d, fan(h.d));
    p.head1_b = Mat<float>::Zero(h.hidden, 1);
    p.head2_w = uniform(h.channels, h.hidden, fan(h.hidden));
    p.head2_b = Mat<float>::Zero(h.channels, 1);
    return m;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

template <typename Scalar>
Mat<Scalar> patches(const LatentGrid& x, const DenoiserHyper& h) {
    Mat<Scalar> out(h.pixels(), h.patch_size());
    for (int r = 0; r < h.rows; ++r) {
        for (int c = 0; c < h.cols; ++c) {
            int p = r * h.cols + c;
            for (int ch = 0; ch < h.channels; ++ch) {
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        int rr = r + dy, cc = c + dx;
                        double v = (rr >= 0 && rr < h.rows && cc >= 0 && cc < h.cols) ? x.at(ch, rr, cc) : 0.0;
                        out(p, ch * 9 + (dy + 1) * 3 + (dx + 1)) = static_cast<Scalar>(v);
                    }
                }
            }
        }
    }
    return out;
}

template <typename Scalar>
Mat<Scalar> time_embedding(int t, int d) {
    Mat<Scalar> e(d, 1);
    int half = d / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * i / half);
        e(i, 0)        = static_cast<Scalar>(std::sin(t * freq));
        e(half + i, 0) = static_cast<Scalar>(std::cos(t * freq));
    }
    return e;
}

template <typename Scalar>
Mat<Scalar> token_matrix(const TokenSequence& s) {
    Mat<Scalar> m(s.length, s.dim);
    for (int i = 0; i < s.length; ++i) {
        for (int k = 0; k < s.dim; ++k) m(i, k) = static_cast<Scalar>(s.token(i)[k]);
    }
    return m;
}

template <typename Scalar>
Scalar sigmoid(Scalar v) {
    return Scalar(1) / (Scalar(1) + std::exp(-v));
}

template <typename Scalar>
struct Activations {
    Mat<Scalar> patch, temb, phi, ck, cv, q, k, v, attn, z, pre, act, out;
    Scalar c_out = 1;
};

// eps_hat = sqrt(1 - abar_t) x_t + sqrt(abar_t) F, with abar_t from the
// standard training schedule. The head then only learns a bounded residual.
constexpr double kDataVariance = 0.25;  // rough per-pixel variance of the toy images

const NoiseSchedule& output_schedule() {
    static const NoiseSchedule sched = build_schedule(ScheduleParams{});
    return sched;
}

template <typename Scalar>
void forward(const DenoiserParams<Scalar>& p, const DenoiserHyper& h, int t, const LatentGrid& x,
             const TokenSequence& key_tokens, const TokenSequence& value_tokens, Activations<Scalar>& a) {
    if (x.channels() != h.channels || x.rows() != h.rows || x.cols() != h.cols) {
        throw ShapeError("predict_noise: latent shape " + x.shape_string() + " does not match model " +
                         std::to_string(h.channels) + "x" + std::to_string(h.rows) + "x" + std::to_string(h.cols));
    }
    for (const TokenSequence* s : {&key_tokens, &value_tokens}) {
        if (s->length != h.token_len || s->dim != h.token_dim) {
            throw ShapeError("predict_noise: token sequence " + std::to_string(s->length) + "x" +
                             std::to_string(s->dim) + " does not match model " + std::to_string(h.token_len) + "x" +
                             std::to_string(h.token_dim));
        }
    }
    const Scalar inv_sqrt_d = Scalar(1) / std::sqrt(static_cast<Scalar>(h.d));

    const NoiseSchedule& sched = output_schedule();
    if (t < 0 || t > sched.train_steps()) {
        throw ParameterError("predict_noise: timestep " + std::to_string(t) + " outside [0, " +
                             std::to_string(sched.train_steps()) + "]");
    }
    const double ab = sched.alpha_bar[t];
    // Wiener gain: the encoder sees a shrunk estimate of x0 instead of x_t.
    const double c_in = std::sqrt(ab) * kDataVariance / (ab * kDataVariance + 1.0 - ab);

    a.patch = patches<Scalar>(x, h) * static_cast<Scalar>(c_in);
    a.temb  = time_embedding<Scalar>(t, h.d);
    Mat<Scalar> shift = p.enc_b + p.time_w * a.temb + p.time_b;
    a.phi = a.patch * p.enc_w.transpose() + p.pos;
    a.phi.rowwise() += shift.transpose().row(0);

    a.ck = token_matrix<Scalar>(key_tokens);
    a.cv = token_matrix<Scalar>(value_tokens);
    a.q  = a.phi * p.wq.transpose();
    a.k  = a.ck * p.wk.transpose();
    a.v  = a.cv * p.wv.transpose();

    a.attn = (a.q * a.k.transpose()) * inv_sqrt_d;
    for (int r = 0; r < a.attn.rows(); ++r) {
        Scalar mx = a.attn.row(r).maxCoeff();
        a.attn.row(r) = (a.attn.row(r).array() - mx).exp().matrix();
        a.attn.row(r) /= a.attn.row(r).sum();
    }

    a.z   = a.phi + a.attn * a.v;
    a.pre = a.z * p.head1_w.transpose();
    a.pre.rowwise() += p.head1_b.transpose().row(0);
    a.act = a.pre.unaryExpr([](Scalar v) { return v * sigmoid(v); });
    a.out = a.act * p.head2_w.transpose();
    a.out.rowwise() += p.head2_b.transpose().row(0);

    a.c_out         = static_cast<Scalar>(std::sqrt(ab));
    const Scalar c_skip = static_cast<Scalar>(std::sqrt(1.0 - ab));
    a.out *= a.c_out;
    for (int ch = 0; ch < h.channels; ++ch) {
        auto plane = x.plane(ch);
        for (int pix = 0; pix < h.pixels(); ++pix) a.out(pix, ch) += c_skip * static_cast<Scalar>(plane[pix]);
    }
}

template <typename Scalar>
void backward(const DenoiserParams<Scalar>& p, const DenoiserHyper& h, const Activations<Scalar>& a,
              const Mat<Scalar>& d_out, DenoiserParams<Scalar>& g) {
    const Scalar inv_sqrt_d = Scalar(1) / std::sqrt(static_cast<Scalar>(h.d));

    Mat<Scalar> d_head = d_out * a.c_out;
    g.head2_w += d_head.transpose() * a.act;
    g.head2_b += d_head.colwise().sum().transpose();
    Mat<Scalar> d_act = d_head * p.head2_w;
    Mat<Scalar> d_pre = d_act.binaryExpr(a.pre, [](Scalar dv, Scalar v) {
        Scalar s = sigmoid(v);
        return dv * (s + v * s * (Scalar(1) - s));
    });
    g.head1_w += d_pre.transpose() * a.z;
    g.head1_b += d_pre.colwise().sum().transpose();
    Mat<Scalar> d_z = d_pre * p.head1_w;

    // z = phi + attn V
    Mat<Scalar> d_phi  = d_z;
    Mat<Scalar> d_attn = d_z * a.v.transpose();
    Mat<Scalar> d_v    = a.attn.transpose() * d_z;

    // softmax rows
    Mat<Scalar> d_scores(d_attn.rows(), d_attn.cols());
    for (int r = 0; r < d_attn.rows(); ++r) {
        Scalar dot = d_attn.row(r).dot(a.attn.row(r));
        d_scores.row(r) = (a.attn.row(r).array() * (d_attn.row(r).array() - dot)).matrix();
    }
    d_scores *= inv_sqrt_d;
    Mat<Scalar> d_q = d_scores * a.k;
    Mat<Scalar> d_k = d_scores.transpose() * a.q;

    g.wq += d_q.transpose() * a.phi;
    g.wk += d_k.transpose() * a.ck;
    g.wv += d_v.transpose() * a.cv;
    d_phi += d_q * p.wq;

    g.enc_w += d_phi.transpose() * a.patch;
    g.pos += d_phi;
    Mat<Scalar> d_shift = d_phi.colwise().sum().transpose();
    g.enc_b += d_shift;
    g.time_b += d_shift;
    g.time_w += d_shift * a.temb.transpose();
}

void resolve_kv(const TokenSequence& tokens, const TokenSequence* untouched, const TokenSequence*& key,
                const TokenSequence*& value) {
    key = value = &tokens;
    if (tokens.kv_scope == KvScope::both) return;
    if (untouched == nullptr) {
        throw ConfigurationError("predict_noise: key/value-only substitution needs the untouched sequence");
    }
    if (tokens.kv_scope == KvScope::key_only) {
        value = untouched;
    } else {
        key = untouched;
    }
}

template <typename Scalar>
Mat<Scalar> target_matrix(const LatentGrid& eps, const DenoiserHyper& h) {
    Mat<Scalar> out(h.pixels(), h.channels);
    for (int ch = 0; ch < h.channels; ++ch) {
        auto plane = eps.plane(ch);
        for (int pix = 0; pix < h.pixels(); ++pix) out(pix, ch) = static_cast<Scalar>(plane[pix]);
    }
    return out;
}

}  // namespace

NoisePrediction predict_noise(const DenoiserModel& m, int t, const LatentGrid& x, const TokenSequence& tokens,
                              const TokenSequence* untouched) {
    const TokenSequence* key   = nullptr;
    const TokenSequence* value = nullptr;
    resolve_kv(tokens, untouched, key, value);

    Activations<float> a;
    forward(m.params, m.hyper, t, x, *key, *value, a);

    const auto& h = m.hyper;
    NoisePrediction out{LatentGrid(h.channels, h.rows, h.cols), {h.pixels(), h.token_len, {}}};
    for (int ch = 0; ch < h.channels; ++ch) {
        auto plane = out.eps.plane(ch);
        for (int pix = 0; pix < h.pixels(); ++pix) plane[pix] = a.out(pix, ch);
    }
    out.attention.weights.resize(static_cast<std::size_t>(h.pixels()) * h.token_len);
    for (int pix = 0; pix < h.pixels(); ++pix) {
        for (int k = 0; k < h.token_len; ++k) {
            out.attention.weights[static_cast<std::size_t>(pix) * h.token_len + k] = a.attn(pix, k);
        }
    }
    return out;
}

template <typename Scalar>
double loss_and_gradient(const DenoiserParams<Scalar>& params, const DenoiserHyper& h, const LossSample& s,
                         const NoiseSchedule& sched, DenoiserParams<Scalar>* grad) {
    LatentGrid xt = forward_noise(s.x0, s.t, s.eps, sched);
    const TokenSequence* key   = nullptr;
    const TokenSequence* value = nullptr;
    resolve_kv(s.tokens, &s.tokens, key, value);

    Activations<Scalar> a;
    forward(params, h, s.t, xt, *key, *value, a);
    Mat<Scalar> diff = a.out - target_matrix<Scalar>(s.eps, h);
    const Scalar n   = static_cast<Scalar>(diff.size());
    const Scalar wt  = static_cast<Scalar>(s.weight);
    double loss      = static_cast<double>(wt * diff.squaredNorm() / n);
    if (grad != nullptr) {
        Mat<Scalar> d_out = diff * (Scalar(2) * wt / n);
        backward(params, h, a, d_out, *grad);
    }
    return loss;
}

template double loss_and_gradient<float>(const DenoiserParams<float>&, const DenoiserHyper&, const LossSample&,
                                         const NoiseSchedule&, DenoiserParams<float>*);
template double loss_and_gradient<double>(const DenoiserParams<double>&, const DenoiserHyper&, const LossSample&,
                                          const NoiseSchedule&, DenoiserParams<double>*);

// ---------------------------------------------------------------------------
// Training

namespace {

struct AdamState {
    DenoiserParams<float> m, v;
    std::uint64_t step = 0;
};

void adam_update(DenoiserParams<float>& params, const DenoiserParams<float>& grad, AdamState& st, double lr) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++st.step;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));

    std::vector<Mat<float>*> ps, ms, vs;
    std::vector<const Mat<float>*> gs;
    params.visit([&](const char*, Mat<float>& x) { ps.push_back(&x); });
    st.m.visit([&](const char*, Mat<float>& x) { ms.push_back(&x); });
    st.v.visit([&](const char*, Mat<float>& x) { vs.push_back(&x); });
    grad.visit([&](const char*, const Mat<float>& x) { gs.push_back(&x); });

    for (std::size_t i = 0; i < ps.size(); ++i) {
        auto& w = *ps[i];
        auto& m = *ms[i];
        auto& v = *vs[i];
        const auto& g = *gs[i];
        for (Eigen::Index j = 0; j < w.size(); ++j) {
            double gj = g.data()[j];
            m.data()[j] = static_cast<float>(b1 * m.data()[j] + (1.0 - b1) * gj);
            v.data()[j] = static_cast<float>(b2 * v.data()[j] + (1.0 - b2) * gj * gj);
            double mh = m.data()[j] / c1;
            double vh = v.data()[j] / c2;
            w.data()[j] = static_cast<float>(w.data()[j] - lr * mh / (std::sqrt(vh) + eps));
        }
    }
}

}  // namespace

TrainResult train(DenoiserModel model, const std::vector<TrainItem>& data, const TokenSequence& null_cond,
                  const NoiseSchedule& sched, const TrainConfig& cfg) {
    if (data.empty()) throw DataError("train: empty dataset");
    if (!(cfg.cond_dropout_p >= 0.0 && cfg.cond_dropout_p <= 1.0)) {
        throw ParameterError("train: cond_dropout_p must lie in [0, 1]");
    }
    if (cfg.epochs < 1 || cfg.batch_size < 1 || !(cfg.lr > 0.0)) {
        throw ParameterError("train: epochs, batch_size and lr must be positive");
    }

    TrainResult res;
    Rng rng(cfg.seed);
    AdamState adam{model.params.zeros_like(), model.params.zeros_like(), 0};
    DenoiserParams<float> grad = model.params.zeros_like();
    std::vector<std::size_t> order(data.size());

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), rng.engine());

        KahanSum epoch_loss;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            grad.visit([](const char*, Mat<float>& x) { x.setZero(); });
            for (std::size_t b = start; b < end; ++b) {
                const TrainItem& item = data[order[b]];
                LossSample s;
                s.x0  = item.x0;
                s.t   = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.train_steps())));
                s.eps = LatentGrid(item.x0.channels(), item.x0.rows(), item.x0.cols());
                for (double& e : s.eps.data()) e = rng.gaussian();
                bool drop = rng.uniform(0.0, 1.0) < cfg.cond_dropout_p;
                s.tokens  = drop ? null_cond : item.tokens;
                if (cfg.objective == Objective::v) s.weight = 1.0 / sched.alpha_bar[s.t];
                if (drop) ++res.unconditional_samples;
                ++res.total_samples;
                epoch_loss.add(loss_and_gradient(model.params, model.hyper, s, sched, &grad));
            }
            float scale = 1.0f / static_cast<float>(end - start);
            grad.visit([&](const char*, Mat<float>& x) { x *= scale; });
            adam_update(model.params, grad, adam, cfg.lr);
            ++model.train_step;
        }
        res.loss_curve.push_back(epoch_loss.value() / static_cast<double>(order.size()));
    }
    model.rng_state = rng.save_state();
    res.model       = std::move(model);
    return res;
}

void write_loss_curve(const std::vector<double>& curve, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << "epoch,mean_loss\n";
    out.precision(17);
    for (std::size_t i = 0; i < curve.size(); ++i) out << (i + 1) << ',' << curve[i] << '\n';
}

// ---------------------------------------------------------------------------
// Gradient check

namespace {

struct TensorRef {
    std::string name;
    Eigen::Index rows, cols;
};

std::vector<TensorRef> tensor_table(const DenoiserParams<double>& p) {
    std::vector<TensorRef> out;
    p.visit([&](const char* name, const Mat<double>& m) { out.push_back({name, m.rows(), m.cols()}); });
    return out;
}

Mat<double>& tensor_by_name(DenoiserParams<double>& p, const std::string& name) {
    Mat<double>* hit = nullptr;
    p.visit([&](const char* n, Mat<double>& m) {
        if (name == n) hit = &m;
    });
    if (hit == nullptr) throw ParameterError("unknown parameter tensor '" + name + "'");
    return *hit;
}

GradProbe probe_entry(const DenoiserParams<double>& base, const DenoiserParams<double>& analytic,
                      const DenoiserHyper& h, const LossSample& sample, const NoiseSchedule& sched,
                      const std::string& name, int row, int col) {
    constexpr double step = 1e-4;
    DenoiserParams<double> work = base;
    Mat<double>& w = tensor_by_name(work, name);
    if (row < 0 || row >= w.rows() || col < 0 || col >= w.cols()) {
        throw ParameterError("grad probe index out of range for '" + name + "'");
    }
    const double orig = w(row, col);
    w(row, col)       = orig + step;
    double up         = loss_and_gradient<double>(work, h, sample, sched, nullptr);
    w(row, col)       = orig - step;
    double down       = loss_and_gradient<double>(work, h, sample, sched, nullptr);

    GradProbe pr;
    pr.tensor   = name;
    pr.row      = row;
    pr.col      = col;
    pr.numeric  = (up - down) / (2.0 * step);
    pr.analytic = tensor_by_name(const_cast<DenoiserParams<double>&>(analytic), name)(row, col);
    double denom = std::max({std::fabs(pr.analytic), std::fabs(pr.numeric), 1e-8});
    pr.rel_err   = std::fabs(pr.analytic - pr.numeric) / denom;
    return pr;
}

}  // namespace

GradProbe grad_probe(const DenoiserModel& m, const LossSample& sample, const NoiseSchedule& sched,
                     const std::string& tensor, int row, int col) {
    DenoiserParams<double> base = m.params.cast<double>();
    DenoiserParams<double> grad = base.zeros_like();
    loss_and_gradient<double>(base, m.hyper, sample, sched, &grad);
    return probe_entry(base, grad, m.hyper, sample, sched, tensor, row, col);
}

GradCheckReport grad_check(const DenoiserModel& m, const LossSample& sample, const NoiseSchedule& sched,
                           int probe_count, std::uint64_t seed) {
    if (probe_count < 1) throw ParameterError("grad_check: probe_count must be >= 1");
    DenoiserParams<double> base = m.params.cast<double>();
    DenoiserParams<double> grad = base.zeros_like();
    loss_and_gradient<double>(base, m.hyper, sample, sched, &grad);

    auto table        = tensor_table(base);
    std::size_t total = base.count();
    Rng rng(seed);
    GradCheckReport rep;
    for (int i = 0; i < probe_count; ++i) {
        std::size_t flat = rng.below(total);
        for (const auto& t : table) {
            std::size_t n = static_cast<std::size_t>(t.rows * t.cols);
            if (flat < n) {
                int row = static_cast<int>(flat % t.rows);
                int col = static_cast<int>(flat / t.rows);
                rep.probes.push_back(probe_entry(base, grad, m.hyper, sample, sched, t.name, row, col));
                break;
            }
            flat -= n;
        }
        rep.max_rel_err = std::max(rep.max_rel_err, rep.probes.back().rel_err);
    }
    return rep;
}

}  // namespace dlab
