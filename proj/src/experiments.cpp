#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include "dlab/error.hpp"
#include "dlab/lab.hpp"
#include "dlab/numeric.hpp"
#include "dlab/rng.hpp"
#include "dlab/spectral.hpp"

namespace dlab {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Config

ExperimentConfig::ExperimentConfig() {
    values_ = {
        {"experiment", ""},
        {"seed", "1"},
        {"out", ""},
        {"checkpoint", "runs/model.ckpt"},
        // schedule
        {"train_steps", "1000"},
        {"beta_min", "0.0001"},
        {"beta_max", "0.02"},
        {"sample_steps", "50"},
        // model and training
        {"d", "32"},
        {"hidden", "128"},
        {"model_seed", "7"},
        {"epochs", "600"},
        {"batch_size", "16"},
        {"lr", "0.003"},
        {"cond_dropout", "0.1"},
        {"train_seed", "11"},
        {"objective", "v"},
        {"per_prompt", "4"},
        {"jitter", "1.0"},
        {"data_seed", "5"},
        // prompts
        {"promptset_size", "80"},
        {"promptset_seed", "1"},
        {"prompt", "a red circle"},
        {"runs", "200"},
        {"probe_runs", "40"},
        // guidance
        {"w", "7.5"},
        {"a", "0"},
        {"mode", "full"},
        {"a_values", "0,10,20,30,40,50"},
        // probes
        {"canny_sigma", "1.0"},
        {"canny_low", "0.1"},
        {"canny_high", "0.2"},
        {"tol_px", "1"},
        {"band_fraction", "0.2"},
        {"spectrum_images", "1000"},
        {"prop1_sizes", "8,16,32,64"},
        {"prop1_trials", "2000"},
        {"delta", "0.05"},
    };
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigurationError("unknown config key '" + key + "'");
    it->second = value;
}

const std::string& ExperimentConfig::str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigurationError("unknown config key '" + key + "'");
    return it->second;
}

namespace {

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
    std::istringstream in(text);
    T v{};
    in >> v;
    if (in.fail() || !(in >> std::ws).eof()) {
        throw ConfigurationError("config key '" + key + "': cannot parse '" + text + "'");
    }
    return v;
}

std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

int ExperimentConfig::integer(const std::string& key) const { return parse_number<int>(key, str(key)); }
std::uint64_t ExperimentConfig::u64(const std::string& key) const {
    return parse_number<std::uint64_t>(key, str(key));
}
double ExperimentConfig::real(const std::string& key) const { return parse_number<double>(key, str(key)); }

std::vector<int> ExperimentConfig::integers(const std::string& key) const {
    std::vector<int> out;
    std::stringstream in(str(key));
    std::string item;
    while (std::getline(in, item, ',')) out.push_back(parse_number<int>(key, trim(item)));
    if (out.empty()) throw ConfigurationError("config key '" + key + "' is empty");
    return out;
}

std::string ExperimentConfig::serialize() const {
    std::string s;
    for (const auto& [k, v] : values_) s += k + " = " + v + "\n";
    return s;
}

void ExperimentConfig::write(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << serialize();
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigurationError("cannot read config file " + path);
    ExperimentConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigurationError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
        }
        cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

ScheduleParams schedule_params(const ExperimentConfig& cfg) {
    return {cfg.integer("train_steps"), cfg.real("beta_min"), cfg.real("beta_max"), cfg.integer("sample_steps")};
}

DenoiserHyper denoiser_hyper(const ExperimentConfig& cfg) {
    DenoiserHyper h;
    h.d      = cfg.integer("d");
    h.hidden = cfg.integer("hidden");
    h.seed   = cfg.u64("model_seed");
    return h;
}

TrainConfig train_config(const ExperimentConfig& cfg) {
    TrainConfig t;
    t.epochs         = cfg.integer("epochs");
    t.batch_size     = cfg.integer("batch_size");
    t.lr             = cfg.real("lr");
    t.cond_dropout_p = cfg.real("cond_dropout");
    t.seed           = cfg.u64("train_seed");
    const std::string& obj = cfg.str("objective");
    if (obj == "v") {
        t.objective = Objective::v;
    } else if (obj == "eps") {
        t.objective = Objective::eps;
    } else {
        throw ConfigurationError("objective must be 'v' or 'eps', got '" + obj + "'");
    }
    return t;
}

CannyParams canny_params(const ExperimentConfig& cfg) {
    return {cfg.real("canny_sigma"), cfg.real("canny_low"), cfg.real("canny_high")};
}

// ---------------------------------------------------------------------------
// Context

LabContext::LabContext(const ExperimentConfig& cfg)
    : vocab(Vocabulary::standard()),
      encoder(vocab, EncoderConfig{}),
      sched(build_schedule(schedule_params(cfg))),
      promptset(build_promptset(PromptSetConfig{vocab.n_nouns(), vocab.n_colors(), vocab.n_textures(),
                                                cfg.integer("promptset_size")},
                                cfg.u64("promptset_seed"))),
      bank(make_template_bank(vocab, DenoiserHyper{}.rows, DenoiserHyper{}.cols)) {}

Conditions LabContext::conditions(const TokenSequence& cond) const {
    return Conditions{cond, std::nullopt, encoder.null_condition(), std::nullopt, std::nullopt};
}

std::vector<Example> training_examples(const ExperimentConfig& cfg, const LabContext& lab) {
    DenoiserHyper h;
    return make_dataset(lab.vocab, lab.promptset, cfg.integer("per_prompt"), cfg.u64("data_seed"), h.rows, h.cols,
                        cfg.real("jitter"));
}

TrainResult train_from_config(const ExperimentConfig& cfg, const LabContext& lab) {
    std::vector<TrainItem> items;
    for (const auto& e : training_examples(cfg, lab)) items.push_back({e.image, lab.encoder.encode(e.prompt)});
    return train(init_model(denoiser_hyper(cfg)), items, lab.encoder.null_condition(), lab.sched, train_config(cfg));
}

DenoiserModel require_model(const ExperimentConfig& cfg) {
    return load_checkpoint(cfg.str("checkpoint"));
}

PromptSpec parse_prompt(const Vocabulary& vocab, const std::string& text) {
    std::istringstream in(text);
    std::string article, attr, noun, extra;
    in >> article >> attr >> noun;
    if (article != "a" || noun.empty() || (in >> extra)) {
        throw VocabularyError("prompt must read 'a <attribute> <noun>', got '" + text + "'");
    }
    int noun_id = -1, attr_id = -1;
    for (int i = 0; i < vocab.n_nouns(); ++i) {
        if (vocab.nouns[i] == noun) noun_id = i;
    }
    for (int i = 0; i < vocab.n_attrs(); ++i) {
        if (vocab.attribute_word(i) == attr) attr_id = i;
    }
    if (noun_id < 0) throw VocabularyError("unknown noun '" + noun + "'");
    if (attr_id < 0) throw VocabularyError("unknown attribute '" + attr + "'");
    return make_prompt(vocab, noun_id, attr_id);
}

std::vector<PromptPair> s_promptset(const std::vector<PromptSpec>& prompts, int count, std::uint64_t seed) {
    if (prompts.empty() || count < 1) throw ParameterError("s_promptset: need prompts and count >= 1");
    Rng rng(seed);
    std::vector<PromptPair> out;
    out.reserve(count);
    for (int i = 0; i < count; ++i) {
        const PromptSpec& a = prompts[static_cast<std::size_t>(i) % prompts.size()];
        for (int attempt = 0;; ++attempt) {
            if (attempt > 1000) throw DataError("s_promptset: every prompt shares the source noun");
            const PromptSpec& b = prompts[rng.below(prompts.size())];
            if (b.noun_id != a.noun_id) {
                out.push_back({a, b});
                break;
            }
        }
    }
    return out;
}

const std::vector<std::string>& experiment_names() {
    static const std::vector<std::string> names{"prop1",     "spectrum",  "attn-f1",      "token-weights", "eos-switch",
                                                "eos-window", "text-window", "drop-guidance", "eos-count",   "sos-only",
                                                "zero-rand", "kv-sub",    "gap-norms"};
    return names;
}

// ---------------------------------------------------------------------------
// Experiments

namespace {

class Csv {
public:
    Csv(const std::string& path, const std::string& header) : out_(path) {
        if (!out_) throw DataError("cannot write " + path);
        out_.precision(17);
        out_ << header << '\n';
    }
    template <typename... T>
    void row(const T&... v) {
        bool first = true;
        ((out_ << (first ? "" : ",") << v, first = false), ...);
        out_ << '\n';
    }

private:
    std::ofstream out_;
};

json check(const std::string& name, bool pass, const std::string& detail) {
    return json{{"name", name}, {"pass", pass}, {"detail", detail}};
}

std::string fmt(double v) {
    std::ostringstream s;
    s.precision(6);
    s << v;
    return s.str();
}

struct Run {
    const ExperimentConfig& cfg;
    const LabContext& lab;
    const DenoiserModel* model;
    std::string out;
    json summary;

    std::string path(const std::string& file) const { return out + "/" + file; }
    std::uint64_t seed() const { return cfg.u64("seed"); }
    std::uint64_t run_seed(std::uint64_t i) const { return mix_seed(seed(), i); }
    GuidancePolicy policy(GuidanceMode mode, int a) const { return {cfg.real("w"), a, mode}; }
    const PromptSpec& prompt(int i) const { return lab.promptset[static_cast<std::size_t>(i) % lab.promptset.size()]; }
    TokenSequence encode(const PromptSpec& p) const { return lab.encoder.encode(p); }
    const DenoiserModel& m() const { return *model; }
};

struct AlignmentTally {
    std::vector<LatentGrid> images;
    std::vector<PromptSpec> sources, targets;

    void add(LatentGrid img, const PromptSpec& src, const PromptSpec& tgt) {
        images.push_back(std::move(img));
        sources.push_back(src);
        targets.push_back(tgt);
    }
};

void exp_prop1(Run& r) {
    auto start = std::chrono::steady_clock::now();
    std::vector<ConcentrationReport> reports;
    const int trials = r.cfg.integer("prop1_trials");
    for (int size : r.cfg.integers("prop1_sizes")) {
        reports.push_back(verify_noise_concentration(size, size, trials, r.run_seed(static_cast<std::uint64_t>(size)),
                                                     r.cfg.real("delta")));
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_prop1_csv(reports, r.path("prop1.csv"));

    // Least-squares slope of log(mean power) against log(MN).
    std::vector<double> lx, ly;
    for (const auto& rep : reports) {
        lx.push_back(std::log(static_cast<double>(rep.rows) * rep.cols));
        ly.push_back(std::log(rep.mean_bin_power));
    }
    double slope = 0.0;
    if (lx.size() >= 2) {
        double mx = compensated_mean(lx), my = compensated_mean(ly);
        KahanSum sxy, sxx;
        for (std::size_t i = 0; i < lx.size(); ++i) {
            sxy.add((lx[i] - mx) * (ly[i] - my));
            sxx.add((lx[i] - mx) * (lx[i] - mx));
        }
        slope = sxy.value() / sxx.value();
    }
    double worst_violation = 0.0;
    json sizes             = json::array();
    for (const auto& rep : reports) {
        worst_violation = std::max(worst_violation, rep.violation_rate);
        sizes.push_back({{"size", rep.rows},
                         {"mean_bin_power", rep.mean_bin_power},
                         {"expected", rep.expected},
                         {"violation_rate", rep.violation_rate}});
    }
    auto at32 = std::find_if(reports.begin(), reports.end(), [](const auto& x) { return x.rows == 32; });

    r.summary["metrics"] = {{"slope", slope}, {"max_violation_rate", worst_violation}, {"seconds", secs},
                            {"sizes", sizes}};
    auto& checks = r.summary["checks"];
    if (at32 != reports.end()) {
        double rel = std::fabs(at32->mean_bin_power / at32->expected - 1.0);
        checks.push_back(check("grand mean within 2% of 1/MN at 32x32", rel <= 0.02, "relative error " + fmt(rel)));
    }
    checks.push_back(check("scaling slope -1 +- 0.05", std::fabs(slope + 1.0) <= 0.05, "slope " + fmt(slope)));
    checks.push_back(
        check("bound violation rate <= delta", worst_violation <= r.cfg.real("delta"), "max " + fmt(worst_violation)));
    checks.push_back(check("runtime < 60 s", secs < 60.0, fmt(secs) + " s"));
}

// E[ratio^2] per image: (1 - sqrt(ab))^2 + (1 - ab) * C |B| / ||x0^B||^2, since
// the band projection of iid unit noise has expected squared norm C |B|.
double closed_form_sq_ratio(const std::vector<BandSplit>& splits, int channels, int bins, Band band, double ab) {
    KahanSum s;
    int n = 0;
    for (const auto& sp : splits) {
        double norm = l2_norm(band == Band::low ? sp.low : sp.high);
        if (norm <= 1e-12) continue;
        double a = 1.0 - std::sqrt(ab);
        s.add(a * a + (1.0 - ab) * channels * bins / (norm * norm));
        ++n;
    }
    return n == 0 ? 0.0 : s.value() / n;
}

void exp_spectrum(Run& r) {
    DenoiserHyper h;
    const int count = r.cfg.integer("spectrum_images");
    int per         = (count + static_cast<int>(r.lab.promptset.size()) - 1) / static_cast<int>(r.lab.promptset.size());
    auto examples   = make_dataset(r.lab.vocab, r.lab.promptset, per, r.seed(), h.rows, h.cols, r.cfg.real("jitter"));
    std::vector<LatentGrid> images;
    for (int i = 0; i < count; ++i) images.push_back(examples[i].image);

    const double fraction = r.cfg.real("band_fraction");
    CurveTable table      = corruption_curves(images, r.lab.sched, fraction, r.seed());
    write_curves_csv(table, r.path("spectrum.csv"));

    BandMask mask = make_band_mask(h.rows, h.cols, fraction);
    std::vector<BandSplit> splits;
    for (const auto& img : images) splits.push_back(band_split(img, mask));
    const int bins_low  = mask.low_count();
    const int bins_high = h.rows * h.cols - bins_low;

    Csv oracle(r.path("spectrum_oracle.csv"), "t,band,mc_mean_sq_ratio,closed_form,relative_error");
    bool ordered = true, within = true;
    double worst = 0.0;
    int first_bad = -1;
    for (int t : r.lab.sched.ddim_steps) {
        double ab = r.lab.sched.alpha_bar[t];
        for (Band b : {Band::low, Band::high}) {
            const CurveRow& row = table.at(t, b);
            double cf  = closed_form_sq_ratio(splits, h.channels, b == Band::low ? bins_low : bins_high, b, ab);
            double rel = std::fabs(row.mean_sq_ratio / cf - 1.0);
            worst      = std::max(worst, rel);
            within     = within && rel <= 0.05;
            oracle.row(t, to_string(b), row.mean_sq_ratio, cf, rel);
        }
        if (t < r.lab.sched.train_steps() &&
            table.at(t, Band::high).variation_ratio < table.at(t, Band::low).variation_ratio) {
            ordered = false;
            if (first_bad < 0) first_bad = t;
        }
    }
    r.summary["metrics"] = {{"images", count}, {"flagged", table.flagged.size()}, {"max_oracle_rel_error", worst}};
    r.summary["checks"].push_back(check("high-band ratio >= low-band ratio at every interior sampled t", ordered,
                                        ordered ? "holds" : "fails at t=" + std::to_string(first_bad)));
    r.summary["checks"].push_back(
        check("Monte-Carlo ratio within 5% of closed form", within, "max relative error " + fmt(worst)));
}

Trajectory sample(const Run& r, const GuidancePolicy& pol, const Conditions& c, std::uint64_t seed) {
    return sample_trajectory(r.m(), r.lab.sched, pol, c, seed);
}

void exp_attn_f1(Run& r) {
    const int runs = r.cfg.integer("probe_runs");
    const int S    = r.lab.sched.sample_steps();
    std::vector<KahanSum> acc(S);
    int used = 0, degenerate = 0;
    for (int i = 0; i < runs; ++i) {
        TokenSequence c = r.encode(r.prompt(i));
        Trajectory tr   = sample(r, r.policy(GuidanceMode::full, 0), r.lab.conditions(c), r.run_seed(i));
        try {
            auto curve = relative_f1_curve(tr, c.tags, canny_params(r.cfg), r.cfg.integer("tol_px"));
            for (int k = 0; k < S; ++k) acc[k].add(curve[k].relative);
            ++used;
        } catch (const DataError&) {
            ++degenerate;
        }
    }
    Csv csv(r.path("attn_f1.csv"), "step_rank,t,mean_relative_f1");
    int reach_rank = -1;
    for (int k = 0; k < S; ++k) {
        int rank    = S - k;
        double mean = used == 0 ? 0.0 : acc[k].value() / used;
        csv.row(rank, r.lab.sched.timestep_at_rank(rank), mean);
        if (reach_rank < 0 && mean >= 0.8) reach_rank = rank;
    }
    bool early           = reach_rank > S / 2;
    r.summary["metrics"] = {{"runs", runs}, {"degenerate_runs", degenerate}, {"first_rank_at_0.8", reach_rank}};
    r.summary["observations"].push_back(check("relative F1 reaches 0.8 before the midpoint step", early,
                                              "first rank with mean >= 0.8: " + std::to_string(reach_rank)));
}

void exp_token_weights(Run& r) {
    const int runs = r.cfg.integer("probe_runs");
    const int S    = r.lab.sched.sample_steps();
    std::vector<std::array<KahanSum, 6>> acc(S);
    for (int i = 0; i < runs; ++i) {
        TokenSequence c = r.encode(r.prompt(i));
        Trajectory tr   = sample(r, r.policy(GuidanceMode::full, 0), r.lab.conditions(c), r.run_seed(i));
        auto w          = attention_class_weights(tr, c.tags);
        for (int k = 0; k < S; ++k) {
            double v[6] = {w[k].sos, w[k].sem, w[k].eos, w[k].sos_total, w[k].sem_total, w[k].eos_total};
            for (int j = 0; j < 6; ++j) acc[k][j].add(v[j]);
        }
    }
    Csv csv(r.path("token_weights.csv"), "step_rank,t,sos,sem,eos,sos_total,sem_total,eos_total");
    KahanSum sos_total;
    for (int k = 0; k < S; ++k) {
        int rank = S - k;
        double m[6];
        for (int j = 0; j < 6; ++j) m[j] = acc[k][j].value() / runs;
        csv.row(rank, r.lab.sched.timestep_at_rank(rank), m[0], m[1], m[2], m[3], m[4], m[5]);
        sos_total.add(m[3]);
    }
    r.summary["metrics"] = {{"runs", runs}, {"mean_sos_total", sos_total.value() / S},
                            {"pretrained_reference_sos", "> 0.9"}};
}

json alignment_json(const AlignmentReport& a) {
    return {{"shape", a.shape_accuracy}, {"attribute", a.attribute_accuracy}, {"combined", a.combined}};
}

void exp_eos_switch(Run& r) {
    auto pairs = s_promptset(r.lab.promptset, r.cfg.integer("runs"), r.seed());
    Csv csv(r.path("eos_switch.csv"), "pair,src_noun,src_attr,tgt_noun,tgt_attr,pred_noun,pred_attr");
    AlignmentTally tally;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        TokenSequence a = r.encode(pairs[i].source), b = r.encode(pairs[i].target);
        TokenSequence sw = apply_surgery(a, &b, SurgerySpec{});
        Trajectory tr    = sample(r, r.policy(GuidanceMode::full, 0), r.lab.conditions(sw), r.run_seed(i));
        PromptSpec pred  = classify(tr.final_image(), r.lab.bank);
        csv.row(i, pairs[i].source.noun_id, pairs[i].source.attribute_id, pairs[i].target.noun_id,
                pairs[i].target.attribute_id, pred.noun_id, pred.attribute_id);
        tally.add(tr.final_image(), pairs[i].source, pairs[i].target);
    }
    AlignmentReport src  = prompt_alignment(tally.images, tally.sources, r.lab.bank);
    AlignmentReport tgt  = prompt_alignment(tally.images, tally.targets, r.lab.bank);
    r.summary["metrics"] = {{"pairs", pairs.size()}, {"source", alignment_json(src)}, {"target", alignment_json(tgt)}};
    r.summary["checks"].push_back(check("target shape accuracy > source shape accuracy",
                                        tgt.shape_accuracy > src.shape_accuracy,
                                        "target " + fmt(tgt.shape_accuracy) + " vs source " + fmt(src.shape_accuracy)));
}

void exp_eos_window(Run& r) {
    auto pairs = s_promptset(r.lab.promptset, r.cfg.integer("probe_runs"), r.seed());
    Csv csv(r.path("eos_window.csv"),
            "start_step,src_shape,tgt_shape,src_attr,tgt_attr,src_relative_shape,tgt_relative_shape");
    std::vector<int> starts = r.cfg.integers("a_values");
    std::vector<AlignmentReport> src, tgt;
    for (int a : starts) {
        AlignmentTally tally;
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            TokenSequence ta = r.encode(pairs[i].source), tb = r.encode(pairs[i].target);
            // Switched EOS on the noisy steps (index >= a), the source prompt after.
            Conditions c{apply_surgery(ta, &tb, SurgerySpec{}), ta, r.lab.encoder.null_condition(), std::nullopt,
                         std::nullopt};
            Trajectory tr = sample(r, r.policy(GuidanceMode::switch_, a), c, r.run_seed(i));
            tally.add(tr.final_image(), pairs[i].source, pairs[i].target);
        }
        src.push_back(prompt_alignment(tally.images, tally.sources, r.lab.bank));
        tgt.push_back(prompt_alignment(tally.images, tally.targets, r.lab.bank));
    }
    std::vector<double> both;
    for (std::size_t k = 0; k < starts.size(); ++k) both.push_back(src[k].shape_accuracy);
    for (std::size_t k = 0; k < starts.size(); ++k) both.push_back(tgt[k].shape_accuracy);
    bool flat = std::all_of(both.begin(), both.end(), [&](double v) { return v == both.front(); });
    std::vector<double> rel = flat ? std::vector<double>(both.size(), 0.0) : relative_score(both);
    for (std::size_t k = 0; k < starts.size(); ++k) {
        csv.row(starts[k], src[k].shape_accuracy, tgt[k].shape_accuracy, src[k].attribute_accuracy,
                tgt[k].attribute_accuracy, rel[k], rel[starts.size() + k]);
    }
    r.summary["metrics"] = {{"pairs", pairs.size()}};
}

// Mean l1 to a reference run and alignment per a, for one drop mode.
struct WindowRow {
    int a = 0;
    double mean_l1 = 0.0;
    AlignmentReport alignment;
    int cond_evals = 0, uncond_evals = 0;
    double seconds = 0.0;
};

std::vector<WindowRow> window_sweep(Run& r, GuidanceMode mode, int reference_a, int runs, bool* identical) {
    std::vector<int> as = r.cfg.integers("a_values");
    std::vector<Trajectory> reference;
    for (int i = 0; i < runs; ++i) {
        reference.push_back(sample(r, r.policy(mode, reference_a), r.lab.conditions(r.encode(r.prompt(i))),
                                   r.run_seed(i)));
    }
    if (identical != nullptr) {
        // The a = 0 drop run against a plain full-guidance baseline.
        *identical = true;
        for (int i = 0; i < runs && *identical; ++i) {
            Trajectory full = sample(r, r.policy(GuidanceMode::full, 0), r.lab.conditions(r.encode(r.prompt(i))),
                                     r.run_seed(i));
            Trajectory zero = sample(r, r.policy(mode, 0), r.lab.conditions(r.encode(r.prompt(i))), r.run_seed(i));
            for (std::size_t k = 0; k < full.records.size(); ++k) {
                if (!(full.records[k].x == zero.records[k].x)) *identical = false;
            }
            *identical = *identical && full.total_evals() == zero.total_evals();
        }
    }
    std::vector<WindowRow> rows;
    for (int a : as) {
        WindowRow row;
        row.a = a;
        KahanSum l1;
        std::vector<LatentGrid> imgs;
        std::vector<PromptSpec> ps;
        auto start = std::chrono::steady_clock::now();
        for (int i = 0; i < runs; ++i) {
            Trajectory tr = sample(r, r.policy(mode, a), r.lab.conditions(r.encode(r.prompt(i))), r.run_seed(i));
            l1.add(l1_distance(tr.final_image(), reference[i].final_image()));
            row.cond_evals += tr.cond_evals();
            row.uncond_evals += tr.uncond_evals();
            imgs.push_back(tr.final_image());
            ps.push_back(r.prompt(i));
        }
        row.seconds   = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        row.mean_l1   = l1.value() / runs;
        row.alignment = prompt_alignment(imgs, ps, r.lab.bank);
        rows.push_back(row);
    }
    return rows;
}

void write_window_csv(const std::string& path, const std::vector<WindowRow>& rows) {
    std::vector<double> l1, al;
    for (const auto& w : rows) {
        l1.push_back(w.mean_l1);
        al.push_back(w.alignment.combined);
    }
    auto safe_rel = [](const std::vector<double>& v) {
        bool flat = std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
        return flat ? std::vector<double>(v.size(), 1.0) : relative_score(v);
    };
    // Lower l1 is better, so its relative score is taken on -l1.
    std::vector<double> neg_l1;
    for (double v : l1) neg_l1.push_back(-v);
    auto rel_l1 = safe_rel(neg_l1), rel_al = safe_rel(al);
    Csv csv(path, "a,mean_l1,shape_accuracy,attribute_accuracy,alignment,relative_l1,relative_alignment,cond_evals,"
                  "uncond_evals");
    for (std::size_t k = 0; k < rows.size(); ++k) {
        const auto& w = rows[k];
        csv.row(w.a, w.mean_l1, w.alignment.shape_accuracy, w.alignment.attribute_accuracy, w.alignment.combined,
                rel_l1[k], rel_al[k], w.cond_evals, w.uncond_evals);
    }
}

void exp_text_window(Run& r) {
    const int S    = r.lab.sched.sample_steps();
    const int runs = r.cfg.integer("probe_runs");
    auto early     = window_sweep(r, GuidanceMode::drop_early, S, runs, nullptr);
    write_window_csv(r.path("text_window.csv"), early);
    r.summary["metrics"] = {{"runs", runs}, {"reference", "drop-early with a = S (full guidance)"}};
}

void exp_drop_guidance(Run& r) {
    const int S    = r.lab.sched.sample_steps();
    const int runs = r.cfg.integer("runs");
    bool identical = false;
    auto rows      = window_sweep(r, GuidanceMode::drop_late, 0, runs, &identical);
    write_window_csv(r.path("drop_guidance.csv"), rows);

    const WindowRow* base = nullptr;
    for (const auto& w : rows) {
        if (w.a == 0) base = &w;
    }
    if (base == nullptr) throw ConfigurationError("drop-guidance needs a = 0 in a_values");

    auto& checks = r.summary["checks"];
    checks.push_back(check("a = 0 run byte-identical to the full-guidance baseline", identical,
                           identical ? "identical" : "differs"));

    bool savings_exact = true;
    json savings       = json::array();
    std::vector<double> as, l1s;
    for (const auto& w : rows) {
        // Integer form of savings == a / 2S: baseline executes 2S passes per run.
        int base_total = 2 * S * runs;
        int saved      = base_total - (w.cond_evals + w.uncond_evals);
        savings_exact  = savings_exact && saved == w.a * runs;
        double frac    = static_cast<double>(saved) / base_total;
        double wall    = base->seconds > 0 ? 1.0 - w.seconds / base->seconds : 0.0;
        savings.push_back({{"a", w.a}, {"eval_savings", frac}, {"expected", w.a / (2.0 * S)}, {"wall_clock_savings", wall}});
        as.push_back(w.a);
        l1s.push_back(w.mean_l1);
    }
    checks.push_back(check("eval savings exactly a / 2S", savings_exact, "over " + std::to_string(runs) + " runs"));

    double rho = spearman(as, l1s);
    checks.push_back(check("mean l1 monotone in a (Spearman >= 0.9)", rho >= 0.9, "rho " + fmt(rho)));

    const double a0 = base->alignment.combined;
    bool kept       = a0 > 0.0;
    std::string kept_detail;
    const WindowRow* last = nullptr;
    for (const auto& w : rows) {
        if (w.a <= 20) {
            double rel = a0 > 0.0 ? std::fabs(w.alignment.combined / a0 - 1.0) : 1.0;
            kept       = kept && rel <= 0.05;
            kept_detail += "a=" + std::to_string(w.a) + ": " + fmt(w.alignment.combined) + " ";
        }
        if (w.a == S) last = &w;
    }
    checks.push_back(check("alignment within 5% of a = 0 for a <= 20", kept, kept_detail));
    if (last != nullptr) {
        double drop = a0 > 0.0 ? 1.0 - last->alignment.combined / a0 : 0.0;
        checks.push_back(check("alignment drops >= 20% at a = S", drop >= 0.2,
                               "a=0: " + fmt(a0) + ", a=S: " + fmt(last->alignment.combined)));
    } else {
        checks.push_back(check("alignment drops >= 20% at a = S", false, "a = S missing from a_values"));
    }
    r.summary["metrics"] = {{"runs", runs}, {"savings", savings}, {"spearman_l1", rho},
                            {"reference_wall_clock_savings_a20", 0.181}};
}

// Alignment of samples under surgically altered conditions.
AlignmentReport surgery_alignment(Run& r, const std::function<TokenSequence(const TokenSequence&, int)>& alter,
                                  int runs) {
    std::vector<LatentGrid> imgs;
    std::vector<PromptSpec> ps;
    for (int i = 0; i < runs; ++i) {
        TokenSequence c = alter(r.encode(r.prompt(i)), i);
        Trajectory tr   = sample(r, r.policy(GuidanceMode::full, 0), r.lab.conditions(c), r.run_seed(i));
        imgs.push_back(tr.final_image());
        ps.push_back(r.prompt(i));
    }
    return prompt_alignment(imgs, ps, r.lab.bank);
}

void write_variants(Run& r, const std::string& file, const std::vector<std::pair<std::string, AlignmentReport>>& v) {
    Csv csv(r.path(file), "variant,shape_accuracy,attribute_accuracy,alignment");
    json m = json::object();
    for (const auto& [name, a] : v) {
        csv.row(name, a.shape_accuracy, a.attribute_accuracy, a.combined);
        m[name] = alignment_json(a);
    }
    r.summary["metrics"] = m;
}

void exp_eos_count(Run& r) {
    const int runs = r.cfg.integer("probe_runs");
    const int L    = r.lab.encoder.config().length;
    std::vector<std::pair<std::string, AlignmentReport>> rows;
    Csv csv(r.path("eos_count.csv"), "repeat_count,eos_count,shape_accuracy,attribute_accuracy,alignment");
    for (int rep = 1; 1 + 3 * rep < L; ++rep) {
        SurgerySpec spec;
        spec.kind         = SurgeryKind::repeat_sem;
        spec.repeat_count = rep;
        AlignmentReport a = surgery_alignment(r, [&](const TokenSequence& s, int) { return apply_surgery(s, nullptr, spec); },
                                              runs);
        int eos = L - 1 - 3 * rep;
        csv.row(rep, eos, a.shape_accuracy, a.attribute_accuracy, a.combined);
        r.summary["metrics"]["eos_" + std::to_string(eos)] = alignment_json(a);
    }
}

void exp_sos_only(Run& r) {
    const int runs = r.cfg.integer("probe_runs");
    auto with      = [&](SurgeryKind k) {
        SurgerySpec spec;
        spec.kind = k;
        return surgery_alignment(r, [&](const TokenSequence& s, int) { return apply_surgery(s, nullptr, spec); }, runs);
    };
    auto plain = surgery_alignment(r, [](const TokenSequence& s, int) { return s; }, runs);
    write_variants(r, "sos_only.csv",
                   {{"original", plain}, {"sos_only", with(SurgeryKind::sos_only)}, {"eos_only", with(SurgeryKind::eos_only)}});
}

void exp_zero_rand(Run& r) {
    const int runs = r.cfg.integer("probe_runs");
    auto with      = [&](SurgeryKind k, TokenClass target) {
        return surgery_alignment(
            r,
            [&](const TokenSequence& s, int i) {
                SurgerySpec spec;
                spec.kind         = k;
                spec.target_class = target;
                spec.seed         = r.run_seed(static_cast<std::uint64_t>(i) + 1000003);
                return apply_surgery(s, nullptr, spec);
            },
            runs);
    };
    auto plain = surgery_alignment(r, [](const TokenSequence& s, int) { return s; }, runs);
    write_variants(r, "zero_rand.csv",
                   {{"sem+eos", plain},
                    {"sem+zero", with(SurgeryKind::zero_class, TokenClass::eos)},
                    {"sem+rand", with(SurgeryKind::random_class, TokenClass::eos)},
                    {"zero+eos", with(SurgeryKind::zero_class, TokenClass::sem)},
                    {"rand+eos", with(SurgeryKind::random_class, TokenClass::sem)}});
}

void exp_kv_sub(Run& r) {
    auto pairs     = s_promptset(r.lab.promptset, r.cfg.integer("probe_runs"), r.seed());
    const int S    = r.lab.sched.sample_steps();
    Csv csv(r.path("kv_sub.csv"), "variant,src_shape,tgt_shape,src_attr,tgt_attr");
    std::vector<KahanSum> kl(S), kl_uniform(S);
    for (KvScope scope : {KvScope::both, KvScope::key_only, KvScope::value_only}) {
        AlignmentTally tally;
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            TokenSequence a = r.encode(pairs[i].source), b = r.encode(pairs[i].target);
            SurgerySpec spec;
            spec.kv_scope    = scope;
            TokenSequence sw = apply_surgery(a, &b, spec);
            Conditions c{sw, std::nullopt, r.lab.encoder.null_condition(), a, std::nullopt};
            Trajectory tr = sample(r, r.policy(GuidanceMode::full, 0), c, r.run_seed(i));
            tally.add(tr.final_image(), pairs[i].source, pairs[i].target);
            if (scope == KvScope::key_only) {
                // Attention under substituted vs original keys on the same latents.
                for (int k = 0; k < S; ++k) {
                    const auto& rec = tr.records[k];
                    AttentionMap orig = predict_noise(r.m(), rec.t, rec.x, a).attention;
                    AttentionMap uniform{orig.pixels, orig.tokens,
                                         std::vector<double>(orig.weights.size(), 1.0 / orig.tokens)};
                    kl[k].add(attention_kl(*rec.attention, orig));
                    kl_uniform[k].add(attention_kl(orig, uniform));
                }
            }
        }
        AlignmentReport src = prompt_alignment(tally.images, tally.sources, r.lab.bank);
        AlignmentReport tgt = prompt_alignment(tally.images, tally.targets, r.lab.bank);
        const char* name = scope == KvScope::both ? "kv" : scope == KvScope::key_only ? "k" : "v";
        csv.row(name, src.shape_accuracy, tgt.shape_accuracy, src.attribute_accuracy, tgt.attribute_accuracy);
        r.summary["metrics"][name] = {{"source", alignment_json(src)}, {"target", alignment_json(tgt)}};
    }
    Csv kcsv(r.path("kv_kl.csv"), "step_rank,t,kl_key_substituted,kl_uniform_baseline");
    const double n = static_cast<double>(pairs.size());
    for (int k = 0; k < S; ++k) {
        int rank = S - k;
        kcsv.row(rank, r.lab.sched.timestep_at_rank(rank), kl[k].value() / n, kl_uniform[k].value() / n);
    }
}

void exp_gap_norms(Run& r) {
    const int runs = r.cfg.integer("runs");
    const int S    = r.lab.sched.sample_steps();
    std::vector<KahanSum> un(S), gap(S);
    for (int i = 0; i < runs; ++i) {
        Trajectory tr = sample(r, r.policy(GuidanceMode::full, 0), r.lab.conditions(r.encode(r.prompt(i))),
                               r.run_seed(i));
        auto g = guidance_gap_norms(tr);
        for (int k = 0; k < S; ++k) {
            un[k].add(g[k].uncond_rms);
            gap[k].add(g[k].gap_rms);
        }
    }
    Csv csv(r.path("gap_norms.csv"), "step_rank,t,uncond_rms,gap_rms");
    KahanSum first, last;
    const int q = std::max(1, S / 4);
    for (int k = 0; k < S; ++k) {
        int rank = S - k;
        csv.row(rank, r.lab.sched.timestep_at_rank(rank), un[k].value() / runs, gap[k].value() / runs);
        if (k < q) first.add(gap[k].value() / runs);
        if (k >= S - q) last.add(gap[k].value() / runs);
    }
    double f = first.value() / q, l = last.value() / q;
    r.summary["metrics"] = {{"runs", runs}, {"gap_first_quarter", f}, {"gap_last_quarter", l}};
    r.summary["observations"].push_back(
        check("gap norm decreases from the first to the last quarter", l < f, fmt(f) + " -> " + fmt(l)));
}

bool needs_model(const std::string& name) { return name != "prop1" && name != "spectrum"; }

}  // namespace

json run_experiment(const ExperimentConfig& cfg, const DenoiserModel* model) {
    const std::string& name = cfg.str("experiment");
    static const std::map<std::string, std::function<void(Run&)>> table{
        {"prop1", exp_prop1},           {"spectrum", exp_spectrum},       {"attn-f1", exp_attn_f1},
        {"token-weights", exp_token_weights}, {"eos-switch", exp_eos_switch}, {"eos-window", exp_eos_window},
        {"text-window", exp_text_window}, {"drop-guidance", exp_drop_guidance}, {"eos-count", exp_eos_count},
        {"sos-only", exp_sos_only},     {"zero-rand", exp_zero_rand},     {"kv-sub", exp_kv_sub},
        {"gap-norms", exp_gap_norms}};
    auto it = table.find(name);
    if (it == table.end()) {
        std::string known;
        for (const auto& n : experiment_names()) known += " " + n;
        throw ConfigurationError("unknown experiment '" + name + "'; expected one of:" + known);
    }

    DenoiserModel loaded;
    if (needs_model(name) && model == nullptr) {
        loaded = require_model(cfg);
        model  = &loaded;
    }
    LabContext lab(cfg);
    std::string out = cfg.str("out").empty() ? "runs/" + name : cfg.str("out");
    std::filesystem::create_directories(out);
    cfg.write(out + "/config.txt");

    Run run{cfg, lab, model, out, json::object()};
    run.summary["experiment"]   = name;
    run.summary["seed"]         = cfg.u64("seed");
    run.summary["checks"]       = json::array();
    run.summary["observations"] = json::array();
    it->second(run);

    std::ofstream sum(out + "/summary.json");
    if (!sum) throw DataError("cannot write " + out + "/summary.json");
    sum << run.summary.dump(2) << '\n';
    return run.summary;
}

}  // namespace dlab
