// lab: command-line driver for the toy diffusion lab.
//
//   lab gen-data --config c.txt --out data/
//   lab train    --config c.txt
//   lab sample   --config c.txt --out samples/ --w 7.5 --a 20 --mode drop_late
//   lab run prop1 --config c.txt --out runs/prop1
//   lab report runs/prop1 runs/spectrum --out report.md

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>

#include "dlab/error.hpp"
#include "dlab/lab.hpp"

namespace {

using namespace dlab;

struct Overrides {
    std::string config;
    std::string out;
    std::string seed, w, a, mode;
};

ExperimentConfig resolve(const Overrides& o) {
    ExperimentConfig cfg = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
    if (!o.seed.empty()) cfg.set("seed", o.seed);
    if (!o.out.empty()) cfg.set("out", o.out);
    if (!o.w.empty()) cfg.set("w", o.w);
    if (!o.a.empty()) cfg.set("a", o.a);
    if (!o.mode.empty()) cfg.set("mode", o.mode);
    return cfg;
}

void add_common(CLI::App* sub, Overrides& o) {
    sub->add_option("--config", o.config, "flat key = value config file");
    sub->add_option("--seed", o.seed, "run seed");
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--w", o.w, "guidance scale");
    sub->add_option("--a", o.a, "drop / switch step count");
    sub->add_option("--mode", o.mode, "full, drop_late, drop_early or switch");
}

std::string out_dir(const ExperimentConfig& cfg, const std::string& fallback) {
    std::string out = cfg.str("out").empty() ? fallback : cfg.str("out");
    std::filesystem::create_directories(out);
    return out;
}

int gen_data(const ExperimentConfig& cfg) {
    LabContext lab(cfg);
    std::string out = out_dir(cfg, "data");
    export_dataset(training_examples(cfg, lab), out);
    write_vocabulary(lab.vocab, out + "/vocabulary.txt");
    cfg.write(out + "/config.txt");
    std::cout << "wrote dataset to " << out << "\n";
    return 0;
}

int train_cmd(const ExperimentConfig& cfg) {
    LabContext lab(cfg);
    TrainResult res     = train_from_config(cfg, lab);
    std::string ckpt    = cfg.str("checkpoint");
    auto parent         = std::filesystem::path(ckpt).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    save_checkpoint(res.model, ckpt);
    std::string out = out_dir(cfg, parent.empty() ? "." : parent.string());
    write_loss_curve(res.loss_curve, out + "/loss_curve.csv");
    cfg.write(out + "/train_config.txt");
    std::cout << "loss " << res.loss_curve.front() << " -> " << res.loss_curve.back() << ", checkpoint " << ckpt
              << "\n";
    return 0;
}

int sample_cmd(const ExperimentConfig& cfg) {
    LabContext lab(cfg);
    DenoiserModel model = require_model(cfg);
    PromptSpec prompt   = parse_prompt(lab.vocab, cfg.str("prompt"));
    GuidancePolicy pol{cfg.real("w"), cfg.integer("a"), parse_mode(cfg.str("mode"))};
    if (pol.mode == GuidanceMode::switch_) {
        throw ConfigurationError("sample: switch mode needs a second condition; use `lab run eos-window`");
    }
    Trajectory tr   = sample_trajectory(model, lab.sched, pol, lab.conditions(lab.encoder.encode(prompt)),
                                        cfg.u64("seed"));
    std::string out = out_dir(cfg, "samples");
    export_trajectory(tr, out);
    cfg.write(out + "/config.txt");
    std::cout << "wrote trajectory to " << out << " (" << tr.total_evals() << " forward passes)\n";
    return 0;
}

int run_cmd(ExperimentConfig cfg, const std::string& name) {
    cfg.set("experiment", name);
    auto summary = run_experiment(cfg);
    bool ok      = true;
    for (const auto& c : summary["checks"]) {
        std::cout << (c["pass"].get<bool>() ? "PASS " : "FAIL ") << c["name"].get<std::string>() << " ("
                  << c["detail"].get<std::string>() << ")\n";
        ok = ok && c["pass"].get<bool>();
    }
    std::cout << name << ": " << (ok ? "ok" : "checks failed") << "\n";
    return 0;
}

int report_cmd(const std::vector<std::string>& dirs, const std::string& out) {
    ReportResult r = write_report(dirs, out.empty() ? "report.md" : out);
    for (const auto& m : r.missing) std::cerr << "missing summary: " << m << "\n";
    for (const auto& f : r.failures) std::cout << "FAIL " << f << "\n";
    std::cout << (r.pass ? "PASS" : "FAIL") << " (" << r.sections << " sections)\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"toy diffusion lab"};
    app.require_subcommand(1);

    Overrides o;
    auto* gen = app.add_subcommand("gen-data", "render the training dataset");
    auto* tr  = app.add_subcommand("train", "train the toy denoiser");
    auto* sm  = app.add_subcommand("sample", "sample one prompt and dump the trajectory");
    auto* run = app.add_subcommand("run", "run a named experiment");
    auto* rep = app.add_subcommand("report", "aggregate experiment summaries");
    for (auto* s : {gen, tr, sm, run}) add_common(s, o);

    std::string experiment;
    run->add_option("experiment", experiment, "experiment name")->required();
    std::vector<std::string> dirs;
    rep->add_option("dirs", dirs, "run directories");
    rep->add_option("--out", o.out, "report path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : static_cast<int>(dlab::ExitCode::usage);
    }

    try {
        if (*rep) return report_cmd(dirs, o.out);
        dlab::ExperimentConfig cfg = resolve(o);
        if (*gen) return gen_data(cfg);
        if (*tr) return train_cmd(cfg);
        if (*sm) return sample_cmd(cfg);
        return run_cmd(cfg, experiment);
    } catch (const dlab::LabError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return static_cast<int>(e.exit_code());
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return static_cast<int>(dlab::ExitCode::data);
    }
}
