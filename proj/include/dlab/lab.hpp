#pragma once

#include <cstdint>
#include <json.hpp>
#include <map>
#include <string>
#include <vector>

#include "dlab/denoiser.hpp"
#include "dlab/probes.hpp"
#include "dlab/prompt.hpp"
#include "dlab/sampler.hpp"
#include "dlab/schedule.hpp"

namespace dlab {

// Flat key = value configuration. Every key has a default; unknown keys are
// rejected so typos do not silently fall back.
class ExperimentConfig {
public:
    ExperimentConfig();

    void set(const std::string& key, const std::string& value);
    bool has(const std::string& key) const { return values_.count(key) != 0; }

    const std::string& str(const std::string& key) const;
    int integer(const std::string& key) const;
    std::uint64_t u64(const std::string& key) const;
    double real(const std::string& key) const;
    std::vector<int> integers(const std::string& key) const;

    // Sorted "key = value" lines, the format accepted by load_config.
    std::string serialize() const;
    void write(const std::string& path) const;

    const std::map<std::string, std::string>& values() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

// Blank lines and '#' comments are skipped. A missing file is a usage error.
ExperimentConfig load_config(const std::string& path);

ScheduleParams schedule_params(const ExperimentConfig& cfg);
DenoiserHyper denoiser_hyper(const ExperimentConfig& cfg);
TrainConfig train_config(const ExperimentConfig& cfg);
CannyParams canny_params(const ExperimentConfig& cfg);

// Shared objects derived from a config.
struct LabContext {
    Vocabulary vocab;
    PromptEncoder encoder;
    NoiseSchedule sched;
    std::vector<PromptSpec> promptset;
    TemplateBank bank;

    explicit LabContext(const ExperimentConfig& cfg);

    Conditions conditions(const TokenSequence& cond) const;
};

// Training set of the toy model: per_prompt jittered renders of the promptset.
std::vector<Example> training_examples(const ExperimentConfig& cfg, const LabContext& lab);
TrainResult train_from_config(const ExperimentConfig& cfg, const LabContext& lab);

// Loads the `checkpoint` path; a missing file is a dependency error.
DenoiserModel require_model(const ExperimentConfig& cfg);

// Prompt text "a <attribute> <noun>" back to ids.
PromptSpec parse_prompt(const Vocabulary& vocab, const std::string& text);

// Source/target pairs with different nouns, cycling over the promptset.
struct PromptPair {
    PromptSpec source;
    PromptSpec target;
};
std::vector<PromptPair> s_promptset(const std::vector<PromptSpec>& prompts, int count, std::uint64_t seed);

const std::vector<std::string>& experiment_names();

// Runs the named experiment (cfg key `experiment`) into cfg key `out`, writing
// config.txt, CSVs and summary.json. `model` overrides loading the checkpoint.
// Returns the summary.
nlohmann::ordered_json run_experiment(const ExperimentConfig& cfg, const DenoiserModel* model = nullptr);

struct ReportResult {
    bool pass = true;
    int sections = 0;
    std::vector<std::string> failures;  // "experiment: check"
    std::vector<std::string> missing;   // run dirs without summary.json
    std::string text;
};

// Aggregates summary.json files from run directories.
ReportResult write_report(const std::vector<std::string>& run_dirs, const std::string& out_path);

}  // namespace dlab
