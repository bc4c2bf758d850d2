#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mitst/data_model.hpp"
#include "mitst/filter.hpp"
#include "mitst/io.hpp"
#include "mitst/model.hpp"
#include "mitst/preprocess.hpp"
#include "mitst/synthgen.hpp"
#include "mitst/training.hpp"

namespace mitst {

/// Bad configuration or invocation (exit status 2).
class UsageError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// An upstream artifact a command depends on does not exist (exit status 2).
class MissingArtifact : public UsageError {
   public:
    explicit MissingArtifact(const std::filesystem::path& path)
        : UsageError("missing upstream artifact: " + path.string()), path_(path) {}
    const std::filesystem::path& path() const { return path_; }

   private:
    std::filesystem::path path_;
};

inline constexpr const char* kOutputRootEnv = "MITST_OUT";

struct SplitConfig {
    SplitFractions fractions;
    std::uint64_t seed = 11;
};

struct PreprocessConfig {
    double low_quantile = 0.0005;
    double high_quantile = 0.9995;
    FrequencyTable frequencies = FrequencyTable::defaults();
    std::optional<RecordFilter> record_filter;
};

struct EvaluateConfig {
    int bootstrap_resamples = 1000;
    int permutations = 1000;
    std::uint64_t seed = 5;
    std::vector<double> hypo_fractions = {0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 0.10};
    std::vector<double> hyper_fractions = {0.05, 0.10, 0.15, 0.20, 0.25, 0.30};
    std::vector<std::string> subgroups = {"diabetic", "non_diabetic", "hypo_prone", "labile"};
    std::string checkpoint;  // empty: <out>/train/checkpoint.mitst
};

struct FinetuneConfig {
    LabelRule label_rule{90.0, 160.0, 5, 5.0, 600.0};
    TrainConfig train;
    std::string checkpoint;  // empty: <out>/train/checkpoint.mitst
};

struct PredictConfig {
    std::string checkpoint;  // empty: <out>/train/checkpoint.mitst
    std::string input;       // request JSON, array of requests, or a templates file
};

struct ServeConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string checkpoint;  // empty: <out>/train/checkpoint.mitst
    std::string templates;   // empty: <out>/eval/templates.json when present
};

struct PipelineConfig {
    GeneratorConfig generator;
    SplitConfig split;
    LabelRule label_rule;
    PreprocessConfig preprocess;
    ModelConfig model;
    TrainConfig train;
    EvaluateConfig evaluate;
    FinetuneConfig finetune;
    PredictConfig predict;
    ServeConfig serve;

    json to_json() const;
    /// Every section is optional; unknown keys are refused with their dotted path.
    static PipelineConfig from_json(const json& j);
    /// SHA-256 of the canonical JSON form.
    std::string hash() const;
    /// Sets every seed of the pipeline.
    void set_seed(std::uint64_t seed);
};

/// Applies `key=value` with a dotted key; the value is parsed as JSON when
/// possible and taken as a string otherwise.
void apply_override(json& config, const std::string& assignment);

/// Loads a config file (or defaults when empty) and applies overrides.
PipelineConfig load_pipeline_config(const std::filesystem::path& path, const std::vector<std::string>& overrides,
                                    std::optional<std::uint64_t> seed = std::nullopt);

struct RunResult {
    std::filesystem::path dir;
    json manifest;
};

/// Each command writes into <out>/<command>/ and records a run_manifest.json.
class Pipeline {
   public:
    Pipeline(PipelineConfig config, std::filesystem::path out, std::ostream* log = nullptr);

    RunResult generate();
    RunResult preprocess();
    RunResult train();
    RunResult evaluate();
    RunResult predict();
    RunResult finetune();

    const PipelineConfig& config() const { return config_; }
    const std::filesystem::path& out() const { return out_; }

    std::filesystem::path checkpoint_path(const std::string& configured) const;

    /// Cohort with the preprocessing-stage record filter applied, and its split.
    struct PreparedCohort {
        Cohort cohort;
        CohortSplit split;
        NormalizerState normalizer;
        std::optional<ResolvedRecordFilter> record_filter;
    };
    PreparedCohort load_prepared() const;

   private:
    RunResult finish(const std::string& command, const std::filesystem::path& dir,
                     const std::vector<std::filesystem::path>& artifacts, json details);
    void say(const std::string& line) const;

    PipelineConfig config_;
    std::filesystem::path out_;
    std::ostream* log_;
};

json split_to_json(const CohortSplit& split);
CohortSplit split_from_json(const json& j);

/// Requests found in a predict input: one request, an array, or templates.
std::vector<json> collect_requests(const json& input);

}  // namespace mitst
