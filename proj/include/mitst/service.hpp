#pragma once

#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mitst/evaluation.hpp"
#include "mitst/filter.hpp"
#include "mitst/io.hpp"
#include "mitst/model.hpp"
#include "mitst/preprocess.hpp"

namespace mitst {

struct FieldError {
    std::string field;
    std::string message;
};

/// A prediction request that does not match the served schema.
class RequestError : public std::invalid_argument {
   public:
    explicit RequestError(std::vector<FieldError> errors);
    const std::vector<FieldError>& errors() const { return errors_; }
    json to_json() const;

   private:
    std::vector<FieldError> errors_;
};

struct ParsedRequest {
    Episode episode;
    double cutoff_offset = 0.0;
};

/// Request layout:
///   {"cutoff_offset": <minutes, optional>,
///    "sources": {"<source>": [{"offset_minutes": t, "values": {...}, "stop_offset": s}, ...]}}
/// Omitted sources are absent; omitted or null values are missing; unseen
/// categories map to "unknown".
ParsedRequest parse_request(const CohortSchema& schema, const json& request);

/// Raw (un-normalized) request reproducing an episode's inputs up to a cutoff.
json request_from_episode(const CohortSchema& schema, const Episode& episode, double cutoff_offset);

/// A loaded checkpoint with the exact preprocessing it was trained with.
class Predictor {
   public:
    static std::shared_ptr<const Predictor> load(const std::filesystem::path& checkpoint);
    Predictor(Model model, NormalizerState normalizer, FrequencyTable frequencies, LabelRule rule,
              std::string model_hash, std::string config_hash,
              std::optional<ResolvedRecordFilter> record_filter = std::nullopt);

    const Model& model() const { return model_; }
    const Preprocessor& preprocessor() const { return pre_; }
    const LabelRule& label_rule() const { return rule_; }
    const std::optional<ResolvedRecordFilter>& record_filter() const { return filter_; }
    const std::string& model_hash() const { return model_hash_; }
    const std::string& config_hash() const { return config_hash_; }

    /// Class probabilities and fusion weights for an already-prepared input.
    json respond(const ActivationBundle& activations, double cutoff_offset) const;

    /// Shared by the command-line tool and the HTTP service.
    json predict(const json& request) const;

    json bounds() const;

   private:
    Model model_;
    Preprocessor pre_;
    LabelRule rule_;
    std::string model_hash_;
    std::string config_hash_;
    std::optional<ResolvedRecordFilter> filter_;
};

/// Checkpoint side data: everything besides the weights needed to reproduce inference.
json checkpoint_extra(const NormalizerState& normalizer, const FrequencyTable& frequencies, const LabelRule& rule,
                      const std::optional<ResolvedRecordFilter>& record_filter = std::nullopt);

json request_json_schema(const CohortSchema& schema);
json response_json_schema();

inline const std::vector<std::string>& template_names() {
    static const std::vector<std::string> names = {"hypo_true_positive",  "hypo_false_positive",
                                                   "hypo_false_negative", "hyper_true_positive",
                                                   "hyper_false_positive", "hyper_false_negative"};
    return names;
}

/// Confusion cell an example falls in for a target class, under argmax prediction.
std::optional<std::string> confusion_cell(int target_class, int truth, int predicted);

struct TemplateCandidate {
    const Episode* episode = nullptr;
    double cutoff_offset = 0.0;
    ScoredExample scored;
};

/// One template per name: the candidate in that confusion cell with the
/// highest score for the target class. Cells without candidates are skipped.
json build_templates(const Predictor& predictor, std::span<const TemplateCandidate> candidates);

/// HTTP front end. The predictor can be swapped while requests are served.
class InferenceServer {
   public:
    InferenceServer();
    ~InferenceServer();
    InferenceServer(const InferenceServer&) = delete;
    InferenceServer& operator=(const InferenceServer&) = delete;

    void load(const std::filesystem::path& checkpoint);
    void set_predictor(std::shared_ptr<const Predictor> predictor);
    void set_templates(json templates);
    std::shared_ptr<const Predictor> predictor() const;

    /// Binds and serves on a background thread; returns the bound port.
    int start(const std::string& host, int port);
    /// Serves on the calling thread until stop().
    bool listen(const std::string& host, int port);
    void stop();

   private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace mitst
