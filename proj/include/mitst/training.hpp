#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "mitst/data_model.hpp"
#include "mitst/evaluation.hpp"
#include "mitst/model.hpp"
#include "mitst/preprocess.hpp"

namespace mitst {

struct TrainConfig {
    int epochs = 50;
    int batch_size = 16;
    double learning_rate = 0.0005;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    int patience = 5;
    std::uint64_t seed = 1;
    std::vector<std::string> freeze_spec;  // group names, or prefixes ending in '*'

    void validate() const;
    json to_json() const;
    static TrainConfig from_json(const json& j);
};

/// Prepared episodes plus the labeled examples drawn from them. Example
/// episode indices refer to positions in `episodes`.
struct Dataset {
    std::vector<PreparedEpisode> episodes;
    std::vector<std::set<std::string>> tags;
    std::vector<std::string> stay_ids;
    std::vector<std::size_t> source_indices;  // positions in the originating cohort
    std::vector<LabeledExample> examples;

    std::array<std::size_t, kNumClasses> class_counts() const;
    std::vector<int> labels() const;
};

Dataset make_dataset(const Preprocessor& pre, std::span<const Episode> cohort, std::span<const std::size_t> indices,
                     const LabelRule& rule = {});

ModelInput example_input(const Preprocessor& pre, const Dataset& data, std::size_t example);

/// Class-balanced epochs. Each class is walked through successive random
/// permutations so that repeated epochs cover the majority classes before
/// any example is revisited; every epoch draws min-class-count examples per
/// class, without replacement.
class UndersamplingSchedule {
   public:
    UndersamplingSchedule(std::vector<int> labels, int num_classes, std::uint64_t seed);

    std::vector<std::size_t> next_epoch();
    std::size_t per_class() const { return per_class_; }

   private:
    struct Stream {
        std::vector<std::size_t> members;
        std::vector<std::size_t> queue;  // remaining order of the current pass
        std::size_t pos = 0;
        std::uint64_t pass = 0;
    };
    void refill(int cls, const std::set<std::size_t>& exclude);

    int num_classes_;
    std::uint64_t seed_;
    std::size_t per_class_ = 0;
    std::vector<Stream> streams_;
    int epoch_ = 0;
};

std::vector<std::size_t> undersample_epoch(std::span<const int> labels, int num_classes, std::uint64_t seed,
                                           int epoch_index);

/// Cross entropy of softmax(logits) against a one-hot label.
double cross_entropy(std::span<const double> logits, int label);

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    std::optional<double> val_auroc;
    std::optional<double> val_auprc;
    bool improved = false;
    bool stopped = false;

    double score() const;
};

struct TrainResult {
    std::vector<EpochRecord> history;
    int best_epoch = -1;
    double best_score = 0.0;
    std::size_t trainable_scalars = 0;
};

std::string history_csv(const std::vector<EpochRecord>& history);

class TrainingError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// Validation scores for early stopping; defaults to the model on the validation set.
using ValidationFn = std::function<std::pair<std::optional<double>, std::optional<double>>(const Model&, int epoch)>;

struct TrainHooks {
    ValidationFn validate;
    std::function<void(const EpochRecord&)> on_epoch;
};

/// Resolves a freeze spec into parameter-group names; unknown names are refused.
std::set<std::string> resolve_freeze_spec(const Model& model, std::span<const std::string> spec);

/// Groups held fixed when adapting a pretrained model to a new task.
std::vector<std::string> default_finetune_freeze_spec();

TrainResult train(Model& model, const Preprocessor& pre, const Dataset& train_data, const Dataset& val_data,
                  const TrainConfig& config, const TrainHooks& hooks = {});

/// Softmax probabilities for every example of a dataset.
std::vector<ScoredExample> score_dataset(const Model& model, const Preprocessor& pre, const Dataset& data);

/// Resets the prediction head for the new task and trains with `config.freeze_spec`
/// (the default fine-tune spec when empty).
TrainResult fine_tune(Model& model, const Preprocessor& pre, const Dataset& train_data, const Dataset& val_data,
                      TrainConfig config, int num_classes, const TrainHooks& hooks = {});

/// Single optimizer step bookkeeping, exposed for tests.
class Adam {
   public:
    Adam(const ParameterSet& params, double lr, double beta1, double beta2, double eps);
    void step(ParameterSet& params, const std::vector<Matrix>& grads, const std::vector<bool>& trainable);

   private:
    double lr_, beta1_, beta2_, eps_;
    std::vector<Matrix> m_, v_;
    long t_ = 0;
};

/// Summed loss and gradients (averaged over the batch) for a set of examples.
struct BatchGradient {
    double mean_loss = 0.0;
    std::vector<Matrix> grads;
};

BatchGradient batch_gradient(const Model& model, const Preprocessor& pre, const Dataset& data,
                             std::span<const std::size_t> examples, const std::vector<bool>& trainable,
                             std::mt19937_64* dropout_rng);

}  // namespace mitst
