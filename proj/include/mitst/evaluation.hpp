#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "mitst/data_model.hpp"
#include "mitst/io.hpp"

namespace mitst {

struct ScoredExample {
    std::vector<double> scores;  // softmax probabilities, one per class
    int truth = 0;
    double horizon_minutes = 0.0;
    double next_target_value = 0.0;
    double current_target_value = 0.0;
    std::set<std::string> subgroup_tags;
};

struct BinaryMetrics {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    std::optional<double> ppv, npv, sensitivity, specificity;
};

BinaryMetrics binary_metrics_from_counts(std::size_t tp, std::size_t fp, std::size_t tn, std::size_t fn);
/// One-vs-rest: `predicted` and `truths` are class indices.
BinaryMetrics binary_metrics(std::span<const int> predicted, std::span<const int> truths, int positive_class);

/// Mann-Whitney AUROC with half credit for ties. `truths` are 0/1.
std::optional<double> auroc(std::span<const double> scores, std::span<const int> truths);
/// Step-wise (non-interpolated) area under the precision-recall curve.
std::optional<double> auprc(std::span<const double> scores, std::span<const int> truths);

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Positive call when score >= threshold.
struct Cutpoint {
    double threshold = kInf;
    double sensitivity = 0.0;
    double specificity = 0.0;
};

Cutpoint select_cutpoint(std::span<const double> scores, std::span<const int> truths);

GlucoseClass locf_predict(const LabeledExample& example, const LabelRule& rule = {});
GlucoseClass locf_predict(double current_target_value, const LabelRule& rule = {});

/// Mean recall over classes present in `truths`.
std::optional<double> balanced_accuracy(std::span<const int> predicted, std::span<const int> truths, int num_classes);
int argmax(std::span<const double> scores);

struct ConfidenceInterval {
    double low = 0.0;
    double high = 0.0;
    std::size_t redrawn = 0;  // resamples on which the metric was undefined
};

using ExampleMetric = std::function<std::optional<double>(std::span<const ScoredExample>)>;

ConfidenceInterval bootstrap_ci(const ExampleMetric& metric, std::span<const ScoredExample> examples, int resamples,
                                std::uint64_t seed);

/// Several metrics over one resample of example indices; nullopt when any is undefined.
using IndexMetrics = std::function<std::optional<std::vector<double>>(std::span<const std::size_t>)>;

/// Percentile intervals for every metric from a shared set of resamples.
std::vector<ConfidenceInterval> bootstrap_ci_multi(const IndexMetrics& metrics, std::size_t n, int resamples,
                                                   std::uint64_t seed);

using ScoreMetric = std::function<std::optional<double>(std::span<const double>, std::span<const int>)>;

/// Two-sided p-value of metric(A) - metric(B) under per-example swapping.
double permutation_test(const ScoreMetric& metric, std::span<const double> scores_a, std::span<const double> scores_b,
                        std::span<const int> truths, int permutations, std::uint64_t seed);

struct CurvePoint {
    double fraction = 0.0;
    std::optional<double> value;  // +inf marks an unbounded relative risk
};

/// Number of examples flagged at-risk for a fraction of n.
std::size_t flagged_count(double fraction, std::size_t n);

std::vector<CurvePoint> fp_severity_curve(std::span<const ScoredExample> examples, int cls,
                                          std::span<const double> fractions);
std::vector<CurvePoint> relative_risk_curve(std::span<const ScoredExample> examples, int cls,
                                            std::span<const double> fractions);

inline constexpr int kTimeBuckets = 10;
inline constexpr double kBucketMinutes = 60.0;

/// Left-closed hourly bins; the final bin also holds horizon 600.
int time_bucket(double horizon_minutes);

struct BucketMetrics {
    int bucket = 0;
    std::size_t count = 0;
    std::vector<std::optional<double>> auroc;  // per class
    std::vector<std::optional<double>> auprc;
};

std::vector<BucketMetrics> time_bucket_report(std::span<const ScoredExample> examples, int num_classes);

struct ClassMetrics {
    std::optional<double> auroc, auprc;
    Cutpoint cutpoint;
    BinaryMetrics at_cutpoint;
    double prevalence = 0.0;
    std::optional<ConfidenceInterval> auroc_ci, auprc_ci;
};

struct ReportOptions {
    int bootstrap_resamples = 0;  // 0 disables confidence intervals
    std::uint64_t seed = 0;
    // Thresholds chosen elsewhere (e.g. on validation); selected in-sample when empty.
    std::vector<double> cutpoints;
};

struct MetricsReport {
    std::size_t n = 0;
    int num_classes = kNumClasses;
    std::vector<ClassMetrics> per_class;
    std::optional<double> macro_auroc, macro_auprc, macro_ppv, macro_npv, macro_sensitivity, macro_specificity;
    std::optional<ConfidenceInterval> macro_auroc_ci, macro_auprc_ci;
    std::optional<double> balanced_accuracy;  // argmax predictions

    json to_json() const;
    std::string to_csv() const;
};

std::vector<int> class_truths(std::span<const ScoredExample> examples, int cls);
std::vector<double> class_scores(std::span<const ScoredExample> examples, int cls);

std::optional<double> macro_auroc(std::span<const ScoredExample> examples, int num_classes);
std::optional<double> macro_auprc(std::span<const ScoredExample> examples, int num_classes);

MetricsReport compute_report(std::span<const ScoredExample> examples, int num_classes, const ReportOptions& options = {});

/// Examples carrying `tag`; prevalences are recomputed within the subset.
std::vector<ScoredExample> filter_by_tag(std::span<const ScoredExample> examples, const std::string& tag);
MetricsReport subgroup_report(std::span<const ScoredExample> examples, const std::string& tag, int num_classes,
                              const ReportOptions& options = {});

/// LOCF as a scored model: one-hot scores on the carried-forward class.
std::vector<ScoredExample> locf_scored(std::span<const ScoredExample> examples, const LabelRule& rule = {});

std::string optional_to_string(const std::optional<double>& v);
json optional_to_json(const std::optional<double>& v);

}  // namespace mitst
