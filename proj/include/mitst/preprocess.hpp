#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mitst/data_model.hpp"
#include "mitst/io.hpp"

namespace mitst {

struct FeatureStats {
    double mean = 0.0;
    double std = 0.0;  // population convention
    std::size_t count = 0;
    bool flagged = false;  // fewer than two observations or zero variance
    bool has_thresholds = false;
    double low = 0.0;
    double high = 0.0;
};

struct NormalizerState {
    // Keyed by normalizer_key(source, feature, dimension value).
    std::map<std::string, FeatureStats> stats;
    std::string fitted_on;
    double low_quantile = 0.0005;
    double high_quantile = 0.9995;

    const FeatureStats* find(const std::string& key) const;

    json to_json() const;
    static NormalizerState from_json(const json& j);
};

/// Dimension value "*" is used for features without a dimension feature.
std::string normalizer_key(const std::string& source, const std::string& feature, const std::string& dimension);
std::string normalizer_key(const SourceSchema& schema, int numeric_index, const TimePoint& tp);

/// Linear-interpolation sample quantile (type 7).
double quantile(std::vector<double> values, double q);

struct NormalizerOptions {
    double low_quantile = 0.0005;
    double high_quantile = 0.9995;
    std::string fitted_on = "train";
};

/// Fits on every raw record of the given (training) episodes.
NormalizerState fit_normalizer(const CohortSchema& schema, std::span<const Episode> episodes,
                               std::span<const std::size_t> indices, const NormalizerOptions& options = {});

bool is_outlier(const NormalizerState& state, const SourceSchema& schema, const TimePoint& tp);
TimePoint normalize_time_point(const NormalizerState& state, const SourceSchema& schema, const TimePoint& tp);
double denormalize_value(const NormalizerState& state, const std::string& key, double z);

/// Normalizes every series, dropping outlier records of filtered sources.
Episode apply_normalizer(const NormalizerState& state, const CohortSchema& schema, const Episode& episode);

/// Frequency category -> repetition interval in minutes. Categories mapped to
/// a non-positive interval, or not listed at all, are never expanded.
struct FrequencyTable {
    std::map<std::string, double> interval_minutes;

    static FrequencyTable defaults();
    json to_json() const;
    static FrequencyTable from_json(const json& j);
};

SourceSeries expand_medications(const SourceSchema& schema, const SourceSeries& series,
                                const FrequencyTable& frequencies);

inline constexpr std::size_t kDefaultMaxSequenceLength = 512;

SourceSeries truncate_series(const SourceSeries& series, std::size_t max_len = kDefaultMaxSequenceLength);

inline constexpr double kPlaceholderOffset = 0.0;

TimePoint placeholder_time_point(const SourceSchema& schema);
SourceSeries placeholder_missing_source(const SourceSchema& schema, const SourceSeries& series);

/// One view per source onto preprocessed time points, ready for the model.
struct ModelInput {
    std::vector<std::span<const TimePoint>> sources;
};

/// Episode after medication expansion, outlier removal and normalization,
/// kept whole so that examples at different cutoffs share it.
struct PreparedEpisode {
    std::vector<std::vector<TimePoint>> sources;
};

class Preprocessor {
   public:
    Preprocessor(CohortSchema schema, NormalizerState normalizer, FrequencyTable frequencies,
                 std::size_t max_len = kDefaultMaxSequenceLength);

    PreparedEpisode prepare(const Episode& episode) const;

    /// Latest `max_len` points at or before the cutoff per source, or the
    /// source's placeholder when nothing is left. The returned spans point
    /// into `prepared` and into this object.
    ModelInput view(const PreparedEpisode& prepared, double cutoff_offset) const;

    const CohortSchema& schema() const { return schema_; }
    const NormalizerState& normalizer() const { return normalizer_; }
    const FrequencyTable& frequencies() const { return frequencies_; }
    std::size_t max_len() const { return max_len_; }

   private:
    CohortSchema schema_;
    NormalizerState normalizer_;
    FrequencyTable frequencies_;
    std::size_t max_len_;
    std::vector<TimePoint> placeholders_;
};

}  // namespace mitst
