#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mitst {

/// Thrown when caller-supplied data violates a documented precondition.
class InvalidInput : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

/// Thrown when an internal invariant is broken (a bug, not bad input).
class Defect : public std::logic_error {
   public:
    using std::logic_error::logic_error;
};

inline constexpr const char* kUnknownCategory = "unknown";
inline constexpr const char* kAbsentSourceCategory = "absent-source";

inline constexpr int kNumClasses = 3;
enum class GlucoseClass : int { hypo = 0, euglycemia = 1, hyper = 2 };

const char* class_name(GlucoseClass c);
GlucoseClass class_from_name(const std::string& name);

struct NumericFeature {
    std::string name;
    // When set, standardization and outlier thresholds are keyed by the value
    // of this categorical feature (e.g. one set of statistics per lab name).
    std::optional<std::string> dimension_feature;
};

struct CategoricalFeature {
    std::string name;
    std::vector<std::string> vocabulary;

    int index_of(const std::string& category) const;  // -1 when absent
    int unknown_id() const;
    int absent_id() const;
};

/// Medication-style sources carry a frequency category and a stop offset per
/// record; the record is repeated at that frequency until the stop offset.
struct ExpansionSpec {
    std::string frequency_feature;
    std::string stop_column;
};

struct SourceSchema {
    int source_id = 0;  // 1..M
    std::string source_name;
    std::vector<NumericFeature> numeric_features;
    std::vector<CategoricalFeature> categorical_features;
    int embed_width_hint = 16;
    bool outlier_filter = false;
    std::optional<ExpansionSpec> expansion;

    int num_numeric() const { return static_cast<int>(numeric_features.size()); }
    int num_categorical() const { return static_cast<int>(categorical_features.size()); }
    int num_features() const { return num_numeric() + num_categorical(); }

    int numeric_index(const std::string& name) const;
    int categorical_index(const std::string& name) const;

    void validate() const;
};

struct CohortSchema {
    std::vector<SourceSchema> sources;

    int num_sources() const { return static_cast<int>(sources.size()); }
    const SourceSchema& source(int source_id) const;
    const SourceSchema* find(const std::string& name) const;

    void validate() const;
};

struct TimePoint {
    double offset_minutes = 0.0;
    std::vector<double> numeric_values;
    std::vector<std::uint8_t> numeric_missing;  // 1 = missing
    std::vector<int> categorical_values;        // vocabulary indices
    // Auxiliary stop offset for expandable records; not a model input.
    std::optional<double> stop_offset;

    bool operator==(const TimePoint&) const = default;
};

struct SourceSeries {
    int source_id = 0;
    std::vector<TimePoint> time_points;
    bool present = false;

    bool operator==(const SourceSeries&) const = default;
};

struct TargetReading {
    double offset_minutes = 0.0;
    double value = 0.0;

    bool operator==(const TargetReading&) const = default;
};

struct Episode {
    std::string stay_id;
    std::string patient_id;
    std::set<std::string> subgroup_tags;
    std::vector<SourceSeries> series;  // index = source_id - 1
    std::vector<TargetReading> target_track;

    bool operator==(const Episode&) const = default;
};

/// Thresholds of the 3-class labeling rule (strict inequalities).
struct LabelRule {
    double hypo_below = 70.0;
    double hyper_above = 180.0;
    int min_prior_measurements = 5;
    double min_horizon_minutes = 5.0;
    double max_horizon_minutes = 600.0;
};

struct LabeledExample {
    std::size_t episode_index = 0;
    double cutoff_offset = 0.0;
    GlucoseClass label = GlucoseClass::euglycemia;
    double horizon_minutes = 0.0;
    double next_target_value = 0.0;
    double current_target_value = 0.0;

    std::array<double, kNumClasses> one_hot() const;
};

GlucoseClass classify_target(double value, const LabelRule& rule = {});

void validate_time_point(const SourceSchema& schema, const TimePoint& tp);
void validate_series(const SourceSchema& schema, const SourceSeries& series);
void validate_episode(const CohortSchema& schema, const Episode& episode);

/// Sorts by offset and keeps the last-written reading among equal offsets.
std::vector<TargetReading> dedupe_target_track(std::vector<TargetReading> readings);

std::vector<LabeledExample> build_examples(const Episode& episode, std::size_t episode_index = 0,
                                           const LabelRule& rule = {});

/// Restriction of an episode to time points at or before `cutoff_offset`.
Episode input_view(const Episode& episode, double cutoff_offset);

struct SplitFractions {
    double train = 0.7;
    double validation = 0.1;
    double test = 0.2;
};

struct CohortSplit {
    std::vector<std::size_t> train;  // episode indices
    std::vector<std::size_t> validation;
    std::vector<std::size_t> test;
};

CohortSplit split_by_patient(std::span<const Episode> cohort, const SplitFractions& fractions,
                             std::uint64_t seed);

}  // namespace mitst
