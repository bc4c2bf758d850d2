#include "mitst/data_model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <unordered_set>

#include "mitst/random.hpp"

namespace mitst {

const char* class_name(GlucoseClass c) {
    switch (c) {
        case GlucoseClass::hypo:
            return "hypo";
        case GlucoseClass::euglycemia:
            return "euglycemia";
        case GlucoseClass::hyper:
            return "hyper";
    }
    throw Defect("unreachable glucose class");
}

GlucoseClass class_from_name(const std::string& name) {
    if (name == "hypo") return GlucoseClass::hypo;
    if (name == "euglycemia") return GlucoseClass::euglycemia;
    if (name == "hyper") return GlucoseClass::hyper;
    throw InvalidInput("unknown class name '" + name + "'");
}

int CategoricalFeature::index_of(const std::string& category) const {
    auto it = std::find(vocabulary.begin(), vocabulary.end(), category);
    return it == vocabulary.end() ? -1 : static_cast<int>(it - vocabulary.begin());
}

int CategoricalFeature::unknown_id() const {
    int id = index_of(kUnknownCategory);
    if (id < 0) throw Defect("vocabulary of '" + name + "' lacks the unknown category");
    return id;
}

int CategoricalFeature::absent_id() const {
    int id = index_of(kAbsentSourceCategory);
    if (id < 0) throw Defect("vocabulary of '" + name + "' lacks the absent-source category");
    return id;
}

int SourceSchema::numeric_index(const std::string& name) const {
    for (int i = 0; i < num_numeric(); ++i)
        if (numeric_features[i].name == name) return i;
    return -1;
}

int SourceSchema::categorical_index(const std::string& name) const {
    for (int i = 0; i < num_categorical(); ++i)
        if (categorical_features[i].name == name) return i;
    return -1;
}

void SourceSchema::validate() const {
    const std::string where = "source '" + source_name + "'";
    if (source_name.empty()) throw InvalidInput("source " + std::to_string(source_id) + " has no name");
    if (num_features() == 0) throw InvalidInput(where + " declares no features");
    if (embed_width_hint <= 0 || embed_width_hint % 2 != 0)
        throw InvalidInput(where + ": embed_width_hint must be a positive even number");
    std::unordered_set<std::string> names;
    for (const auto& f : numeric_features)
        if (!names.insert(f.name).second) throw InvalidInput(where + ": duplicate feature '" + f.name + "'");
    for (const auto& f : categorical_features) {
        if (!names.insert(f.name).second) throw InvalidInput(where + ": duplicate feature '" + f.name + "'");
        std::unordered_set<std::string> cats;
        for (const auto& c : f.vocabulary)
            if (!cats.insert(c).second)
                throw InvalidInput(where + ": category '" + c + "' repeated in '" + f.name + "'");
        if (!cats.count(kUnknownCategory) || !cats.count(kAbsentSourceCategory))
            throw InvalidInput(where + ": vocabulary of '" + f.name +
                               "' must contain 'unknown' and 'absent-source'");
    }
    for (const auto& f : numeric_features) {
        if (f.dimension_feature && categorical_index(*f.dimension_feature) < 0)
            throw InvalidInput(where + ": dimension feature '" + *f.dimension_feature + "' is not categorical");
    }
    if (expansion) {
        if (categorical_index(expansion->frequency_feature) < 0)
            throw InvalidInput(where + ": frequency feature '" + expansion->frequency_feature + "' not found");
        if (expansion->stop_column.empty()) throw InvalidInput(where + ": empty stop column name");
        if (names.count(expansion->stop_column))
            throw InvalidInput(where + ": stop column collides with a feature name");
    }
}

const SourceSchema& CohortSchema::source(int source_id) const {
    if (source_id < 1 || source_id > num_sources())
        throw InvalidInput("source id " + std::to_string(source_id) + " out of range");
    return sources[source_id - 1];
}

const SourceSchema* CohortSchema::find(const std::string& name) const {
    for (const auto& s : sources)
        if (s.source_name == name) return &s;
    return nullptr;
}

void CohortSchema::validate() const {
    if (sources.empty()) throw InvalidInput("schema declares no sources");
    std::unordered_set<std::string> names;
    for (int i = 0; i < num_sources(); ++i) {
        const auto& s = sources[i];
        if (s.source_id != i + 1)
            throw InvalidInput("source ids must be contiguous 1..M; '" + s.source_name + "' has id " +
                               std::to_string(s.source_id));
        if (!names.insert(s.source_name).second)
            throw InvalidInput("duplicate source name '" + s.source_name + "'");
        s.validate();
    }
}

std::array<double, kNumClasses> LabeledExample::one_hot() const {
    std::array<double, kNumClasses> y{};
    y[static_cast<int>(label)] = 1.0;
    return y;
}

GlucoseClass classify_target(double value, const LabelRule& rule) {
    if (!std::isfinite(value) || value <= 0.0)
        throw InvalidInput("target value must be finite and positive, got " + std::to_string(value));
    if (value < rule.hypo_below) return GlucoseClass::hypo;
    if (value > rule.hyper_above) return GlucoseClass::hyper;
    return GlucoseClass::euglycemia;
}

void validate_time_point(const SourceSchema& schema, const TimePoint& tp) {
    const std::string where = "source '" + schema.source_name + "'";
    if (!std::isfinite(tp.offset_minutes) || tp.offset_minutes < 0.0)
        throw InvalidInput(where + ": offset_minutes must be finite and >= 0");
    if (static_cast<int>(tp.numeric_values.size()) != schema.num_numeric() ||
        tp.numeric_missing.size() != tp.numeric_values.size())
        throw InvalidInput(where + ": numeric arity mismatch");
    if (static_cast<int>(tp.categorical_values.size()) != schema.num_categorical())
        throw InvalidInput(where + ": categorical arity mismatch");
    for (int j = 0; j < schema.num_categorical(); ++j) {
        int id = tp.categorical_values[j];
        if (id < 0 || id >= static_cast<int>(schema.categorical_features[j].vocabulary.size()))
            throw InvalidInput(where + ": category id out of vocabulary for '" +
                               schema.categorical_features[j].name + "'");
    }
    for (int j = 0; j < schema.num_numeric(); ++j)
        if (!tp.numeric_missing[j] && !std::isfinite(tp.numeric_values[j]))
            throw InvalidInput(where + ": non-finite value for '" + schema.numeric_features[j].name + "'");
}

void validate_series(const SourceSchema& schema, const SourceSeries& series) {
    if (series.source_id != schema.source_id)
        throw InvalidInput("series source id does not match schema '" + schema.source_name + "'");
    if (!series.present && !series.time_points.empty())
        throw InvalidInput("absent source '" + schema.source_name + "' carries time points");
    for (std::size_t i = 0; i < series.time_points.size(); ++i) {
        validate_time_point(schema, series.time_points[i]);
        if (i > 0 && series.time_points[i].offset_minutes < series.time_points[i - 1].offset_minutes)
            throw InvalidInput("offsets of source '" + schema.source_name + "' are not nondecreasing");
    }
}

void validate_episode(const CohortSchema& schema, const Episode& episode) {
    if (static_cast<int>(episode.series.size()) != schema.num_sources())
        throw InvalidInput("episode '" + episode.stay_id + "' must carry exactly one series per source");
    for (int m = 0; m < schema.num_sources(); ++m) validate_series(schema.sources[m], episode.series[m]);
    for (std::size_t i = 0; i < episode.target_track.size(); ++i) {
        const auto& r = episode.target_track[i];
        if (!std::isfinite(r.value) || r.value <= 0.0)
            throw InvalidInput("episode '" + episode.stay_id + "': non-positive target value");
        if (i > 0 && r.offset_minutes <= episode.target_track[i - 1].offset_minutes)
            throw InvalidInput("episode '" + episode.stay_id + "': target track not strictly increasing");
    }
}

std::vector<TargetReading> dedupe_target_track(std::vector<TargetReading> readings) {
    std::stable_sort(readings.begin(), readings.end(),
                     [](const auto& a, const auto& b) { return a.offset_minutes < b.offset_minutes; });
    std::vector<TargetReading> out;
    out.reserve(readings.size());
    for (const auto& r : readings) {
        if (!out.empty() && out.back().offset_minutes == r.offset_minutes)
            out.back() = r;
        else
            out.push_back(r);
    }
    return out;
}

std::vector<LabeledExample> build_examples(const Episode& episode, std::size_t episode_index,
                                           const LabelRule& rule) {
    std::vector<LabeledExample> examples;
    const auto& track = episode.target_track;
    // The current reading counts toward the required history.
    const auto first = static_cast<std::size_t>(std::max(rule.min_prior_measurements, 1) - 1);
    for (std::size_t i = first; i + 1 < track.size(); ++i) {
        double horizon = track[i + 1].offset_minutes - track[i].offset_minutes;
        if (horizon < rule.min_horizon_minutes || horizon > rule.max_horizon_minutes) continue;
        LabeledExample ex;
        ex.episode_index = episode_index;
        ex.cutoff_offset = track[i].offset_minutes;
        ex.horizon_minutes = horizon;
        ex.next_target_value = track[i + 1].value;
        ex.current_target_value = track[i].value;
        ex.label = classify_target(ex.next_target_value, rule);
        examples.push_back(ex);
    }
    return examples;
}

Episode input_view(const Episode& episode, double cutoff_offset) {
    Episode view;
    view.stay_id = episode.stay_id;
    view.patient_id = episode.patient_id;
    view.subgroup_tags = episode.subgroup_tags;
    view.series.reserve(episode.series.size());
    for (const auto& s : episode.series) {
        SourceSeries v{s.source_id, {}, false};
        for (const auto& tp : s.time_points)
            if (tp.offset_minutes <= cutoff_offset) v.time_points.push_back(tp);
        v.present = !v.time_points.empty();
        view.series.push_back(std::move(v));
    }
    for (const auto& r : episode.target_track)
        if (r.offset_minutes <= cutoff_offset) view.target_track.push_back(r);
    return view;
}

CohortSplit split_by_patient(std::span<const Episode> cohort, const SplitFractions& fractions,
                             std::uint64_t seed) {
    if (cohort.empty()) throw InvalidInput("cannot split an empty cohort");
    if (fractions.train < 0 || fractions.validation < 0 || fractions.test < 0 ||
        std::abs(fractions.train + fractions.validation + fractions.test - 1.0) > 1e-9)
        throw InvalidInput("split fractions must be non-negative and sum to 1");

    std::vector<std::string> patients;
    for (const auto& e : cohort) patients.push_back(e.patient_id);
    std::sort(patients.begin(), patients.end());
    patients.erase(std::unique(patients.begin(), patients.end()), patients.end());

    std::mt19937_64 rng(derive_seed(seed, {hash_string("split_by_patient")}));
    std::shuffle(patients.begin(), patients.end(), rng);

    const auto n = static_cast<double>(patients.size());
    const auto n_train = static_cast<std::size_t>(std::llround(fractions.train * n));
    const auto n_val =
        std::min(patients.size() - n_train, static_cast<std::size_t>(std::llround(fractions.validation * n)));

    std::map<std::string, int> assignment;
    for (std::size_t i = 0; i < patients.size(); ++i)
        assignment[patients[i]] = i < n_train ? 0 : (i < n_train + n_val ? 1 : 2);

    CohortSplit split;
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        switch (assignment.at(cohort[i].patient_id)) {
            case 0:
                split.train.push_back(i);
                break;
            case 1:
                split.validation.push_back(i);
                break;
            default:
                split.test.push_back(i);
        }
    }
    return split;
}

}  // namespace mitst
