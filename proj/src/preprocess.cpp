#include "mitst/preprocess.hpp"

#include <algorithm>
#include <cmath>

namespace mitst {

const FeatureStats* NormalizerState::find(const std::string& key) const {
    auto it = stats.find(key);
    return it == stats.end() ? nullptr : &it->second;
}

json NormalizerState::to_json() const {
    json entries = json::object();
    for (const auto& [key, s] : stats) {
        json e{{"mean", s.mean}, {"std", s.std}, {"count", s.count}, {"flagged", s.flagged}};
        if (s.has_thresholds) {
            e["low"] = s.low;
            e["high"] = s.high;
        }
        entries[key] = e;
    }
    return {{"fitted_on", fitted_on},
            {"low_quantile", low_quantile},
            {"high_quantile", high_quantile},
            {"stats", entries}};
}

NormalizerState NormalizerState::from_json(const json& j) {
    NormalizerState st;
    try {
        st.fitted_on = j.at("fitted_on").get<std::string>();
        st.low_quantile = j.at("low_quantile").get<double>();
        st.high_quantile = j.at("high_quantile").get<double>();
        for (const auto& [key, e] : j.at("stats").items()) {
            FeatureStats s;
            s.mean = e.at("mean").get<double>();
            s.std = e.at("std").get<double>();
            s.count = e.at("count").get<std::size_t>();
            s.flagged = e.at("flagged").get<bool>();
            if (e.contains("low")) {
                s.has_thresholds = true;
                s.low = e.at("low").get<double>();
                s.high = e.at("high").get<double>();
            }
            if (s.std < 0 || (s.has_thresholds && s.low > s.high))
                throw InvalidInput("normalizer entry '" + key + "' violates std >= 0 / low <= high");
            st.stats.emplace(key, s);
        }
    } catch (const json::exception& e) {
        throw InvalidInput(std::string("malformed normalizer JSON: ") + e.what());
    }
    return st;
}

std::string normalizer_key(const std::string& source, const std::string& feature, const std::string& dimension) {
    return source + "/" + feature + "/" + dimension;
}

std::string normalizer_key(const SourceSchema& schema, int numeric_index, const TimePoint& tp) {
    const auto& f = schema.numeric_features[numeric_index];
    std::string dim = "*";
    if (f.dimension_feature) {
        int c = schema.categorical_index(*f.dimension_feature);
        dim = schema.categorical_features[c].vocabulary[tp.categorical_values[c]];
    }
    return normalizer_key(schema.source_name, f.name, dim);
}

double quantile(std::vector<double> values, double q) {
    if (values.empty()) throw InvalidInput("quantile of an empty sample");
    if (q < 0.0 || q > 1.0) throw InvalidInput("quantile level outside [0, 1]");
    const double h = (static_cast<double>(values.size()) - 1.0) * q;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    std::nth_element(values.begin(), values.begin() + lo, values.end());
    const double x_lo = values[lo];
    if (lo + 1 >= values.size()) return x_lo;
    const double x_hi = *std::min_element(values.begin() + lo + 1, values.end());
    return x_lo + (h - static_cast<double>(lo)) * (x_hi - x_lo);
}

NormalizerState fit_normalizer(const CohortSchema& schema, std::span<const Episode> episodes,
                               std::span<const std::size_t> indices, const NormalizerOptions& options) {
    if (!(options.low_quantile <= options.high_quantile))
        throw InvalidInput("low quantile must not exceed high quantile");
    std::map<std::string, std::vector<double>> samples;
    std::map<std::string, bool> filtered;
    for (auto idx : indices) {
        const auto& e = episodes[idx];
        for (const auto& s : schema.sources) {
            for (const auto& tp : e.series[s.source_id - 1].time_points) {
                for (int j = 0; j < s.num_numeric(); ++j) {
                    if (tp.numeric_missing[j]) continue;
                    auto key = normalizer_key(s, j, tp);
                    samples[key].push_back(tp.numeric_values[j]);
                    filtered[key] = s.outlier_filter;
                }
            }
        }
    }
    NormalizerState st;
    st.fitted_on = options.fitted_on;
    st.low_quantile = options.low_quantile;
    st.high_quantile = options.high_quantile;
    for (auto& [key, xs] : samples) {
        FeatureStats fs;
        fs.count = xs.size();
        double sum = 0.0;
        for (double x : xs) sum += x;
        fs.mean = sum / static_cast<double>(xs.size());
        double ss = 0.0;
        for (double x : xs) ss += (x - fs.mean) * (x - fs.mean);
        fs.std = std::sqrt(ss / static_cast<double>(xs.size()));
        if (xs.size() < 2 || fs.std == 0.0) {
            fs.std = 0.0;
            fs.flagged = true;
        }
        if (filtered[key]) {
            fs.has_thresholds = true;
            fs.low = quantile(xs, options.low_quantile);
            fs.high = quantile(xs, options.high_quantile);
        }
        st.stats.emplace(key, fs);
    }
    return st;
}

bool is_outlier(const NormalizerState& state, const SourceSchema& schema, const TimePoint& tp) {
    if (!schema.outlier_filter) return false;
    for (int j = 0; j < schema.num_numeric(); ++j) {
        if (tp.numeric_missing[j]) continue;
        const auto* fs = state.find(normalizer_key(schema, j, tp));
        if (fs && fs->has_thresholds && (tp.numeric_values[j] < fs->low || tp.numeric_values[j] > fs->high))
            return true;
    }
    return false;
}

TimePoint normalize_time_point(const NormalizerState& state, const SourceSchema& schema, const TimePoint& tp) {
    TimePoint out = tp;
    for (int j = 0; j < schema.num_numeric(); ++j) {
        if (tp.numeric_missing[j]) {
            out.numeric_values[j] = 0.0;
            continue;
        }
        // Keys never seen during fit fall back to the imputed mean.
        const auto* fs = state.find(normalizer_key(schema, j, tp));
        if (!fs || fs->std == 0.0)
            out.numeric_values[j] = 0.0;
        else
            out.numeric_values[j] = (tp.numeric_values[j] - fs->mean) / fs->std;
    }
    return out;
}

double denormalize_value(const NormalizerState& state, const std::string& key, double z) {
    const auto* fs = state.find(key);
    if (!fs) throw InvalidInput("no normalizer statistics for '" + key + "'");
    return fs->mean + z * fs->std;
}

Episode apply_normalizer(const NormalizerState& state, const CohortSchema& schema, const Episode& episode) {
    Episode out = episode;
    for (const auto& s : schema.sources) {
        auto& series = out.series[s.source_id - 1];
        std::vector<TimePoint> kept;
        kept.reserve(series.time_points.size());
        for (const auto& tp : series.time_points)
            if (!is_outlier(state, s, tp)) kept.push_back(normalize_time_point(state, s, tp));
        series.time_points = std::move(kept);
        series.present = !series.time_points.empty();
    }
    return out;
}

FrequencyTable FrequencyTable::defaults() {
    return {{{"once", 0.0},
             {"q1h", 60.0},
             {"q2h", 120.0},
             {"every 120 min", 120.0},
             {"q4h", 240.0},
             {"q6h", 360.0},
             {"q8h", 480.0},
             {"q12h", 720.0},
             {"daily", 1440.0}}};
}

json FrequencyTable::to_json() const { return json(interval_minutes); }

FrequencyTable FrequencyTable::from_json(const json& j) {
    FrequencyTable t;
    try {
        t.interval_minutes = j.get<std::map<std::string, double>>();
    } catch (const json::exception& e) {
        throw InvalidInput(std::string("malformed frequency table: ") + e.what());
    }
    return t;
}

SourceSeries expand_medications(const SourceSchema& schema, const SourceSeries& series,
                                const FrequencyTable& frequencies) {
    if (!schema.expansion) return series;
    const int freq_idx = schema.categorical_index(schema.expansion->frequency_feature);
    const auto& vocab = schema.categorical_features[freq_idx].vocabulary;

    SourceSeries out{series.source_id, {}, series.present};
    for (const auto& tp : series.time_points) {
        const auto it = frequencies.interval_minutes.find(vocab[tp.categorical_values[freq_idx]]);
        const double interval = it == frequencies.interval_minutes.end() ? 0.0 : it->second;
        if (interval <= 0.0 || !tp.stop_offset || *tp.stop_offset < tp.offset_minutes) {
            out.time_points.push_back(tp);
            continue;
        }
        const double start = tp.offset_minutes;
        for (long k = 0;; ++k) {
            const double at = start + static_cast<double>(k) * interval;
            if (at > *tp.stop_offset) break;
            TimePoint copy = tp;
            copy.offset_minutes = at;
            out.time_points.push_back(std::move(copy));
        }
    }
    std::stable_sort(out.time_points.begin(), out.time_points.end(),
                     [](const auto& a, const auto& b) { return a.offset_minutes < b.offset_minutes; });
    return out;
}

SourceSeries truncate_series(const SourceSeries& series, std::size_t max_len) {
    if (series.time_points.size() <= max_len) return series;
    SourceSeries out{series.source_id, {}, series.present};
    out.time_points.assign(series.time_points.end() - static_cast<std::ptrdiff_t>(max_len), series.time_points.end());
    return out;
}

TimePoint placeholder_time_point(const SourceSchema& schema) {
    TimePoint tp;
    tp.offset_minutes = kPlaceholderOffset;
    tp.numeric_values.assign(schema.num_numeric(), 0.0);
    tp.numeric_missing.assign(schema.num_numeric(), 1);
    for (const auto& f : schema.categorical_features) tp.categorical_values.push_back(f.absent_id());
    return tp;
}

SourceSeries placeholder_missing_source(const SourceSchema& schema, const SourceSeries& series) {
    if (series.present) return series;
    return {series.source_id, {placeholder_time_point(schema)}, false};
}

Preprocessor::Preprocessor(CohortSchema schema, NormalizerState normalizer, FrequencyTable frequencies,
                           std::size_t max_len)
    : schema_(std::move(schema)),
      normalizer_(std::move(normalizer)),
      frequencies_(std::move(frequencies)),
      max_len_(max_len) {
    if (max_len_ == 0) throw InvalidInput("max sequence length must be positive");
    schema_.validate();
    for (const auto& s : schema_.sources) placeholders_.push_back(placeholder_time_point(s));
}

PreparedEpisode Preprocessor::prepare(const Episode& episode) const {
    if (static_cast<int>(episode.series.size()) != schema_.num_sources())
        throw InvalidInput("episode '" + episode.stay_id + "' does not match the schema's source count");
    PreparedEpisode out;
    out.sources.resize(schema_.sources.size());
    for (const auto& s : schema_.sources) {
        const auto expanded = expand_medications(s, episode.series[s.source_id - 1], frequencies_);
        auto& dst = out.sources[s.source_id - 1];
        dst.reserve(expanded.time_points.size());
        for (const auto& tp : expanded.time_points)
            if (!is_outlier(normalizer_, s, tp)) dst.push_back(normalize_time_point(normalizer_, s, tp));
    }
    return out;
}

ModelInput Preprocessor::view(const PreparedEpisode& prepared, double cutoff_offset) const {
    ModelInput input;
    input.sources.reserve(prepared.sources.size());
    for (std::size_t m = 0; m < prepared.sources.size(); ++m) {
        const auto& pts = prepared.sources[m];
        auto end = std::upper_bound(pts.begin(), pts.end(), cutoff_offset,
                                    [](double c, const TimePoint& tp) { return c < tp.offset_minutes; });
        const auto count = static_cast<std::size_t>(end - pts.begin());
        if (count == 0) {
            input.sources.emplace_back(&placeholders_[m], 1);
            continue;
        }
        const std::size_t take = std::min(count, max_len_);
        input.sources.emplace_back(&*(end - static_cast<std::ptrdiff_t>(take)), take);
    }
    return input;
}

}  // namespace mitst
