#include "mitst/filter.hpp"

#include <algorithm>
#include <cctype>

namespace mitst {

namespace {

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

}  // namespace

void RecordFilter::validate(const CohortSchema& schema) const {
    for (std::size_t r = 0; r < rules.size(); ++r) {
        const auto& rule = rules[r];
        const std::string at = "rules[" + std::to_string(r) + "]";
        const SourceSchema* src = schema.find(rule.source);
        if (!src) throw InvalidInput(at + ".source: unknown source '" + rule.source + "'");
        if (src->categorical_index(rule.feature) < 0)
            throw InvalidInput(at + ".feature: '" + rule.feature + "' is not a categorical feature of " + rule.source);
    }
}

json RecordFilter::to_json() const {
    json arr = json::array();
    for (const auto& r : rules)
        arr.push_back({{"source", r.source}, {"feature", r.feature}, {"terms", r.terms}, {"min_frequency", r.min_frequency}});
    return json{{"rules", arr}};
}

RecordFilter RecordFilter::from_json(const json& j) {
    RecordFilter f;
    if (!j.is_object() || !j.contains("rules") || !j["rules"].is_array())
        throw InvalidInput("record filter: expected an object with a 'rules' array");
    for (const auto& r : j["rules"]) {
        RecordFilterRule rule;
        rule.source = r.at("source").get<std::string>();
        rule.feature = r.at("feature").get<std::string>();
        rule.terms = r.value("terms", std::vector<std::string>{});
        rule.min_frequency = r.value("min_frequency", std::size_t{0});
        f.rules.push_back(std::move(rule));
    }
    return f;
}

bool term_match(const std::string& value, std::span<const std::string> terms) {
    if (terms.empty()) return true;
    const std::string v = lower(value);
    return std::any_of(terms.begin(), terms.end(), [&](const std::string& t) { return v.find(lower(t)) != std::string::npos; });
}

std::vector<std::vector<bool>> resolve_record_filter(const RecordFilter& filter, const CohortSchema& schema,
                                                     std::span<const Episode> episodes,
                                                     std::span<const std::size_t> indices) {
    filter.validate(schema);
    std::vector<std::vector<bool>> kept;
    for (const auto& rule : filter.rules) {
        const SourceSchema& src = *schema.find(rule.source);
        const int fi = src.categorical_index(rule.feature);
        const auto& vocab = src.categorical_features[static_cast<std::size_t>(fi)].vocabulary;
        std::vector<std::size_t> counts(vocab.size(), 0);
        for (std::size_t i : indices)
            for (const auto& tp : episodes[i].series[static_cast<std::size_t>(src.source_id - 1)].time_points)
                ++counts[static_cast<std::size_t>(tp.categorical_values[static_cast<std::size_t>(fi)])];
        std::vector<bool> keep(vocab.size());
        for (std::size_t c = 0; c < vocab.size(); ++c)
            keep[c] = counts[c] > rule.min_frequency && term_match(vocab[c], rule.terms);
        kept.push_back(std::move(keep));
    }
    return kept;
}

std::size_t apply_record_filter(const RecordFilter& filter, const CohortSchema& schema,
                                const std::vector<std::vector<bool>>& kept, std::span<Episode> episodes) {
    std::size_t dropped = 0;
    for (std::size_t r = 0; r < filter.rules.size(); ++r) {
        const SourceSchema& src = *schema.find(filter.rules[r].source);
        const auto fi = static_cast<std::size_t>(src.categorical_index(filter.rules[r].feature));
        for (auto& e : episodes) {
            auto& series = e.series[static_cast<std::size_t>(src.source_id - 1)];
            auto& pts = series.time_points;
            const auto before = pts.size();
            std::erase_if(pts, [&](const TimePoint& tp) {
                return !kept[r][static_cast<std::size_t>(tp.categorical_values[fi])];
            });
            dropped += before - pts.size();
            if (pts.empty()) series.present = false;
        }
    }
    return dropped;
}

std::size_t ResolvedRecordFilter::apply(const CohortSchema& schema, std::span<Episode> episodes) const {
    return apply_record_filter(filter, schema, kept, episodes);
}

json ResolvedRecordFilter::to_json() const {
    json j = filter.to_json();
    j["kept"] = kept;
    return j;
}

ResolvedRecordFilter ResolvedRecordFilter::from_json(const json& j) {
    ResolvedRecordFilter r{RecordFilter::from_json(j), {}};
    if (!j.contains("kept")) throw InvalidInput("resolved record filter lacks 'kept'");
    r.kept = j["kept"].get<std::vector<std::vector<bool>>>();
    if (r.kept.size() != r.filter.rules.size()) throw InvalidInput("resolved record filter: rule count mismatch");
    return r;
}

}  // namespace mitst
