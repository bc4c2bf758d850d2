#pragma once

#include <span>
#include <string>
#include <vector>

#include "mitst/data_model.hpp"
#include "mitst/io.hpp"

namespace mitst {

/// Keeps a source's records whose categorical column contains one of the
/// terms (case-insensitive substring) and whose category occurs more than
/// `min_frequency` times in the counted episodes.
struct RecordFilterRule {
    std::string source;
    std::string feature;
    std::vector<std::string> terms;  // empty keeps every category
    std::size_t min_frequency = 0;
};

struct RecordFilter {
    std::vector<RecordFilterRule> rules;

    void validate(const CohortSchema& schema) const;
    json to_json() const;
    static RecordFilter from_json(const json& j);
};

bool term_match(const std::string& value, std::span<const std::string> terms);

/// Category ids kept per rule, with frequencies counted over `indices`.
std::vector<std::vector<bool>> resolve_record_filter(const RecordFilter& filter, const CohortSchema& schema,
                                                     std::span<const Episode> episodes,
                                                     std::span<const std::size_t> indices);

/// Applies resolved rules to every episode in place. Returns the number of records dropped.
std::size_t apply_record_filter(const RecordFilter& filter, const CohortSchema& schema,
                                const std::vector<std::vector<bool>>& kept, std::span<Episode> episodes);

/// A filter together with the category ids it keeps; travels with checkpoints.
struct ResolvedRecordFilter {
    RecordFilter filter;
    std::vector<std::vector<bool>> kept;

    std::size_t apply(const CohortSchema& schema, std::span<Episode> episodes) const;
    json to_json() const;
    static ResolvedRecordFilter from_json(const json& j);
};

}  // namespace mitst
