#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mitst/data_model.hpp"

namespace mitst {

using json = nlohmann::json;

struct Cohort {
    CohortSchema schema;
    std::vector<Episode> episodes;
};

json schema_to_json(const CohortSchema& schema);
CohortSchema schema_from_json(const json& j);

json label_rule_to_json(const LabelRule& rule);
LabelRule label_rule_from_json(const json& j);

/// Writes schema.json, stays.csv, source_<name>.csv and target.csv.
void write_cohort(const std::filesystem::path& dir, const Cohort& cohort);
Cohort read_cohort(const std::filesystem::path& dir);

// CSV helpers shared with the report writers.
std::vector<std::string> split_csv_line(const std::string& line);
std::string format_double(double v);

json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const json& j);
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace mitst
