#include "mitst/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace mitst {

namespace fs = std::filesystem;

json schema_to_json(const CohortSchema& schema) {
    json sources = json::array();
    for (const auto& s : schema.sources) {
        json numeric = json::array();
        for (const auto& f : s.numeric_features) {
            json nf{{"name", f.name}};
            if (f.dimension_feature) nf["dimension_feature"] = *f.dimension_feature;
            numeric.push_back(nf);
        }
        json categorical = json::array();
        for (const auto& f : s.categorical_features)
            categorical.push_back({{"name", f.name}, {"vocabulary", f.vocabulary}});
        json js{{"source_id", s.source_id},
                {"source_name", s.source_name},
                {"numeric_features", numeric},
                {"categorical_features", categorical},
                {"embed_width_hint", s.embed_width_hint},
                {"outlier_filter", s.outlier_filter}};
        if (s.expansion)
            js["expansion"] = {{"frequency_feature", s.expansion->frequency_feature},
                               {"stop_column", s.expansion->stop_column}};
        sources.push_back(js);
    }
    return {{"sources", sources}};
}

CohortSchema schema_from_json(const json& j) {
    CohortSchema schema;
    try {
        for (const auto& js : j.at("sources")) {
            SourceSchema s;
            s.source_id = js.at("source_id").get<int>();
            s.source_name = js.at("source_name").get<std::string>();
            for (const auto& nf : js.value("numeric_features", json::array())) {
                NumericFeature f{nf.at("name").get<std::string>(), std::nullopt};
                if (nf.contains("dimension_feature")) f.dimension_feature = nf["dimension_feature"].get<std::string>();
                s.numeric_features.push_back(f);
            }
            for (const auto& cf : js.value("categorical_features", json::array()))
                s.categorical_features.push_back(
                    {cf.at("name").get<std::string>(), cf.at("vocabulary").get<std::vector<std::string>>()});
            s.embed_width_hint = js.value("embed_width_hint", 16);
            s.outlier_filter = js.value("outlier_filter", false);
            if (js.contains("expansion"))
                s.expansion = ExpansionSpec{js["expansion"].at("frequency_feature").get<std::string>(),
                                            js["expansion"].at("stop_column").get<std::string>()};
            schema.sources.push_back(std::move(s));
        }
    } catch (const json::exception& e) {
        throw InvalidInput(std::string("malformed schema JSON: ") + e.what());
    }
    schema.validate();
    return schema;
}

json label_rule_to_json(const LabelRule& rule) {
    return {{"hypo_below", rule.hypo_below},
            {"hyper_above", rule.hyper_above},
            {"min_prior_measurements", rule.min_prior_measurements},
            {"min_horizon_minutes", rule.min_horizon_minutes},
            {"max_horizon_minutes", rule.max_horizon_minutes}};
}

LabelRule label_rule_from_json(const json& j) {
    LabelRule r;
    r.hypo_below = j.value("hypo_below", r.hypo_below);
    r.hyper_above = j.value("hyper_above", r.hyper_above);
    r.min_prior_measurements = j.value("min_prior_measurements", r.min_prior_measurements);
    r.min_horizon_minutes = j.value("min_horizon_minutes", r.min_horizon_minutes);
    r.max_horizon_minutes = j.value("max_horizon_minutes", r.max_horizon_minutes);
    if (!(r.hypo_below < r.hyper_above)) throw InvalidInput("label rule: hypo_below must be < hyper_above");
    return r;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(std::move(cur));
    return out;
}

std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc()) throw Defect("failed to format double");
    return std::string(buf, ptr);
}

namespace {

double parse_double(const std::string& s, const std::string& context) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v))
        throw InvalidInput(context + ": cannot parse number '" + s + "'");
    return v;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) q += (c == '"') ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
}

std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    return out;
}

std::ifstream open_in(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidInput("missing file '" + path.string() + "'");
    return in;
}

std::string join_tags(const std::set<std::string>& tags) {
    std::string s;
    for (const auto& t : tags) {
        if (!s.empty()) s += ';';
        s += t;
    }
    return s;
}

std::string source_file_name(const SourceSchema& s) { return "source_" + s.source_name + ".csv"; }

}  // namespace

void write_cohort(const fs::path& dir, const Cohort& cohort) {
    fs::create_directories(dir);
    write_json_file(dir / "schema.json", schema_to_json(cohort.schema));
    {
        auto out = open_out(dir / "stays.csv");
        out << "stay_id,patient_id,subgroup_tags\n";
        for (const auto& e : cohort.episodes)
            out << csv_field(e.stay_id) << ',' << csv_field(e.patient_id) << ',' << csv_field(join_tags(e.subgroup_tags))
                << '\n';
    }
    for (const auto& s : cohort.schema.sources) {
        auto out = open_out(dir / source_file_name(s));
        out << "stay_id,patient_id,offset_minutes";
        for (const auto& f : s.numeric_features) out << ',' << f.name;
        for (const auto& f : s.categorical_features) out << ',' << f.name;
        if (s.expansion) out << ',' << s.expansion->stop_column;
        out << '\n';
        for (const auto& e : cohort.episodes) {
            for (const auto& tp : e.series[s.source_id - 1].time_points) {
                out << csv_field(e.stay_id) << ',' << csv_field(e.patient_id) << ',' << format_double(tp.offset_minutes);
                for (int j = 0; j < s.num_numeric(); ++j)
                    out << ',' << (tp.numeric_missing[j] ? std::string() : format_double(tp.numeric_values[j]));
                for (int j = 0; j < s.num_categorical(); ++j) {
                    const auto& cat = s.categorical_features[j].vocabulary[tp.categorical_values[j]];
                    out << ',' << (cat == kUnknownCategory ? std::string() : csv_field(cat));
                }
                if (s.expansion) out << ',' << (tp.stop_offset ? format_double(*tp.stop_offset) : std::string());
                out << '\n';
            }
        }
    }
    {
        auto out = open_out(dir / "target.csv");
        out << "stay_id,offset_minutes,value\n";
        for (const auto& e : cohort.episodes)
            for (const auto& r : e.target_track)
                out << csv_field(e.stay_id) << ',' << format_double(r.offset_minutes) << ',' << format_double(r.value)
                    << '\n';
    }
}

Cohort read_cohort(const fs::path& dir) {
    Cohort cohort;
    cohort.schema = schema_from_json(read_json_file(dir / "schema.json"));
    const auto& schema = cohort.schema;

    std::unordered_map<std::string, std::size_t> by_stay;
    {
        auto in = open_in(dir / "stays.csv");
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            auto f = split_csv_line(line);
            if (f.size() < 2) throw InvalidInput("stays.csv: malformed row '" + line + "'");
            Episode e;
            e.stay_id = f[0];
            e.patient_id = f[1];
            if (f.size() > 2 && !f[2].empty()) {
                std::stringstream ss(f[2]);
                std::string tag;
                while (std::getline(ss, tag, ';'))
                    if (!tag.empty()) e.subgroup_tags.insert(tag);
            }
            for (const auto& s : schema.sources) e.series.push_back({s.source_id, {}, false});
            if (!by_stay.emplace(e.stay_id, cohort.episodes.size()).second)
                throw InvalidInput("stays.csv: duplicate stay_id '" + e.stay_id + "'");
            cohort.episodes.push_back(std::move(e));
        }
    }

    for (const auto& s : schema.sources) {
        const auto path = dir / source_file_name(s);
        auto in = open_in(path);
        std::string line;
        std::getline(in, line);
        auto header = split_csv_line(line);
        const std::size_t expected = 3 + s.num_features() + (s.expansion ? 1 : 0);
        if (header.size() != expected || header[0] != "stay_id" || header[1] != "patient_id" ||
            header[2] != "offset_minutes")
            throw InvalidInput(path.string() + ": header does not match schema");
        std::size_t row = 1;
        while (std::getline(in, line)) {
            ++row;
            if (line.empty()) continue;
            auto f = split_csv_line(line);
            const std::string ctx = path.filename().string() + " row " + std::to_string(row);
            if (f.size() != expected) throw InvalidInput(ctx + ": wrong column count");
            auto it = by_stay.find(f[0]);
            if (it == by_stay.end()) throw InvalidInput(ctx + ": unknown stay_id '" + f[0] + "'");
            TimePoint tp;
            tp.offset_minutes = parse_double(f[2], ctx);
            std::size_t col = 3;
            for (int j = 0; j < s.num_numeric(); ++j, ++col) {
                const bool missing = f[col].empty();
                tp.numeric_values.push_back(missing ? 0.0 : parse_double(f[col], ctx));
                tp.numeric_missing.push_back(missing ? 1 : 0);
            }
            for (int j = 0; j < s.num_categorical(); ++j, ++col) {
                const auto& feat = s.categorical_features[j];
                int id = f[col].empty() ? -1 : feat.index_of(f[col]);
                tp.categorical_values.push_back(id < 0 ? feat.unknown_id() : id);
            }
            if (s.expansion && !f[col].empty()) tp.stop_offset = parse_double(f[col], ctx);
            auto& series = cohort.episodes[it->second].series[s.source_id - 1];
            series.time_points.push_back(std::move(tp));
            series.present = true;
        }
    }
    for (auto& e : cohort.episodes)
        for (auto& s : e.series)
            std::stable_sort(s.time_points.begin(), s.time_points.end(),
                             [](const auto& a, const auto& b) { return a.offset_minutes < b.offset_minutes; });

    {
        auto in = open_in(dir / "target.csv");
        std::string line;
        std::getline(in, line);
        std::vector<std::vector<TargetReading>> tracks(cohort.episodes.size());
        std::size_t row = 1;
        while (std::getline(in, line)) {
            ++row;
            if (line.empty()) continue;
            auto f = split_csv_line(line);
            const std::string ctx = "target.csv row " + std::to_string(row);
            if (f.size() != 3) throw InvalidInput(ctx + ": wrong column count");
            auto it = by_stay.find(f[0]);
            if (it == by_stay.end()) throw InvalidInput(ctx + ": unknown stay_id '" + f[0] + "'");
            tracks[it->second].push_back({parse_double(f[1], ctx), parse_double(f[2], ctx)});
        }
        for (std::size_t i = 0; i < tracks.size(); ++i)
            cohort.episodes[i].target_track = dedupe_target_track(std::move(tracks[i]));
    }
    for (const auto& e : cohort.episodes) validate_episode(schema, e);
    return cohort;
}

json read_json_file(const fs::path& path) {
    auto in = open_in(path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw InvalidInput(path.string() + ": " + e.what());
    }
}

void write_json_file(const fs::path& path, const json& j) { write_text_file(path, j.dump(2) + "\n"); }

void write_text_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    auto out = open_out(path);
    out << text;
}

std::string read_text_file(const fs::path& path) {
    auto in = open_in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace mitst
