#include "mitst/service.hpp"

#include <httplib.h>

#include <algorithm>
#include <cmath>
#include <thread>

namespace mitst {

RequestError::RequestError(std::vector<FieldError> errors)
    : std::invalid_argument(errors.empty() ? "invalid request" : errors.front().field + ": " + errors.front().message),
      errors_(std::move(errors)) {}

json RequestError::to_json() const {
    json arr = json::array();
    for (const auto& e : errors_) arr.push_back({{"field", e.field}, {"message", e.message}});
    return json{{"errors", arr}};
}

namespace {

bool valid_offset(const json& v) { return v.is_number() && std::isfinite(v.get<double>()) && v.get<double>() >= 0.0; }

}  // namespace

ParsedRequest parse_request(const CohortSchema& schema, const json& request) {
    std::vector<FieldError> errors;
    ParsedRequest out;
    out.episode.stay_id = "request";
    out.episode.patient_id = "request";
    for (const auto& src : schema.sources) out.episode.series.push_back({src.source_id, {}, false});

    if (!request.is_object()) throw RequestError(std::vector<FieldError>{{"body", "must be a JSON object"}});
    for (const auto& [k, _] : request.items())
        if (k != "sources" && k != "cutoff_offset") errors.push_back({k, "unknown field"});

    std::optional<double> cutoff;
    if (request.contains("cutoff_offset")) {
        const auto& c = request["cutoff_offset"];
        if (!valid_offset(c))
            errors.push_back({"cutoff_offset", "must be a finite number >= 0"});
        else
            cutoff = c.get<double>();
    }

    double latest = 0.0;
    if (!request.contains("sources") || !request["sources"].is_object()) {
        errors.push_back({"sources", "must be an object keyed by source name"});
    } else {
        for (const auto& [name, records] : request["sources"].items()) {
            const std::string base = "sources." + name;
            const SourceSchema* src = schema.find(name);
            if (!src) {
                errors.push_back({base, "unknown source"});
                continue;
            }
            if (!records.is_array()) {
                errors.push_back({base, "must be an array of records"});
                continue;
            }
            auto& series = out.episode.series[static_cast<std::size_t>(src->source_id - 1)];
            series.present = true;
            for (std::size_t r = 0; r < records.size(); ++r) {
                const std::string rb = base + "[" + std::to_string(r) + "]";
                const auto& rec = records[r];
                if (!rec.is_object()) {
                    errors.push_back({rb, "must be an object"});
                    continue;
                }
                for (const auto& [k, _] : rec.items())
                    if (k != "offset_minutes" && k != "values" && k != "stop_offset")
                        errors.push_back({rb + "." + k, "unknown field"});
                TimePoint tp;
                tp.numeric_values.assign(static_cast<std::size_t>(src->num_numeric()), 0.0);
                tp.numeric_missing.assign(static_cast<std::size_t>(src->num_numeric()), 1);
                tp.categorical_values.resize(static_cast<std::size_t>(src->num_categorical()));
                for (int j = 0; j < src->num_categorical(); ++j)
                    tp.categorical_values[static_cast<std::size_t>(j)] =
                        src->categorical_features[static_cast<std::size_t>(j)].unknown_id();
                if (!rec.contains("offset_minutes") || !valid_offset(rec["offset_minutes"])) {
                    errors.push_back({rb + ".offset_minutes", "must be a finite number >= 0"});
                } else {
                    tp.offset_minutes = rec["offset_minutes"].get<double>();
                    latest = std::max(latest, tp.offset_minutes);
                }
                if (rec.contains("stop_offset")) {
                    if (!src->expansion)
                        errors.push_back({rb + ".stop_offset", "source has no repetition schedule"});
                    else if (!rec["stop_offset"].is_null() && !valid_offset(rec["stop_offset"]))
                        errors.push_back({rb + ".stop_offset", "must be a finite number >= 0 or null"});
                    else if (!rec["stop_offset"].is_null())
                        tp.stop_offset = rec["stop_offset"].get<double>();
                }
                if (rec.contains("values")) {
                    const auto& vals = rec["values"];
                    if (!vals.is_object()) {
                        errors.push_back({rb + ".values", "must be an object keyed by feature name"});
                    } else {
                        for (const auto& [feat, v] : vals.items()) {
                            const std::string fb = rb + ".values." + feat;
                            const int ni = src->numeric_index(feat);
                            const int ci = src->categorical_index(feat);
                            if (ni >= 0) {
                                if (v.is_null()) continue;
                                if (!v.is_number() || !std::isfinite(v.get<double>())) {
                                    errors.push_back({fb, "must be a finite number or null"});
                                    continue;
                                }
                                tp.numeric_values[static_cast<std::size_t>(ni)] = v.get<double>();
                                tp.numeric_missing[static_cast<std::size_t>(ni)] = 0;
                            } else if (ci >= 0) {
                                if (v.is_null()) continue;
                                if (!v.is_string()) {
                                    errors.push_back({fb, "must be a string or null"});
                                    continue;
                                }
                                const auto& cf = src->categorical_features[static_cast<std::size_t>(ci)];
                                const int id = cf.index_of(v.get<std::string>());
                                tp.categorical_values[static_cast<std::size_t>(ci)] = id >= 0 ? id : cf.unknown_id();
                            } else {
                                errors.push_back({fb, "unknown feature"});
                            }
                        }
                    }
                }
                series.time_points.push_back(std::move(tp));
            }
            std::stable_sort(series.time_points.begin(), series.time_points.end(),
                             [](const TimePoint& a, const TimePoint& b) { return a.offset_minutes < b.offset_minutes; });
        }
    }
    if (!errors.empty()) throw RequestError(std::move(errors));
    out.cutoff_offset = cutoff.value_or(latest);
    return out;
}

json request_from_episode(const CohortSchema& schema, const Episode& episode, double cutoff_offset) {
    json sources = json::object();
    for (const auto& src : schema.sources) {
        const auto& series = episode.series.at(static_cast<std::size_t>(src.source_id - 1));
        if (!series.present) continue;
        json records = json::array();
        for (const auto& tp : series.time_points) {
            if (tp.offset_minutes > cutoff_offset) break;
            json values = json::object();
            for (int j = 0; j < src.num_numeric(); ++j) {
                const auto& f = src.numeric_features[static_cast<std::size_t>(j)];
                values[f.name] = tp.numeric_missing[static_cast<std::size_t>(j)]
                                     ? json(nullptr)
                                     : json(tp.numeric_values[static_cast<std::size_t>(j)]);
            }
            for (int j = 0; j < src.num_categorical(); ++j) {
                const auto& f = src.categorical_features[static_cast<std::size_t>(j)];
                values[f.name] = f.vocabulary.at(static_cast<std::size_t>(tp.categorical_values[static_cast<std::size_t>(j)]));
            }
            json rec = {{"offset_minutes", tp.offset_minutes}, {"values", values}};
            if (src.expansion)
                rec["stop_offset"] = tp.stop_offset ? json(*tp.stop_offset) : json(nullptr);
            records.push_back(std::move(rec));
        }
        sources[src.source_name] = std::move(records);
    }
    return json{{"cutoff_offset", cutoff_offset}, {"sources", sources}};
}

// ---------------------------------------------------------------- predictor

json checkpoint_extra(const NormalizerState& normalizer, const FrequencyTable& frequencies, const LabelRule& rule,
                      const std::optional<ResolvedRecordFilter>& record_filter) {
    return json{{"normalizer", normalizer.to_json()},
                {"frequencies", frequencies.to_json()},
                {"label_rule", label_rule_to_json(rule)},
                {"record_filter", record_filter ? record_filter->to_json() : json(nullptr)}};
}

Predictor::Predictor(Model model, NormalizerState normalizer, FrequencyTable frequencies, LabelRule rule,
                     std::string model_hash, std::string config_hash,
                     std::optional<ResolvedRecordFilter> record_filter)
    : model_(std::move(model)),
      pre_(model_.schema(), std::move(normalizer), std::move(frequencies),
           static_cast<std::size_t>(model_.config().max_seq_len)),
      rule_(rule),
      model_hash_(std::move(model_hash)),
      config_hash_(std::move(config_hash)),
      filter_(std::move(record_filter)) {
    if (filter_) filter_->filter.validate(model_.schema());
}

std::shared_ptr<const Predictor> Predictor::load(const std::filesystem::path& checkpoint) {
    auto ck = load_checkpoint(checkpoint);
    const auto& extra = ck.extra;
    if (!extra.contains("normalizer") || !extra.contains("frequencies") || !extra.contains("label_rule"))
        throw CheckpointError("checkpoint " + checkpoint.string() + " lacks preprocessing state");
    return std::make_shared<const Predictor>(std::move(*ck.model), NormalizerState::from_json(extra["normalizer"]),
                                             FrequencyTable::from_json(extra["frequencies"]),
                                             label_rule_from_json(extra["label_rule"]), ck.file_hash, ck.config_hash,
                                             extra.contains("record_filter") && !extra["record_filter"].is_null()
                                                 ? std::optional(ResolvedRecordFilter::from_json(extra["record_filter"]))
                                                 : std::nullopt);
}

json Predictor::respond(const ActivationBundle& b, double cutoff_offset) const {
    const Matrix p = softmax_row(b.logits);
    const int C = static_cast<int>(p.cols());
    json probs = json::object();
    for (int c = 0; c < C; ++c) {
        const std::string name = C == kNumClasses ? class_name(static_cast<GlucoseClass>(c)) : std::to_string(c);
        probs[name] = p(0, c);
    }
    const int pred = argmax(std::span<const double>(p.data(), static_cast<std::size_t>(p.size())));
    json weights = json::object();
    for (std::size_t m = 0; m < b.alpha.size(); ++m) weights[model_.schema().sources[m].source_name] = b.alpha[m];
    return json{{"probabilities", probs},
                {"predicted_class", C == kNumClasses ? class_name(static_cast<GlucoseClass>(pred)) : std::to_string(pred)},
                {"fusion_weights", weights},
                {"cutoff_offset", cutoff_offset},
                {"model_hash", model_hash_},
                {"config_hash", config_hash_}};
}

json Predictor::predict(const json& request) const {
    auto parsed = parse_request(model_.schema(), request);
    if (filter_) filter_->apply(model_.schema(), std::span<Episode>(&parsed.episode, 1));
    const auto prepared = pre_.prepare(parsed.episode);
    const auto input = pre_.view(prepared, parsed.cutoff_offset);
    return respond(model_.infer(input), parsed.cutoff_offset);
}

json Predictor::bounds() const {
    constexpr double k = 3.0;
    json sources = json::object();
    const auto& norm = pre_.normalizer();
    for (const auto& src : model_.schema().sources) {
        json numeric = json::object();
        for (const auto& [key, st] : norm.stats) {
            const std::string prefix = src.source_name + "/";
            if (key.compare(0, prefix.size(), prefix) != 0) continue;
            json b = {{"mean", st.mean}, {"std", st.std}, {"low", st.mean - k * st.std}, {"high", st.mean + k * st.std}};
            if (st.has_thresholds) b["removal_thresholds"] = {st.low, st.high};
            numeric[key.substr(prefix.size())] = b;
        }
        json categorical = json::object();
        for (const auto& cf : src.categorical_features) categorical[cf.name] = cf.vocabulary;
        sources[src.source_name] = {{"numeric", numeric}, {"categorical", categorical}};
    }
    return json{{"std_multiplier", k}, {"sources", sources}};
}

json request_json_schema(const CohortSchema& schema) {
    json props = json::object();
    for (const auto& src : schema.sources) {
        json values = json::object();
        for (const auto& f : src.numeric_features) values[f.name] = {{"type", json::array({"number", "null"})}};
        for (const auto& f : src.categorical_features)
            values[f.name] = {{"type", json::array({"string", "null"})}, {"examples", f.vocabulary}};
        json rec = {{"type", "object"},
                    {"required", json::array({"offset_minutes"})},
                    {"additionalProperties", false},
                    {"properties",
                     {{"offset_minutes", {{"type", "number"}, {"minimum", 0}}},
                      {"values", {{"type", "object"}, {"additionalProperties", false}, {"properties", values}}}}}};
        if (src.expansion)
            rec["properties"]["stop_offset"] = {{"type", json::array({"number", "null"})}, {"minimum", 0}};
        props[src.source_name] = {{"type", "array"}, {"items", rec}};
    }
    return json{{"$schema", "https://json-schema.org/draft/2020-12/schema"},
                {"title", "PredictRequest"},
                {"type", "object"},
                {"required", json::array({"sources"})},
                {"additionalProperties", false},
                {"properties",
                 {{"cutoff_offset", {{"type", "number"}, {"minimum", 0}}},
                  {"sources", {{"type", "object"}, {"additionalProperties", false}, {"properties", props}}}}}};
}

json response_json_schema() {
    return json{{"$schema", "https://json-schema.org/draft/2020-12/schema"},
                {"title", "PredictResponse"},
                {"type", "object"},
                {"required", json::array({"probabilities", "predicted_class", "fusion_weights", "model_hash",
                                          "config_hash", "cutoff_offset"})},
                {"properties",
                 {{"probabilities", {{"type", "object"}, {"additionalProperties", {{"type", "number"}}}}},
                  {"predicted_class", {{"type", "string"}}},
                  {"fusion_weights", {{"type", "object"}, {"additionalProperties", {{"type", "number"}}}}},
                  {"cutoff_offset", {{"type", "number"}}},
                  {"model_hash", {{"type", "string"}}},
                  {"config_hash", {{"type", "string"}}}}}};
}

// ---------------------------------------------------------------- templates

std::optional<std::string> confusion_cell(int target_class, int truth, int predicted) {
    const bool t = truth == target_class;
    const bool p = predicted == target_class;
    if (t && p) return "true_positive";
    if (!t && p) return "false_positive";
    if (t && !p) return "false_negative";
    return std::nullopt;
}

json build_templates(const Predictor& predictor, std::span<const TemplateCandidate> candidates) {
    const auto& schema = predictor.model().schema();
    json out = json::array();
    for (const auto& name : template_names()) {
        const auto split = name.find('_');
        const std::string cls_name = name.substr(0, split);
        const std::string cell = name.substr(split + 1);
        const int cls = static_cast<int>(class_from_name(cls_name));
        const TemplateCandidate* best = nullptr;
        for (const auto& c : candidates) {
            const int pred = argmax(c.scored.scores);
            const auto got = confusion_cell(cls, c.scored.truth, pred);
            if (!got || *got != cell) continue;
            if (!best || c.scored.scores[static_cast<std::size_t>(cls)] > best->scored.scores[static_cast<std::size_t>(cls)])
                best = &c;
        }
        if (!best) continue;
        json request = request_from_episode(schema, *best->episode, best->cutoff_offset);
        json stored = predictor.predict(request);
        out.push_back({{"name", name},
                       {"target_class", cls_name},
                       {"cell", cell},
                       {"truth", class_name(static_cast<GlucoseClass>(best->scored.truth))},
                       {"next_target_value", best->scored.next_target_value},
                       {"stay_id", best->episode->stay_id},
                       {"request", request},
                       {"stored_prediction", stored}});
    }
    return out;
}

// ---------------------------------------------------------------- server

struct InferenceServer::Impl {
    mutable std::mutex mu;
    std::shared_ptr<const Predictor> predictor;
    json templates = json::array();
    httplib::Server http;
    std::thread worker;

    std::shared_ptr<const Predictor> current() const {
        std::lock_guard lock(mu);
        return predictor;
    }
};

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_content(body.dump(), "application/json");
}

}  // namespace

InferenceServer::InferenceServer() : impl_(std::make_unique<Impl>()) {
    auto& s = impl_->http;
    Impl* impl = impl_.get();
    s.Get("/health", [impl](const httplib::Request&, httplib::Response& res) {
        const auto p = impl->current();
        if (!p) return send_json(res, 503, {{"status", "not_loaded"}});
        send_json(res, 200, {{"status", "ok"}, {"model_hash", p->model_hash()}, {"config_hash", p->config_hash()}});
    });
    s.Post("/predict", [impl](const httplib::Request& req, httplib::Response& res) {
        const auto p = impl->current();
        if (!p) return send_json(res, 503, {{"error", "no checkpoint loaded"}});
        json body;
        try {
            body = json::parse(req.body);
        } catch (const json::exception& e) {
            return send_json(res, 400, RequestError(std::vector<FieldError>{{"body", std::string("invalid JSON: ") + e.what()}}).to_json());
        }
        try {
            send_json(res, 200, p->predict(body));
        } catch (const RequestError& e) {
            send_json(res, 400, e.to_json());
        } catch (const std::exception& e) {
            send_json(res, 500, {{"error", e.what()}});
        }
    });
    s.Get("/templates", [impl](const httplib::Request&, httplib::Response& res) {
        json t;
        {
            std::lock_guard lock(impl->mu);
            t = impl->templates;
        }
        send_json(res, 200, {{"templates", t}});
    });
    s.Get("/schema", [impl](const httplib::Request&, httplib::Response& res) {
        const auto p = impl->current();
        if (!p) return send_json(res, 503, {{"error", "no checkpoint loaded"}});
        send_json(res, 200,
                  {{"request", request_json_schema(p->model().schema())},
                   {"response", response_json_schema()},
                   {"cohort_schema", schema_to_json(p->model().schema())}});
    });
    s.Get("/bounds", [impl](const httplib::Request&, httplib::Response& res) {
        const auto p = impl->current();
        if (!p) return send_json(res, 503, {{"error", "no checkpoint loaded"}});
        send_json(res, 200, p->bounds());
    });
    s.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) {
        res.set_header("Access-Control-Allow-Origin", "*");
        res.set_header("Access-Control-Allow-Headers", "Content-Type");
        res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
        res.status = 204;
    });
}

InferenceServer::~InferenceServer() { stop(); }

void InferenceServer::load(const std::filesystem::path& checkpoint) { set_predictor(Predictor::load(checkpoint)); }

void InferenceServer::set_predictor(std::shared_ptr<const Predictor> predictor) {
    std::lock_guard lock(impl_->mu);
    impl_->predictor = std::move(predictor);
}

void InferenceServer::set_templates(json templates) {
    if (!templates.is_array()) throw InvalidInput("templates must be a JSON array");
    std::lock_guard lock(impl_->mu);
    impl_->templates = std::move(templates);
}

std::shared_ptr<const Predictor> InferenceServer::predictor() const { return impl_->current(); }

int InferenceServer::start(const std::string& host, int port) {
    const int bound = port == 0 ? impl_->http.bind_to_any_port(host) : (impl_->http.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
    impl_->worker = std::thread([this] { impl_->http.listen_after_bind(); });
    impl_->http.wait_until_ready();
    return bound;
}

bool InferenceServer::listen(const std::string& host, int port) { return impl_->http.listen(host, port); }

void InferenceServer::stop() {
    if (impl_->http.is_running()) impl_->http.stop();
    if (impl_->worker.joinable()) impl_->worker.join();
}

}  // namespace mitst
