#include "mitst/pipeline.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "mitst/evaluation.hpp"
#include "mitst/random.hpp"
#include "mitst/service.hpp"

namespace mitst {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

namespace {

void reject_unknown(const json& j, const json& defaults, const std::string& section) {
    if (!j.is_object()) throw InvalidInput(section + ": must be a JSON object");
    for (const auto& [k, _] : j.items())
        if (!defaults.contains(k)) throw InvalidInput(section + "." + k + ": unknown key");
}

template <class F>
auto in_section(const std::string& section, F&& f) {
    try {
        return f();
    } catch (const json::exception& e) {
        throw InvalidInput(section + ": " + e.what());
    } catch (const InvalidInput& e) {
        const std::string what = e.what();
        if (what.rfind(section, 0) == 0) throw;
        throw InvalidInput(section + ": " + what);
    }
}

json split_config_json(const SplitConfig& s) {
    return json{{"train", s.fractions.train},
                {"validation", s.fractions.validation},
                {"test", s.fractions.test},
                {"seed", s.seed}};
}

json preprocess_config_json(const PreprocessConfig& p) {
    return json{{"low_quantile", p.low_quantile},
                {"high_quantile", p.high_quantile},
                {"frequencies", p.frequencies.to_json()},
                {"record_filter", p.record_filter ? p.record_filter->to_json() : json(nullptr)}};
}

json evaluate_config_json(const EvaluateConfig& e) {
    return json{{"bootstrap_resamples", e.bootstrap_resamples}, {"permutations", e.permutations},
                {"seed", e.seed},                               {"hypo_fractions", e.hypo_fractions},
                {"hyper_fractions", e.hyper_fractions},         {"subgroups", e.subgroups},
                {"checkpoint", e.checkpoint}};
}

void check_fractions(const std::vector<double>& f, double cap, const std::string& field) {
    if (f.empty()) throw InvalidInput(field + ": at least one fraction is required");
    for (std::size_t i = 0; i < f.size(); ++i) {
        if (!(f[i] > 0.0 && f[i] <= cap))
            throw InvalidInput(field + ": fractions must lie in (0, " + format_double(cap) + "]");
        if (i > 0 && !(f[i] > f[i - 1])) throw InvalidInput(field + ": fractions must be ascending");
    }
}

}  // namespace

json PipelineConfig::to_json() const {
    return json{{"generator", generator.to_json()},
                {"split", split_config_json(split)},
                {"label_rule", label_rule_to_json(label_rule)},
                {"preprocess", preprocess_config_json(preprocess)},
                {"model", model.to_json()},
                {"train", train.to_json()},
                {"evaluate", evaluate_config_json(evaluate)},
                {"finetune",
                 {{"label_rule", label_rule_to_json(finetune.label_rule)},
                  {"train", finetune.train.to_json()},
                  {"checkpoint", finetune.checkpoint}}},
                {"predict", {{"checkpoint", predict.checkpoint}, {"input", predict.input}}},
                {"serve",
                 {{"host", serve.host},
                  {"port", serve.port},
                  {"checkpoint", serve.checkpoint},
                  {"templates", serve.templates}}}};
}

PipelineConfig PipelineConfig::from_json(const json& j) {
    const PipelineConfig defaults;
    const json d = defaults.to_json();
    reject_unknown(j, d, "config");
    PipelineConfig c;
    auto section = [&](const char* name) -> json { return j.contains(name) ? j[name] : json::object(); };

    if (j.contains("generator")) c.generator = in_section("generator", [&] { return GeneratorConfig::from_json(j["generator"]); });
    {
        const json s = section("split");
        reject_unknown(s, d["split"], "split");
        in_section("split", [&] {
            c.split.fractions.train = s.value("train", c.split.fractions.train);
            c.split.fractions.validation = s.value("validation", c.split.fractions.validation);
            c.split.fractions.test = s.value("test", c.split.fractions.test);
            c.split.seed = s.value("seed", c.split.seed);
            const auto& f = c.split.fractions;
            if (f.train <= 0 || f.validation <= 0 || f.test <= 0 ||
                std::abs(f.train + f.validation + f.test - 1.0) > 1e-9)
                throw InvalidInput("split: fractions must be positive and sum to 1");
            return 0;
        });
    }
    {
        const json s = section("label_rule");
        reject_unknown(s, d["label_rule"], "label_rule");
        c.label_rule = in_section("label_rule", [&] { return label_rule_from_json(s); });
    }
    {
        const json s = section("preprocess");
        reject_unknown(s, d["preprocess"], "preprocess");
        in_section("preprocess", [&] {
            c.preprocess.low_quantile = s.value("low_quantile", c.preprocess.low_quantile);
            c.preprocess.high_quantile = s.value("high_quantile", c.preprocess.high_quantile);
            if (!(0.0 <= c.preprocess.low_quantile && c.preprocess.low_quantile < c.preprocess.high_quantile &&
                  c.preprocess.high_quantile <= 1.0))
                throw InvalidInput("preprocess: need 0 <= low_quantile < high_quantile <= 1");
            if (s.contains("frequencies")) c.preprocess.frequencies = FrequencyTable::from_json(s["frequencies"]);
            if (s.contains("record_filter") && !s["record_filter"].is_null())
                c.preprocess.record_filter = RecordFilter::from_json(s["record_filter"]);
            return 0;
        });
    }
    if (j.contains("model")) c.model = in_section("model", [&] { return ModelConfig::from_json(j["model"]); });
    if (j.contains("train")) c.train = in_section("train", [&] { return TrainConfig::from_json(j["train"]); });
    {
        const json s = section("evaluate");
        reject_unknown(s, d["evaluate"], "evaluate");
        in_section("evaluate", [&] {
            auto& e = c.evaluate;
            e.bootstrap_resamples = s.value("bootstrap_resamples", e.bootstrap_resamples);
            e.permutations = s.value("permutations", e.permutations);
            e.seed = s.value("seed", e.seed);
            e.hypo_fractions = s.value("hypo_fractions", e.hypo_fractions);
            e.hyper_fractions = s.value("hyper_fractions", e.hyper_fractions);
            e.subgroups = s.value("subgroups", e.subgroups);
            e.checkpoint = s.value("checkpoint", e.checkpoint);
            if (e.bootstrap_resamples != 0 && e.bootstrap_resamples < 100)
                throw InvalidInput("evaluate.bootstrap_resamples: must be 0 (disabled) or >= 100");
            if (e.permutations < 1) throw InvalidInput("evaluate.permutations: must be >= 1");
            check_fractions(e.hypo_fractions, 0.10, "evaluate.hypo_fractions");
            check_fractions(e.hyper_fractions, 0.30, "evaluate.hyper_fractions");
            return 0;
        });
    }
    {
        const json s = section("finetune");
        reject_unknown(s, d["finetune"], "finetune");
        if (s.contains("label_rule")) {
            reject_unknown(s["label_rule"], d["finetune"]["label_rule"], "finetune.label_rule");
            json merged = d["finetune"]["label_rule"];
            merged.update(s["label_rule"]);
            c.finetune.label_rule = in_section("finetune.label_rule", [&] { return label_rule_from_json(merged); });
        }
        if (s.contains("train"))
            c.finetune.train = in_section("finetune.train", [&] { return TrainConfig::from_json(s["train"]); });
        c.finetune.checkpoint = in_section("finetune", [&] { return s.value("checkpoint", c.finetune.checkpoint); });
    }
    {
        const json s = section("predict");
        reject_unknown(s, d["predict"], "predict");
        in_section("predict", [&] {
            c.predict.checkpoint = s.value("checkpoint", c.predict.checkpoint);
            c.predict.input = s.value("input", c.predict.input);
            return 0;
        });
    }
    {
        const json s = section("serve");
        reject_unknown(s, d["serve"], "serve");
        in_section("serve", [&] {
            c.serve.host = s.value("host", c.serve.host);
            c.serve.port = s.value("port", c.serve.port);
            c.serve.checkpoint = s.value("checkpoint", c.serve.checkpoint);
            c.serve.templates = s.value("templates", c.serve.templates);
            if (c.serve.port < 0 || c.serve.port > 65535) throw InvalidInput("serve.port: must lie in [0, 65535]");
            return 0;
        });
    }
    return c;
}

std::string PipelineConfig::hash() const { return sha256_hex(to_json().dump()); }

void PipelineConfig::set_seed(std::uint64_t seed) {
    generator.seed = seed;
    split.seed = derive_seed(seed, {hash_string("split")});
    train.seed = derive_seed(seed, {hash_string("train")});
    evaluate.seed = derive_seed(seed, {hash_string("evaluate")});
    finetune.train.seed = derive_seed(seed, {hash_string("finetune")});
}

void apply_override(json& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + assignment + "'");
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;
    }
    json* node = &config;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw UsageError("--set: empty path component in '" + key + "'");
        if (!node->is_object()) throw UsageError("--set: '" + key + "' descends into a non-object");
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        node = &(*node)[part];
        if (node->is_null()) *node = json::object();
        start = dot + 1;
    }
}

PipelineConfig load_pipeline_config(const fs::path& path, const std::vector<std::string>& overrides,
                                    std::optional<std::uint64_t> seed) {
    json j = json::object();
    if (!path.empty()) {
        if (!fs::exists(path)) throw UsageError("config file not found: " + path.string());
        try {
            j = json::parse(read_text_file(path));
        } catch (const json::exception& e) {
            throw UsageError("config " + path.string() + ": " + e.what());
        }
    }
    for (const auto& o : overrides) apply_override(j, o);
    PipelineConfig c;
    try {
        c = PipelineConfig::from_json(j);
    } catch (const InvalidInput& e) {
        throw UsageError(std::string("invalid config: ") + e.what());
    }
    if (seed) c.set_seed(*seed);
    return c;
}

json split_to_json(const CohortSplit& s) {
    return json{{"train", s.train}, {"validation", s.validation}, {"test", s.test}};
}

CohortSplit split_from_json(const json& j) {
    CohortSplit s;
    s.train = j.at("train").get<std::vector<std::size_t>>();
    s.validation = j.at("validation").get<std::vector<std::size_t>>();
    s.test = j.at("test").get<std::vector<std::size_t>>();
    return s;
}

std::vector<json> collect_requests(const json& input) {
    auto unwrap = [](const json& item) { return item.is_object() && item.contains("request") ? item["request"] : item; };
    if (input.is_object() && input.contains("templates")) return collect_requests(input["templates"]);
    if (input.is_array()) {
        std::vector<json> out;
        for (const auto& item : input) out.push_back(unwrap(item));
        return out;
    }
    return {unwrap(input)};
}

// ---------------------------------------------------------------- pipeline

Pipeline::Pipeline(PipelineConfig config, fs::path out, std::ostream* log)
    : config_(std::move(config)), out_(std::move(out)), log_(log) {}

void Pipeline::say(const std::string& line) const {
    if (log_) *log_ << line << std::endl;
}

fs::path Pipeline::checkpoint_path(const std::string& configured) const {
    return configured.empty() ? out_ / "train" / "checkpoint.mitst" : fs::path(configured);
}

namespace {

void require(const fs::path& p) {
    if (!fs::exists(p)) throw MissingArtifact(p);
}

json backend_info() {
    return json{{"deterministic", true},
                {"threads", 1},
                {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                              std::to_string(EIGEN_MINOR_VERSION)},
                {"compiler", __VERSION__}};
}

std::string curve_csv(const std::vector<CurvePoint>& pts) {
    std::ostringstream os;
    os << "fraction,value\n";
    for (const auto& p : pts) os << format_double(p.fraction) << "," << optional_to_string(p.value) << "\n";
    return os.str();
}

std::string predictions_csv(const Dataset& data, const std::vector<ScoredExample>& scored) {
    std::ostringstream os;
    os << "stay_id,cutoff_offset,horizon_minutes,truth";
    for (int c = 0; c < kNumClasses; ++c) os << ",p_" << class_name(static_cast<GlucoseClass>(c));
    os << "\n";
    for (std::size_t i = 0; i < scored.size(); ++i) {
        const auto& ex = data.examples[i];
        os << data.stay_ids[ex.episode_index] << "," << format_double(ex.cutoff_offset) << ","
           << format_double(ex.horizon_minutes) << "," << class_name(ex.label);
        for (double p : scored[i].scores) os << "," << format_double(p);
        os << "\n";
    }
    return os.str();
}

std::string buckets_csv(const std::vector<BucketMetrics>& buckets) {
    std::ostringstream os;
    os << "bucket,start_minutes,count";
    for (const char* m : {"auroc", "auprc"})
        for (int c = 0; c < kNumClasses; ++c) os << "," << m << "_" << class_name(static_cast<GlucoseClass>(c));
    os << "\n";
    for (const auto& b : buckets) {
        os << b.bucket << "," << format_double(b.bucket * kBucketMinutes) << "," << b.count;
        for (const auto& v : b.auroc) os << "," << optional_to_string(v);
        for (const auto& v : b.auprc) os << "," << optional_to_string(v);
        os << "\n";
    }
    return os.str();
}

std::vector<double> cutpoints_on(const std::vector<ScoredExample>& scored, int num_classes) {
    std::vector<double> out;
    for (int c = 0; c < num_classes; ++c) {
        const auto s = class_scores(scored, c);
        const auto t = class_truths(scored, c);
        out.push_back(select_cutpoint(s, t).threshold);
    }
    return out;
}

json history_json(const TrainResult& r) {
    return json{{"best_epoch", r.best_epoch},
                {"best_score", r.best_score},
                {"epochs_run", r.history.size()},
                {"trainable_scalars", r.trainable_scalars}};
}

}  // namespace

RunResult Pipeline::finish(const std::string& command, const fs::path& dir, const std::vector<fs::path>& artifacts,
                           json details) {
    json arts = json::object();
    for (const auto& a : artifacts) arts[fs::relative(a, dir).generic_string()] = file_sha256(a);
    json manifest = {{"command", command},
                     {"config_hash", config_.hash()},
                     {"config", config_.to_json()},
                     {"artifacts", arts},
                     {"backend", backend_info()},
                     {"details", std::move(details)}};
    write_json_file(dir / "run_manifest.json", manifest);
    say(command + ": wrote " + (dir / "run_manifest.json").string());
    return {dir, manifest};
}

RunResult Pipeline::generate() {
    const fs::path dir = out_ / "cohort";
    say("generate: " + std::to_string(config_.generator.n_patients) + " patients, seed " +
        std::to_string(config_.generator.seed));
    auto g = generate_cohort(config_.generator);
    write_cohort(dir, g.cohort);
    write_json_file(dir / "manifest.json", g.manifest.to_json());
    write_json_file(dir / "generator_config.json", g.effective_config.to_json());
    std::vector<fs::path> arts;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().filename() != "run_manifest.json") arts.push_back(e.path());
    std::sort(arts.begin(), arts.end());
    return finish("generate", dir, arts, {{"seed", config_.generator.seed}, {"cohort", g.manifest.to_json()}});
}

RunResult Pipeline::preprocess() {
    const fs::path cohort_dir = out_ / "cohort";
    require(cohort_dir / "schema.json");
    const fs::path dir = out_ / "preprocess";
    fs::create_directories(dir);
    Cohort cohort = read_cohort(cohort_dir);
    const auto split = split_by_patient(cohort.episodes, config_.split.fractions, config_.split.seed);

    json filter_json = nullptr;
    std::size_t dropped = 0;
    if (config_.preprocess.record_filter) {
        ResolvedRecordFilter rf{*config_.preprocess.record_filter, {}};
        rf.kept = resolve_record_filter(rf.filter, cohort.schema, cohort.episodes, split.train);
        dropped = rf.apply(cohort.schema, cohort.episodes);
        filter_json = rf.to_json();
    }
    NormalizerOptions opts;
    opts.low_quantile = config_.preprocess.low_quantile;
    opts.high_quantile = config_.preprocess.high_quantile;
    const auto norm = fit_normalizer(cohort.schema, cohort.episodes, split.train, opts);

    write_json_file(dir / "split.json", split_to_json(split));
    write_json_file(dir / "normalizer.json", norm.to_json());
    write_json_file(dir / "frequencies.json", config_.preprocess.frequencies.to_json());
    write_json_file(dir / "record_filter.json", filter_json);
    say("preprocess: split " + std::to_string(split.train.size()) + "/" + std::to_string(split.validation.size()) +
        "/" + std::to_string(split.test.size()) + " stays");
    return finish("preprocess", dir,
                  {dir / "split.json", dir / "normalizer.json", dir / "frequencies.json", dir / "record_filter.json"},
                  {{"seed", config_.split.seed},
                   {"stays", {{"train", split.train.size()}, {"validation", split.validation.size()}, {"test", split.test.size()}}},
                   {"records_filtered", dropped}});
}

Pipeline::PreparedCohort Pipeline::load_prepared() const {
    const fs::path pre = out_ / "preprocess";
    require(out_ / "cohort" / "schema.json");
    for (const char* f : {"split.json", "normalizer.json", "record_filter.json"}) require(pre / f);
    PreparedCohort p;
    p.cohort = read_cohort(out_ / "cohort");
    p.split = split_from_json(read_json_file(pre / "split.json"));
    p.normalizer = NormalizerState::from_json(read_json_file(pre / "normalizer.json"));
    const json rf = read_json_file(pre / "record_filter.json");
    if (!rf.is_null()) {
        p.record_filter = ResolvedRecordFilter::from_json(rf);
        p.record_filter->apply(p.cohort.schema, p.cohort.episodes);
    }
    return p;
}

RunResult Pipeline::train() {
    auto p = load_prepared();
    const fs::path dir = out_ / "train";
    fs::create_directories(dir);
    const auto mc = config_.model.resolved(p.cohort.schema);
    Preprocessor pre(p.cohort.schema, p.normalizer, config_.preprocess.frequencies,
                     static_cast<std::size_t>(mc.max_seq_len));
    const auto tr = make_dataset(pre, p.cohort.episodes, p.split.train, config_.label_rule);
    const auto va = make_dataset(pre, p.cohort.episodes, p.split.validation, config_.label_rule);
    const auto cc = tr.class_counts();
    say("train: " + std::to_string(tr.examples.size()) + " examples (" + std::to_string(cc[0]) + "/" +
        std::to_string(cc[1]) + "/" + std::to_string(cc[2]) + "), validation " + std::to_string(va.examples.size()));

    Model model(mc, p.cohort.schema, derive_seed(config_.train.seed, {hash_string("init")}));
    TrainHooks hooks;
    hooks.on_epoch = [this](const EpochRecord& r) {
        say("  epoch " + std::to_string(r.epoch) + " loss " + format_double(r.train_loss) + " val_auroc " +
            optional_to_string(r.val_auroc) + " val_auprc " + optional_to_string(r.val_auprc) +
            (r.improved ? " *" : ""));
    };
    const auto result = mitst::train(model, pre, tr, va, config_.train, hooks);
    save_checkpoint(dir / "checkpoint.mitst", model,
                    checkpoint_extra(p.normalizer, config_.preprocess.frequencies, config_.label_rule, p.record_filter));
    write_text_file(dir / "history.csv", history_csv(result.history));
    return finish("train", dir, {dir / "checkpoint.mitst", dir / "history.csv"},
                  {{"seed", config_.train.seed},
                   {"history", history_json(result)},
                   {"class_counts", cc},
                   {"checkpoint_hash", file_sha256(dir / "checkpoint.mitst")}});
}

RunResult Pipeline::evaluate() {
    const fs::path ckpt = checkpoint_path(config_.evaluate.checkpoint);
    require(ckpt);
    auto p = load_prepared();
    const fs::path dir = out_ / "eval";
    fs::create_directories(dir / "curves");
    const auto predictor = Predictor::load(ckpt);
    const auto& pre = predictor->preprocessor();
    const auto& rule = predictor->label_rule();
    const int C = predictor->model().config().num_classes;
    if (C != kNumClasses) throw UsageError("evaluate expects a " + std::to_string(kNumClasses) + "-class checkpoint");

    const auto va = make_dataset(pre, p.cohort.episodes, p.split.validation, rule);
    const auto te = make_dataset(pre, p.cohort.episodes, p.split.test, rule);
    say("evaluate: validation " + std::to_string(va.examples.size()) + ", test " + std::to_string(te.examples.size()) +
        " examples");
    const auto val_scored = score_dataset(predictor->model(), pre, va);
    const auto test_scored = score_dataset(predictor->model(), pre, te);
    const auto locf = locf_scored(test_scored, rule);

    ReportOptions opts;
    opts.bootstrap_resamples = config_.evaluate.bootstrap_resamples;
    opts.seed = config_.evaluate.seed;
    opts.cutpoints = cutpoints_on(val_scored, C);
    const auto report = compute_report(test_scored, C, opts);
    ReportOptions locf_opts = opts;
    locf_opts.cutpoints.clear();
    const auto locf_report = compute_report(locf, C, locf_opts);

    std::vector<fs::path> arts;
    auto put_json = [&](const fs::path& rel, const json& j) {
        write_json_file(dir / rel, j);
        arts.push_back(dir / rel);
    };
    auto put_text = [&](const fs::path& rel, const std::string& s) {
        write_text_file(dir / rel, s);
        arts.push_back(dir / rel);
    };
    put_json("report_test.json", report.to_json());
    put_text("report_test.csv", report.to_csv());
    put_json("report_locf.json", locf_report.to_json());
    put_text("report_locf.csv", locf_report.to_csv());
    put_text("predictions_test.csv", predictions_csv(te, test_scored));

    json comparisons = json::array();
    const ScoreMetric metrics[] = {[](auto s, auto t) { return auroc(s, t); }, [](auto s, auto t) { return auprc(s, t); }};
    const char* metric_names[] = {"auroc", "auprc"};
    for (int c = 0; c < C; ++c) {
        const auto truths = class_truths(test_scored, c);
        const auto a = class_scores(test_scored, c);
        const auto b = class_scores(locf, c);
        for (int m = 0; m < 2; ++m) {
            const auto ma = metrics[m](a, truths);
            const auto mb = metrics[m](b, truths);
            // Undefined when the test split lacks this class.
            json pv = nullptr;
            if (ma && mb)
                pv = permutation_test(metrics[m], a, b, truths, config_.evaluate.permutations,
                                      derive_seed(config_.evaluate.seed,
                                                  {hash_string("perm"), static_cast<std::uint64_t>(c * 2 + m)}));
            comparisons.push_back({{"class", class_name(static_cast<GlucoseClass>(c))},
                                   {"metric", metric_names[m]},
                                   {"model", optional_to_json(ma)},
                                   {"locf", optional_to_json(mb)},
                                   {"p_value", pv},
                                   {"permutations", config_.evaluate.permutations}});
        }
    }
    put_json("comparisons.json", comparisons);

    const int hypo = static_cast<int>(GlucoseClass::hypo);
    const int hyper = static_cast<int>(GlucoseClass::hyper);
    put_text("curves/fp_severity_hypo.csv", curve_csv(fp_severity_curve(test_scored, hypo, config_.evaluate.hypo_fractions)));
    put_text("curves/fp_severity_hyper.csv", curve_csv(fp_severity_curve(test_scored, hyper, config_.evaluate.hyper_fractions)));
    put_text("curves/relative_risk_hypo.csv", curve_csv(relative_risk_curve(test_scored, hypo, config_.evaluate.hypo_fractions)));
    put_text("curves/relative_risk_hyper.csv",
             curve_csv(relative_risk_curve(test_scored, hyper, config_.evaluate.hyper_fractions)));
    put_text("time_buckets.csv", buckets_csv(time_bucket_report(test_scored, C)));

    json subgroups = json::object();
    for (const auto& tag : config_.evaluate.subgroups) {
        if (filter_by_tag(test_scored, tag).empty()) {
            subgroups[tag] = nullptr;
            continue;
        }
        subgroups[tag] = subgroup_report(test_scored, tag, C, opts).to_json();
    }
    put_json("subgroups.json", subgroups);

    std::vector<TemplateCandidate> candidates;
    candidates.reserve(test_scored.size());
    for (std::size_t i = 0; i < test_scored.size(); ++i) {
        const auto& ex = te.examples[i];
        candidates.push_back({&p.cohort.episodes[te.source_indices[ex.episode_index]], ex.cutoff_offset, test_scored[i]});
    }
    const json templates = build_templates(*predictor, candidates);
    put_json("templates.json", templates);

    return finish("evaluate", dir, arts,
                  {{"seed", config_.evaluate.seed},
                   {"checkpoint", ckpt.string()},
                   {"checkpoint_hash", predictor->model_hash()},
                   {"test_examples", te.examples.size()},
                   {"macro_auroc", optional_to_json(report.macro_auroc)},
                   {"balanced_accuracy", optional_to_json(report.balanced_accuracy)},
                   {"locf_balanced_accuracy", optional_to_json(locf_report.balanced_accuracy)},
                   {"templates", templates.size()}});
}

RunResult Pipeline::predict() {
    const fs::path ckpt = checkpoint_path(config_.predict.checkpoint);
    require(ckpt);
    if (config_.predict.input.empty()) throw UsageError("predict: no input given (predict.input or --input)");
    require(config_.predict.input);
    const fs::path dir = out_ / "predict";
    fs::create_directories(dir);
    const auto predictor = Predictor::load(ckpt);
    json input;
    try {
        input = json::parse(read_text_file(config_.predict.input));
    } catch (const json::exception& e) {
        throw UsageError("predict input " + config_.predict.input + ": " + e.what());
    }
    json out = json::array();
    for (const auto& req : collect_requests(input)) out.push_back(predictor->predict(req));
    write_json_file(dir / "predictions.json", out);
    return finish("predict", dir, {dir / "predictions.json"},
                  {{"checkpoint", ckpt.string()}, {"checkpoint_hash", predictor->model_hash()}, {"requests", out.size()}});
}

RunResult Pipeline::finetune() {
    const fs::path ckpt = checkpoint_path(config_.finetune.checkpoint);
    require(ckpt);
    auto p = load_prepared();
    const fs::path dir = out_ / "finetune";
    fs::create_directories(dir);
    auto loaded = load_checkpoint(ckpt);
    Model model = std::move(*loaded.model);
    const Model pretrained = model;
    const auto normalizer = NormalizerState::from_json(loaded.extra.at("normalizer"));
    const auto frequencies = FrequencyTable::from_json(loaded.extra.at("frequencies"));
    Preprocessor pre(model.schema(), normalizer, frequencies, static_cast<std::size_t>(model.config().max_seq_len));
    const auto& rule = config_.finetune.label_rule;
    const auto tr = make_dataset(pre, p.cohort.episodes, p.split.train, rule);
    const auto va = make_dataset(pre, p.cohort.episodes, p.split.validation, rule);
    const auto te = make_dataset(pre, p.cohort.episodes, p.split.test, rule);
    say("finetune: new label rule (" + format_double(rule.hypo_below) + ", " + format_double(rule.hyper_above) +
        "), " + std::to_string(tr.examples.size()) + " training examples");

    TrainConfig tc = config_.finetune.train;
    if (tc.freeze_spec.empty()) tc.freeze_spec = default_finetune_freeze_spec();
    const auto frozen = resolve_freeze_spec(model, tc.freeze_spec);
    TrainHooks hooks;
    hooks.on_epoch = [this](const EpochRecord& r) {
        say("  epoch " + std::to_string(r.epoch) + " loss " + format_double(r.train_loss) + " val_auroc " +
            optional_to_string(r.val_auroc) + (r.improved ? " *" : ""));
    };
    const auto result = fine_tune(model, pre, tr, va, tc, model.config().num_classes, hooks);

    json groups = json::array();
    for (const auto& g : model.params().groups()) {
        bool identical = true;
        for (int i : model.params().indices_in_group(g)) {
            const auto& a = model.params()[static_cast<std::size_t>(i)].value;
            const auto& b = pretrained.params()[static_cast<std::size_t>(i)].value;
            identical = identical && a.rows() == b.rows() && a.cols() == b.cols() &&
                        std::equal(a.data(), a.data() + a.size(), b.data(), [](double x, double y) {
                            return std::memcmp(&x, &y, sizeof(double)) == 0;
                        });
        }
        groups.push_back({{"group", g}, {"frozen", frozen.count(g) > 0}, {"identical", identical}});
    }

    std::optional<ResolvedRecordFilter> rf;
    if (loaded.extra.contains("record_filter") && !loaded.extra["record_filter"].is_null())
        rf = ResolvedRecordFilter::from_json(loaded.extra["record_filter"]);
    save_checkpoint(dir / "checkpoint.mitst", model, checkpoint_extra(normalizer, frequencies, rule, rf));
    write_text_file(dir / "history.csv", history_csv(result.history));
    write_json_file(dir / "freeze_check.json", groups);
    const auto scored = score_dataset(model, pre, te);
    const auto report = compute_report(scored, model.config().num_classes, {});
    write_json_file(dir / "report_test.json", report.to_json());
    return finish("finetune", dir,
                  {dir / "checkpoint.mitst", dir / "history.csv", dir / "freeze_check.json", dir / "report_test.json"},
                  {{"seed", tc.seed},
                   {"pretrained_checkpoint", ckpt.string()},
                   {"pretrained_hash", loaded.file_hash},
                   {"freeze_spec", tc.freeze_spec},
                   {"history", history_json(result)},
                   {"macro_auroc", optional_to_json(report.macro_auroc)}});
}

}  // namespace mitst
