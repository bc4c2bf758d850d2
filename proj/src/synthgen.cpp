#include "mitst/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "mitst/random.hpp"

namespace mitst {

double EventKernel::operator()(double dt) const {
    if (dt < 0.0) return 0.0;
    return magnitude * (1.0 - std::exp(-dt / onset_minutes)) * std::exp(-dt / decay_minutes);
}

void GeneratorConfig::validate() const {
    auto positive = [](double v, const char* name) {
        if (!(v > 0.0)) throw InvalidInput(std::string("generator: ") + name + " must be positive");
    };
    auto non_negative = [](double v, const char* name) {
        if (!(v >= 0.0)) throw InvalidInput(std::string("generator: ") + name + " must be non-negative");
    };
    auto probability = [](double v, const char* name) {
        if (!(v >= 0.0 && v <= 1.0)) throw InvalidInput(std::string("generator: ") + name + " must lie in [0, 1]");
    };
    if (n_patients < 1) throw InvalidInput("generator: n_patients must be >= 1");
    probability(p_diabetic, "p_diabetic");
    probability(p_hypo_prone, "p_hypo_prone");
    probability(p_labile, "p_labile");
    probability(p_insulin_diabetic, "p_insulin_diabetic");
    probability(p_insulin_other, "p_insulin_other");
    probability(p_dextrose_hypo_prone, "p_dextrose_hypo_prone");
    probability(p_lab_outlier, "p_lab_outlier");
    if (p_diabetic + p_hypo_prone > 1.0) throw InvalidInput("generator: patient type probabilities exceed 1");
    positive(baseline_mgdl, "baseline_mgdl");
    positive(diabetic_baseline_mgdl, "diabetic_baseline_mgdl");
    positive(hypo_prone_baseline_mgdl, "hypo_prone_baseline_mgdl");
    non_negative(baseline_sd, "baseline_sd");
    non_negative(diabetic_baseline_sd, "diabetic_baseline_sd");
    non_negative(hypo_prone_baseline_sd, "hypo_prone_baseline_sd");
    positive(mean_reversion_per_minute, "mean_reversion_per_minute");
    if (mean_reversion_per_minute >= 1.0) throw InvalidInput("generator: mean_reversion_per_minute must be < 1");
    non_negative(latent_sd, "latent_sd");
    positive(labile_multiplier, "labile_multiplier");
    non_negative(noise_non_diabetic, "noise_non_diabetic");
    non_negative(noise_diabetic, "noise_diabetic");
    non_negative(noise_hypo_prone, "noise_hypo_prone");
    positive(insulin.onset_minutes, "insulin.onset_minutes");
    positive(insulin.decay_minutes, "insulin.decay_minutes");
    positive(dextrose.onset_minutes, "dextrose.onset_minutes");
    positive(dextrose.decay_minutes, "dextrose.decay_minutes");
    positive(min_stay_hours, "min_stay_hours");
    if (max_stay_hours < min_stay_hours) throw InvalidInput("generator: max_stay_hours < min_stay_hours");
    if (!(min_gap_minutes >= 5.0 && max_gap_minutes <= 600.0 && min_gap_minutes < max_gap_minutes))
        throw InvalidInput("generator: gap support must lie within [5, 600] minutes");
    positive(vitals_interval_minutes, "vitals_interval_minutes");
    positive(lab_interval_minutes, "lab_interval_minutes");
    if (target_prevalences) {
        double sum = 0.0;
        for (double p : *target_prevalences) {
            probability(p, "target_prevalences");
            sum += p;
        }
        if (std::abs(sum - 1.0) > 1e-6) throw InvalidInput("generator: target_prevalences must sum to 1");
    }
}

namespace {

json kernel_json(const EventKernel& k) {
    return {{"magnitude", k.magnitude}, {"onset_minutes", k.onset_minutes}, {"decay_minutes", k.decay_minutes}};
}

EventKernel kernel_from(const json& j, EventKernel k) {
    k.magnitude = j.value("magnitude", k.magnitude);
    k.onset_minutes = j.value("onset_minutes", k.onset_minutes);
    k.decay_minutes = j.value("decay_minutes", k.decay_minutes);
    return k;
}

}  // namespace

json prevalences_to_json(const std::optional<std::array<double, kNumClasses>>& p) {
    if (!p) return nullptr;
    json j = json::object();
    for (int c = 0; c < kNumClasses; ++c) j[class_name(static_cast<GlucoseClass>(c))] = (*p)[static_cast<std::size_t>(c)];
    return j;
}

std::optional<std::array<double, kNumClasses>> prevalences_from_json(const json& j) {
    if (j.is_null()) return std::nullopt;
    if (!j.is_object()) throw InvalidInput("target_prevalences must be an object keyed by class name, or null");
    std::array<double, kNumClasses> p{};
    for (int c = 0; c < kNumClasses; ++c) {
        const char* name = class_name(static_cast<GlucoseClass>(c));
        if (!j.contains(name)) throw InvalidInput(std::string("target_prevalences: missing class '") + name + "'");
        p[static_cast<std::size_t>(c)] = j.at(name).get<double>();
    }
    if (j.size() != kNumClasses) throw InvalidInput("target_prevalences: unexpected class name");
    return p;
}

json GeneratorConfig::to_json() const {
    json j{{"seed", seed},
           {"n_patients", n_patients},
           {"p_diabetic", p_diabetic},
           {"p_hypo_prone", p_hypo_prone},
           {"p_labile", p_labile},
           {"baseline_mgdl", baseline_mgdl},
           {"baseline_sd", baseline_sd},
           {"diabetic_baseline_mgdl", diabetic_baseline_mgdl},
           {"diabetic_baseline_sd", diabetic_baseline_sd},
           {"hypo_prone_baseline_mgdl", hypo_prone_baseline_mgdl},
           {"hypo_prone_baseline_sd", hypo_prone_baseline_sd},
           {"mean_reversion_per_minute", mean_reversion_per_minute},
           {"latent_sd", latent_sd},
           {"labile_multiplier", labile_multiplier},
           {"noise_non_diabetic", noise_non_diabetic},
           {"noise_diabetic", noise_diabetic},
           {"noise_hypo_prone", noise_hypo_prone},
           {"p_insulin_diabetic", p_insulin_diabetic},
           {"p_insulin_other", p_insulin_other},
           {"insulin", kernel_json(insulin)},
           {"p_dextrose_hypo_prone", p_dextrose_hypo_prone},
           {"dextrose", kernel_json(dextrose)},
           {"min_stay_hours", min_stay_hours},
           {"max_stay_hours", max_stay_hours},
           {"min_gap_minutes", min_gap_minutes},
           {"max_gap_minutes", max_gap_minutes},
           {"vitals_interval_minutes", vitals_interval_minutes},
           {"lab_interval_minutes", lab_interval_minutes},
           {"p_lab_outlier", p_lab_outlier}};
    j["target_prevalences"] = prevalences_to_json(target_prevalences);
    return j;
}

GeneratorConfig GeneratorConfig::from_json(const json& j) {
    if (!j.is_object()) throw InvalidInput("generator config must be a JSON object");
    const json known = GeneratorConfig{}.to_json();
    for (const auto& [k, _] : j.items())
        if (!known.contains(k)) throw InvalidInput("generator config: unknown key '" + k + "'");
    GeneratorConfig c;
    try {
        c.seed = j.value("seed", c.seed);
        c.n_patients = j.value("n_patients", c.n_patients);
        c.p_diabetic = j.value("p_diabetic", c.p_diabetic);
        c.p_hypo_prone = j.value("p_hypo_prone", c.p_hypo_prone);
        c.p_labile = j.value("p_labile", c.p_labile);
        c.baseline_mgdl = j.value("baseline_mgdl", c.baseline_mgdl);
        c.baseline_sd = j.value("baseline_sd", c.baseline_sd);
        c.diabetic_baseline_mgdl = j.value("diabetic_baseline_mgdl", c.diabetic_baseline_mgdl);
        c.diabetic_baseline_sd = j.value("diabetic_baseline_sd", c.diabetic_baseline_sd);
        c.hypo_prone_baseline_mgdl = j.value("hypo_prone_baseline_mgdl", c.hypo_prone_baseline_mgdl);
        c.hypo_prone_baseline_sd = j.value("hypo_prone_baseline_sd", c.hypo_prone_baseline_sd);
        c.mean_reversion_per_minute = j.value("mean_reversion_per_minute", c.mean_reversion_per_minute);
        c.latent_sd = j.value("latent_sd", c.latent_sd);
        c.labile_multiplier = j.value("labile_multiplier", c.labile_multiplier);
        c.noise_non_diabetic = j.value("noise_non_diabetic", c.noise_non_diabetic);
        c.noise_diabetic = j.value("noise_diabetic", c.noise_diabetic);
        c.noise_hypo_prone = j.value("noise_hypo_prone", c.noise_hypo_prone);
        c.p_insulin_diabetic = j.value("p_insulin_diabetic", c.p_insulin_diabetic);
        c.p_insulin_other = j.value("p_insulin_other", c.p_insulin_other);
        if (j.contains("insulin")) c.insulin = kernel_from(j["insulin"], c.insulin);
        c.p_dextrose_hypo_prone = j.value("p_dextrose_hypo_prone", c.p_dextrose_hypo_prone);
        if (j.contains("dextrose")) c.dextrose = kernel_from(j["dextrose"], c.dextrose);
        c.min_stay_hours = j.value("min_stay_hours", c.min_stay_hours);
        c.max_stay_hours = j.value("max_stay_hours", c.max_stay_hours);
        c.min_gap_minutes = j.value("min_gap_minutes", c.min_gap_minutes);
        c.max_gap_minutes = j.value("max_gap_minutes", c.max_gap_minutes);
        c.vitals_interval_minutes = j.value("vitals_interval_minutes", c.vitals_interval_minutes);
        c.lab_interval_minutes = j.value("lab_interval_minutes", c.lab_interval_minutes);
        c.p_lab_outlier = j.value("p_lab_outlier", c.p_lab_outlier);
        if (j.contains("target_prevalences")) c.target_prevalences = prevalences_from_json(j["target_prevalences"]);
    } catch (const json::exception& e) {
        throw InvalidInput(std::string("generator config: ") + e.what());
    }
    c.validate();
    return c;
}

namespace {

std::vector<std::string> with_reserved(std::vector<std::string> cats) {
    cats.insert(cats.begin(), {kUnknownCategory, kAbsentSourceCategory});
    return cats;
}

enum SourceIndex { kStatic = 0, kVitals = 1, kLabs = 2, kMeds = 3, kDiagnosis = 4 };

const std::vector<std::string> kOtherDiagnoses = {"sepsis", "cardiac arrest", "trauma", "pneumonia", "renal failure"};

std::string format_id(char prefix, int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%c%06d", prefix, index + 1);
    return buf;
}

double type_noise(const GeneratorConfig& c, PatientType t) {
    switch (t) {
        case PatientType::diabetic:
            return c.noise_diabetic;
        case PatientType::hypo_prone:
            return c.noise_hypo_prone;
        default:
            return c.noise_non_diabetic;
    }
}

const EventKernel& kernel_for(const GeneratorConfig& c, const std::string& drug) {
    static const EventKernel none{};
    if (drug == "insulin") return c.insulin;
    if (drug == "dextrose") return c.dextrose;
    return none;
}

std::vector<double> administrations(const EventRecord& rec) {
    const auto table = FrequencyTable::defaults();
    auto it = table.interval_minutes.find(rec.frequency);
    const double interval = it == table.interval_minutes.end() ? 0.0 : it->second;
    std::vector<double> out;
    if (interval <= 0.0 || rec.stop_offset < rec.start_offset) return {rec.start_offset};
    for (long k = 0;; ++k) {
        double at = rec.start_offset + static_cast<double>(k) * interval;
        if (at > rec.stop_offset) break;
        out.push_back(at);
    }
    return out;
}

TimePoint make_point(const SourceSchema& s, double offset) {
    TimePoint tp;
    tp.offset_minutes = offset;
    tp.numeric_values.assign(s.num_numeric(), 0.0);
    tp.numeric_missing.assign(s.num_numeric(), 1);
    for (const auto& f : s.categorical_features) tp.categorical_values.push_back(f.unknown_id());
    return tp;
}

void set_num(const SourceSchema& s, TimePoint& tp, const std::string& name, double v) {
    int j = s.numeric_index(name);
    tp.numeric_values[j] = v;
    tp.numeric_missing[j] = 0;
}

void set_cat(const SourceSchema& s, TimePoint& tp, const std::string& name, const std::string& v) {
    int j = s.categorical_index(name);
    int id = s.categorical_features[j].index_of(v);
    if (id < 0) throw Defect("category '" + v + "' missing from synthetic vocabulary of '" + name + "'");
    tp.categorical_values[j] = id;
}

}  // namespace

CohortSchema synthetic_schema() {
    CohortSchema schema;
    SourceSchema st;
    st.source_id = 1;
    st.source_name = "static";
    st.numeric_features = {{"age", std::nullopt}, {"weight_kg", std::nullopt}};
    st.categorical_features = {{"gender", with_reserved({"female", "male"})},
                               {"admission_type", with_reserved({"medical", "surgical", "emergency"})},
                               {"diabetes_history", with_reserved({"yes", "no"})}};
    st.embed_width_hint = 32;

    SourceSchema vit;
    vit.source_id = 2;
    vit.source_name = "vitals";
    vit.numeric_features = {{"heart_rate", std::nullopt},
                            {"mean_bp", std::nullopt},
                            {"resp_rate", std::nullopt},
                            {"temperature", std::nullopt},
                            {"spo2", std::nullopt}};
    vit.categorical_features = {{"rhythm", with_reserved({"sinus", "afib", "paced"})}};
    vit.embed_width_hint = 16;

    SourceSchema lab;
    lab.source_id = 3;
    lab.source_name = "labs";
    lab.numeric_features = {{"lab_result", std::string("lab_name")}};
    lab.categorical_features = {
        {"lab_name", with_reserved({"glucose", "potassium", "creatinine", "lactate", "hba1c"})}};
    lab.embed_width_hint = 32;
    lab.outlier_filter = true;

    SourceSchema med;
    med.source_id = 4;
    med.source_name = "medications";
    med.numeric_features = {{"dose", std::nullopt}};
    med.categorical_features = {
        {"drug", with_reserved({"insulin", "dextrose", "heparin", "antibiotic", "sedative"})},
        {"route", with_reserved({"iv", "sc", "po"})},
        {"frequency", with_reserved({"once", "q1h", "q2h", "every 120 min", "q4h", "q6h", "q8h", "q12h", "daily"})}};
    med.embed_width_hint = 32;
    med.expansion = ExpansionSpec{"frequency", "stop_offset"};

    SourceSchema dx;
    dx.source_id = 5;
    dx.source_name = "diagnosis";
    dx.categorical_features = {{"diagnosis", with_reserved({"diabetes mellitus", "liver failure", "sepsis",
                                                            "cardiac arrest", "trauma", "pneumonia",
                                                            "renal failure"})}};
    dx.embed_width_hint = 32;

    schema.sources = {st, vit, lab, med, dx};
    schema.validate();
    return schema;
}

PatientPlan plan_patient(const GeneratorConfig& c, int patient_index) {
    PatientPlan plan;
    plan.patient_id = format_id('P', patient_index);
    plan.stay_id = format_id('S', patient_index);
    std::mt19937_64 rng(derive_seed(c.seed, {hash_string(plan.patient_id)}));
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    const double u_type = unif(rng);
    if (u_type < c.p_diabetic)
        plan.type = PatientType::diabetic;
    else if (u_type >= 1.0 - c.p_hypo_prone)
        plan.type = PatientType::hypo_prone;
    plan.labile = unif(rng) < c.p_labile;
    plan.baseline_z = gauss(rng);

    const double hours = c.min_stay_hours + (c.max_stay_hours - c.min_stay_hours) * unif(rng);
    plan.stay_minutes = static_cast<int>(std::floor(hours * 60.0));

    const double theta = c.mean_reversion_per_minute;
    const double sd = c.latent_sd * (plan.labile ? c.labile_multiplier : 1.0);
    const double step_sd = sd * std::sqrt(2.0 * theta - theta * theta);
    plan.latent_deviation.resize(static_cast<std::size_t>(plan.stay_minutes) + 1);
    double x = sd * gauss(rng);
    for (auto& v : plan.latent_deviation) {
        v = x;
        x = (1.0 - theta) * x + step_sd * gauss(rng);
    }

    const double log_lo = std::log(c.min_gap_minutes);
    const double log_hi = std::log(c.max_gap_minutes);
    double t = 60.0 * unif(rng);
    while (t <= plan.stay_minutes) {
        plan.target_offsets.push_back(std::round(t));
        plan.measurement_noise_z.push_back(gauss(rng));
        t += std::exp(log_lo + (log_hi - log_lo) * unif(rng));
    }
    // Rounding to whole minutes can collide two readings; keep offsets strictly increasing.
    for (std::size_t i = 1; i < plan.target_offsets.size(); ++i)
        plan.target_offsets[i] = std::max(plan.target_offsets[i], plan.target_offsets[i - 1] + 1.0);

    auto regimen = [&](const std::string& drug, const std::string& freq, double dose_mean) {
        EventRecord rec;
        rec.drug = drug;
        rec.frequency = freq;
        rec.start_offset = std::round(plan.stay_minutes * unif(rng));
        rec.stop_offset = std::round(rec.start_offset + 720.0 + 2160.0 * unif(rng));
        rec.dose = std::max(0.2, dose_mean * (1.0 + 0.25 * gauss(rng)));
        plan.medications.push_back(rec);
    };
    const double u_insulin = unif(rng);
    const double u_dextrose = unif(rng);
    const bool insulin = plan.type == PatientType::diabetic ? u_insulin < c.p_insulin_diabetic
                                                            : u_insulin < c.p_insulin_other;
    if (insulin) regimen("insulin", "q6h", 2.0);
    if (plan.type == PatientType::hypo_prone && u_dextrose < c.p_dextrose_hypo_prone) regimen("dextrose", "q4h", 1.5);
    // Effect-free background medications.
    const int n_other = static_cast<int>(unif(rng) * 3.0);
    for (int k = 0; k < n_other; ++k) {
        static const std::vector<std::string> drugs = {"heparin", "antibiotic", "sedative"};
        static const std::vector<std::string> freqs = {"once", "q8h", "q12h", "daily"};
        EventRecord rec;
        rec.drug = drugs[static_cast<std::size_t>(unif(rng) * 3.0) % 3];
        rec.frequency = freqs[static_cast<std::size_t>(unif(rng) * 4.0) % 4];
        rec.start_offset = std::round(plan.stay_minutes * unif(rng));
        rec.stop_offset = std::round(rec.start_offset + 1440.0 * unif(rng));
        rec.dose = 1.0 + unif(rng);
        plan.medications.push_back(rec);
    }
    std::stable_sort(plan.medications.begin(), plan.medications.end(),
                     [](const auto& a, const auto& b) { return a.start_offset < b.start_offset; });
    plan.side_seed = rng();
    return plan;
}

double patient_baseline(const GeneratorConfig& c, const PatientPlan& plan) {
    switch (plan.type) {
        case PatientType::diabetic:
            return c.diabetic_baseline_mgdl + c.diabetic_baseline_sd * plan.baseline_z;
        case PatientType::hypo_prone:
            return c.hypo_prone_baseline_mgdl + c.hypo_prone_baseline_sd * plan.baseline_z;
        default:
            return c.baseline_mgdl + c.baseline_sd * plan.baseline_z;
    }
}

double event_effect(const GeneratorConfig& c, const PatientPlan& plan, double minute) {
    double total = 0.0;
    for (const auto& rec : plan.medications) {
        const auto& k = kernel_for(c, rec.drug);
        if (k.magnitude == 0.0) continue;
        for (double at : administrations(rec)) total += rec.dose * k(minute - at);
    }
    return total;
}

double latent_glucose(const GeneratorConfig& c, const PatientPlan& plan, double minute) {
    const auto idx = static_cast<std::size_t>(std::clamp(minute, 0.0, static_cast<double>(plan.stay_minutes)));
    return patient_baseline(c, plan) + plan.latent_deviation[idx] + event_effect(c, plan, minute);
}

Episode realize_episode(const GeneratorConfig& c, const PatientPlan& plan) {
    static const CohortSchema schema = synthetic_schema();
    const auto& S = schema.sources;
    Episode e;
    e.stay_id = plan.stay_id;
    e.patient_id = plan.patient_id;
    switch (plan.type) {
        case PatientType::diabetic:
            e.subgroup_tags.insert("diabetic");
            break;
        case PatientType::hypo_prone:
            e.subgroup_tags.insert("hypo_prone");
            break;
        default:
            e.subgroup_tags.insert("non_diabetic");
    }
    if (plan.labile) e.subgroup_tags.insert("labile");
    for (const auto& s : S) e.series.push_back({s.source_id, {}, false});

    const double baseline = patient_baseline(c, plan);
    const double noise_sd = type_noise(c, plan.type);
    for (std::size_t i = 0; i < plan.target_offsets.size(); ++i) {
        const double t = plan.target_offsets[i];
        const double v = latent_glucose(c, plan, t) + noise_sd * plan.measurement_noise_z[i];
        e.target_track.push_back({t, std::max(20.0, std::round(v * 10.0) / 10.0)});
    }

    std::mt19937_64 rng(plan.side_seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const bool diabetic = plan.type == PatientType::diabetic;
    const bool hypo_prone = plan.type == PatientType::hypo_prone;

    {  // static
        auto tp = make_point(S[kStatic], 0.0);
        set_num(S[kStatic], tp, "age", std::round(std::clamp(62.0 + (diabetic ? 6.0 : 0.0) + 14.0 * gauss(rng), 18.0, 95.0)));
        set_num(S[kStatic], tp, "weight_kg", std::round(10.0 * std::clamp(80.0 + (diabetic ? 12.0 : 0.0) + 15.0 * gauss(rng), 35.0, 200.0)) / 10.0);
        set_cat(S[kStatic], tp, "gender", unif(rng) < 0.5 ? "female" : "male");
        const double ua = unif(rng);
        set_cat(S[kStatic], tp, "admission_type", ua < 0.5 ? "medical" : (ua < 0.8 ? "surgical" : "emergency"));
        const double uh = unif(rng);
        if (uh < 0.9) set_cat(S[kStatic], tp, "diabetes_history", (diabetic ? uh < 0.8 : uh < 0.05) ? "yes" : "no");
        e.series[kStatic].time_points.push_back(tp);
    }
    {  // vitals
        const auto& s = S[kVitals];
        const bool afib = unif(rng) < 0.15;
        for (double t = 30.0 * unif(rng); t <= plan.stay_minutes; t += c.vitals_interval_minutes * (0.75 + 0.5 * unif(rng))) {
            auto tp = make_point(s, std::round(t));
            const double dev = latent_glucose(c, plan, t) - baseline;
            auto maybe = [&](const char* name, double v) {
                if (unif(rng) >= 0.05) set_num(s, tp, name, std::round(v * 10.0) / 10.0);
            };
            maybe("heart_rate", 82.0 + (hypo_prone ? 12.0 : 0.0) - 0.08 * dev + 9.0 * gauss(rng));
            maybe("mean_bp", 78.0 + 10.0 * gauss(rng));
            maybe("resp_rate", 18.0 + 3.5 * gauss(rng));
            maybe("temperature", 37.0 + 0.5 * gauss(rng));
            maybe("spo2", std::min(100.0, 96.0 + 2.0 * gauss(rng)));
            set_cat(s, tp, "rhythm", afib ? "afib" : (unif(rng) < 0.97 ? "sinus" : "paced"));
            e.series[kVitals].time_points.push_back(tp);
        }
    }
    {  // labs: glucose at every target reading plus sparse panels
        const auto& s = S[kLabs];
        std::vector<TimePoint> pts;
        for (const auto& r : e.target_track) {
            auto tp = make_point(s, r.offset_minutes);
            set_cat(s, tp, "lab_name", "glucose");
            set_num(s, tp, "lab_result", r.value);
            pts.push_back(tp);
        }
        if (unif(rng) < 0.75) {
            auto tp = make_point(s, std::round(30.0 + 90.0 * unif(rng)));
            set_cat(s, tp, "lab_name", "hba1c");
            set_num(s, tp, "lab_result", std::round(10.0 * (5.0 + (baseline - 100.0) / 28.0 + 0.35 * gauss(rng))) / 10.0);
            pts.push_back(tp);
        }
        for (double t = 60.0 * unif(rng); t <= plan.stay_minutes; t += c.lab_interval_minutes * (0.75 + 0.5 * unif(rng))) {
            struct Panel {
                const char* name;
                double mean, sd;
            };
            static const Panel panels[] = {{"potassium", 4.1, 0.45}, {"creatinine", 1.1, 0.4}, {"lactate", 1.6, 0.7}};
            for (const auto& p : panels) {
                auto tp = make_point(s, std::round(t));
                set_cat(s, tp, "lab_name", p.name);
                double v = std::max(0.1, p.mean + p.sd * gauss(rng));
                if (unif(rng) < c.p_lab_outlier) v *= 25.0;
                set_num(s, tp, "lab_result", std::round(v * 100.0) / 100.0);
                pts.push_back(tp);
            }
        }
        std::stable_sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) { return a.offset_minutes < b.offset_minutes; });
        e.series[kLabs].time_points = std::move(pts);
    }
    {  // medications: one record per order; expansion happens in preprocessing
        const auto& s = S[kMeds];
        for (const auto& rec : plan.medications) {
            auto tp = make_point(s, rec.start_offset);
            set_cat(s, tp, "drug", rec.drug);
            set_cat(s, tp, "route", rec.drug == "insulin" ? "sc" : (rec.drug == "dextrose" ? "iv" : (unif(rng) < 0.5 ? "iv" : "po")));
            set_cat(s, tp, "frequency", rec.frequency);
            set_num(s, tp, "dose", std::round(rec.dose * 100.0) / 100.0);
            tp.stop_offset = rec.stop_offset;
            e.series[kMeds].time_points.push_back(tp);
        }
    }
    {  // diagnosis
        const auto& s = S[kDiagnosis];
        if (unif(rng) < 0.9) {
            std::vector<std::string> dx;
            if (diabetic && unif(rng) < 0.8) dx.push_back("diabetes mellitus");
            if (hypo_prone && unif(rng) < 0.8) dx.push_back("liver failure");
            const int n_other = 1 + static_cast<int>(unif(rng) * 2.0);
            for (int k = 0; k < n_other; ++k)
                dx.push_back(kOtherDiagnoses[static_cast<std::size_t>(unif(rng) * 5.0) % kOtherDiagnoses.size()]);
            for (std::size_t k = 0; k < dx.size(); ++k) {
                auto tp = make_point(s, std::round(k * 20.0 + 60.0 * unif(rng)));
                set_cat(s, tp, "diagnosis", dx[k]);
                e.series[kDiagnosis].time_points.push_back(tp);
            }
            std::stable_sort(e.series[kDiagnosis].time_points.begin(), e.series[kDiagnosis].time_points.end(),
                             [](const auto& a, const auto& b) { return a.offset_minutes < b.offset_minutes; });
        }
    }
    for (auto& series : e.series) series.present = !series.time_points.empty();
    return e;
}

Episode generate_episode(const GeneratorConfig& config, int patient_index) {
    return realize_episode(config, plan_patient(config, patient_index));
}

LocfHardness locf_hardness_report(const std::vector<LabeledExample>& examples, const LabelRule& rule) {
    if (examples.empty()) throw InvalidInput("locf_hardness_report: empty example set");
    LocfHardness h;
    std::size_t changed = 0;
    for (const auto& ex : examples) {
        const int cur = static_cast<int>(classify_target(ex.current_target_value, rule));
        const int nxt = static_cast<int>(ex.label);
        ++h.transitions[cur][nxt];
        if (cur != nxt) ++changed;
    }
    h.transition_rate = static_cast<double>(changed) / static_cast<double>(examples.size());
    double sum = 0.0;
    int present = 0;
    for (int k = 0; k < kNumClasses; ++k) {
        std::size_t total = 0;
        for (int j = 0; j < kNumClasses; ++j) total += h.transitions[j][k];
        if (total == 0) continue;
        h.recall[k] = static_cast<double>(h.transitions[k][k]) / static_cast<double>(total);
        sum += *h.recall[k];
        ++present;
    }
    if (present > 0) h.balanced_accuracy = sum / present;
    return h;
}

json CohortManifest::to_json() const {
    json trans = json::array();
    for (const auto& row : locf.transitions) trans.push_back(row);
    json recall = json::array();
    for (const auto& r : locf.recall) recall.push_back(r ? json(*r) : json(nullptr));
    json j{{"seed", seed},
           {"n_patients", n_patients},
           {"n_examples", n_examples},
           {"class_order", {"hypo", "euglycemia", "hyper"}},
           {"prevalences", prevalences},
           {"diabetic_baseline_mgdl", diabetic_baseline_mgdl},
           {"hypo_prone_baseline_mgdl", hypo_prone_baseline_mgdl},
           {"transition_matrix", trans},
           {"transition_rate", locf.transition_rate},
           {"locf_recall", recall},
           {"locf_balanced_accuracy", locf.balanced_accuracy ? json(*locf.balanced_accuracy) : json(nullptr)}};
    j["target_prevalences"] = prevalences_to_json(target_prevalences);
    return j;
}

namespace {

struct CalibrationSample {
    PatientType type;
    double value_minus_baseline_mean;  // next reading with the type mean removed
};

std::array<double, kNumClasses> prevalences_for(const std::vector<CalibrationSample>& samples,
                                                const GeneratorConfig& c) {
    std::array<double, kNumClasses> counts{};
    const LabelRule rule;
    for (const auto& s : samples) {
        double mean = s.type == PatientType::diabetic     ? c.diabetic_baseline_mgdl
                      : s.type == PatientType::hypo_prone ? c.hypo_prone_baseline_mgdl
                                                          : c.baseline_mgdl;
        double v = std::max(20.0, s.value_minus_baseline_mean + mean);
        counts[static_cast<int>(classify_target(v, rule))] += 1.0;
    }
    for (auto& x : counts) x /= std::max<double>(1.0, static_cast<double>(samples.size()));
    return counts;
}

// Both prevalences are monotone in the corresponding type mean for a fixed
// random stream, so bisection on each knob converges.
void calibrate(GeneratorConfig& c, const std::vector<PatientPlan>& plans) {
    const auto& target = *c.target_prevalences;
    std::vector<CalibrationSample> samples;
    const LabelRule rule;
    for (const auto& plan : plans) {
        const double mean = plan.type == PatientType::diabetic     ? c.diabetic_baseline_mgdl
                            : plan.type == PatientType::hypo_prone ? c.hypo_prone_baseline_mgdl
                                                                   : c.baseline_mgdl;
        const auto e = realize_episode(c, plan);
        for (const auto& ex : build_examples(e, 0, rule)) {
            // Undo the clamp-free part of the reading; the 20 mg/dL floor only
            // ever touches values that are hypo either way.
            samples.push_back({plan.type, ex.next_target_value - mean});
        }
    }
    if (samples.empty()) return;
    auto bisect = [&](double& knob, int cls, bool increasing, double lo, double hi) {
        for (int it = 0; it < 40; ++it) {
            knob = 0.5 * (lo + hi);
            const double p = prevalences_for(samples, c)[cls];
            if ((p < target[cls]) == increasing)
                lo = knob;
            else
                hi = knob;
        }
        knob = 0.5 * (lo + hi);
    };
    for (int round = 0; round < 4; ++round) {
        bisect(c.diabetic_baseline_mgdl, static_cast<int>(GlucoseClass::hyper), true, 80.0, 400.0);
        bisect(c.hypo_prone_baseline_mgdl, static_cast<int>(GlucoseClass::hypo), false, 20.0, 200.0);
    }
}

}  // namespace

GeneratedCohort generate_cohort(const GeneratorConfig& config) {
    config.validate();
    GeneratedCohort out;
    out.effective_config = config;
    std::vector<PatientPlan> plans;
    plans.reserve(static_cast<std::size_t>(config.n_patients));
    for (int i = 0; i < config.n_patients; ++i) plans.push_back(plan_patient(config, i));
    if (config.target_prevalences) calibrate(out.effective_config, plans);

    out.cohort.schema = synthetic_schema();
    std::vector<LabeledExample> examples;
    for (std::size_t i = 0; i < plans.size(); ++i) {
        out.cohort.episodes.push_back(realize_episode(out.effective_config, plans[i]));
        validate_episode(out.cohort.schema, out.cohort.episodes.back());
        auto ex = build_examples(out.cohort.episodes.back(), i);
        examples.insert(examples.end(), ex.begin(), ex.end());
    }

    auto& m = out.manifest;
    m.seed = config.seed;
    m.n_patients = config.n_patients;
    m.n_examples = examples.size();
    m.target_prevalences = config.target_prevalences;
    m.diabetic_baseline_mgdl = out.effective_config.diabetic_baseline_mgdl;
    m.hypo_prone_baseline_mgdl = out.effective_config.hypo_prone_baseline_mgdl;
    if (!examples.empty()) {
        for (const auto& ex : examples) m.prevalences[static_cast<int>(ex.label)] += 1.0;
        for (auto& p : m.prevalences) p /= static_cast<double>(examples.size());
        m.locf = locf_hardness_report(examples);
    }
    return out;
}

}  // namespace mitst
