#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mitst/data_model.hpp"
#include "mitst/io.hpp"
#include "mitst/preprocess.hpp"

namespace mitst {

enum class PatientType { non_diabetic, diabetic, hypo_prone };

/// Lagged event effect: magnitude * (1 - exp(-dt/onset)) * exp(-dt/decay), dt >= 0.
struct EventKernel {
    double magnitude = 0.0;  // signed, mg/dL per unit dose
    double onset_minutes = 30.0;
    double decay_minutes = 600.0;

    double operator()(double dt_minutes) const;
};

struct GeneratorConfig {
    std::uint64_t seed = 7;
    int n_patients = 200;

    double p_diabetic = 0.46;
    double p_hypo_prone = 0.03;
    double p_labile = 0.2;

    double baseline_mgdl = 125.0;
    double baseline_sd = 10.0;
    double diabetic_baseline_mgdl = 195.0;
    double diabetic_baseline_sd = 15.0;
    double hypo_prone_baseline_mgdl = 64.0;
    double hypo_prone_baseline_sd = 3.0;

    // Ornstein-Uhlenbeck latent deviation, discretized per minute.
    double mean_reversion_per_minute = 1.0 / 240.0;
    double latent_sd = 5.0;  // stationary standard deviation
    double labile_multiplier = 2.5;

    double noise_non_diabetic = 8.0;
    double noise_diabetic = 40.0;
    double noise_hypo_prone = 18.0;

    double p_insulin_diabetic = 0.5;
    double p_insulin_other = 0.02;
    EventKernel insulin{-12.0, 30.0, 600.0};
    double p_dextrose_hypo_prone = 0.6;
    EventKernel dextrose{8.0, 20.0, 240.0};

    double min_stay_hours = 24.0;
    double max_stay_hours = 72.0;
    double min_gap_minutes = 5.0;
    double max_gap_minutes = 600.0;
    double vitals_interval_minutes = 60.0;
    double lab_interval_minutes = 480.0;
    double p_lab_outlier = 0.002;

    // When set, generate_cohort shifts the type baselines until the example
    // class prevalences (hypo, euglycemia, hyper) match these targets.
    std::optional<std::array<double, kNumClasses>> target_prevalences =
        std::array<double, kNumClasses>{0.019, 0.749, 0.232};

    void validate() const;
    json to_json() const;
    static GeneratorConfig from_json(const json& j);
};

/// Object keyed by class name; null when unset.
json prevalences_to_json(const std::optional<std::array<double, kNumClasses>>& p);
std::optional<std::array<double, kNumClasses>> prevalences_from_json(const json& j);

struct EventRecord {
    std::string drug;
    double start_offset = 0.0;
    double stop_offset = 0.0;
    std::string frequency;
    double dose = 1.0;
};

/// Every random quantity of one patient, drawn before any glucose value is
/// computed so that baselines and kernel magnitudes can change without
/// disturbing the random stream.
struct PatientPlan {
    std::string patient_id;
    std::string stay_id;
    PatientType type = PatientType::non_diabetic;
    bool labile = false;
    double baseline_z = 0.0;
    int stay_minutes = 0;
    std::vector<double> latent_deviation;  // per minute, excludes the baseline
    std::vector<double> target_offsets;
    std::vector<double> measurement_noise_z;
    std::vector<EventRecord> medications;
    std::uint64_t side_seed = 0;  // vitals, labs, static, diagnosis
};

CohortSchema synthetic_schema();

PatientPlan plan_patient(const GeneratorConfig& config, int patient_index);
double patient_baseline(const GeneratorConfig& config, const PatientPlan& plan);
double event_effect(const GeneratorConfig& config, const PatientPlan& plan, double minute);
/// Noise-free latent glucose at `minute` (baseline + OU deviation + events).
double latent_glucose(const GeneratorConfig& config, const PatientPlan& plan, double minute);
Episode realize_episode(const GeneratorConfig& config, const PatientPlan& plan);

Episode generate_episode(const GeneratorConfig& config, int patient_index);

struct LocfHardness {
    std::array<std::array<std::size_t, kNumClasses>, kNumClasses> transitions{};  // [current][next]
    double transition_rate = 0.0;
    std::optional<double> balanced_accuracy;  // mean recall over classes present
    std::array<std::optional<double>, kNumClasses> recall{};
};

LocfHardness locf_hardness_report(const std::vector<LabeledExample>& examples, const LabelRule& rule = {});

struct CohortManifest {
    std::uint64_t seed = 0;
    int n_patients = 0;
    std::size_t n_examples = 0;
    std::array<double, kNumClasses> prevalences{};
    std::optional<std::array<double, kNumClasses>> target_prevalences;
    double diabetic_baseline_mgdl = 0.0;
    double hypo_prone_baseline_mgdl = 0.0;
    LocfHardness locf;

    json to_json() const;
};

struct GeneratedCohort {
    Cohort cohort;
    CohortManifest manifest;
    GeneratorConfig effective_config;  // after calibration
};

GeneratedCohort generate_cohort(const GeneratorConfig& config);

}  // namespace mitst
