#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "mitst/model.hpp"
#include "mitst/preprocess.hpp"

namespace fixtures {

using namespace mitst;

inline std::vector<std::string> vocab(std::vector<std::string> cats) {
    cats.insert(cats.begin(), {kUnknownCategory, kAbsentSourceCategory});
    return cats;
}

/// Three sources: mixed, numeric-only, categorical-only.
inline CohortSchema tiny_schema() {
    CohortSchema s;
    SourceSchema a;
    a.source_id = 1;
    a.source_name = "alpha";
    a.numeric_features = {{"a1", std::nullopt}, {"a2", std::nullopt}};
    a.categorical_features = {{"ac", vocab({"x", "y", "z"})}};
    a.embed_width_hint = 4;
    SourceSchema b;
    b.source_id = 2;
    b.source_name = "beta";
    b.numeric_features = {{"b1", std::nullopt}, {"b2", std::nullopt}, {"b3", std::nullopt}};
    b.embed_width_hint = 4;
    SourceSchema g;
    g.source_id = 3;
    g.source_name = "gamma";
    g.categorical_features = {{"g1", vocab({"p", "q"})}, {"g2", vocab({"r", "s", "t"})}};
    g.embed_width_hint = 4;
    s.sources = {a, b, g};
    s.validate();
    return s;
}

inline ModelConfig tiny_config() {
    ModelConfig c;
    c.depth = 1;
    c.heads = 1;
    c.head_dim = 4;
    c.embed_widths = {4, 4, 4};
    c.joint_width = 4;
    c.fusion_width = 4;
    c.dropout = 0.0;
    c.max_seq_len = 16;
    return c;
}

inline TimePoint random_point(const SourceSchema& src, double offset, std::mt19937_64& rng) {
    std::normal_distribution<double> z(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    TimePoint tp;
    tp.offset_minutes = offset;
    for (int j = 0; j < src.num_numeric(); ++j) {
        const bool missing = u(rng) < 0.2;
        tp.numeric_values.push_back(missing ? 0.0 : z(rng));
        tp.numeric_missing.push_back(missing ? 1 : 0);
    }
    for (const auto& f : src.categorical_features) {
        std::uniform_int_distribution<int> pick(0, static_cast<int>(f.vocabulary.size()) - 1);
        tp.categorical_values.push_back(pick(rng));
    }
    return tp;
}

/// Owns per-source time points and exposes them as a model input.
struct Sample {
    std::vector<std::vector<TimePoint>> sources;

    ModelInput input() const {
        ModelInput in;
        for (const auto& s : sources) in.sources.emplace_back(s.data(), s.size());
        return in;
    }
};

inline Sample random_sample(const CohortSchema& schema, std::mt19937_64& rng, int max_points = 6) {
    std::uniform_int_distribution<int> len(1, max_points);
    std::uniform_real_distribution<double> gap(1.0, 240.0);
    Sample s;
    for (const auto& src : schema.sources) {
        std::vector<TimePoint> pts;
        double t = gap(rng);
        const int n = len(rng);
        for (int i = 0; i < n; ++i) {
            pts.push_back(random_point(src, t, rng));
            t += gap(rng);
        }
        s.sources.push_back(std::move(pts));
    }
    return s;
}

inline double loss_value(const Model& model, const ModelInput& in, int label) {
    ag::Tape tape(false);
    GraphContext ctx(tape, model);
    return ag::softmax_cross_entropy(model.forward(ctx, in).logits, label).value()(0, 0);
}

struct GradientCheck {
    std::map<std::string, double> worst_by_group;
    std::size_t entries = 0;
    double worst() const {
        double w = 0.0;
        for (const auto& [_, v] : worst_by_group) w = std::max(w, v);
        return w;
    }
};

/// Central differences on every entry of every parameter tensor.
/// Error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
inline GradientCheck finite_difference_check(Model& model, const ModelInput& in, int label, double h = 1e-5,
                                             double floor = 1e-6) {
    ag::Tape tape;
    GraphContext ctx(tape, model);
    tape.backward(ag::softmax_cross_entropy(model.forward(ctx, in).logits, label));
    std::vector<const Matrix*> analytic(model.params().size(), nullptr);
    for (auto [idx, g] : tape.parameter_grads()) analytic[static_cast<std::size_t>(idx)] = g;

    GradientCheck out;
    for (std::size_t p = 0; p < model.params().size(); ++p) {
        auto& tensor = model.params()[p];
        double& worst = out.worst_by_group[tensor.group];
        for (Eigen::Index k = 0; k < tensor.value.size(); ++k) {
            const double old = tensor.value.data()[k];
            tensor.value.data()[k] = old + h;
            const double up = loss_value(model, in, label);
            tensor.value.data()[k] = old - h;
            const double down = loss_value(model, in, label);
            tensor.value.data()[k] = old;
            const double numeric = (up - down) / (2.0 * h);
            const double a = analytic[p] && analytic[p]->size() ? analytic[p]->data()[k] : 0.0;
            const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
            worst = std::max(worst, err);
            ++out.entries;
        }
    }
    return out;
}

// ---------------------------------------------------------------- metric oracles

/// Pairwise enumeration: P(positive outranks negative), ties count half.
inline std::optional<double> brute_auroc(const std::vector<double>& s, const std::vector<int>& y) {
    double wins = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (!y[i]) continue;
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (y[j]) continue;
            ++pairs;
            wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
        }
    }
    if (pairs == 0) return std::nullopt;
    return wins / static_cast<double>(pairs);
}

/// Every distinct score as a threshold (score >= t is positive), recounted from scratch.
inline std::optional<double> brute_auprc(const std::vector<double>& s, const std::vector<int>& y) {
    const auto positives = static_cast<std::size_t>(std::count(y.begin(), y.end(), 1));
    if (positives == 0) return std::nullopt;
    std::set<double, std::greater<>> thresholds(s.begin(), s.end());
    double area = 0.0, prev_recall = 0.0;
    for (double t : thresholds) {
        std::size_t tp = 0, called = 0;
        for (std::size_t i = 0; i < s.size(); ++i)
            if (s[i] >= t) {
                ++called;
                tp += y[i] == 1;
            }
        const double recall = static_cast<double>(tp) / static_cast<double>(positives);
        area += (recall - prev_recall) * static_cast<double>(tp) / static_cast<double>(called);
        prev_recall = recall;
    }
    return area;
}

struct BruteCutpoint {
    double threshold;
    double sensitivity;
    double specificity;
};

/// Observed scores plus both infinities; maximize sens + spec, prefer the higher threshold.
inline BruteCutpoint brute_cutpoint(const std::vector<double>& s, const std::vector<int>& y) {
    const double inf = std::numeric_limits<double>::infinity();
    std::set<double, std::greater<>> cands(s.begin(), s.end());
    cands.insert(inf);
    cands.insert(-inf);
    const auto P = static_cast<long long>(std::count(y.begin(), y.end(), 1));
    const auto N = static_cast<long long>(y.size()) - P;
    BruteCutpoint best{0, 0, 0};
    long long best_num = -1;
    for (double t : cands) {
        long long tp = 0, tn = 0;
        for (std::size_t i = 0; i < s.size(); ++i) {
            const bool call = s[i] >= t;
            tp += call && y[i] == 1;
            tn += !call && y[i] == 0;
        }
        // (tp/P + tn/N) * P * N, with an empty class contributing zero.
        const long long num = (P ? tp * std::max(N, 1LL) : 0) + (N ? tn * std::max(P, 1LL) : 0);
        if (num > best_num) {
            best_num = num;
            best = {t, P ? static_cast<double>(tp) / static_cast<double>(P) : 0.0,
                    N ? static_cast<double>(tn) / static_cast<double>(N) : 0.0};
        }
    }
    return best;
}

/// Random scores with deliberate ties; both labels present.
inline void random_scored(std::mt19937_64& rng, std::vector<double>& s, std::vector<int>& y, std::size_t max_n = 100) {
    std::uniform_int_distribution<std::size_t> size(2, max_n);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const std::size_t n = size(rng);
    const bool coarse = u(rng) < 0.5;
    s.assign(n, 0.0);
    y.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        s[i] = coarse ? std::round(u(rng) * 8.0) / 8.0 : u(rng);
        y[i] = u(rng) < 0.35 ? 1 : 0;
    }
    y[0] = 1;
    y[1] = 0;
}

}  // namespace fixtures
