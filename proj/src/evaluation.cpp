#include "mitst/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "mitst/preprocess.hpp"
#include "mitst/random.hpp"

namespace mitst {

namespace {

std::optional<double> ratio(std::size_t num, std::size_t den) {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
}

void check_sizes(std::size_t a, std::size_t b) {
    if (a != b) throw InvalidInput("scores and truths differ in length");
}

std::optional<double> mean_if_all(const std::vector<std::optional<double>>& xs) {
    if (xs.empty()) return std::nullopt;
    double s = 0.0;
    for (const auto& x : xs) {
        if (!x) return std::nullopt;
        s += *x;
    }
    return s / static_cast<double>(xs.size());
}

}  // namespace

BinaryMetrics binary_metrics_from_counts(std::size_t tp, std::size_t fp, std::size_t tn, std::size_t fn) {
    BinaryMetrics m{tp, fp, tn, fn, {}, {}, {}, {}};
    m.ppv = ratio(tp, tp + fp);
    m.npv = ratio(tn, tn + fn);
    m.sensitivity = ratio(tp, tp + fn);
    m.specificity = ratio(tn, tn + fp);
    return m;
}

BinaryMetrics binary_metrics(std::span<const int> predicted, std::span<const int> truths, int positive_class) {
    check_sizes(predicted.size(), truths.size());
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    for (std::size_t i = 0; i < truths.size(); ++i) {
        const bool p = predicted[i] == positive_class;
        const bool t = truths[i] == positive_class;
        tp += p && t;
        fp += p && !t;
        tn += !p && !t;
        fn += !p && t;
    }
    return binary_metrics_from_counts(tp, fp, tn, fn);
}

std::optional<double> auroc(std::span<const double> scores, std::span<const int> truths) {
    check_sizes(scores.size(), truths.size());
    const std::size_t n = scores.size();
    std::size_t n_pos = 0;
    for (int t : truths) n_pos += t != 0;
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) return std::nullopt;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
        for (std::size_t k = i; k < j; ++k)
            if (truths[order[k]] != 0) rank_sum += avg_rank;
        i = j;
    }
    const double np = static_cast<double>(n_pos);
    const double u = rank_sum - np * (np + 1.0) / 2.0;
    return u / (np * static_cast<double>(n_neg));
}

std::optional<double> auprc(std::span<const double> scores, std::span<const int> truths) {
    check_sizes(scores.size(), truths.size());
    const std::size_t n = scores.size();
    std::size_t n_pos = 0;
    for (int t : truths) n_pos += t != 0;
    if (n_pos == 0) return std::nullopt;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
    double area = 0.0;
    double prev_recall = 0.0;
    std::size_t tp = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) {
            tp += truths[order[j]] != 0;
            ++j;
        }
        const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
        const double precision = static_cast<double>(tp) / static_cast<double>(j);
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    return area;
}

Cutpoint select_cutpoint(std::span<const double> scores, std::span<const int> truths) {
    check_sizes(scores.size(), truths.size());
    const std::size_t n = scores.size();
    std::size_t n_pos = 0;
    for (int t : truths) n_pos += t != 0;
    const std::size_t n_neg = n - n_pos;
    auto sens_of = [&](std::size_t tp) { return n_pos ? static_cast<double>(tp) / static_cast<double>(n_pos) : 0.0; };
    auto spec_of = [&](std::size_t fp) {
        return n_neg ? static_cast<double>(n_neg - fp) / static_cast<double>(n_neg) : 0.0;
    };

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });

    // sens + spec scaled by n_pos * n_neg, compared exactly.
    auto key = [&](std::size_t tp_, std::size_t fp_) {
        return (n_pos ? tp_ * std::max<std::size_t>(n_neg, 1) : 0) +
               (n_neg ? (n_neg - fp_) * std::max<std::size_t>(n_pos, 1) : 0);
    };
    // Walk thresholds from +inf downward; strict improvement keeps the higher threshold on ties.
    Cutpoint best{kInf, sens_of(0), spec_of(0)};
    std::size_t best_key = key(0, 0);
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) {
            if (truths[order[j]] != 0)
                ++tp;
            else
                ++fp;
            ++j;
        }
        if (key(tp, fp) > best_key) {
            best_key = key(tp, fp);
            best = {scores[order[i]], sens_of(tp), spec_of(fp)};
        }
        i = j;
    }
    if (key(n_pos, n_neg) > best_key) best = {-kInf, sens_of(n_pos), spec_of(n_neg)};
    return best;
}

GlucoseClass locf_predict(double current_target_value, const LabelRule& rule) {
    return classify_target(current_target_value, rule);
}

GlucoseClass locf_predict(const LabeledExample& example, const LabelRule& rule) {
    return locf_predict(example.current_target_value, rule);
}

std::optional<double> balanced_accuracy(std::span<const int> predicted, std::span<const int> truths,
                                        int num_classes) {
    check_sizes(predicted.size(), truths.size());
    double total = 0.0;
    int present = 0;
    for (int c = 0; c < num_classes; ++c) {
        std::size_t pos = 0, hit = 0;
        for (std::size_t i = 0; i < truths.size(); ++i) {
            if (truths[i] != c) continue;
            ++pos;
            hit += predicted[i] == c;
        }
        if (pos == 0) continue;
        total += static_cast<double>(hit) / static_cast<double>(pos);
        ++present;
    }
    if (present == 0) return std::nullopt;
    return total / present;
}

int argmax(std::span<const double> scores) {
    if (scores.empty()) throw InvalidInput("argmax of an empty score vector");
    return static_cast<int>(std::max_element(scores.begin(), scores.end()) - scores.begin());
}

std::vector<ConfidenceInterval> bootstrap_ci_multi(const IndexMetrics& metrics, std::size_t n, int resamples,
                                                   std::uint64_t seed) {
    if (resamples < 1) throw InvalidInput("bootstrap needs at least one resample");
    if (n == 0) throw InvalidInput("bootstrap over an empty example set");
    std::mt19937_64 rng(derive_seed(seed, {hash_string("bootstrap")}));
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::vector<std::vector<double>> values;
    std::vector<std::size_t> idx(n);
    std::size_t redrawn = 0;
    const std::size_t max_attempts = static_cast<std::size_t>(resamples) * 100;
    std::size_t attempts = 0;
    int accepted = 0;
    while (accepted < resamples) {
        if (++attempts > max_attempts)
            throw std::runtime_error("bootstrap: metric undefined on too many resamples (" + std::to_string(redrawn) +
                                     ")");
        for (auto& i : idx) i = pick(rng);
        const auto v = metrics(idx);
        if (!v) {
            ++redrawn;
            continue;
        }
        if (values.empty()) values.resize(v->size());
        if (v->size() != values.size()) throw Defect("bootstrap metric count changed between resamples");
        for (std::size_t k = 0; k < v->size(); ++k) values[k].push_back((*v)[k]);
        ++accepted;
    }
    std::vector<ConfidenceInterval> out;
    for (auto& vs : values) out.push_back({quantile(vs, 0.025), quantile(vs, 0.975), redrawn});
    return out;
}

ConfidenceInterval bootstrap_ci(const ExampleMetric& metric, std::span<const ScoredExample> examples, int resamples,
                                std::uint64_t seed) {
    std::vector<ScoredExample> sample;
    const auto cis = bootstrap_ci_multi(
        [&](std::span<const std::size_t> idx) -> std::optional<std::vector<double>> {
            sample.clear();
            for (auto i : idx) sample.push_back(examples[i]);
            const auto v = metric(sample);
            if (!v) return std::nullopt;
            return std::vector<double>{*v};
        },
        examples.size(), resamples, seed);
    return cis.front();
}

double permutation_test(const ScoreMetric& metric, std::span<const double> scores_a, std::span<const double> scores_b,
                        std::span<const int> truths, int permutations, std::uint64_t seed) {
    check_sizes(scores_a.size(), truths.size());
    check_sizes(scores_b.size(), truths.size());
    if (permutations < 1) throw InvalidInput("permutation test needs at least one permutation");
    const auto ma = metric(scores_a, truths);
    const auto mb = metric(scores_b, truths);
    if (!ma || !mb) throw InvalidInput("permutation test: metric undefined on the observed data");
    const double observed = std::abs(*ma - *mb);
    std::mt19937_64 rng(derive_seed(seed, {hash_string("permutation")}));
    std::bernoulli_distribution coin(0.5);
    std::vector<double> a(scores_a.begin(), scores_a.end());
    std::vector<double> b(scores_b.begin(), scores_b.end());
    std::size_t extreme = 0;
    const double tol = 1e-12 * std::max(1.0, observed);
    for (int p = 0; p < permutations; ++p) {
        for (std::size_t i = 0; i < a.size(); ++i) {
            const bool swap = coin(rng);
            a[i] = swap ? scores_b[i] : scores_a[i];
            b[i] = swap ? scores_a[i] : scores_b[i];
        }
        const auto pa = metric(a, truths);
        const auto pb = metric(b, truths);
        if (!pa || !pb) continue;
        if (std::abs(*pa - *pb) >= observed - tol) ++extreme;
    }
    return static_cast<double>(1 + extreme) / static_cast<double>(permutations + 1);
}

std::size_t flagged_count(double fraction, std::size_t n) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) throw InvalidInput("risk fraction must lie in [0, 1]");
    const double k = std::ceil(fraction * static_cast<double>(n) - 1e-9);
    return std::min(n, static_cast<std::size_t>(std::max(0.0, k)));
}

namespace {

std::vector<std::size_t> rank_by_class_score(std::span<const ScoredExample> examples, int cls) {
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) {
        return examples[a].scores.at(static_cast<std::size_t>(cls)) >
               examples[b].scores.at(static_cast<std::size_t>(cls));
    });
    return order;
}

void check_fractions(std::span<const double> fractions) {
    for (std::size_t i = 0; i < fractions.size(); ++i) {
        if (!(fractions[i] >= 0.0 && fractions[i] <= 1.0)) throw InvalidInput("risk fraction must lie in [0, 1]");
        if (i > 0 && fractions[i] < fractions[i - 1]) throw InvalidInput("risk fractions must be ascending");
    }
}

}  // namespace

std::vector<CurvePoint> fp_severity_curve(std::span<const ScoredExample> examples, int cls,
                                          std::span<const double> fractions) {
    check_fractions(fractions);
    const auto order = rank_by_class_score(examples, cls);
    std::vector<CurvePoint> out;
    for (double f : fractions) {
        const std::size_t k = flagged_count(f, examples.size());
        double sum = 0.0;
        std::size_t n_fp = 0;
        for (std::size_t i = 0; i < k; ++i) {
            const auto& e = examples[order[i]];
            if (e.truth == cls) continue;
            sum += e.next_target_value;
            ++n_fp;
        }
        out.push_back({f, n_fp ? std::optional<double>(sum / static_cast<double>(n_fp)) : std::nullopt});
    }
    return out;
}

std::vector<CurvePoint> relative_risk_curve(std::span<const ScoredExample> examples, int cls,
                                            std::span<const double> fractions) {
    check_fractions(fractions);
    const auto order = rank_by_class_score(examples, cls);
    const std::size_t n = examples.size();
    std::size_t total_events = 0;
    for (const auto& e : examples) total_events += e.truth == cls;
    std::vector<CurvePoint> out;
    for (double f : fractions) {
        const std::size_t k = flagged_count(f, n);
        std::size_t flagged_events = 0;
        for (std::size_t i = 0; i < k; ++i) flagged_events += examples[order[i]].truth == cls;
        const std::size_t unflagged_events = total_events - flagged_events;
        CurvePoint p{f, std::nullopt};
        if (k > 0 && k < n) {
            const double rate_in = static_cast<double>(flagged_events) / static_cast<double>(k);
            const double rate_out = static_cast<double>(unflagged_events) / static_cast<double>(n - k);
            if (rate_out == 0.0)
                p.value = rate_in > 0.0 ? std::optional<double>(kInf) : std::nullopt;
            else
                p.value = rate_in / rate_out;
        }
        out.push_back(p);
    }
    return out;
}

int time_bucket(double horizon_minutes) {
    if (!(horizon_minutes >= 0.0)) throw InvalidInput("horizon must be non-negative");
    const int b = static_cast<int>(std::floor(horizon_minutes / kBucketMinutes));
    return std::min(b, kTimeBuckets - 1);
}

std::vector<int> class_truths(std::span<const ScoredExample> examples, int cls) {
    std::vector<int> t(examples.size());
    for (std::size_t i = 0; i < examples.size(); ++i) t[i] = examples[i].truth == cls ? 1 : 0;
    return t;
}

std::vector<double> class_scores(std::span<const ScoredExample> examples, int cls) {
    std::vector<double> s(examples.size());
    for (std::size_t i = 0; i < examples.size(); ++i) s[i] = examples[i].scores.at(static_cast<std::size_t>(cls));
    return s;
}

std::vector<BucketMetrics> time_bucket_report(std::span<const ScoredExample> examples, int num_classes) {
    std::vector<std::vector<ScoredExample>> bins(kTimeBuckets);
    for (const auto& e : examples) bins[static_cast<std::size_t>(time_bucket(e.horizon_minutes))].push_back(e);
    std::vector<BucketMetrics> out;
    for (int b = 0; b < kTimeBuckets; ++b) {
        const auto& bin = bins[static_cast<std::size_t>(b)];
        BucketMetrics m{b, bin.size(), {}, {}};
        for (int c = 0; c < num_classes; ++c) {
            const auto s = class_scores(bin, c);
            const auto t = class_truths(bin, c);
            m.auroc.push_back(auroc(s, t));
            m.auprc.push_back(auprc(s, t));
        }
        out.push_back(std::move(m));
    }
    return out;
}

std::optional<double> macro_auroc(std::span<const ScoredExample> examples, int num_classes) {
    std::vector<std::optional<double>> v;
    for (int c = 0; c < num_classes; ++c) v.push_back(auroc(class_scores(examples, c), class_truths(examples, c)));
    return mean_if_all(v);
}

std::optional<double> macro_auprc(std::span<const ScoredExample> examples, int num_classes) {
    std::vector<std::optional<double>> v;
    for (int c = 0; c < num_classes; ++c) v.push_back(auprc(class_scores(examples, c), class_truths(examples, c)));
    return mean_if_all(v);
}

MetricsReport compute_report(std::span<const ScoredExample> examples, int num_classes, const ReportOptions& options) {
    if (!options.cutpoints.empty() && static_cast<int>(options.cutpoints.size()) != num_classes)
        throw InvalidInput("report: one cutpoint per class required");
    MetricsReport r;
    r.n = examples.size();
    r.num_classes = num_classes;
    std::vector<std::optional<double>> ppv, npv, sens, spec, aurocs, auprcs;
    for (int c = 0; c < num_classes; ++c) {
        ClassMetrics m;
        const auto s = class_scores(examples, c);
        const auto t = class_truths(examples, c);
        m.auroc = auroc(s, t);
        m.auprc = auprc(s, t);
        const std::size_t pos = static_cast<std::size_t>(std::count(t.begin(), t.end(), 1));
        m.prevalence = examples.empty() ? 0.0 : static_cast<double>(pos) / static_cast<double>(examples.size());
        if (options.cutpoints.empty()) {
            m.cutpoint = select_cutpoint(s, t);
        } else {
            m.cutpoint.threshold = options.cutpoints[static_cast<std::size_t>(c)];
        }
        std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
        for (std::size_t i = 0; i < s.size(); ++i) {
            const bool p = s[i] >= m.cutpoint.threshold;
            tp += p && t[i];
            fp += p && !t[i];
            tn += !p && !t[i];
            fn += !p && t[i];
        }
        m.at_cutpoint = binary_metrics_from_counts(tp, fp, tn, fn);
        if (m.at_cutpoint.sensitivity) m.cutpoint.sensitivity = *m.at_cutpoint.sensitivity;
        if (m.at_cutpoint.specificity) m.cutpoint.specificity = *m.at_cutpoint.specificity;
        ppv.push_back(m.at_cutpoint.ppv);
        npv.push_back(m.at_cutpoint.npv);
        sens.push_back(m.at_cutpoint.sensitivity);
        spec.push_back(m.at_cutpoint.specificity);
        aurocs.push_back(m.auroc);
        auprcs.push_back(m.auprc);
        r.per_class.push_back(std::move(m));
    }
    r.macro_auroc = mean_if_all(aurocs);
    r.macro_auprc = mean_if_all(auprcs);
    r.macro_ppv = mean_if_all(ppv);
    r.macro_npv = mean_if_all(npv);
    r.macro_sensitivity = mean_if_all(sens);
    r.macro_specificity = mean_if_all(spec);
    if (options.bootstrap_resamples > 0 && r.macro_auroc && r.macro_auprc) {
        std::vector<std::vector<double>> cs;
        std::vector<std::vector<int>> ct;
        for (int c = 0; c < num_classes; ++c) {
            cs.push_back(class_scores(examples, c));
            ct.push_back(class_truths(examples, c));
        }
        std::vector<double> s;
        std::vector<int> t;
        const auto cis = bootstrap_ci_multi(
            [&](std::span<const std::size_t> idx) -> std::optional<std::vector<double>> {
                std::vector<double> out;
                double sum_roc = 0.0, sum_pr = 0.0;
                for (int c = 0; c < num_classes; ++c) {
                    s.resize(idx.size());
                    t.resize(idx.size());
                    for (std::size_t i = 0; i < idx.size(); ++i) {
                        s[i] = cs[static_cast<std::size_t>(c)][idx[i]];
                        t[i] = ct[static_cast<std::size_t>(c)][idx[i]];
                    }
                    const auto roc = auroc(s, t);
                    const auto pr = auprc(s, t);
                    if (!roc || !pr) return std::nullopt;
                    out.push_back(*roc);
                    out.push_back(*pr);
                    sum_roc += *roc;
                    sum_pr += *pr;
                }
                out.push_back(sum_roc / num_classes);
                out.push_back(sum_pr / num_classes);
                return out;
            },
            examples.size(), options.bootstrap_resamples, options.seed);
        for (int c = 0; c < num_classes; ++c) {
            r.per_class[static_cast<std::size_t>(c)].auroc_ci = cis[static_cast<std::size_t>(2 * c)];
            r.per_class[static_cast<std::size_t>(c)].auprc_ci = cis[static_cast<std::size_t>(2 * c + 1)];
        }
        r.macro_auroc_ci = cis[static_cast<std::size_t>(2 * num_classes)];
        r.macro_auprc_ci = cis[static_cast<std::size_t>(2 * num_classes + 1)];
    }
    std::vector<int> pred(examples.size()), truth(examples.size());
    for (std::size_t i = 0; i < examples.size(); ++i) {
        pred[i] = argmax(examples[i].scores);
        truth[i] = examples[i].truth;
    }
    r.balanced_accuracy = balanced_accuracy(pred, truth, num_classes);
    return r;
}

std::vector<ScoredExample> filter_by_tag(std::span<const ScoredExample> examples, const std::string& tag) {
    std::vector<ScoredExample> out;
    for (const auto& e : examples)
        if (e.subgroup_tags.count(tag)) out.push_back(e);
    return out;
}

MetricsReport subgroup_report(std::span<const ScoredExample> examples, const std::string& tag, int num_classes,
                              const ReportOptions& options) {
    const auto subset = filter_by_tag(examples, tag);
    if (subset.empty()) throw InvalidInput("no example carries subgroup tag '" + tag + "'");
    return compute_report(subset, num_classes, options);
}

std::vector<ScoredExample> locf_scored(std::span<const ScoredExample> examples, const LabelRule& rule) {
    std::vector<ScoredExample> out(examples.begin(), examples.end());
    for (auto& e : out) {
        const int c = static_cast<int>(locf_predict(e.current_target_value, rule));
        std::fill(e.scores.begin(), e.scores.end(), 0.0);
        e.scores.at(static_cast<std::size_t>(c)) = 1.0;
    }
    return out;
}

std::string optional_to_string(const std::optional<double>& v) {
    if (!v) return "";
    if (std::isinf(*v)) return *v > 0 ? "inf" : "-inf";
    return format_double(*v);
}

json optional_to_json(const std::optional<double>& v) {
    if (!v) return nullptr;
    if (std::isinf(*v)) return *v > 0 ? "inf" : "-inf";
    return *v;
}

namespace {

json ci_json(const std::optional<ConfidenceInterval>& ci) {
    if (!ci) return nullptr;
    return json{{"low", ci->low}, {"high", ci->high}, {"redrawn", ci->redrawn}};
}

}  // namespace

json MetricsReport::to_json() const {
    json classes = json::array();
    for (int c = 0; c < num_classes; ++c) {
        const auto& m = per_class[static_cast<std::size_t>(c)];
        const std::string name = num_classes == kNumClasses ? class_name(static_cast<GlucoseClass>(c)) : std::to_string(c);
        classes.push_back({{"class", name},
                           {"prevalence", m.prevalence},
                           {"auroc", optional_to_json(m.auroc)},
                           {"auprc", optional_to_json(m.auprc)},
                           {"auroc_ci", ci_json(m.auroc_ci)},
                           {"auprc_ci", ci_json(m.auprc_ci)},
                           {"cutpoint", optional_to_json(m.cutpoint.threshold)},
                           {"ppv", optional_to_json(m.at_cutpoint.ppv)},
                           {"npv", optional_to_json(m.at_cutpoint.npv)},
                           {"sensitivity", optional_to_json(m.at_cutpoint.sensitivity)},
                           {"specificity", optional_to_json(m.at_cutpoint.specificity)},
                           {"tp", m.at_cutpoint.tp},
                           {"fp", m.at_cutpoint.fp},
                           {"tn", m.at_cutpoint.tn},
                           {"fn", m.at_cutpoint.fn}});
    }
    return json{{"n", n},
                {"classes", classes},
                {"macro",
                 {{"auroc", optional_to_json(macro_auroc)},
                  {"auprc", optional_to_json(macro_auprc)},
                  {"auroc_ci", ci_json(macro_auroc_ci)},
                  {"auprc_ci", ci_json(macro_auprc_ci)},
                  {"ppv", optional_to_json(macro_ppv)},
                  {"npv", optional_to_json(macro_npv)},
                  {"sensitivity", optional_to_json(macro_sensitivity)},
                  {"specificity", optional_to_json(macro_specificity)}}},
                {"balanced_accuracy", optional_to_json(balanced_accuracy)}};
}

std::string MetricsReport::to_csv() const {
    std::ostringstream os;
    os << "class,prevalence,auroc,auroc_low,auroc_high,auprc,auprc_low,auprc_high,cutpoint,ppv,npv,sensitivity,"
          "specificity\n";
    auto ci_cells = [](const std::optional<ConfidenceInterval>& ci) {
        return ci ? format_double(ci->low) + "," + format_double(ci->high) : std::string(",");
    };
    for (int c = 0; c < num_classes; ++c) {
        const auto& m = per_class[static_cast<std::size_t>(c)];
        os << (num_classes == kNumClasses ? class_name(static_cast<GlucoseClass>(c)) : std::to_string(c)) << ','
           << format_double(m.prevalence) << ',' << optional_to_string(m.auroc) << ',' << ci_cells(m.auroc_ci) << ','
           << optional_to_string(m.auprc) << ',' << ci_cells(m.auprc_ci) << ','
           << optional_to_string(m.cutpoint.threshold) << ',' << optional_to_string(m.at_cutpoint.ppv) << ','
           << optional_to_string(m.at_cutpoint.npv) << ',' << optional_to_string(m.at_cutpoint.sensitivity) << ','
           << optional_to_string(m.at_cutpoint.specificity) << '\n';
    }
    os << "macro,," << optional_to_string(macro_auroc) << ',' << ci_cells(macro_auroc_ci) << ','
       << optional_to_string(macro_auprc) << ',' << ci_cells(macro_auprc_ci) << ",," << optional_to_string(macro_ppv)
       << ',' << optional_to_string(macro_npv) << ',' << optional_to_string(macro_sensitivity) << ','
       << optional_to_string(macro_specificity) << '\n';
    return os.str();
}

}  // namespace mitst
