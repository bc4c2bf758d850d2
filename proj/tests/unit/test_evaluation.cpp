#include <doctest.h>

#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "mitst/evaluation.hpp"

using namespace mitst;

namespace {

ScoredExample scored(std::vector<double> scores, int truth, double next = 100.0, double horizon = 30.0,
                     double current = 100.0) {
    ScoredExample e;
    e.scores = std::move(scores);
    e.truth = truth;
    e.next_target_value = next;
    e.horizon_minutes = horizon;
    e.current_target_value = current;
    return e;
}

std::vector<ScoredExample> random_examples(std::mt19937_64& rng, std::size_t n) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<ScoredExample> out;
    for (std::size_t i = 0; i < n; ++i) {
        const int truth = static_cast<int>(i % 3);
        std::vector<double> s = {u(rng), u(rng), u(rng)};
        s[static_cast<std::size_t>(truth)] += 0.6;
        const double total = s[0] + s[1] + s[2];
        for (auto& v : s) v /= total;
        out.push_back(scored(s, truth, 40.0 + 200.0 * u(rng), 5.0 + 595.0 * u(rng)));
    }
    return out;
}

}  // namespace

TEST_CASE("binary metrics from counts") {
    const auto m = binary_metrics_from_counts(7, 3, 85, 5);
    CHECK(*m.ppv == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(*m.npv == doctest::Approx(85.0 / 90.0));
    CHECK(*m.sensitivity == doctest::Approx(7.0 / 12.0));
    CHECK(*m.specificity == doctest::Approx(85.0 / 88.0));

    const auto perfect = binary_metrics_from_counts(4, 0, 6, 0);
    CHECK(*perfect.ppv == 1.0);
    CHECK(*perfect.npv == 1.0);
    CHECK(*perfect.sensitivity == 1.0);
    CHECK(*perfect.specificity == 1.0);

    // everything called positive
    const auto all_pos = binary_metrics_from_counts(3, 7, 0, 0);
    CHECK(*all_pos.sensitivity == 1.0);
    CHECK(*all_pos.specificity == 0.0);
    CHECK(*all_pos.ppv == doctest::Approx(0.3));
    CHECK_FALSE(all_pos.npv.has_value());
}

TEST_CASE("binary metrics one-vs-rest counts agree with manual tally") {
    const std::vector<int> predicted = {0, 1, 2, 2, 1, 0, 2};
    const std::vector<int> truths = {0, 1, 1, 2, 2, 1, 2};
    const auto m = binary_metrics(predicted, truths, 2);
    CHECK(m.tp == 2);
    CHECK(m.fp == 1);
    CHECK(m.fn == 1);
    CHECK(m.tn == 3);
}

TEST_CASE("auroc small cases") {
    const std::vector<double> s = {0.1, 0.4, 0.35, 0.8};
    const std::vector<int> y = {0, 0, 1, 1};
    CHECK(*auroc(s, y) == 0.75);
    CHECK(*auroc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<int>{0, 0, 1, 1}) == 1.0);
    CHECK(*auroc(std::vector<double>{0.5, 0.5}, std::vector<int>{0, 1}) == 0.5);
    CHECK_FALSE(auroc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}).has_value());
    CHECK_FALSE(auroc(std::vector<double>{0.1, 0.2}, std::vector<int>{0, 0}).has_value());
}

TEST_CASE("auroc of shuffled labels is near one half") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> s(20000);
    std::vector<int> y(20000);
    for (std::size_t i = 0; i < s.size(); ++i) {
        s[i] = u(rng);
        y[i] = u(rng) < 0.3;
    }
    CHECK(std::abs(*auroc(s, y) - 0.5) < 0.05);
    CHECK(std::abs(*auprc(s, y) - 0.3) < 0.05);
}

TEST_CASE("auroc invariant under strictly monotone transforms and complement symmetric") {
    std::mt19937_64 rng(5);
    for (int i = 0; i < 200; ++i) {
        std::vector<double> s;
        std::vector<int> y;
        fixtures::random_scored(rng, s, y);
        const double base = *auroc(s, y);
        std::vector<double> e(s.size()), a(s.size());
        std::vector<int> flipped(y.size());
        for (std::size_t k = 0; k < s.size(); ++k) {
            e[k] = std::exp(s[k]);
            a[k] = 3.0 * s[k] + 7.0;
            flipped[k] = 1 - y[k];
        }
        CHECK(*auroc(e, y) == doctest::Approx(base).epsilon(1e-12));
        CHECK(*auroc(a, y) == doctest::Approx(base).epsilon(1e-12));
        CHECK(*auroc(s, flipped) == doctest::Approx(1.0 - base).epsilon(1e-12));
    }
}

TEST_CASE("auroc, auprc and cutpoint match exhaustive oracles") {
    std::mt19937_64 rng(7);
    for (int i = 0; i < 300; ++i) {
        std::vector<double> s;
        std::vector<int> y;
        fixtures::random_scored(rng, s, y, 60);
        CHECK(std::abs(*auroc(s, y) - *fixtures::brute_auroc(s, y)) <= 1e-9);
        CHECK(std::abs(*auprc(s, y) - *fixtures::brute_auprc(s, y)) <= 1e-9);
        const auto got = select_cutpoint(s, y);
        const auto want = fixtures::brute_cutpoint(s, y);
        CHECK(got.threshold == want.threshold);
        CHECK(got.sensitivity == doctest::Approx(want.sensitivity));
        CHECK(got.specificity == doctest::Approx(want.specificity));
    }
}

TEST_CASE("auprc edge cases") {
    CHECK(*auprc(std::vector<double>{0.9, 0.8, 0.1}, std::vector<int>{1, 1, 0}) == 1.0);
    CHECK_FALSE(auprc(std::vector<double>{0.9, 0.8}, std::vector<int>{0, 0}).has_value());
    // one positive ranked second: precision 1/2 at recall 1
    CHECK(*auprc(std::vector<double>{0.9, 0.8, 0.1}, std::vector<int>{0, 1, 0}) == doctest::Approx(0.5));
}

TEST_CASE("cutpoint degenerate and separated cases") {
    const std::vector<double> same = {0.4, 0.4, 0.4, 0.4};
    const std::vector<int> y = {0, 1, 0, 1};
    const auto c = select_cutpoint(same, y);
    CHECK(c.sensitivity + c.specificity == doctest::Approx(1.0));
    CHECK(std::isinf(c.threshold));

    const auto sep = select_cutpoint(std::vector<double>{0.1, 0.2, 0.7, 0.9}, std::vector<int>{0, 0, 1, 1});
    CHECK(sep.sensitivity + sep.specificity == 2.0);
    CHECK(sep.threshold == 0.7);
}

TEST_CASE("locf predicts the class of the current value") {
    CHECK(locf_predict(60.0) == GlucoseClass::hypo);
    CHECK(locf_predict(120.0) == GlucoseClass::euglycemia);
    CHECK(locf_predict(200.0) == GlucoseClass::hyper);
    CHECK(locf_predict(70.0) == GlucoseClass::euglycemia);
}

TEST_CASE("locf per-class sensitivity from the transition matrix matches direct counting") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> bg(40.0, 260.0);
    std::vector<ScoredExample> ex;
    std::array<std::array<double, 3>, 3> trans{};
    for (int i = 0; i < 500; ++i) {
        const double cur = bg(rng), next = bg(rng);
        const int t = static_cast<int>(classify_target(next));
        ex.push_back(scored({1, 0, 0}, t, next, 30.0, cur));
        trans[static_cast<std::size_t>(classify_target(cur))][static_cast<std::size_t>(t)] += 1.0;
    }
    const auto locf = locf_scored(ex);
    std::vector<int> pred, truth;
    for (const auto& e : locf) {
        pred.push_back(argmax(e.scores));
        truth.push_back(e.truth);
    }
    for (int c = 0; c < 3; ++c) {
        const auto m = binary_metrics(pred, truth, c);
        double col = 0.0;
        for (int r = 0; r < 3; ++r) col += trans[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
        CHECK(*m.sensitivity == doctest::Approx(trans[static_cast<std::size_t>(c)][static_cast<std::size_t>(c)] / col));
    }
}

TEST_CASE("balanced accuracy averages recall over present classes") {
    const std::vector<int> pred = {0, 1, 1, 2, 2, 2};
    const std::vector<int> truth = {0, 0, 1, 1, 2, 2};
    CHECK(*balanced_accuracy(pred, truth, 3) == doctest::Approx((0.5 + 0.5 + 1.0) / 3.0));
    CHECK(*balanced_accuracy(std::vector<int>{1, 1}, std::vector<int>{1, 1}, 3) == 1.0);
}

TEST_CASE("macro averages are the mean of per-class values") {
    std::mt19937_64 rng(11);
    const auto ex = random_examples(rng, 300);
    const auto report = compute_report(ex, 3);
    double sum_auroc = 0.0, sum_auprc = 0.0;
    for (const auto& c : report.per_class) {
        sum_auroc += *c.auroc;
        sum_auprc += *c.auprc;
    }
    CHECK(std::abs(*report.macro_auroc - sum_auroc / 3.0) <= 1e-12);
    CHECK(std::abs(*report.macro_auprc - sum_auprc / 3.0) <= 1e-12);
    CHECK(std::abs(*macro_auroc(ex, 3) - *report.macro_auroc) <= 1e-12);
}

TEST_CASE("report uses supplied cutpoints") {
    std::mt19937_64 rng(12);
    const auto ex = random_examples(rng, 90);
    ReportOptions opt;
    opt.cutpoints = {2.0, 2.0, 2.0};
    const auto r = compute_report(ex, 3, opt);
    for (const auto& c : r.per_class) {
        CHECK(c.cutpoint.threshold == 2.0);
        CHECK(c.at_cutpoint.tp == 0);
        CHECK(c.at_cutpoint.fp == 0);
    }
}

TEST_CASE("bootstrap is reproducible per seed and constant metrics give zero width") {
    std::mt19937_64 rng(13);
    const auto ex = random_examples(rng, 200);
    const ExampleMetric m = [](std::span<const ScoredExample> e) { return macro_auroc(e, 3); };
    const auto a = bootstrap_ci(m, ex, 200, 42);
    const auto b = bootstrap_ci(m, ex, 200, 42);
    CHECK(a.low == b.low);
    CHECK(a.high == b.high);
    CHECK(a.low <= *macro_auroc(ex, 3));
    CHECK(a.high >= *macro_auroc(ex, 3));
    const auto c = bootstrap_ci(m, ex, 200, 43);
    CHECK((c.low != a.low || c.high != a.high));

    const ExampleMetric constant = [](std::span<const ScoredExample>) { return std::optional<double>(0.25); };
    const auto z = bootstrap_ci(constant, ex, 100, 1);
    CHECK(z.low == 0.25);
    CHECK(z.high == 0.25);
}

TEST_CASE("bootstrap redraws resamples where the metric is undefined") {
    std::vector<ScoredExample> ex;
    for (int i = 0; i < 30; ++i) ex.push_back(scored({0.5, 0.5, 0.0}, i == 0 ? 0 : 1));
    const ExampleMetric hypo_auroc = [](std::span<const ScoredExample> e) {
        return auroc(class_scores(e, 0), class_truths(e, 0));
    };
    const auto ci = bootstrap_ci(hypo_auroc, ex, 100, 3);
    CHECK(ci.redrawn > 0);
    CHECK(ci.low == 0.5);
}

TEST_CASE("permutation test bounds and reproducibility") {
    std::vector<double> good, bad;
    std::vector<int> y;
    for (int i = 0; i < 50; ++i) {
        y.push_back(i % 2);
        good.push_back(i % 2 ? 0.9 + i * 1e-4 : 0.1 + i * 1e-4);
        bad.push_back(i % 2 ? 0.1 + i * 1e-4 : 0.9 + i * 1e-4);
    }
    const ScoreMetric m = [](std::span<const double> s, std::span<const int> t) { return auroc(s, t); };
    const double p = permutation_test(m, good, bad, y, 1000, 4);
    CHECK(p <= 2.0 / 1001.0);
    CHECK(p == permutation_test(m, good, bad, y, 1000, 4));
    const double same = permutation_test(m, good, good, y, 200, 4);
    CHECK(same == 1.0);

    std::mt19937_64 rng(15);
    for (int i = 0; i < 20; ++i) {
        std::vector<double> a, b;
        std::vector<int> t;
        fixtures::random_scored(rng, a, t, 40);
        b = a;
        std::shuffle(b.begin(), b.end(), rng);
        const double q = permutation_test(m, a, b, t, 100, static_cast<std::uint64_t>(i));
        CHECK(q >= 0.0);
        CHECK(q <= 1.0);
    }
}

TEST_CASE("flagged count rounds up") {
    CHECK(flagged_count(0.0, 100) == 0);
    CHECK(flagged_count(0.05, 100) == 5);
    CHECK(flagged_count(0.05, 101) == 6);
    CHECK(flagged_count(1.0, 7) == 7);
    CHECK_THROWS_AS(flagged_count(1.5, 7), InvalidInput);
}

TEST_CASE("false-positive severity on a hand-built set") {
    // class 2 scores descending: 0.9 (hyper), 0.8 (eu, 150), 0.7 (eu, 170), 0.6 (hyper), 0.5 (eu, 100), 0.4 (hypo, 60)
    const std::vector<ScoredExample> ex = {
        scored({0.05, 0.05, 0.9}, 2, 220), scored({0.1, 0.1, 0.8}, 1, 150), scored({0.1, 0.2, 0.7}, 1, 170),
        scored({0.2, 0.2, 0.6}, 2, 200),   scored({0.2, 0.3, 0.5}, 1, 100), scored({0.3, 0.3, 0.4}, 0, 60)};
    const std::vector<double> fr = {1.0 / 6.0, 0.5, 5.0 / 6.0, 1.0};
    const auto curve = fp_severity_curve(ex, 2, fr);
    CHECK_FALSE(curve[0].value.has_value());
    CHECK(*curve[1].value == doctest::Approx(160.0));
    CHECK(*curve[2].value == doctest::Approx((150.0 + 170.0 + 100.0) / 3.0));
    CHECK(*curve[3].value == doctest::Approx((150.0 + 170.0 + 100.0 + 60.0) / 4.0));
    for (const auto& p : curve)
        if (p.value) CHECK(*p.value < 180.0);
}

TEST_CASE("relative risk on a hand-built set") {
    // class 0 score descending; events at ranks 1, 3, 6
    std::vector<ScoredExample> ex;
    const std::vector<int> truth = {0, 1, 0, 1, 1, 0, 1, 1, 2, 2};
    for (int i = 0; i < 10; ++i) ex.push_back(scored({1.0 - 0.05 * i, 0.05 * i, 0.0}, truth[static_cast<std::size_t>(i)]));
    const std::vector<double> fr = {0.2, 0.3, 0.5};
    const auto rr = relative_risk_curve(ex, 0, fr);
    CHECK(*rr[0].value == doctest::Approx((1.0 / 2.0) / (2.0 / 8.0)));
    CHECK(*rr[1].value == doctest::Approx((2.0 / 3.0) / (1.0 / 7.0)));
    CHECK(*rr[2].value == doctest::Approx((2.0 / 5.0) / (1.0 / 5.0)));

    std::vector<ScoredExample> perfect;
    for (int i = 0; i < 10; ++i) perfect.push_back(scored({1.0 - 0.1 * i, 0.1 * i, 0.0}, i < 2 ? 0 : 1));
    const std::vector<double> prev = {0.2};
    CHECK(std::isinf(*relative_risk_curve(perfect, 0, prev)[0].value));
}

TEST_CASE("relative risk of random scores is near one") {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<ScoredExample> ex;
    for (int i = 0; i < 20000; ++i) ex.push_back(scored({u(rng), 0.0, 0.0}, u(rng) < 0.2 ? 0 : 1));
    const std::vector<double> fr = {0.3};
    CHECK(std::abs(*relative_risk_curve(ex, 0, fr)[0].value - 1.0) < 0.1);
}

TEST_CASE("time buckets are left-closed hours") {
    CHECK(time_bucket(0.0) == 0);
    CHECK(time_bucket(59.999) == 0);
    CHECK(time_bucket(60.0) == 1);
    CHECK(time_bucket(119.0) == 1);
    CHECK(time_bucket(540.0) == 9);
    CHECK(time_bucket(600.0) == 9);
    CHECK_THROWS_AS(time_bucket(-1.0), InvalidInput);
}

TEST_CASE("single populated bucket reproduces the pooled metrics") {
    std::mt19937_64 rng(19);
    auto ex = random_examples(rng, 120);
    for (auto& e : ex) e.horizon_minutes = 30.0;
    const auto buckets = time_bucket_report(ex, 3);
    REQUIRE(buckets.size() == kTimeBuckets);
    CHECK(buckets[0].count == ex.size());
    for (int b = 1; b < kTimeBuckets; ++b) CHECK(buckets[static_cast<std::size_t>(b)].count == 0);
    for (int c = 0; c < 3; ++c)
        CHECK(*buckets[0].auroc[static_cast<std::size_t>(c)] == *auroc(class_scores(ex, c), class_truths(ex, c)));
}

TEST_CASE("subgroups: full tag equals global, disjoint tags partition") {
    std::mt19937_64 rng(21);
    auto ex = random_examples(rng, 150);
    for (std::size_t i = 0; i < ex.size(); ++i) {
        ex[i].subgroup_tags.insert("all");
        ex[i].subgroup_tags.insert(i % 2 ? "odd" : "even");
    }
    const auto global = compute_report(ex, 3);
    const auto all = subgroup_report(ex, "all", 3);
    CHECK(*all.macro_auroc == *global.macro_auroc);
    CHECK(all.n == global.n);
    CHECK(filter_by_tag(ex, "odd").size() + filter_by_tag(ex, "even").size() == ex.size());
}
