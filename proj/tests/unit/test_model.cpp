#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "fixtures.hpp"
#include "mitst/synthgen.hpp"

using namespace mitst;
namespace fs = std::filesystem;

namespace {

// Plain nested-vector arithmetic, independent of the tape.
using Rows = std::vector<std::vector<double>>;

const Matrix& P(const Model& m, const std::string& name) {
    const int i = m.params().index_of(name);
    REQUIRE_MESSAGE(i >= 0, name);
    return m.params()[static_cast<std::size_t>(i)].value;
}

Rows rows_of(const Matrix& x) {
    Rows r(static_cast<std::size_t>(x.rows()), std::vector<double>(static_cast<std::size_t>(x.cols())));
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        for (Eigen::Index j = 0; j < x.cols(); ++j) r[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = x(i, j);
    return r;
}

Rows layer_norm(const Rows& x, const Matrix& g, const Matrix& b) {
    Rows y = x;
    for (auto& row : y) {
        double mu = 0.0, var = 0.0;
        for (double v : row) mu += v;
        mu /= static_cast<double>(row.size());
        for (double v : row) var += (v - mu) * (v - mu);
        var /= static_cast<double>(row.size());
        for (std::size_t j = 0; j < row.size(); ++j)
            row[j] = (row[j] - mu) / std::sqrt(var + 1e-5) * g(0, static_cast<Eigen::Index>(j)) +
                     b(0, static_cast<Eigen::Index>(j));
    }
    return y;
}

Rows affine(const Rows& x, const Matrix& w, const Matrix& b) {
    Rows y;
    for (const auto& row : x) {
        std::vector<double> o(static_cast<std::size_t>(w.rows()));
        for (Eigen::Index k = 0; k < w.rows(); ++k) {
            double s = b(0, k);
            for (Eigen::Index j = 0; j < w.cols(); ++j) s += w(k, j) * row[static_cast<std::size_t>(j)];
            o[static_cast<std::size_t>(k)] = s;
        }
        y.push_back(o);
    }
    return y;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

Rows geglu(const Rows& x) {
    Rows y;
    for (const auto& row : x) {
        const std::size_t h = row.size() / 2;
        std::vector<double> o(h);
        for (std::size_t c = 0; c < h; ++c) o[c] = row[c] * gelu(row[h + c]);
        y.push_back(o);
    }
    return y;
}

Rows add(Rows a, const Rows& b) {
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
    return a;
}

/// One pre-norm block; `queries` are the rows whose outputs are kept.
Rows block(const Model& m, const std::string& p, const Rows& x, const std::vector<std::size_t>& queries, int heads) {
    const Rows y = layer_norm(x, P(m, p + "ln1.gamma"), P(m, p + "ln1.beta"));
    const Rows k = affine(y, P(m, p + "k.weight"), P(m, p + "k.bias"));
    const Rows v = affine(y, P(m, p + "v.weight"), P(m, p + "v.bias"));
    Rows yq, xq;
    for (auto q : queries) {
        yq.push_back(y[q]);
        xq.push_back(x[q]);
    }
    const Rows q = affine(yq, P(m, p + "q.weight"), P(m, p + "q.bias"));
    const std::size_t width = q[0].size(), dh = width / static_cast<std::size_t>(heads);
    Rows att(q.size(), std::vector<double>(width, 0.0));
    for (std::size_t i = 0; i < q.size(); ++i) {
        for (std::size_t h = 0; h < static_cast<std::size_t>(heads); ++h) {
            std::vector<double> s(k.size());
            double mx = -1e300;
            for (std::size_t j = 0; j < k.size(); ++j) {
                double dot = 0.0;
                for (std::size_t c = 0; c < dh; ++c) dot += q[i][h * dh + c] * k[j][h * dh + c];
                s[j] = dot / std::sqrt(static_cast<double>(dh));
                mx = std::max(mx, s[j]);
            }
            double z = 0.0;
            for (auto& e : s) z += (e = std::exp(e - mx));
            for (std::size_t j = 0; j < k.size(); ++j)
                for (std::size_t c = 0; c < dh; ++c) att[i][h * dh + c] += s[j] / z * v[j][h * dh + c];
        }
    }
    const Rows h = add(xq, affine(att, P(m, p + "out.weight"), P(m, p + "out.bias")));
    const Rows n2 = layer_norm(h, P(m, p + "ln2.gamma"), P(m, p + "ln2.beta"));
    return add(h, affine(geglu(affine(n2, P(m, p + "ff1.weight"), P(m, p + "ff1.bias"))), P(m, p + "ff2.weight"),
                         P(m, p + "ff2.bias")));
}

void check_close(const Matrix& got, const Rows& want, double tol = 1e-12) {
    REQUIRE(static_cast<std::size_t>(got.rows()) == want.size());
    for (std::size_t i = 0; i < want.size(); ++i) {
        REQUIRE(static_cast<std::size_t>(got.cols()) == want[i].size());
        for (std::size_t j = 0; j < want[i].size(); ++j)
            CHECK(std::abs(got(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) - want[i][j]) <= tol);
    }
}

CohortSchema one_numeric_schema() {
    CohortSchema s;
    SourceSchema a;
    a.source_id = 1;
    a.source_name = "solo";
    a.numeric_features = {{"x", std::nullopt}};
    a.embed_width_hint = 2;
    s.sources = {a};
    return s;
}

ModelConfig hand_config(int sources) {
    ModelConfig c;
    c.depth = 1;
    c.heads = 1;
    c.head_dim = 2;
    c.embed_widths.assign(static_cast<std::size_t>(sources), 2);
    c.joint_width = 2;
    c.mult = 1;
    c.fusion_width = 2;
    c.dropout = 0.0;
    c.max_seq_len = 8;
    return c;
}

TimePoint numeric_point(double offset, double x) {
    TimePoint tp;
    tp.offset_minutes = offset;
    tp.numeric_values = {x};
    tp.numeric_missing = {0};
    return tp;
}

}  // namespace

TEST_CASE("tokenizer: numeric tokens are affine in the value, categorical tokens are table rows") {
    const auto schema = fixtures::tiny_schema();
    Model model(fixtures::tiny_config(), schema, 3);
    std::mt19937_64 rng(1);
    TimePoint tp = fixtures::random_point(schema.sources[0], 10.0, rng);
    tp.numeric_values = {0.0, 1.0};
    tp.categorical_values = {3};
    ag::Tape tape(false);
    GraphContext ctx(tape, model);
    const std::vector<TimePoint> pts = {tp};
    const Matrix tok = model.tokenize(ctx, 0, pts).value();
    REQUIRE(tok.rows() == 4);
    const auto& w = P(model, "src.alpha.tokenizer.numeric_weight");
    const auto& b = P(model, "src.alpha.tokenizer.numeric_bias");
    const auto& table = P(model, "src.alpha.tokenizer.table.ac");
    CHECK(tok.row(0) == P(model, "src.alpha.tokenizer.cls").row(0));
    CHECK(tok.row(1) == b.row(0));
    CHECK(tok.row(2) == (b.row(1) + w.row(1)).eval());
    CHECK(tok.row(3) == table.row(3));
}

TEST_CASE("tokenizer refuses out-of-vocabulary ids and arity mismatches") {
    const auto schema = fixtures::tiny_schema();
    Model model(fixtures::tiny_config(), schema, 3);
    std::mt19937_64 rng(1);
    TimePoint tp = fixtures::random_point(schema.sources[0], 10.0, rng);
    ag::Tape tape(false);
    GraphContext ctx(tape, model);
    tp.categorical_values = {99};
    std::vector<TimePoint> pts = {tp};
    CHECK_THROWS_AS(model.tokenize(ctx, 0, pts), Defect);
    pts[0].categorical_values = {};
    CHECK_THROWS_WITH_AS(model.tokenize(ctx, 0, pts), doctest::Contains("alpha"), Defect);
}

TEST_CASE("time encoding values, range and periodicity") {
    const std::vector<double> zero = {0.0};
    const Matrix e0 = time_encoding(zero, 8, 2.0, 100000.0);
    for (int c = 0; c < 8; ++c) CHECK(e0(0, c) == (c % 2 == 0 ? 0.0 : 1.0));

    const auto periods = time_encoding_periods(8, 2.0, 100000.0);
    REQUIRE(periods.size() == 4);
    CHECK(periods.front() == doctest::Approx(2.0));
    CHECK(periods.back() == doctest::Approx(100000.0));
    for (std::size_t k = 1; k < periods.size(); ++k)
        CHECK(periods[k] / periods[k - 1] == doctest::Approx(std::pow(50000.0, 1.0 / 3.0)));

    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> t(0.0, 5000.0);
    for (int i = 0; i < 50; ++i) {
        const double off = t(rng);
        const std::vector<double> two = {off, off + periods[1]};
        const Matrix e = time_encoding(two, 8, 2.0, 100000.0);
        CHECK(e.cwiseAbs().maxCoeff() <= 1.0);
        CHECK(std::abs(e(0, 2) - e(1, 2)) < 1e-9);
        CHECK(std::abs(e(0, 3) - e(1, 3)) < 1e-9);
        CHECK(e(0, 4) == doctest::Approx(std::sin(2.0 * std::numbers::pi * off / periods[2])));
    }
}

TEST_CASE("feature aggregation matches a scalar attention oracle") {
    const auto schema = one_numeric_schema();
    Model model(hand_config(1), schema, 11);
    const std::vector<TimePoint> pts = {numeric_point(5.0, 0.7), numeric_point(9.0, -1.3)};
    ag::Tape tape(false);
    GraphContext ctx(tape, model);
    const ag::Var tok = model.tokenize(ctx, 0, pts);
    const Matrix got = model.feature_aggregate(ctx, 0, tok, 2).value();
    const Rows all = rows_of(tok.value());
    Rows want;
    for (std::size_t t = 0; t < 2; ++t) {
        const Rows blockrows = {all[2 * t], all[2 * t + 1]};
        want.push_back(block(model, "src.solo.feature_transformer.layer0.", blockrows, {0}, 1)[0]);
    }
    check_close(got, want);
}

TEST_CASE("timestamp aggregation matches a scalar oracle and binds values to times") {
    const auto schema = one_numeric_schema();
    Model model(hand_config(1), schema, 12);
    ag::Tape tape(false);
    GraphContext ctx(tape, model);
    const Matrix f = (Matrix(3, 2) << 0.3, -0.2, 1.1, 0.4, -0.7, 0.9).finished();
    const std::vector<double> offsets = {10.5, 71.3, 400.9};
    const Matrix got = model.timestamp_aggregate(ctx, 0, tape.constant(f), offsets).value();
    const Matrix te = time_encoding(offsets, 2, 2.0, 100000.0);
    Rows x = {rows_of(P(model, "src.solo.its_transformer.cls"))[0]};
    for (auto r : rows_of(f + te)) x.push_back(r);
    check_close(got, {block(model, "src.solo.its_transformer.layer0.", x, {0}, 1)[0]});

    // permuting values with times held fixed changes the summary
    const Matrix swapped = (Matrix(3, 2) << 1.1, 0.4, 0.3, -0.2, -0.7, 0.9).finished();
    const Matrix other = model.timestamp_aggregate(ctx, 0, tape.constant(swapped), offsets).value();
    CHECK((other - got).cwiseAbs().maxCoeff() > 1e-9);
}

TEST_CASE("zero depth passes the summary token through") {
    const auto schema = one_numeric_schema();
    auto cfg = hand_config(1);
    cfg.depth = 0;
    Model model(cfg, schema, 13);
    const std::vector<TimePoint> pts = {numeric_point(5.0, 0.7)};
    ag::Tape tape(false);
    GraphContext ctx(tape, model);
    const ag::Var tok = model.tokenize(ctx, 0, pts);
    const Matrix f = model.feature_aggregate(ctx, 0, tok, 1).value();
    CHECK(f.row(0) == P(model, "src.solo.tokenizer.cls").row(0));
    const std::vector<double> off = {5.0};
    const Matrix z = model.timestamp_aggregate(ctx, 0, tape.constant(f), off).value();
    CHECK(z.row(0) == P(model, "src.solo.its_transformer.cls").row(0));
}

TEST_CASE("joint projection matches a scalar oracle; zero output weights give the bias") {
    const auto schema = one_numeric_schema();
    Model model(hand_config(1), schema, 14);
    ag::Tape tape(false);
    GraphContext ctx(tape, model);
    const Matrix z = (Matrix(1, 2) << 0.8, -0.5).finished();
    const Matrix got = model.joint_project(ctx, 0, tape.constant(z)).value();
    const std::string p = "src.solo.projection.";
    const Rows want = affine(geglu(affine(layer_norm(rows_of(z), P(model, p + "ln.gamma"), P(model, p + "ln.beta")),
                                          P(model, p + "fc1.weight"), P(model, p + "fc1.bias"))),
                             P(model, p + "fc2.weight"), P(model, p + "fc2.bias"));
    check_close(got, want);

    model.params()[static_cast<std::size_t>(model.params().index_of(p + "fc2.weight"))].value.setZero();
    ag::Tape t2(false);
    GraphContext c2(t2, model);
    CHECK(model.joint_project(c2, 0, t2.constant(z)).value() == P(model, p + "fc2.bias"));
}

TEST_CASE("projection width is the joint width for every source") {
    const auto schema = synthetic_schema();
    ModelConfig cfg;
    cfg.depth = 1;
    Model model(cfg, schema, 1);
    ag::Tape tape(false);
    GraphContext ctx(tape, model);
    for (int m = 0; m < schema.num_sources(); ++m) {
        const Matrix z = Matrix::Ones(1, model.embed_width(m));
        CHECK(model.joint_project(ctx, m, tape.constant(z)).cols() == 32);
    }
}

TEST_CASE("source integration matches a scalar oracle and is permutation equivariant") {
    CohortSchema schema = one_numeric_schema();
    SourceSchema b = schema.sources[0];
    b.source_id = 2;
    b.source_name = "duo";
    schema.sources.push_back(b);
    Model model(hand_config(2), schema, 15);
    ag::Tape tape(false);
    GraphContext ctx(tape, model);
    const Matrix u = (Matrix(2, 2) << 0.2, -0.9, 1.4, 0.3).finished();
    const Matrix a = model.integrate_sources(ctx, tape.constant(u)).value();
    check_close(a, block(model, "source_transformer.layer0.", rows_of(u), {0, 1}, 1));

    const Matrix swapped = (Matrix(2, 2) << 1.4, 0.3, 0.2, -0.9).finished();
    const Matrix a2 = model.integrate_sources(ctx, tape.constant(swapped)).value();
    CHECK((a2.row(0) - a.row(1)).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK((a2.row(1) - a.row(0)).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("fusion weights: oracle, singleton, symmetric inputs") {
    const auto schema = fixtures::tiny_schema();
    Model model(fixtures::tiny_config(), schema, 16);
    ag::Tape tape(false);
    GraphContext ctx(tape, model);
    const Matrix a = (Matrix(3, 4) << 0.1, 0.2, -0.3, 0.4, 1.0, -1.0, 0.5, 0.0, -0.2, 0.7, 0.7, -0.1).finished();
    const auto fused = model.fuse_sources(ctx, tape.constant(a));
    const Rows hidden = affine(rows_of(a), P(model, "fusion.weight"), P(model, "fusion.bias"));
    std::vector<double> score;
    for (const auto& h : hidden) {
        double s = 0.0;
        for (std::size_t k = 0; k < h.size(); ++k) s += std::tanh(h[k]) * P(model, "fusion.context")(static_cast<Eigen::Index>(k), 0);
        score.push_back(s);
    }
    double z = 0.0;
    for (double s : score) z += std::exp(s);
    std::vector<double> v(4, 0.0);
    for (std::size_t m = 0; m < 3; ++m) {
        const double alpha = std::exp(score[m]) / z;
        CHECK(std::abs(fused.alpha.value()(static_cast<Eigen::Index>(m), 0) - alpha) <= 1e-12);
        for (std::size_t c = 0; c < 4; ++c) v[c] += alpha * a(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(c));
    }
    check_close(fused.v.value(), {v});

    const Matrix single = a.topRows(1);
    const auto one = model.fuse_sources(ctx, tape.constant(single));
    CHECK(one.alpha.value()(0, 0) == 1.0);
    CHECK(one.v.value() == single);

    const Matrix same = a.row(1).replicate(3, 1);
    const auto sym = model.fuse_sources(ctx, tape.constant(same));
    for (int m = 0; m < 3; ++m) CHECK(sym.alpha.value()(m, 0) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
    CHECK((sym.v.value() - a.row(1)).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("prediction head matches a scalar oracle; zero weights give the bias") {
    const auto schema = fixtures::tiny_schema();
    auto cfg = fixtures::tiny_config();
    cfg.joint_width = 2;
    Model model(cfg, schema, 17);
    ag::Tape tape(false);
    GraphContext ctx(tape, model);
    const Matrix v = (Matrix(1, 2) << 0.6, -1.2).finished();
    Rows n = layer_norm(rows_of(v), P(model, "head.ln.gamma"), P(model, "head.ln.beta"));
    for (auto& x : n[0]) x = std::max(0.0, x);
    check_close(model.predict(ctx, tape.constant(v)).value(), affine(n, P(model, "head.weight"), P(model, "head.bias")));
    const Matrix probs = softmax_row(model.predict(ctx, tape.constant(v)).value());
    CHECK(std::abs(probs.sum() - 1.0) <= 1e-9);

    model.params()[static_cast<std::size_t>(model.params().index_of("head.weight"))].value.setZero();
    ag::Tape t2(false);
    GraphContext c2(t2, model);
    CHECK(model.predict(c2, t2.constant(v)).value() == P(model, "head.bias"));
}

TEST_CASE("forward is deterministic; fusion weights are a distribution") {
    const auto schema = fixtures::tiny_schema();
    Model model(fixtures::tiny_config(), schema, 18);
    std::mt19937_64 rng(4);
    for (int i = 0; i < 20; ++i) {
        const auto s = fixtures::random_sample(schema, rng);
        const auto a = model.infer(s.input());
        const auto b = model.infer(s.input());
        CHECK(a.logits == b.logits);
        double sum = 0.0;
        for (double al : a.alpha) {
            CHECK(al > 0.0);
            sum += al;
        }
        CHECK(std::abs(sum - 1.0) <= 1e-6);
    }
}

TEST_CASE("forward with placeholders for absent sources") {
    const auto schema = synthetic_schema();
    ModelConfig cfg;
    cfg.depth = 1;
    cfg.heads = 2;
    cfg.head_dim = 4;
    Model model(cfg, schema, 19);
    Episode ep = generate_episode(GeneratorConfig{}, 3);
    NormalizerState norm = fit_normalizer(schema, std::span<const Episode>(&ep, 1), std::vector<std::size_t>{0});
    Preprocessor pre(schema, norm, FrequencyTable::defaults());

    Episode partial = ep;
    for (int m : {0, 2, 4}) {
        partial.series[static_cast<std::size_t>(m)].time_points.clear();
        partial.series[static_cast<std::size_t>(m)].present = false;
    }
    const auto prep = pre.prepare(partial);
    const double cutoff = ep.target_track.back().offset_minutes;
    const auto a = model.infer(pre.view(prep, cutoff));
    const auto b = model.infer(pre.view(prep, cutoff));
    CHECK(a.logits == b.logits);

    Episode empty = ep;
    for (auto& s : empty.series) {
        s.time_points.clear();
        s.present = false;
    }
    const auto eprep = pre.prepare(empty);
    const auto e = model.infer(pre.view(eprep, cutoff));
    CHECK(e.logits.allFinite());
}

TEST_CASE("forward refuses inputs that do not match the model") {
    const auto schema = fixtures::tiny_schema();
    Model model(fixtures::tiny_config(), schema, 20);
    std::mt19937_64 rng(5);
    auto s = fixtures::random_sample(schema, rng);
    ModelInput in = s.input();
    in.sources.pop_back();
    CHECK_THROWS_AS(model.infer(in), Defect);
    in = s.input();
    in.sources[1] = {};
    CHECK_THROWS_WITH_AS(model.infer(in), doctest::Contains("beta"), Defect);
    s.sources[1].resize(20, s.sources[1].front());
    CHECK_THROWS_AS(model.infer(s.input()), Defect);
}

TEST_CASE("model construction is deterministic per seed") {
    const auto schema = fixtures::tiny_schema();
    Model a(fixtures::tiny_config(), schema, 21), b(fixtures::tiny_config(), schema, 21), c(fixtures::tiny_config(), schema, 22);
    bool differs = false;
    for (std::size_t i = 0; i < a.params().size(); ++i) {
        CHECK(a.params()[i].value == b.params()[i].value);
        differs = differs || a.params()[i].value != c.params()[i].value;
    }
    CHECK(differs);
}

TEST_CASE("gradients of the tiny model match central differences") {
    const auto schema = fixtures::tiny_schema();
    Model model(fixtures::tiny_config(), schema, 23);
    std::mt19937_64 rng(6);
    const auto s = fixtures::random_sample(schema, rng, 3);
    const auto check = fixtures::finite_difference_check(model, s.input(), 2);
    CHECK(check.worst_by_group.size() == model.params().groups().size());
    CHECK(check.worst() <= 1e-4);
}

TEST_CASE("checkpoint roundtrip and refusal of damaged files") {
    const auto schema = fixtures::tiny_schema();
    Model model(fixtures::tiny_config(), schema, 24);
    const fs::path dir = fs::temp_directory_path() / "mitst_unit_ckpt";
    fs::create_directories(dir);
    const fs::path path = dir / "m.mitst";
    save_checkpoint(path, model, json{{"note", "x"}});
    const auto loaded = load_checkpoint(path);
    CHECK(loaded.extra["note"] == "x");
    CHECK(loaded.file_hash == file_sha256(path));
    std::mt19937_64 rng(7);
    for (int i = 0; i < 10; ++i) {
        const auto s = fixtures::random_sample(schema, rng);
        CHECK(model.infer(s.input()).logits == loaded.model->infer(s.input()).logits);
    }

    const std::string bytes = read_text_file(path);
    write_text_file(dir / "short.mitst", bytes.substr(0, bytes.size() / 2));
    CHECK_THROWS_AS(load_checkpoint(dir / "short.mitst"), CheckpointError);

    std::string tampered = bytes;
    const auto at = tampered.find("\"depth\"");
    REQUIRE(at != std::string::npos);
    tampered[at + 1] = 'D';
    write_text_file(dir / "tampered.mitst", tampered);
    try {
        load_checkpoint(dir / "tampered.mitst");
        FAIL("tampered checkpoint accepted");
    } catch (const CheckpointError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("config hash mismatch") != std::string::npos);
        CHECK(msg.find("stored ") != std::string::npos);
        CHECK(msg.find("computed ") != std::string::npos);
    }

    std::string versioned = bytes;
    versioned[8] = 9;
    write_text_file(dir / "version.mitst", versioned);
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "version.mitst"), doctest::Contains("version"), CheckpointError);

    std::string weights = bytes;
    weights[weights.size() - 100] ^= 1;
    write_text_file(dir / "weights.mitst", weights);
    CHECK_THROWS_AS(load_checkpoint(dir / "weights.mitst"), CheckpointError);
    fs::remove_all(dir);
}
