#include "mitst/model.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "mitst/random.hpp"

namespace mitst {

namespace {

void require_positive(int v, const char* name) {
    if (v <= 0) throw InvalidInput(std::string("model config: ") + name + " must be positive");
}

}  // namespace

// ---------------------------------------------------------------- config

void ModelConfig::validate(const CohortSchema& schema) const {
    if (depth < 0) throw InvalidInput("model config: depth must be >= 0");
    require_positive(heads, "heads");
    require_positive(head_dim, "head_dim");
    require_positive(joint_width, "joint_width");
    require_positive(mult, "mult");
    require_positive(fusion_width, "fusion_width");
    require_positive(num_classes, "num_classes");
    require_positive(max_seq_len, "max_seq_len");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw InvalidInput("model config: dropout must be in [0, 1)");
    if (!(min_period_minutes > 0.0 && max_period_minutes >= min_period_minutes))
        throw InvalidInput("model config: time-encoding periods must satisfy 0 < min <= max");
    if (!(cls_init_std >= 0.0)) throw InvalidInput("model config: cls_init_std must be >= 0");
    if (embed_widths.size() != schema.sources.size())
        throw InvalidInput("model config: embed_widths needs one entry per source (" +
                           std::to_string(schema.sources.size()) + ")");
    for (std::size_t m = 0; m < embed_widths.size(); ++m) {
        if (embed_widths[m] <= 0 || embed_widths[m] % 2 != 0)
            throw InvalidInput("model config: embed width of source " + schema.sources[m].source_name +
                               " must be positive and even");
    }
}

ModelConfig ModelConfig::resolved(const CohortSchema& schema) const {
    ModelConfig c = *this;
    if (c.embed_widths.empty())
        for (const auto& s : schema.sources) c.embed_widths.push_back(s.embed_width_hint);
    return c;
}

json ModelConfig::to_json() const {
    return json{{"depth", depth},
                {"heads", heads},
                {"head_dim", head_dim},
                {"embed_widths", embed_widths},
                {"joint_width", joint_width},
                {"mult", mult},
                {"fusion_width", fusion_width},
                {"dropout", dropout},
                {"num_classes", num_classes},
                {"max_seq_len", max_seq_len},
                {"min_period_minutes", min_period_minutes},
                {"max_period_minutes", max_period_minutes},
                {"cls_init_std", cls_init_std}};
}

ModelConfig ModelConfig::from_json(const json& j) {
    static const std::set<std::string> known = {"depth",        "heads",      "head_dim",    "embed_widths",
                                                "joint_width",  "mult",       "fusion_width", "dropout",
                                                "num_classes",  "max_seq_len", "min_period_minutes",
                                                "max_period_minutes", "cls_init_std"};
    if (!j.is_object()) throw InvalidInput("model config must be a JSON object");
    for (const auto& [k, _] : j.items())
        if (!known.count(k)) throw InvalidInput("model config: unknown key '" + k + "'");
    ModelConfig c;
    try {
        c.depth = j.value("depth", c.depth);
        c.heads = j.value("heads", c.heads);
        c.head_dim = j.value("head_dim", c.head_dim);
        c.embed_widths = j.value("embed_widths", c.embed_widths);
        c.joint_width = j.value("joint_width", c.joint_width);
        c.mult = j.value("mult", c.mult);
        c.fusion_width = j.value("fusion_width", c.fusion_width);
        c.dropout = j.value("dropout", c.dropout);
        c.num_classes = j.value("num_classes", c.num_classes);
        c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
        c.min_period_minutes = j.value("min_period_minutes", c.min_period_minutes);
        c.max_period_minutes = j.value("max_period_minutes", c.max_period_minutes);
        c.cls_init_std = j.value("cls_init_std", c.cls_init_std);
    } catch (const json::exception& e) {
        throw InvalidInput(std::string("model config: ") + e.what());
    }
    return c;
}

// ---------------------------------------------------------------- parameters

int ParameterSet::add(ParameterTensor tensor) {
    if (index_of(tensor.name) >= 0) throw Defect("duplicate parameter " + tensor.name);
    tensors_.push_back(std::move(tensor));
    return static_cast<int>(tensors_.size()) - 1;
}

int ParameterSet::index_of(const std::string& name) const {
    for (std::size_t i = 0; i < tensors_.size(); ++i)
        if (tensors_[i].name == name) return static_cast<int>(i);
    return -1;
}

std::vector<std::string> ParameterSet::groups() const {
    std::vector<std::string> out;
    for (const auto& t : tensors_)
        if (std::find(out.begin(), out.end(), t.group) == out.end()) out.push_back(t.group);
    return out;
}

std::vector<int> ParameterSet::indices_in_group(const std::string& group) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < tensors_.size(); ++i)
        if (tensors_[i].group == group) out.push_back(static_cast<int>(i));
    return out;
}

std::size_t ParameterSet::scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += static_cast<std::size_t>(t.value.size());
    return n;
}

namespace {

void draw(ParameterTensor& t, std::uint64_t seed) {
    std::mt19937_64 rng(derive_seed(seed, {hash_string(t.name)}));
    switch (t.init) {
        case InitKind::zeros:
            t.value.setZero();
            break;
        case InitKind::ones:
            t.value.setOnes();
            break;
        case InitKind::uniform: {
            std::uniform_real_distribution<double> d(-t.init_scale, t.init_scale);
            for (Eigen::Index i = 0; i < t.value.size(); ++i) t.value.data()[i] = d(rng);
            break;
        }
        case InitKind::normal: {
            std::normal_distribution<double> d(0.0, t.init_scale);
            for (Eigen::Index i = 0; i < t.value.size(); ++i) t.value.data()[i] = d(rng);
            break;
        }
    }
}

ParameterTensor make_tensor(std::string name, std::string group, Eigen::Index rows, Eigen::Index cols, InitKind init,
                            double scale, std::uint64_t seed) {
    ParameterTensor t{std::move(name), std::move(group), Matrix::Zero(rows, cols), init, scale};
    draw(t, seed);
    return t;
}

}  // namespace

// ---------------------------------------------------------------- model

Model::Model(ModelConfig config, CohortSchema schema, std::uint64_t init_seed)
    : config_(config.resolved(schema)), schema_(std::move(schema)) {
    schema_.validate();
    config_.validate(schema_);
    build_layout(init_seed);
}

std::vector<Model::BlockParams> Model::add_stack(const std::string& prefix, const std::string& group, int width,
                                                 std::uint64_t seed) {
    const int aw = config_.attention_width();
    const int hidden = width * config_.mult;
    std::vector<BlockParams> blocks;
    for (int l = 0; l < config_.depth; ++l) {
        const std::string p = prefix + ".layer" + std::to_string(l) + ".";
        auto lin = [&](const std::string& n, int out, int in, int& w, int& b) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(in));
            w = params_.add(make_tensor(p + n + ".weight", group, out, in, InitKind::uniform, bound, seed));
            b = params_.add(make_tensor(p + n + ".bias", group, 1, out, InitKind::uniform, bound, seed));
        };
        auto norm = [&](const std::string& n, int& g, int& b) {
            g = params_.add(make_tensor(p + n + ".gamma", group, 1, width, InitKind::ones, 0.0, seed));
            b = params_.add(make_tensor(p + n + ".beta", group, 1, width, InitKind::zeros, 0.0, seed));
        };
        BlockParams bp{};
        norm("ln1", bp.ln1_g, bp.ln1_b);
        lin("q", aw, width, bp.wq, bp.bq);
        lin("k", aw, width, bp.wk, bp.bk);
        lin("v", aw, width, bp.wv, bp.bv);
        lin("out", width, aw, bp.wo, bp.bo);
        norm("ln2", bp.ln2_g, bp.ln2_b);
        lin("ff1", 2 * hidden, width, bp.w1, bp.b1);
        lin("ff2", width, hidden, bp.w2, bp.b2);
        blocks.push_back(bp);
    }
    return blocks;
}

void Model::build_layout(std::uint64_t seed) {
    const int dj = config_.joint_width;
    for (int m = 0; m < num_sources(); ++m) {
        const auto& src = schema_.sources[static_cast<std::size_t>(m)];
        const int d = embed_width(m);
        const double tok_bound = 1.0 / std::sqrt(static_cast<double>(d));
        const std::string base = "src." + src.source_name;
        SourceParams sp;

        const std::string tg = base + ".tokenizer";
        sp.feature_cls =
            params_.add(make_tensor(tg + ".cls", tg, 1, d, InitKind::normal, config_.cls_init_std, seed));
        if (src.num_numeric() > 0) {
            sp.num_w = params_.add(
                make_tensor(tg + ".numeric_weight", tg, src.num_numeric(), d, InitKind::uniform, tok_bound, seed));
            sp.num_b = params_.add(
                make_tensor(tg + ".numeric_bias", tg, src.num_numeric(), d, InitKind::uniform, tok_bound, seed));
        }
        for (const auto& cf : src.categorical_features) {
            sp.cat_tables.push_back(params_.add(make_tensor(tg + ".table." + cf.name, tg,
                                                            static_cast<Eigen::Index>(cf.vocabulary.size()), d,
                                                            InitKind::uniform, tok_bound, seed)));
        }

        sp.feature_blocks = add_stack(base + ".feature_transformer", base + ".feature_transformer", d, seed);

        const std::string ig = base + ".its_transformer";
        sp.time_cls = params_.add(make_tensor(ig + ".cls", ig, 1, d, InitKind::normal, config_.cls_init_std, seed));
        sp.time_blocks = add_stack(ig, ig, d, seed);

        const std::string pg = base + ".projection";
        const int hidden = d * config_.mult;
        const double b1 = 1.0 / std::sqrt(static_cast<double>(d));
        const double b2 = 1.0 / std::sqrt(static_cast<double>(hidden));
        sp.proj_ln_g = params_.add(make_tensor(pg + ".ln.gamma", pg, 1, d, InitKind::ones, 0.0, seed));
        sp.proj_ln_b = params_.add(make_tensor(pg + ".ln.beta", pg, 1, d, InitKind::zeros, 0.0, seed));
        sp.proj_w1 = params_.add(make_tensor(pg + ".fc1.weight", pg, 2 * hidden, d, InitKind::uniform, b1, seed));
        sp.proj_b1 = params_.add(make_tensor(pg + ".fc1.bias", pg, 1, 2 * hidden, InitKind::uniform, b1, seed));
        sp.proj_w2 = params_.add(make_tensor(pg + ".fc2.weight", pg, dj, hidden, InitKind::uniform, b2, seed));
        sp.proj_b2 = params_.add(make_tensor(pg + ".fc2.bias", pg, 1, dj, InitKind::uniform, b2, seed));
        sources_.push_back(std::move(sp));
    }

    source_blocks_ = add_stack("source_transformer", "source_transformer", dj, seed);

    const int df = config_.fusion_width;
    const double fb = 1.0 / std::sqrt(static_cast<double>(dj));
    fusion_w_ = params_.add(make_tensor("fusion.weight", "fusion", df, dj, InitKind::uniform, fb, seed));
    fusion_b_ = params_.add(make_tensor("fusion.bias", "fusion", 1, df, InitKind::uniform, fb, seed));
    fusion_u_ = params_.add(make_tensor("fusion.context", "fusion", df, 1, InitKind::uniform,
                                        1.0 / std::sqrt(static_cast<double>(df)), seed));

    head_ln_g_ = params_.add(make_tensor("head.ln.gamma", "head", 1, dj, InitKind::ones, 0.0, seed));
    head_ln_b_ = params_.add(make_tensor("head.ln.beta", "head", 1, dj, InitKind::zeros, 0.0, seed));
    head_w_ = params_.add(make_tensor("head.weight", "head", config_.num_classes, dj, InitKind::uniform, fb, seed));
    head_b_ = params_.add(make_tensor("head.bias", "head", 1, config_.num_classes, InitKind::uniform, fb, seed));
}

void Model::reinitialize_group(const std::string& group, std::uint64_t seed) {
    const auto idx = params_.indices_in_group(group);
    if (idx.empty()) throw InvalidInput("unknown parameter group '" + group + "'");
    for (int i : idx) draw(params_[static_cast<std::size_t>(i)], seed);
}

void Model::reset_head(int num_classes, std::uint64_t seed) {
    require_positive(num_classes, "num_classes");
    config_.num_classes = num_classes;
    const int dj = config_.joint_width;
    params_[static_cast<std::size_t>(head_w_)].value = Matrix::Zero(num_classes, dj);
    params_[static_cast<std::size_t>(head_b_)].value = Matrix::Zero(1, num_classes);
    reinitialize_group("head", seed);
}

// ---------------------------------------------------------------- graph

GraphContext::GraphContext(ag::Tape& tape, const Model& model, bool training, std::mt19937_64* rng)
    : tape_(tape), model_(model), training_(training), rng_(rng), leaf_ids_(model.params().size(), -1) {}

ag::Var GraphContext::param(int index) {
    auto& id = leaf_ids_.at(static_cast<std::size_t>(index));
    if (id < 0) {
        const bool train = trainable_ == nullptr || (*trainable_)[static_cast<std::size_t>(index)];
        id = tape_.parameter(model_.params()[static_cast<std::size_t>(index)].value, index, train).id;
    }
    return {&tape_, id};
}

ag::Var GraphContext::dropout(ag::Var x) {
    const double p = model_.config().dropout;
    if (!training_ || rng_ == nullptr || p == 0.0) return x;
    return ag::dropout(x, p, *rng_);
}

std::vector<double> time_encoding_periods(int width, double min_period, double max_period) {
    if (width <= 0 || width % 2 != 0) throw InvalidInput("time encoding width must be positive and even");
    const int k_count = width / 2;
    std::vector<double> periods(static_cast<std::size_t>(k_count));
    for (int k = 0; k < k_count; ++k) {
        const double frac = k_count == 1 ? 0.0 : static_cast<double>(k) / (k_count - 1);
        periods[static_cast<std::size_t>(k)] = min_period * std::pow(max_period / min_period, frac);
    }
    return periods;
}

Matrix time_encoding(std::span<const double> offsets, int width, double min_period, double max_period) {
    const auto periods = time_encoding_periods(width, min_period, max_period);
    Matrix out(static_cast<Eigen::Index>(offsets.size()), width);
    for (std::size_t i = 0; i < offsets.size(); ++i) {
        for (std::size_t k = 0; k < periods.size(); ++k) {
            const double angle = 2.0 * std::numbers::pi * offsets[i] / periods[k];
            out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(2 * k)) = std::sin(angle);
            out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(2 * k + 1)) = std::cos(angle);
        }
    }
    return out;
}

ag::Var Model::tokenize(GraphContext& ctx, int source, std::span<const TimePoint> points) const {
    const auto& src = schema_.sources.at(static_cast<std::size_t>(source));
    const auto& sp = sources_[static_cast<std::size_t>(source)];
    const int d = embed_width(source);
    const int n_num = src.num_numeric();
    const int n_cat = src.num_categorical();
    const int n_tok = 1 + n_num + n_cat;
    const auto T = static_cast<int>(points.size());

    std::vector<double> x(static_cast<std::size_t>(T * n_num));
    std::vector<int> ids(static_cast<std::size_t>(T * n_cat));
    for (int t = 0; t < T; ++t) {
        const auto& tp = points[static_cast<std::size_t>(t)];
        if (static_cast<int>(tp.numeric_values.size()) != n_num ||
            static_cast<int>(tp.categorical_values.size()) != n_cat)
            throw Defect("source " + src.source_name + ": time point arity does not match the schema");
        for (int j = 0; j < n_num; ++j) x[static_cast<std::size_t>(t * n_num + j)] = tp.numeric_values[j];
        for (int j = 0; j < n_cat; ++j) {
            const int id = tp.categorical_values[static_cast<std::size_t>(j)];
            const auto vocab = static_cast<int>(src.categorical_features[static_cast<std::size_t>(j)].vocabulary.size());
            if (id < 0 || id >= vocab)
                throw Defect("source " + src.source_name + ": category id " + std::to_string(id) +
                             " out of vocabulary for " + src.categorical_features[static_cast<std::size_t>(j)].name);
            ids[static_cast<std::size_t>(t * n_cat + j)] = id;
        }
    }

    ag::Var cls = ctx.param(sp.feature_cls);
    ag::Var nw = n_num > 0 ? ctx.param(sp.num_w) : ag::Var{};
    ag::Var nb = n_num > 0 ? ctx.param(sp.num_b) : ag::Var{};
    std::vector<ag::Var> tables;
    for (int idx : sp.cat_tables) tables.push_back(ctx.param(idx));

    Matrix out(static_cast<Eigen::Index>(T * n_tok), d);
    for (int t = 0; t < T; ++t) {
        const Eigen::Index r0 = t * n_tok;
        out.row(r0) = cls.value().row(0);
        for (int j = 0; j < n_num; ++j)
            out.row(r0 + 1 + j) = nb.value().row(j) + x[static_cast<std::size_t>(t * n_num + j)] * nw.value().row(j);
        for (int j = 0; j < n_cat; ++j)
            out.row(r0 + 1 + n_num + j) = tables[static_cast<std::size_t>(j)].value().row(ids[static_cast<std::size_t>(t * n_cat + j)]);
    }

    ag::Tape& tape = ctx.tape();
    bool needs = tape.any_needs_grad({cls});
    for (auto v : tables) needs = needs || tape.any_needs_grad({v});
    if (n_num > 0) needs = needs || tape.any_needs_grad({nw, nb});
    ag::Var res = tape.push(std::move(out), needs);
    if (needs) {
        tape.node(res).back = [&tape, res, cls, nw, nb, tables, x = std::move(x), ids = std::move(ids), T, n_num,
                               n_cat, n_tok] {
            const auto& g = tape.node(res).grad;
            for (int t = 0; t < T; ++t) {
                const Eigen::Index r0 = t * n_tok;
                if (tape.needs_grad(cls)) tape.grad(cls).row(0) += g.row(r0);
                for (int j = 0; j < n_num; ++j) {
                    if (tape.needs_grad(nb)) tape.grad(nb).row(j) += g.row(r0 + 1 + j);
                    if (tape.needs_grad(nw))
                        tape.grad(nw).row(j) += x[static_cast<std::size_t>(t * n_num + j)] * g.row(r0 + 1 + j);
                }
                for (int j = 0; j < n_cat; ++j) {
                    const auto& tab = tables[static_cast<std::size_t>(j)];
                    if (tape.needs_grad(tab))
                        tape.grad(tab).row(ids[static_cast<std::size_t>(t * n_cat + j)]) += g.row(r0 + 1 + n_num + j);
                }
            }
        };
    }
    return res;
}

ag::Var Model::run_block(GraphContext& ctx, const BlockParams& p, ag::Var x, std::span<const ag::AttentionGroup> groups,
                         std::span<const int> summary_rows) const {
    ag::Var y = ag::layer_norm(x, ctx.param(p.ln1_g), ctx.param(p.ln1_b));
    ag::Var xq = x;
    ag::Var yq = y;
    std::vector<ag::AttentionGroup> qgroups(groups.begin(), groups.end());
    if (!summary_rows.empty()) {
        xq = ag::select_rows(x, summary_rows);
        yq = ag::select_rows(y, summary_rows);
        for (std::size_t g = 0; g < qgroups.size(); ++g) {
            qgroups[g].query_begin = static_cast<int>(g);
            qgroups[g].query_end = static_cast<int>(g) + 1;
        }
    }
    ag::Var q = ag::linear(yq, ctx.param(p.wq), ctx.param(p.bq));
    ag::Var k = ag::linear(y, ctx.param(p.wk), ctx.param(p.bk));
    ag::Var v = ag::linear(y, ctx.param(p.wv), ctx.param(p.bv));
    ag::Var att = ag::grouped_attention(q, k, v, config_.heads, qgroups);
    ag::Var h = ag::add(xq, ctx.dropout(ag::linear(att, ctx.param(p.wo), ctx.param(p.bo))));
    ag::Var n2 = ag::layer_norm(h, ctx.param(p.ln2_g), ctx.param(p.ln2_b));
    ag::Var ff = ag::linear(ag::geglu(ag::linear(n2, ctx.param(p.w1), ctx.param(p.b1))), ctx.param(p.w2),
                            ctx.param(p.b2));
    return ag::add(h, ctx.dropout(ff));
}

ag::Var Model::run_stack(GraphContext& ctx, const std::vector<BlockParams>& blocks, ag::Var x,
                         std::span<const ag::AttentionGroup> groups, std::span<const int> summary_rows) const {
    if (blocks.empty()) return summary_rows.empty() ? x : ag::select_rows(x, summary_rows);
    for (std::size_t l = 0; l < blocks.size(); ++l) {
        const bool last = l + 1 == blocks.size();
        x = run_block(ctx, blocks[l], x, groups, last ? summary_rows : std::span<const int>{});
    }
    return x;
}

ag::Var Model::feature_aggregate(GraphContext& ctx, int source, ag::Var tokens, int num_points) const {
    const auto& src = schema_.sources.at(static_cast<std::size_t>(source));
    const int n_tok = 1 + src.num_features();
    if (num_points <= 0 || tokens.rows() != static_cast<Eigen::Index>(num_points) * n_tok)
        throw Defect("source " + src.source_name + ": token matrix does not match the number of time points");
    std::vector<ag::AttentionGroup> groups(static_cast<std::size_t>(num_points));
    std::vector<int> cls_rows(static_cast<std::size_t>(num_points));
    for (int t = 0; t < num_points; ++t) {
        groups[static_cast<std::size_t>(t)] = {t * n_tok, (t + 1) * n_tok, t * n_tok, (t + 1) * n_tok};
        cls_rows[static_cast<std::size_t>(t)] = t * n_tok;
    }
    return run_stack(ctx, sources_[static_cast<std::size_t>(source)].feature_blocks, tokens, groups, cls_rows);
}

ag::Var Model::timestamp_aggregate(GraphContext& ctx, int source, ag::Var features,
                                   std::span<const double> offsets) const {
    const auto& src = schema_.sources.at(static_cast<std::size_t>(source));
    const auto T = static_cast<int>(offsets.size());
    if (T == 0) throw Defect("source " + src.source_name + ": empty sequence reached the temporal transformer");
    if (features.rows() != T) throw Defect("source " + src.source_name + ": feature rows do not match offsets");
    const int d = embed_width(source);
    ag::Var te = ctx.tape().constant(time_encoding(offsets, d, config_.min_period_minutes, config_.max_period_minutes));
    const std::vector<ag::Var> parts = {ctx.param(sources_[static_cast<std::size_t>(source)].time_cls),
                                        ag::add(features, te)};
    ag::Var x = ag::concat_rows(parts);
    const std::vector<ag::AttentionGroup> groups = {{0, T + 1, 0, T + 1}};
    const std::vector<int> summary = {0};
    return run_stack(ctx, sources_[static_cast<std::size_t>(source)].time_blocks, x, groups, summary);
}

ag::Var Model::joint_project(GraphContext& ctx, int source, ag::Var z) const {
    const auto& sp = sources_.at(static_cast<std::size_t>(source));
    if (z.cols() != embed_width(source))
        throw Defect("source " + schema_.sources[static_cast<std::size_t>(source)].source_name +
                     ": summary width does not match the configured embedding width");
    ag::Var n = ag::layer_norm(z, ctx.param(sp.proj_ln_g), ctx.param(sp.proj_ln_b));
    ag::Var h = ag::geglu(ag::linear(n, ctx.param(sp.proj_w1), ctx.param(sp.proj_b1)));
    return ag::linear(h, ctx.param(sp.proj_w2), ctx.param(sp.proj_b2));
}

ag::Var Model::integrate_sources(GraphContext& ctx, ag::Var u) const {
    const auto M = static_cast<int>(u.rows());
    const std::vector<ag::AttentionGroup> groups = {{0, M, 0, M}};
    return run_stack(ctx, source_blocks_, u, groups, {});
}

FusionOutput Model::fuse_sources(GraphContext& ctx, ag::Var a) const {
    ag::Var hidden = ag::tanh(ag::linear(a, ctx.param(fusion_w_), ctx.param(fusion_b_)));
    ag::Var scores = ag::matmul(hidden, ctx.param(fusion_u_));
    ag::Var alpha = ag::softmax_column(scores);
    ag::Var v = ag::matmul(ag::transpose(alpha), a);
    return {v, alpha};
}

ag::Var Model::predict(GraphContext& ctx, ag::Var v) const {
    ag::Var n = ag::layer_norm(v, ctx.param(head_ln_g_), ctx.param(head_ln_b_));
    return ag::linear(ag::relu(n), ctx.param(head_w_), ctx.param(head_b_));
}

ForwardOutput Model::forward(GraphContext& ctx, const ModelInput& input) const {
    if (static_cast<int>(input.sources.size()) != num_sources())
        throw Defect("model input has " + std::to_string(input.sources.size()) + " sources, model expects " +
                     std::to_string(num_sources()));
    ForwardOutput out;
    for (int m = 0; m < num_sources(); ++m) {
        const auto points = input.sources[static_cast<std::size_t>(m)];
        const auto& name = schema_.sources[static_cast<std::size_t>(m)].source_name;
        if (points.empty()) throw Defect("source " + name + ": no time points (placeholder missing)");
        if (points.size() > static_cast<std::size_t>(config_.max_seq_len))
            throw Defect("source " + name + ": sequence longer than max_seq_len");
        std::vector<double> offsets(points.size());
        for (std::size_t i = 0; i < points.size(); ++i) offsets[i] = points[i].offset_minutes;
        ag::Var tokens = tokenize(ctx, m, points);
        ag::Var f = feature_aggregate(ctx, m, tokens, static_cast<int>(points.size()));
        ag::Var z = timestamp_aggregate(ctx, m, f, offsets);
        out.f.push_back(f);
        out.z.push_back(z);
        out.u.push_back(joint_project(ctx, m, z));
    }
    out.a = integrate_sources(ctx, ag::concat_rows(out.u));
    out.fusion = fuse_sources(ctx, out.a);
    out.logits = predict(ctx, out.fusion.v);
    return out;
}

ActivationBundle ForwardOutput::bundle() const {
    ActivationBundle b;
    for (auto v : f) b.f.push_back(v.value());
    for (auto v : z) b.z.push_back(v.value());
    Matrix um(static_cast<Eigen::Index>(u.size()), u.empty() ? 0 : u.front().cols());
    for (std::size_t i = 0; i < u.size(); ++i) um.row(static_cast<Eigen::Index>(i)) = u[i].value().row(0);
    b.u = std::move(um);
    b.a = a.value();
    const auto& al = fusion.alpha.value();
    b.alpha.assign(al.data(), al.data() + al.size());
    b.v = fusion.v.value();
    b.logits = logits.value();
    return b;
}

ActivationBundle Model::infer(const ModelInput& input) const {
    ag::Tape tape(false);
    GraphContext ctx(tape, *this);
    return forward(ctx, input).bundle();
}

Matrix softmax_row(const Matrix& logits) {
    Matrix p(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const double mx = logits.row(r).maxCoeff();
        p.row(r) = (logits.row(r).array() - mx).exp();
        p.row(r) /= p.row(r).sum();
    }
    return p;
}

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[8] = {'M', 'I', 'T', 'S', 'T', 'C', 'K', 'P'};

std::string digest_hex(const unsigned char* md, unsigned len) {
    static const char* hex = "0123456789abcdef";
    std::string s;
    for (unsigned i = 0; i < len; ++i) {
        s.push_back(hex[md[i] >> 4]);
        s.push_back(hex[md[i] & 15]);
    }
    return s;
}

template <class T>
void put(std::string& buf, T v) {
    char raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    buf.append(raw, sizeof(T));
}

void put_str(std::string& buf, const std::string& s) {
    put<std::uint64_t>(buf, s.size());
    buf.append(s);
}

struct Reader {
    std::string_view data;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (data.size() - pos < n) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos));
    }
    template <class T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, data.data() + pos, sizeof(T));
        pos += sizeof(T);
        return v;
    }
    std::string get_str() {
        const auto n = get<std::uint64_t>();
        need(n);
        std::string s(data.substr(pos, n));
        pos += n;
        return s;
    }
};

}  // namespace

std::string sha256_hex(std::string_view bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("SHA-256 computation failed");
    return digest_hex(md, len);
}

std::string file_sha256(const std::filesystem::path& path) { return sha256_hex(read_text_file(path)); }

void save_checkpoint(const std::filesystem::path& path, const Model& model, const json& extra) {
    const json cfg = {{"model_config", model.config().to_json()},
                      {"schema", schema_to_json(model.schema())},
                      {"extra", extra}};
    const std::string cfg_text = cfg.dump();
    std::string buf(kMagic, sizeof(kMagic));
    put<std::uint32_t>(buf, kCheckpointVersion);
    put_str(buf, cfg_text);
    put_str(buf, sha256_hex(cfg_text));
    const auto& ps = model.params();
    put<std::uint64_t>(buf, ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const auto& t = ps[i];
        put_str(buf, t.name);
        put_str(buf, t.group);
        put<std::uint64_t>(buf, static_cast<std::uint64_t>(t.value.rows()));
        put<std::uint64_t>(buf, static_cast<std::uint64_t>(t.value.cols()));
        buf.append(reinterpret_cast<const char*>(t.value.data()),
                   static_cast<std::size_t>(t.value.size()) * sizeof(double));
    }
    buf.append(sha256_hex(buf));
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot write checkpoint " + tmp);
        f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!f) throw std::runtime_error("write failed for checkpoint " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    const std::string data = ss.str();

    constexpr std::size_t kHashLen = 64;
    if (data.size() < sizeof(kMagic) + 4 + kHashLen || std::memcmp(data.data(), kMagic, sizeof(kMagic)) != 0)
        throw CheckpointError(data.size() < sizeof(kMagic) ? "checkpoint truncated" : "not a checkpoint file (bad magic)");
    Reader r{data, sizeof(kMagic)};
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                              std::to_string(kCheckpointVersion) + ")");
    const std::string cfg_text = r.get_str();
    const std::string stored_cfg_hash = r.get_str();
    const std::string actual_cfg_hash = sha256_hex(cfg_text);
    if (stored_cfg_hash != actual_cfg_hash)
        throw CheckpointError("config hash mismatch: stored " + stored_cfg_hash + ", computed " + actual_cfg_hash);

    const std::string_view body(data.data(), data.size() - std::min(data.size(), kHashLen));
    const std::string stored_integrity = data.size() >= kHashLen ? data.substr(data.size() - kHashLen) : "";

    LoadedCheckpoint out;
    json cfg;
    try {
        cfg = json::parse(cfg_text);
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("checkpoint config is not valid JSON: ") + e.what());
    }
    ModelConfig mc;
    CohortSchema schema;
    try {
        mc = ModelConfig::from_json(cfg.at("model_config"));
        schema = schema_from_json(cfg.at("schema"));
    } catch (const std::exception& e) {
        throw CheckpointError(std::string("checkpoint config invalid: ") + e.what());
    }
    out.extra = cfg.value("extra", json::object());
    out.model.emplace(mc, schema, 0);
    auto& ps = out.model->params();

    const auto count = r.get<std::uint64_t>();
    if (count != ps.size())
        throw CheckpointError("checkpoint holds " + std::to_string(count) + " tensors, config implies " +
                              std::to_string(ps.size()));
    for (std::size_t i = 0; i < count; ++i) {
        const std::string name = r.get_str();
        const std::string group = r.get_str();
        const auto rows = r.get<std::uint64_t>();
        const auto cols = r.get<std::uint64_t>();
        auto& t = ps[i];
        if (name != t.name || group != t.group)
            throw CheckpointError("tensor " + std::to_string(i) + " is '" + name + "', expected '" + t.name + "'");
        if (rows != static_cast<std::uint64_t>(t.value.rows()) || cols != static_cast<std::uint64_t>(t.value.cols()))
            throw CheckpointError("shape mismatch for " + name + ": stored " + std::to_string(rows) + "x" +
                                  std::to_string(cols) + ", expected " + std::to_string(t.value.rows()) + "x" +
                                  std::to_string(t.value.cols()));
        const std::size_t bytes = rows * cols * sizeof(double);
        r.need(bytes);
        std::memcpy(t.value.data(), data.data() + r.pos, bytes);
        r.pos += bytes;
    }
    if (r.pos != body.size()) throw CheckpointError("checkpoint truncated or has trailing bytes");
    const std::string actual_integrity = sha256_hex(body);
    if (stored_integrity != actual_integrity)
        throw CheckpointError("integrity hash mismatch: stored " + stored_integrity + ", computed " + actual_integrity);
    out.config_hash = actual_cfg_hash;
    out.file_hash = sha256_hex(data);
    return out;
}

}  // namespace mitst
