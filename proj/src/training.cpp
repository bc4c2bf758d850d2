#include "mitst/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "mitst/random.hpp"

namespace mitst {

void TrainConfig::validate() const {
    if (epochs < 1) throw InvalidInput("train config: epochs must be >= 1");
    if (batch_size < 1) throw InvalidInput("train config: batch_size must be >= 1");
    if (patience < 1) throw InvalidInput("train config: patience must be >= 1");
    if (!(learning_rate > 0.0)) throw InvalidInput("train config: learning_rate must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
        throw InvalidInput("train config: betas must lie in [0, 1)");
    if (!(epsilon > 0.0)) throw InvalidInput("train config: epsilon must be positive");
}

json TrainConfig::to_json() const {
    return json{{"epochs", epochs},         {"batch_size", batch_size}, {"learning_rate", learning_rate},
                {"beta1", beta1},           {"beta2", beta2},           {"epsilon", epsilon},
                {"patience", patience},     {"seed", seed},             {"freeze_spec", freeze_spec}};
}

TrainConfig TrainConfig::from_json(const json& j) {
    static const std::set<std::string> known = {"epochs",   "batch_size", "learning_rate", "beta1",      "beta2",
                                                "epsilon",  "patience",   "seed",          "freeze_spec"};
    if (!j.is_object()) throw InvalidInput("train config must be a JSON object");
    for (const auto& [k, _] : j.items())
        if (!known.count(k)) throw InvalidInput("train config: unknown key '" + k + "'");
    TrainConfig c;
    try {
        c.epochs = j.value("epochs", c.epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.beta1 = j.value("beta1", c.beta1);
        c.beta2 = j.value("beta2", c.beta2);
        c.epsilon = j.value("epsilon", c.epsilon);
        c.patience = j.value("patience", c.patience);
        c.seed = j.value("seed", c.seed);
        c.freeze_spec = j.value("freeze_spec", c.freeze_spec);
    } catch (const json::exception& e) {
        throw InvalidInput(std::string("train config: ") + e.what());
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------- data

std::array<std::size_t, kNumClasses> Dataset::class_counts() const {
    std::array<std::size_t, kNumClasses> c{};
    for (const auto& e : examples) ++c[static_cast<std::size_t>(e.label)];
    return c;
}

std::vector<int> Dataset::labels() const {
    std::vector<int> out(examples.size());
    for (std::size_t i = 0; i < examples.size(); ++i) out[i] = static_cast<int>(examples[i].label);
    return out;
}

Dataset make_dataset(const Preprocessor& pre, std::span<const Episode> cohort, std::span<const std::size_t> indices,
                     const LabelRule& rule) {
    Dataset d;
    for (std::size_t idx : indices) {
        const auto& ep = cohort[idx];
        const std::size_t local = d.episodes.size();
        auto ex = build_examples(ep, local, rule);
        d.episodes.push_back(pre.prepare(ep));
        d.tags.push_back(ep.subgroup_tags);
        d.stay_ids.push_back(ep.stay_id);
        d.source_indices.push_back(idx);
        d.examples.insert(d.examples.end(), ex.begin(), ex.end());
    }
    return d;
}

ModelInput example_input(const Preprocessor& pre, const Dataset& data, std::size_t example) {
    const auto& ex = data.examples.at(example);
    return pre.view(data.episodes.at(ex.episode_index), ex.cutoff_offset);
}

// ---------------------------------------------------------------- undersampling

UndersamplingSchedule::UndersamplingSchedule(std::vector<int> labels, int num_classes, std::uint64_t seed)
    : num_classes_(num_classes), seed_(seed), streams_(static_cast<std::size_t>(num_classes)) {
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int c = labels[i];
        if (c < 0 || c >= num_classes) throw InvalidInput("label out of range in undersampling");
        streams_[static_cast<std::size_t>(c)].members.push_back(i);
    }
    per_class_ = std::numeric_limits<std::size_t>::max();
    for (int c = 0; c < num_classes; ++c) {
        const auto n = streams_[static_cast<std::size_t>(c)].members.size();
        if (n == 0) {
            const std::string name =
                num_classes == kNumClasses ? class_name(static_cast<GlucoseClass>(c)) : std::to_string(c);
            throw InvalidInput("undersampling: class " + name + " has no training examples");
        }
        per_class_ = std::min(per_class_, n);
    }
}

void UndersamplingSchedule::refill(int cls, const std::set<std::size_t>& exclude) {
    auto& s = streams_[static_cast<std::size_t>(cls)];
    s.queue = s.members;
    std::mt19937_64 rng(derive_seed(seed_, {hash_string("undersample"), static_cast<std::uint64_t>(cls), s.pass}));
    std::shuffle(s.queue.begin(), s.queue.end(), rng);
    // Examples already drawn this epoch go to the end of the new pass.
    std::stable_partition(s.queue.begin(), s.queue.end(), [&](std::size_t i) { return !exclude.count(i); });
    s.pos = 0;
    ++s.pass;
}

std::vector<std::size_t> UndersamplingSchedule::next_epoch() {
    std::vector<std::size_t> out;
    out.reserve(per_class_ * static_cast<std::size_t>(num_classes_));
    for (int c = 0; c < num_classes_; ++c) {
        auto& s = streams_[static_cast<std::size_t>(c)];
        std::set<std::size_t> taken;
        while (taken.size() < per_class_) {
            if (s.pos >= s.queue.size()) refill(c, taken);
            const std::size_t i = s.queue[s.pos++];
            if (taken.insert(i).second) out.push_back(i);
        }
    }
    ++epoch_;
    return out;
}

std::vector<std::size_t> undersample_epoch(std::span<const int> labels, int num_classes, std::uint64_t seed,
                                           int epoch_index) {
    if (epoch_index < 0) throw InvalidInput("epoch index must be >= 0");
    UndersamplingSchedule s(std::vector<int>(labels.begin(), labels.end()), num_classes, seed);
    std::vector<std::size_t> draw;
    for (int e = 0; e <= epoch_index; ++e) draw = s.next_epoch();
    return draw;
}

double cross_entropy(std::span<const double> logits, int label) {
    if (label < 0 || static_cast<std::size_t>(label) >= logits.size()) throw InvalidInput("label out of range");
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    return std::log(z) + mx - logits[static_cast<std::size_t>(label)];
}

double EpochRecord::score() const {
    if (!val_auroc || !val_auprc) return -std::numeric_limits<double>::infinity();
    return *val_auroc + *val_auprc;
}

std::string history_csv(const std::vector<EpochRecord>& history) {
    std::ostringstream os;
    os << "epoch,train_loss,val_auroc,val_auprc,stopped\n";
    for (const auto& r : history)
        os << r.epoch << ',' << format_double(r.train_loss) << ',' << optional_to_string(r.val_auroc) << ','
           << optional_to_string(r.val_auprc) << ',' << (r.stopped ? 1 : 0) << '\n';
    return os.str();
}

// ---------------------------------------------------------------- optimization

Adam::Adam(const ParameterSet& params, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        m_.push_back(Matrix::Zero(params[i].value.rows(), params[i].value.cols()));
        v_.push_back(Matrix::Zero(params[i].value.rows(), params[i].value.cols()));
    }
}

void Adam::step(ParameterSet& params, const std::vector<Matrix>& grads, const std::vector<bool>& trainable) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!trainable[i] || grads[i].size() == 0) continue;
        m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
        v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i].cwiseProduct(grads[i]);
        params[i].value.array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
    }
}

BatchGradient batch_gradient(const Model& model, const Preprocessor& pre, const Dataset& data,
                             std::span<const std::size_t> examples, const std::vector<bool>& trainable,
                             std::mt19937_64* dropout_rng) {
    BatchGradient out;
    const auto& ps = model.params();
    out.grads.resize(ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i)
        if (trainable[i]) out.grads[i] = Matrix::Zero(ps[i].value.rows(), ps[i].value.cols());
    const bool any_trainable = std::find(trainable.begin(), trainable.end(), true) != trainable.end();
    double loss_sum = 0.0;
    for (std::size_t e : examples) {
        ag::Tape tape(any_trainable);
        GraphContext ctx(tape, model, dropout_rng != nullptr, dropout_rng);
        ctx.set_trainable(&trainable);
        const auto input = example_input(pre, data, e);
        const auto fwd = model.forward(ctx, input);
        const auto loss = ag::softmax_cross_entropy(fwd.logits, static_cast<int>(data.examples[e].label));
        loss_sum += loss.value()(0, 0);
        if (!any_trainable || !tape.needs_grad(loss)) continue;
        tape.backward(loss);
        for (const auto& [pi, g] : tape.parameter_grads())
            if (trainable[static_cast<std::size_t>(pi)]) out.grads[static_cast<std::size_t>(pi)] += *g;
    }
    const double n = static_cast<double>(std::max<std::size_t>(1, examples.size()));
    out.mean_loss = loss_sum / n;
    for (auto& g : out.grads)
        if (g.size()) g /= n;
    return out;
}

std::set<std::string> resolve_freeze_spec(const Model& model, std::span<const std::string> spec) {
    const auto groups = model.params().groups();
    std::set<std::string> out;
    for (const auto& item : spec) {
        bool matched = false;
        if (!item.empty() && item.back() == '*') {
            const std::string prefix = item.substr(0, item.size() - 1);
            for (const auto& g : groups)
                if (g.compare(0, prefix.size(), prefix) == 0) {
                    out.insert(g);
                    matched = true;
                }
        } else if (std::find(groups.begin(), groups.end(), item) != groups.end()) {
            out.insert(item);
            matched = true;
        }
        if (!matched) throw InvalidInput("freeze spec names unknown parameter group '" + item + "'");
    }
    return out;
}

std::vector<std::string> default_finetune_freeze_spec() { return {"src.*"}; }

std::vector<ScoredExample> score_dataset(const Model& model, const Preprocessor& pre, const Dataset& data) {
    std::vector<ScoredExample> out;
    out.reserve(data.examples.size());
    for (std::size_t i = 0; i < data.examples.size(); ++i) {
        const auto& ex = data.examples[i];
        const auto b = model.infer(example_input(pre, data, i));
        const Matrix p = softmax_row(b.logits);
        ScoredExample s;
        s.scores.assign(p.data(), p.data() + p.size());
        s.truth = static_cast<int>(ex.label);
        s.horizon_minutes = ex.horizon_minutes;
        s.next_target_value = ex.next_target_value;
        s.current_target_value = ex.current_target_value;
        s.subgroup_tags = data.tags[ex.episode_index];
        out.push_back(std::move(s));
    }
    return out;
}

TrainResult train(Model& model, const Preprocessor& pre, const Dataset& train_data, const Dataset& val_data,
                  const TrainConfig& config, const TrainHooks& hooks) {
    config.validate();
    const int C = model.config().num_classes;
    auto& ps = model.params();
    const auto frozen = resolve_freeze_spec(model, config.freeze_spec);
    std::vector<bool> trainable(ps.size());
    TrainResult result;
    for (std::size_t i = 0; i < ps.size(); ++i) {
        trainable[i] = !frozen.count(ps[i].group);
        if (trainable[i]) result.trainable_scalars += static_cast<std::size_t>(ps[i].value.size());
    }

    Adam adam(ps, config.learning_rate, config.beta1, config.beta2, config.epsilon);
    UndersamplingSchedule schedule(train_data.labels(), C, config.seed);
    ValidationFn validate = hooks.validate;
    if (!validate) {
        validate = [&](const Model& m, int) {
            const auto scored = score_dataset(m, pre, val_data);
            return std::make_pair(macro_auroc(scored, C), macro_auprc(scored, C));
        };
    }

    std::vector<Matrix> best;
    double best_score = -std::numeric_limits<double>::infinity();
    int since_best = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        auto order = schedule.next_epoch();
        std::mt19937_64 order_rng(derive_seed(config.seed, {hash_string("order"), static_cast<std::uint64_t>(epoch)}));
        std::shuffle(order.begin(), order.end(), order_rng);
        std::mt19937_64 dropout_rng(
            derive_seed(config.seed, {hash_string("dropout"), static_cast<std::uint64_t>(epoch)}));

        double loss_sum = 0.0;
        std::size_t batches = 0;
        const auto bs = static_cast<std::size_t>(config.batch_size);
        for (std::size_t start = 0; start < order.size(); start += bs) {
            const std::span<const std::size_t> batch(order.data() + start, std::min(bs, order.size() - start));
            auto bg = batch_gradient(model, pre, train_data, batch, trainable, &dropout_rng);
            if (!std::isfinite(bg.mean_loss))
                throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                                    std::to_string(batches));
            adam.step(ps, bg.grads, trainable);
            loss_sum += bg.mean_loss;
            ++batches;
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
        std::tie(rec.val_auroc, rec.val_auprc) = validate(model, epoch);
        const double score = rec.score();
        if (score > best_score || best.empty()) {
            rec.improved = score > best_score;
            best_score = std::max(best_score, score);
            result.best_epoch = epoch;
            best.clear();
            for (std::size_t i = 0; i < ps.size(); ++i) best.push_back(ps[i].value);
            since_best = 0;
        } else {
            ++since_best;
        }
        rec.stopped = since_best >= config.patience;
        result.history.push_back(rec);
        if (hooks.on_epoch) hooks.on_epoch(rec);
        if (rec.stopped) break;
    }
    for (std::size_t i = 0; i < ps.size(); ++i) ps[i].value = best[i];
    result.best_score = best_score;
    return result;
}

TrainResult fine_tune(Model& model, const Preprocessor& pre, const Dataset& train_data, const Dataset& val_data,
                      TrainConfig config, int num_classes, const TrainHooks& hooks) {
    if (config.freeze_spec.empty()) config.freeze_spec = default_finetune_freeze_spec();
    if (resolve_freeze_spec(model, config.freeze_spec).count("head"))
        throw InvalidInput("fine-tuning replaces the prediction head; it cannot be frozen");
    model.reset_head(num_classes, derive_seed(config.seed, {hash_string("head")}));
    return train(model, pre, train_data, val_data, config, hooks);
}

}  // namespace mitst
