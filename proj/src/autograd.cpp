#include "mitst/autograd.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

#include "mitst/data_model.hpp"

namespace mitst::ag {

const Matrix& Var::value() const { return tape->value(*this); }

Var Tape::push(Matrix value, bool needs_grad) {
    Node n;
    n.owned = std::move(value);
    n.needs_grad = needs_grad && record_;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Matrix value) { return push(std::move(value), false); }

Var Tape::parameter(const Matrix& value, int param_index, bool trainable) {
    Node n;
    n.external = &value;
    n.needs_grad = record_ && trainable;
    n.param_index = param_index;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

Matrix& Tape::grad(Var v) {
    auto& n = node(v);
    if (n.grad.size() == 0) n.grad = Matrix::Zero(n.val().rows(), n.val().cols());
    return n.grad;
}

bool Tape::any_needs_grad(std::initializer_list<Var> vs) const {
    if (!record_) return false;
    for (auto v : vs)
        if (node(v).needs_grad) return true;
    return false;
}

void Tape::backward(Var scalar) {
    if (!record_) throw Defect("backward on a tape that does not record");
    auto& root = node(scalar);
    if (root.val().size() != 1) throw Defect("backward requires a 1 x 1 root");
    grad(scalar)(0, 0) += 1.0;
    for (int i = scalar.id; i >= 0; --i) {
        auto& n = nodes_[static_cast<std::size_t>(i)];
        if (n.back && n.grad.size() != 0) n.back();
    }
}

std::vector<std::pair<int, const Matrix*>> Tape::parameter_grads() const {
    std::vector<std::pair<int, const Matrix*>> out;
    for (const auto& n : nodes_)
        if (n.param_index >= 0 && n.grad.size() != 0) out.emplace_back(n.param_index, &n.grad);
    return out;
}

namespace {

void require(bool ok, const char* what) {
    if (!ok) throw Defect(what);
}

}  // namespace

Var matmul(Var a, Var b) {
    Tape& t = *a.tape;
    require(a.cols() == b.rows(), "matmul: inner dimensions differ");
    Var out = t.push(a.value() * b.value(), t.any_needs_grad({a, b}));
    if (t.needs_grad(out)) {
        t.node(out).back = [&t, a, b, out] {
            const auto& g = t.node(out).grad;
            if (t.needs_grad(a)) t.grad(a).noalias() += g * b.value().transpose();
            if (t.needs_grad(b)) t.grad(b).noalias() += a.value().transpose() * g;
        };
    }
    return out;
}

Var transpose(Var a) {
    Tape& t = *a.tape;
    Var out = t.push(a.value().transpose(), t.any_needs_grad({a}));
    if (t.needs_grad(out)) {
        t.node(out).back = [&t, a, out] { t.grad(a) += t.node(out).grad.transpose(); };
    }
    return out;
}

Var linear(Var x, Var weight, Var bias) {
    Tape& t = *x.tape;
    require(x.cols() == weight.cols(), "linear: input width does not match weight");
    require(bias.rows() == 1 && bias.cols() == weight.rows(), "linear: bias shape mismatch");
    Matrix y = x.value() * weight.value().transpose();
    y.rowwise() += bias.value().row(0);
    Var out = t.push(std::move(y), t.any_needs_grad({x, weight, bias}));
    if (t.needs_grad(out)) {
        t.node(out).back = [&t, x, weight, bias, out] {
            const auto& g = t.node(out).grad;
            if (t.needs_grad(x)) t.grad(x).noalias() += g * weight.value();
            if (t.needs_grad(weight)) t.grad(weight).noalias() += g.transpose() * x.value();
            if (t.needs_grad(bias)) t.grad(bias) += g.colwise().sum();
        };
    }
    return out;
}

Var add(Var a, Var b) {
    Tape& t = *a.tape;
    require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
    Var out = t.push(a.value() + b.value(), t.any_needs_grad({a, b}));
    if (t.needs_grad(out)) {
        t.node(out).back = [&t, a, b, out] {
            const auto& g = t.node(out).grad;
            if (t.needs_grad(a)) t.grad(a) += g;
            if (t.needs_grad(b)) t.grad(b) += g;
        };
    }
    return out;
}

Var add_row(Var a, Var row) {
    Tape& t = *a.tape;
    require(row.rows() == 1 && row.cols() == a.cols(), "add_row: shape mismatch");
    Matrix y = a.value();
    y.rowwise() += row.value().row(0);
    Var out = t.push(std::move(y), t.any_needs_grad({a, row}));
    if (t.needs_grad(out)) {
        t.node(out).back = [&t, a, row, out] {
            const auto& g = t.node(out).grad;
            if (t.needs_grad(a)) t.grad(a) += g;
            if (t.needs_grad(row)) t.grad(row) += g.colwise().sum();
        };
    }
    return out;
}

Var mul(Var a, Var b) {
    Tape& t = *a.tape;
    require(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
    Var out = t.push(a.value().cwiseProduct(b.value()), t.any_needs_grad({a, b}));
    if (t.needs_grad(out)) {
        t.node(out).back = [&t, a, b, out] {
            const auto& g = t.node(out).grad;
            if (t.needs_grad(a)) t.grad(a) += g.cwiseProduct(b.value());
            if (t.needs_grad(b)) t.grad(b) += g.cwiseProduct(a.value());
        };
    }
    return out;
}

Var scale(Var a, double s) {
    Tape& t = *a.tape;
    Var out = t.push(a.value() * s, t.any_needs_grad({a}));
    if (t.needs_grad(out)) {
        t.node(out).back = [&t, a, s, out] { t.grad(a) += t.node(out).grad * s; };
    }
    return out;
}

Var tanh(Var a) {
    Tape& t = *a.tape;
    Var out = t.push(a.value().array().tanh().matrix(), t.any_needs_grad({a}));
    if (t.needs_grad(out)) {
        t.node(out).back = [&t, a, out] {
            const auto& y = t.value(out);
            t.grad(a).array() += t.node(out).grad.array() * (1.0 - y.array().square());
        };
    }
    return out;
}

Var relu(Var a) {
    Tape& t = *a.tape;
    Var out = t.push(a.value().cwiseMax(0.0), t.any_needs_grad({a}));
    if (t.needs_grad(out)) {
        t.node(out).back = [&t, a, out] {
            t.grad(a).array() += (a.value().array() > 0.0).select(t.node(out).grad.array(), 0.0);
        };
    }
    return out;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_derivative(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
    const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014327;
    return cdf + x * pdf;
}

Var geglu(Var a) {
    Tape& t = *a.tape;
    require(a.cols() % 2 == 0, "geglu: odd width");
    const auto h = a.cols() / 2;
    const auto& x = a.value();
    Matrix y(x.rows(), h);
    for (Eigen::Index r = 0; r < x.rows(); ++r)
        for (Eigen::Index c = 0; c < h; ++c) y(r, c) = x(r, c) * gelu(x(r, h + c));
    Var out = t.push(std::move(y), t.any_needs_grad({a}));
    if (t.needs_grad(out)) {
        t.node(out).back = [&t, a, h, out] {
            const auto& g = t.node(out).grad;
            const auto& x = a.value();
            auto& ga = t.grad(a);
            for (Eigen::Index r = 0; r < x.rows(); ++r) {
                for (Eigen::Index c = 0; c < h; ++c) {
                    const double gate = x(r, h + c);
                    ga(r, c) += g(r, c) * gelu(gate);
                    ga(r, h + c) += g(r, c) * x(r, c) * gelu_derivative(gate);
                }
            }
        };
    }
    return out;
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
    Tape& t = *x.tape;
    const auto d = x.cols();
    require(gamma.rows() == 1 && gamma.cols() == d && beta.rows() == 1 && beta.cols() == d,
            "layer_norm: affine shape mismatch");
    const auto& xv = x.value();
    auto xhat = std::make_shared<Matrix>(xv.rows(), d);
    auto inv_std = std::make_shared<Eigen::VectorXd>(xv.rows());
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
        const double mu = xv.row(r).mean();
        const double var = (xv.row(r).array() - mu).square().mean();
        (*inv_std)(r) = 1.0 / std::sqrt(var + eps);
        xhat->row(r) = (xv.row(r).array() - mu) * (*inv_std)(r);
    }
    Matrix y = xhat->array().rowwise() * gamma.value().row(0).array();
    y.rowwise() += beta.value().row(0);
    Var out = t.push(std::move(y), t.any_needs_grad({x, gamma, beta}));
    if (t.needs_grad(out)) {
        t.node(out).back = [&t, x, gamma, beta, out, xhat, inv_std] {
            const auto& g = t.node(out).grad;
            if (t.needs_grad(beta)) t.grad(beta) += g.colwise().sum();
            if (t.needs_grad(gamma)) t.grad(gamma) += g.cwiseProduct(*xhat).colwise().sum();
            if (t.needs_grad(x)) {
                auto& gx = t.grad(x);
                const auto gam = gamma.value().row(0).array();
                for (Eigen::Index r = 0; r < g.rows(); ++r) {
                    Eigen::ArrayXd dxhat = (g.row(r).array() * gam).transpose();
                    Eigen::ArrayXd xh = xhat->row(r).transpose().array();
                    const double m1 = dxhat.mean();
                    const double m2 = (dxhat * xh).mean();
                    gx.row(r).array() += ((dxhat - m1 - xh * m2) * (*inv_std)(r)).transpose();
                }
            }
        };
    }
    return out;
}

Var grouped_attention(Var q, Var k, Var v, int heads, std::span<const AttentionGroup> groups) {
    Tape& t = *q.tape;
    require(heads > 0 && q.cols() % heads == 0, "attention: width not divisible by heads");
    require(k.cols() == q.cols() && v.cols() == q.cols() && k.rows() == v.rows(), "attention: Q/K/V shape mismatch");
    const auto width = q.cols();
    const auto dh = width / heads;
    const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));
    const auto& Q = q.value();
    const auto& K = k.value();
    const auto& V = v.value();

    Matrix y = Matrix::Zero(Q.rows(), width);
    auto probs = std::make_shared<std::vector<Matrix>>();
    probs->reserve(groups.size() * static_cast<std::size_t>(heads));
    for (const auto& gr : groups) {
        const int nq = gr.query_end - gr.query_begin;
        const int nk = gr.key_end - gr.key_begin;
        require(nq >= 0 && nk > 0, "attention: empty key group");
        for (int h = 0; h < heads; ++h) {
            const auto qh = Q.block(gr.query_begin, h * dh, nq, dh);
            const auto kh = K.block(gr.key_begin, h * dh, nk, dh);
            const auto vh = V.block(gr.key_begin, h * dh, nk, dh);
            Matrix s = (qh * kh.transpose()) * scale_factor;
            for (Eigen::Index r = 0; r < s.rows(); ++r) {
                const double mx = s.row(r).maxCoeff();
                s.row(r) = (s.row(r).array() - mx).exp();
                s.row(r) /= s.row(r).sum();
            }
            y.block(gr.query_begin, h * dh, nq, dh).noalias() = s * vh;
            probs->push_back(std::move(s));
        }
    }
    Var out = t.push(std::move(y), t.any_needs_grad({q, k, v}));
    if (t.needs_grad(out)) {
        std::vector<AttentionGroup> gcopy(groups.begin(), groups.end());
        t.node(out).back = [&t, q, k, v, out, probs, gcopy = std::move(gcopy), heads, dh, scale_factor] {
            const auto& g = t.node(out).grad;
            const auto& Q = q.value();
            const auto& K = k.value();
            const auto& V = v.value();
            Matrix* gq = t.needs_grad(q) ? &t.grad(q) : nullptr;
            Matrix* gk = t.needs_grad(k) ? &t.grad(k) : nullptr;
            Matrix* gv = t.needs_grad(v) ? &t.grad(v) : nullptr;
            std::size_t idx = 0;
            for (const auto& gr : gcopy) {
                const int nq = gr.query_end - gr.query_begin;
                const int nk = gr.key_end - gr.key_begin;
                for (int h = 0; h < heads; ++h, ++idx) {
                    const Matrix& p = (*probs)[idx];
                    const auto go = g.block(gr.query_begin, h * dh, nq, dh);
                    const auto vh = V.block(gr.key_begin, h * dh, nk, dh);
                    if (gv) gv->block(gr.key_begin, h * dh, nk, dh).noalias() += p.transpose() * go;
                    Matrix dp = go * vh.transpose();
                    const Eigen::VectorXd rs = p.cwiseProduct(dp).rowwise().sum();
                    Matrix ds = (p.array() * (dp.array().colwise() - rs.array())).matrix() * scale_factor;
                    if (gq) gq->block(gr.query_begin, h * dh, nq, dh).noalias() += ds * K.block(gr.key_begin, h * dh, nk, dh);
                    if (gk) gk->block(gr.key_begin, h * dh, nk, dh).noalias() += ds.transpose() * Q.block(gr.query_begin, h * dh, nq, dh);
                }
            }
        };
    }
    return out;
}

Var select_rows(Var a, std::span<const int> rows) {
    Tape& t = *a.tape;
    const auto& av = a.value();
    Matrix y(static_cast<Eigen::Index>(rows.size()), av.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        require(rows[i] >= 0 && rows[i] < av.rows(), "select_rows: index out of range");
        y.row(static_cast<Eigen::Index>(i)) = av.row(rows[i]);
    }
    Var out = t.push(std::move(y), t.any_needs_grad({a}));
    if (t.needs_grad(out)) {
        std::vector<int> idx(rows.begin(), rows.end());
        t.node(out).back = [&t, a, out, idx = std::move(idx)] {
            const auto& g = t.node(out).grad;
            auto& ga = t.grad(a);
            for (std::size_t i = 0; i < idx.size(); ++i) ga.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
        };
    }
    return out;
}

Var concat_rows(std::span<const Var> parts) {
    require(!parts.empty(), "concat_rows: no inputs");
    Tape& t = *parts[0].tape;
    const auto cols = parts[0].cols();
    Eigen::Index rows = 0;
    bool needs = false;
    for (auto p : parts) {
        require(p.cols() == cols, "concat_rows: width mismatch");
        rows += p.rows();
        needs = needs || t.needs_grad(p);
    }
    Matrix y(rows, cols);
    Eigen::Index r = 0;
    for (auto p : parts) {
        y.middleRows(r, p.rows()) = p.value();
        r += p.rows();
    }
    Var out = t.push(std::move(y), needs);
    if (t.needs_grad(out)) {
        std::vector<Var> ps(parts.begin(), parts.end());
        t.node(out).back = [&t, out, ps = std::move(ps)] {
            const auto& g = t.node(out).grad;
            Eigen::Index r = 0;
            for (auto p : ps) {
                if (t.needs_grad(p)) t.grad(p) += g.middleRows(r, p.rows());
                r += p.rows();
            }
        };
    }
    return out;
}

Var softmax_column(Var a) {
    Tape& t = *a.tape;
    require(a.cols() == 1, "softmax_column: expects a column vector");
    const auto& x = a.value();
    const double mx = x.maxCoeff();
    Matrix y = (x.array() - mx).exp().matrix();
    y /= y.sum();
    Var out = t.push(std::move(y), t.any_needs_grad({a}));
    if (t.needs_grad(out)) {
        t.node(out).back = [&t, a, out] {
            const auto& g = t.node(out).grad;
            const auto& p = t.value(out);
            const double dot = g.cwiseProduct(p).sum();
            t.grad(a).array() += p.array() * (g.array() - dot);
        };
    }
    return out;
}

Var dropout(Var a, double p, std::mt19937_64& rng) {
    if (p <= 0.0) return a;
    Tape& t = *a.tape;
    std::bernoulli_distribution keep(1.0 - p);
    auto mask = std::make_shared<Matrix>(a.rows(), a.cols());
    const double s = 1.0 / (1.0 - p);
    for (Eigen::Index i = 0; i < mask->size(); ++i) mask->data()[i] = keep(rng) ? s : 0.0;
    Var out = t.push(a.value().cwiseProduct(*mask), t.any_needs_grad({a}));
    if (t.needs_grad(out)) {
        t.node(out).back = [&t, a, out, mask] { t.grad(a) += t.node(out).grad.cwiseProduct(*mask); };
    }
    return out;
}

Var softmax_cross_entropy(Var logits, int target) {
    Tape& t = *logits.tape;
    require(logits.rows() == 1 && target >= 0 && target < logits.cols(), "cross entropy: bad logits or target");
    const auto& z = logits.value();
    const double mx = z.maxCoeff();
    const double lse = mx + std::log((z.array() - mx).exp().sum());
    Matrix loss(1, 1);
    loss(0, 0) = lse - z(0, target);
    Var out = t.push(std::move(loss), t.any_needs_grad({logits}));
    if (t.needs_grad(out)) {
        t.node(out).back = [&t, logits, target, lse, out] {
            const double g = t.node(out).grad(0, 0);
            Matrix p = (logits.value().array() - lse).exp().matrix();
            p(0, target) -= 1.0;
            t.grad(logits) += g * p;
        };
    }
    return out;
}

Var sum(Var a) {
    Tape& t = *a.tape;
    Matrix s(1, 1);
    s(0, 0) = a.value().sum();
    Var out = t.push(std::move(s), t.any_needs_grad({a}));
    if (t.needs_grad(out)) {
        t.node(out).back = [&t, a, out] { t.grad(a).array() += t.node(out).grad(0, 0); };
    }
    return out;
}

}  // namespace mitst::ag
