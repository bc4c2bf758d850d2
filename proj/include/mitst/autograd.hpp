#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace mitst::ag {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    const Matrix& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
};

/// Contiguous row ranges that attend to each other. Queries of group g are
/// rows [query_begin, query_end) of Q; keys/values are rows
/// [key_begin, key_end) of K and V.
struct AttentionGroup {
    int query_begin = 0;
    int query_end = 0;
    int key_begin = 0;
    int key_end = 0;
};

/// Reverse-mode automatic differentiation over dense row-major matrices.
/// Nodes live until the tape is destroyed. With recording disabled no
/// backward closures are created.
class Tape {
   public:
    explicit Tape(bool record = true) : record_(record) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return record_; }

    Var constant(Matrix value);
    /// Leaf that refers to an externally owned tensor and accumulates its gradient.
    Var parameter(const Matrix& value, int param_index, bool trainable = true);

    void backward(Var scalar);

    const Matrix& value(Var v) const { return node(v).val(); }
    /// Gradient of every parameter leaf, by parameter index; empty matrices
    /// for parameters not touched by this tape.
    std::vector<std::pair<int, const Matrix*>> parameter_grads() const;

    // -- graph construction (used by the free functions below) --
    struct Node {
        Matrix owned;
        const Matrix* external = nullptr;
        Matrix grad;
        bool needs_grad = false;
        int param_index = -1;
        std::function<void()> back;

        const Matrix& val() const { return external ? *external : owned; }
    };

    Var push(Matrix value, bool needs_grad);
    Node& node(Var v) { return nodes_[static_cast<std::size_t>(v.id)]; }
    const Node& node(Var v) const { return nodes_[static_cast<std::size_t>(v.id)]; }
    Matrix& grad(Var v);  // lazily zero-initialized
    bool needs_grad(Var v) const { return node(v).needs_grad; }
    bool any_needs_grad(std::initializer_list<Var> vs) const;

   private:
    bool record_;
    std::deque<Node> nodes_;
};

// Linear algebra
Var matmul(Var a, Var b);
Var transpose(Var a);
/// x W^T + b, with W stored out x in and b a 1 x out row.
Var linear(Var x, Var weight, Var bias);
Var add(Var a, Var b);
/// a + broadcast(row) over rows.
Var add_row(Var a, Var row);
Var mul(Var a, Var b);
Var scale(Var a, double s);

// Elementwise nonlinearities
Var tanh(Var a);
Var relu(Var a);
/// First half of the columns gated by GELU of the second half.
Var geglu(Var a);

/// Row-wise layer normalization with affine gamma/beta (1 x d).
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

/// Multi-head scaled dot-product attention within groups. Q, K, V have
/// heads * head_dim columns; the output has one row per query row.
Var grouped_attention(Var q, Var k, Var v, int heads, std::span<const AttentionGroup> groups);

// Shape manipulation
Var select_rows(Var a, std::span<const int> rows);
Var concat_rows(std::span<const Var> parts);
/// Softmax over all entries of a column vector.
Var softmax_column(Var a);

/// Inverted dropout; identity when p == 0.
Var dropout(Var a, double p, std::mt19937_64& rng);

/// Cross entropy of softmax(logits) (1 x C) against a class index, as 1 x 1.
Var softmax_cross_entropy(Var logits, int target);

/// Sum of all entries as 1 x 1.
Var sum(Var a);

double gelu(double x);
double gelu_derivative(double x);

}  // namespace mitst::ag
