#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mitst/autograd.hpp"
#include "mitst/data_model.hpp"
#include "mitst/io.hpp"
#include "mitst/preprocess.hpp"

namespace mitst {

using ag::Matrix;

struct ModelConfig {
    int depth = 4;
    int heads = 8;
    int head_dim = 8;
    std::vector<int> embed_widths;  // d'_m per source; empty -> schema hints
    int joint_width = 32;           // d_j
    int mult = 2;
    int fusion_width = 32;  // d_f
    double dropout = 0.1;
    int num_classes = kNumClasses;
    int max_seq_len = 512;
    double min_period_minutes = 2.0;
    double max_period_minutes = 100000.0;
    double cls_init_std = 0.02;

    int attention_width() const { return heads * head_dim; }
    void validate(const CohortSchema& schema) const;
    /// Fills embed_widths from the schema hints when empty.
    ModelConfig resolved(const CohortSchema& schema) const;

    json to_json() const;
    static ModelConfig from_json(const json& j);
};

enum class InitKind { uniform, normal, ones, zeros };

struct ParameterTensor {
    std::string name;
    std::string group;
    Matrix value;
    InitKind init = InitKind::zeros;
    double init_scale = 0.0;  // uniform bound or normal std
};

/// All learnable tensors, in a fixed order derived from config and schema.
class ParameterSet {
   public:
    int add(ParameterTensor tensor);
    int index_of(const std::string& name) const;  // -1 when absent
    std::size_t size() const { return tensors_.size(); }
    ParameterTensor& operator[](std::size_t i) { return tensors_[i]; }
    const ParameterTensor& operator[](std::size_t i) const { return tensors_[i]; }
    std::vector<std::string> groups() const;
    std::vector<int> indices_in_group(const std::string& group) const;
    std::size_t scalar_count() const;

   private:
    std::vector<ParameterTensor> tensors_;
};

/// Intermediate activations of one forward pass.
struct ActivationBundle {
    std::vector<Matrix> f;  // per source: T_m x d'_m feature-level CLS outputs
    std::vector<Matrix> z;  // per source: 1 x d'_m
    Matrix u;               // M x d_j
    Matrix a;               // M x d_j
    std::vector<double> alpha;
    Matrix v;       // 1 x d_j
    Matrix logits;  // 1 x C
};

struct FusionOutput {
    ag::Var v;
    ag::Var alpha;  // M x 1
};

struct ForwardOutput {
    ag::Var logits;
    std::vector<ag::Var> f;
    std::vector<ag::Var> z;
    std::vector<ag::Var> u;
    ag::Var a;
    FusionOutput fusion;

    ActivationBundle bundle() const;
};

/// Sinusoidal encoding of minute offsets: channel 2k = sin(2*pi*t/P_k),
/// channel 2k+1 = cos(2*pi*t/P_k), periods geometric in [min, max].
Matrix time_encoding(std::span<const double> offsets_minutes, int width, double min_period, double max_period);
std::vector<double> time_encoding_periods(int width, double min_period, double max_period);

class Model;

/// Binds one tape to a model's parameters for the duration of a forward pass.
class GraphContext {
   public:
    GraphContext(ag::Tape& tape, const Model& model, bool training = false, std::mt19937_64* rng = nullptr);

    ag::Tape& tape() { return tape_; }
    ag::Var param(int index);
    ag::Var dropout(ag::Var x);
    bool training() const { return training_; }
    /// Parameters outside the mask enter the graph without gradients.
    void set_trainable(const std::vector<bool>* mask) { trainable_ = mask; }

   private:
    ag::Tape& tape_;
    const Model& model_;
    bool training_;
    std::mt19937_64* rng_;
    const std::vector<bool>* trainable_ = nullptr;
    std::vector<int> leaf_ids_;
};

class Model {
   public:
    Model(ModelConfig config, CohortSchema schema, std::uint64_t init_seed);

    const ModelConfig& config() const { return config_; }
    const CohortSchema& schema() const { return schema_; }
    ParameterSet& params() { return params_; }
    const ParameterSet& params() const { return params_; }
    int num_sources() const { return schema_.num_sources(); }

    /// Re-draws every tensor of a group (e.g. a fresh prediction head).
    void reinitialize_group(const std::string& group, std::uint64_t seed);
    /// Replaces the prediction head with one for `num_classes` outputs.
    void reset_head(int num_classes, std::uint64_t seed);

    // Stages of the network, exposed individually for testing.
    ag::Var tokenize(GraphContext& ctx, int source, std::span<const TimePoint> points) const;
    ag::Var feature_aggregate(GraphContext& ctx, int source, ag::Var tokens, int num_points) const;
    ag::Var timestamp_aggregate(GraphContext& ctx, int source, ag::Var features,
                                std::span<const double> offsets) const;
    ag::Var joint_project(GraphContext& ctx, int source, ag::Var z) const;
    ag::Var integrate_sources(GraphContext& ctx, ag::Var u) const;
    FusionOutput fuse_sources(GraphContext& ctx, ag::Var a) const;
    ag::Var predict(GraphContext& ctx, ag::Var v) const;

    ForwardOutput forward(GraphContext& ctx, const ModelInput& input) const;

    /// Evaluation-mode forward returning logits and activations.
    ActivationBundle infer(const ModelInput& input) const;

    struct BlockParams {
        int ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
    };
    struct SourceParams {
        int feature_cls = -1;
        int num_w = -1;
        int num_b = -1;
        std::vector<int> cat_tables;
        std::vector<BlockParams> feature_blocks;
        int time_cls = -1;
        std::vector<BlockParams> time_blocks;
        int proj_ln_g, proj_ln_b, proj_w1, proj_b1, proj_w2, proj_b2;
    };

    int embed_width(int source) const { return config_.embed_widths[static_cast<std::size_t>(source)]; }

   private:
    void build_layout(std::uint64_t init_seed);
    std::vector<BlockParams> add_stack(const std::string& prefix, const std::string& group, int width,
                                       std::uint64_t seed);
    ag::Var run_stack(GraphContext& ctx, const std::vector<BlockParams>& blocks, ag::Var x,
                      std::span<const ag::AttentionGroup> groups, std::span<const int> summary_rows) const;
    ag::Var run_block(GraphContext& ctx, const BlockParams& p, ag::Var x, std::span<const ag::AttentionGroup> groups,
                      std::span<const int> summary_rows) const;

    ModelConfig config_;
    CohortSchema schema_;
    ParameterSet params_;
    std::vector<SourceParams> sources_;
    std::vector<BlockParams> source_blocks_;
    int fusion_w_ = -1, fusion_b_ = -1, fusion_u_ = -1;
    int head_ln_g_ = -1, head_ln_b_ = -1, head_w_ = -1, head_b_ = -1;
};

Matrix softmax_row(const Matrix& logits);

// -- checkpoints --

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

std::string sha256_hex(std::string_view bytes);
std::string file_sha256(const std::filesystem::path& path);

/// `extra` travels with the model (normalizer, frequency table, label rule...).
void save_checkpoint(const std::filesystem::path& path, const Model& model, const json& extra = json::object());

struct LoadedCheckpoint {
    std::optional<Model> model;
    json extra;
    std::string config_hash;
    std::string file_hash;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mitst
