#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

#include "ssod/association.hpp"
#include "ssod/frame.hpp"

namespace ssod {

inline constexpr int kEmbeddingDim = 128;

class DegenerateEmbedding : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Linear projection followed by L2 normalization.
struct EmbeddingModel {
    Eigen::MatrixXd W;  // out_dim x d
    Eigen::VectorXd b;  // out_dim

    /// W ~ U(-1/sqrt(d), 1/sqrt(d)), b = 0.
    static EmbeddingModel initialize(int input_dim, std::uint64_t seed, int output_dim = kEmbeddingDim);

    int input_dim() const { return int(W.cols()); }
    int output_dim() const { return int(W.rows()); }
};

Eigen::VectorXd embed(const EmbeddingModel& model, const Eigen::VectorXd& feature);

/// Column-wise embed of a d x N feature matrix.
Eigen::MatrixXd embed_all(const EmbeddingModel& model, const Eigen::MatrixXd& features);

/// Hinge on embeddings: max(|a-p| - |a-n| + margin, 0).
double triplet_loss(const Eigen::VectorXd& e_a, const Eigen::VectorXd& e_p, const Eigen::VectorXd& e_n, double margin);

struct TripletFeatures {
    Eigen::VectorXd anchor;
    Eigen::VectorXd positive;
    Eigen::VectorXd negative;
};

double triplet_loss(const EmbeddingModel& model, const TripletFeatures& t, double margin);

/// Summed loss over a batch.
double batch_loss(const EmbeddingModel& model, std::span<const TripletFeatures> batch, double margin);

struct Gradient {
    Eigen::MatrixXd W;
    Eigen::VectorXd b;
};

/// Column indices into a shared feature matrix.
struct IndexedTriplet {
    Eigen::Index anchor;
    Eigen::Index positive;
    Eigen::Index negative;
};

/// Exact gradient of the summed triplet loss. Inactive hinges and the kink
/// contribute zero. Optionally reports the summed loss.
Gradient loss_gradient(const EmbeddingModel& model, const Eigen::MatrixXd& features,
                       std::span<const IndexedTriplet> triplets, double margin, double* loss = nullptr);

Gradient loss_gradient(const EmbeddingModel& model, std::span<const TripletFeatures> batch, double margin,
                       double* loss = nullptr);

struct AdamState {
    Eigen::MatrixXd m_W, v_W;
    Eigen::VectorXd m_b, v_b;
    std::int64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    static AdamState zeros_like(const EmbeddingModel& model);
};

/// One bias-corrected Adam update in place.
void adam_step(EmbeddingModel& model, AdamState& state, const Gradient& grad, double lr_effective);

struct TrainConfig {
    double margin = 1.0;
    double learning_rate = 1e-4;
    double decay = 0.94;
    std::int64_t decay_interval = 1000;
    std::int64_t steps = 2000;
    double neighborhood_radius = 0.75;  // 1.5 steps of the default 0.5 m grid
    std::size_t negatives_per_ordering = 1;
    std::uint64_t seed = 0;

    void validate() const;
};

/// lr * decay^floor(step / decay_interval)
double effective_learning_rate(const TrainConfig& cfg, std::int64_t step);

struct LossRecord {
    std::int64_t step = 0;
    double lr_effective = 0.0;
    double loss = 0.0;
    std::size_t triplets = 0;
};

struct TrainResult {
    EmbeddingModel model;
    std::vector<LossRecord> trace;
    std::size_t skipped_steps = 0;
};

/// Each step samples a location, takes the matches among frames of that
/// location's neighborhood, draws fresh negatives and applies one Adam step.
TrainResult train(const std::vector<Frame>& frames, const std::vector<MatchPair>& matches, const TrainConfig& cfg);

/// Binary format: "SSEM", u32 version, u64 input dim, u64 output dim, then W
/// row-major and b, all little-endian float64.
void save_model(const EmbeddingModel& model, const std::filesystem::path& path);
EmbeddingModel load_model(const std::filesystem::path& path);

void write_loss_trace(const std::vector<LossRecord>& trace, const std::filesystem::path& path);

}  // namespace ssod
