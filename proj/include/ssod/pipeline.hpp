#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssod/association.hpp"
#include "ssod/discovery.hpp"
#include "ssod/metriclearn.hpp"
#include "ssod/scenesim.hpp"

namespace ssod {

/// Invalid configuration (exit code 2 at the CLI).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A stage failed while running (exit code 1 at the CLI).
class StageError : public std::runtime_error {
public:
    StageError(std::string stage, const std::string& cause)
        : std::runtime_error("stage '" + stage + "' failed: " + cause), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

struct DiscoveryConfig {
    std::vector<double> bandwidths{0.4, 0.5, 0.6, 0.7, 0.8};
    double featured_bandwidth = 0.6;
    std::size_t min_cluster_size = 8;
    double label_iou = 0.5;
    MeanShiftConfig mean_shift;
};

struct DetectionConfig {
    std::vector<std::size_t> shots{1, 3, 5, 10};
    std::size_t repeats = 5;
    std::size_t featured_shots = 5;
    std::optional<double> background_distance;
    double nms_iou = 0.7;
    double eval_iou = 0.5;
};

struct PipelineConfig {
    WorldConfig scenesim;
    AssociationConfig association;
    TrainConfig metriclearn;
    DiscoveryConfig discovery;
    DetectionConfig detection;
    std::uint64_t seed = 0;
    std::filesystem::path output = "ssod_out";

    /// Missing keys keep their defaults; unknown keys are rejected.
    static PipelineConfig from_json(const nlohmann::json& j);
    static PipelineConfig load(const std::filesystem::path& path);
    nlohmann::json to_json() const;
    void validate() const;
    /// FNV-1a over the canonical config, excluding the output path.
    std::string hash() const;
};

enum class Stage { Simulate, Associate, Mine, Train, Embed, Discover, Detect, Evaluate };

const char* stage_name(Stage s);
Stage parse_stage(const std::string& name);

struct PipelineOptions {
    Stage until = Stage::Evaluate;
    bool use_cache = true;
    std::ostream* log = nullptr;
};

/// Output locations under the output directory.
struct PipelinePaths {
    std::filesystem::path root;

    std::filesystem::path train_world() const { return root / "train_world"; }
    std::filesystem::path test_world() const { return root / "test_world"; }
    std::filesystem::path matches() const { return root / "matches.tsv"; }
    std::filesystem::path triplets() const { return root / "triplets.tsv"; }
    std::filesystem::path model() const { return root / "model.bin"; }
    std::filesystem::path loss_trace() const { return root / "loss_trace.csv"; }
    std::filesystem::path train_embeddings() const { return root / "train_embeddings.bin"; }
    std::filesystem::path test_embeddings() const { return root / "test_embeddings.bin"; }
    std::filesystem::path clusters() const { return root / "clusters.tsv"; }
    std::filesystem::path discovery_report() const { return root / "discovery_report.json"; }
    std::filesystem::path pr_sweep() const { return root / "pr_sweep.csv"; }
    std::filesystem::path detections() const { return root / "detections"; }
    std::filesystem::path eval_report() const { return root / "eval_report.json"; }
    std::filesystem::path few_shot_table() const { return root / "fewshot.csv"; }
    std::filesystem::path cache() const { return root / "cache"; }
};

/// Runs the stages up to and including `opts.until`. Stage outputs are
/// reused when their cache key (stage config plus input file contents)
/// matches the previous run.
void run_pipeline(const PipelineConfig& cfg, const PipelineOptions& opts = {});

/// 64-bit FNV-1a, hex encoded.
std::string fnv1a_hex(const std::string& bytes);

/// Fraction of matches whose two proposals carry the same ground-truth label.
double same_instance_fraction(const std::vector<MatchPair>& matches, const std::vector<Frame>& frames);

/// Mean pairwise distance between same-label and different-label columns.
struct SeparationStats {
    double mean_intra = 0.0;
    double mean_inter = 0.0;
    std::size_t intra_pairs = 0;
    std::size_t inter_pairs = 0;
};
SeparationStats embedding_separation(const Eigen::MatrixXd& embeddings,
                                     const std::vector<std::optional<InstanceId>>& labels);

}  // namespace ssod
