#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "ssod/discovery.hpp"
#include "ssod/frame.hpp"

namespace ssod {

/// Labeled unit embeddings, one per column.
struct LabeledSet {
    Eigen::MatrixXd embeddings;
    std::vector<InstanceId> labels;

    std::size_t size() const { return labels.size(); }
    bool empty() const { return labels.empty(); }
};

struct Detection {
    FrameId frame_id = 0;
    BoundingBox box;
    InstanceId label = 0;
    double score = 0.0;  // 2 - distance to the nearest labeled embedding
};

struct QueryProposal {
    FrameId frame_id = 0;
    BoundingBox box;
    Eigen::VectorXd embedding;
};

struct KnnConfig {
    /// Queries farther than this from every entry are dropped as background.
    std::optional<double> background_distance;
};

/// Nearest-neighbor labeling. Ties go to the lowest entry index.
std::vector<Detection> knn_detect(const LabeledSet& set, std::span<const QueryProposal> queries,
                                  const KnnConfig& cfg = {});

/// Members of labeled clusters, each carrying its cluster's label.
/// `embeddings` holds one column per clustered point.
LabeledSet cluster_labeled_detector(const std::vector<Cluster>& clusters,
                                    const std::map<std::size_t, InstanceId>& cluster_labels,
                                    const Eigen::MatrixXd& embeddings);

/// One label per instance: each instance's dominant cluster is labeled with
/// that instance. A cluster dominant for several instances takes the one
/// with the most members in it.
std::map<std::size_t, InstanceId> label_dominant_clusters(const DiscoveryReport& report);

struct FewShotSample {
    std::vector<std::size_t> chosen;      // indices into the candidate list, grouped by class
    std::vector<InstanceId> excluded;     // requested classes without candidates
};

/// Uniform seeded sample of min(n, available) candidates per class. Classes
/// default to every label present.
FewShotSample few_shot_sample(std::span<const std::optional<InstanceId>> labels, std::size_t n, std::uint64_t seed,
                              std::span<const InstanceId> classes = {});

/// Columns `chosen` of `embeddings` with their labels.
LabeledSet labeled_subset(std::span<const std::size_t> chosen, std::span<const std::optional<InstanceId>> labels,
                          const Eigen::MatrixXd& embeddings);

struct GtRef {
    FrameId frame_id = 0;
    BoundingBox box;
};

/// All-points interpolated AP at `iou_th`. Detections are ranked by
/// descending score (stable). nullopt when there are no gt boxes.
std::optional<double> average_precision(std::span<const Detection> detections, std::span<const GtRef> gt,
                                        double iou_th = 0.5);

/// Mean over defined APs; throws when none is defined.
double mean_ap(std::span<const std::optional<double>> aps);

/// Mean over environments of the per-environment mean AP.
double mean_ap_environments(const std::vector<std::vector<std::optional<double>>>& per_environment);

/// Per-instance AP over a set of frames. Detections whose label is outside
/// `instances` are ignored.
std::map<InstanceId, std::optional<double>> evaluate_detections(std::span<const Detection> detections,
                                                                const std::vector<Frame>& frames,
                                                                std::span<const InstanceId> instances,
                                                                double iou_th = 0.5);

void write_detections(std::span<const Detection> detections, const std::filesystem::path& path);
std::vector<Detection> read_detections(const std::filesystem::path& path);

}  // namespace ssod
