#pragma once

#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "ssod/frame.hpp"

namespace ssod {

enum class Kernel { Flat, Gaussian };

struct MeanShiftConfig {
    double tolerance = 1e-4;
    int max_iterations = 300;
    double merge_fraction = 0.5;  // modes closer than merge_fraction * bandwidth are merged
    Kernel kernel = Kernel::Flat;
};

struct Cluster {
    std::size_t id = 0;
    Eigen::VectorXd mode;
    std::vector<std::size_t> members;  // column indices into the clustered point set
};

/// Runs mode seeking from a single start point.
Eigen::VectorXd seek_mode(const Eigen::MatrixXd& points, const Eigen::VectorXd& start, double bandwidth,
                          const MeanShiftConfig& cfg = {});

/// Mean shift over the columns of `points`. Every point seeds a trajectory;
/// converged modes are merged in seed order, so the lowest-index seed owns
/// each cluster's mode.
std::vector<Cluster> mean_shift(const Eigen::MatrixXd& points, double bandwidth, const MeanShiftConfig& cfg = {});

std::vector<Cluster> filter_clusters(const std::vector<Cluster>& clusters, std::size_t min_size = 8);

/// Label = instance of the best-overlapping gt box when its IoU >= iou_th.
std::vector<std::optional<InstanceId>> label_proposals_by_gt(std::span<const Proposal> proposals,
                                                             std::span<const GtBox> gt_boxes, double iou_th = 0.5);

struct InstanceDiscovery {
    InstanceId instance = 0;
    std::optional<std::size_t> dominant_cluster;
    double precision = 0.0;
    double recall = 0.0;
    std::size_t hits = 0;
    std::size_t cluster_size = 0;
    std::size_t total = 0;
};

struct DiscoveryReport {
    std::vector<InstanceDiscovery> instances;  // sorted by instance id
    std::vector<InstanceId> excluded;           // requested instances with no labeled proposal
    double avg_precision = 0.0;
    double avg_recall = 0.0;
    double bandwidth = 0.0;
    std::size_t cluster_count = 0;
};

/// Dominant-cluster precision/recall. `labels[i]` is the gt label of clustered
/// point i. Instances evaluated are those in `instances`, or every label seen
/// when empty.
DiscoveryReport discovery_pr(const std::vector<Cluster>& clusters, std::span<const std::optional<InstanceId>> labels,
                             std::span<const InstanceId> instances = {});

}  // namespace ssod
