#include "ssod/discovery.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace ssod {

namespace {

/// One mean-shift update; returns false when the window is empty.
bool shift_once(const Eigen::MatrixXd& points, const Eigen::VectorXd& sq_norms, const Eigen::VectorXd& x,
                double bandwidth, Kernel kernel, Eigen::VectorXd& next) {
    const Eigen::VectorXd d2 = (sq_norms.array() - 2.0 * (points.transpose() * x).array() + x.squaredNorm()).max(0.0);
    const double bw2 = bandwidth * bandwidth;
    Eigen::VectorXd w(points.cols());
    if (kernel == Kernel::Flat) {
        w = (d2.array() <= bw2).cast<double>();
    } else {
        w = (-d2.array() / (2.0 * bw2)).exp();
    }
    const double total = w.sum();
    if (!(total > 0.0)) return false;
    next = points * w / total;
    return true;
}

}  // namespace

Eigen::VectorXd seek_mode(const Eigen::MatrixXd& points, const Eigen::VectorXd& start, double bandwidth,
                          const MeanShiftConfig& cfg) {
    if (!(bandwidth > 0.0)) throw std::invalid_argument("bandwidth must be positive");
    const Eigen::VectorXd sq_norms = points.colwise().squaredNorm().transpose();
    Eigen::VectorXd x = start, next;
    for (int it = 0; it < cfg.max_iterations; ++it) {
        if (!shift_once(points, sq_norms, x, bandwidth, cfg.kernel, next)) break;
        const double moved = (next - x).norm();
        x = next;
        if (moved < cfg.tolerance) break;
    }
    return x;
}

std::vector<Cluster> mean_shift(const Eigen::MatrixXd& points, double bandwidth, const MeanShiftConfig& cfg) {
    if (!(bandwidth > 0.0)) throw std::invalid_argument("bandwidth must be positive");
    std::vector<Cluster> clusters;
    if (points.cols() == 0) return clusters;

    const double merge = cfg.merge_fraction * bandwidth;
    for (Eigen::Index i = 0; i < points.cols(); ++i) {
        const Eigen::VectorXd mode = seek_mode(points, points.col(i), bandwidth, cfg);
        auto owner = std::find_if(clusters.begin(), clusters.end(),
                                  [&](const Cluster& c) { return (c.mode - mode).norm() <= merge; });
        if (owner == clusters.end()) {
            clusters.push_back(Cluster{clusters.size(), mode, {}});
            owner = std::prev(clusters.end());
        }
        owner->members.push_back(std::size_t(i));
    }
    return clusters;
}

std::vector<Cluster> filter_clusters(const std::vector<Cluster>& clusters, std::size_t min_size) {
    if (min_size < 1) throw std::invalid_argument("min_size must be at least 1");
    std::vector<Cluster> kept;
    std::copy_if(clusters.begin(), clusters.end(), std::back_inserter(kept),
                 [&](const Cluster& c) { return c.members.size() >= min_size; });
    return kept;
}

std::vector<std::optional<InstanceId>> label_proposals_by_gt(std::span<const Proposal> proposals,
                                                             std::span<const GtBox> gt_boxes, double iou_th) {
    if (!(iou_th > 0.0 && iou_th <= 1.0)) throw std::invalid_argument("label IoU threshold must lie in (0, 1]");
    std::vector<std::optional<InstanceId>> labels;
    labels.reserve(proposals.size());
    for (const auto& p : proposals) {
        double best = 0.0;
        std::optional<InstanceId> label;
        for (const auto& g : gt_boxes) {
            const double v = iou(p.box, g.box);
            if (v > best) {
                best = v;
                label = g.instance_id;
            }
        }
        labels.push_back(best >= iou_th ? label : std::nullopt);
    }
    return labels;
}

DiscoveryReport discovery_pr(const std::vector<Cluster>& clusters, std::span<const std::optional<InstanceId>> labels,
                             std::span<const InstanceId> instances) {
    std::map<InstanceId, std::size_t> totals;
    for (const auto& l : labels)
        if (l) ++totals[*l];

    std::vector<InstanceId> wanted(instances.begin(), instances.end());
    if (wanted.empty())
        for (const auto& [id, _] : totals) wanted.push_back(id);
    std::sort(wanted.begin(), wanted.end());
    wanted.erase(std::unique(wanted.begin(), wanted.end()), wanted.end());

    // Per cluster: count of members per instance.
    std::vector<std::map<InstanceId, std::size_t>> counts(clusters.size());
    for (std::size_t c = 0; c < clusters.size(); ++c)
        for (std::size_t m : clusters[c].members) {
            if (m >= labels.size()) throw std::out_of_range("cluster member outside label list");
            if (labels[m]) ++counts[c][*labels[m]];
        }

    DiscoveryReport report;
    report.cluster_count = clusters.size();
    for (InstanceId inst : wanted) {
        auto t = totals.find(inst);
        if (t == totals.end()) {
            report.excluded.push_back(inst);
            continue;
        }
        InstanceDiscovery r;
        r.instance = inst;
        r.total = t->second;
        std::optional<std::size_t> best;
        for (std::size_t c = 0; c < clusters.size(); ++c) {
            auto it = counts[c].find(inst);
            const std::size_t hits = it == counts[c].end() ? 0 : it->second;
            if (hits == 0) continue;
            if (!best) {
                best = c;
                continue;
            }
            const auto& b = clusters[*best];
            const std::size_t best_hits = counts[*best].at(inst);
            const auto key = std::make_tuple(hits, clusters[c].members.size(), b.id);
            const auto best_key = std::make_tuple(best_hits, b.members.size(), clusters[c].id);
            if (key > best_key) best = c;
        }
        if (best) {
            r.dominant_cluster = clusters[*best].id;
            r.hits = counts[*best].at(inst);
            r.cluster_size = clusters[*best].members.size();
            r.precision = double(r.hits) / double(r.cluster_size);
            r.recall = double(r.hits) / double(r.total);
        }
        report.instances.push_back(r);
    }
    if (!report.instances.empty()) {
        for (const auto& r : report.instances) {
            report.avg_precision += r.precision;
            report.avg_recall += r.recall;
        }
        report.avg_precision /= double(report.instances.size());
        report.avg_recall /= double(report.instances.size());
    }
    return report;
}

}  // namespace ssod
