#include "ssod/detection.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

namespace ssod {

std::vector<Detection> knn_detect(const LabeledSet& set, std::span<const QueryProposal> queries,
                                  const KnnConfig& cfg) {
    if (set.empty()) throw std::invalid_argument("knn_detect needs a nonempty labeled set");
    if (set.embeddings.cols() != Eigen::Index(set.labels.size()))
        throw std::invalid_argument("labeled set embeddings and labels differ in length");
    std::vector<Detection> out;
    out.reserve(queries.size());
    for (const auto& q : queries) {
        if (q.embedding.size() != set.embeddings.rows()) throw std::invalid_argument("query embedding dimension");
        double best = std::numeric_limits<double>::infinity();
        std::size_t arg = 0;
        for (Eigen::Index i = 0; i < set.embeddings.cols(); ++i) {
            const double d = (set.embeddings.col(i) - q.embedding).norm();
            if (d < best) {
                best = d;
                arg = std::size_t(i);
            }
        }
        if (cfg.background_distance && best > *cfg.background_distance) continue;
        out.push_back(Detection{q.frame_id, q.box, set.labels[arg], std::clamp(2.0 - best, 0.0, 2.0)});
    }
    return out;
}

LabeledSet cluster_labeled_detector(const std::vector<Cluster>& clusters,
                                    const std::map<std::size_t, InstanceId>& cluster_labels,
                                    const Eigen::MatrixXd& embeddings) {
    std::vector<std::size_t> cols;
    std::vector<InstanceId> labels;
    for (const auto& c : clusters) {
        auto it = cluster_labels.find(c.id);
        if (it == cluster_labels.end()) continue;
        for (std::size_t m : c.members) {
            if (Eigen::Index(m) >= embeddings.cols()) throw std::out_of_range("cluster member outside embeddings");
            cols.push_back(m);
            labels.push_back(it->second);
        }
    }
    if (cols.empty()) throw std::invalid_argument("no labeled clusters to build a detector from");
    LabeledSet set;
    set.embeddings.resize(embeddings.rows(), Eigen::Index(cols.size()));
    for (std::size_t i = 0; i < cols.size(); ++i) set.embeddings.col(Eigen::Index(i)) = embeddings.col(Eigen::Index(cols[i]));
    set.labels = std::move(labels);
    return set;
}

std::map<std::size_t, InstanceId> label_dominant_clusters(const DiscoveryReport& report) {
    std::map<std::size_t, std::pair<std::size_t, InstanceId>> best;  // cluster -> (hits, instance)
    for (const auto& r : report.instances) {
        if (!r.dominant_cluster) continue;
        auto [it, inserted] = best.emplace(*r.dominant_cluster, std::make_pair(r.hits, r.instance));
        if (!inserted && r.hits > it->second.first) it->second = {r.hits, r.instance};
    }
    std::map<std::size_t, InstanceId> labels;
    for (const auto& [cluster, v] : best) labels.emplace(cluster, v.second);
    return labels;
}

FewShotSample few_shot_sample(std::span<const std::optional<InstanceId>> labels, std::size_t n, std::uint64_t seed,
                              std::span<const InstanceId> classes) {
    std::map<InstanceId, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i]) by_class[*labels[i]].push_back(i);

    std::set<InstanceId> wanted(classes.begin(), classes.end());
    if (wanted.empty())
        for (const auto& [id, _] : by_class) wanted.insert(id);

    FewShotSample sample;
    std::mt19937_64 rng(seed);
    for (InstanceId cls : wanted) {
        auto it = by_class.find(cls);
        if (it == by_class.end()) {
            sample.excluded.push_back(cls);
            continue;
        }
        auto pool = it->second;
        const std::size_t take = std::min(n, pool.size());
        // Partial Fisher-Yates.
        for (std::size_t k = 0; k < take; ++k) {
            std::uniform_int_distribution<std::size_t> pick(k, pool.size() - 1);
            std::swap(pool[k], pool[pick(rng)]);
            sample.chosen.push_back(pool[k]);
        }
    }
    return sample;
}

LabeledSet labeled_subset(std::span<const std::size_t> chosen, std::span<const std::optional<InstanceId>> labels,
                          const Eigen::MatrixXd& embeddings) {
    LabeledSet set;
    set.embeddings.resize(embeddings.rows(), Eigen::Index(chosen.size()));
    for (std::size_t i = 0; i < chosen.size(); ++i) {
        const std::size_t c = chosen[i];
        if (c >= labels.size() || !labels[c] || Eigen::Index(c) >= embeddings.cols())
            throw std::invalid_argument("labeled_subset index has no label or embedding");
        set.embeddings.col(Eigen::Index(i)) = embeddings.col(Eigen::Index(c));
        set.labels.push_back(*labels[c]);
    }
    return set;
}

std::optional<double> average_precision(std::span<const Detection> detections, std::span<const GtRef> gt,
                                        double iou_th) {
    if (gt.empty()) return std::nullopt;
    std::vector<std::size_t> order(detections.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return detections[a].score > detections[b].score; });

    std::vector<bool> taken(gt.size(), false);
    std::vector<double> precision, recall;
    std::size_t tp = 0, fp = 0;
    for (std::size_t k : order) {
        const auto& det = detections[k];
        double best = -1.0;
        std::size_t arg = gt.size();
        for (std::size_t g = 0; g < gt.size(); ++g) {
            if (taken[g] || gt[g].frame_id != det.frame_id) continue;
            const double v = iou(det.box, gt[g].box);
            if (v >= iou_th && v > best) {
                best = v;
                arg = g;
            }
        }
        if (arg < gt.size()) {
            taken[arg] = true;
            ++tp;
        } else {
            ++fp;
        }
        precision.push_back(double(tp) / double(tp + fp));
        recall.push_back(double(tp) / double(gt.size()));
    }
    // Precision envelope from the right, then area under the staircase.
    for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double ap = 0.0, prev_recall = 0.0;
    for (std::size_t i = 0; i < precision.size(); ++i) {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    return ap;
}

double mean_ap(std::span<const std::optional<double>> aps) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& a : aps)
        if (a) {
            sum += *a;
            ++n;
        }
    if (n == 0) throw std::invalid_argument("mean_ap needs at least one defined AP");
    return sum / double(n);
}

double mean_ap_environments(const std::vector<std::vector<std::optional<double>>>& per_environment) {
    std::vector<std::optional<double>> env_means;
    for (const auto& env : per_environment) {
        const bool any = std::any_of(env.begin(), env.end(), [](const auto& a) { return a.has_value(); });
        if (any) env_means.emplace_back(mean_ap(env));
    }
    return mean_ap(env_means);
}

std::map<InstanceId, std::optional<double>> evaluate_detections(std::span<const Detection> detections,
                                                                const std::vector<Frame>& frames,
                                                                std::span<const InstanceId> instances,
                                                                double iou_th) {
    std::map<InstanceId, std::vector<GtRef>> gt;
    std::map<InstanceId, std::vector<Detection>> dets;
    for (InstanceId id : instances) {
        gt[id];
        dets[id];
    }
    for (const auto& f : frames)
        for (const auto& g : f.gt_boxes)
            if (auto it = gt.find(g.instance_id); it != gt.end()) it->second.push_back({f.id, g.box});
    for (const auto& d : detections)
        if (auto it = dets.find(d.label); it != dets.end()) it->second.push_back(d);

    std::map<InstanceId, std::optional<double>> out;
    for (auto& [id, boxes] : gt) out[id] = average_precision(dets[id], boxes, iou_th);
    return out;
}

void write_detections(std::span<const Detection> detections, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write detections " + path.string());
    os << "frame_id,x1,y1,x2,y2,label,score\n";
    char buf[256];
    for (const auto& d : detections) {
        std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%.17g,%.17g,%lld,%.17g\n", static_cast<long long>(d.frame_id),
                      d.box.xmin, d.box.ymin, d.box.xmax, d.box.ymax, static_cast<long long>(d.label), d.score);
        os << buf;
    }
}

std::vector<Detection> read_detections(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open detections " + path.string());
    std::string line;
    if (!std::getline(is, line) || line != "frame_id,x1,y1,x2,y2,label,score")
        throw std::runtime_error("bad detections header in " + path.string());
    std::vector<Detection> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        long long frame = 0, label = 0;
        Detection d;
        if (std::sscanf(line.c_str(), "%lld,%lf,%lf,%lf,%lf,%lld,%lf", &frame, &d.box.xmin, &d.box.ymin, &d.box.xmax,
                        &d.box.ymax, &label, &d.score) != 7)
            throw std::runtime_error("bad detection row in " + path.string());
        d.frame_id = frame;
        d.label = label;
        out.push_back(d);
    }
    return out;
}

}  // namespace ssod
