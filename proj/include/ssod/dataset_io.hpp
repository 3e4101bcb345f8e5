#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ssod/association.hpp"
#include "ssod/discovery.hpp"
#include "ssod/frame.hpp"

namespace ssod {

/// Malformed or missing on-disk data.
class DatasetError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ObjectInfo {
    InstanceId instance_id = 0;
    std::string category;
};

struct Dataset {
    Intrinsics intrinsics;
    std::vector<ObjectInfo> objects;
    std::vector<Frame> frames;

    std::string category_of(InstanceId id) const;
};

/// Layout under `dir`:
///   manifest.json                 intrinsics, objects, frame records
///   frames/<id>.cloud             "SSPC", u64 count, float32 xyz (camera frame)
///   frames/<id>_proposals.csv     index, box, objectness, gt_label (-1: none), f0..f{d-1}
///   frames/<id>_gt.csv            box, instance_id
void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

void write_point_cloud(const PointCloud& cloud, const std::filesystem::path& path);
PointCloud read_point_cloud(const std::filesystem::path& path);

void write_matches(const std::vector<MatchPair>& matches, const std::filesystem::path& path);
std::vector<MatchPair> read_matches(const std::filesystem::path& path);

void write_triplets(const std::vector<Triplet>& triplets, const std::filesystem::path& path);
std::vector<Triplet> read_triplets(const std::filesystem::path& path);

/// Cluster members are written as proposal refs via `refs[member]`.
void write_clusters(const std::vector<Cluster>& clusters, const std::vector<ProposalRef>& refs,
                    const std::filesystem::path& path);

struct EmbeddingTable {
    std::vector<ProposalRef> refs;
    Eigen::MatrixXd values;  // one column per ref
};

/// "SSEB", u32 version, u64 dim, u64 count, then per entry i64 frame id,
/// u64 proposal index; then values column-major float64.
void write_embeddings(const EmbeddingTable& table, const std::filesystem::path& path);
EmbeddingTable read_embeddings(const std::filesystem::path& path);

}  // namespace ssod
