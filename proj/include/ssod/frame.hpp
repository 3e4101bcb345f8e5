#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Core>

#include "ssod/geometry.hpp"

namespace ssod {

using FrameId = std::int64_t;
using InstanceId = std::int64_t;

struct Proposal {
    FrameId frame_id = 0;
    BoundingBox box;
    double objectness = 1.0;
    Eigen::VectorXd feature;
    std::optional<InstanceId> gt_label;  // evaluation only
};

struct GtBox {
    BoundingBox box;
    InstanceId instance_id = 0;
};

/// One posed RGB-D observation.
struct Frame {
    FrameId id = 0;
    std::int64_t location_id = 0;
    CameraPose pose;
    Intrinsics intrinsics;
    PointCloud cloud;
    std::vector<Proposal> proposals;
    std::vector<GtBox> gt_boxes;  // evaluation only
};

/// Addresses one proposal within a dataset.
struct ProposalRef {
    FrameId frame_id = 0;
    std::size_t index = 0;

    auto operator<=>(const ProposalRef&) const = default;
};

/// Frame lookup by id over a borrowed frame list.
class FrameIndex {
public:
    explicit FrameIndex(const std::vector<Frame>& frames);

    const Frame& at(FrameId id) const;
    const Proposal& proposal(const ProposalRef& ref) const;
    bool contains(FrameId id) const;

private:
    const std::vector<Frame>* frames_;
    std::vector<std::pair<FrameId, std::size_t>> order_;
};

/// reproject_box between two frames sharing intrinsics.
std::optional<BoundingBox> reproject_box(const BoundingBox& box, const Frame& frame_k, const Frame& frame_l,
                                         std::size_t min_points = 10);

}  // namespace ssod
