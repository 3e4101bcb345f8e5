#include "ssod/frame.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace ssod {

FrameIndex::FrameIndex(const std::vector<Frame>& frames) : frames_(&frames) {
    order_.reserve(frames.size());
    for (std::size_t i = 0; i < frames.size(); ++i) order_.emplace_back(frames[i].id, i);
    std::sort(order_.begin(), order_.end());
    auto dup = std::adjacent_find(order_.begin(), order_.end(),
                                  [](const auto& a, const auto& b) { return a.first == b.first; });
    if (dup != order_.end()) throw std::invalid_argument("duplicate frame id " + std::to_string(dup->first));
}

bool FrameIndex::contains(FrameId id) const {
    auto it = std::lower_bound(order_.begin(), order_.end(), std::make_pair(id, std::size_t{0}));
    return it != order_.end() && it->first == id;
}

const Frame& FrameIndex::at(FrameId id) const {
    auto it = std::lower_bound(order_.begin(), order_.end(), std::make_pair(id, std::size_t{0}));
    if (it == order_.end() || it->first != id) throw std::out_of_range("unknown frame id " + std::to_string(id));
    return (*frames_)[it->second];
}

const Proposal& FrameIndex::proposal(const ProposalRef& ref) const {
    const Frame& f = at(ref.frame_id);
    if (ref.index >= f.proposals.size()) throw std::out_of_range("proposal index out of range");
    return f.proposals[ref.index];
}

std::optional<BoundingBox> reproject_box(const BoundingBox& box, const Frame& frame_k, const Frame& frame_l,
                                         std::size_t min_points) {
    return reproject_box(box, frame_k.cloud, frame_k.pose, frame_l.pose, frame_k.intrinsics, min_points);
}

}  // namespace ssod
