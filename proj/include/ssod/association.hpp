#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <vector>

#include "ssod/frame.hpp"

namespace ssod {

/// Two proposals in different frames asserted to show the same object.
struct MatchPair {
    ProposalRef a;
    ProposalRef b;
    double iou_score = 0.0;

    bool operator==(const MatchPair&) const = default;
};

/// Anchor and positive come from a match; the negative is a disjoint
/// proposal from the anchor's own frame.
struct Triplet {
    ProposalRef anchor;
    ProposalRef positive;
    ProposalRef negative;

    bool operator==(const Triplet&) const = default;
};

struct NeighborhoodSpec {
    double radius = 0.75;  // meters between camera centers (1.5 grid steps)
    /// Optional extra gate on location ids; empty means radius only.
    std::function<bool(std::int64_t, std::int64_t)> adjacent;
};

struct AssociationConfig {
    double iou_threshold = 0.1;
    std::size_t min_points = 10;
    double neighborhood_radius = 0.75;  // 1.5 steps of the default 0.5 m grid
    std::size_t negatives_per_ordering = 1;
};

std::vector<MatchPair> match_frames(const Frame& frame_k, const Frame& frame_l, double th = 0.1,
                                    std::size_t min_points = 10);

/// Union of match_frames over unordered frame pairs within the neighborhood,
/// sorted by (frame_a, frame_b) and then by the per-pair greedy order.
std::vector<MatchPair> build_matches(const std::vector<Frame>& frames, const NeighborhoodSpec& neighborhood,
                                     double th = 0.1, std::size_t min_points = 10);

/// Draws negatives for matches. Eligible negatives per anchor are cached, so
/// one miner can be reused across training steps.
class TripletMiner {
public:
    explicit TripletMiner(const std::vector<Frame>& frames, std::size_t negatives_per_ordering = 1);

    /// Both orderings of every match; orderings without an eligible negative are skipped.
    std::vector<Triplet> mine(const std::vector<MatchPair>& matches, std::mt19937_64& rng) const;

    const std::vector<std::size_t>& eligible_negatives(const ProposalRef& anchor) const;

private:
    FrameIndex index_;
    std::size_t per_ordering_;
    std::map<ProposalRef, std::vector<std::size_t>> negatives_;
};

std::vector<Triplet> mine_triplets(const std::vector<MatchPair>& matches, const std::vector<Frame>& frames,
                                   std::uint64_t rng_seed, std::size_t negatives_per_ordering = 1);

}  // namespace ssod
