#include "ssod/association.hpp"

#include <algorithm>
#include <tuple>

namespace ssod {

namespace {

struct Candidate {
    double iou;
    std::size_t i;
    std::size_t j;
};

std::vector<MatchPair> greedy_one_to_one(std::vector<Candidate> cands, FrameId fk, FrameId fl, std::size_t nk,
                                         std::size_t nl) {
    std::sort(cands.begin(), cands.end(), [](const Candidate& x, const Candidate& y) {
        if (x.iou != y.iou) return x.iou > y.iou;
        return std::tie(x.i, x.j) < std::tie(y.i, y.j);
    });
    std::vector<bool> used_k(nk, false), used_l(nl, false);
    std::vector<MatchPair> out;
    for (const auto& c : cands) {
        if (used_k[c.i] || used_l[c.j]) continue;
        used_k[c.i] = used_l[c.j] = true;
        out.push_back(MatchPair{{fk, c.i}, {fl, c.j}, c.iou});
    }
    return out;
}

std::vector<MatchPair> match_with_points(const Frame& k, const Frame& l, const std::vector<PointCloud>& box_points_k,
                                         double th, std::size_t min_points) {
    std::vector<Candidate> cands;
    for (std::size_t i = 0; i < k.proposals.size(); ++i) {
        auto projected = reproject_points(box_points_k[i], k.pose, l.pose, k.intrinsics, min_points);
        if (!projected) continue;
        for (std::size_t j = 0; j < l.proposals.size(); ++j) {
            const double score = iou(*projected, l.proposals[j].box);
            if (score >= th && score > 0.0) cands.push_back({score, i, j});
        }
    }
    return greedy_one_to_one(std::move(cands), k.id, l.id, k.proposals.size(), l.proposals.size());
}

std::vector<PointCloud> proposal_points(const Frame& f) {
    std::vector<PointCloud> pts;
    pts.reserve(f.proposals.size());
    for (const auto& p : f.proposals) pts.push_back(points_in_box(f.cloud, f.intrinsics, p.box));
    return pts;
}

}  // namespace

std::vector<MatchPair> match_frames(const Frame& frame_k, const Frame& frame_l, double th, std::size_t min_points) {
    if (frame_k.id == frame_l.id) throw std::invalid_argument("match_frames needs two distinct frames");
    if (!(th > 0.0 && th < 1.0)) throw std::invalid_argument("IoU threshold must lie in (0, 1)");
    if (min_points < 1) throw std::invalid_argument("min_points must be at least 1");
    return match_with_points(frame_k, frame_l, proposal_points(frame_k), th, min_points);
}

std::vector<MatchPair> build_matches(const std::vector<Frame>& frames, const NeighborhoodSpec& neighborhood, double th,
                                     std::size_t min_points) {
    if (!(th > 0.0 && th < 1.0)) throw std::invalid_argument("IoU threshold must lie in (0, 1)");
    // Visit frames in id order so the output order does not depend on input order.
    std::vector<std::size_t> order(frames.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frames[a].id < frames[b].id; });

    std::vector<std::vector<PointCloud>> box_points(frames.size());
    for (std::size_t i = 0; i < frames.size(); ++i) box_points[i] = proposal_points(frames[i]);

    const double r2 = neighborhood.radius * neighborhood.radius;
    std::vector<MatchPair> all;
    for (std::size_t a = 0; a < order.size(); ++a) {
        const Frame& fk = frames[order[a]];
        for (std::size_t b = a + 1; b < order.size(); ++b) {
            const Frame& fl = frames[order[b]];
            if ((fk.pose.center() - fl.pose.center()).squaredNorm() > r2 + 1e-12) continue;
            if (neighborhood.adjacent && !neighborhood.adjacent(fk.location_id, fl.location_id)) continue;
            auto m = match_with_points(fk, fl, box_points[order[a]], th, min_points);
            all.insert(all.end(), m.begin(), m.end());
        }
    }
    return all;
}

TripletMiner::TripletMiner(const std::vector<Frame>& frames, std::size_t negatives_per_ordering)
    : index_(frames), per_ordering_(negatives_per_ordering) {
    for (const auto& f : frames) {
        for (std::size_t i = 0; i < f.proposals.size(); ++i) {
            std::vector<std::size_t> eligible;
            for (std::size_t j = 0; j < f.proposals.size(); ++j) {
                if (j != i && iou(f.proposals[i].box, f.proposals[j].box) == 0.0) eligible.push_back(j);
            }
            negatives_.emplace(ProposalRef{f.id, i}, std::move(eligible));
        }
    }
}

const std::vector<std::size_t>& TripletMiner::eligible_negatives(const ProposalRef& anchor) const {
    static const std::vector<std::size_t> none;
    auto it = negatives_.find(anchor);
    return it == negatives_.end() ? none : it->second;
}

std::vector<Triplet> TripletMiner::mine(const std::vector<MatchPair>& matches, std::mt19937_64& rng) const {
    std::vector<Triplet> out;
    auto emit = [&](const ProposalRef& anchor, const ProposalRef& positive) {
        const auto& eligible = eligible_negatives(anchor);
        if (eligible.empty()) return;
        std::uniform_int_distribution<std::size_t> pick(0, eligible.size() - 1);
        for (std::size_t n = 0; n < per_ordering_; ++n)
            out.push_back(Triplet{anchor, positive, {anchor.frame_id, eligible[pick(rng)]}});
    };
    for (const auto& m : matches) {
        emit(m.a, m.b);
        emit(m.b, m.a);
    }
    return out;
}

std::vector<Triplet> mine_triplets(const std::vector<MatchPair>& matches, const std::vector<Frame>& frames,
                                   std::uint64_t rng_seed, std::size_t negatives_per_ordering) {
    TripletMiner miner(frames, negatives_per_ordering);
    std::mt19937_64 rng(rng_seed);
    return miner.mine(matches, rng);
}

}  // namespace ssod
