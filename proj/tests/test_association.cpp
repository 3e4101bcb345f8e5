#include <cmath>
#include <set>

#include <doctest.h>

#include "ssod/association.hpp"
#include "ssod/scenesim.hpp"

using namespace ssod;

namespace {

Eigen::Vector3d unproject(const Intrinsics& K, double u, double v, double z) {
    return {(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z};
}

/// Depth points projecting onto a regular pixel grid spanning [x0,x1]x[y0,y1].
PointCloud pixel_patch(const Intrinsics& K, double x0, double y0, double x1, double y1, double z) {
    PointCloud cloud;
    for (double u = x0; u <= x1 + 1e-9; u += 5)
        for (double v = y0; v <= y1 + 1e-9; v += 5) cloud.push_back(unproject(K, u, v, z));
    return cloud;
}

Proposal proposal(FrameId f, BoundingBox b) {
    Proposal p;
    p.frame_id = f;
    p.box = b;
    return p;
}

Frame frame(FrameId id, std::int64_t location, const CameraPose& pose, PointCloud cloud = {}) {
    Frame f;
    f.id = id;
    f.location_id = location;
    f.pose = pose;
    f.cloud = std::move(cloud);
    return f;
}

std::vector<Frame> small_world_frames(std::uint64_t seed, bool noise_free) {
    WorldConfig cfg;
    cfg.grid_x = 3;
    cfg.grid_y = 3;
    cfg.object_count = 12;
    if (noise_free) {
        cfg.depth_noise = 0;
        cfg.box_jitter = 0;
        cfg.false_positive_rate = 0;
    }
    const World w = generate_world(cfg, seed);
    return simulate_frames(w, derive_seed(seed, 1));
}

double agreement(const std::vector<MatchPair>& matches, const std::vector<Frame>& frames) {
    FrameIndex index(frames);
    std::size_t same = 0;
    for (const auto& m : matches) {
        const auto& a = index.proposal(m.a).gt_label;
        const auto& b = index.proposal(m.b).gt_label;
        if (a && b && *a == *b) ++same;
    }
    return matches.empty() ? 0.0 : double(same) / double(matches.size());
}

}  // namespace

TEST_CASE("match_frames on empty frames") {
    const Frame k = frame(0, 0, {});
    const Frame l = frame(1, 0, {});
    CHECK(match_frames(k, l).empty());
    CHECK_THROWS(match_frames(k, k));
}

TEST_CASE("match_frames keeps only the highest-IoU pair") {
    const Intrinsics K;
    // Identical poses: the reprojected box is the tight box (100,100,200,200).
    Frame k = frame(0, 0, {}, pixel_patch(K, 100, 100, 200, 200, 2.0));
    k.proposals.push_back(proposal(0, {95, 95, 205, 205}));
    Frame l = frame(1, 0, {});
    const double w = 100;
    for (double target : {0.5, 0.3, 0.2}) {
        const double s = w * (1 - target) / (1 + target);  // shift giving IoU = target
        l.proposals.push_back(proposal(1, {100 + s, 100, 200 + s, 200}));
    }
    const auto m = match_frames(k, l, 0.1);
    REQUIRE(m.size() == 1);
    CHECK(m[0].a == ProposalRef{0, 0});
    CHECK(m[0].b == ProposalRef{1, 0});
    CHECK(m[0].iou_score == doctest::Approx(0.5));
}

TEST_CASE("one object visible in two frames yields exactly one match") {
    const Intrinsics K;
    // A square plate at 3 m in frame k; frame l is shifted 0.2 m to the right.
    PointCloud plate;
    for (int i = 0; i <= 40; ++i)
        for (int j = 0; j <= 40; ++j) plate.emplace_back(-0.2 + 0.01 * i, -0.2 + 0.01 * j, 3.0);
    const CameraPose pk{};
    const CameraPose pl{Eigen::Matrix3d::Identity(), {0.2, 0, 0}};
    auto gt = [&](const CameraPose& pose) {
        const auto a = project_point(K, pose.to_camera({-0.2, -0.2, 3.0}));
        const auto b = project_point(K, pose.to_camera({0.2, 0.2, 3.0}));
        return BoundingBox{a.x(), a.y(), b.x(), b.y()};
    };
    Frame k = frame(0, 0, pk, plate);
    k.proposals.push_back(proposal(0, gt(pk)));
    k.proposals.push_back(proposal(0, {0, 0, 40, 40}));  // empty background box
    Frame l = frame(1, 1, pl);
    l.proposals.push_back(proposal(1, {500, 400, 600, 470}));
    l.proposals.push_back(proposal(1, gt(pl)));
    const auto m = match_frames(k, l);
    REQUIRE(m.size() == 1);
    CHECK(m[0].a == ProposalRef{0, 0});
    CHECK(m[0].b == ProposalRef{1, 1});
    CHECK(m[0].iou_score > 0.9);
}

TEST_CASE("build_matches degenerate inputs") {
    const std::vector<Frame> one{frame(0, 0, {})};
    CHECK(build_matches(one, {}).empty());
    CHECK_THROWS(build_matches(one, {}, 0.0));
}

TEST_CASE("build_matches with zero radius only pairs co-located frames") {
    const auto frames = small_world_frames(4, true);
    FrameIndex index(frames);
    NeighborhoodSpec zero;
    zero.radius = 0;
    const auto m = build_matches(frames, zero);
    CHECK_FALSE(m.empty());
    for (const auto& p : m) CHECK(index.at(p.a.frame_id).location_id == index.at(p.b.frame_id).location_id);
}

TEST_CASE("match properties on a simulated world") {
    const auto frames = small_world_frames(2, true);
    const auto m = build_matches(frames, {});
    REQUIRE(m.size() > 20);

    // Sorted by frame pair and one-to-one within each pair.
    std::set<std::tuple<FrameId, FrameId, std::size_t>> used_a, used_b;
    for (std::size_t i = 0; i < m.size(); ++i) {
        CHECK(m[i].a.frame_id < m[i].b.frame_id);
        CHECK(m[i].iou_score >= 0.1);
        if (i > 0)
            CHECK(std::make_pair(m[i - 1].a.frame_id, m[i - 1].b.frame_id) <=
                  std::make_pair(m[i].a.frame_id, m[i].b.frame_id));
        CHECK(used_a.insert({m[i].a.frame_id, m[i].b.frame_id, m[i].a.index}).second);
        CHECK(used_b.insert({m[i].a.frame_id, m[i].b.frame_id, m[i].b.index}).second);
    }

    // Raising the threshold never adds pairs.
    std::size_t prev = m.size();
    for (double th : {0.2, 0.3, 0.5, 0.7}) {
        const auto n = build_matches(frames, {}, th).size();
        CHECK(n <= prev);
        prev = n;
    }

    // Input order does not matter.
    auto shuffled = frames;
    std::reverse(shuffled.begin(), shuffled.end());
    CHECK(build_matches(shuffled, {}) == m);
}

TEST_CASE("reverse matching agrees with forward matching on ground truth") {
    const auto frames = small_world_frames(3, false);
    FrameIndex index(frames);
    const auto forward = build_matches(frames, {});
    std::vector<MatchPair> backward;
    std::set<std::pair<FrameId, FrameId>> pairs;
    for (const auto& p : forward) pairs.insert({p.a.frame_id, p.b.frame_id});
    for (const auto& [a, b] : pairs) {
        auto r = match_frames(index.at(b), index.at(a));
        backward.insert(backward.end(), r.begin(), r.end());
    }
    CHECK(std::abs(agreement(forward, frames) - agreement(backward, frames)) < 0.05);
}

TEST_CASE("mine_triplets enumerations") {
    SUBCASE("single-proposal anchor frame gives no triplet") {
        std::vector<Frame> frames{frame(0, 0, {}), frame(1, 0, {})};
        frames[0].proposals.push_back(proposal(0, {0, 0, 10, 10}));
        frames[1].proposals.push_back(proposal(1, {0, 0, 10, 10}));
        const std::vector<MatchPair> m{{{0, 0}, {1, 0}, 1.0}};
        CHECK(mine_triplets(m, frames, 1).empty());
    }
    SUBCASE("one disjoint neighbor per frame gives two triplets") {
        std::vector<Frame> frames{frame(0, 0, {}), frame(1, 0, {})};
        for (FrameId f : {0, 1}) {
            frames[std::size_t(f)].proposals.push_back(proposal(f, {0, 0, 10, 10}));
            frames[std::size_t(f)].proposals.push_back(proposal(f, {5, 5, 15, 15}));  // overlapping, ineligible
            frames[std::size_t(f)].proposals.push_back(proposal(f, {50, 50, 60, 60}));
        }
        const std::vector<MatchPair> m{{{0, 0}, {1, 0}, 1.0}};
        const auto t = mine_triplets(m, frames, 1);
        REQUIRE(t.size() == 2);
        CHECK(t[0] == Triplet{{0, 0}, {1, 0}, {0, 2}});
        CHECK(t[1] == Triplet{{1, 0}, {0, 0}, {1, 2}});
    }
}

TEST_CASE("mined triplets satisfy their invariants and are deterministic") {
    const auto frames = small_world_frames(5, false);
    FrameIndex index(frames);
    const auto m = build_matches(frames, {});
    const auto t = mine_triplets(m, frames, 42);
    REQUIRE_FALSE(t.empty());
    CHECK(t == mine_triplets(m, frames, 42));
    std::set<std::pair<ProposalRef, ProposalRef>> matched;
    for (const auto& p : m) {
        matched.insert({p.a, p.b});
        matched.insert({p.b, p.a});
    }
    for (const auto& x : t) {
        CHECK(x.anchor.frame_id != x.positive.frame_id);
        CHECK(x.negative.frame_id == x.anchor.frame_id);
        CHECK(iou(index.proposal(x.anchor).box, index.proposal(x.negative).box) == 0.0);
        CHECK(matched.count({x.anchor, x.positive}) == 1);
    }
}
