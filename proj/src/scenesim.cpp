#include "ssod/scenesim.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include <Eigen/Geometry>

#include "ssod/discovery.hpp"

namespace ssod {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr int kMaxPlacementTries = 1000;

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

Eigen::VectorXd random_direction(int dim, double scale, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Eigen::VectorXd v(dim);
    for (int i = 0; i < dim; ++i) v(i) = n(rng);
    return v * (scale / std::sqrt(double(dim)));
}

void sample_cuboid(SimObject& obj, int count, std::mt19937_64& rng) {
    const Eigen::Vector3d h = obj.size / 2.0;
    const std::array<double, 3> face_area{obj.size.y() * obj.size.z(), obj.size.x() * obj.size.z(),
                                          obj.size.x() * obj.size.y()};
    const double total = 2.0 * (face_area[0] + face_area[1] + face_area[2]);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::discrete_distribution<int> face({face_area[0], face_area[0], face_area[1], face_area[1], face_area[2],
                                          face_area[2]});
    obj.local_samples.clear();
    obj.local_normals.clear();
    for (int s = 0; s < count; ++s) {
        const int f = face(rng);
        const int axis = f / 2;
        const double sign = (f % 2 == 0) ? 1.0 : -1.0;
        Eigen::Vector3d p;
        for (int a = 0; a < 3; ++a) p(a) = (u01(rng) * 2.0 - 1.0) * h(a);
        p(axis) = sign * h(axis);
        Eigen::Vector3d n = Eigen::Vector3d::Zero();
        n(axis) = sign;
        obj.local_samples.push_back(p);
        obj.local_normals.push_back(n);
    }
    obj.sample_spacing = std::sqrt(total / std::max(count, 1));
}

std::array<Eigen::Vector2d, 4> footprint(const SimObject& o, double grow) {
    const double c = std::cos(o.yaw), s = std::sin(o.yaw);
    const Eigen::Vector2d ax(c, s), ay(-s, c);
    const double hx = o.size.x() / 2.0 + grow, hy = o.size.y() / 2.0 + grow;
    const Eigen::Vector2d ctr = o.center.head<2>();
    return {ctr + hx * ax + hy * ay, ctr - hx * ax + hy * ay, ctr - hx * ax - hy * ay, ctr + hx * ax - hy * ay};
}

bool footprints_overlap(const SimObject& a, const SimObject& b, double gap) {
    const auto pa = footprint(a, gap / 2.0);
    const auto pb = footprint(b, gap / 2.0);
    for (const auto* poly : {&pa, &pb}) {
        for (int e = 0; e < 4; ++e) {
            const Eigen::Vector2d edge = (*poly)[(e + 1) % 4] - (*poly)[e];
            const Eigen::Vector2d axis(-edge.y(), edge.x());
            double amin = std::numeric_limits<double>::infinity(), amax = -amin, bmin = amin, bmax = -amin;
            for (const auto& p : pa) {
                amin = std::min(amin, axis.dot(p));
                amax = std::max(amax, axis.dot(p));
            }
            for (const auto& p : pb) {
                bmin = std::min(bmin, axis.dot(p));
                bmax = std::max(bmax, axis.dot(p));
            }
            if (amax < bmin || bmax < amin) return false;
        }
    }
    return true;
}

std::vector<Eigen::Vector2d> grid_locations(const WorldConfig& cfg) {
    std::vector<Eigen::Vector2d> locs;
    for (int iy = 0; iy < cfg.grid_y; ++iy)
        for (int ix = 0; ix < cfg.grid_x; ++ix)
            locs.emplace_back(cfg.room_x / 2.0 + (ix - (cfg.grid_x - 1) / 2.0) * cfg.grid_spacing,
                              cfg.room_y / 2.0 + (iy - (cfg.grid_y - 1) / 2.0) * cfg.grid_spacing);
    return locs;
}

void place_objects(World& world, std::uint64_t seed) {
    const WorldConfig& cfg = world.config;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const auto cams = grid_locations(cfg);
    // Largest footprints first: small objects still fit into the gaps left over.
    std::vector<std::size_t> order(world.objects.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const auto& sa = world.objects[a].size;
        const auto& sb = world.objects[b].size;
        return sa.x() * sa.y() > sb.x() * sb.y();
    });
    std::vector<const SimObject*> done;
    for (std::size_t i : order) {
        SimObject& obj = world.objects[i];
        const double half_diag = 0.5 * std::hypot(obj.size.x(), obj.size.y());
        bool placed = false;
        for (int attempt = 0; attempt < kMaxPlacementTries && !placed; ++attempt) {
            obj.yaw = u01(rng) * kTwoPi;
            const double margin = half_diag + 0.05;
            if (cfg.room_x <= 2 * margin || cfg.room_y <= 2 * margin) break;
            obj.center.x() = margin + u01(rng) * (cfg.room_x - 2 * margin);
            obj.center.y() = margin + u01(rng) * (cfg.room_y - 2 * margin);
            const double zlo = std::max(cfg.object_z_min, obj.size.z() / 2.0);
            obj.center.z() = zlo + u01(rng) * std::max(cfg.object_z_max - zlo, 0.0);
            double nearest = std::numeric_limits<double>::infinity();
            for (const auto& c : cams) nearest = std::min(nearest, (c - obj.center.head<2>()).norm());
            if (nearest < cfg.camera_clearance + half_diag) continue;
            // Stay within reach of the scan while that is still possible.
            if (attempt < kMaxPlacementTries / 2 && nearest > cfg.camera_reach) continue;
            placed = std::none_of(done.begin(), done.end(), [&](const SimObject* other) {
                return footprints_overlap(obj, *other, cfg.object_gap);
            });
        }
        if (!placed)
            throw WorldConfigError("could not place object " + std::to_string(obj.id) + " after " +
                                   std::to_string(kMaxPlacementTries) + " tries; room is overcrowded");
        done.push_back(&obj);
    }
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
    return splitmix64(splitmix64(splitmix64(base) ^ a) ^ (b * 0xd1b54a32d192ed03ULL));
}

std::vector<CategorySpec> default_categories() {
    return {
        {"cereal box", 0.51, {0.30, 0.105, 0.42}, {0.45, 0.15, 0.57}},
        {"can", 0.55, {0.15, 0.15, 0.21}, {0.21, 0.21, 0.30}},
        {"soap", 0.70, {0.21, 0.12, 0.15}, {0.33, 0.18, 0.21}},
        {"bottle", 0.68, {0.12, 0.12, 0.375}, {0.18, 0.18, 0.525}},
        {"other", 0.70, {0.18, 0.15, 0.15}, {0.525, 0.45, 0.525}},
    };
}

void WorldConfig::validate() const {
    auto require = [](bool ok, const char* what) {
        if (!ok) throw WorldConfigError(what);
    };
    require(room_x > 0 && room_y > 0, "room extents must be positive");
    require(object_count >= 0, "object count must be non-negative");
    require(object_count == 0 || !categories.empty(), "objects need at least one category");
    for (const auto& c : categories) {
        require(c.recall >= 0.0 && c.recall <= 1.0, "category recall must lie in [0, 1]");
        require((c.size_min.array() > 0).all() && (c.size_max.array() >= c.size_min.array()).all(),
                "category size range invalid");
    }
    require(object_z_max >= object_z_min, "object height range inverted");
    require(grid_x >= 1 && grid_y >= 1 && orientations >= 1, "grid and orientation counts must be >= 1");
    require(grid_spacing > 0, "grid spacing must be positive");
    require(camera_clearance >= 0, "camera clearance must be non-negative");
    require(camera_reach > camera_clearance, "camera reach must exceed the camera clearance");
    require(object_gap >= 0, "object gap must be non-negative");
    intrinsics.validate();
    require(depth_noise >= 0 && descriptor_noise >= 0 && box_jitter >= 0, "noise sigmas must be non-negative");
    require(false_positive_rate >= 0, "false-positive rate must be non-negative");
    require(descriptor_dim >= 1, "descriptor dimension must be >= 1");
    require(min_box_w >= 0 && min_box_h >= 0, "min box size must be non-negative");
    require(min_visible_fraction >= 0 && min_visible_fraction <= 1, "visible fraction must lie in [0, 1]");
    require(samples_per_object >= 1 && bin_size >= 1 && view_buckets >= 1, "sampling parameters must be >= 1");
    require(view_scale >= 0 && instance_view_scale >= 0 && category_scale >= 0, "descriptor scales must be non-negative");
    require(near_plane > 0, "near plane must be positive");
}

Eigen::Matrix3d SimObject::rotation() const { return Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()).toRotationMatrix(); }

bool SimObject::contains_world(const Eigen::Vector3d& p, double slack) const {
    const Eigen::Vector3d local = rotation().transpose() * (p - center);
    return (local.cwiseAbs().array() <= (size / 2.0).array() + slack).all();
}

Eigen::VectorXd World::view_offset(std::size_t object_index, int bucket) const {
    return view_offsets.at(std::size_t(bucket)) + instance_view_offsets.at(object_index).at(std::size_t(bucket));
}

const std::string& World::category_name(InstanceId id) const {
    for (const auto& o : objects)
        if (o.id == id) return config.categories.at(std::size_t(o.category)).name;
    throw std::out_of_range("unknown instance id " + std::to_string(id));
}

CameraPose camera_pose(const Eigen::Vector3d& center, double yaw) {
    const double c = std::cos(yaw), s = std::sin(yaw);
    Eigen::Matrix3d R;
    R.col(0) = Eigen::Vector3d(s, -c, 0.0);   // image x: right
    R.col(1) = Eigen::Vector3d(0.0, 0.0, -1.0);  // image y: down
    R.col(2) = Eigen::Vector3d(c, s, 0.0);    // optical axis
    return CameraPose{R, center};
}

World generate_world(const WorldConfig& config, std::uint64_t seed) {
    config.validate();
    World world;
    world.config = config;
    world.seed = seed;

    std::mt19937_64 shape_rng(derive_seed(seed, 0xA1));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (int i = 0; i < config.object_count; ++i) {
        SimObject obj;
        obj.id = i;
        obj.category = i % int(config.categories.size());
        const auto& cat = config.categories[std::size_t(obj.category)];
        for (int a = 0; a < 3; ++a) obj.size(a) = cat.size_min(a) + u01(shape_rng) * (cat.size_max(a) - cat.size_min(a));
        sample_cuboid(obj, config.samples_per_object, shape_rng);
        world.objects.push_back(std::move(obj));
    }

    std::mt19937_64 code_rng(derive_seed(seed, 0xB2));
    const int d = config.descriptor_dim;
    std::vector<Eigen::VectorXd> category_codes;
    for (std::size_t c = 0; c < config.categories.size(); ++c)
        category_codes.push_back(random_direction(d, config.category_scale, code_rng));
    for (const auto& obj : world.objects)
        world.latents.push_back(category_codes[std::size_t(obj.category)] + random_direction(d, 1.0, code_rng));
    world.background_latent = random_direction(d, 1.0, code_rng);
    for (int b = 0; b < config.view_buckets; ++b) world.view_offsets.push_back(random_direction(d, config.view_scale, code_rng));
    std::mt19937_64 view_rng(derive_seed(seed, 0xD4));
    for (std::size_t i = 0; i < world.objects.size(); ++i) {
        auto& per_bucket = world.instance_view_offsets.emplace_back();
        for (int b = 0; b < config.view_buckets; ++b)
            per_bucket.push_back(random_direction(d, config.instance_view_scale, view_rng));
    }

    const auto locs = grid_locations(config);
    for (std::size_t l = 0; l < locs.size(); ++l) {
        for (int o = 0; o < config.orientations; ++o) {
            const Eigen::Vector3d center(locs[l].x(), locs[l].y(), config.camera_height);
            world.cameras.push_back(CameraSlot{FrameId(l) * config.orientations + o, std::int64_t(l),
                                               camera_pose(center, kTwoPi * o / config.orientations)});
        }
    }

    place_objects(world, derive_seed(seed, 0xC3));
    return world;
}

World rearrange_world(const World& world, std::uint64_t placement_seed) {
    World moved = world;
    place_objects(moved, derive_seed(placement_seed, 0xC3));
    return moved;
}

RenderedFrame render_frame(const World& world, const CameraSlot& slot, const Intrinsics& K, double depth_noise,
                           std::uint64_t seed) {
    const WorldConfig& cfg = world.config;
    const int bin = cfg.bin_size;
    const int bins_x = (K.width + bin - 1) / bin;
    const int bins_y = (K.height + bin - 1) / bin;
    std::vector<double> zbuf(std::size_t(bins_x * bins_y), std::numeric_limits<double>::infinity());
    std::vector<int> owner(zbuf.size(), -1);

    struct Sample {
        int object;
        Eigen::Vector3d cam;
        Eigen::Vector2d px;
        int bin;
    };
    std::vector<Sample> in_view;
    std::vector<int> front_facing(world.objects.size(), 0);
    const Eigen::Vector3d eye = slot.pose.center();

    for (std::size_t oi = 0; oi < world.objects.size(); ++oi) {
        const SimObject& obj = world.objects[oi];
        const Eigen::Matrix3d R = obj.rotation();
        for (std::size_t s = 0; s < obj.local_samples.size(); ++s) {
            const Eigen::Vector3d pw = R * obj.local_samples[s] + obj.center;
            if ((R * obj.local_normals[s]).dot(eye - pw) <= 0.0) continue;
            ++front_facing[oi];
            const Eigen::Vector3d pc = slot.pose.to_camera(pw);
            if (pc.z() <= cfg.near_plane) continue;
            const Eigen::Vector2d px(K.fx * pc.x() / pc.z() + K.cx, K.fy * pc.y() / pc.z() + K.cy);
            if (px.x() < 0 || px.y() < 0 || px.x() >= K.width || px.y() >= K.height) continue;

            // Splat a footprint so sparse surfaces still occlude what is behind them.
            const double r = 0.75 * obj.sample_spacing * K.fx / pc.z();
            const int bx0 = std::max(0, int(std::floor((px.x() - r) / bin)));
            const int bx1 = std::min(bins_x - 1, int(std::floor((px.x() + r) / bin)));
            const int by0 = std::max(0, int(std::floor((px.y() - r) / bin)));
            const int by1 = std::min(bins_y - 1, int(std::floor((px.y() + r) / bin)));
            for (int by = by0; by <= by1; ++by)
                for (int bx = bx0; bx <= bx1; ++bx) {
                    const std::size_t k = std::size_t(by * bins_x + bx);
                    if (pc.z() < zbuf[k]) {
                        zbuf[k] = pc.z();
                        owner[k] = int(oi);
                    }
                }
            const int center_bin = int(px.y()) / bin * bins_x + int(px.x()) / bin;
            in_view.push_back(Sample{int(oi), pc, px, center_bin});
        }
    }

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    RenderedFrame out;
    Frame& f = out.frame;
    f.id = slot.frame_id;
    f.location_id = slot.location_id;
    f.pose = slot.pose;
    f.intrinsics = K;

    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<BoundingBox> extent(world.objects.size(), BoundingBox{inf, inf, -inf, -inf});
    std::vector<int> visible(world.objects.size(), 0);
    for (const auto& s : in_view) {
        if (owner[std::size_t(s.bin)] != s.object) continue;
        auto& e = extent[std::size_t(s.object)];
        e.xmin = std::min(e.xmin, s.px.x());
        e.ymin = std::min(e.ymin, s.px.y());
        e.xmax = std::max(e.xmax, s.px.x());
        e.ymax = std::max(e.ymax, s.px.y());
        ++visible[std::size_t(s.object)];

        Eigen::Vector3d p = s.cam;
        if (depth_noise > 0.0) p += depth_noise * noise(rng) * p.normalized();
        // Clouds are stored as float32; keep the in-memory copy identical.
        f.cloud.emplace_back(double(float(p.x())), double(float(p.y())), double(float(p.z())));
        out.point_owner.push_back(s.object);
    }

    for (std::size_t oi = 0; oi < world.objects.size(); ++oi) {
        if (visible[oi] == 0 || front_facing[oi] == 0) continue;
        if (double(visible[oi]) / double(front_facing[oi]) < cfg.min_visible_fraction) continue;
        const BoundingBox& e = extent[oi];
        if (!e.valid() || e.width() < cfg.min_box_w || e.height() < cfg.min_box_h) continue;
        f.gt_boxes.push_back(GtBox{e, world.objects[oi].id});
    }
    return out;
}

Eigen::VectorXd descriptor(const BoundingBox& box, const RenderedFrame& rendered, const World& world,
                           double feature_noise, std::mt19937_64& rng) {
    const Frame& f = rendered.frame;
    const int d = world.config.descriptor_dim;
    std::vector<int> counts(world.objects.size(), 0);
    int total = 0;
    for (std::size_t i = 0; i < f.cloud.size(); ++i) {
        auto px = try_project(f.intrinsics, f.cloud[i]);
        if (px && box.contains(px->x(), px->y())) {
            ++counts[std::size_t(rendered.point_owner[i])];
            ++total;
        }
    }
    Eigen::VectorXd v = Eigen::VectorXd::Zero(d);
    if (total == 0) {
        v = world.background_latent;
    } else {
        const int buckets = world.config.view_buckets;
        for (std::size_t oi = 0; oi < counts.size(); ++oi) {
            if (counts[oi] == 0) continue;
            const SimObject& obj = world.objects[oi];
            // Azimuth of the camera as seen from the object's own frame.
            const Eigen::Vector3d dir = obj.rotation().transpose() * (f.pose.center() - obj.center);
            double az = std::atan2(dir.y(), dir.x());
            if (az < 0) az += kTwoPi;
            const int bucket = std::min(buckets - 1, int(az / (kTwoPi / buckets)));
            v += (double(counts[oi]) / total) * (world.latents[oi] + world.view_offset(oi, bucket));
        }
    }
    if (feature_noise > 0.0) {
        std::normal_distribution<double> n(0.0, feature_noise);
        for (int i = 0; i < d; ++i) v(i) += n(rng);
    }
    return v;
}

std::vector<BoundingBox> size_filter(const std::vector<BoundingBox>& boxes, double min_w, double min_h) {
    std::vector<BoundingBox> kept;
    std::copy_if(boxes.begin(), boxes.end(), std::back_inserter(kept),
                 [&](const BoundingBox& b) { return b.width() >= min_w && b.height() >= min_h; });
    return kept;
}

std::vector<Proposal> generate_proposals(const RenderedFrame& rendered, const World& world, std::uint64_t seed) {
    const WorldConfig& cfg = world.config;
    const Frame& f = rendered.frame;
    const Intrinsics& K = f.intrinsics;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::normal_distribution<double> jitter(0.0, 1.0);

    std::vector<BoundingBox> boxes;
    std::vector<double> scores;
    for (const auto& g : f.gt_boxes) {
        const int cat = world.objects.at(std::size_t(g.instance_id)).category;
        if (u01(rng) >= cfg.categories[std::size_t(cat)].recall) continue;
        BoundingBox b = g.box;
        if (cfg.box_jitter > 0.0) {
            const double x0 = b.xmin + cfg.box_jitter * jitter(rng), y0 = b.ymin + cfg.box_jitter * jitter(rng);
            const double x1 = b.xmax + cfg.box_jitter * jitter(rng), y1 = b.ymax + cfg.box_jitter * jitter(rng);
            b = clip_to_image(BoundingBox{std::min(x0, x1), std::min(y0, y1), std::max(x0, x1), std::max(y0, y1)}, K);
        }
        const double score = 0.5 + 0.5 * u01(rng);
        if (!b.valid()) continue;
        boxes.push_back(b);
        scores.push_back(score);
    }

    if (cfg.false_positive_rate > 0.0) {
        const int n_fp = std::poisson_distribution<int>(cfg.false_positive_rate)(rng);
        for (int k = 0; k < n_fp; ++k) {
            for (int attempt = 0; attempt < 50; ++attempt) {
                const double w = std::min(40.0 + 120.0 * u01(rng), double(K.width));
                const double h = std::min(30.0 + 90.0 * u01(rng), double(K.height));
                const double x = u01(rng) * (K.width - w), y = u01(rng) * (K.height - h);
                const BoundingBox b{x, y, x + w, y + h};
                // Background means no gt overlap and no visible object surface inside.
                const bool on_object = std::any_of(f.gt_boxes.begin(), f.gt_boxes.end(),
                                                   [&](const GtBox& g) { return iou(b, g.box) > 0.0; });
                if (on_object || !points_in_box(f.cloud, K, b).empty()) continue;
                boxes.push_back(b);
                scores.push_back(0.01 + 0.49 * u01(rng));
                break;
            }
        }
    }

    const auto kept = non_max_suppression(boxes, scores, 0.7);
    std::vector<Proposal> proposals;
    for (std::size_t k = 0; k < kept.size(); ++k) {
        Proposal p;
        p.frame_id = f.id;
        p.box = boxes[kept[k]];
        p.objectness = scores[kept[k]];
        std::mt19937_64 feature_rng(derive_seed(seed, 0xFEA7, k));
        p.feature = descriptor(p.box, rendered, world, cfg.descriptor_noise, feature_rng);
        proposals.push_back(std::move(p));
    }
    const auto labels = label_proposals_by_gt(proposals, f.gt_boxes, 0.5);
    for (std::size_t k = 0; k < proposals.size(); ++k) proposals[k].gt_label = labels[k];
    return proposals;
}

std::vector<Frame> simulate_frames(const World& world, std::uint64_t seed) {
    std::vector<Frame> frames;
    frames.reserve(world.cameras.size());
    for (const auto& slot : world.cameras) {
        const auto fid = std::uint64_t(slot.frame_id);
        RenderedFrame r = render_frame(world, slot, world.config.intrinsics, world.config.depth_noise,
                                       derive_seed(seed, fid, 1));
        r.frame.proposals = generate_proposals(r, world, derive_seed(seed, fid, 2));
        frames.push_back(std::move(r.frame));
    }
    return frames;
}

}  // namespace ssod
