#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ssod/frame.hpp"

namespace ssod {

class WorldConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct CategorySpec {
    std::string name;
    double recall = 1.0;               // probability a visible instance gets a proposal
    Eigen::Vector3d size_min{0.1, 0.1, 0.1};  // cuboid extents (x, y, z), meters
    Eigen::Vector3d size_max{0.2, 0.2, 0.2};
};

std::vector<CategorySpec> default_categories();

struct WorldConfig {
    double room_x = 8.0;
    double room_y = 8.0;
    int object_count = 30;
    std::vector<CategorySpec> categories = default_categories();
    double object_z_min = 0.2;  // object center height range
    double object_z_max = 1.8;
    double object_gap = 0.5;    // minimum footprint clearance between objects

    int grid_x = 10;
    int grid_y = 10;
    double grid_spacing = 0.5;
    double camera_height = 1.0;
    double camera_clearance = 0.3;  // free radius around each grid location
    double camera_reach = 1.5;      // preferred max distance from an object to its nearest grid location
    int orientations = 6;
    Intrinsics intrinsics;

    double depth_noise = 0.005;     // sigma along the viewing ray, meters
    int descriptor_dim = 64;
    double descriptor_noise = 0.05;
    double box_jitter = 2.0;        // sigma per box corner, pixels
    double false_positive_rate = 1.0;  // Poisson mean per frame
    double min_box_w = 33.0;
    double min_box_h = 25.0;
    double min_visible_fraction = 0.25;

    int samples_per_object = 500;
    int bin_size = 8;
    int view_buckets = 8;
    double view_scale = 1.0;
    double instance_view_scale = 0.3;  // per-object part of each bucket offset
    double category_scale = 0.6;
    double near_plane = 0.1;

    void validate() const;
};

/// Point-sampled cuboid placed in the room.
struct SimObject {
    InstanceId id = 0;
    int category = 0;
    Eigen::Vector3d size = Eigen::Vector3d::Ones();
    Eigen::Vector3d center = Eigen::Vector3d::Zero();
    double yaw = 0.0;
    std::vector<Eigen::Vector3d> local_samples;
    std::vector<Eigen::Vector3d> local_normals;
    double sample_spacing = 0.02;

    Eigen::Matrix3d rotation() const;
    Eigen::Vector3d to_world(const Eigen::Vector3d& local) const { return rotation() * local + center; }
    bool contains_world(const Eigen::Vector3d& p, double slack = 0.0) const;
};

struct CameraSlot {
    FrameId frame_id = 0;
    std::int64_t location_id = 0;
    CameraPose pose;
};

struct World {
    WorldConfig config;
    std::uint64_t seed = 0;
    std::vector<SimObject> objects;
    std::vector<Eigen::VectorXd> latents;  // per object, same order
    Eigen::VectorXd background_latent;
    std::vector<Eigen::VectorXd> view_offsets;  // per view bucket
    std::vector<std::vector<Eigen::VectorXd>> instance_view_offsets;  // per object, per view bucket

    /// Full view offset of an object seen from bucket `bucket`.
    Eigen::VectorXd view_offset(std::size_t object_index, int bucket) const;
    std::vector<CameraSlot> cameras;

    const std::string& category_name(InstanceId id) const;
};

/// Camera looking along world heading `yaw` (radians), world z up.
CameraPose camera_pose(const Eigen::Vector3d& center, double yaw);

/// Shapes, latents and placement all follow from `seed`. Throws
/// WorldConfigError when an object cannot be placed in 1000 tries.
World generate_world(const WorldConfig& config, std::uint64_t seed);

/// Same objects and descriptor codes, new placement: a second scan of the
/// environment with the objects moved.
World rearrange_world(const World& world, std::uint64_t placement_seed);

/// Rendered frame plus, per cloud point, the index of the object it came from.
struct RenderedFrame {
    Frame frame;
    std::vector<int> point_owner;
};

RenderedFrame render_frame(const World& world, const CameraSlot& slot, const Intrinsics& K, double depth_noise,
                           std::uint64_t seed);

Eigen::VectorXd descriptor(const BoundingBox& box, const RenderedFrame& rendered, const World& world,
                           double feature_noise, std::mt19937_64& rng);

std::vector<Proposal> generate_proposals(const RenderedFrame& rendered, const World& world, std::uint64_t seed);

std::vector<BoundingBox> size_filter(const std::vector<BoundingBox>& boxes, double min_w, double min_h);

/// Renders every camera slot and attaches proposals. Per-frame seeds derive
/// from (seed, frame id).
std::vector<Frame> simulate_frames(const World& world, std::uint64_t seed);

/// splitmix64-based seed derivation.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0);

}  // namespace ssod
