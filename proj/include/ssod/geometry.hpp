#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

namespace ssod {

/// Raised for malformed geometric input (bad rotation, invalid intrinsics,
/// points behind the camera).
class GeometryError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Rigid camera-to-world transform. Camera axes: x right, y down, z forward.
struct CameraPose {
    Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
    Eigen::Vector3d t = Eigen::Vector3d::Zero();

    /// Builds a pose and rejects R unless it is a proper rotation within `tol`.
    static CameraPose checked(const Eigen::Matrix3d& R, const Eigen::Vector3d& t, double tol = 1e-9);

    Eigen::Vector3d to_world(const Eigen::Vector3d& p_cam) const { return R * p_cam + t; }
    Eigen::Vector3d to_camera(const Eigen::Vector3d& p_world) const { return R.transpose() * (p_world - t); }
    const Eigen::Vector3d& center() const { return t; }
};

bool is_rotation(const Eigen::Matrix3d& R, double tol);

struct Intrinsics {
    double fx = 525.0;
    double fy = 525.0;
    double cx = 319.5;
    double cy = 239.5;
    int width = 640;
    int height = 480;

    void validate() const;
};

struct BoundingBox {
    double xmin = 0.0;
    double ymin = 0.0;
    double xmax = 0.0;
    double ymax = 0.0;

    double width() const { return xmax - xmin; }
    double height() const { return ymax - ymin; }
    double area() const { return valid() ? width() * height() : 0.0; }
    bool valid() const { return xmin < xmax && ymin < ymax; }
    bool contains(double x, double y) const { return x >= xmin && x <= xmax && y >= ymin && y <= ymax; }

    bool operator==(const BoundingBox&) const = default;
};

/// Points in the camera frame of the view they were captured from, meters.
using PointCloud = std::vector<Eigen::Vector3d>;

/// Pinhole projection; throws GeometryError when p.z() <= 0.
Eigen::Vector2d project_point(const Intrinsics& K, const Eigen::Vector3d& p);

/// Non-throwing variant used on hot paths.
std::optional<Eigen::Vector2d> try_project(const Intrinsics& K, const Eigen::Vector3d& p);

/// Points in front of the camera whose projection falls inside `box` (edges inclusive).
PointCloud points_in_box(const PointCloud& cloud, const Intrinsics& K, const BoundingBox& box);

BoundingBox clip_to_image(const BoundingBox& box, const Intrinsics& K);

/// Tight box around the projections of `points_cam` (already in the target
/// camera frame). Points with z <= 0 are skipped. The result is clipped to
/// the image; nullopt when fewer than `min_points` survive or the box is degenerate.
std::optional<BoundingBox> project_extent(const PointCloud& points_cam, const Intrinsics& K, std::size_t min_points);

/// Moves the depth points inside `box` from camera k into camera l and
/// returns the min/max box of their projections in l.
std::optional<BoundingBox> reproject_box(const BoundingBox& box, const PointCloud& cloud_k, const CameraPose& pose_k,
                                         const CameraPose& pose_l, const Intrinsics& K, std::size_t min_points = 10);

/// Same as above with the box points already extracted.
std::optional<BoundingBox> reproject_points(const PointCloud& box_points_k, const CameraPose& pose_k,
                                            const CameraPose& pose_l, const Intrinsics& K, std::size_t min_points);

double iou(const BoundingBox& a, const BoundingBox& b);

/// Greedy class-agnostic NMS: a box is dropped when its IoU with a kept,
/// higher-scoring box exceeds `iou_th`. Returns kept indices in input order.
std::vector<std::size_t> non_max_suppression(std::span<const BoundingBox> boxes, std::span<const double> scores,
                                             double iou_th = 0.7);

}  // namespace ssod
