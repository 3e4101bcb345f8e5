#include "ssod/geometry.hpp"

#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace ssod {

bool is_rotation(const Eigen::Matrix3d& R, double tol) {
    if (!R.allFinite()) return false;
    const Eigen::Matrix3d err = R.transpose() * R - Eigen::Matrix3d::Identity();
    return err.cwiseAbs().maxCoeff() <= tol && std::abs(R.determinant() - 1.0) <= tol;
}

CameraPose CameraPose::checked(const Eigen::Matrix3d& R, const Eigen::Vector3d& t, double tol) {
    if (!is_rotation(R, tol)) throw GeometryError("pose rotation is not orthonormal with det 1");
    if (!t.allFinite()) throw GeometryError("pose translation is not finite");
    return CameraPose{R, t};
}

void Intrinsics::validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw GeometryError("focal lengths must be positive");
    if (width <= 0 || height <= 0) throw GeometryError("image size must be positive");
    if (!(cx >= 0.0 && cx < width) || !(cy >= 0.0 && cy < height))
        throw GeometryError("principal point outside image");
}

std::optional<Eigen::Vector2d> try_project(const Intrinsics& K, const Eigen::Vector3d& p) {
    if (!(p.z() > 0.0)) return std::nullopt;
    return Eigen::Vector2d(K.fx * p.x() / p.z() + K.cx, K.fy * p.y() / p.z() + K.cy);
}

Eigen::Vector2d project_point(const Intrinsics& K, const Eigen::Vector3d& p) {
    auto px = try_project(K, p);
    if (!px) throw GeometryError("point behind camera (z=" + std::to_string(p.z()) + ")");
    return *px;
}

PointCloud points_in_box(const PointCloud& cloud, const Intrinsics& K, const BoundingBox& box) {
    PointCloud inside;
    for (const auto& p : cloud) {
        if (auto px = try_project(K, p); px && box.contains(px->x(), px->y())) inside.push_back(p);
    }
    return inside;
}

BoundingBox clip_to_image(const BoundingBox& box, const Intrinsics& K) {
    return BoundingBox{std::clamp(box.xmin, 0.0, double(K.width)), std::clamp(box.ymin, 0.0, double(K.height)),
                       std::clamp(box.xmax, 0.0, double(K.width)), std::clamp(box.ymax, 0.0, double(K.height))};
}

std::optional<BoundingBox> project_extent(const PointCloud& points_cam, const Intrinsics& K, std::size_t min_points) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    BoundingBox ext{inf, inf, -inf, -inf};
    std::size_t survivors = 0;
    for (const auto& p : points_cam) {
        auto px = try_project(K, p);
        if (!px) continue;
        ++survivors;
        ext.xmin = std::min(ext.xmin, px->x());
        ext.ymin = std::min(ext.ymin, px->y());
        ext.xmax = std::max(ext.xmax, px->x());
        ext.ymax = std::max(ext.ymax, px->y());
    }
    if (survivors < std::max<std::size_t>(min_points, 1)) return std::nullopt;
    BoundingBox clipped = clip_to_image(ext, K);
    if (!clipped.valid()) return std::nullopt;
    return clipped;
}

std::optional<BoundingBox> reproject_points(const PointCloud& box_points_k, const CameraPose& pose_k,
                                            const CameraPose& pose_l, const Intrinsics& K, std::size_t min_points) {
    // Compose once: camera k -> world -> camera l.
    const Eigen::Matrix3d R_lk = pose_l.R.transpose() * pose_k.R;
    const Eigen::Vector3d t_lk = pose_l.R.transpose() * (pose_k.t - pose_l.t);
    PointCloud in_l;
    in_l.reserve(box_points_k.size());
    for (const auto& x : box_points_k) in_l.push_back(R_lk * x + t_lk);
    return project_extent(in_l, K, min_points);
}

std::optional<BoundingBox> reproject_box(const BoundingBox& box, const PointCloud& cloud_k, const CameraPose& pose_k,
                                         const CameraPose& pose_l, const Intrinsics& K, std::size_t min_points) {
    if (min_points < 1) throw GeometryError("min_points must be at least 1");
    return reproject_points(points_in_box(cloud_k, K, box), pose_k, pose_l, K, min_points);
}

double iou(const BoundingBox& a, const BoundingBox& b) {
    const double iw = std::min(a.xmax, b.xmax) - std::max(a.xmin, b.xmin);
    const double ih = std::min(a.ymax, b.ymax) - std::max(a.ymin, b.ymin);
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

std::vector<std::size_t> non_max_suppression(std::span<const BoundingBox> boxes, std::span<const double> scores,
                                             double iou_th) {
    if (boxes.size() != scores.size()) throw std::invalid_argument("boxes and scores differ in length");
    std::vector<std::size_t> order(boxes.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::vector<std::size_t> kept;
    for (std::size_t i : order) {
        const bool suppressed =
            std::any_of(kept.begin(), kept.end(), [&](std::size_t k) { return iou(boxes[i], boxes[k]) > iou_th; });
        if (!suppressed) kept.push_back(i);
    }
    std::sort(kept.begin(), kept.end());
    return kept;
}

}  // namespace ssod
