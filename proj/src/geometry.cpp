#include "endomap/geometry.hpp"

#include <Eigen/LU>
#include <cmath>

#include "endomap/image.hpp"

namespace endomap {

Homography33::Homography33(const Eigen::Matrix3d& m) {
    const double n = m.norm();
    if (!(n > 0.0) || !std::isfinite(n)) throw Error("homography matrix is zero or non-finite");
    m_ = m / n;
    if (m_(2, 2) < 0.0) m_ = -m_;
    if (std::abs(m_.determinant()) <= 1e-12) throw Error("homography is singular");
}

Homography33 Homography33::translation(double tx, double ty) {
    Eigen::Matrix3d m = Eigen::Matrix3d::Identity();
    m(0, 2) = tx;
    m(1, 2) = ty;
    return Homography33(m);
}

Eigen::Matrix3d Homography33::unit_h33() const {
    if (std::abs(m_(2, 2)) < 1e-12) return m_;
    return m_ / m_(2, 2);
}

Homography33 Homography33::inverse() const { return Homography33(Eigen::Matrix3d(m_.inverse())); }

bool project(const Eigen::Matrix3d& h, const Point2& p, Point2& out) {
    const Eigen::Vector3d v = h * Eigen::Vector3d(p.x(), p.y(), 1.0);
    const double scale = std::abs(h(2, 0) * p.x()) + std::abs(h(2, 1) * p.y()) + std::abs(h(2, 2));
    if (std::abs(v.z()) <= 1e-12 * std::max(scale, 1e-300)) return false;
    out = Point2(v.x() / v.z(), v.y() / v.z());
    return std::isfinite(out.x()) && std::isfinite(out.y());
}

bool Homography33::apply(const Point2& p, Point2& out) const { return project(m_, p, out); }

Point2 Homography33::operator()(const Point2& p) const {
    Point2 out;
    if (!apply(p, out)) throw Error("point maps to infinity under homography");
    return out;
}

}  // namespace endomap
