#pragma once

#include <Eigen/Core>
#include <vector>

namespace endomap {

using Point2 = Eigen::Vector2d;

// Projective 3x3 transform, stored with unit Frobenius norm and h33 >= 0.
class Homography33 {
public:
    Homography33() : m_(Eigen::Matrix3d::Identity() / std::sqrt(3.0)) {}
    explicit Homography33(const Eigen::Matrix3d& m);

    static Homography33 identity() { return Homography33(); }
    static Homography33 translation(double tx, double ty);

    const Eigen::Matrix3d& matrix() const { return m_; }
    // Same transform scaled so h33 = 1 (when h33 is not ~0).
    Eigen::Matrix3d unit_h33() const;

    Homography33 inverse() const;
    Homography33 operator*(const Homography33& o) const { return Homography33(m_ * o.m_); }

    // False when the point maps to infinity (|w| < 1e-12 relative to the row scale).
    bool apply(const Point2& p, Point2& out) const;
    Point2 operator()(const Point2& p) const;

private:
    Eigen::Matrix3d m_;
};

bool project(const Eigen::Matrix3d& h, const Point2& p, Point2& out);

}  // namespace endomap
