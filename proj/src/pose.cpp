#include <Eigen/Geometry>
#include <Eigen/LU>
#include <Eigen/SVD>
#include <cmath>

#include "endomap/stitcher.hpp"

namespace endomap {

Eigen::Matrix3d rotation_from_axis_angle(const Eigen::Vector3d& w) {
    const double theta = w.norm();
    if (theta < 1e-300) return Eigen::Matrix3d::Identity();
    return Eigen::AngleAxisd(theta, w / theta).toRotationMatrix();
}

Eigen::Matrix3d orthonormalize(const Eigen::Matrix3d& m) {
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d r = svd.matrixU() * svd.matrixV().transpose();
    if (r.determinant() < 0) {
        Eigen::Matrix3d u = svd.matrixU();
        u.col(2) *= -1;
        r = u * svd.matrixV().transpose();
    }
    return r;
}

double rotation_angle(const Eigen::Matrix3d& R) {
    return std::acos(std::clamp((R.trace() - 1.0) / 2.0, -1.0, 1.0));
}

Eigen::Matrix3d pose_homography(const CameraPose& pose, const Eigen::Matrix3d& K) {
    Eigen::Matrix3d m = pose.R;
    m.col(2) += pose.t;  // R + t n^T with n = e3
    return K * m * K.inverse();
}

namespace {

Eigen::Matrix3d skew(const Eigen::Vector3d& v) {
    Eigen::Matrix3d s;
    s << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
    return s;
}

}  // namespace

CameraPose pose_from_homography(const Homography33& h, const CameraIntrinsics& cam) {
    validate(cam);
    const Eigen::Matrix3d K = cam.K();
    Eigen::Matrix3d A = K.inverse() * h.matrix() * K;

    Eigen::JacobiSVD<Eigen::Matrix3d> svd0(A);
    const double s2 = svd0.singularValues()(1);
    if (!(s2 > 1e-12)) throw Error("pose_from_homography: degenerate homography");
    A /= s2;
    // The optical-axis point must stay in front of both views.
    if (A(2, 2) < 0) A = -A;

    Eigen::JacobiSVD<Eigen::Matrix3d> svd(A.transpose() * A, Eigen::ComputeFullV);
    const Eigen::Vector3d sig2 = svd.singularValues();
    const double s1 = sig2(0), s3 = sig2(2);

    CameraPose pose;
    if (s1 - s3 < 1e-10) {
        pose.R = orthonormalize(A);
        return pose;
    }

    Eigen::Matrix3d V = svd.matrixV();
    if (V.determinant() < 0) V = -V;
    const Eigen::Vector3d v1 = V.col(0), v2 = V.col(1), v3 = V.col(2);
    const double a = std::sqrt(std::max(0.0, 1.0 - s3));
    const double b = std::sqrt(std::max(0.0, s1 - 1.0));
    const double c = std::sqrt(s1 - s3);
    const Eigen::Vector3d u1 = (a * v1 + b * v3) / c;
    const Eigen::Vector3d u2 = (a * v1 - b * v3) / c;

    struct Candidate {
        Eigen::Matrix3d R;
        Eigen::Vector3d t;
        Eigen::Vector3d n;
    };
    std::vector<Candidate> cands;
    for (const Eigen::Vector3d& u : {u1, u2}) {
        Eigen::Matrix3d U, W;
        U << v2, u, skew(v2) * u;
        W << A * v2, A * u, skew(A * v2) * (A * u);
        const Eigen::Matrix3d R = orthonormalize(W * U.transpose());
        const Eigen::Vector3d n = skew(v2) * u;
        const Eigen::Vector3d t = (A - R) * n;
        cands.push_back({R, t, n});
        cands.push_back({R, -t, -n});
    }

    const Candidate* best = nullptr;
    for (const auto& cd : cands) {
        if (cd.n.z() <= 0) continue;  // plane must face the reference camera
        if (!best || rotation_angle(cd.R) < rotation_angle(best->R)) best = &cd;
    }
    if (!best) throw Error("pose_from_homography: no physically valid decomposition");
    pose.R = best->R;
    const double tn = best->t.norm();
    pose.t = tn > 1e-6 ? Eigen::Vector3d(best->t / tn) : Eigen::Vector3d::Zero();
    return pose;
}

}  // namespace endomap
