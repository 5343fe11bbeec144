#include <Eigen/LU>
#include <Eigen/SVD>
#include <cmath>
#include <limits>
#include <random>

#include "endomap/stitcher.hpp"

namespace endomap {

namespace {

// Similarity taking the centroid to the origin and the mean distance to sqrt(2).
Eigen::Matrix3d normalizer(const std::vector<Point2>& pts) {
    Point2 c(0, 0);
    for (const auto& p : pts) c += p;
    c /= static_cast<double>(pts.size());
    double d = 0.0;
    for (const auto& p : pts) d += (p - c).norm();
    d /= static_cast<double>(pts.size());
    const double s = d > 1e-12 ? std::sqrt(2.0) / d : 1.0;
    Eigen::Matrix3d t;
    t << s, 0, -s * c.x(), 0, s, -s * c.y(), 0, 0, 1;
    return t;
}

Point2 apply_affine(const Eigen::Matrix3d& t, const Point2& p) {
    return {t(0, 0) * p.x() + t(0, 2), t(1, 1) * p.y() + t(1, 2)};
}

double tri_area2(const Point2& a, const Point2& b, const Point2& c) {
    return std::abs((b.x() - a.x()) * (c.y() - a.y()) - (b.y() - a.y()) * (c.x() - a.x()));
}

bool degenerate(const Point2* p) {
    for (int i = 0; i < 4; ++i)
        for (int j = i + 1; j < 4; ++j)
            for (int k = j + 1; k < 4; ++k)
                if (tri_area2(p[i], p[j], p[k]) < 1e-2) return true;
    return false;
}

}  // namespace

Homography33 homography_dlt(const std::vector<Point2>& a, const std::vector<Point2>& b) {
    if (a.size() != b.size()) throw Error("homography_dlt: point lists differ in length");
    if (a.size() < 4) throw Error("homography_dlt needs at least 4 correspondences");
    const Eigen::Matrix3d ta = normalizer(a), tb = normalizer(b);
    const int n = static_cast<int>(a.size());
    Eigen::MatrixXd A(2 * n, 9);
    for (int i = 0; i < n; ++i) {
        const Point2 p = apply_affine(ta, a[i]);
        const Point2 q = apply_affine(tb, b[i]);
        A.row(2 * i) << -p.x(), -p.y(), -1, 0, 0, 0, q.x() * p.x(), q.x() * p.y(), q.x();
        A.row(2 * i + 1) << 0, 0, 0, -p.x(), -p.y(), -1, q.y() * p.x(), q.y() * p.y(), q.y();
    }
    Eigen::VectorXd h;
    if (n == 4) {
        // Square-ish system: pad to 9 rows so the null vector is the last right singular vector.
        Eigen::MatrixXd A9 = Eigen::MatrixXd::Zero(9, 9);
        A9.topRows(8) = A;
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(A9, Eigen::ComputeFullV);
        h = svd.matrixV().col(8);
    } else {
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
        h = svd.matrixV().col(8);
    }
    Eigen::Matrix3d hn;
    hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
    return Homography33(Eigen::Matrix3d(tb.inverse() * hn * ta));
}

double symmetric_transfer_error(const Eigen::Matrix3d& h, const Eigen::Matrix3d& h_inv, const Point2& a,
                                const Point2& b) {
    Point2 fa, bb;
    if (!project(h, a, fa) || !project(h_inv, b, bb)) return std::numeric_limits<double>::infinity();
    return std::sqrt(0.5 * ((fa - b).squaredNorm() + (bb - a).squaredNorm()));
}

namespace {

std::vector<int> count_inliers(const Eigen::Matrix3d& h, const std::vector<Point2>& a, const std::vector<Point2>& b,
                               double inlier_px) {
    const Eigen::Matrix3d hi = h.inverse();
    std::vector<int> in;
    for (std::size_t k = 0; k < a.size(); ++k)
        if (symmetric_transfer_error(h, hi, a[k], b[k]) < inlier_px) in.push_back(static_cast<int>(k));
    return in;
}

}  // namespace

RansacResult estimate_homography_ransac(const std::vector<Point2>& a, const std::vector<Point2>& b, int iters,
                                        double inlier_px, std::uint64_t seed) {
    if (a.size() != b.size()) throw Error("ransac: point lists differ in length");
    const int n = static_cast<int>(a.size());
    if (n < 4) throw Error("ransac needs at least 4 correspondences");
    std::mt19937_64 rng(seed);

    RansacResult best;
    bool have = false;
    for (int it = 0; it < iters; ++it) {
        int idx[4];
        for (int k = 0; k < 4; ++k) {
            bool fresh;
            do {
                idx[k] = static_cast<int>(rng() % static_cast<std::uint64_t>(n));
                fresh = true;
                for (int j = 0; j < k; ++j) fresh &= idx[j] != idx[k];
            } while (!fresh);
        }
        const Point2 sa[4] = {a[idx[0]], a[idx[1]], a[idx[2]], a[idx[3]]};
        const Point2 sb[4] = {b[idx[0]], b[idx[1]], b[idx[2]], b[idx[3]]};
        if (degenerate(sa) || degenerate(sb)) continue;
        Homography33 h;
        try {
            h = homography_dlt({sa, sa + 4}, {sb, sb + 4});
        } catch (const Error&) {
            continue;
        }
        auto in = count_inliers(h.matrix(), a, b, inlier_px);
        if (!have || in.size() > best.inliers.size()) {
            best.h = h;
            best.inliers = std::move(in);
            have = true;
        }
    }
    if (!have || best.inliers.size() < 4) throw Error("ransac found no model with at least 4 inliers");
    best.best_sample_inliers = static_cast<int>(best.inliers.size());

    // Refit on the consensus set while it keeps growing.
    for (int round = 0; round < 5; ++round) {
        std::vector<Point2> ia, ib;
        for (int k : best.inliers) {
            ia.push_back(a[k]);
            ib.push_back(b[k]);
        }
        Homography33 refit;
        try {
            refit = homography_dlt(ia, ib);
        } catch (const Error&) {
            break;
        }
        auto in = count_inliers(refit.matrix(), a, b, inlier_px);
        if (in.size() < best.inliers.size()) break;
        const bool same = in == best.inliers;
        best.h = refit;
        best.inliers = std::move(in);
        if (same) break;
    }
    return best;
}

}  // namespace endomap
