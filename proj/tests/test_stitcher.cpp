#include <doctest.h>

#include <Eigen/LU>
#include <cmath>
#include <map>

#include "endomap/kernels.hpp"
#include "endomap/stitcher.hpp"
#include "endomap/synthkit.hpp"
#include "support.hpp"

using namespace endomap;

namespace {

CameraIntrinsics camera(int w = 128, int h = 128, double f = 300.0) {
    CameraIntrinsics c;
    c.width = w;
    c.height = h;
    c.fx = c.fy = f;
    c.cx = (w - 1) / 2.0;
    c.cy = (h - 1) / 2.0;
    return c;
}

Point2 apply(const Eigen::Matrix3d& h, const Point2& p) {
    const Eigen::Vector3d v = h * Eigen::Vector3d(p.x(), p.y(), 1.0);
    return v.head<2>() / v.z();
}

Eigen::Matrix3d unit_frobenius(Eigen::Matrix3d m) {
    m /= m.norm();
    if (m(2, 2) < 0) m = -m;
    return m;
}

Eigen::Matrix3d random_h(std::mt19937& rng) {
    std::uniform_real_distribution<double> e(-0.1, 0.1);
    Eigen::Matrix3d h;
    h << 1.0 + e(rng), e(rng), 20 * e(rng), e(rng), 1.0 + e(rng), 20 * e(rng), 1e-3 * e(rng), 1e-3 * e(rng), 1.0;
    return h;
}

double deg(double rad) { return rad * 180.0 / M_PI; }

// Mean symmetric transfer error over all edge points, computed directly.
double mean_transfer(const std::vector<BAEdge>& edges, const Eigen::Matrix3d& K, const std::vector<CameraPose>& poses) {
    double s = 0.0;
    int n = 0;
    for (const auto& e : edges) {
        const Eigen::Matrix3d hij = pose_homography(poses[e.j], K) * pose_homography(poses[e.i], K).inverse();
        const Eigen::Matrix3d hji = hij.inverse();
        for (std::size_t k = 0; k < e.pa.size(); ++k) {
            s += 0.5 * ((apply(hij, e.pa[k]) - e.pb[k]).norm() + (apply(hji, e.pb[k]) - e.pa[k]).norm());
            ++n;
        }
    }
    return s / n;
}

// Rotation-only scene: `frames` poses swept about y, points sampled in the anchor
// view and projected exactly into every frame that sees them.
struct BAFixture {
    Eigen::Matrix3d K;
    std::vector<CameraPose> truth;
    std::vector<BAEdge> edges;
};

BAFixture ba_fixture(int frames, std::uint64_t seed) {
    BAFixture f;
    const CameraIntrinsics cam = camera();
    f.K = cam.K();
    std::mt19937 rng(static_cast<unsigned>(seed));
    std::uniform_real_distribution<double> u(0.0, 127.0);
    for (int k = 0; k < frames; ++k) {
        CameraPose p;
        p.R = rotation_from_axis_angle(Eigen::Vector3d(0.01 * k, 0.04 * k, 0.005 * k));
        f.truth.push_back(p);
    }
    auto add = [&](int i, int j) {
        BAEdge e;
        e.i = i;
        e.j = j;
        const Eigen::Matrix3d hi = pose_homography(f.truth[i], f.K), hj = pose_homography(f.truth[j], f.K);
        while (e.pa.size() < 60) {
            const Point2 a0(u(rng), u(rng));
            const Point2 pa = apply(hi, a0), pb = apply(hj, a0);
            auto inside = [](const Point2& p) { return p.x() >= 0 && p.y() >= 0 && p.x() <= 127 && p.y() <= 127; };
            if (!inside(pa) || !inside(pb)) continue;
            e.pa.push_back(pa);
            e.pb.push_back(pb);
        }
        f.edges.push_back(std::move(e));
    };
    for (int k = 0; k + 1 < frames; ++k) add(k, k + 1);
    for (int k = 2; k < frames; ++k) add(0, k);
    return f;
}

std::vector<CameraPose> perturb(const std::vector<CameraPose>& poses, double degrees, std::uint64_t seed) {
    std::mt19937 rng(static_cast<unsigned>(seed));
    std::normal_distribution<double> nd;
    std::vector<CameraPose> out = poses;
    for (std::size_t k = 1; k < out.size(); ++k) {
        const Eigen::Vector3d axis = Eigen::Vector3d(nd(rng), nd(rng), nd(rng)).normalized();
        out[k].R = rotation_from_axis_angle(axis * degrees * M_PI / 180.0) * out[k].R;
    }
    return out;
}

}  // namespace

// ---- candidate selection ----

TEST_CASE("select_candidates examples") {
    CHECK(select_candidates(9, {3}, {12}, 5) == std::vector<int>{3});
    CHECK(select_candidates(9, {1, 2, 3}, {40, 10, 25}, 2) == std::vector<int>{1, 3});
    CHECK(select_candidates(9, {7, 4}, {30, 30}, 1) == std::vector<int>{4});
    CHECK(select_candidates(9, {}, {}, 3).empty());
    CHECK(select_candidates(2, {1, 2, 3}, {5, 50, 6}, 3) == std::vector<int>{3, 1});
    CHECK_THROWS(select_candidates(0, {1}, {1}, 0));
}

// ---- homographies ----

TEST_CASE("homography_dlt through four exact points") {
    std::mt19937 rng(1);
    const Eigen::Matrix3d h = random_h(rng);
    const std::vector<Point2> a{{3, 5}, {100, 7}, {96, 88}, {10, 90}};
    std::vector<Point2> b;
    for (const auto& p : a) b.push_back(apply(h, p));
    const Homography33 est = homography_dlt(a, b);
    CHECK((est.matrix() - unit_frobenius(h)).norm() < 1e-9);
    const Eigen::Matrix3d hi = est.matrix().inverse();
    for (int k = 0; k < 4; ++k) CHECK(symmetric_transfer_error(est.matrix(), hi, a[k], b[k]) < 1e-8);
    CHECK(std::abs(est.matrix().norm() - 1.0) < 1e-12);
    CHECK(est.matrix()(2, 2) >= 0.0);
}

TEST_CASE("RANSAC on exact correspondences") {
    std::mt19937 rng(2);
    std::uniform_real_distribution<double> u(0.0, 200.0);
    const Eigen::Matrix3d h = random_h(rng);
    std::vector<Point2> a, b;
    for (int k = 0; k < 50; ++k) {
        a.emplace_back(u(rng), u(rng));
        b.push_back(apply(h, a.back()));
    }
    const RansacResult r = estimate_homography_ransac(a, b, 200, 2.0, 7);
    const Eigen::Matrix3d t = unit_frobenius(h);
    CHECK((r.h.matrix() - t).norm() / t.norm() < 1e-6);
    CHECK(r.inliers.size() == 50u);
}

TEST_CASE("RANSAC with outliers: determinism and inlier accounting") {
    std::mt19937 rng(3);
    std::uniform_real_distribution<double> u(0.0, 200.0);
    std::normal_distribution<double> noise(0.0, 0.5);
    const Eigen::Matrix3d h = random_h(rng);
    std::vector<Point2> a, b;
    for (int k = 0; k < 100; ++k) {
        a.emplace_back(u(rng), u(rng));
        b.push_back(k < 70 ? apply(h, a.back()) + Point2(noise(rng), noise(rng)) : Point2(u(rng), u(rng)));
    }
    const RansacResult r = estimate_homography_ransac(a, b, 1000, 2.0, 11);
    double err = 0.0;
    for (int k = 0; k < 70; ++k) err += (r.h(a[k]) - b[k]).norm();
    CHECK(err / 70.0 < 1.0);
    CHECK(static_cast<int>(r.inliers.size()) >= r.best_sample_inliers);

    const RansacResult again = estimate_homography_ransac(a, b, 1000, 2.0, 11);
    CHECK(again.h.matrix() == r.h.matrix());
    CHECK(again.inliers == r.inliers);

    CHECK_THROWS(estimate_homography_ransac({{0, 0}, {1, 0}, {0, 1}}, {{0, 0}, {1, 0}, {0, 1}}, 10, 2.0, 0));
    std::vector<Point2> line;
    for (int k = 0; k < 10; ++k) line.emplace_back(k, 2.0 * k);
    CHECK_THROWS(estimate_homography_ransac(line, line, 50, 2.0, 0));
}

TEST_CASE("symmetric transfer error ignores the homogeneous scale") {
    std::mt19937 rng(4);
    const Eigen::Matrix3d h = random_h(rng);
    const Point2 a(10, 20), b(30, 25);
    const double e1 = symmetric_transfer_error(h, h.inverse(), a, b);
    const double e2 = symmetric_transfer_error(-3.0 * h, (-3.0 * h).inverse(), a, b);
    CHECK(std::abs(e1 - e2) < 1e-9);
    CHECK(Homography33(5.0 * h).matrix().isApprox(Homography33(h).matrix(), 1e-14));
}

// ---- poses ----

TEST_CASE("pose_from_homography examples") {
    const CameraIntrinsics cam = camera(128, 96, 250.0);
    const Eigen::Matrix3d K = cam.K();

    const CameraPose id = pose_from_homography(Homography33::identity(), cam);
    CHECK((id.R - Eigen::Matrix3d::Identity()).norm() < 1e-9);
    CHECK(id.t.norm() == 0.0);

    const Eigen::Matrix3d R = rotation_from_axis_angle(Eigen::Vector3d(0.03, -0.05, 0.02));
    const CameraPose rot = pose_from_homography(Homography33(Eigen::Matrix3d(K * R * K.inverse())), cam);
    CHECK((rot.R - R).norm() < 1e-6);
    CHECK(rot.t.norm() == 0.0);

    const Eigen::Matrix3d R2 = rotation_from_axis_angle(Eigen::Vector3d(0.04, 0.08, -0.03));
    const Eigen::Vector3d t(0.1, -0.05, 0.03), n = Eigen::Vector3d(0.1, -0.05, 1.0).normalized();
    const double d = 2.0;
    const Eigen::Matrix3d H = K * (R2 + t * n.transpose() / d) * K.inverse();
    const CameraPose pl = pose_from_homography(Homography33(H), cam);
    CHECK(deg(rotation_angle(pl.R.transpose() * R2)) < 0.1);
    CHECK(std::abs(pl.t.norm() - 1.0) < 1e-9);
    CHECK(pl.t.normalized().dot(t.normalized()) > 0.99);
}

TEST_CASE("rotation helpers") {
    const Eigen::Vector3d w(0.2, -0.1, 0.3);
    const Eigen::Matrix3d R = rotation_from_axis_angle(w);
    CHECK(std::abs(rotation_angle(R) - w.norm()) < 1e-12);
    CHECK((R.transpose() * R - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(R.determinant() == doctest::Approx(1.0));
    Eigen::Matrix3d noisy = R;
    noisy(0, 1) += 1e-3;
    const Eigen::Matrix3d o = orthonormalize(noisy);
    CHECK((o.transpose() * o - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(o.determinant() > 0);
}

// ---- bundle adjustment ----

TEST_CASE("bundle_adjust at the optimum stops at once") {
    const BAFixture f = ba_fixture(5, 1);
    std::vector<CameraPose> poses = f.truth;
    const double c0 = ba_cost(f.edges, f.K, poses);
    const BAReport r = bundle_adjust(f.edges, f.K, poses, 0);
    CHECK(r.iterations <= 2);
    CHECK(std::abs(r.final_cost - c0) < 1e-12);
    CHECK(c0 < 1e-12);
}

TEST_CASE("bundle_adjust recovers a 2 degree perturbation") {
    const BAFixture f = ba_fixture(5, 2);
    std::vector<CameraPose> poses = perturb(f.truth, 2.0, 3);
    const double before = mean_transfer(f.edges, f.K, poses);
    const BAReport r = bundle_adjust(f.edges, f.K, poses, 0);
    const double after = mean_transfer(f.edges, f.K, poses);
    CAPTURE(before);
    CAPTURE(after);
    CHECK(before > 5.0);
    CHECK(after < 0.1);
    for (std::size_t k = 1; k < r.cost_history.size(); ++k) CHECK(r.cost_history[k] <= r.cost_history[k - 1]);
    for (const auto& p : poses) CHECK((p.R.transpose() * p.R - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((poses[0].R - Eigen::Matrix3d::Identity()).norm() == 0.0);
    CHECK_FALSE(r.aborted);
}

TEST_CASE("ba_gradient matches central finite differences") {
    const BAFixture f = ba_fixture(4, 5);
    std::vector<CameraPose> poses = perturb(f.truth, 1.5, 6);
    std::mt19937 rng(9);
    std::uniform_real_distribution<double> u(-0.05, 0.05);
    for (std::size_t k = 1; k < poses.size(); ++k) poses[k].t = Eigen::Vector3d(u(rng), u(rng), u(rng));

    const Eigen::VectorXd g = ba_gradient(f.edges, f.K, poses, 0);
    REQUIRE(g.size() == 6 * 3);
    Eigen::VectorXd fd(g.size());
    const double h = 1e-6;
    for (int k = 1, col = 0; k < 4; ++k)
        for (int m = 0; m < 6; ++m, ++col) {
            auto shifted = [&](double s) {
                std::vector<CameraPose> p = poses;
                if (m < 3) p[k].R = rotation_from_axis_angle(Eigen::Vector3d::Unit(m) * s) * p[k].R;
                else p[k].t(m - 3) += s;
                return ba_cost(f.edges, f.K, p);
            };
            fd(col) = (shifted(h) - shifted(-h)) / (2 * h);
        }
    CHECK((g - fd).cwiseAbs().maxCoeff() / g.cwiseAbs().maxCoeff() < 1e-4);
}

// ---- blending ----

TEST_CASE("multiband_blend: one frame under the identity is reproduced to round-off") {
    const ImageBuffer img = testutil::random_image(40, 30, 2);
    const BlendResult r = multiband_blend({{&img, nullptr, Homography33::identity()}}, 40, 30, 4);
    double worst = 0.0;
    for (std::size_t i = 0; i < img.data().size(); ++i)
        worst = std::max(worst, std::abs(r.canvas.data()[i] - img.data()[i]));
    CHECK(worst < 1e-12);
    CHECK(r.coverage.count() == 1200u);
    CHECK_THROWS(multiband_blend({{&img, nullptr, Homography33::translation(1000, 0)}}, 40, 30, 4));
}

TEST_CASE("multiband_blend: overlapping constants stay constant and weights sum to one") {
    const ImageBuffer a(64, 48, 1, 0.6), b(64, 48, 1, 0.6);
    for (int bands : {1, 3, 5}) {
        const BlendResult r = multiband_blend(
            {{&a, nullptr, Homography33::identity()}, {&b, nullptr, Homography33::translation(32, 0)}}, 96, 48, bands,
            true);
        REQUIRE(r.weights.size() == 2u);
        for (int y = 0; y < 48; ++y)
            for (int x = 0; x < 96; ++x) {
                REQUIRE(r.coverage(x, y));
                CHECK(std::abs(r.canvas.at(x, y) - 0.6) < 1e-6);
                CHECK(std::abs(r.weights[0](x, y) + r.weights[1](x, y) - 1.0) < 1e-6);
            }
    }
}

TEST_CASE("multiband_blend: more bands soften an exposure seam") {
    const ImageBuffer a(64, 48, 1, 0.4), b(64, 48, 1, 0.5);
    auto seam = [&](int bands) {
        const BlendResult r = multiband_blend(
            {{&a, nullptr, Homography33::identity()}, {&b, nullptr, Homography33::translation(32, 0)}}, 96, 48, bands);
        double worst = 0.0;
        for (int y = 0; y < 48; ++y)
            for (int x = 0; x + 1 < 96; ++x) worst = std::max(worst, std::abs(r.canvas.at(x + 1, y) - r.canvas.at(x, y)));
        return worst;
    };
    const double one = seam(1), four = seam(4);
    CAPTURE(one);
    CAPTURE(four);
    CHECK(four < one);
}

// ---- full stitching ----

namespace {

struct SweepFixture {
    CameraIntrinsics cam;
    RotationSequence seq;
    std::vector<StitchFrame> frames;
};

SweepFixture sweep(int frames) {
    SweepFixture f;
    f.cam = camera(128, 128, 400.0);
    AnalyticSurface s = AnalyticSurface::cylinder_interior(110.0, 160.0);
    s.terms = random_bumps(12, 0.6, 10.0, 22.0, 5);
    const LightModel light{0.6, 0.3, 0.85};
    auto field = [&](double x, double y) {
        double p, q;
        s.gradient(x, y, p, q);
        return reflectance(p, q, light);
    };
    RotationSequenceOptions o;
    o.frames = frames;
    o.max_angle = 0.02 * (frames - 1);
    o.axis = Eigen::Vector3d(1.0, 0.2, 0.0);
    o.landmark_spacing = 9.0;
    f.seq = rotation_sequence(field, 220, 300, f.cam, o);
    for (int k = 0; k < frames; ++k) f.frames.push_back({k, f.seq.frames[k], {}});
    return f;
}

StitchConfig small_config() {
    StitchConfig c;
    c.grid_step = 4;
    c.patch_size = 12;
    return c;
}

}  // namespace

TEST_CASE("stitch: a single frame passes through") {
    const ImageBuffer img = testutil::random_image(64, 48, 8);
    const StitchResult r = stitch({{3, img, {}}}, camera(64, 48), small_config());
    CHECK(r.canvas.data() == img.data());
    CHECK(r.frame_ids == std::vector<int>{3});
    CHECK(r.report.anchor == 3);
}

TEST_CASE("stitch: eight-frame rotation sweep registers landmarks") {
    const SweepFixture f = sweep(8);
    const StitchResult r = stitch(f.frames, f.cam, small_config());
    REQUIRE(r.frame_ids.size() == 8u);
    CHECK(r.report.components.size() == 1u);

    // Each landmark seen by several frames must land on one canvas point.
    std::map<int, std::vector<Point2>> hits;
    for (const Landmark& l : f.seq.landmarks) hits[l.id].push_back(r.warps[l.frame](l.pixel));
    double err = 0.0;
    int n = 0;
    for (const auto& [id, pts] : hits) {
        for (const Point2& p : pts) {
            const int x = static_cast<int>(std::lround(p.x())), y = static_cast<int>(std::lround(p.y()));
            REQUIRE(x >= 0);
            REQUIRE(y >= 0);
            REQUIRE(x < r.canvas.width());
            REQUIRE(y < r.canvas.height());
            CHECK(r.coverage(x, y));
        }
        for (std::size_t a = 1; a < pts.size(); ++a) {
            err += (pts[a] - pts[0]).norm();
            ++n;
        }
    }
    REQUIRE(n > 50);
    CHECK(err / n < 2.0);
    for (const Homography33& w : r.warps)
        for (const Point2& c : {Point2(0, 0), Point2(127, 0), Point2(0, 127), Point2(127, 127)}) {
            const Point2 q = w(c);
            CHECK(q.x() >= -1e-6);
            CHECK(q.y() >= -1e-6);
            CHECK(q.x() <= r.canvas.width() - 1 + 1e-6);
            CHECK(q.y() <= r.canvas.height() - 1 + 1e-6);
        }
}

TEST_CASE("stitch: duplicating every frame leaves the canvas unchanged") {
    const SweepFixture f = sweep(4);
    std::vector<StitchFrame> doubled;
    for (const auto& fr : f.frames) {
        doubled.push_back(fr);
        doubled.push_back({fr.id + 100, fr.image, fr.valid});
    }
    const StitchResult a = stitch(f.frames, f.cam, small_config());
    const StitchResult b = stitch(doubled, f.cam, small_config());
    REQUIRE(a.canvas.width() == b.canvas.width());
    REQUIRE(a.canvas.height() == b.canvas.height());
    double worst = 0.0;
    for (std::size_t i = 0; i < a.canvas.data().size(); ++i)
        worst = std::max(worst, std::abs(a.canvas.data()[i] - b.canvas.data()[i]));
    CHECK(worst < 1e-6);
    CHECK(b.frame_ids.size() == 8u);
}

TEST_CASE("stitch: result does not depend on the thread count") {
    const SweepFixture f = sweep(4);
    StitchResult a, b;
    {
        testutil::ThreadScope t(1);
        a = stitch(f.frames, f.cam, small_config());
    }
    {
        testutil::ThreadScope t(3);
        b = stitch(f.frames, f.cam, small_config());
    }
    CHECK(a.canvas.data() == b.canvas.data());
    CHECK(a.report.ba.final_cost == b.report.ba.final_cost);
}
