#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "endomap/features.hpp"
#include "endomap/kernels.hpp"
#include "support.hpp"

using namespace endomap;
using testutil::random_image;
using testutil::TempDir;

namespace {

// Smooth random texture, cropped at an integer offset from a larger field so
// that shifted views agree exactly.
ImageBuffer crop(const ImageBuffer& big, int x0, int y0, int w, int h) {
    return testutil::from_function(w, h, [&](int x, int y) { return big.at(x + x0, y + y0); });
}

ImageBuffer texture(int w, int h, std::uint64_t seed) { return gaussian_blur(random_image(w, h, seed), 1.5); }

// Direct-sum Haar descriptor: every box summed pixel by pixel.
Descriptor naive_descriptor(const ImageBuffer& img, int px, int py, int patch) {
    const int half = patch / 2, sub = patch / 4, sp = std::max(1, patch / 8);
    const double sigma = patch / 4.0;
    auto box = [&](int x0, int y0, int x1, int y1) {
        double s = 0.0;
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) s += img.at(x, y);
        return s;
    };
    std::vector<double> d;
    for (int j = 0; j < 4; ++j)
        for (int i = 0; i < 4; ++i) {
            double f[4] = {};
            for (int v = 0; v < sub; v += sp)
                for (int u = 0; u < sub; u += sp) {
                    const int cx = px - half + i * sub + u + sp / 2, cy = py - half + j * sub + v + sp / 2;
                    const double hx = box(cx, cy - sp, cx + sp, cy + sp) - box(cx - sp, cy - sp, cx, cy + sp);
                    const double hy = box(cx - sp, cy, cx + sp, cy + sp) - box(cx - sp, cy - sp, cx + sp, cy);
                    const double g = std::exp(-((cx - px) * (cx - px) + (cy - py) * (cy - py)) / (2 * sigma * sigma));
                    f[0] += g * hx;
                    f[1] += g * std::abs(hx);
                    f[2] += g * hy;
                    f[3] += g * std::abs(hy);
                }
            d.insert(d.end(), f, f + 4);
        }
    double n = 0.0;
    for (double v : d) n += v * v;
    Descriptor out{};
    for (int k = 0; k < kDescriptorDims; ++k) out[k] = static_cast<float>(d[k] / std::sqrt(n));
    return out;
}

double cosine(const Descriptor& a, const Descriptor& b) {
    double ab = 0, aa = 0, bb = 0;
    for (int k = 0; k < kDescriptorDims; ++k) {
        ab += double(a[k]) * b[k];
        aa += double(a[k]) * a[k];
        bb += double(b[k]) * b[k];
    }
    return ab / std::sqrt(aa * bb);
}

int index_of(const DenseDescriptorSet& s, double x, double y) {
    for (std::size_t i = 0; i < s.size(); ++i)
        if (s.points[i].x() == x && s.points[i].y() == y) return static_cast<int>(i);
    return -1;
}

}  // namespace

TEST_CASE("extract_dense: constant image gives flagged zero descriptors") {
    const DenseDescriptorSet s = extract_dense(ImageBuffer(40, 32, 1, 0.5), 4, 12);
    REQUIRE(s.size() > 0u);
    CHECK(s.usable_count() == 0u);
    for (const auto& d : s.descriptors)
        for (float v : d) CHECK(v == 0.0f);
}

TEST_CASE("extract_dense: vertical step edge lives in the x responses") {
    const ImageBuffer step = testutil::from_function(48, 48, [](int x, int) { return x < 22 ? 0.2 : 0.7; });
    const DenseDescriptorSet s = extract_dense(step, 4, 16);
    const int i = index_of(s, 22, 22);
    REQUIRE(i >= 0);
    REQUIRE(s.usable[i]);
    double ex = 0.0;
    for (int k = 0; k < kDescriptorDims; k += 4) {
        ex += s.descriptors[i][k] * s.descriptors[i][k] + s.descriptors[i][k + 1] * s.descriptors[i][k + 1];
        CHECK(std::abs(s.descriptors[i][k + 2]) < 1e-6);
        CHECK(std::abs(s.descriptors[i][k + 3]) < 1e-6);
    }
    CHECK(ex == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("extract_dense matches a direct-sum evaluation of the Haar descriptor") {
    const ImageBuffer img = texture(64, 56, 3);
    for (int patch : {8, 12, 16}) {
        const DenseDescriptorSet s = extract_dense(img, 8, patch);
        for (std::size_t i = 0; i < s.size(); i += 3) {
            const Descriptor ref = naive_descriptor(img, int(s.points[i].x()), int(s.points[i].y()), patch);
            for (int k = 0; k < kDescriptorDims; ++k) REQUIRE(std::abs(s.descriptors[i][k] - ref[k]) < 1e-6);
        }
    }
}

TEST_CASE("extract_dense: exact shift by grid_step reproduces descriptors") {
    const int step = 6;
    const ImageBuffer big = texture(120, 80, 9);
    const ImageBuffer orig = crop(big, 20, 10, 80, 60);
    const ImageBuffer shifted = crop(big, 20 - step, 10, 80, 60);  // shifted(x) = orig(x - step)
    const DenseDescriptorSet a = extract_dense(orig, step, 16), b = extract_dense(shifted, step, 16);
    int compared = 0;
    for (std::size_t i = 0; i < b.size(); ++i) {
        const int j = index_of(a, b.points[i].x() - step, b.points[i].y());
        if (j < 0) continue;
        for (int k = 0; k < kDescriptorDims; ++k) REQUIRE(std::abs(a.descriptors[j][k] - b.descriptors[i][k]) < 1e-6);
        ++compared;
    }
    CHECK(compared > 20);
}

TEST_CASE("extract_dense invariants") {
    const ImageBuffer img = texture(70, 50, 4);
    const DenseDescriptorSet s = extract_dense(img, 5, 12);
    for (std::size_t i = 0; i < s.size(); ++i) {
        CHECK(s.points[i].x() >= 6);
        CHECK(s.points[i].y() >= 6);
        CHECK(s.points[i].x() <= 70 - 6);
        CHECK(s.points[i].y() <= 50 - 6);
        double n = 0.0;
        for (float v : s.descriptors[i]) n += double(v) * v;
        if (s.usable[i]) CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-6);
    }

    // Global intensity scaling.
    const ImageBuffer dim = testutil::from_function(70, 50, [&](int x, int y) { return 0.45 * img.at(x, y); });
    const DenseDescriptorSet t = extract_dense(dim, 5, 12);
    REQUIRE(t.size() == s.size());
    for (std::size_t i = 0; i < s.size(); ++i)
        if (s.usable[i]) CHECK(cosine(s.descriptors[i], t.descriptors[i]) >= 1.0 - 1e-6);

    // A validity mask removes points whose patch touches invalid pixels.
    BinaryMask valid(70, 50, true);
    valid.set(35, 25, false);
    const DenseDescriptorSet m = extract_dense(img, 5, 12, &valid);
    CHECK(m.size() < s.size());
    for (const auto& p : m.points) CHECK((std::abs(p.x() - 35) > 6 || std::abs(p.y() - 25) > 6));

    CHECK_THROWS(extract_dense(img, 5, 10));
    CHECK_THROWS(extract_dense(img, 5, 4));
    CHECK_THROWS(extract_dense(ImageBuffer(12, 40, 1), 4, 12));
    CHECK_THROWS(extract_dense(ImageBuffer(40, 40, 3), 4, 12));
}

TEST_CASE("match: identical images pair every usable point with itself") {
    const DenseDescriptorSet s = extract_dense(texture(64, 64, 5), 4, 12);
    for (double ratio : {0.75, 1.0}) {
        const MatchSet m = match(s, s, ratio);
        CHECK(m.pairs.size() == s.usable_count());
        for (const Match& p : m.pairs) {
            CHECK(p.a == p.b);
            CHECK(p.distance == 0.0);
        }
    }
}

TEST_CASE("match: translation by two grid steps") {
    const int step = 4;
    const ImageBuffer big = texture(140, 100, 12);
    const ImageBuffer a = crop(big, 30, 10, 96, 80), b = crop(big, 30 - 2 * step, 10, 96, 80);
    const DenseDescriptorSet da = extract_dense(a, step, 12), db = extract_dense(b, step, 12);
    const MatchSet m = match(da, db);
    CHECK(m.pairs.size() > da.size() / 2);
    for (const Match& p : m.pairs) {
        CHECK(db.points[p.b].x() - da.points[p.a].x() == 2 * step);
        CHECK(db.points[p.b].y() == da.points[p.a].y());
    }
}

TEST_CASE("match: unrelated noise images rarely match") {
    std::size_t total = 0, points = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const DenseDescriptorSet a = extract_dense(random_image(64, 64, 1000 + seed), 4, 12);
        const DenseDescriptorSet b = extract_dense(random_image(64, 64, 2000 + seed), 4, 12);
        const MatchSet m = match(a, b, 0.8);
        total += m.pairs.size();
        points += a.size();
        CAPTURE(seed);
        CHECK(m.pairs.size() <= 0.05 * a.size());
    }
    CHECK(total <= 0.05 * points);
}

TEST_CASE("match: one-to-one, errors and empty sets") {
    const DenseDescriptorSet a = extract_dense(texture(64, 64, 20), 4, 12);
    const DenseDescriptorSet b = extract_dense(texture(64, 64, 21), 4, 12);
    const MatchSet m = match(a, b, 1.0);
    std::set<int> as, bs;
    for (const Match& p : m.pairs) {
        CHECK(as.insert(p.a).second);
        CHECK(bs.insert(p.b).second);
    }
    CHECK_THROWS(match(a, b, 0.0));
    CHECK_THROWS(match(a, b, 1.5));
    CHECK(match(DenseDescriptorSet{}, b).pairs.empty());
    CHECK(match(a, DenseDescriptorSet{}).pairs.empty());
}

TEST_CASE("extraction and matching do not depend on the thread count") {
    const ImageBuffer img = texture(96, 80, 31), other = texture(96, 80, 32);
    DenseDescriptorSet s1, s4;
    MatchSet m1, m4;
    {
        testutil::ThreadScope t(1);
        s1 = extract_dense(img, 4, 12);
        m1 = match(s1, extract_dense(other, 4, 12), 1.0);
    }
    {
        testutil::ThreadScope t(4);
        s4 = extract_dense(img, 4, 12);
        m4 = match(s4, extract_dense(other, 4, 12), 1.0);
    }
    CHECK(s1.descriptors == s4.descriptors);
    REQUIRE(m1.pairs.size() == m4.pairs.size());
    for (std::size_t i = 0; i < m1.pairs.size(); ++i) {
        CHECK(m1.pairs[i].a == m4.pairs[i].a);
        CHECK(m1.pairs[i].b == m4.pairs[i].b);
        CHECK(m1.pairs[i].distance == m4.pairs[i].distance);
    }
}

TEST_CASE("reprojection_error examples") {
    std::mt19937 rng(8);
    std::uniform_real_distribution<double> u(0.0, 100.0), ang(0.0, 2 * M_PI), e(-0.1, 0.1);
    std::vector<Point2> pa(30);
    for (auto& p : pa) p = Point2(u(rng), u(rng));
    MatchSet m;
    for (int i = 0; i < 30; ++i) m.pairs.push_back({i, i, 0.0});

    const ReprojectionErrors id = reprojection_error(m, pa, pa, Homography33::identity());
    for (double v : id.per_match) CHECK(v < 1e-12);
    CHECK(id.mean < 1e-12);

    std::vector<Point2> pt = pa;
    for (auto& p : pt) p += Point2(5, 3);
    CHECK(reprojection_error(m, pa, pt, Homography33::translation(5, 3)).mean < 1e-9);

    Eigen::Matrix3d hm;
    hm << 1.1 + e(rng), e(rng), 4.0, e(rng), 0.9 + e(rng), -2.0, 1e-4, -2e-4, 1.0;
    const Homography33 h(hm);
    std::vector<Point2> pb(30);
    for (int i = 0; i < 30; ++i) {
        const Eigen::Vector3d q = hm * Eigen::Vector3d(pa[i].x(), pa[i].y(), 1.0);
        const double t = ang(rng);
        pb[i] = q.head<2>() / q.z() + Point2(std::cos(t), std::sin(t));
    }
    const ReprojectionErrors r = reprojection_error(m, pa, pb, h);
    CHECK(std::abs(r.mean - 1.0) < 1e-9);
    CHECK(r.flagged == 0u);

    // Homogeneous scale invariance.
    const ReprojectionErrors s = reprojection_error(m, pa, pb, Homography33(-7.5 * hm));
    for (std::size_t i = 0; i < r.per_match.size(); ++i) CHECK(std::abs(s.per_match[i] - r.per_match[i]) < 1e-9);
}

TEST_CASE("reprojection_error flags points mapped to infinity") {
    Eigen::Matrix3d hm;
    hm << 1, 0, 0, 0, 1, 0, 1, 0, -10;  // w = x - 10
    const std::vector<Point2> pa{{10, 4}, {2, 2}}, pb{{0, 0}, {-0.25, -0.25}};
    MatchSet m;
    m.pairs = {{0, 0, 0.0}, {1, 1, 0.0}};
    const ReprojectionErrors r = reprojection_error(m, pa, pb, Homography33(hm));
    CHECK(r.flagged == 1u);
    CHECK(std::isnan(r.per_match[0]));
    CHECK(r.per_match[1] == doctest::Approx(0.0));
    CHECK(r.mean == doctest::Approx(0.0));
    m.pairs.push_back({5, 0, 0.0});
    CHECK_THROWS(reprojection_error(m, pa, pb, Homography33(hm)));
}

TEST_CASE("descriptor and match records round-trip") {
    TempDir dir("feat");
    const DenseDescriptorSet a = extract_dense(texture(48, 40, 2), 4, 12);
    write_descriptors(a, dir.file("a.bin"));
    const DenseDescriptorSet back = read_descriptors(dir.file("a.bin"));
    CHECK(back.width == 48);
    CHECK(back.patch_size == 12);
    CHECK(back.points == a.points);
    CHECK(back.descriptors == a.descriptors);
    CHECK(back.usable == a.usable);

    const MatchSet m = match(a, a);
    write_matches(m, dir.file("m.bin"));
    const MatchSet mb = read_matches(dir.file("m.bin"));
    REQUIRE(mb.pairs.size() == m.pairs.size());
    CHECK(mb.pairs.front().a == m.pairs.front().a);
    CHECK(mb.target_height == 40);

    CHECK_THROWS_AS(read_matches(dir.file("a.bin")), FormatError);
    std::ofstream(dir.file("short.bin"), std::ios::binary) << "EMDS";
    CHECK_THROWS_AS(read_descriptors(dir.file("short.bin")), FormatError);
}
