#include <doctest.h>

#include <cmath>
#include <fstream>

#include "endomap/io.hpp"
#include "endomap/kernels.hpp"
#include "support.hpp"

using namespace endomap;
using testutil::random_image;
using testutil::TempDir;

namespace {

void write_bytes(const std::string& path, const std::string& bytes) {
    std::ofstream os(path, std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

ImageBuffer mirror_x(const ImageBuffer& img) {
    ImageBuffer out(img.width(), img.height(), 1);
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) out.set(x, y, img.at(img.width() - 1 - x, y));
    return out;
}

}  // namespace

TEST_CASE("load_image normalises 8-bit PGM bytes") {
    TempDir dir("pgm");
    write_bytes(dir.file("a.pgm"), std::string("P5\n2 2\n255\n") + std::string("\x00\xff\x80\x40", 4));
    const ImageBuffer img = load_image(dir.file("a.pgm"));
    REQUIRE(img.width() == 2);
    REQUIRE(img.height() == 2);
    REQUIRE(img.channels() == 1);
    CHECK(img.at(0, 0) == 0.0);
    CHECK(img.at(1, 0) == 1.0);
    CHECK(img.at(0, 1) == doctest::Approx(128.0 / 255.0).epsilon(1e-15));
    CHECK(img.at(1, 1) == doctest::Approx(64.0 / 255.0).epsilon(1e-15));
}

TEST_CASE("load_image reads a red PPM pixel as three channels") {
    TempDir dir("ppm");
    write_bytes(dir.file("r.ppm"), std::string("P6\n1 1\n255\n") + std::string("\xff\x00\x00", 3));
    const ImageBuffer img = load_image(dir.file("r.ppm"));
    REQUIRE(img.channels() == 3);
    CHECK(img.at(0, 0, 0) == 1.0);
    CHECK(img.at(0, 0, 1) == 0.0);
    CHECK(img.at(0, 0, 2) == 0.0);
}

TEST_CASE("load_image error paths") {
    TempDir dir("bad");
    write_bytes(dir.file("t.png"), std::string("\x89PNG\r\n", 6));
    CHECK_THROWS_AS(load_image(dir.file("t.png")), FormatError);
    write_bytes(dir.file("z.pgm"), "P5\n0 2\n255\n");
    CHECK_THROWS(load_image(dir.file("z.pgm")));
    write_bytes(dir.file("x.bmp"), "BM");
    CHECK_THROWS(load_image(dir.file("x.bmp")));
    CHECK_THROWS_AS(load_image(dir.file("missing.png")), IoError);
}

TEST_CASE("PNG, PNM and PFM round trips") {
    TempDir dir("rt");
    const ImageBuffer img = random_image(7, 5, 3);
    for (const char* name : {"a.png", "a.pgm"}) {
        save_image(img, dir.file(name));
        const ImageBuffer back = load_image(dir.file(name));
        for (int y = 0; y < 5; ++y)
            for (int x = 0; x < 7; ++x) CHECK(std::abs(back.at(x, y) - img.at(x, y)) <= 0.5 / 255.0 + 1e-12);
    }
    save_image(img, dir.file("b.png"), 16);
    const ImageBuffer b16 = load_image(dir.file("b.png"));
    CHECK(std::abs(b16.at(3, 2) - img.at(3, 2)) <= 0.5 / 65535.0 + 1e-12);
    Raster r(4, 3);
    for (int k = 0; k < 12; ++k) r.values()[k] = k * 1.5 - 4.0;
    save_pfm(r, dir.file("d.pfm"));
    const Raster back = load_pfm(dir.file("d.pfm"));
    for (int k = 0; k < 12; ++k) CHECK(back.values()[k] == static_cast<float>(r.values()[k]));
}

TEST_CASE("ImageBuffer clamps stored intensities and checks sizes") {
    const ImageBuffer img(2, 1, 1, std::vector<double>{-0.5, 1.5});
    CHECK(img.at(0, 0) == 0.0);
    CHECK(img.at(1, 0) == 1.0);
    CHECK(img.data().size() == 2u);
    CHECK_THROWS(ImageBuffer(2, 2, 1, std::vector<double>{0.0}));
    CHECK_THROWS(ImageBuffer(2, 2, 2));
}

TEST_CASE("to_grayscale luminance weights") {
    CHECK(to_grayscale(ImageBuffer(1, 1, 3, 1.0)).at(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
    const ImageBuffer red(1, 1, 3, std::vector<double>{1.0, 0.0, 0.0});
    CHECK(to_grayscale(red).at(0, 0) == doctest::Approx(0.299).epsilon(1e-15));
    const ImageBuffer gray = random_image(4, 4, 9);
    CHECK(to_grayscale(gray).data() == gray.data());
}

TEST_CASE("gradient examples") {
    SUBCASE("constant image") {
        const GradientField g = gradient(ImageBuffer(6, 5, 1, 0.3));
        for (double v : g.dx.values()) CHECK(v == 0.0);
        for (double v : g.dy.values()) CHECK(v == 0.0);
    }
    SUBCASE("ramp") {
        const int w = 9;
        const GradientField g = gradient(testutil::from_function(w, 4, [&](int x, int) { return x / (w - 1.0); }));
        for (int y = 0; y < 4; ++y)
            for (int x = 1; x < w - 1; ++x) {
                CHECK(g.dx(x, y) == doctest::Approx(1.0 / (w - 1)).epsilon(1e-12));
                CHECK(g.dy(x, y) == doctest::Approx(0.0));
            }
    }
    SUBCASE("x*y matches analytic partials in the interior") {
        Raster r(5, 5);
        for (int y = 0; y < 5; ++y)
            for (int x = 0; x < 5; ++x) r(x, y) = x * y;
        const GradientField g = gradient(r);
        for (int y = 1; y < 4; ++y)
            for (int x = 1; x < 4; ++x) {
                CHECK(std::abs(g.dx(x, y) - y) < 1e-9);
                CHECK(std::abs(g.dy(x, y) - x) < 1e-9);
            }
    }
    CHECK_THROWS(gradient(ImageBuffer(4, 4, 3)));
    CHECK_THROWS(gradient(Raster(1, 4)));
}

TEST_CASE("gradient magnitude and linearity properties") {
    const ImageBuffer a = random_image(12, 9, 1), b = random_image(12, 9, 2);
    const GradientField ga = gradient(a), gb = gradient(b);
    for (std::size_t i = 0; i < ga.dx.size(); ++i)
        CHECK(std::abs(ga.magnitude.values()[i] - std::hypot(ga.dx.values()[i], ga.dy.values()[i])) < 1e-6);
    const double s = 0.3, t = -1.7;
    Raster mix(12, 9);
    for (std::size_t i = 0; i < mix.size(); ++i) mix.values()[i] = s * a.data()[i] + t * b.data()[i];
    const GradientField gm = gradient(mix);
    for (std::size_t i = 0; i < mix.size(); ++i) {
        CHECK(std::abs(gm.dx.values()[i] - (s * ga.dx.values()[i] + t * gb.dx.values()[i])) < 1e-9);
        CHECK(std::abs(gm.dy.values()[i] - (s * ga.dy.values()[i] + t * gb.dy.values()[i])) < 1e-9);
    }
    CHECK(ga.dx.width() == 12);
    CHECK(ga.dx.height() == 9);
}

TEST_CASE("integral image") {
    const IntegralImage ones(Raster(3, 3, 1.0));
    CHECK(ones.at(2, 2) == 9.0);
    const double a = 0.1, b = 0.2, c = 0.3, d = 0.4;
    const IntegralImage two(Raster(2, 2, std::vector<double>{a, b, c, d}));
    CHECK(two.at(1, 1) == doctest::Approx(a + b + c + d).epsilon(1e-15));

    std::mt19937 rng(5);
    std::uniform_int_distribution<int> u(0, 255);
    Raster r(8, 8);
    for (double& v : r.values()) v = u(rng);
    const IntegralImage s(r);
    for (int y0 = 0; y0 + 3 <= 8; ++y0)
        for (int x0 = 0; x0 + 3 <= 8; ++x0) {
            double naive = 0.0;
            for (int y = y0; y < y0 + 3; ++y)
                for (int x = x0; x < x0 + 3; ++x) naive += r(x, y);
            CHECK(s.box_sum(x0, y0, x0 + 3, y0 + 3) == naive);  // integer data: exact
        }
}

TEST_CASE("gaussian_blur examples") {
    const ImageBuffer flat(11, 7, 1, 0.42);
    const ImageBuffer blurred = gaussian_blur(flat, 2.0);
    for (double v : blurred.data()) CHECK(std::abs(v - 0.42) < 1e-9);

    ImageBuffer impulse(21, 21, 1, 0.0);
    impulse.set(10, 10, 1.0);
    const ImageBuffer out = gaussian_blur(impulse, 1.0);
    // Independent oracle: the normalised 1D kernel of radius 3, squared at the centre.
    double sum = 0.0;
    for (int k = -3; k <= 3; ++k) sum += std::exp(-0.5 * k * k);
    CHECK(out.at(10, 10) == doctest::Approx(1.0 / (sum * sum)).epsilon(1e-12));
    double total = 0.0;
    for (double v : out.data()) total += v;
    CHECK(std::abs(total - 1.0) < 1e-3);
    CHECK(out.width() == 21);
    CHECK(out.height() == 21);

    CHECK_THROWS(gaussian_blur(flat, 0.0));
    CHECK_THROWS(gaussian_blur(flat, -1.0));
}

TEST_CASE("gaussian_blur commutes with horizontal mirroring") {
    const ImageBuffer img = random_image(17, 9, 8);
    const ImageBuffer a = gaussian_blur(mirror_x(img), 1.3), b = mirror_x(gaussian_blur(img, 1.3));
    for (std::size_t i = 0; i < a.data().size(); ++i) CHECK(std::abs(a.data()[i] - b.data()[i]) < 1e-9);
}

TEST_CASE("image_stats") {
    const ImageStats c = image_stats(ImageBuffer(3, 3, 1, 0.5));
    CHECK(c.mean == doctest::Approx(0.5));
    CHECK(c.stddev == 0.0);
    const ImageStats two = image_stats(ImageBuffer(2, 1, 1, std::vector<double>{0.0, 1.0}));
    CHECK(two.mean == doctest::Approx(0.5));
    CHECK(two.stddev == doctest::Approx(0.5));

    const ImageBuffer img = random_image(16, 16, 11);
    double m = 0.0;
    for (double v : img.data()) m += v;
    m /= 256.0;
    double ss = 0.0;
    for (double v : img.data()) ss += (v - m) * (v - m);
    const ImageStats s = image_stats(img);
    CHECK(std::abs(s.mean - m) < 1e-12);
    CHECK(std::abs(s.stddev - std::sqrt(ss / 256.0)) < 1e-12);

    BinaryMask none(16, 16, false);
    CHECK_THROWS(image_stats(img, &none));
    BinaryMask one(16, 16, false);
    one.set(3, 4, true);
    CHECK(image_stats(img, &one).mean == img.at(3, 4));
}
