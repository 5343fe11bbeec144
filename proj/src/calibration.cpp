#include "endomap/calibration.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>

#include "endomap/kernels.hpp"
#include "endomap/parallel.hpp"

namespace endomap {

Eigen::Matrix3d CameraIntrinsics::K() const {
    Eigen::Matrix3d k;
    k << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    return k;
}

bool CameraIntrinsics::has_distortion() const {
    return k1 != 0.0 || k2 != 0.0 || k3 != 0.0 || p1 != 0.0 || p2 != 0.0;
}

Eigen::Vector2d CameraIntrinsics::distort_normalized(const Eigen::Vector2d& xn) const {
    const double x = xn.x(), y = xn.y();
    const double r2 = x * x + y * y;
    const double radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
    return {x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x),
            y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y};
}

Eigen::Vector2d CameraIntrinsics::undistort_normalized(const Eigen::Vector2d& xd, int iterations) const {
    Eigen::Vector2d x = xd;
    for (int i = 0; i < iterations; ++i) {
        const double r2 = x.squaredNorm();
        const double radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
        const double dx = 2.0 * p1 * x.x() * x.y() + p2 * (r2 + 2.0 * x.x() * x.x());
        const double dy = p1 * (r2 + 2.0 * x.y() * x.y()) + 2.0 * p2 * x.x() * x.y();
        x = Eigen::Vector2d((xd.x() - dx) / radial, (xd.y() - dy) / radial);
    }
    return x;
}

Eigen::Vector2d CameraIntrinsics::distort_pixel(const Eigen::Vector2d& px) const {
    const Eigen::Vector2d d = distort_normalized({(px.x() - cx) / fx, (px.y() - cy) / fy});
    return {d.x() * fx + cx, d.y() * fy + cy};
}

Eigen::Vector2d CameraIntrinsics::undistort_pixel(const Eigen::Vector2d& px) const {
    const Eigen::Vector2d u = undistort_normalized({(px.x() - cx) / fx, (px.y() - cy) / fy});
    return {u.x() * fx + cx, u.y() * fy + cy};
}

Eigen::Vector2d distort_point(const Eigen::Vector2d& xn, const CameraIntrinsics& cam) {
    const Eigen::Vector2d d = cam.distort_normalized(xn);
    return {d.x() * cam.fx + cam.cx, d.y() * cam.fy + cam.cy};
}

void validate(const CameraIntrinsics& c) {
    for (double v : {c.fx, c.fy, c.cx, c.cy, c.k1, c.k2, c.k3, c.p1, c.p2})
        if (!std::isfinite(v)) throw FormatError("calibration contains a non-finite value");
    if (c.fx <= 0.0 || c.fy <= 0.0) throw FormatError("calibration focal lengths must be positive");
    if (c.width <= 0 || c.height <= 0) throw FormatError("calibration image size must be positive");
    if (c.cx < 0.0 || c.cx > c.width || c.cy < 0.0 || c.cy > c.height)
        throw FormatError("calibration principal point lies outside the image");
}

CameraIntrinsics load_calibration(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
    CameraIntrinsics c;
    auto num = [&](const char* key, bool required) -> double {
        if (!j.contains(key)) {
            if (required) throw FormatError(path + ": missing key '" + key + "'");
            return 0.0;
        }
        if (!j[key].is_number()) throw FormatError(path + ": key '" + key + "' is not a number");
        return j[key].get<double>();
    };
    c.width = static_cast<int>(num("image_width", true));
    c.height = static_cast<int>(num("image_height", true));
    c.fx = num("fx", true);
    c.fy = num("fy", true);
    c.cx = num("cx", true);
    c.cy = num("cy", true);
    c.k1 = num("k1", false);
    c.k2 = num("k2", false);
    c.k3 = num("k3", false);
    c.p1 = num("p1", false);
    c.p2 = num("p2", false);
    validate(c);
    return c;
}

void save_calibration(const CameraIntrinsics& c, const std::string& path) {
    nlohmann::ordered_json j;
    j["image_width"] = c.width;
    j["image_height"] = c.height;
    j["fx"] = c.fx;
    j["fy"] = c.fy;
    j["cx"] = c.cx;
    j["cy"] = c.cy;
    j["k1"] = c.k1;
    j["k2"] = c.k2;
    j["k3"] = c.k3;
    j["p1"] = c.p1;
    j["p2"] = c.p2;
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path);
    out << j.dump(2) << "\n";
}

namespace {

template <typename Map>
UndistortResult remap(const ImageBuffer& img, Map map) {
    const int w = img.width(), h = img.height(), nc = img.channels();
    std::vector<double> out(img.data().size(), 0.0);
    BinaryMask valid(w, h);
    parallel_for(0, h, [&](int y) {
        for (int x = 0; x < w; ++x) {
            const Eigen::Vector2d s = map(Eigen::Vector2d(x, y));
            bool ok = true;
            for (int c = 0; c < nc && ok; ++c) {
                double v;
                ok = sample_bilinear(img, s.x(), s.y(), c, v);
                out[(static_cast<std::size_t>(y) * w + x) * nc + c] = ok ? v : 0.0;
            }
            valid.set(x, y, ok);
        }
    });
    return {ImageBuffer(w, h, nc, std::move(out)), std::move(valid)};
}

}  // namespace

UndistortResult undistort_image(const ImageBuffer& img, const CameraIntrinsics& cam) {
    if (img.width() != cam.width || img.height() != cam.height)
        throw Error("undistort_image: frame size differs from calibration size");
    return remap(img, [&](const Eigen::Vector2d& p) { return cam.distort_pixel(p); });
}

UndistortResult distort_image(const ImageBuffer& ideal, const CameraIntrinsics& cam) {
    return remap(ideal, [&](const Eigen::Vector2d& p) { return cam.undistort_pixel(p); });
}

}  // namespace endomap
