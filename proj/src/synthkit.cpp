#include "endomap/synthkit.hpp"

#include <Eigen/LU>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <numbers>
#include <random>
#include <sstream>

#include "endomap/io.hpp"
#include "endomap/kernels.hpp"
#include "endomap/parallel.hpp"

namespace endomap {

// ---- surfaces ----

AnalyticSurface AnalyticSurface::flat() { return {}; }

AnalyticSurface AnalyticSurface::hemisphere(double cx, double cy, double radius) {
    if (!(radius > 0)) throw Error("hemisphere: radius must be > 0");
    AnalyticSurface s;
    s.kind = SurfaceKind::Hemisphere;
    s.cx = cx;
    s.cy = cy;
    s.radius = radius;
    return s;
}

AnalyticSurface AnalyticSurface::ramp(double slope_x, double slope_y) {
    AnalyticSurface s;
    s.kind = SurfaceKind::Ramp;
    s.slope_x = slope_x;
    s.slope_y = slope_y;
    return s;
}

AnalyticSurface AnalyticSurface::sinusoid(double amplitude, double wavelength_x, double wavelength_y, double phase) {
    AnalyticSurface s;
    s.kind = SurfaceKind::Sinusoid;
    SinusoidTerm t;
    t.amplitude = amplitude;
    t.kx = wavelength_x > 0 ? 2.0 * std::numbers::pi / wavelength_x : 0.0;
    t.ky = wavelength_y > 0 ? 2.0 * std::numbers::pi / wavelength_y : 0.0;
    t.phase = phase;
    s.terms.push_back(t);
    return s;
}

AnalyticSurface AnalyticSurface::cylinder_interior(double axis_x, double radius) {
    if (!(radius > 0)) throw Error("cylinder_interior: radius must be > 0");
    AnalyticSurface s;
    s.kind = SurfaceKind::CylinderInterior;
    s.cx = axis_x;
    s.radius = radius;
    return s;
}

bool AnalyticSurface::defined(double x, double y) const {
    switch (kind) {
        case SurfaceKind::Hemisphere: {
            const double dx = x - cx, dy = y - cy;
            return dx * dx + dy * dy < radius * radius;
        }
        case SurfaceKind::CylinderInterior:
            return std::abs(x - cx) < radius;
        default:
            return true;
    }
}

double AnalyticSurface::z(double x, double y) const {
    double v = 0.0;
    switch (kind) {
        case SurfaceKind::Hemisphere: {
            const double dx = x - cx, dy = y - cy;
            v = -std::sqrt(std::max(0.0, radius * radius - dx * dx - dy * dy));
            break;
        }
        case SurfaceKind::Ramp:
            v = slope_x * x + slope_y * y;
            break;
        case SurfaceKind::CylinderInterior: {
            const double dx = x - cx;
            v = std::sqrt(std::max(0.0, radius * radius - dx * dx));
            break;
        }
        default:
            break;
    }
    for (const auto& t : terms) v += t.amplitude * std::sin(t.kx * x + t.ky * y + t.phase);
    return v;
}

void AnalyticSurface::gradient(double x, double y, double& p, double& q) const {
    p = q = 0.0;
    switch (kind) {
        case SurfaceKind::Hemisphere: {
            const double dx = x - cx, dy = y - cy;
            const double s = std::sqrt(radius * radius - dx * dx - dy * dy);
            p = dx / s;
            q = dy / s;
            break;
        }
        case SurfaceKind::Ramp:
            p = slope_x;
            q = slope_y;
            break;
        case SurfaceKind::CylinderInterior: {
            const double dx = x - cx;
            p = -dx / std::sqrt(radius * radius - dx * dx);
            break;
        }
        default:
            break;
    }
    for (const auto& t : terms) {
        const double c = t.amplitude * std::cos(t.kx * x + t.ky * y + t.phase);
        p += c * t.kx;
        q += c * t.ky;
    }
}

double AnalyticSurface::normal_z(double x, double y) const {
    double p, q;
    gradient(x, y, p, q);
    return 1.0 / std::sqrt(1.0 + p * p + q * q);
}

std::vector<SinusoidTerm> random_bumps(int count, double amplitude, double lmin, double lmax, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::vector<SinusoidTerm> out;
    for (int k = 0; k < count; ++k) {
        const double dir = std::numbers::pi * u01(rng);
        const double lambda = lmin + (lmax - lmin) * u01(rng);
        const double kk = 2.0 * std::numbers::pi / lambda;
        SinusoidTerm t;
        t.amplitude = amplitude / count;
        t.kx = kk * std::cos(dir);
        t.ky = kk * std::sin(dir);
        t.phase = 2.0 * std::numbers::pi * u01(rng);
        out.push_back(t);
    }
    return out;
}

RenderResult render_lambertian(const AnalyticSurface& s, const LightModel& light, int width, int height) {
    light.validate();
    if (width < 1 || height < 1) throw Error("render_lambertian: empty size");
    RenderResult r;
    r.image = ImageBuffer(width, height, 1);
    r.depth.z = Raster(width, height);
    r.depth.valid = BinaryMask(width, height);
    r.p = Raster(width, height);
    r.q = Raster(width, height);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            if (!s.defined(x, y)) continue;
            double p, q;
            s.gradient(x, y, p, q);
            r.p(x, y) = p;
            r.q(x, y) = q;
            r.depth.z(x, y) = s.z(x, y);
            r.depth.valid.set(x, y, true);
            r.image.set(x, y, reflectance(p, q, light));
        }
    return r;
}

// ---- corruptions ----

ImageBuffer apply_vignette(const ImageBuffer& img, const VignetteModel& model) {
    ImageBuffer out(img.width(), img.height(), img.channels());
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) {
            const double g = model.gain_at(x, y);
            for (int c = 0; c < img.channels(); ++c) out.set(x, y, c, img.at(x, y, c) * g);
        }
    return out;
}

SpecularResult inject_speculars(const ImageBuffer& img, int count, double r_min, double r_max, std::uint64_t seed,
                                double peak, double halo_width, double halo_gain) {
    if (count < 0 || !(r_min > 0) || r_max < r_min || !(peak > 0.95) || halo_width < 0 || halo_gain < 0)
        throw Error("inject_speculars: bad parameters");
    const int w = img.width(), h = img.height();
    SpecularResult res{img, BinaryMask(w, h)};
    if (count == 0) return res;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::vector<double> prof(static_cast<std::size_t>(w) * h, 0.0), glow(prof.size(), 0.0);
    for (int k = 0; k < count; ++k) {
        const double r = r_min + (r_max - r_min) * u01(rng);
        if (2 * r + 1 > std::min(w, h)) throw Error("inject_speculars: blob larger than the image");
        const double cx = r + (w - 1 - 2 * r) * u01(rng);
        const double cy = r + (h - 1 - 2 * r) * u01(rng);
        const double s = r / std::sqrt(2.0 * std::log(peak / 0.95));
        const double reach = std::max(4 * s, halo_width) + r;
        const int x0 = std::max(0, static_cast<int>(std::floor(cx - reach)));
        const int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + reach)));
        const int y0 = std::max(0, static_cast<int>(std::floor(cy - reach)));
        const int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + reach)));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const std::size_t i = static_cast<std::size_t>(y) * w + x;
                const double d = std::hypot(x - cx, y - cy);
                prof[i] = std::max(prof[i], peak * std::exp(-d * d / (2 * s * s)));
                if (d <= r + halo_width) {
                    const double e = std::max(0.0, d - r);
                    glow[i] = std::max(glow[i], halo_gain * std::exp(-0.5 * e * e));
                    res.truth.set(x, y, true);
                }
            }
    }
    ImageBuffer out(w, h, img.channels());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            for (int c = 0; c < img.channels(); ++c)
                out.set(x, y, c, std::min(1.0, std::max(img.at(x, y, c) + glow[i], prof[i])));
        }
    res.image = std::move(out);
    return res;
}

// ---- rotation sequences ----

namespace {

std::vector<Eigen::Matrix3d> sweep_rotations(const RotationSequenceOptions& opt) {
    if (opt.frames < 1) throw Error("rotation_sequence: need at least one frame");
    std::mt19937_64 rng(opt.seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    const Eigen::Vector3d axis = opt.axis.normalized();
    std::vector<Eigen::Matrix3d> out;
    for (int k = 0; k < opt.frames; ++k) {
        const double a = opt.frames == 1 ? 0.0 : opt.max_angle * (static_cast<double>(k) / (opt.frames - 1) - 0.5);
        Eigen::Vector3d w = a * axis;
        if (opt.jitter > 0) w += opt.jitter * Eigen::Vector3d(nd(rng), nd(rng), nd(rng));
        out.push_back(rotation_from_axis_angle(w));
    }
    return out;
}

RotationSequence render_sequence(const std::function<double(double, double)>& field, const Eigen::Matrix3d& Kc,
                                 int canvas_w, int canvas_h, const CameraIntrinsics& cam,
                                 const std::vector<Eigen::Matrix3d>& rots, double spacing) {
    RotationSequence seq;
    seq.canvas_K = Kc;
    seq.rotations = rots;
    const Eigen::Matrix3d K = cam.K(), Ki = K.inverse(), Kci = Kc.inverse();
    for (std::size_t k = 0; k < rots.size(); ++k) {
        const Eigen::Matrix3d to_canvas = Kc * rots[k].transpose() * Ki;
        seq.canvas_to_frame.push_back(K * rots[k] * Kci);
        ImageBuffer img(cam.width, cam.height, 1);
        std::vector<double> row(cam.width);
        for (int y = 0; y < cam.height; ++y)
            for (int x = 0; x < cam.width; ++x) {
                Point2 c;
                if (project(to_canvas, Point2(x, y), c)) img.set(x, y, field(c.x(), c.y()));
            }
        seq.frames.push_back(std::move(img));
    }
    int id = 0;
    for (double y = 0; y <= canvas_h - 1; y += spacing)
        for (double x = 0; x <= canvas_w - 1; x += spacing, ++id)
            for (std::size_t k = 0; k < rots.size(); ++k) {
                Point2 px;
                if (!project(seq.canvas_to_frame[k], Point2(x, y), px)) continue;
                if (px.x() < 0 || px.y() < 0 || px.x() > cam.width - 1 || px.y() > cam.height - 1) continue;
                seq.landmarks.push_back({static_cast<int>(k), id, Point2(x, y), px});
            }
    return seq;
}

Eigen::Matrix3d central_canvas_K(const CameraIntrinsics& cam, int canvas_w, int canvas_h) {
    Eigen::Matrix3d Kc = cam.K();
    Kc(0, 2) += std::floor((canvas_w - cam.width) / 2.0);
    Kc(1, 2) += std::floor((canvas_h - cam.height) / 2.0);
    return Kc;
}

}  // namespace

RotationSequence rotation_sequence(const std::function<double(double, double)>& field, int canvas_width,
                                   int canvas_height, const CameraIntrinsics& cam,
                                   const RotationSequenceOptions& opt) {
    validate(cam);
    const auto rots = sweep_rotations(opt);
    return render_sequence(field, central_canvas_K(cam, canvas_width, canvas_height), canvas_width, canvas_height, cam,
                           rots, opt.landmark_spacing);
}

RotationSequence rotation_sequence(const ImageBuffer& canvas, const CameraIntrinsics& cam,
                                   const RotationSequenceOptions& opt) {
    const ImageBuffer gray = to_grayscale(canvas);
    const Raster r = gray.channel(0);
    auto field = [&r](double x, double y) {
        double v = 0.0;
        sample_bilinear(r, x, y, v);
        return v;
    };
    return rotation_sequence(field, canvas.width(), canvas.height(), cam, opt);
}

// ---- datasets ----

DatasetConfig DatasetConfig::standard(std::uint64_t seed) {
    DatasetConfig c;
    c.seed = seed;
    return c;
}

DatasetConfig DatasetConfig::corrupted(std::uint64_t seed) {
    DatasetConfig c;
    c.name = "corrupted";
    c.seed = seed;
    c.frames = 40;
    c.blur_sigma = 1.2;
    c.vignette_a = -0.4;
    c.vignette_b = -0.15;
    c.specular_min = 4;
    c.specular_max = 8;
    return c;
}

DatasetConfig DatasetConfig::specular(std::uint64_t seed) {
    DatasetConfig c;
    c.name = "specular";
    c.seed = seed;
    c.frames = 12;
    c.specular_min = 5;
    c.specular_max = 8;
    return c;
}

DatasetConfig DatasetConfig::named(const std::string& name, std::uint64_t seed) {
    if (name == "standard") return standard(seed);
    if (name == "corrupted") return corrupted(seed);
    if (name == "specular") return specular(seed);
    throw Error("unknown dataset name: " + name);
}

Dataset make_dataset(const DatasetConfig& cfg) {
    if (cfg.frames < 1 || cfg.width < 32 || cfg.height < 32) throw Error("make_dataset: bad size");
    Dataset d;
    d.config = cfg;
    CameraIntrinsics& cam = d.camera;
    cam.width = cfg.width;
    cam.height = cfg.height;
    cam.fx = cam.fy = cfg.focal;
    cam.cx = (cfg.width - 1) / 2.0;
    cam.cy = (cfg.height - 1) / 2.0;
    cam.k1 = cfg.k1;
    validate(cam);

    RotationSequenceOptions ro;
    ro.frames = cfg.frames;
    ro.max_angle = cfg.step_deg * std::numbers::pi / 180.0 * (cfg.frames - 1);
    ro.jitter = cfg.jitter_deg * std::numbers::pi / 180.0;
    ro.seed = cfg.seed * 7919 + 1;
    d.rotations = sweep_rotations(ro);

    // Canvas just large enough for every frame footprint plus a margin.
    const Eigen::Matrix3d K = cam.K(), Ki = K.inverse();
    double bx0 = 1e300, by0 = 1e300, bx1 = -1e300, by1 = -1e300;
    for (const auto& R : d.rotations)
        for (double y : {0.0, cfg.height - 1.0})
            for (double x : {0.0, cfg.width - 1.0}) {
                const Eigen::Vector3d ray = R.transpose() * Ki * Eigen::Vector3d(x, y, 1.0);
                const double u = cfg.focal * ray.x() / ray.z(), v = cfg.focal * ray.y() / ray.z();
                bx0 = std::min(bx0, u);
                bx1 = std::max(bx1, u);
                by0 = std::min(by0, v);
                by1 = std::max(by1, v);
            }
    const double px = cfg.margin - std::floor(bx0), py = cfg.margin - std::floor(by0);
    const int cw = static_cast<int>(std::ceil(bx1 + px)) + cfg.margin + 1;
    const int ch = static_cast<int>(std::ceil(by1 + py)) + cfg.margin + 1;
    d.canvas_K << cfg.focal, 0, px, 0, cfg.focal, py, 0, 0, 1;

    AnalyticSurface surf = AnalyticSurface::cylinder_interior((cw - 1) / 2.0, cfg.cylinder_radius);
    surf.terms = random_bumps(cfg.bump_count, cfg.bump_amplitude, cfg.bump_lmin, cfg.bump_lmax, cfg.seed * 104729 + 3);
    auto shade = [&](double x, double y) {
        if (!surf.defined(x, y)) return 0.0;
        double p, q;
        surf.gradient(x, y, p, q);
        return reflectance(p, q, cfg.light);
    };
    const RenderResult canvas = render_lambertian(surf, cfg.light, cw, ch);
    d.canvas_shading = canvas.image;
    d.canvas_depth = canvas.depth.z;

    VignetteModel vig = VignetteModel::identity(cfg.width, cfg.height);
    vig.a = cfg.vignette_a;
    vig.b = cfg.vignette_b;

    d.frames.resize(cfg.frames);
    d.specular_truth.resize(cfg.frames);
    const Eigen::Matrix3d Kc = d.canvas_K;
    parallel_for(0, cfg.frames, [&](int k) {
        const Eigen::Matrix3d to_canvas = Kc * d.rotations[k].transpose() * Ki;
        ImageBuffer img(cfg.width, cfg.height, 1);
        for (int y = 0; y < cfg.height; ++y)
            for (int x = 0; x < cfg.width; ++x) {
                const Eigen::Vector2d ideal = cam.undistort_pixel(Eigen::Vector2d(x, y));
                Point2 c;
                if (project(to_canvas, ideal, c)) img.set(x, y, shade(c.x(), c.y()));
            }
        img = apply_vignette(img, vig);
        std::mt19937_64 rng(cfg.seed * 1000003ULL + static_cast<std::uint64_t>(k) * 7 + 5);
        std::uniform_int_distribution<int> nspec(cfg.specular_min, std::max(cfg.specular_min, cfg.specular_max));
        SpecularResult sp = inject_speculars(img, nspec(rng), cfg.specular_rmin, cfg.specular_rmax, rng());
        img = std::move(sp.image);
        if (cfg.blur_sigma > 0) img = gaussian_blur(img, cfg.blur_sigma);
        std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
        std::vector<double> px8(img.data().size());
        for (std::size_t i = 0; i < px8.size(); ++i) {
            double v = img.data()[i] + (cfg.noise_sigma > 0 ? noise(rng) : 0.0);
            v = std::clamp(v, 0.0, 1.0);
            px8[i] = std::round(v * 255.0) / 255.0;
        }
        d.frames[k] = ImageBuffer(cfg.width, cfg.height, 1, std::move(px8));
        d.specular_truth[k] = std::move(sp.truth);
    });
    return d;
}

namespace {

nlohmann::json matrix_json(const Eigen::Matrix3d& m) {
    nlohmann::json j = nlohmann::json::array();
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) j.push_back(m(r, c));
    return j;
}

std::string frame_name(const char* prefix, int k, const char* ext) {
    std::ostringstream os;
    os << prefix << std::setw(4) << std::setfill('0') << k << ext;
    return os.str();
}

}  // namespace

void write_dataset(const Dataset& d, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "frames");
    fs::create_directories(fs::path(dir) / "truth");
    save_calibration(d.camera, (fs::path(dir) / "calibration.json").string());
    nlohmann::json j;
    j["schema_version"] = 1;
    j["name"] = d.config.name;
    j["seed"] = d.config.seed;
    j["frame_count"] = d.frames.size();
    j["calibration"] = "calibration.json";
    j["light"] = {{"slant", d.config.light.slant}, {"tilt", d.config.light.tilt}, {"albedo", d.config.light.albedo}};
    j["canvas"] = {{"width", d.canvas_depth.width()}, {"height", d.canvas_depth.height()}, {"K", matrix_json(d.canvas_K)}};
    j["truth_depth"] = "truth/depth.pfm";
    j["truth_canvas"] = "truth/canvas.png";
    j["vignette"] = {{"a", d.config.vignette_a}, {"b", d.config.vignette_b}};
    j["frames"] = nlohmann::json::array();
    for (std::size_t k = 0; k < d.frames.size(); ++k) {
        const std::string img = frame_name("frames/frame_", static_cast<int>(k), ".png");
        const std::string msk = frame_name("truth/specular_", static_cast<int>(k), ".pgm");
        save_image(d.frames[k], (fs::path(dir) / img).string());
        save_mask(d.specular_truth[k], (fs::path(dir) / msk).string());
        j["frames"].push_back({{"id", k}, {"image", img}, {"specular_mask", msk}, {"rotation", matrix_json(d.rotations[k])}});
    }
    save_pfm(d.canvas_depth, (fs::path(dir) / "truth/depth.pfm").string());
    save_image(d.canvas_shading, (fs::path(dir) / "truth/canvas.png").string());
    std::ofstream os(fs::path(dir) / "dataset.json");
    if (!os) throw IoError("cannot write dataset.json in " + dir);
    os << j.dump(2) << "\n";
}

DepthMap reference_depth(const Raster& canvas_depth, const Eigen::Matrix3d& canvas_K, const Eigen::Matrix3d& K,
                         const Eigen::Matrix3d& anchor_rotation, const Eigen::Matrix3d& view_to_anchor, int width,
                         int height) {
    const Eigen::Matrix3d m = canvas_K * anchor_rotation.transpose() * K.inverse() * view_to_anchor;
    DepthMap d;
    d.z = Raster(width, height);
    d.valid = BinaryMask(width, height);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            Point2 c;
            double v;
            if (project(m, Point2(x, y), c) && sample_bilinear(canvas_depth, c.x(), c.y(), v)) {
                d.z(x, y) = v;
                d.valid.set(x, y, true);
            }
        }
    return d;
}

}  // namespace endomap
