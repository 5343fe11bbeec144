#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <json.hpp>

#include "endomap/evaluation.hpp"
#include "endomap/io.hpp"
#include "endomap/pipeline.hpp"
#include "endomap/preprocess.hpp"
#include "endomap/sfs.hpp"
#include "endomap/stitcher.hpp"
#include "endomap/synthkit.hpp"

namespace py = pybind11;
using namespace endomap;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using U8 = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

// (H, W) or (H, W, 3) float array in [0, 1].
ImageBuffer to_image(const F64& a) {
    if (a.ndim() != 2 && a.ndim() != 3) throw py::value_error("image must be (H, W) or (H, W, C)");
    const int h = static_cast<int>(a.shape(0)), w = static_cast<int>(a.shape(1));
    const int c = a.ndim() == 3 ? static_cast<int>(a.shape(2)) : 1;
    return ImageBuffer(w, h, c, std::vector<double>(a.data(), a.data() + a.size()));
}

py::array_t<double> from_image(const ImageBuffer& img) {
    std::vector<py::ssize_t> shape{img.height(), img.width()};
    if (img.channels() > 1) shape.push_back(img.channels());
    py::array_t<double> out(shape);
    std::copy(img.data().begin(), img.data().end(), out.mutable_data());
    return out;
}

Raster to_raster(const F64& a) {
    if (a.ndim() != 2) throw py::value_error("expected a 2-D array");
    return Raster(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)),
                  std::vector<double>(a.data(), a.data() + a.size()));
}

py::array_t<double> from_raster(const Raster& r) {
    py::array_t<double> out({r.height(), r.width()});
    std::copy(r.values().begin(), r.values().end(), out.mutable_data());
    return out;
}

BinaryMask to_mask(const U8& a) {
    if (a.ndim() != 2) throw py::value_error("mask must be 2-D");
    BinaryMask m(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
    for (py::ssize_t i = 0; i < a.size(); ++i) m.bits()[i] = a.data()[i] ? 1 : 0;
    return m;
}

py::array_t<bool> from_mask(const BinaryMask& m) {
    py::array_t<bool> out({m.height(), m.width()});
    std::copy(m.bits().begin(), m.bits().end(), out.mutable_data());
    return out;
}

std::vector<Point2> to_points(const F64& a) {
    if (a.ndim() != 2 || a.shape(1) != 2) throw py::value_error("points must be (N, 2)");
    std::vector<Point2> p;
    for (py::ssize_t i = 0; i < a.shape(0); ++i) p.emplace_back(a.at(i, 0), a.at(i, 1));
    return p;
}

py::dict rms_dict(const RmsResult& r) {
    py::dict d;
    d["rms"] = r.rms;
    d["percent"] = r.percent;
    d["raw_rms"] = r.raw_rms;
    d["raw_percent"] = r.raw_percent;
    d["scale"] = r.scale;
    d["offset"] = r.offset;
    d["ref_range"] = r.ref_range;
    d["count"] = r.count;
    return d;
}

nlohmann::json to_json(const py::object& o) {
    const std::string s = py::module_::import("json").attr("dumps")(o).cast<std::string>();
    return nlohmann::json::parse(s);
}

py::object from_json(const nlohmann::json& j) {
    return py::module_::import("json").attr("loads")(j.dump());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Endoscopic mosaicking and shape-from-shading";

    py::register_exception<FormatError>(m, "FormatError");
    py::register_exception<IoError>(m, "IoError");
    py::register_exception<Error>(m, "Error");

    py::class_<LightModel>(m, "LightModel")
        .def(py::init([](double slant, double tilt, double albedo) { return LightModel{slant, tilt, albedo}; }),
             py::arg("slant") = 0.0, py::arg("tilt") = 0.0, py::arg("albedo") = 1.0)
        .def_readwrite("slant", &LightModel::slant)
        .def_readwrite("tilt", &LightModel::tilt)
        .def_readwrite("albedo", &LightModel::albedo)
        .def("__repr__", [](const LightModel& l) {
            return "LightModel(slant=" + std::to_string(l.slant) + ", tilt=" + std::to_string(l.tilt) +
                   ", albedo=" + std::to_string(l.albedo) + ")";
        });

    py::class_<VignetteModel>(m, "VignetteModel")
        .def_readonly("a", &VignetteModel::a)
        .def_readonly("b", &VignetteModel::b)
        .def_readonly("c", &VignetteModel::c)
        .def_readonly("rejected", &VignetteModel::rejected)
        .def("gain", &VignetteModel::gain, py::arg("r_hat"));

    m.def("reflectance", &reflectance, py::arg("p"), py::arg("q"), py::arg("light"));

    m.def(
        "render_hemisphere",
        [](int size, double radius, const LightModel& light) {
            const auto s = AnalyticSurface::hemisphere((size - 1) / 2.0, (size - 1) / 2.0, radius);
            const RenderResult r = render_lambertian(s, light, size, size);
            return py::make_tuple(from_image(r.image), from_raster(r.depth.z), from_mask(r.depth.valid));
        },
        py::arg("size"), py::arg("radius"), py::arg("light"),
        "Lambertian render of a dome; returns (image, depth, valid).");

    m.def(
        "estimate_light",
        [](const F64& gray) {
            const LightEstimate e = estimate_light(to_image(gray));
            return py::make_tuple(e.light, e.fallback);
        },
        py::arg("gray"));

    m.def(
        "tsai_shah",
        [](const F64& gray, const LightModel& light, std::optional<U8> valid, int iterations) {
            SfsOptions o;
            o.iterations = iterations;
            const ImageBuffer img = to_image(gray);
            std::optional<BinaryMask> mask;
            if (valid) mask = to_mask(*valid);
            DepthMap z;
            {
                py::gil_scoped_release release;
                z = tsai_shah(img, light, mask ? &*mask : nullptr, o);
            }
            return py::make_tuple(from_raster(z.z), from_mask(z.valid));
        },
        py::arg("gray"), py::arg("light"), py::arg("valid") = py::none(), py::arg("iterations") = 200);

    m.def(
        "detect_reflections",
        [](const F64& gray, double percentile) {
            ReflectionConfig c;
            c.percentile = percentile;
            return from_mask(detect_reflections(to_image(gray), c));
        },
        py::arg("gray"), py::arg("percentile") = 95.0);

    m.def(
        "inpaint",
        [](const F64& img, const U8& mask, double tol, int max_iters) {
            return from_image(inpaint(to_image(img), to_mask(mask), tol, max_iters));
        },
        py::arg("image"), py::arg("mask"), py::arg("tol") = 1e-6, py::arg("max_iters") = 20000);

    m.def("fit_vignette", [](const F64& gray) { return fit_vignette(to_image(gray)); }, py::arg("gray"));
    m.def(
        "correct_vignetting",
        [](const F64& img, const VignetteModel& v) { return from_image(correct_vignetting(to_image(img), v)); },
        py::arg("image"), py::arg("model"));
    m.def("radial_asymmetry", [](const F64& gray) { return radial_asymmetry(to_image(gray)); }, py::arg("gray"));

    m.def(
        "estimate_homography",
        [](const F64& a, const F64& b, int iters, double inlier_px, std::uint64_t seed) {
            const RansacResult r = estimate_homography_ransac(to_points(a), to_points(b), iters, inlier_px, seed);
            return py::make_tuple(Eigen::Matrix3d(r.h.matrix()), r.inliers);
        },
        py::arg("a"), py::arg("b"), py::arg("iters") = 1000, py::arg("inlier_px") = 2.0, py::arg("seed") = 0,
        "RANSAC homography mapping a to b; returns (H, inlier indices).");

    m.def(
        "rms_error",
        [](const F64& z, const F64& ref, std::optional<U8> valid) {
            DepthMap dz{to_raster(z), BinaryMask()}, dr{to_raster(ref), BinaryMask()};
            dz.valid = valid ? to_mask(*valid) : BinaryMask(dz.width(), dz.height(), true);
            dr.valid = BinaryMask(dr.width(), dr.height(), true);
            return rms_dict(rms_error(dz, dr));
        },
        py::arg("z"), py::arg("ref"), py::arg("valid") = py::none());

    m.def("load_image", [](const std::string& p) { return from_image(load_image(p)); }, py::arg("path"));
    m.def(
        "save_image", [](const F64& img, const std::string& p, int bits) { save_image(to_image(img), p, bits); },
        py::arg("image"), py::arg("path"), py::arg("bit_depth") = 8);

    m.def(
        "write_dataset",
        [](const std::string& name, std::uint64_t seed, const std::string& dir, std::optional<int> frames) {
            DatasetConfig c = DatasetConfig::named(name, seed);
            if (frames) c.frames = *frames;
            py::gil_scoped_release release;
            write_dataset(make_dataset(c), dir);
        },
        py::arg("name"), py::arg("seed"), py::arg("dir"), py::arg("frames") = py::none(),
        "Render a synthetic sequence (standard, corrupted or specular) into dir.");

    m.def("default_config", [] { return from_json(config_to_json(PipelineConfig{})); });

    m.def(
        "run_pipeline",
        [](const py::object& config) {
            const PipelineConfig cfg = config_from_json(to_json(config));
            PipelineOutcome o;
            {
                py::gil_scoped_release release;
                o = run_pipeline(cfg);
            }
            py::dict d;
            d["digest"] = o.manifest.digest();
            d["manifest"] = from_json(o.manifest.to_json());
            d["ceiling_exceeded"] = o.ceiling_exceeded;
            py::dict means;
            if (o.reports)
                for (const auto& r : *o.reports) means[py::int_(r.group_size)] = r.mean;
            d["group_means"] = means;
            return d;
        },
        py::arg("config"), "Run every stage; config is a dict in the JSON config schema.");
}
