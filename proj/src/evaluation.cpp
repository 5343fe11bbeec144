#include "endomap/evaluation.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace endomap {

RmsResult rms_error(const DepthMap& z, const DepthMap& ref) {
    require_same_size(z.width(), z.height(), ref.width(), ref.height(), "rms_error");
    const int w = z.width(), h = z.height();
    auto joint = [&](int x, int y) {
        return (z.valid.empty() || z.valid(x, y)) && (ref.valid.empty() || ref.valid(x, y));
    };
    std::size_t n = 0;
    double zs = 0.0, rs = 0.0;
    double rmin = std::numeric_limits<double>::infinity(), rmax = -rmin;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!joint(x, y)) continue;
            ++n;
            zs += z.z(x, y);
            rs += ref.z(x, y);
            rmin = std::min(rmin, ref.z(x, y));
            rmax = std::max(rmax, ref.z(x, y));
        }
    if (n == 0) throw Error("rms_error: no jointly valid pixels");
    RmsResult r;
    r.count = n;
    r.ref_range = rmax - rmin;
    if (!(r.ref_range > 0.0)) throw Error("rms_error: reference depth range is zero");
    const double zm = zs / n, rm = rs / n;
    double szz = 0.0, szr = 0.0, raw = 0.0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!joint(x, y)) continue;
            const double dz = z.z(x, y) - zm, dr = ref.z(x, y) - rm;
            szz += dz * dz;
            szr += dz * dr;
            const double e = z.z(x, y) - ref.z(x, y);
            raw += e * e;
        }
    r.scale = szz > 0.0 ? szr / szz : 0.0;
    r.offset = rm - r.scale * zm;
    double al = 0.0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!joint(x, y)) continue;
            const double e = r.scale * (z.z(x, y) - zm) - (ref.z(x, y) - rm);
            al += e * e;
        }
    r.rms = std::sqrt(al / n);
    r.raw_rms = std::sqrt(raw / n);
    r.percent = 100.0 * r.rms / r.ref_range;
    r.raw_percent = 100.0 * r.raw_rms / r.ref_range;
    return r;
}

void mean_stddev(const std::vector<double>& v, double& mean, double& stddev) {
    mean = stddev = 0.0;
    if (v.empty()) return;
    for (double x : v) mean += x;
    mean /= v.size();
    for (double x : v) stddev += (x - mean) * (x - mean);
    stddev = std::sqrt(stddev / v.size());
}

EvalReport evaluate_groups(int total_frames, int group_size, const GroupRunner& run, bool aligned) {
    if (group_size < 1) throw Error("evaluate_groups: group size must be >= 1");
    if (total_frames < group_size) throw Error("evaluate_groups: fewer frames than the group size");
    EvalReport rep;
    rep.group_size = group_size;
    rep.aligned = aligned;
    const int groups = total_frames / group_size;
    std::vector<double> sel, raw;
    for (int g = 0; g < groups; ++g) {
        GroupResult gr;
        gr.index = g;
        gr.first_frame = g * group_size;
        gr.frame_count = group_size;
        const GroupOutcome out = run(gr.first_frame, gr.frame_count);
        gr.coverage = out.coverage;
        if (out.coverage < 0.1) {
            gr.skipped = true;
            gr.reason = "reference covers less than 10% of the canvas";
        } else {
            gr.rms = rms_error(out.depth, out.reference);
            sel.push_back(selected_percent(gr.rms, aligned));
            raw.push_back(gr.rms.raw_percent);
        }
        rep.groups.push_back(std::move(gr));
    }
    rep.evaluated = static_cast<int>(sel.size());
    mean_stddev(sel, rep.mean, rep.stddev);
    mean_stddev(raw, rep.raw_mean, rep.raw_stddev);
    return rep;
}

void export_ply(const std::vector<Point3>& cloud, const std::string& path) {
    if (cloud.empty()) throw Error("export_ply: empty point cloud");
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << "ply\nformat ascii 1.0\nelement vertex " << cloud.size()
       << "\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
    os.precision(6);
    for (const auto& p : cloud)
        os << static_cast<float>(p.x) << ' ' << static_cast<float>(p.y) << ' ' << static_cast<float>(p.z) << '\n';
    if (!os) throw IoError("write failed: " + path);
}

std::vector<Point3> read_ply(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path);
    std::string line;
    if (!std::getline(is, line) || line != "ply") throw FormatError(path + ": not a PLY file");
    std::size_t n = 0;
    bool ascii = false, header_done = false;
    while (std::getline(is, line)) {
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "format") {
            std::string fmt;
            ls >> fmt;
            ascii = fmt == "ascii";
        } else if (key == "element") {
            std::string what;
            ls >> what;
            if (what == "vertex") ls >> n;
        } else if (key == "end_header") {
            header_done = true;
            break;
        }
    }
    if (!header_done || !ascii) throw FormatError(path + ": unsupported PLY header");
    std::vector<Point3> out(n);
    for (auto& p : out)
        if (!(is >> p.x >> p.y >> p.z)) throw FormatError(path + ": truncated vertex data");
    return out;
}

}  // namespace endomap
