#include "endomap/features.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "endomap/kernels.hpp"
#include "endomap/parallel.hpp"

namespace endomap {

std::size_t DenseDescriptorSet::usable_count() const {
    return static_cast<std::size_t>(std::count(usable.begin(), usable.end(), std::uint8_t{1}));
}

DenseDescriptorSet extract_dense(const ImageBuffer& gray, int grid_step, int patch_size, const BinaryMask* valid) {
    if (gray.channels() != 1) throw Error("extract_dense expects a single-channel image");
    if (patch_size < 8 || patch_size % 4 != 0) throw Error("patch_size must be >= 8 and divisible by 4");
    if (grid_step < 1) throw Error("grid_step must be >= 1");
    const int w = gray.width(), h = gray.height();
    if (w <= patch_size || h <= patch_size) throw Error("image smaller than descriptor patch");
    if (valid) require_same_size(w, h, valid->width(), valid->height(), "descriptor mask");

    const IntegralImage ii(gray.channel(0));
    IntegralImage invalid_count;
    if (valid) {
        Raster inv(w, h);
        for (std::size_t i = 0; i < inv.size(); ++i) inv.values()[i] = valid->bits()[i] ? 0.0 : 1.0;
        invalid_count = IntegralImage(inv);
    }

    const int half = patch_size / 2;
    const int sub = patch_size / 4;
    const int sp = std::max(1, patch_size / 8);
    const double sigma = patch_size / 4.0;

    DenseDescriptorSet set;
    set.width = w;
    set.height = h;
    set.grid_step = grid_step;
    set.patch_size = patch_size;
    // Haar boxes reach sp/2 past the patch; keep them inside the image.
    const int margin = half + sp;
    for (int y = margin; y + margin <= h; y += grid_step) {
        for (int x = margin; x + margin <= w; x += grid_step) {
            if (valid && invalid_count.box_sum(x - half - sp, y - half - sp, x + half + sp, y + half + sp) > 0.0)
                continue;
            set.points.emplace_back(x, y);
        }
    }
    set.descriptors.resize(set.points.size());
    set.usable.assign(set.points.size(), 0);

    parallel_for(0, static_cast<int>(set.points.size()), [&](int idx) {
        const int px = static_cast<int>(set.points[idx].x());
        const int py = static_cast<int>(set.points[idx].y());
        double d[kDescriptorDims] = {};
        for (int j = 0; j < 4; ++j) {
            for (int i = 0; i < 4; ++i) {
                double sdx = 0, sadx = 0, sdy = 0, sady = 0;
                const int x0 = px - half + i * sub, y0 = py - half + j * sub;
                for (int v = 0; v < sub; v += sp) {
                    for (int u = 0; u < sub; u += sp) {
                        const int cx = x0 + u + sp / 2, cy = y0 + v + sp / 2;
                        const double hx = ii.box_sum(cx, cy - sp, cx + sp, cy + sp) -
                                          ii.box_sum(cx - sp, cy - sp, cx, cy + sp);
                        const double hy = ii.box_sum(cx - sp, cy, cx + sp, cy + sp) -
                                          ii.box_sum(cx - sp, cy - sp, cx + sp, cy);
                        const double ddx = cx - px, ddy = cy - py;
                        const double g = std::exp(-(ddx * ddx + ddy * ddy) / (2.0 * sigma * sigma));
                        sdx += g * hx;
                        sadx += g * std::abs(hx);
                        sdy += g * hy;
                        sady += g * std::abs(hy);
                    }
                }
                double* o = d + 4 * (4 * j + i);
                o[0] = sdx;
                o[1] = sadx;
                o[2] = sdy;
                o[3] = sady;
            }
        }
        double norm = 0.0;
        for (double v : d) norm += v * v;
        norm = std::sqrt(norm);
        Descriptor& out = set.descriptors[idx];
        if (norm < 1e-12) {
            out.fill(0.0f);
            return;
        }
        for (int k = 0; k < kDescriptorDims; ++k) out[k] = static_cast<float>(d[k] / norm);
        set.usable[idx] = 1;
    });
    return set;
}

namespace {

// Eight fixed-order partial sums: vectorisable and still deterministic.
float sq_distance(const Descriptor& a, const Descriptor& b) {
    float acc[8] = {};
    for (int k = 0; k < kDescriptorDims; k += 8)
        for (int l = 0; l < 8; ++l) {
            const float d = a[k + l] - b[k + l];
            acc[l] += d * d;
        }
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

struct Nearest {
    int best = -1;
    double d1 = std::numeric_limits<double>::infinity();
    double d2 = std::numeric_limits<double>::infinity();

    void offer(double d, int j) {
        if (d < d1) {
            d2 = d1;
            d1 = d;
            best = j;
        } else if (d < d2) {
            d2 = d;
        }
    }
};

// Nearest neighbours in both directions from one distance table.
void nearest_neighbours(const DenseDescriptorSet& a, const DenseDescriptorSet& b, std::vector<Nearest>& ab,
                        std::vector<Nearest>& ba) {
    const int na = static_cast<int>(a.size()), nb = static_cast<int>(b.size());
    const float inf = std::numeric_limits<float>::infinity();
    std::vector<float> dist(static_cast<std::size_t>(na) * nb, inf);
    parallel_for(0, na, [&](int i) {
        if (!a.usable[i]) return;
        float* row = &dist[static_cast<std::size_t>(i) * nb];
        for (int j = 0; j < nb; ++j)
            if (b.usable[j]) row[j] = sq_distance(a.descriptors[i], b.descriptors[j]);
    });
    ab.assign(na, Nearest{});
    ba.assign(nb, Nearest{});
    for (int i = 0; i < na; ++i) {
        if (!a.usable[i]) continue;
        const float* row = &dist[static_cast<std::size_t>(i) * nb];
        for (int j = 0; j < nb; ++j) {
            if (row[j] == inf) continue;
            ab[i].offer(row[j], j);
            ba[j].offer(row[j], i);
        }
    }
}

}  // namespace

MatchSet match(const DenseDescriptorSet& a, const DenseDescriptorSet& b, double ratio) {
    if (!(ratio > 0.0 && ratio <= 1.0)) throw Error("match ratio must lie in (0,1]");
    MatchSet ms;
    ms.source_width = a.width;
    ms.source_height = a.height;
    ms.target_width = b.width;
    ms.target_height = b.height;
    if (a.size() == 0 || b.size() == 0) return ms;

    std::vector<Nearest> ab, ba;
    nearest_neighbours(a, b, ab, ba);
    for (std::size_t i = 0; i < a.size(); ++i) {
        const Nearest& n = ab[i];
        if (n.best < 0) continue;
        const double d1 = std::sqrt(n.d1), d2 = std::sqrt(n.d2);
        if (!(d1 < ratio * d2)) continue;
        if (ba[n.best].best != static_cast<int>(i)) continue;
        ms.pairs.push_back({static_cast<int>(i), n.best, d1});
    }
    return ms;
}

ReprojectionErrors reprojection_error(const MatchSet& matches, const std::vector<Point2>& pts_a,
                                      const std::vector<Point2>& pts_b, const Homography33& h) {
    ReprojectionErrors r;
    r.per_match.resize(matches.pairs.size());
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < matches.pairs.size(); ++k) {
        const Match& m = matches.pairs[k];
        if (m.a < 0 || m.b < 0 || m.a >= static_cast<int>(pts_a.size()) || m.b >= static_cast<int>(pts_b.size()))
            throw Error("match index out of range");
        Point2 p;
        if (!h.apply(pts_a[m.a], p)) {
            r.per_match[k] = std::numeric_limits<double>::quiet_NaN();
            ++r.flagged;
            continue;
        }
        r.per_match[k] = (p - pts_b[m.b]).norm();
        sum += r.per_match[k];
        ++n;
    }
    r.mean = n ? sum / static_cast<double>(n) : 0.0;
    return r;
}

namespace {

constexpr char kDescMagic[4] = {'E', 'M', 'D', 'S'};
constexpr char kMatchMagic[4] = {'E', 'M', 'M', 'S'};
constexpr std::uint32_t kRecordVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
    static_assert(std::is_arithmetic_v<T>);
    char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    out.write(b, sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& path) {
    char b[sizeof(T)];
    in.read(b, sizeof(T));
    if (in.gcount() != static_cast<std::streamsize>(sizeof(T))) throw FormatError(path + ": truncated record");
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    T v;
    std::memcpy(&v, b, sizeof(T));
    return v;
}

void check_magic(std::istream& in, const char* magic, const std::string& path) {
    char m[4];
    in.read(m, 4);
    if (in.gcount() != 4 || std::memcmp(m, magic, 4) != 0) throw FormatError(path + ": bad magic");
    if (get<std::uint32_t>(in, path) != kRecordVersion) throw FormatError(path + ": unsupported version");
}

}  // namespace

void write_descriptors(const DenseDescriptorSet& s, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path);
    out.write(kDescMagic, 4);
    put<std::uint32_t>(out, kRecordVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    put<std::uint32_t>(out, kDescriptorDims);
    put<std::int32_t>(out, s.width);
    put<std::int32_t>(out, s.height);
    put<std::int32_t>(out, s.grid_step);
    put<std::int32_t>(out, s.patch_size);
    for (std::size_t i = 0; i < s.size(); ++i) {
        put<std::int32_t>(out, static_cast<std::int32_t>(s.points[i].x()));
        put<std::int32_t>(out, static_cast<std::int32_t>(s.points[i].y()));
        put<std::uint8_t>(out, s.usable[i]);
        for (float v : s.descriptors[i]) put<float>(out, v);
    }
    if (!out) throw IoError("write failed: " + path);
}

DenseDescriptorSet read_descriptors(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    check_magic(in, kDescMagic, path);
    DenseDescriptorSet s;
    const auto n = get<std::uint32_t>(in, path);
    if (get<std::uint32_t>(in, path) != kDescriptorDims) throw FormatError(path + ": unexpected descriptor size");
    s.width = get<std::int32_t>(in, path);
    s.height = get<std::int32_t>(in, path);
    s.grid_step = get<std::int32_t>(in, path);
    s.patch_size = get<std::int32_t>(in, path);
    s.points.resize(n);
    s.descriptors.resize(n);
    s.usable.resize(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        const int x = get<std::int32_t>(in, path);
        const int y = get<std::int32_t>(in, path);
        s.points[i] = Point2(x, y);
        s.usable[i] = get<std::uint8_t>(in, path);
        for (float& v : s.descriptors[i]) v = get<float>(in, path);
    }
    return s;
}

void write_matches(const MatchSet& m, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path);
    out.write(kMatchMagic, 4);
    put<std::uint32_t>(out, kRecordVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(m.pairs.size()));
    put<std::uint32_t>(out, 3);
    put<std::int32_t>(out, m.source_width);
    put<std::int32_t>(out, m.source_height);
    put<std::int32_t>(out, m.target_width);
    put<std::int32_t>(out, m.target_height);
    for (const Match& p : m.pairs) {
        put<std::int32_t>(out, p.a);
        put<std::int32_t>(out, p.b);
        put<double>(out, p.distance);
    }
    if (!out) throw IoError("write failed: " + path);
}

MatchSet read_matches(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    check_magic(in, kMatchMagic, path);
    MatchSet m;
    const auto n = get<std::uint32_t>(in, path);
    if (get<std::uint32_t>(in, path) != 3) throw FormatError(path + ": unexpected match record size");
    m.source_width = get<std::int32_t>(in, path);
    m.source_height = get<std::int32_t>(in, path);
    m.target_width = get<std::int32_t>(in, path);
    m.target_height = get<std::int32_t>(in, path);
    m.pairs.resize(n);
    for (auto& p : m.pairs) {
        p.a = get<std::int32_t>(in, path);
        p.b = get<std::int32_t>(in, path);
        p.distance = get<double>(in, path);
    }
    return m;
}

}  // namespace endomap
