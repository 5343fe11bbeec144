#include <Eigen/LU>
#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <queue>

#include "endomap/kernels.hpp"
#include "endomap/parallel.hpp"
#include "endomap/stitcher.hpp"

namespace endomap {

std::vector<int> select_candidates(int current, const std::vector<int>& pool, const std::vector<int>& counts, int m) {
    if (m < 1) throw Error("select_candidates: m must be >= 1");
    if (pool.size() != counts.size()) throw Error("select_candidates: pool and counts differ in length");
    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    std::erase_if(order, [&](std::size_t k) { return pool[k] == current; });
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (counts[a] != counts[b]) return counts[a] > counts[b];
        return pool[a] < pool[b];
    });
    std::vector<int> out;
    for (std::size_t k = 0; k < order.size() && static_cast<int>(out.size()) < m; ++k) out.push_back(pool[order[k]]);
    return out;
}

namespace {

bool same_frame(const StitchFrame& a, const StitchFrame& b) {
    return a.image.width() == b.image.width() && a.image.height() == b.image.height() &&
           a.image.channels() == b.image.channels() && a.image.data() == b.image.data() &&
           a.valid.bits() == b.valid.bits();
}

int find_root(std::vector<int>& parent, int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
}

struct PairResult {
    int cand = -1;  // unique-frame index of the earlier frame
    int raw = 0;
    bool ok = false;
    RansacResult ransac;
    std::vector<Point2> pa, pb;  // inlier points, candidate -> current
};

}  // namespace

StitchResult stitch(const std::vector<StitchFrame>& frames, const CameraIntrinsics& cam, const StitchConfig& cfg) {
    if (frames.empty()) throw Error("stitch: no frames");
    validate(cam);
    if (cfg.candidates < 1 || cfg.min_inliers < 4 || cfg.ransac_iters < 1 || !(cfg.inlier_px > 0) || cfg.bands < 1)
        throw Error("stitch: invalid configuration");
    const int n = static_cast<int>(frames.size());
    const Eigen::Matrix3d K = cam.K();

    StitchResult res;

    // Exact duplicates share one representative.
    std::vector<int> rep(n), uniq;
    for (int k = 0; k < n; ++k) {
        rep[k] = -1;
        for (int u = 0; u < static_cast<int>(uniq.size()); ++u)
            if (same_frame(frames[uniq[u]], frames[k])) {
                rep[k] = u;
                break;
            }
        if (rep[k] < 0) {
            rep[k] = static_cast<int>(uniq.size());
            uniq.push_back(k);
        }
    }
    const int nu = static_cast<int>(uniq.size());

    auto passthrough = [&](int u) {
        const StitchFrame& f = frames[uniq[u]];
        res.canvas = f.image;
        res.coverage = f.valid.empty() ? BinaryMask(f.image.width(), f.image.height(), true) : f.valid;
        for (int k = 0; k < n; ++k)
            if (rep[k] == u) {
                res.frame_ids.push_back(frames[k].id);
                res.warps.push_back(Homography33::identity());
                res.poses.push_back(CameraPose{});
            }
        res.report.components = {{}};
        for (int k = 0; k < n; ++k) res.report.components[0].push_back(frames[k].id);
        res.report.anchor = frames[uniq[u]].id;
        return res;
    };
    if (nu == 1) return passthrough(0);

    // Descriptors per unique frame.
    std::vector<DenseDescriptorSet> desc(nu);
    parallel_for(0, nu, [&](int u) {
        const StitchFrame& f = frames[uniq[u]];
        const ImageBuffer gray = to_grayscale(f.image);
        desc[u] = extract_dense(gray, cfg.grid_step, cfg.patch_size, f.valid.empty() ? nullptr : &f.valid);
    });

    // Candidate selection and RANSAC, per current frame against earlier frames.
    std::vector<std::vector<PairResult>> pairs(nu);
    parallel_for(1, nu, [&](int u) {
        const int lo = cfg.candidate_window > 0 ? std::max(0, u - cfg.candidate_window) : 0;
        std::vector<int> pool, counts;
        std::vector<MatchSet> ms;
        for (int c = lo; c < u; ++c) {
            ms.push_back(match(desc[c], desc[u], cfg.ratio));
            pool.push_back(c);
            counts.push_back(static_cast<int>(ms.back().pairs.size()));
        }
        for (int c : select_candidates(-1, pool, counts, cfg.candidates)) {
            const MatchSet& m = ms[c - lo];
            PairResult pr;
            pr.cand = c;
            pr.raw = static_cast<int>(m.pairs.size());
            if (pr.raw >= std::max(4, cfg.min_inliers)) {
                std::vector<Point2> a, b;
                for (const auto& p : m.pairs) {
                    a.push_back(desc[c].points[p.a]);
                    b.push_back(desc[u].points[p.b]);
                }
                try {
                    pr.ransac = estimate_homography_ransac(a, b, cfg.ransac_iters, cfg.inlier_px,
                                                           cfg.seed + 1000003ULL * static_cast<std::uint64_t>(c) +
                                                               static_cast<std::uint64_t>(u));
                    pr.ok = static_cast<int>(pr.ransac.inliers.size()) >= cfg.min_inliers;
                    for (int k : pr.ransac.inliers) {
                        pr.pa.push_back(a[k]);
                        pr.pb.push_back(b[k]);
                    }
                } catch (const Error&) {
                    pr.ok = false;
                }
            }
            pairs[u].push_back(std::move(pr));
        }
    });

    // Match graph over unique frames.
    struct GEdge {
        int i, j;
        const PairResult* pr;
    };
    std::vector<GEdge> gedges;
    std::vector<int> parent(nu);
    std::iota(parent.begin(), parent.end(), 0);
    for (int u = 1; u < nu; ++u)
        for (const auto& pr : pairs[u]) {
            StitchEdge se;
            se.from = frames[uniq[pr.cand]].id;
            se.to = frames[uniq[u]].id;
            se.raw_matches = pr.raw;
            se.inliers = static_cast<int>(pr.ransac.inliers.size());
            se.h = pr.ransac.h;
            if (!pr.ok) continue;
            res.report.edges.push_back(se);
            gedges.push_back({pr.cand, u, &pr});
            const int a = find_root(parent, pr.cand), b = find_root(parent, u);
            if (a != b) parent[std::max(a, b)] = std::min(a, b);
        }
    std::map<int, std::vector<int>> comp;
    for (int u = 0; u < nu; ++u) comp[find_root(parent, u)].push_back(u);
    const std::vector<int>* best = nullptr;
    for (const auto& [root, members] : comp) {
        std::vector<int> ids;
        for (int k = 0; k < n; ++k)
            if (std::find(members.begin(), members.end(), rep[k]) != members.end()) ids.push_back(frames[k].id);
        res.report.components.push_back(ids);
        if (!best || members.size() > best->size()) best = &members;
    }
    if (best->size() < 2) {
        res.report.warnings.push_back("no connected component with two or more frames; passing through the first frame");
        const auto comps = res.report.components;
        passthrough(0);
        res.report.components = comps;
        return res;
    }
    if (comp.size() > 1)
        res.report.warnings.push_back(std::to_string(comp.size() - 1) + " smaller component(s) not rendered");

    // Local indexing of the rendered component; anchor is its lowest frame.
    const std::vector<int>& members = *best;
    std::vector<int> local(nu, -1);
    for (std::size_t k = 0; k < members.size(); ++k) local[members[k]] = static_cast<int>(k);
    const int anchor = 0;
    res.report.anchor = frames[uniq[members[anchor]]].id;

    // Initial rotations by breadth-first chaining of pairwise decompositions.
    const int nl = static_cast<int>(members.size());
    std::vector<CameraPose> poses(nl);
    std::vector<std::vector<std::pair<int, Eigen::Matrix3d>>> adj(nl);  // neighbour, R_rel (self -> neighbour)
    for (const auto& e : gedges) {
        if (local[e.i] < 0) continue;
        const Eigen::Matrix3d r = pose_from_homography(e.pr->ransac.h, cam).R;
        adj[local[e.i]].emplace_back(local[e.j], r);
        adj[local[e.j]].emplace_back(local[e.i], Eigen::Matrix3d(r.transpose()));
    }
    std::vector<bool> seen(nl, false);
    std::queue<int> bfs;
    bfs.push(anchor);
    seen[anchor] = true;
    while (!bfs.empty()) {
        const int a = bfs.front();
        bfs.pop();
        for (const auto& [b, r] : adj[a]) {
            if (seen[b]) continue;
            seen[b] = true;
            poses[b].R = orthonormalize(r * poses[a].R);
            bfs.push(b);
        }
    }

    // Bundle adjustment on subsampled inliers.
    std::vector<BAEdge> baedges;
    for (const auto& e : gedges) {
        if (local[e.i] < 0) continue;
        BAEdge be;
        be.i = local[e.i];
        be.j = local[e.j];
        const std::size_t m = e.pr->pa.size();
        const std::size_t keep = cfg.ba_points_per_edge > 0 ? std::min<std::size_t>(m, cfg.ba_points_per_edge) : m;
        for (std::size_t k = 0; k < keep; ++k) {
            const std::size_t idx = keep == m ? k : k * m / keep;
            be.pa.push_back(e.pr->pa[idx]);
            be.pb.push_back(e.pr->pb[idx]);
        }
        baedges.push_back(std::move(be));
    }
    res.report.ba = bundle_adjust(baedges, K, poses, anchor, cfg.ba);
    if (res.report.ba.aborted) res.report.warnings.push_back("bundle adjustment aborted: " + res.report.ba.stop_reason);

    // Anchor-plane extents of every rendered frame.
    std::vector<Eigen::Matrix3d> to_anchor(nl);
    double minx = 1e300, miny = 1e300, maxx = -1e300, maxy = -1e300;
    std::vector<bool> drop(nl, false);
    for (int k = 0; k < nl; ++k) {
        to_anchor[k] = pose_homography(poses[k], K).inverse();
        const StitchFrame& f = frames[uniq[members[k]]];
        const double w = f.image.width() - 1, h = f.image.height() - 1;
        const Point2 corners[4] = {{0, 0}, {w, 0}, {0, h}, {w, h}};
        Point2 q[4];
        bool ok = true;
        for (int c = 0; c < 4; ++c) {
            Eigen::Vector3d v = to_anchor[k] * Eigen::Vector3d(corners[c].x(), corners[c].y(), 1.0);
            ok &= v.z() > 1e-9;
            if (ok) q[c] = Point2(v.x() / v.z(), v.y() / v.z());
        }
        if (!ok) {
            drop[k] = true;
            res.report.warnings.push_back("frame " + std::to_string(f.id) + " projects beyond the anchor plane; skipped");
            continue;
        }
        for (const auto& p : q) {
            minx = std::min(minx, p.x());
            miny = std::min(miny, p.y());
            maxx = std::max(maxx, p.x());
            maxy = std::max(maxy, p.y());
        }
    }
    const double ext = std::max(maxx - minx, maxy - miny);
    res.scale = ext + 1.0 > cfg.canvas_cap ? (cfg.canvas_cap - 1.0) / ext : 1.0;
    res.origin_offset = Point2(-minx, -miny);
    const int cw = std::max(1, static_cast<int>(std::ceil(res.scale * (maxx - minx) - 1e-9)) + 1);
    const int ch = std::max(1, static_cast<int>(std::ceil(res.scale * (maxy - miny) - 1e-9)) + 1);
    Eigen::Matrix3d st;
    st << res.scale, 0, res.scale * -minx, 0, res.scale, res.scale * -miny, 0, 0, 1;

    std::vector<BlendFrame> bf;
    for (int k = 0; k < n; ++k) {
        const int l = local[rep[k]];
        if (l < 0 || drop[l]) continue;
        const Homography33 warp(Eigen::Matrix3d(st * to_anchor[l]));
        res.frame_ids.push_back(frames[k].id);
        res.warps.push_back(warp);
        res.poses.push_back(poses[l]);
        bf.push_back({&frames[k].image, frames[k].valid.empty() ? nullptr : &frames[k].valid, warp});
    }
    auto blended = multiband_blend(bf, cw, ch, cfg.bands);
    res.canvas = std::move(blended.canvas);
    res.coverage = std::move(blended.coverage);
    return res;
}

}  // namespace endomap
