#include <Eigen/LU>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <array>
#include <cmath>

#include "endomap/stitcher.hpp"

namespace endomap {

namespace {

using Mat3 = Eigen::Matrix3d;
using Vec3 = Eigen::Vector3d;

struct PoseCache {
    Mat3 H;
    Mat3 H_inv;
    std::array<Mat3, 6> dH;  // d(H)/d(omega_0..2, t_0..2)
};

std::vector<PoseCache> cache_poses(const std::vector<CameraPose>& poses, const Mat3& K) {
    const Mat3 Ki = K.inverse();
    std::vector<PoseCache> c(poses.size());
    for (std::size_t k = 0; k < poses.size(); ++k) {
        c[k].H = pose_homography(poses[k], K);
        c[k].H_inv = c[k].H.inverse();
        for (int m = 0; m < 3; ++m) {
            Mat3 e = Mat3::Zero();
            // [e_m]_x
            const int a = (m + 1) % 3, b = (m + 2) % 3;
            e(b, a) = 1.0;
            e(a, b) = -1.0;
            c[k].dH[m] = K * (e * poses[k].R) * Ki;
            Mat3 te = Mat3::Zero();
            te(m, 2) = 1.0;
            c[k].dH[3 + m] = K * te * Ki;
        }
    }
    return c;
}

bool residual(const Mat3& h, const Point2& src, const Point2& dst, Vec3& y, Eigen::Vector2d& r) {
    y = h * Vec3(src.x(), src.y(), 1.0);
    if (std::abs(y.z()) < 1e-12) return false;
    r = Eigen::Vector2d(y.x() / y.z() - dst.x(), y.y() / y.z() - dst.y());
    return true;
}

double edge_cost(const BAEdge& e, const std::vector<PoseCache>& c) {
    const Mat3 hij = c[e.j].H * c[e.i].H_inv;
    const Mat3 hji = c[e.i].H * c[e.j].H_inv;
    double s = 0.0;
    Vec3 y;
    Eigen::Vector2d r;
    for (std::size_t k = 0; k < e.pa.size(); ++k) {
        if (residual(hij, e.pa[k], e.pb[k], y, r)) s += r.squaredNorm();
        else s += 1e12;
        if (residual(hji, e.pb[k], e.pa[k], y, r)) s += r.squaredNorm();
        else s += 1e12;
    }
    return s;
}

double total_cost(const std::vector<BAEdge>& edges, const std::vector<PoseCache>& c) {
    double s = 0.0;
    for (const auto& e : edges) s += edge_cost(e, c);
    return s;
}

// Accumulates J^T J (12x12 over [pose i | pose j]) and J^T r for one edge.
void edge_normal_equations(const BAEdge& e, const std::vector<PoseCache>& c, Eigen::Matrix<double, 12, 12>& JtJ,
                           Eigen::Matrix<double, 12, 1>& Jtr) {
    JtJ.setZero();
    Jtr.setZero();
    const PoseCache& ci = c[e.i];
    const PoseCache& cj = c[e.j];
    const Mat3 hij = cj.H * ci.H_inv;
    const Mat3 hji = ci.H * cj.H_inv;
    std::array<Mat3, 12> d_fwd, d_bwd;
    for (int m = 0; m < 6; ++m) {
        d_fwd[m] = -hij * ci.dH[m] * ci.H_inv;
        d_fwd[6 + m] = cj.dH[m] * ci.H_inv;
        d_bwd[m] = ci.dH[m] * cj.H_inv;
        d_bwd[6 + m] = -hji * cj.dH[m] * cj.H_inv;
    }
    auto accumulate = [&](const Mat3& h, const std::array<Mat3, 12>& d, const Point2& src, const Point2& dst) {
        Vec3 y;
        Eigen::Vector2d r;
        if (!residual(h, src, dst, y, r)) return;
        const Vec3 s(src.x(), src.y(), 1.0);
        Eigen::Matrix<double, 2, 3> P;
        P << 1.0 / y.z(), 0, -y.x() / (y.z() * y.z()), 0, 1.0 / y.z(), -y.y() / (y.z() * y.z());
        Eigen::Matrix<double, 2, 12> J;
        for (int m = 0; m < 12; ++m) J.col(m) = P * (d[m] * s);
        JtJ.noalias() += J.transpose() * J;
        Jtr.noalias() += J.transpose() * r;
    };
    for (std::size_t k = 0; k < e.pa.size(); ++k) {
        accumulate(hij, d_fwd, e.pa[k], e.pb[k]);
        accumulate(hji, d_bwd, e.pb[k], e.pa[k]);
    }
}

std::vector<int> parameter_index(std::size_t n, int anchor) {
    std::vector<int> idx(n, -1);
    int next = 0;
    for (std::size_t k = 0; k < n; ++k)
        if (static_cast<int>(k) != anchor) idx[k] = 6 * next++;
    return idx;
}

void check_edges(const std::vector<BAEdge>& edges, std::size_t n) {
    for (const auto& e : edges) {
        if (e.i < 0 || e.j < 0 || e.i >= static_cast<int>(n) || e.j >= static_cast<int>(n) || e.i == e.j)
            throw Error("bundle_adjust: edge references an invalid pose");
        if (e.pa.size() != e.pb.size()) throw Error("bundle_adjust: edge point lists differ in length");
    }
}

std::vector<CameraPose> apply_step(const std::vector<CameraPose>& poses, const std::vector<int>& idx,
                                   const Eigen::VectorXd& delta) {
    std::vector<CameraPose> out = poses;
    for (std::size_t k = 0; k < poses.size(); ++k) {
        if (idx[k] < 0) continue;
        const Vec3 w = delta.segment<3>(idx[k]);
        out[k].R = orthonormalize(rotation_from_axis_angle(w) * poses[k].R);
        out[k].t = poses[k].t + delta.segment<3>(idx[k] + 3);
    }
    return out;
}

}  // namespace

double ba_cost(const std::vector<BAEdge>& edges, const Eigen::Matrix3d& K, const std::vector<CameraPose>& poses) {
    check_edges(edges, poses.size());
    return total_cost(edges, cache_poses(poses, K));
}

Eigen::VectorXd ba_gradient(const std::vector<BAEdge>& edges, const Eigen::Matrix3d& K,
                            const std::vector<CameraPose>& poses, int anchor) {
    check_edges(edges, poses.size());
    const auto c = cache_poses(poses, K);
    const auto idx = parameter_index(poses.size(), anchor);
    const int dim = 6 * static_cast<int>(poses.size() - (anchor >= 0 && anchor < static_cast<int>(poses.size())));
    Eigen::VectorXd g = Eigen::VectorXd::Zero(dim);
    Eigen::Matrix<double, 12, 12> JtJ;
    Eigen::Matrix<double, 12, 1> Jtr;
    for (const auto& e : edges) {
        edge_normal_equations(e, c, JtJ, Jtr);
        if (idx[e.i] >= 0) g.segment<6>(idx[e.i]) += 2.0 * Jtr.head<6>();
        if (idx[e.j] >= 0) g.segment<6>(idx[e.j]) += 2.0 * Jtr.tail<6>();
    }
    return g;
}

BAReport bundle_adjust(const std::vector<BAEdge>& edges, const Eigen::Matrix3d& K, std::vector<CameraPose>& poses,
                       int anchor, const BAOptions& opt) {
    check_edges(edges, poses.size());
    if (anchor < 0 || anchor >= static_cast<int>(poses.size())) throw Error("bundle_adjust: invalid anchor");
    poses[anchor] = CameraPose{};

    BAReport rep;
    const auto idx = parameter_index(poses.size(), anchor);
    const int dim = 6 * static_cast<int>(poses.size() - 1);
    auto cache = cache_poses(poses, K);
    double cost = total_cost(edges, cache);
    rep.initial_cost = cost;
    rep.cost_history.push_back(cost);
    if (dim == 0 || edges.empty()) {
        rep.final_cost = cost;
        rep.stop_reason = "nothing to optimise";
        return rep;
    }

    double lambda = opt.lambda0;
    for (int it = 0; it < opt.max_iters; ++it) {
        if (cost < 1e-20) {
            rep.stop_reason = "zero cost";
            break;
        }
        std::vector<Eigen::Triplet<double>> trip;
        Eigen::VectorXd g = Eigen::VectorXd::Zero(dim);
        Eigen::Matrix<double, 12, 12> JtJ;
        Eigen::Matrix<double, 12, 1> Jtr;
        for (const auto& e : edges) {
            edge_normal_equations(e, cache, JtJ, Jtr);
            const int blocks[2] = {idx[e.i], idx[e.j]};
            for (int bi = 0; bi < 2; ++bi) {
                if (blocks[bi] < 0) continue;
                g.segment<6>(blocks[bi]) += Jtr.segment<6>(6 * bi);
                for (int bj = 0; bj < 2; ++bj) {
                    if (blocks[bj] < 0) continue;
                    for (int r = 0; r < 6; ++r)
                        for (int s = 0; s < 6; ++s)
                            trip.emplace_back(blocks[bi] + r, blocks[bj] + s, JtJ(6 * bi + r, 6 * bj + s));
                }
            }
        }
        if ((2.0 * g).cwiseAbs().maxCoeff() < opt.grad_tol) {
            rep.stop_reason = "gradient below tolerance";
            break;
        }
        Eigen::SparseMatrix<double> A(dim, dim);
        A.setFromTriplets(trip.begin(), trip.end());
        Eigen::VectorXd diag = A.diagonal();
        for (int k = 0; k < dim; ++k) diag(k) = std::max(diag(k), 1e-9);

        bool accepted = false;
        while (!accepted) {
            Eigen::SparseMatrix<double> Ad = A;
            for (int k = 0; k < dim; ++k) Ad.coeffRef(k, k) += lambda * diag(k);
            Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(Ad);
            if (solver.info() == Eigen::Success) {
                const Eigen::VectorXd delta = solver.solve(-g);
                if (solver.info() == Eigen::Success && delta.allFinite()) {
                    auto trial = apply_step(poses, idx, delta);
                    auto trial_cache = cache_poses(trial, K);
                    const double trial_cost = total_cost(edges, trial_cache);
                    if (trial_cost < cost) {
                        const double rel = (cost - trial_cost) / cost;
                        poses = std::move(trial);
                        cache = std::move(trial_cache);
                        cost = trial_cost;
                        rep.cost_history.push_back(cost);
                        lambda = std::max(lambda / 10.0, 1e-15);
                        accepted = true;
                        rep.iterations = it + 1;
                        if (rel < opt.rel_tol) rep.stop_reason = "relative decrease below tolerance";
                        break;
                    }
                }
            }
            lambda *= 10.0;
            if (lambda > opt.lambda_max) {
                rep.aborted = true;
                rep.stop_reason = "damping exceeded limit";
                break;
            }
        }
        rep.iterations = it + 1;
        if (rep.aborted || !rep.stop_reason.empty()) break;
    }
    if (rep.stop_reason.empty()) rep.stop_reason = "iteration limit";
    rep.final_cost = cost;
    return rep;
}

}  // namespace endomap
