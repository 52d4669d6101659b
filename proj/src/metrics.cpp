#include "nsd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "nsd/common.hpp"

namespace nsd {

namespace {

double min_sq_dist(const Vec3& p, const std::vector<Vec3>& pts) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : pts) best = std::min(best, (p - q).norm2());
    return best;
}

}  // namespace

double chamfer(const EvalCloud& a, const EvalCloud& b) {
    if (a.points.empty() || b.points.empty()) throw Error("chamfer: empty cloud");
    double ab = 0, ba = 0;
    for (const auto& p : a.points) ab += min_sq_dist(p, b.points);
    for (const auto& q : b.points) ba += min_sq_dist(q, a.points);
    return ab / double(a.points.size()) + ba / double(b.points.size());
}

double solve_assignment(const std::vector<double>& cost, std::size_t n,
                        std::vector<int>* row_to_col) {
    if (cost.size() != n * n) throw Error("solve_assignment: cost must be n x n");
    // shortest augmenting path with potentials; 1-based helpers
    std::vector<double> u(n + 1, 0), v(n + 1, 0);
    std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(n + 1, std::numeric_limits<double>::infinity());
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = std::numeric_limits<double>::infinity();
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    double total = 0;
    if (row_to_col) row_to_col->assign(n, -1);
    for (std::size_t j = 1; j <= n; ++j) {
        if (p[j] == 0) continue;
        total += cost[(p[j] - 1) * n + (j - 1)];
        if (row_to_col) (*row_to_col)[p[j] - 1] = int(j - 1);
    }
    return total;
}

double emd(const EvalCloud& a, const EvalCloud& b) {
    const std::size_t n = a.points.size();
    if (n == 0) throw Error("emd: empty cloud");
    if (b.points.size() != n) throw Error("emd: clouds must have equal size");
    if (n > kEmdMaxPoints) {
        throw Error("emd: " + std::to_string(n) + " points exceeds the exact-solver bound of " +
                    std::to_string(kEmdMaxPoints));
    }
    std::vector<double> cost(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            cost[i * n + j] = (a.points[i] - b.points[j]).norm();
        }
    }
    return solve_assignment(cost, n) / double(n);
}

double f_score(const EvalCloud& prediction, const EvalCloud& reference, double tau) {
    if (tau <= 0) throw Error("f_score: tau must be positive");
    if (prediction.points.empty() || reference.points.empty()) {
        throw Error("f_score: empty cloud");
    }
    const double tau2 = tau * tau;
    std::size_t hit_p = 0, hit_r = 0;
    for (const auto& p : prediction.points) {
        if (min_sq_dist(p, reference.points) <= tau2) ++hit_p;
    }
    for (const auto& q : reference.points) {
        if (min_sq_dist(q, prediction.points) <= tau2) ++hit_r;
    }
    const double precision = double(hit_p) / double(prediction.points.size());
    const double recall = double(hit_r) / double(reference.points.size());
    if (precision + recall == 0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

namespace {

double pair_distance(const EvalCloud& a, const EvalCloud& b, PairDistance d) {
    return d == PairDistance::CD ? chamfer(a, b) : emd(a, b);
}

}  // namespace

double one_nna(const std::vector<EvalCloud>& gen, const std::vector<EvalCloud>& ref,
               PairDistance d) {
    if (gen.size() != ref.size()) throw Error("one_nna: |S_g| must equal |S_r|");
    if (gen.size() < 2) throw Error("one_nna: need at least 2 clouds per set");
    const std::size_t n = gen.size(), total = 2 * n;
    auto cloud_at = [&](std::size_t i) -> const EvalCloud& {
        return i < n ? gen[i] : ref[i - n];
    };
    std::vector<double> dist(total * total, 0.0);
    for (std::size_t i = 0; i < total; ++i) {
        for (std::size_t j = i + 1; j < total; ++j) {
            const double dd = pair_distance(cloud_at(i), cloud_at(j), d);
            dist[i * total + j] = dd;
            dist[j * total + i] = dd;
        }
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < total; ++i) {
        std::size_t best = total;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < total; ++j) {
            if (j == i) continue;
            // strict < keeps ties on the lowest index
            if (dist[i * total + j] < best_d) {
                best_d = dist[i * total + j];
                best = j;
            }
        }
        const bool i_gen = i < n, nn_gen = best < n;
        if (i_gen == nn_gen) ++correct;
    }
    return double(correct) / double(total);
}

double mmd(const std::vector<EvalCloud>& gen, const std::vector<EvalCloud>& ref,
           PairDistance d) {
    if (gen.empty() || ref.empty()) throw Error("mmd: empty set");
    double total = 0;
    for (const auto& y : ref) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& c : gen) best = std::min(best, pair_distance(c, y, d));
        total += best;
    }
    return total / double(ref.size());
}

double cov(const std::vector<EvalCloud>& gen, const std::vector<EvalCloud>& ref,
           PairDistance d) {
    if (gen.empty() || ref.empty()) throw Error("cov: empty set");
    std::set<std::size_t> hit;
    for (const auto& c : gen) {
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t y = 0; y < ref.size(); ++y) {
            const double dd = pair_distance(c, ref[y], d);
            if (dd < best_d) {
                best_d = dd;
                best = y;
            }
        }
        hit.insert(best);
    }
    return double(hit.size()) / double(ref.size());
}

double amd(const std::vector<std::vector<EvalCloud>>& groups,
           const std::vector<EvalCloud>& refs) {
    if (groups.size() != refs.size()) throw Error("amd: one group per reference required");
    if (groups.empty()) throw Error("amd: empty input");
    double total = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < groups.size(); ++i) {
        if (groups[i].empty()) throw Error("amd: empty completion group");
        for (const auto& c : groups[i]) {
            total += chamfer(c, refs[i]);
            ++count;
        }
    }
    return total / double(count);
}

double tmd(const std::vector<std::vector<EvalCloud>>& groups) {
    if (groups.empty()) throw Error("tmd: empty input");
    double total = 0;
    std::size_t count = 0;
    for (const auto& g : groups) {
        const std::size_t k = g.size();
        if (k < 2) throw Error("tmd: each group needs k >= 2 completions");
        for (std::size_t j = 0; j < k; ++j) {
            double inner = 0;
            for (std::size_t l = 0; l < k; ++l) {
                if (l == j) continue;
                inner += chamfer(g[j], g[l]);
            }
            total += inner / double(k - 1);
            ++count;
        }
    }
    return total / double(count);
}

EvalCloud mesh_to_evalcloud(const TriangleMesh& mesh, std::size_t n, Rng& rng) {
    if (mesh.empty()) throw Error("mesh_to_evalcloud: empty mesh");
    EvalCloud out;
    out.points.reserve(n);
    for (const auto& s : sample_mesh_surface(mesh, n, rng)) out.points.push_back(s.point);
    return out;
}

}  // namespace nsd
