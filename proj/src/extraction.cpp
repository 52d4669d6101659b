#include "nsd/extraction.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <thread>
#include <unordered_map>

#include "nsd/io.hpp"

namespace nsd {

namespace fs = std::filesystem;

double SdfGrid::interpolate(const Vec3& p) const {
    const double h = spacing();
    auto to_grid = [&](double x) {
        return std::clamp((x + 1.0) / h, 0.0, double(res - 1));
    };
    const double gx = to_grid(p.x), gy = to_grid(p.y), gz = to_grid(p.z);
    const std::size_t x0 = std::min<std::size_t>(res - 2, std::size_t(gx));
    const std::size_t y0 = std::min<std::size_t>(res - 2, std::size_t(gy));
    const std::size_t z0 = std::min<std::size_t>(res - 2, std::size_t(gz));
    const double fx = gx - double(x0), fy = gy - double(y0), fz = gz - double(z0);
    double acc = 0;
    for (int dz = 0; dz < 2; ++dz) {
        for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
                const double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
                acc += w * at(x0 + dx, y0 + dy, z0 + dz);
            }
        }
    }
    return acc;
}

void SdfGrid::save(const fs::path& path) const {
    save_nsdf(path, {res, res, res}, values);
}

SdfGrid SdfGrid::load(const fs::path& path) {
    LoadedArray a = load_nsdf(path);
    if (a.shape.size() != 3 || a.shape[0] != a.shape[1] || a.shape[1] != a.shape[2]) {
        throw Error("SdfGrid::load: expected cubic (R,R,R) array");
    }
    SdfGrid g;
    g.res = a.shape[0];
    g.values = std::move(a.data);
    return g;
}

BatchField batch_field_of(const NeuSdf& ns) {
    return [ns](const std::vector<double>& pts) {
        NoGradGuard ng;
        const std::size_t n = pts.size() / 3;
        Tensor t = Tensor::from_data({n, 3}, pts);
        Tensor phi = query_sdf(ns, t);
        return phi.data();
    };
}

SdfGrid field_to_grid(const BatchField& field, std::size_t res, std::size_t workers,
                      std::size_t max_bytes) {
    if (res < 8) throw Error("field_to_grid: resolution must be >= 8");
    if (res > 512) throw Error("field_to_grid: resolution above the 512 limit");
    const std::size_t total = res * res * res;
    if (total * sizeof(double) > max_bytes) {
        throw Error("field_to_grid: grid of " + std::to_string(total) +
                    " cells exceeds the memory budget");
    }
    SdfGrid grid;
    grid.res = res;
    grid.values.resize(total);
    const double h = grid.spacing();

    auto eval_slab = [&](std::size_t iz) {
        std::vector<double> pts(res * res * 3);
        const double z = -1.0 + h * double(iz);
        std::size_t k = 0;
        for (std::size_t iy = 0; iy < res; ++iy) {
            const double y = -1.0 + h * double(iy);
            for (std::size_t ix = 0; ix < res; ++ix) {
                pts[k++] = -1.0 + h * double(ix);
                pts[k++] = y;
                pts[k++] = z;
            }
        }
        std::vector<double> vals = field(pts);
        if (vals.size() != res * res) throw Error("field_to_grid: bad batch result size");
        std::copy(vals.begin(), vals.end(), grid.values.begin() + iz * res * res);
    };

    if (workers <= 1) {
        for (std::size_t iz = 0; iz < res; ++iz) eval_slab(iz);
    } else {
        std::vector<std::thread> pool;
        std::atomic<std::size_t> next{0};
        std::exception_ptr err;
        std::mutex err_mu;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&]() {
                for (;;) {
                    const std::size_t iz = next.fetch_add(1);
                    if (iz >= res) return;
                    try {
                        eval_slab(iz);
                    } catch (...) {
                        std::lock_guard<std::mutex> lk(err_mu);
                        if (!err) err = std::current_exception();
                        return;
                    }
                }
            });
        }
        for (auto& t : pool) t.join();
        if (err) std::rethrow_exception(err);
    }
    check_finite(grid.values, "sdf grid");
    return grid;
}

SdfGrid triplane_to_grid(const NeuSdf& ns, std::size_t res, std::size_t workers,
                         std::size_t max_bytes) {
    return field_to_grid(batch_field_of(ns), res, workers, max_bytes);
}

namespace {

// Cube corner offsets in the standard table convention.
constexpr int kCorner[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                               {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
// Cell edge -> (corner a, corner b).
constexpr int kEdgeCorner[12][2] = {{0, 1}, {1, 2}, {3, 2}, {0, 3}, {4, 5}, {5, 6},
                                    {7, 6}, {4, 7}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};

}  // namespace

TriangleMesh marching_cubes(const SdfGrid& grid, double iso) {
    const std::size_t R = grid.res;
    if (R < 2) throw Error("marching_cubes: grid too small");
    TriangleMesh mesh;
    // welded vertices: global edge key = (lattice vertex id)*3 + axis
    std::unordered_map<std::uint64_t, std::uint32_t> edge_vertex;
    edge_vertex.reserve(1 << 16);

    auto vertex_on_edge = [&](std::size_t ax, std::size_t ay, std::size_t az, int axis) {
        const std::uint64_t vid = (std::uint64_t(az) * R + ay) * R + ax;
        const std::uint64_t key = vid * 3 + std::uint64_t(axis);
        auto it = edge_vertex.find(key);
        if (it != edge_vertex.end()) return it->second;
        std::size_t bx = ax + (axis == 0), by = ay + (axis == 1), bz = az + (axis == 2);
        const double va = grid.at(ax, ay, az), vb = grid.at(bx, by, bz);
        double t = 0.5;
        if (std::fabs(vb - va) > 1e-300) t = std::clamp((iso - va) / (vb - va), 0.0, 1.0);
        const Vec3 pa = grid.vertex(ax, ay, az), pb = grid.vertex(bx, by, bz);
        const std::uint32_t idx = std::uint32_t(mesh.vertices.size());
        mesh.vertices.push_back(pa + (pb - pa) * t);
        edge_vertex.emplace(key, idx);
        return idx;
    };

    for (std::size_t z = 0; z + 1 < R; ++z) {
        for (std::size_t y = 0; y + 1 < R; ++y) {
            for (std::size_t x = 0; x + 1 < R; ++x) {
                int cube = 0;
                double v[8];
                for (int c = 0; c < 8; ++c) {
                    v[c] = grid.at(x + kCorner[c][0], y + kCorner[c][1], z + kCorner[c][2]);
                    if (v[c] < iso) cube |= 1 << c;
                }
                if (kMcEdgeTable[cube] == 0) continue;
                std::uint32_t ev[12];
                for (int e = 0; e < 12; ++e) {
                    if (!(kMcEdgeTable[cube] & (1 << e))) continue;
                    // canonical edge anchor: the lower corner of the pair
                    const int ca = kEdgeCorner[e][0], cb = kEdgeCorner[e][1];
                    int axis = 0;
                    for (int d = 0; d < 3; ++d) {
                        if (kCorner[ca][d] != kCorner[cb][d]) axis = d;
                    }
                    const bool fwd = kCorner[ca][axis] < kCorner[cb][axis];
                    const int* base = fwd ? kCorner[ca] : kCorner[cb];
                    ev[e] = vertex_on_edge(x + base[0], y + base[1], z + base[2], axis);
                }
                for (int t = 0; kMcTriTable[cube][t] != -1; t += 3) {
                    const std::uint32_t a = ev[kMcTriTable[cube][t]];
                    const std::uint32_t b = ev[kMcTriTable[cube][t + 1]];
                    const std::uint32_t c = ev[kMcTriTable[cube][t + 2]];
                    if (a == b || b == c || a == c) continue;  // degenerate (iso hits corner)
                    // table order winds toward the negative side; flip so
                    // normals face positive SDF
                    mesh.faces.push_back({a, c, b});
                }
            }
        }
    }
    return mesh;
}

}  // namespace nsd
