#pragma once

#include <string>
#include <vector>

#include "nsd/mesh.hpp"
#include "nsd/rng.hpp"

namespace nsd {

struct EvalCloud {
    std::vector<Vec3> points;
    std::string tag;  // provenance (mesh/shape id)
};

// Squared-L2, mean reduction, symmetric sum.
double chamfer(const EvalCloud& a, const EvalCloud& b);

// Exact assignment cost / n with unsquared L2; |a| == |b| <= 512.
double emd(const EvalCloud& a, const EvalCloud& b);

// Exact rectangular-free Hungarian (Jonker-Volgenant style shortest
// augmenting paths). cost is row-major n x n; returns the optimal total.
double solve_assignment(const std::vector<double>& cost, std::size_t n,
                        std::vector<int>* row_to_col = nullptr);

// precision/recall at threshold tau (unsquared distances), F = 2PR/(P+R).
double f_score(const EvalCloud& prediction, const EvalCloud& reference, double tau);

enum class PairDistance { CD, EMD };

// Leave-one-out 1-NN classification accuracy over gen+ref; equal distances
// resolve to the lowest combined index (gen block first).
double one_nna(const std::vector<EvalCloud>& gen, const std::vector<EvalCloud>& ref,
               PairDistance d);

double mmd(const std::vector<EvalCloud>& gen, const std::vector<EvalCloud>& ref,
           PairDistance d);

// Coverage: fraction of references that are some generated cloud's nearest.
double cov(const std::vector<EvalCloud>& gen, const std::vector<EvalCloud>& ref,
           PairDistance d);

// groups[i] holds the k completions of reference i.
double amd(const std::vector<std::vector<EvalCloud>>& groups,
           const std::vector<EvalCloud>& refs);
double tmd(const std::vector<std::vector<EvalCloud>>& groups);

// Area-weighted surface sampling (evaluation protocol size is 2048).
EvalCloud mesh_to_evalcloud(const TriangleMesh& mesh, std::size_t n, Rng& rng);

inline constexpr std::size_t kEvalCloudPoints = 2048;
inline constexpr std::size_t kEmdMaxPoints = 512;

}  // namespace nsd
