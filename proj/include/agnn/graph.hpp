#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "json.hpp"

#include "agnn/autodiff.hpp"
#include "agnn/dataio.hpp"

namespace agnn::graph {

using data::NodeId;
using ad::Tensor;

struct CosineDistance {
    double value = 1.0;
    bool degenerate = false;  // one side was the zero vector; value is the neutral 1
};

/// 1 - cos(w, v), clamped to [0, 2].
CosineDistance cosine_distance(std::span<const double> w, std::span<const double> v);

/// Pairwise cosine distances between the rows of a matrix. A node whose row is
/// all zero has no usable vector; pairs touching it are flagged unavailable
/// and hold the neutral distance 1.
struct DistanceMatrix {
    Tensor distance;
    std::vector<char> has_vector;

    std::size_t size() const { return has_vector.size(); }
    bool available(std::size_t i, std::size_t j) const { return has_vector[i] && has_vector[j]; }
};

enum class Side { User, Item };

/// Raw rating rows for one side: users x items for Side::User, items x users
/// for Side::Item. Only the given ratings are used, so pass training data.
Tensor rating_rows(std::span<const data::Rating> ratings, Side side, std::size_t users, std::size_t items);

DistanceMatrix preference_proximity_matrix(const Tensor& rating_rows);

/// Like the preference matrix, but every node counts as available: a zero
/// attribute row simply sits at the neutral distance 1 from everyone.
DistanceMatrix attribute_proximity_matrix(const Tensor& multihot_rows);

/// Combined similarity in [0, 2]: each distance matrix is min-max normalised
/// over its available off-diagonal pairs and turned into a similarity
/// (1 - d_norm); the two are summed. Pairs without a preference term use twice
/// the attribute similarity.
struct ProximityMatrix {
    Tensor similarity;
    std::vector<char> has_preference;

    std::size_t size() const { return has_preference.size(); }
    bool preference_available(std::size_t i, std::size_t j) const { return has_preference[i] && has_preference[j]; }
};

ProximityMatrix combine_proximities(const DistanceMatrix& preference, const DistanceMatrix& attribute);

struct PoolEntry {
    NodeId neighbor = 0;
    double weight = 0.0;

    friend bool operator==(const PoolEntry&, const PoolEntry&) = default;
};

inline constexpr double kMinPoolWeight = 1e-9;

/// ceil(percent/100 * (n - 1)), the number of candidates kept per node.
std::size_t pool_size(std::size_t node_count, double percent);

/// Candidate pools plus the neighbors drawn for the current epoch.
struct AttributeGraph {
    double pool_percent = 5.0;
    std::vector<std::vector<PoolEntry>> pools;
    std::vector<std::vector<NodeId>> sampled;

    std::size_t node_count() const { return pools.size(); }
};

/// Keeps, for each node, the highest-similarity other nodes (ties broken by
/// ascending id). Pool weights are the similarities, floored at kMinPoolWeight.
AttributeGraph build_candidate_pools(const ProximityMatrix& prox, double percent);

/// Draws min(k, pool size) distinct neighbors per node, without replacement,
/// with probability proportional to pool weight. Replaces graph.sampled.
void sample_neighbors(AttributeGraph& graph, std::size_t k, std::uint64_t seed);

/// Full construction from training ratings and attribute rows.
AttributeGraph build_attribute_graph(const Tensor& rating_rows, const Tensor& multihot_rows, double percent);

nlohmann::json graph_to_json(const AttributeGraph& g);
AttributeGraph graph_from_json(const nlohmann::json& j);
void write_graph(const std::filesystem::path& path, const AttributeGraph& g);
AttributeGraph read_graph(const std::filesystem::path& path);

}  // namespace agnn::graph
