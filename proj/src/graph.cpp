#include "agnn/graph.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "agnn/rng.hpp"

namespace agnn::graph {

CosineDistance cosine_distance(std::span<const double> w, std::span<const double> v) {
    if (w.size() != v.size()) throw std::invalid_argument("cosine_distance: length mismatch");
    double dot = 0.0, nw = 0.0, nv = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        dot += w[i] * v[i];
        nw += w[i] * w[i];
        nv += v[i] * v[i];
    }
    if (nw == 0.0 || nv == 0.0) return {1.0, true};
    const double d = 1.0 - dot / (std::sqrt(nw) * std::sqrt(nv));
    return {std::clamp(d, 0.0, 2.0), false};
}

Tensor rating_rows(std::span<const data::Rating> ratings, Side side, std::size_t users, std::size_t items) {
    const bool by_user = side == Side::User;
    Tensor rows = Tensor::Zero(static_cast<Eigen::Index>(by_user ? users : items),
                               static_cast<Eigen::Index>(by_user ? items : users));
    for (const auto& r : ratings) {
        if (by_user)
            rows(r.user, r.item) = r.value;
        else
            rows(r.item, r.user) = r.value;
    }
    return rows;
}

namespace {

DistanceMatrix pairwise_cosine(const Tensor& rows, bool flag_zero_rows) {
    const Eigen::Index n = rows.rows();
    DistanceMatrix m;
    m.has_vector.assign(static_cast<std::size_t>(n), 1);
    const Eigen::VectorXd norms = rows.rowwise().norm();
    Tensor gram = rows * rows.transpose();
    m.distance.resize(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (norms(i) == 0.0 && flag_zero_rows) m.has_vector[static_cast<std::size_t>(i)] = 0;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (norms(i) == 0.0 || norms(j) == 0.0) {
                m.distance(i, j) = 1.0;
            } else {
                const double d = 1.0 - gram(i, j) / (norms(i) * norms(j));
                m.distance(i, j) = std::clamp(d, 0.0, 2.0);
            }
        }
        m.distance(i, i) = 0.0;
    }
    return m;
}

struct Range {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();

    double normalise(double d) const { return hi > lo ? (d - lo) / (hi - lo) : 0.0; }
};

Range available_range(const DistanceMatrix& m) {
    Range r;
    const std::size_t n = m.size();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j && m.available(i, j)) {
                const double d = m.distance(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
                r.lo = std::min(r.lo, d);
                r.hi = std::max(r.hi, d);
            }
    return r;
}

}  // namespace

DistanceMatrix preference_proximity_matrix(const Tensor& rows) { return pairwise_cosine(rows, true); }

DistanceMatrix attribute_proximity_matrix(const Tensor& rows) { return pairwise_cosine(rows, false); }

ProximityMatrix combine_proximities(const DistanceMatrix& pref, const DistanceMatrix& attr) {
    if (pref.size() != attr.size()) throw std::invalid_argument("combine_proximities: size mismatch");
    const Range pr = available_range(pref), ar = available_range(attr);
    const std::size_t n = attr.size();
    ProximityMatrix out;
    out.has_preference = pref.has_vector;
    out.similarity = Tensor::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            const auto ii = static_cast<Eigen::Index>(i), jj = static_cast<Eigen::Index>(j);
            const double attr_sim = 1.0 - ar.normalise(attr.distance(ii, jj));
            out.similarity(ii, jj) = pref.available(i, j) ? (1.0 - pr.normalise(pref.distance(ii, jj))) + attr_sim
                                                           : 2.0 * attr_sim;
        }
    }
    return out;
}

std::size_t pool_size(std::size_t node_count, double percent) {
    if (node_count < 2) return 0;
    const double x = percent * static_cast<double>(node_count - 1) / 100.0;
    const double r = std::round(x);
    const double size = std::abs(x - r) < 1e-9 ? r : std::ceil(x);
    return std::min(static_cast<std::size_t>(size), node_count - 1);
}

AttributeGraph build_candidate_pools(const ProximityMatrix& prox, double percent) {
    if (!(percent > 0.0 && percent <= 100.0)) throw std::invalid_argument("build_candidate_pools: percent must be in (0, 100]");
    const std::size_t n = prox.size();
    if (n < 2) throw std::invalid_argument("build_candidate_pools: need at least two nodes");
    const std::size_t keep = pool_size(n, percent);

    AttributeGraph g;
    g.pool_percent = percent;
    g.pools.resize(n);
    std::vector<NodeId> cand;
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = prox.similarity.row(static_cast<Eigen::Index>(i));
        cand.clear();
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) cand.push_back(static_cast<NodeId>(j));
        std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(keep), cand.end(),
                          [&](NodeId a, NodeId b) {
                              if (row(a) != row(b)) return row(a) > row(b);
                              return a < b;
                          });
        auto& pool = g.pools[i];
        pool.reserve(keep);
        for (std::size_t k = 0; k < keep; ++k) pool.push_back({cand[k], std::max(row(cand[k]), kMinPoolWeight)});
    }
    return g;
}

void sample_neighbors(AttributeGraph& graph, std::size_t k, std::uint64_t seed) {
    if (k < 1) throw std::invalid_argument("sample_neighbors: k must be at least 1");
    Rng rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    graph.sampled.assign(graph.node_count(), {});
    std::vector<double> weights;
    std::vector<NodeId> ids;
    for (std::size_t n = 0; n < graph.node_count(); ++n) {
        const auto& pool = graph.pools[n];
        auto& out = graph.sampled[n];
        if (k >= pool.size()) {
            for (const auto& e : pool) out.push_back(e.neighbor);
            continue;
        }
        weights.clear();
        ids.clear();
        for (const auto& e : pool) {
            weights.push_back(e.weight);
            ids.push_back(e.neighbor);
        }
        double total = std::accumulate(weights.begin(), weights.end(), 0.0);
        for (std::size_t draw = 0; draw < k; ++draw) {
            double target = unit(rng) * total;
            std::size_t pick = 0;
            for (; pick + 1 < weights.size(); ++pick) {
                if (target < weights[pick]) break;
                target -= weights[pick];
            }
            out.push_back(ids[pick]);
            total -= weights[pick];
            weights.erase(weights.begin() + static_cast<std::ptrdiff_t>(pick));
            ids.erase(ids.begin() + static_cast<std::ptrdiff_t>(pick));
        }
    }
}

AttributeGraph build_attribute_graph(const Tensor& rating_rows, const Tensor& multihot_rows, double percent) {
    if (rating_rows.rows() != multihot_rows.rows())
        throw std::invalid_argument("build_attribute_graph: rating rows and attribute rows disagree on node count");
    return build_candidate_pools(
        combine_proximities(preference_proximity_matrix(rating_rows), attribute_proximity_matrix(multihot_rows)), percent);
}

nlohmann::json graph_to_json(const AttributeGraph& g) {
    auto pools = nlohmann::json::array();
    for (std::size_t n = 0; n < g.pools.size(); ++n) {
        auto entries = nlohmann::json::array();
        for (const auto& e : g.pools[n]) entries.push_back({e.neighbor, e.weight});
        pools.push_back({{"node", n}, {"pool", std::move(entries)}});
    }
    return {{"pool_percent", g.pool_percent}, {"node_count", g.pools.size()}, {"pools", std::move(pools)}};
}

AttributeGraph graph_from_json(const nlohmann::json& j) {
    AttributeGraph g;
    try {
        g.pool_percent = j.at("pool_percent").get<double>();
        const auto n = j.at("node_count").get<std::size_t>();
        g.pools.resize(n);
        for (const auto& p : j.at("pools")) {
            const auto node = p.at("node").get<std::size_t>();
            if (node >= n) throw std::out_of_range("graph node id out of range");
            for (const auto& e : p.at("pool")) {
                PoolEntry pe{e.at(0).get<NodeId>(), e.at(1).get<double>()};
                if (pe.neighbor < 0 || static_cast<std::size_t>(pe.neighbor) >= n)
                    throw std::out_of_range("graph neighbor id out of range");
                g.pools[node].push_back(pe);
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw data::DataError(std::string("malformed graph file: ") + e.what());
    } catch (const std::out_of_range& e) {
        throw data::DataError(std::string("malformed graph file: ") + e.what());
    }
    return g;
}

void write_graph(const std::filesystem::path& path, const AttributeGraph& g) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw data::DataError("cannot write graph file " + path.string());
    out << graph_to_json(g).dump() << '\n';
}

AttributeGraph read_graph(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data::DataError("cannot open graph file " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw data::DataError("malformed graph file " + path.string() + ": " + e.what());
    }
    return graph_from_json(j);
}

}  // namespace agnn::graph
