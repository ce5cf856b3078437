#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "agnn/autodiff.hpp"
#include "agnn/dataio.hpp"
#include "agnn/graph.hpp"
#include "agnn/optim.hpp"
#include "agnn/rng.hpp"

namespace agnn::model {

using ad::ParameterStore;
using ad::Tensor;
using ad::Value;
using data::NodeId;
using graph::Side;

// Building blocks. Every op is batched: one row per node.

/// Pairwise interactions sum_{i<j} a_i v_i * a_j v_j, via the square-of-sum identity.
Value bi_interaction(const Value& a, const Value& v);
Value linear_combination(const Value& a, const Value& v);

struct InteractionWeights {
    Value w1, w0, b;  // D x D, D x D, 1 x D
};

Value attribute_embed(const Value& a, const Value& v, const InteractionWeights& w, double slope);

/// W [m; x] + b with W stored as (2D) x D.
Value fuse_node_embedding(const Value& m, const Value& x, const Value& w, const Value& b);

struct Neighborhood {
    Value embeddings;                    // all neighbors stacked, grouped by target
    std::vector<Eigen::Index> offsets;   // targets + 1 entries
    std::vector<Eigen::Index> owner;     // target row of each neighbor row
};

Neighborhood make_neighborhood(const Value& embeddings, const std::vector<std::vector<Eigen::Index>>& rows);

struct GateOutput {
    Value value;
    Value gate;
};

GateOutput gated_aggregate(const Value& p, const Neighborhood& nb, const Value& w, const Value& b);
GateOutput gated_filter(const Value& p, const Neighborhood& nb, const Value& w, const Value& b);

struct GnnWeights {
    Value agg_w, agg_b, filter_w, filter_b;
};

/// LeakyReLU(p filtered + gated neighbor mean). A node without neighbors gets LeakyReLU(p).
/// With mean_aggregation the gates are skipped: LeakyReLU(p + neighbor mean).
Value gated_gnn_forward(const Value& p, const Neighborhood& nb, const GnnWeights& w, double slope,
                        bool mean_aggregation = false);

struct EncoderWeights {
    Value w_h, b_h, w_mu, b_mu, w_logvar, b_logvar;
};

struct DecoderWeights {
    Value w_h, b_h, w_out, b_out;
};

struct Encoded {
    Value z, mu, logvar, sigma;
};

/// eps is a rows x latent constant; zeros give z = mu.
Encoded evae_encode(const Value& x, const Tensor& eps, const EncoderWeights& w, double slope);
Value evae_decode(const Value& z, const DecoderWeights& w, double slope);

/// Closed-form KL(N(mu, sigma^2) || N(0, I)) summed over rows.
Value kl_divergence(const Value& mu, const Value& logvar);

/// KL + 1/2 |x' - x|^2 + sum over rows of |x' - m|_2.
Value evae_loss(const Value& x, const Value& x_rec, const Value& mu, const Value& logvar, const Value& m);

struct MlpWeights {
    Value w_h, b_h, w_out, b_out;
};

/// MLP([p; q]) + <p, q> + b_u + b_i + mu, one row per pair.
Value predict_rating(const Value& p, const Value& q, const MlpWeights& mlp, const Value& user_bias,
                     const Value& item_bias, const Value& global_bias, double slope);

Value prediction_loss(const Value& predicted, const Tensor& ratings);
Value total_loss(const Value& pred_loss, const Value& recon_loss);

// The assembled network.

struct ModelConfig {
    int dim = 30;
    int latent_dim = 30;
    double slope = 0.01;
    double init_scale = 0.05;
    bool disable_evae = false;
    bool mean_aggregation = false;
};

nlohmann::json config_to_json(const ModelConfig& c);
ModelConfig config_from_json(const nlohmann::json& j);

struct SideData {
    std::size_t count = 0;
    data::MultiHotMatrix attributes;
    std::vector<char> cold;  // 1 for nodes without training ratings
};

struct BatchResult {
    Value prediction;  // batch x 1, unclamped
    Value recon;       // scalar; constant 0 when not requested or disabled
};

class Model {
public:
    Model(ModelConfig config, SideData users, SideData items, std::uint64_t seed, double global_bias_init = 0.0);

    const ModelConfig& config() const { return config_; }
    ParameterStore& params() { return params_; }
    const ParameterStore& params() const { return params_; }
    const SideData& side(Side s) const { return s == Side::User ? users_ : items_; }
    bool is_cold(Side s, NodeId n) const { return side(s).cold[static_cast<std::size_t>(n)] != 0; }

    /// Predictions for (users[b], items[b]). Neighbors come from each graph's
    /// current sample. noise == nullptr means eps = 0 everywhere; the
    /// reconstruction loss is built only when with_recon is set.
    BatchResult forward(std::span<const NodeId> users, std::span<const NodeId> items, const graph::AttributeGraph& user_graph,
                        const graph::AttributeGraph& item_graph, Rng* noise, bool with_recon) const;

    /// x' = decode(encode(x, eps = 0)) for cold nodes. Throws for a warm node.
    Value substitute_cold_preference(Side s, std::span<const NodeId> nodes, const Value& x) const;

    /// Final embeddings of the given targets (p~ or q~), for inspection.
    Value node_embeddings(Side s, std::span<const NodeId> targets, const graph::AttributeGraph& g) const;

private:
    struct SideParams {
        Value pref, attr_emb, bias;
        InteractionWeights fc;
        Value fuse_w, fuse_b;
        GnnWeights gnn;
        EncoderWeights enc;
        DecoderWeights dec;
    };

    SideParams side_params(Side s) const;
    Value attribute_rows(Side s, std::span<const NodeId> nodes) const;
    Value final_embeddings(Side s, std::span<const NodeId> targets, const graph::AttributeGraph& g) const;
    Value bias_rows(Side s, std::span<const NodeId> nodes) const;
    Value recon_loss(Side s, std::span<const NodeId> targets, Rng* noise) const;

    ModelConfig config_;
    SideData users_, items_;
    ParameterStore params_;
};

/// Checkpoint: model config, free-form metadata and every parameter by name
/// with its shape. Doubles round-trip exactly.
void write_checkpoint(const std::filesystem::path& path, const Model& model, const nlohmann::json& meta);

struct Checkpoint {
    ModelConfig config;
    nlohmann::json meta;
    std::vector<std::pair<std::string, Tensor>> params;
};

Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Copies checkpoint parameters into the model; names and shapes must match.
void load_parameters(Model& model, const Checkpoint& ckpt);

}  // namespace agnn::model
