#include "agnn/model.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <stdexcept>

namespace agnn::model {

using ad::ShapeError;

namespace {

void check_width(const char* op, const Value& a, const Value& v) {
    if (a.cols() != v.rows())
        throw ShapeError(op, "attribute width " + std::to_string(a.cols()) + " vs table " + ad::shape_string(v.data()));
}

Value affine(const Value& x, const Value& w, const Value& b) { return ad::add_row(ad::matmul(x, w), b); }

std::vector<Eigen::Index> to_index(std::span<const NodeId> ids) { return {ids.begin(), ids.end()}; }

}  // namespace

Value bi_interaction(const Value& a, const Value& v) {
    check_width("bi_interaction", a, v);
    Value sum_sq = ad::square(ad::matmul(a, v));
    Value sq_sum = ad::matmul(ad::square(a), ad::square(v));
    return ad::scale(sum_sq - sq_sum, 0.5);
}

Value linear_combination(const Value& a, const Value& v) {
    check_width("linear_combination", a, v);
    return ad::matmul(a, v);
}

Value attribute_embed(const Value& a, const Value& v, const InteractionWeights& w, double slope) {
    Value pre = ad::matmul(bi_interaction(a, v), w.w1) + ad::matmul(linear_combination(a, v), w.w0);
    return ad::leaky_relu(ad::add_row(pre, w.b), slope);
}

Value fuse_node_embedding(const Value& m, const Value& x, const Value& w, const Value& b) {
    return affine(ad::concat_cols(m, x), w, b);
}

Neighborhood make_neighborhood(const Value& embeddings, const std::vector<std::vector<Eigen::Index>>& rows) {
    Neighborhood nb;
    std::vector<Eigen::Index> flat;
    nb.offsets.push_back(0);
    for (std::size_t t = 0; t < rows.size(); ++t) {
        for (auto r : rows[t]) {
            flat.push_back(r);
            nb.owner.push_back(static_cast<Eigen::Index>(t));
        }
        nb.offsets.push_back(static_cast<Eigen::Index>(flat.size()));
    }
    nb.embeddings = ad::gather_rows(embeddings, flat);
    return nb;
}

GateOutput gated_aggregate(const Value& p, const Neighborhood& nb, const Value& w, const Value& b) {
    if (static_cast<Eigen::Index>(nb.offsets.size()) != p.rows() + 1)
        throw ShapeError("gated_aggregate", "neighborhood does not match targets");
    if (nb.embeddings.rows() == 0) return {ad::zeros(p.rows(), p.cols()), ad::zeros(0, p.cols())};
    Value target = ad::gather_rows(p, nb.owner);
    Value gate = ad::sigmoid(affine(ad::concat_cols(target, nb.embeddings), w, b));
    return {ad::segment_mean(nb.embeddings * gate, nb.offsets), gate};
}

GateOutput gated_filter(const Value& p, const Neighborhood& nb, const Value& w, const Value& b) {
    if (static_cast<Eigen::Index>(nb.offsets.size()) != p.rows() + 1)
        throw ShapeError("gated_filter", "neighborhood does not match targets");
    if (nb.embeddings.rows() == 0) return {p, ad::zeros(p.rows(), p.cols())};
    Value mean = ad::segment_mean(nb.embeddings, nb.offsets);
    Value gate = ad::sigmoid(affine(ad::concat_cols(p, mean), w, b));
    Tensor mask(p.rows(), p.cols());
    for (Eigen::Index t = 0; t < p.rows(); ++t)
        mask.row(t).setConstant(nb.offsets[t + 1] > nb.offsets[t] ? 1.0 : 0.0);
    Value keep = ad::add_scalar(ad::scale(gate * ad::constant(std::move(mask)), -1.0), 1.0);
    return {p * keep, gate};
}

Value gated_gnn_forward(const Value& p, const Neighborhood& nb, const GnnWeights& w, double slope,
                        bool mean_aggregation) {
    if (mean_aggregation) {
        if (nb.embeddings.rows() == 0) return ad::leaky_relu(p, slope);
        return ad::leaky_relu(p + ad::segment_mean(nb.embeddings, nb.offsets), slope);
    }
    GateOutput kept = gated_filter(p, nb, w.filter_w, w.filter_b);
    GateOutput pulled = gated_aggregate(p, nb, w.agg_w, w.agg_b);
    return ad::leaky_relu(kept.value + pulled.value, slope);
}

Encoded evae_encode(const Value& x, const Tensor& eps, const EncoderWeights& w, double slope) {
    Value h = ad::leaky_relu(affine(x, w.w_h, w.b_h), slope);
    Encoded e;
    e.mu = affine(h, w.w_mu, w.b_mu);
    e.logvar = affine(h, w.w_logvar, w.b_logvar);
    if (eps.rows() != e.mu.rows() || eps.cols() != e.mu.cols())
        throw ShapeError("evae_encode", eps, e.mu.data());
    e.sigma = ad::exp(ad::scale(e.logvar, 0.5));
    e.z = e.mu + ad::constant(eps) * e.sigma;
    return e;
}

Value evae_decode(const Value& z, const DecoderWeights& w, double slope) {
    return affine(ad::leaky_relu(affine(z, w.w_h, w.b_h), slope), w.w_out, w.b_out);
}

Value kl_divergence(const Value& mu, const Value& logvar) {
    Value terms = ad::square(mu) + ad::exp(logvar) - logvar;
    return ad::scale(ad::add_scalar(ad::sum(terms), -static_cast<double>(mu.data().size())), 0.5);
}

Value evae_loss(const Value& x, const Value& x_rec, const Value& mu, const Value& logvar, const Value& m) {
    Value recon = ad::scale(ad::sum(ad::square(x_rec - x)), 0.5);
    Value approx = ad::sum(ad::row_l2_norm(x_rec - m));
    return kl_divergence(mu, logvar) + recon + approx;
}

Value predict_rating(const Value& p, const Value& q, const MlpWeights& mlp, const Value& user_bias,
                     const Value& item_bias, const Value& global_bias, double slope) {
    Value hidden = ad::leaky_relu(affine(ad::concat_cols(p, q), mlp.w_h, mlp.b_h), slope);
    Value out = affine(hidden, mlp.w_out, mlp.b_out) + ad::row_dot(p, q) + user_bias + item_bias;
    return ad::add_row(out, global_bias);
}

Value prediction_loss(const Value& predicted, const Tensor& ratings) {
    if (ratings.size() == 0) throw std::invalid_argument("prediction_loss: empty batch");
    if (predicted.rows() != ratings.rows() || predicted.cols() != ratings.cols())
        throw ShapeError("prediction_loss", predicted.data(), ratings);
    return ad::sum(ad::square(predicted - ad::constant(ratings)));
}

Value total_loss(const Value& pred_loss, const Value& recon_loss) { return pred_loss + recon_loss; }

nlohmann::json config_to_json(const ModelConfig& c) {
    return {{"dim", c.dim},
            {"latent_dim", c.latent_dim},
            {"slope", c.slope},
            {"init_scale", c.init_scale},
            {"disable_evae", c.disable_evae},
            {"mean_aggregation", c.mean_aggregation}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.dim = j.at("dim").get<int>();
    c.latent_dim = j.at("latent_dim").get<int>();
    c.slope = j.at("slope").get<double>();
    c.init_scale = j.at("init_scale").get<double>();
    c.disable_evae = j.at("disable_evae").get<bool>();
    c.mean_aggregation = j.at("mean_aggregation").get<bool>();
    return c;
}

Model::Model(ModelConfig config, SideData users, SideData items, std::uint64_t seed, double global_bias_init)
    : config_(config), users_(std::move(users)), items_(std::move(items)) {
    if (config_.dim < 1 || config_.latent_dim < 1) throw std::invalid_argument("Model: dimensions must be positive");
    for (const SideData* s : {&users_, &items_}) {
        if (s->attributes.rows.size() != s->count || s->cold.size() != s->count)
            throw std::invalid_argument("Model: side data sizes disagree with node count");
    }
    Rng rng = make_rng(seed, "init");
    std::uniform_real_distribution<double> u(-config_.init_scale, config_.init_scale);
    const Eigen::Index d = config_.dim, dz = config_.latent_dim;
    auto weight = [&](Eigen::Index r, Eigen::Index c) {
        Tensor t(r, c);
        for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = u(rng);
        return t;
    };
    auto zero = [](Eigen::Index r, Eigen::Index c) { return Tensor::Zero(r, c).eval(); };

    for (Side s : {Side::User, Side::Item}) {
        const SideData& sd = side(s);
        const std::string pre = s == Side::User ? "user." : "item.";
        const auto n = static_cast<Eigen::Index>(sd.count);
        params_.add(pre + "pref", weight(n, d));
        params_.add(pre + "attr_emb", weight(static_cast<Eigen::Index>(sd.attributes.width), d));
        params_.add(pre + "bias", zero(n, 1));
        params_.add(pre + "fc.w1", weight(d, d));
        params_.add(pre + "fc.w0", weight(d, d));
        params_.add(pre + "fc.b", zero(1, d));
        params_.add(pre + "fuse.w", weight(2 * d, d));
        params_.add(pre + "fuse.b", zero(1, d));
        params_.add(pre + "agg.w", weight(2 * d, d));
        params_.add(pre + "agg.b", zero(1, d));
        params_.add(pre + "filter.w", weight(2 * d, d));
        params_.add(pre + "filter.b", zero(1, d));
        params_.add(pre + "enc.w_h", weight(d, d));
        params_.add(pre + "enc.b_h", zero(1, d));
        params_.add(pre + "enc.w_mu", weight(d, dz));
        params_.add(pre + "enc.b_mu", zero(1, dz));
        params_.add(pre + "enc.w_logvar", zero(d, dz));
        params_.add(pre + "enc.b_logvar", zero(1, dz));
        params_.add(pre + "dec.w_h", weight(dz, d));
        params_.add(pre + "dec.b_h", zero(1, d));
        params_.add(pre + "dec.w_out", weight(d, d));
        params_.add(pre + "dec.b_out", zero(1, d));
    }
    params_.add("mlp.w_h", weight(2 * d, d));
    params_.add("mlp.b_h", zero(1, d));
    params_.add("mlp.w_out", weight(d, 1));
    params_.add("mlp.b_out", zero(1, 1));
    params_.add("global_bias", Tensor::Constant(1, 1, global_bias_init));
}

Model::SideParams Model::side_params(Side s) const {
    const std::string pre = s == Side::User ? "user." : "item.";
    auto p = [&](const char* name) { return params_.at(pre + name); };
    SideParams sp;
    sp.pref = p("pref");
    sp.attr_emb = p("attr_emb");
    sp.bias = p("bias");
    sp.fc = {p("fc.w1"), p("fc.w0"), p("fc.b")};
    sp.fuse_w = p("fuse.w");
    sp.fuse_b = p("fuse.b");
    sp.gnn = {p("agg.w"), p("agg.b"), p("filter.w"), p("filter.b")};
    sp.enc = {p("enc.w_h"), p("enc.b_h"), p("enc.w_mu"), p("enc.b_mu"), p("enc.w_logvar"), p("enc.b_logvar")};
    sp.dec = {p("dec.w_h"), p("dec.b_h"), p("dec.w_out"), p("dec.b_out")};
    return sp;
}

Value Model::attribute_rows(Side s, std::span<const NodeId> nodes) const {
    const SideParams sp = side_params(s);
    return attribute_embed(ad::constant(side(s).attributes.dense_rows(nodes)), sp.attr_emb, sp.fc, config_.slope);
}

Value Model::substitute_cold_preference(Side s, std::span<const NodeId> nodes, const Value& x) const {
    for (NodeId n : nodes)
        if (!is_cold(s, n))
            throw std::logic_error("substitute_cold_preference: node " + std::to_string(n) + " has training ratings");
    if (x.rows() != static_cast<Eigen::Index>(nodes.size()))
        throw ShapeError("substitute_cold_preference", "one attribute row per node expected");
    const SideParams sp = side_params(s);
    Encoded e = evae_encode(x, Tensor::Zero(x.rows(), config_.latent_dim), sp.enc, config_.slope);
    return evae_decode(e.z, sp.dec, config_.slope);
}

Value Model::final_embeddings(Side s, std::span<const NodeId> targets, const graph::AttributeGraph& g) const {
    if (g.sampled.size() != side(s).count) throw std::logic_error("forward: graph has no neighbor sample for this side");
    const SideParams sp = side_params(s);

    // Every node whose embedding is needed: the targets and their sampled neighbors.
    std::vector<NodeId> nodes(targets.begin(), targets.end());
    for (NodeId t : targets) {
        const auto& nbrs = g.sampled[static_cast<std::size_t>(t)];
        nodes.insert(nodes.end(), nbrs.begin(), nbrs.end());
    }
    std::sort(nodes.begin(), nodes.end());
    nodes.erase(std::unique(nodes.begin(), nodes.end()), nodes.end());
    auto row_of = [&](NodeId n) {
        return static_cast<Eigen::Index>(std::lower_bound(nodes.begin(), nodes.end(), n) - nodes.begin());
    };

    Value x = attribute_rows(s, nodes);

    std::vector<NodeId> cold_nodes;
    std::vector<Eigen::Index> cold_rows, pick;
    for (std::size_t r = 0; r < nodes.size(); ++r) {
        if (is_cold(s, nodes[r])) {
            pick.push_back(static_cast<Eigen::Index>(nodes.size() + cold_nodes.size()));
            cold_nodes.push_back(nodes[r]);
            cold_rows.push_back(static_cast<Eigen::Index>(r));
        } else {
            pick.push_back(static_cast<Eigen::Index>(r));
        }
    }
    Value m = ad::gather_rows(sp.pref, to_index(nodes));
    if (!cold_nodes.empty()) {
        Value substitute = config_.disable_evae
                               ? ad::zeros(static_cast<Eigen::Index>(cold_nodes.size()), config_.dim)
                               : substitute_cold_preference(s, cold_nodes, ad::gather_rows(x, cold_rows));
        m = ad::gather_rows(ad::concat_rows(m, substitute), pick);
    }

    Value p = fuse_node_embedding(m, x, sp.fuse_w, sp.fuse_b);

    std::vector<Eigen::Index> target_rows;
    std::vector<std::vector<Eigen::Index>> neighbor_rows;
    for (NodeId t : targets) {
        target_rows.push_back(row_of(t));
        auto& nr = neighbor_rows.emplace_back();
        for (NodeId n : g.sampled[static_cast<std::size_t>(t)]) nr.push_back(row_of(n));
    }
    return gated_gnn_forward(ad::gather_rows(p, target_rows), make_neighborhood(p, neighbor_rows), sp.gnn,
                             config_.slope, config_.mean_aggregation);
}

Value Model::node_embeddings(Side s, std::span<const NodeId> targets, const graph::AttributeGraph& g) const {
    return final_embeddings(s, targets, g);
}

Value Model::bias_rows(Side s, std::span<const NodeId> nodes) const {
    const SideParams sp = side_params(s);
    const auto zero_row = static_cast<Eigen::Index>(side(s).count);
    std::vector<Eigen::Index> rows;
    rows.reserve(nodes.size());
    for (NodeId n : nodes) rows.push_back(is_cold(s, n) ? zero_row : n);
    return ad::gather_rows(ad::concat_rows(sp.bias, ad::zeros(1, 1)), rows);
}

Value Model::recon_loss(Side s, std::span<const NodeId> targets, Rng* noise) const {
    std::vector<NodeId> warm;
    for (NodeId t : targets)
        if (!is_cold(s, t)) warm.push_back(t);
    std::sort(warm.begin(), warm.end());
    warm.erase(std::unique(warm.begin(), warm.end()), warm.end());
    if (warm.empty()) return ad::zeros(1, 1);

    const SideParams sp = side_params(s);
    Value x = attribute_rows(s, warm);
    Tensor eps = Tensor::Zero(x.rows(), config_.latent_dim);
    if (noise) {
        std::normal_distribution<double> normal(0.0, 1.0);
        for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = normal(*noise);
    }
    Encoded e = evae_encode(x, eps, sp.enc, config_.slope);
    Value x_rec = evae_decode(e.z, sp.dec, config_.slope);
    return evae_loss(x, x_rec, e.mu, e.logvar, ad::gather_rows(sp.pref, to_index(warm)));
}

BatchResult Model::forward(std::span<const NodeId> users, std::span<const NodeId> items,
                           const graph::AttributeGraph& user_graph, const graph::AttributeGraph& item_graph,
                           Rng* noise, bool with_recon) const {
    if (users.size() != items.size() || users.empty()) throw std::invalid_argument("forward: need equal, non-empty id lists");
    auto unique_sorted = [](std::span<const NodeId> ids) {
        std::vector<NodeId> v(ids.begin(), ids.end());
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
        return v;
    };
    auto positions = [](const std::vector<NodeId>& uniq, std::span<const NodeId> ids) {
        std::vector<Eigen::Index> pos;
        pos.reserve(ids.size());
        for (NodeId n : ids)
            pos.push_back(static_cast<Eigen::Index>(std::lower_bound(uniq.begin(), uniq.end(), n) - uniq.begin()));
        return pos;
    };
    const auto uu = unique_sorted(users), ui = unique_sorted(items);
    Value p = ad::gather_rows(final_embeddings(Side::User, uu, user_graph), positions(uu, users));
    Value q = ad::gather_rows(final_embeddings(Side::Item, ui, item_graph), positions(ui, items));

    MlpWeights mlp{params_.at("mlp.w_h"), params_.at("mlp.b_h"), params_.at("mlp.w_out"), params_.at("mlp.b_out")};
    BatchResult out;
    out.prediction = predict_rating(p, q, mlp, bias_rows(Side::User, users), bias_rows(Side::Item, items),
                                    params_.at("global_bias"), config_.slope);

    out.recon = with_recon && !config_.disable_evae
                    ? recon_loss(Side::User, uu, noise) + recon_loss(Side::Item, ui, noise)
                    : ad::zeros(1, 1);
    return out;
}

void write_checkpoint(const std::filesystem::path& path, const Model& model, const nlohmann::json& meta) {
    auto params = nlohmann::json::array();
    for (const auto& [name, value] : model.params()) {
        const Tensor& t = value.data();
        params.push_back({{"name", name},
                          {"shape", {t.rows(), t.cols()}},
                          {"data", std::vector<double>(t.data(), t.data() + t.size())}});
    }
    nlohmann::json j{{"config", config_to_json(model.config())}, {"meta", meta}, {"params", std::move(params)}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw data::DataError("cannot write checkpoint " + path.string());
    out << j.dump() << '\n';
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data::DataError("cannot open checkpoint " + path.string());
    Checkpoint c;
    try {
        nlohmann::json j;
        in >> j;
        c.config = config_from_json(j.at("config"));
        c.meta = j.value("meta", nlohmann::json::object());
        for (const auto& p : j.at("params")) {
            const auto rows = p.at("shape").at(0).get<Eigen::Index>();
            const auto cols = p.at("shape").at(1).get<Eigen::Index>();
            const auto values = p.at("data").get<std::vector<double>>();
            if (static_cast<Eigen::Index>(values.size()) != rows * cols)
                throw data::DataError("checkpoint parameter " + p.at("name").get<std::string>() + " has wrong size");
            c.params.emplace_back(p.at("name").get<std::string>(),
                                  Eigen::Map<const Tensor>(values.data(), rows, cols));
        }
    } catch (const nlohmann::json::exception& e) {
        throw data::DataError("malformed checkpoint " + path.string() + ": " + e.what());
    }
    return c;
}

void load_parameters(Model& model, const Checkpoint& ckpt) {
    if (ckpt.params.size() != model.params().size())
        throw data::DataError("checkpoint has " + std::to_string(ckpt.params.size()) + " parameters, model has " +
                              std::to_string(model.params().size()));
    for (const auto& [name, t] : ckpt.params) {
        if (!model.params().contains(name)) throw data::DataError("checkpoint parameter " + name + " unknown to model");
        Value& v = model.params().at(name);
        if (v.rows() != t.rows() || v.cols() != t.cols())
            throw data::DataError("checkpoint parameter " + name + " has shape " + ad::shape_string(t) + ", model expects " +
                                  ad::shape_string(v.data()));
        v.data() = t;
    }
}

}  // namespace agnn::model
