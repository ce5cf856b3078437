#include "agnn/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "agnn/optim.hpp"
#include "agnn/rng.hpp"

namespace agnn::train {

using graph::Side;
using ad::Tensor;

namespace {

constexpr std::size_t kEvalChunk = 1024;

std::uint64_t epoch_seed(std::uint64_t base, const char* stream, int epoch) {
    return derive_seed(base, std::string(stream) + "/" + std::to_string(epoch));
}


std::vector<double> predict_with(const model::Model& m, const graph::AttributeGraph& ug,
                                 const graph::AttributeGraph& ig, std::span<const Rating> pairs, double lo,
                                 double hi) {
    std::vector<double> out;
    out.reserve(pairs.size());
    std::vector<NodeId> users, items;
    for (std::size_t start = 0; start < pairs.size(); start += kEvalChunk) {
        const std::size_t end = std::min(pairs.size(), start + kEvalChunk);
        users.clear();
        items.clear();
        for (std::size_t k = start; k < end; ++k) {
            users.push_back(pairs[k].user);
            items.push_back(pairs[k].item);
        }
        auto res = m.forward(users, items, ug, ig, nullptr, false);
        for (Eigen::Index r = 0; r < res.prediction.rows(); ++r)
            out.push_back(std::clamp(res.prediction.data()(r, 0), lo, hi));
    }
    return out;
}

}  // namespace

model::ModelConfig TrainConfig::model_config() const {
    model::ModelConfig m;
    m.dim = dim;
    m.latent_dim = dim;
    m.slope = slope;
    m.disable_evae = disable_evae;
    m.mean_aggregation = mean_aggregation;
    return m;
}

nlohmann::json config_to_json(const TrainConfig& c) {
    return {{"batch_size", c.batch_size},
            {"dim", c.dim},
            {"learning_rate", c.learning_rate},
            {"slope", c.slope},
            {"pool_percent", c.pool_percent},
            {"neighbors", c.neighbors},
            {"epochs", c.epochs},
            {"seed", c.seed},
            {"disable_evae", c.disable_evae},
            {"mean_aggregation", c.mean_aggregation},
            {"patience", c.patience},
            {"validation_fraction", c.validation_fraction}};
}

TrainConfig config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.dim = j.at("dim").get<int>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.slope = j.at("slope").get<double>();
    c.pool_percent = j.at("pool_percent").get<double>();
    c.neighbors = j.at("neighbors").get<std::size_t>();
    c.epochs = j.at("epochs").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.disable_evae = j.at("disable_evae").get<bool>();
    c.mean_aggregation = j.at("mean_aggregation").get<bool>();
    c.patience = j.at("patience").get<int>();
    c.validation_fraction = j.at("validation_fraction").get<double>();
    return c;
}

Metrics score(std::span<const double> predicted, std::span<const Rating> truth) {
    if (truth.empty()) throw std::invalid_argument("score: empty test set");
    if (predicted.size() != truth.size()) throw std::invalid_argument("score: prediction count mismatch");
    double sq = 0.0, abs = 0.0;
    for (std::size_t k = 0; k < truth.size(); ++k) {
        const double e = predicted[k] - truth[k].value;
        sq += e * e;
        abs += std::abs(e);
    }
    const auto n = static_cast<double>(truth.size());
    return {std::sqrt(sq / n), abs / n, truth.size()};
}

std::vector<char> cold_flags(const Problem& p, Side side, std::span<const Rating> fit) {
    const bool users = side == Side::User;
    std::vector<char> cold(users ? p.split.user_count() : p.split.item_count(), 1);
    for (const auto& r : fit) cold[static_cast<std::size_t>(users ? r.user : r.item)] = 0;
    const bool split_side = (users && p.split.mode == data::SplitMode::UserCold) ||
                            (!users && p.split.mode == data::SplitMode::ItemCold);
    if (split_side)
        for (NodeId n : p.split.cold_ids) cold[static_cast<std::size_t>(n)] = 1;
    return cold;
}

TrainResult setup_run(const Problem& problem, const TrainConfig& config) {
    if (problem.split.train.empty()) throw std::invalid_argument("train: empty training set");
    if (config.batch_size < 1) throw std::invalid_argument("train: batch size must be positive");
    const std::size_t n_users = problem.split.user_count(), n_items = problem.split.item_count();
    if (problem.user_attributes.node_count() != n_users || problem.item_attributes.node_count() != n_items)
        throw std::invalid_argument("train: attribute rows do not match the split's node counts");

    TrainResult run;
    run.config = config;
    std::tie(run.fit, run.held) = data::carve_validation(problem.split.train, config.validation_fraction, config.seed);
    if (run.fit.empty()) throw std::invalid_argument("train: validation carve-out left nothing to fit");
    run.fit_mean = data::mean_rating(run.fit);
    run.rating_min = run.rating_max = run.fit.front().value;
    for (const auto& r : run.fit) {
        run.rating_min = std::min(run.rating_min, r.value);
        run.rating_max = std::max(run.rating_max, r.value);
    }

    run.user_graph = graph::build_attribute_graph(graph::rating_rows(run.fit, Side::User, n_users, n_items),
                                                  problem.user_attributes.dense(), config.pool_percent);
    run.item_graph = graph::build_attribute_graph(graph::rating_rows(run.fit, Side::Item, n_users, n_items),
                                                  problem.item_attributes.dense(), config.pool_percent);

    model::SideData users{n_users, problem.user_attributes, cold_flags(problem, Side::User, run.fit)};
    model::SideData items{n_items, problem.item_attributes, cold_flags(problem, Side::Item, run.fit)};
    run.model = std::make_unique<model::Model>(config.model_config(), std::move(users), std::move(items), config.seed,
                                               run.fit_mean);
    return run;
}

TrainResult train(const Problem& problem, const TrainConfig& config, const BatchObserver& observer) {
    const auto start = std::chrono::steady_clock::now();
    TrainResult run = setup_run(problem, config);
    auto& params = run.model->params();

    ad::AdamState adam;
    adam.config.learning_rate = config.learning_rate;
    Rng shuffle_rng = make_rng(config.seed, "shuffle");
    Rng noise = make_rng(config.seed, "eps");

    std::vector<Rating> order = run.fit;
    std::vector<NodeId> bu, bi;
    Tensor target;
    double best_rmse = std::numeric_limits<double>::infinity();
    std::vector<Tensor> best = params.snapshot();
    int since_best = 0;

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        graph::sample_neighbors(run.user_graph, config.neighbors, epoch_seed(config.seed, "neighbors-user", epoch));
        graph::sample_neighbors(run.item_graph, config.neighbors, epoch_seed(config.seed, "neighbors-item", epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double epoch_loss = 0.0;
        std::size_t batch_index = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += config.batch_size, ++batch_index) {
            const std::size_t b1 = std::min(order.size(), b0 + config.batch_size);
            std::span<const Rating> batch(order.data() + b0, b1 - b0);
            if (observer) observer({epoch, batch});
            bu.clear();
            bi.clear();
            target.resize(static_cast<Eigen::Index>(batch.size()), 1);
            for (std::size_t k = 0; k < batch.size(); ++k) {
                bu.push_back(batch[k].user);
                bi.push_back(batch[k].item);
                target(static_cast<Eigen::Index>(k), 0) = batch[k].value;
            }
            auto out = run.model->forward(bu, bi, run.user_graph, run.item_graph, &noise, true);
            auto loss = model::total_loss(model::prediction_loss(out.prediction, target), out.recon);
            if (!std::isfinite(loss.item()))
                throw ad::NumericError("epoch " + std::to_string(epoch) + " batch " + std::to_string(batch_index) +
                                       ": loss is not finite");
            loss.backward();
            try {
                ad::adam_step(params, adam);
            } catch (const ad::NumericError& e) {
                throw ad::NumericError("epoch " + std::to_string(epoch) + " batch " + std::to_string(batch_index) +
                                       ": " + e.what());
            }
            epoch_loss += loss.item();
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = epoch_loss / static_cast<double>(order.size());
        if (!run.held.empty()) {
            auto m = evaluate(run, run.held, config.seed);
            rec.val_rmse = m.rmse;
            rec.val_mae = m.mae;
        }
        run.trace.push_back(rec);

        if (run.held.empty()) {
            run.best_epoch = epoch;
            continue;
        }
        if (rec.val_rmse < best_rmse) {
            best_rmse = rec.val_rmse;
            best = params.snapshot();
            run.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= config.patience) {
            break;
        }
    }
    if (!run.held.empty() && run.best_epoch > 0) params.restore(best);
    run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return run;
}

std::vector<double> predict(const TrainResult& run, std::span<const Rating> pairs, std::uint64_t seed) {
    graph::AttributeGraph ug = run.user_graph, ig = run.item_graph;
    graph::sample_neighbors(ug, run.config.neighbors, derive_seed(seed, "eval-user"));
    graph::sample_neighbors(ig, run.config.neighbors, derive_seed(seed, "eval-item"));
    return predict_with(*run.model, ug, ig, pairs, run.rating_min, run.rating_max);
}

Metrics evaluate(const TrainResult& run, std::span<const Rating> test, std::uint64_t seed) {
    return score(predict(run, test, seed), test);
}

std::string to_string(Ablation a) {
    switch (a) {
        case Ablation::None: return "none";
        case Ablation::NoEvae: return "no-evae";
        case Ablation::MeanAggregation: return "mean-agg";
    }
    return "none";
}

Ablation parse_ablation(const std::string& s) {
    if (s == "none") return Ablation::None;
    if (s == "no-evae") return Ablation::NoEvae;
    if (s == "mean-agg") return Ablation::MeanAggregation;
    throw std::invalid_argument("unknown ablation '" + s + "' (expected none, no-evae or mean-agg)");
}

void apply_ablation(TrainConfig& c, Ablation a) {
    c.disable_evae = a == Ablation::NoEvae;
    c.mean_aggregation = a == Ablation::MeanAggregation;
}

AblationResult run_ablation(const Problem& problem, const TrainConfig& config, Ablation ablation) {
    TrainConfig full = config, ablated = config;
    apply_ablation(full, Ablation::None);
    apply_ablation(ablated, ablation);
    AblationResult r;
    r.full = evaluate(train(problem, full), problem.split.test, config.seed);
    r.ablated = evaluate(train(problem, ablated), problem.split.test, config.seed);
    return r;
}

void write_trace_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& trace) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw data::DataError("cannot write " + path.string());
    out.precision(17);
    out << "epoch,train_loss,val_rmse,val_mae\n";
    for (const auto& r : trace) out << r.epoch << ',' << r.train_loss << ',' << r.val_rmse << ',' << r.val_mae << '\n';
}

nlohmann::json metrics_to_json(const Metrics& m) { return {{"rmse", m.rmse}, {"mae", m.mae}, {"count", m.count}}; }

}  // namespace agnn::train
