#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "agnn/dataio.hpp"
#include "agnn/graph.hpp"
#include "agnn/model.hpp"

namespace agnn::train {

using data::NodeId;
using data::Rating;

struct TrainConfig {
    std::size_t batch_size = 128;
    int dim = 30;
    double learning_rate = 0.0005;
    double slope = 0.01;
    double pool_percent = 5.0;
    std::size_t neighbors = 10;
    int epochs = 200;
    std::uint64_t seed = 42;
    bool disable_evae = false;
    bool mean_aggregation = false;
    int patience = 10;
    double validation_fraction = 0.1;

    model::ModelConfig model_config() const;
};

nlohmann::json config_to_json(const TrainConfig& c);
TrainConfig config_from_json(const nlohmann::json& j);

/// Everything a run needs: the split plus per-node attribute encodings.
struct Problem {
    data::Split split;
    data::MultiHotMatrix user_attributes;
    data::MultiHotMatrix item_attributes;
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;  // total loss per fitted rating
    double val_rmse = 0.0;
    double val_mae = 0.0;
};

struct Metrics {
    double rmse = 0.0;
    double mae = 0.0;
    std::size_t count = 0;
};

/// RMSE and MAE of predictions against the true ratings.
Metrics score(std::span<const double> predicted, std::span<const Rating> truth);

/// One mini-batch as handed to the optimizer; for leakage scans.
struct BatchView {
    int epoch = 0;
    std::span<const Rating> ratings;
};

using BatchObserver = std::function<void(const BatchView&)>;

struct TrainResult {
    TrainConfig config;
    std::unique_ptr<model::Model> model;
    graph::AttributeGraph user_graph, item_graph;  // built from fitted triples only
    std::vector<Rating> fit, held;                 // training triples used / held for early stopping
    double rating_min = 1.0, rating_max = 5.0;     // from fitted triples
    double fit_mean = 0.0;
    std::vector<EpochRecord> trace;
    int best_epoch = 0;
    double seconds = 0.0;
};

/// Cold flags per side: the split's cold ids plus every node without a
/// rating in `fit`.
std::vector<char> cold_flags(const Problem& p, graph::Side side, std::span<const Rating> fit);

/// Everything train() does before the first epoch: validation carve-out,
/// graphs from the fitted triples, freshly initialized model. Loading a
/// checkpoint into the result reproduces a trained run.
TrainResult setup_run(const Problem& problem, const TrainConfig& config);

TrainResult train(const Problem& problem, const TrainConfig& config, const BatchObserver& observer = {});

/// Test metrics with eps = 0, neighbors drawn from a fixed evaluation
/// sample, predictions clamped to the fitted rating range.
Metrics evaluate(const TrainResult& run, std::span<const Rating> test, std::uint64_t seed);

/// Raw (clamped) predictions behind evaluate().
std::vector<double> predict(const TrainResult& run, std::span<const Rating> pairs, std::uint64_t seed);

enum class Ablation { None, NoEvae, MeanAggregation };

std::string to_string(Ablation a);
Ablation parse_ablation(const std::string& s);
void apply_ablation(TrainConfig& c, Ablation a);

struct AblationResult {
    Metrics full, ablated;
};

/// Trains the full model and the ablated one with identical seed and split.
AblationResult run_ablation(const Problem& problem, const TrainConfig& config, Ablation ablation);

void write_trace_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& trace);
nlohmann::json metrics_to_json(const Metrics& m);

}  // namespace agnn::train
