#include "cli.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "agnn/dataio.hpp"
#include "agnn/graph.hpp"
#include "agnn/model.hpp"
#include "agnn/trainer.hpp"

namespace agnn::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunConfig {
    std::string ratings, user_attrs, item_attrs, schema;
    std::string mode = "warm";
    double fraction = 0.2;
    std::string out = "run";
    std::string ablation = "none";
    std::vector<double> fractions{0.1, 0.3, 0.5};
    std::string checkpoint, split;
    train::TrainConfig train;
};

class Failure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Failure("cannot write " + path.string());
    f << text;
    if (!f) throw Failure("failed writing " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

void require_file(const std::string& flag, const std::string& path) {
    if (path.empty()) throw Failure(flag + " is required");
    if (!fs::exists(path)) throw Failure("no such file: " + path + " (" + flag + ")");
}

data::Dataset load(const RunConfig& rc) {
    require_file("--ratings", rc.ratings);
    require_file("--user-attrs", rc.user_attrs);
    require_file("--item-attrs", rc.item_attrs);
    require_file("--schema", rc.schema);
    return data::load_dataset(rc.ratings, rc.user_attrs, rc.item_attrs, rc.schema);
}

data::Split make_split(const data::RatingSet& ratings, data::SplitMode mode, double fraction, std::uint64_t seed) {
    auto split = mode == data::SplitMode::Warm ? data::split_warm(ratings, fraction, seed)
                                               : data::split_cold_start(ratings, fraction, mode, seed);
    if (split.test.empty()) {
        std::ostringstream msg;
        msg << "split " << data::to_string(mode) << " at fraction " << fraction << " leaves an empty test set";
        throw Failure(msg.str());
    }
    return split;
}

train::Problem problem_for(const data::Dataset& ds, data::Split split) {
    if (split.user_ids != ds.ratings.user_ids || split.item_ids != ds.ratings.item_ids)
        throw Failure("split file does not match the ratings file (different users or items)");
    return {std::move(split), ds.user_attributes, ds.item_attributes};
}

fs::path split_path(const RunConfig& rc) { return rc.split.empty() ? fs::path(rc.out) / "split.json" : fs::path(rc.split); }

std::string stats_line(const data::RatingSet& r) {
    std::ostringstream s;
    s << r.user_count() << " users, " << r.item_count() << " items, " << r.ratings.size() << " ratings, sparsity "
      << std::fixed << std::setprecision(2) << 100.0 * r.sparsity() << "%";
    return s.str();
}

void check_finite(const train::Metrics& m) {
    if (!std::isfinite(m.rmse) || !std::isfinite(m.mae)) throw Failure("metrics are not finite");
}

json run_summary(const train::TrainResult& run, const train::Metrics& test) {
    return {{"test", train::metrics_to_json(test)},
            {"best_epoch", run.best_epoch},
            {"epochs_run", run.trace.size()},
            {"fit_ratings", run.fit.size()},
            {"validation_ratings", run.held.size()}};
}

void cmd_prepare(const RunConfig& rc, std::ostream& out) {
    auto ds = load(rc);
    out << stats_line(ds.ratings) << "\n";
    auto problem = problem_for(ds, make_split(ds.ratings, data::parse_split_mode(rc.mode), rc.fraction, rc.train.seed));
    auto run = train::setup_run(problem, rc.train);
    fs::create_directories(rc.out);
    data::write_split(split_path(rc), problem.split);
    graph::write_graph(fs::path(rc.out) / "user_graph.json", run.user_graph);
    graph::write_graph(fs::path(rc.out) / "item_graph.json", run.item_graph);
    out << data::to_string(problem.split.mode) << " split: " << problem.split.train.size() << " train, "
        << problem.split.test.size() << " test, " << problem.split.cold_ids.size() << " cold nodes\n";
}

void cmd_train(const RunConfig& rc, std::ostream& out) {
    auto ds = load(rc);
    const auto sp = split_path(rc);
    if (!fs::exists(sp)) throw Failure("no split at " + sp.string() + "; run `agnn prepare` first");
    auto problem = problem_for(ds, data::read_split(sp));
    auto cfg = rc.train;
    train::apply_ablation(cfg, train::parse_ablation(rc.ablation));

    auto run = train::train(problem, cfg);
    auto test = train::evaluate(run, problem.split.test, cfg.seed);
    check_finite(test);

    fs::create_directories(rc.out);
    const fs::path dir(rc.out);
    json meta{{"train_config", train::config_to_json(cfg)},
              {"split", {{"mode", data::to_string(problem.split.mode)},
                         {"fraction", problem.split.fraction},
                         {"seed", problem.split.seed}}},
              {"best_epoch", run.best_epoch}};
    model::write_checkpoint(dir / "checkpoint.json", *run.model, meta);
    train::write_trace_csv(dir / "trace.csv", run.trace);
    auto summary = run_summary(run, test);
    summary["ablation"] = rc.ablation;
    write_json(dir / "metrics.json", summary);
    out << "trained " << run.trace.size() << " epochs (best " << run.best_epoch << ") in " << std::fixed
        << std::setprecision(1) << run.seconds << " s\n"
        << std::setprecision(4) << "test RMSE " << test.rmse << "  MAE " << test.mae << "  (" << test.count
        << " ratings)\n";
}

void cmd_eval(const RunConfig& rc, std::ostream& out) {
    auto ds = load(rc);
    const fs::path ckpt_path = rc.checkpoint.empty() ? fs::path(rc.out) / "checkpoint.json" : fs::path(rc.checkpoint);
    if (!fs::exists(ckpt_path)) throw Failure("no checkpoint at " + ckpt_path.string());
    auto ckpt = model::read_checkpoint(ckpt_path);
    auto cfg = train::config_from_json(ckpt.meta.at("train_config"));
    auto problem = problem_for(ds, data::read_split(split_path(rc)));

    auto run = train::setup_run(problem, cfg);
    try {
        model::load_parameters(*run.model, ckpt);
    } catch (const data::DataError& e) {
        throw Failure(std::string("checkpoint does not fit this configuration: ") + e.what());
    }
    auto test = train::evaluate(run, problem.split.test, cfg.seed);
    check_finite(test);

    std::ostringstream name;
    name << "eval_" << data::to_string(problem.split.mode) << "_" << problem.split.fraction << ".json";
    fs::create_directories(rc.out);
    write_json(fs::path(rc.out) / name.str(), {{"split", data::to_string(problem.split.mode)},
                                               {"fraction", problem.split.fraction},
                                               {"test", train::metrics_to_json(test)}});
    out << std::fixed << std::setprecision(4) << data::to_string(problem.split.mode) << " test RMSE " << test.rmse
        << "  MAE " << test.mae << "  (" << test.count << " ratings)\n";
}

void cmd_ablate(const RunConfig& rc, std::ostream& out) {
    auto ds = load(rc);
    const auto ablation = train::parse_ablation(rc.ablation);
    if (ablation == train::Ablation::None) throw Failure("ablate needs --ablation no-evae or mean-agg");
    auto problem = problem_for(ds, make_split(ds.ratings, data::parse_split_mode(rc.mode), rc.fraction, rc.train.seed));
    auto r = train::run_ablation(problem, rc.train, ablation);
    check_finite(r.full);
    check_finite(r.ablated);
    fs::create_directories(rc.out);
    write_json(fs::path(rc.out) / ("ablation_" + rc.ablation + ".json"),
               {{"mode", rc.mode},
                {"fraction", rc.fraction},
                {"seed", rc.train.seed},
                {"full", train::metrics_to_json(r.full)},
                {"ablated", train::metrics_to_json(r.ablated)}});
    out << std::fixed << std::setprecision(4) << "full RMSE " << r.full.rmse << "  " << rc.ablation << " RMSE "
        << r.ablated.rmse << "\n";
}

void cmd_sweep(const RunConfig& rc, std::ostream& out) {
    auto ds = load(rc);
    const auto mode = data::parse_split_mode(rc.mode);
    if (rc.fractions.empty()) throw Failure("--fractions is empty");
    auto cfg = rc.train;
    train::apply_ablation(cfg, train::parse_ablation(rc.ablation));
    std::ostringstream csv;
    csv.precision(17);
    csv << "fraction,rmse,mae,count,best_epoch\n";
    out << std::fixed << std::setprecision(4);
    for (double f : rc.fractions) {
        auto problem = problem_for(ds, make_split(ds.ratings, mode, f, rc.train.seed));
        auto run = train::train(problem, cfg);
        auto m = train::evaluate(run, problem.split.test, cfg.seed);
        check_finite(m);
        csv << f << ',' << m.rmse << ',' << m.mae << ',' << m.count << ',' << run.best_epoch << '\n';
        out << rc.mode << " " << f << "  RMSE " << m.rmse << "  MAE " << m.mae << "\n";
    }
    fs::create_directories(rc.out);
    write_text(fs::path(rc.out) / ("sweep_" + rc.mode + ".csv"), csv.str());
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    RunConfig rc;
    auto& t = rc.train;
    CLI::App app{"Attribute graph neural network recommender"};
    app.name("agnn");
    app.set_config("--config", "", "read settings from an INI file; flags override it");
    app.require_subcommand(1, 1);
    app.fallthrough();

    app.add_option("--ratings", rc.ratings, "ratings file: user, item, rating[, timestamp], tab separated");
    app.add_option("--user-attrs", rc.user_attrs, "user attribute table with a header row");
    app.add_option("--item-attrs", rc.item_attrs, "item attribute table with a header row");
    app.add_option("--schema", rc.schema, "attribute schema INI");
    app.add_option("--mode", rc.mode, "split mode [reference protocol]")
        ->check(CLI::IsMember({"warm", "item-cold", "user-cold"}))
        ->capture_default_str();
    app.add_option("--fraction", rc.fraction, "share of ratings (warm) or nodes (cold) held out [reference value]")
        ->capture_default_str();
    app.add_option("--seed", t.seed, "single seed; split, init, sampling and noise derive from it [repo default]")
        ->capture_default_str();
    app.add_option("--out", rc.out, "output directory")->capture_default_str();
    app.add_option("--split", rc.split, "split file (default: <out>/split.json)");
    app.add_option("--checkpoint", rc.checkpoint, "checkpoint to evaluate (default: <out>/checkpoint.json)");
    app.add_option("--epochs", t.epochs, "maximum epochs [repo default]")->capture_default_str();
    app.add_option("--patience", t.patience, "early-stopping patience in epochs [repo default]")->capture_default_str();
    app.add_option("--validation-fraction", t.validation_fraction,
                   "share of training ratings held out for early stopping [repo default]")
        ->capture_default_str();
    app.add_option("--batch-size", t.batch_size, "mini-batch size [reference value]")->capture_default_str();
    app.add_option("--dim", t.dim, "embedding dimension D [reference value]")->capture_default_str();
    app.add_option("--lr", t.learning_rate, "Adam learning rate [reference value]")->capture_default_str();
    app.add_option("--slope", t.slope, "LeakyReLU negative slope [reference value]")->capture_default_str();
    app.add_option("--pool-percent", t.pool_percent, "candidate pool size p in percent [reference value]")
        ->capture_default_str();
    app.add_option("--neighbors", t.neighbors, "neighbors sampled per node and epoch [repo default]")
        ->capture_default_str();
    app.add_option("--ablation", rc.ablation, "none, no-evae or mean-agg")
        ->check(CLI::IsMember({"none", "no-evae", "mean-agg"}))
        ->capture_default_str();
    app.add_option("--fractions", rc.fractions, "cold ratios for sweep [reference values]")
        ->delimiter(',')
        ->default_str("0.1,0.3,0.5");

    auto* prepare = app.add_subcommand("prepare", "write the split and both attribute graphs, print dataset stats");
    auto* trn = app.add_subcommand("train", "train on a prepared split; writes checkpoint, trace and metrics");
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split's test set");
    auto* ablate = app.add_subcommand("ablate", "train the full model and one ablation on the same split");
    auto* sweep = app.add_subcommand("sweep", "train and evaluate once per cold ratio");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }

    try {
        if (prepare->parsed()) cmd_prepare(rc, out);
        if (trn->parsed()) cmd_train(rc, out);
        if (eval->parsed()) cmd_eval(rc, out);
        if (ablate->parsed()) cmd_ablate(rc, out);
        if (sweep->parsed()) cmd_sweep(rc, out);
        // Defaults become explicit results so the emitted file is a fixed
        // point: rerunning from it writes the same file again.
        for (auto* opt : app.get_options())
            if (opt->count() == 0 && opt->get_configurable() && !opt->get_default_str().empty())
                opt->add_result(opt->get_default_str());
        fs::create_directories(rc.out);
        write_text(fs::path(rc.out) / "run_config.ini", app.config_to_str(true, true));
    } catch (const std::exception& e) {
        err << "agnn: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace agnn::cli
