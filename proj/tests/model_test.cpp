#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "agnn/model.hpp"
#include "test_support.hpp"
#include "toy_fixture.hpp"

using namespace agnn;
using namespace agnn::model;
using agnn::testing::random_tensor;

namespace {

constexpr double kSlope = 0.01;

double leaky(double x) { return x > 0 ? x : kSlope * x; }
double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Value leaf(Tensor t) { return Value(std::move(t), true); }
Value cst(Tensor t) { return ad::constant(std::move(t)); }

Tensor row(std::initializer_list<double> v) {
    Tensor t(1, static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) t(0, i++) = x;
    return t;
}

// Straight-line references, one vector at a time.
Eigen::RowVectorXd oracle_bi(const Eigen::RowVectorXd& a, const Tensor& v) {
    Eigen::RowVectorXd out = Eigen::RowVectorXd::Zero(v.cols());
    for (Eigen::Index i = 0; i < v.rows(); ++i)
        for (Eigen::Index j = i + 1; j < v.rows(); ++j)
            out += (a(i) * v.row(i)).cwiseProduct(a(j) * v.row(j));
    return out;
}

Eigen::RowVectorXd oracle_linear(const Eigen::RowVectorXd& a, const Tensor& v) {
    Eigen::RowVectorXd out = Eigen::RowVectorXd::Zero(v.cols());
    for (Eigen::Index i = 0; i < v.rows(); ++i) out += a(i) * v.row(i);
    return out;
}

Eigen::RowVectorXd affine_leaky(const Eigen::RowVectorXd& x, const Tensor& w, const Tensor& b) {
    Eigen::RowVectorXd y = x * w + b;
    return y.unaryExpr([](double s) { return leaky(s); });
}

Eigen::RowVectorXd concat(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) {
    Eigen::RowVectorXd c(a.size() + b.size());
    c << a, b;
    return c;
}

Eigen::RowVectorXd oracle_gnn(const Eigen::RowVectorXd& p, const std::vector<Eigen::RowVectorXd>& nbrs,
                              const GnnWeights& w) {
    const Eigen::Index d = p.size();
    Eigen::RowVectorXd agg = Eigen::RowVectorXd::Zero(d), mean = Eigen::RowVectorXd::Zero(d);
    for (const auto& n : nbrs) {
        Eigen::RowVectorXd g = (concat(p, n) * w.agg_w.data() + w.agg_b.data()).unaryExpr([](double s) { return sigm(s); });
        agg += n.cwiseProduct(g);
        mean += n;
    }
    agg /= double(nbrs.size());
    mean /= double(nbrs.size());
    Eigen::RowVectorXd f = (concat(p, mean) * w.filter_w.data() + w.filter_b.data()).unaryExpr([](double s) { return sigm(s); });
    Eigen::RowVectorXd kept = p.cwiseProduct((Eigen::RowVectorXd::Ones(d) - f));
    return (kept + agg).unaryExpr([](double s) { return leaky(s); });
}

GnnWeights random_gnn(std::mt19937_64& rng, Eigen::Index d) {
    return {leaf(random_tensor(rng, 2 * d, d, -0.5, 0.5)), leaf(random_tensor(rng, 1, d, -0.5, 0.5)),
            leaf(random_tensor(rng, 2 * d, d, -0.5, 0.5)), leaf(random_tensor(rng, 1, d, -0.5, 0.5))};
}

GnnWeights zero_gnn(Eigen::Index d) {
    return {leaf(Tensor::Zero(2 * d, d)), leaf(Tensor::Zero(1, d)), leaf(Tensor::Zero(2 * d, d)),
            leaf(Tensor::Zero(1, d))};
}

Tensor one_hot_rows(Eigen::Index k, std::initializer_list<Eigen::Index> slots) {
    Tensor a = Tensor::Zero(1, k);
    for (auto s : slots) a(0, s) = 1.0;
    return a;
}

}  // namespace

TEST(BiInteraction, Examples) {
    Tensor v(2, 2);
    v << 1, 2, 3, 4;
    auto out = bi_interaction(cst(row({1, 1})), cst(v));
    EXPECT_EQ(out.data(), row({3, 8}));

    std::mt19937_64 rng(1);
    Tensor table = random_tensor(rng, 7, 4);
    auto single = bi_interaction(cst(one_hot_rows(7, {3})), cst(table));
    EXPECT_LT(single.data().cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_THROW(bi_interaction(cst(row({1, 1, 0})), cst(v)), ad::ShapeError);
}

TEST(BiInteraction, MatchesDoubleLoopOnRandomTables) {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 50; ++t) {
        Tensor table = random_tensor(rng, 12, 5);
        Tensor a = Tensor::Zero(1, 12);
        std::vector<Eigen::Index> slots(12);
        std::iota(slots.begin(), slots.end(), 0);
        std::shuffle(slots.begin(), slots.end(), rng);
        for (int s = 0; s < 6; ++s) a(0, slots[s]) = 1.0;
        auto got = bi_interaction(cst(a), cst(table));
        EXPECT_LT((got.data().row(0) - oracle_bi(a.row(0), table)).cwiseAbs().maxCoeff(), 1e-10);
    }
}

TEST(LinearCombination, Examples) {
    Tensor v(2, 2);
    v << 1, 2, 3, 4;
    EXPECT_EQ(linear_combination(cst(row({1, 1})), cst(v)).data(), row({4, 6}));
    EXPECT_EQ(linear_combination(cst(row({0, 0})), cst(v)).data(), row({0, 0}));
    EXPECT_EQ(linear_combination(cst(row({0, 1})), cst(v)).data(), row({3, 4}));
    EXPECT_THROW(linear_combination(cst(row({1})), cst(v)), ad::ShapeError);
}

TEST(AttributeEmbed, ZeroWeightsAndIdentityPath) {
    std::mt19937_64 rng(3);
    const Eigen::Index k = 6, d = 4;
    Tensor table = random_tensor(rng, k, d, 0.0, 1.0);
    InteractionWeights zero{cst(Tensor::Zero(d, d)), cst(Tensor::Zero(d, d)), cst(Tensor::Zero(1, d))};
    auto x = attribute_embed(cst(one_hot_rows(k, {0, 2, 5})), cst(table), zero, kSlope);
    EXPECT_EQ(x.data(), Tensor::Zero(1, d));

    InteractionWeights ident{cst(Tensor::Zero(d, d)), cst(Tensor::Identity(d, d)), cst(Tensor::Zero(1, d))};
    auto y = attribute_embed(cst(one_hot_rows(k, {4})), cst(table), ident, kSlope);
    EXPECT_EQ(y.data(), table.row(4));
}

TEST(AttributeEmbed, MatchesStraightLineOracle) {
    std::mt19937_64 rng(4);
    const Eigen::Index k = 9, d = 5;
    for (int t = 0; t < 20; ++t) {
        Tensor table = random_tensor(rng, k, d), w1 = random_tensor(rng, d, d), w0 = random_tensor(rng, d, d),
               b = random_tensor(rng, 1, d);
        Tensor a = Tensor::Zero(3, k);
        for (Eigen::Index r = 0; r < 3; ++r)
            for (int s = 0; s < 4; ++s) a(r, std::uniform_int_distribution<Eigen::Index>(0, k - 1)(rng)) = 1.0;
        auto x = attribute_embed(cst(a), cst(table), {cst(w1), cst(w0), cst(b)}, kSlope);
        for (Eigen::Index r = 0; r < 3; ++r) {
            Eigen::RowVectorXd pre = oracle_bi(a.row(r), table) * w1 + oracle_linear(a.row(r), table) * w0 + b;
            Eigen::RowVectorXd want = pre.unaryExpr([](double s) { return leaky(s); });
            EXPECT_LT((x.data().row(r) - want).cwiseAbs().maxCoeff(), 1e-12);
        }
    }
}

TEST(FuseNodeEmbedding, Examples) {
    std::mt19937_64 rng(5);
    const Eigen::Index d = 4;
    Tensor m = random_tensor(rng, 2, d), x = random_tensor(rng, 2, d), c = random_tensor(rng, 1, d);
    auto constant_out = fuse_node_embedding(cst(m), cst(x), cst(Tensor::Zero(2 * d, d)), cst(c));
    EXPECT_EQ(constant_out.data().row(0), c.row(0));
    EXPECT_EQ(constant_out.data().row(1), c.row(0));

    Tensor proj = Tensor::Zero(2 * d, d);
    proj.topRows(d).setIdentity();
    EXPECT_EQ(fuse_node_embedding(cst(m), cst(x), cst(proj), cst(Tensor::Zero(1, d))).data(), m);

    Tensor w = random_tensor(rng, 2 * d, d);
    auto got = fuse_node_embedding(cst(m), cst(x), cst(w), cst(c));
    for (Eigen::Index r = 0; r < 2; ++r) {
        Eigen::RowVectorXd want = concat(m.row(r), x.row(r)) * w + c;
        EXPECT_LT((got.data().row(r) - want).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(GatedAggregate, ZeroParametersHalveTheMean) {
    std::mt19937_64 rng(6);
    const Eigen::Index d = 3;
    Tensor p = random_tensor(rng, 1, d), nbrs = random_tensor(rng, 4, d);
    auto nb = make_neighborhood(cst(nbrs), {{0, 1, 2, 3}});
    auto out = gated_aggregate(cst(p), nb, cst(Tensor::Zero(2 * d, d)), cst(Tensor::Zero(1, d)));
    EXPECT_TRUE((out.gate.data().array() == 0.5).all());
    Tensor want = 0.5 * nbrs.colwise().mean();
    EXPECT_LT((out.value.data() - want).cwiseAbs().maxCoeff(), 1e-15);

    auto zero_nb = make_neighborhood(cst(Tensor::Zero(1, d)), {{0}});
    auto w = random_gnn(rng, d);
    EXPECT_EQ(gated_aggregate(cst(p), zero_nb, w.agg_w, w.agg_b).value.data(), Tensor::Zero(1, d));
}

TEST(GatedFilter, ZeroParametersAndSaturation) {
    std::mt19937_64 rng(7);
    const Eigen::Index d = 5;
    Tensor p = random_tensor(rng, 1, d), nbrs = random_tensor(rng, 2, d);
    auto nb = make_neighborhood(cst(nbrs), {{0, 1}});
    auto half = gated_filter(cst(p), nb, cst(Tensor::Zero(2 * d, d)), cst(Tensor::Zero(1, d)));
    EXPECT_EQ(half.value.data(), 0.5 * p);

    auto full = gated_filter(cst(p), nb, cst(Tensor::Zero(2 * d, d)), cst(Tensor::Constant(1, d, 30.0)));
    EXPECT_LT(full.value.data().norm(), 1e-12 * p.norm());
}

TEST(GatedGnn, TrivialCompositions) {
    std::mt19937_64 rng(8);
    const Eigen::Index d = 4;
    Tensor p = random_tensor(rng, 1, d), nbrs = random_tensor(rng, 3, d);
    auto nb = make_neighborhood(cst(nbrs), {{0, 1, 2}});
    auto out = gated_gnn_forward(cst(p), nb, zero_gnn(d), kSlope);
    Eigen::RowVectorXd want = (0.5 * p.row(0) + 0.5 * nbrs.colwise().mean()).unaryExpr([](double s) { return leaky(s); });
    EXPECT_LT((out.data().row(0) - want).cwiseAbs().maxCoeff(), 1e-15);

    auto empty = make_neighborhood(cst(nbrs), {{}});
    auto alone = gated_gnn_forward(cst(p), empty, random_gnn(rng, d), kSlope);
    EXPECT_EQ(alone.data(), p.unaryExpr([](double s) { return leaky(s); }));

    auto mean_agg = gated_gnn_forward(cst(p), nb, random_gnn(rng, d), kSlope, true);
    Eigen::RowVectorXd plain = (p.row(0) + nbrs.colwise().mean()).unaryExpr([](double s) { return leaky(s); });
    EXPECT_LT((mean_agg.data().row(0) - plain).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(GatedGnn, MatchesOracleForMixedNeighborhoods) {
    std::mt19937_64 rng(9);
    const Eigen::Index d = 6;
    for (int t = 0; t < 20; ++t) {
        Tensor pool = random_tensor(rng, 8, d);
        Tensor p = random_tensor(rng, 3, d);
        std::vector<std::vector<Eigen::Index>> rows{{0, 4, 7}, {}, {2, 2, 5, 1}};
        auto w = random_gnn(rng, d);
        auto out = gated_gnn_forward(cst(p), make_neighborhood(cst(pool), rows), w, kSlope);
        for (std::size_t r = 0; r < rows.size(); ++r) {
            Eigen::RowVectorXd want;
            if (rows[r].empty()) {
                want = p.row(static_cast<Eigen::Index>(r)).unaryExpr([](double s) { return leaky(s); });
            } else {
                std::vector<Eigen::RowVectorXd> nbrs;
                for (auto i : rows[r]) nbrs.push_back(pool.row(i));
                want = oracle_gnn(p.row(static_cast<Eigen::Index>(r)), nbrs, w);
            }
            EXPECT_LT((out.data().row(static_cast<Eigen::Index>(r)) - want).cwiseAbs().maxCoeff(), 1e-12);
        }
    }
}

TEST(GatedGnn, GradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(10);
    const Eigen::Index d = 4;
    ad::ParameterStore ps;
    Value p = ps.add("p", random_tensor(rng, 2, d));
    Value pool = ps.add("pool", random_tensor(rng, 5, d));
    auto w = random_gnn(rng, d);
    w.agg_w = ps.add("agg_w", w.agg_w.data());
    w.agg_b = ps.add("agg_b", w.agg_b.data());
    w.filter_w = ps.add("filter_w", w.filter_w.data());
    w.filter_b = ps.add("filter_b", w.filter_b.data());
    auto loss = [&] {
        auto nb = make_neighborhood(pool, {{0, 1, 2}, {3, 4}});
        return ad::sum(ad::square(gated_gnn_forward(p, nb, w, kSlope)));
    };
    auto report = ad::grad_check(loss, ps, 1e-6);
    EXPECT_TRUE(report.ok()) << report.worst();
}

TEST(GatedGnn, NeighborOrderDoesNotMatter) {
    std::mt19937_64 rng(11);
    const Eigen::Index d = 5;
    Tensor pool = random_tensor(rng, 6, d), p = random_tensor(rng, 1, d);
    auto w = random_gnn(rng, d);
    auto a = gated_gnn_forward(cst(p), make_neighborhood(cst(pool), {{0, 1, 2, 3, 4, 5}}), w, kSlope);
    auto b = gated_gnn_forward(cst(p), make_neighborhood(cst(pool), {{5, 3, 1, 0, 4, 2}}), w, kSlope);
    EXPECT_LT((a.data() - b.data()).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(GateInvariants, RangeAndShrinkOverRandomPasses) {
    std::mt19937_64 rng(12);
    const Eigen::Index d = 6;
    for (int t = 0; t < 1000; ++t) {
        Tensor pool = random_tensor(rng, 5, d, -3, 3), p = random_tensor(rng, 2, d, -3, 3);
        auto w = random_gnn(rng, d);
        auto nb = make_neighborhood(cst(pool), {{0, 1, 2}, {3, 4}});
        auto agg = gated_aggregate(cst(p), nb, w.agg_w, w.agg_b);
        auto fil = gated_filter(cst(p), nb, w.filter_w, w.filter_b);
        ASSERT_TRUE((agg.gate.data().array() > 0.0).all() && (agg.gate.data().array() < 1.0).all());
        ASSERT_TRUE((fil.gate.data().array() > 0.0).all() && (fil.gate.data().array() < 1.0).all());
        ASSERT_TRUE((fil.value.data().cwiseAbs().array() <= p.cwiseAbs().array()).all());
    }
}

TEST(Evae, EncodeTrivialCases) {
    std::mt19937_64 rng(13);
    const Eigen::Index d = 4, dz = 3;
    Tensor x = random_tensor(rng, 2, d), eps = random_tensor(rng, 2, dz);
    EncoderWeights w{cst(random_tensor(rng, d, d)), cst(random_tensor(rng, 1, d)), cst(random_tensor(rng, d, dz)),
                     cst(random_tensor(rng, 1, dz)), cst(random_tensor(rng, d, dz)), cst(random_tensor(rng, 1, dz))};
    auto noiseless = evae_encode(cst(x), Tensor::Zero(2, dz), w, kSlope);
    EXPECT_EQ(noiseless.z.data(), noiseless.mu.data());

    EncoderWeights zero{cst(Tensor::Zero(d, d)), cst(Tensor::Zero(1, d)), cst(Tensor::Zero(d, dz)),
                        cst(Tensor::Zero(1, dz)), cst(Tensor::Zero(d, dz)), cst(Tensor::Zero(1, dz))};
    auto z = evae_encode(cst(x), eps, zero, kSlope);
    EXPECT_EQ(z.mu.data(), Tensor::Zero(2, dz));
    EXPECT_EQ(z.sigma.data(), Tensor::Ones(2, dz));
    EXPECT_EQ(z.z.data(), eps);
    EXPECT_THROW(evae_encode(cst(x), Tensor::Zero(1, dz), zero, kSlope), ad::ShapeError);
}

TEST(Evae, SampleMeanOfZApproachesMu) {
    std::mt19937_64 rng(14);
    const Eigen::Index d = 3, dz = 2;
    Tensor x = random_tensor(rng, 1, d);
    EncoderWeights w{cst(random_tensor(rng, d, d)), cst(random_tensor(rng, 1, d)), cst(random_tensor(rng, d, dz)),
                     cst(random_tensor(rng, 1, dz)), cst(random_tensor(rng, d, dz, -0.5, 0.5)),
                     cst(random_tensor(rng, 1, dz, -0.5, 0.5))};
    const int draws = 10000;
    std::normal_distribution<double> normal;
    Tensor eps(draws, dz);
    for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = normal(rng);
    Tensor xs = x.replicate(draws, 1);
    auto e = evae_encode(cst(xs), eps, w, kSlope);
    Eigen::RowVectorXd mean = e.z.data().colwise().mean();
    for (Eigen::Index c = 0; c < dz; ++c)
        EXPECT_LT(std::abs(mean(c) - e.mu.data()(0, c)), 3.0 * e.sigma.data()(0, c) / std::sqrt(double(draws)));
}

TEST(Evae, DecodeCases) {
    std::mt19937_64 rng(15);
    const Eigen::Index d = 5, dz = 3;
    Tensor z = random_tensor(rng, 2, dz), c = random_tensor(rng, 1, d);
    DecoderWeights zero{cst(Tensor::Zero(dz, d)), cst(Tensor::Zero(1, d)), cst(Tensor::Zero(d, d)), cst(c)};
    auto out = evae_decode(cst(z), zero, kSlope);
    EXPECT_EQ(out.data().row(0), c.row(0));
    EXPECT_EQ(out.cols(), d);

    DecoderWeights w{cst(random_tensor(rng, dz, d)), cst(random_tensor(rng, 1, d)), cst(random_tensor(rng, d, d)),
                     cst(random_tensor(rng, 1, d))};
    auto got = evae_decode(cst(z), w, kSlope);
    for (Eigen::Index r = 0; r < 2; ++r) {
        Eigen::RowVectorXd want = affine_leaky(z.row(r), w.w_h.data(), w.b_h.data()) * w.w_out.data() + w.b_out.data();
        EXPECT_LT((got.data().row(r) - want).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Evae, LossClosedFormPoints) {
    Tensor v = row({0.3, -1.2});
    EXPECT_EQ(evae_loss(cst(v), cst(v), cst(row({0, 0})), cst(row({0, 0})), cst(v)).item(), 0.0);
    Tensor s = row({0.7});
    EXPECT_DOUBLE_EQ(evae_loss(cst(s), cst(s), cst(row({1})), cst(row({0})), cst(s)).item(), 0.5);

    // Reconstruction and approximation terms by hand: 1/2 * (1 + 4) and sqrt(9 + 16).
    EXPECT_DOUBLE_EQ(evae_loss(cst(row({0, 0})), cst(row({1, 2})), cst(row({0, 0})), cst(row({0, 0})),
                               cst(row({4, 6})))
                         .item(),
                     2.5 + 5.0);
}

TEST(Evae, KlMatchesMonteCarloAndIsNonNegative) {
    std::mt19937_64 rng(16);
    const Tensor mu = row({0.8, -0.4, 1.5}), logvar = row({-0.6, 0.3, 0.9});
    const double kl = kl_divergence(cst(mu), cst(logvar)).item();
    std::normal_distribution<double> normal;
    const int samples = 100000;
    double acc = 0.0;
    for (int s = 0; s < samples; ++s) {
        for (Eigen::Index c = 0; c < mu.cols(); ++c) {
            const double sd = std::exp(0.5 * logvar(0, c));
            const double z = mu(0, c) + sd * normal(rng);
            const double log_q = -0.5 * std::log(2 * M_PI) - std::log(sd) - 0.5 * std::pow((z - mu(0, c)) / sd, 2);
            const double log_p = -0.5 * std::log(2 * M_PI) - 0.5 * z * z;
            acc += log_q - log_p;
        }
    }
    EXPECT_NEAR(acc / samples, kl, 0.01 * kl);

    for (int t = 0; t < 500; ++t) {
        Tensor m = random_tensor(rng, 2, 4), lv = random_tensor(rng, 2, 4);
        EXPECT_GT(kl_divergence(cst(m), cst(lv)).item(), 0.0);
    }
    EXPECT_EQ(kl_divergence(cst(Tensor::Zero(2, 4)), cst(Tensor::Zero(2, 4))).item(), 0.0);
}

TEST(Prediction, Examples) {
    const Eigen::Index d = 2;
    MlpWeights zero{cst(Tensor::Zero(2 * d, d)), cst(Tensor::Zero(1, d)), cst(Tensor::Zero(d, 1)),
                    cst(Tensor::Zero(1, 1))};
    auto c = predict_rating(cst(Tensor::Zero(1, d)), cst(Tensor::Zero(1, d)), zero, cst(Tensor::Zero(1, 1)),
                            cst(Tensor::Zero(1, 1)), cst(Tensor::Constant(1, 1, 3.7)), kSlope);
    EXPECT_EQ(c.item(), 3.7);
    auto five = predict_rating(cst(row({1, 1})), cst(row({1, 1})), zero, cst(row({0.1})), cst(row({-0.1})),
                               cst(row({3})), kSlope);
    EXPECT_DOUBLE_EQ(five.item(), 5.0);
}

TEST(Prediction, GradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(17);
    const Eigen::Index d = 3, b = 4;
    ad::ParameterStore ps;
    Value p = ps.add("p", random_tensor(rng, b, d)), q = ps.add("q", random_tensor(rng, b, d));
    MlpWeights mlp{ps.add("w_h", random_tensor(rng, 2 * d, d)), ps.add("b_h", random_tensor(rng, 1, d)),
                   ps.add("w_out", random_tensor(rng, d, 1)), ps.add("b_out", random_tensor(rng, 1, 1))};
    Value ub = ps.add("ub", random_tensor(rng, b, 1)), ib = ps.add("ib", random_tensor(rng, b, 1)),
          mu = ps.add("mu", random_tensor(rng, 1, 1));
    Tensor r = random_tensor(rng, b, 1, 1, 5);
    auto report = ad::grad_check(
        [&] { return prediction_loss(predict_rating(p, q, mlp, ub, ib, mu, kSlope), r); }, ps, 1e-6);
    EXPECT_TRUE(report.ok()) << report.worst();
}

TEST(Losses, PredictionAndTotal) {
    EXPECT_EQ(prediction_loss(cst(row({4}).transpose()), row({4}).transpose()).item(), 0.0);
    EXPECT_EQ(prediction_loss(cst(row({4}).transpose()), row({3}).transpose()).item(), 1.0);
    Tensor pred(3, 1), truth(3, 1);
    pred << 3.5, 2.0, 4.25;
    truth << 4, 1, 5;
    EXPECT_DOUBLE_EQ(prediction_loss(cst(pred), truth).item(), 0.25 + 1.0 + 0.5625);
    EXPECT_THROW(prediction_loss(cst(Tensor(0, 1)), Tensor(0, 1)), std::invalid_argument);
    EXPECT_THROW(prediction_loss(cst(pred), Tensor::Zero(2, 1)), ad::ShapeError);

    auto a = Value::scalar(1.25), b = Value::scalar(0.5), z = Value::scalar(0.0);
    EXPECT_EQ(total_loss(a, z).item(), 1.25);
    EXPECT_EQ(total_loss(z, b).item(), 0.5);
    EXPECT_EQ(total_loss(a, b).item(), 1.75);
}

namespace {

ModelConfig small_config(int d) {
    ModelConfig c;
    c.dim = d;
    c.latent_dim = d;
    return c;
}

std::vector<data::NodeId> column(const std::vector<data::Rating>& rs, bool users) {
    std::vector<data::NodeId> out;
    for (const auto& r : rs) out.push_back(users ? r.user : r.item);
    return out;
}

}  // namespace

TEST(Model, ParameterShapesFollowDimension) {
    auto toy = agnn::testing::make_toy(1, 6, 6, 10, 3, 1, 1, 50.0, 2);
    Model m(small_config(8), toy.users, toy.items, 3);
    EXPECT_EQ(m.params().at("user.pref").rows(), 6);
    EXPECT_EQ(m.params().at("user.pref").cols(), 8);
    EXPECT_EQ(m.params().at("item.attr_emb").rows(), 10);
    EXPECT_EQ(m.params().at("user.fuse.w").rows(), 16);
    EXPECT_EQ(m.params().at("mlp.w_out").cols(), 1);
    EXPECT_EQ(m.params().at("user.enc.w_logvar").data(), Tensor::Zero(8, 8));
    for (const auto& [name, v] : m.params())
        EXPECT_LE(v.data().cwiseAbs().maxCoeff(), 0.05) << name;
}

TEST(Model, SubstitutionOnlyForColdNodes) {
    auto toy = agnn::testing::make_toy(2, 6, 6, 10, 3, 1, 1, 50.0, 2);
    Model m(small_config(8), toy.users, toy.items, 3);
    const std::vector<data::NodeId> warm{0}, cold{5};
    Value x = ad::constant(Tensor::Ones(1, 8));
    EXPECT_THROW(m.substitute_cold_preference(Side::User, warm, x), std::logic_error);

    // Zero decoder: the substitute is the decoder bias.
    for (auto name : {"user.dec.w_h", "user.dec.w_out"}) m.params().at(name).data().setZero();
    m.params().at("user.dec.b_out").data().setConstant(0.25);
    EXPECT_EQ(m.substitute_cold_preference(Side::User, cold, x).data(), Tensor::Constant(1, 8, 0.25));
}

TEST(Model, ColdNodeUsesReconstructionWarmNodeUsesTable) {
    auto toy = agnn::testing::make_toy(3, 6, 6, 10, 3, 1, 1, 50.0, 2);
    Model m(small_config(8), toy.users, toy.items, 3);
    const std::vector<data::NodeId> cold{5}, warm{0};
    auto before_cold = m.node_embeddings(Side::User, cold, toy.user_graph).data();
    auto before_warm = m.node_embeddings(Side::User, warm, toy.user_graph).data();
    m.params().at("user.pref").data().row(5).setConstant(9.0);  // never read for a cold node
    EXPECT_EQ(m.node_embeddings(Side::User, cold, toy.user_graph).data(), before_cold);
    bool warm_neighbor_of_5 = false;
    for (auto n : toy.user_graph.sampled[0]) warm_neighbor_of_5 |= n == 5;
    if (!warm_neighbor_of_5) EXPECT_EQ(m.node_embeddings(Side::User, warm, toy.user_graph).data(), before_warm);
    m.params().at("user.pref").data().row(0).setConstant(9.0);
    EXPECT_NE(m.node_embeddings(Side::User, warm, toy.user_graph).data(), before_warm);
}

TEST(Model, WarmPredictionsIndependentOfEvaeBranch) {
    auto toy = agnn::testing::make_toy(4, 8, 8, 10, 4, 0, 0, 30.0, 2);
    auto users = column(toy.ratings, true), items = column(toy.ratings, false);
    Model full(small_config(8), toy.users, toy.items, 5);
    auto cfg = small_config(8);
    cfg.disable_evae = true;
    Model ablated(cfg, toy.users, toy.items, 5);
    Rng noise(1);
    auto a = full.forward(users, items, toy.user_graph, toy.item_graph, &noise, true);
    auto b = full.forward(users, items, toy.user_graph, toy.item_graph, nullptr, false);
    auto c = ablated.forward(users, items, toy.user_graph, toy.item_graph, nullptr, false);
    EXPECT_EQ(a.prediction.data(), b.prediction.data());
    EXPECT_EQ(a.prediction.data(), c.prediction.data());
    EXPECT_GT(a.recon.item(), 0.0);
    EXPECT_EQ(c.recon.item(), 0.0);
}

TEST(Model, ColdBiasIsZero) {
    auto toy = agnn::testing::make_toy(5, 6, 6, 10, 3, 1, 1, 50.0, 2);
    Model m(small_config(4), toy.users, toy.items, 3);
    m.params().at("user.bias").data().setConstant(1.0);
    const std::vector<data::NodeId> users{5, 0}, items{0, 0};
    auto base = m.forward(users, items, toy.user_graph, toy.item_graph, nullptr, false).prediction.data();
    m.params().at("user.bias").data().setConstant(2.0);
    auto moved = m.forward(users, items, toy.user_graph, toy.item_graph, nullptr, false).prediction.data();
    EXPECT_EQ(moved(0, 0), base(0, 0));
    EXPECT_DOUBLE_EQ(moved(1, 0) - base(1, 0), 1.0);
}

TEST(Model, EndToEndGradientCheck) {
    // 6 users, 6 items, K = 10, D = 8, k = 2, fixed noise.
    auto toy = agnn::testing::make_toy(6, 6, 6, 10, 3, 1, 1, 60.0, 2);
    // Weights well above the default init so that every path carries a
    // gradient far above finite-difference round-off.
    auto cfg = small_config(8);
    cfg.init_scale = 0.4;
    Model m(cfg, toy.users, toy.items, 7, 3.0);
    std::mt19937_64 rng(8);
    for (auto& [name, v] : m.params())
        if (name.find("logvar") != std::string::npos || name.find(".b") != std::string::npos)
            v.data() = random_tensor(rng, v.rows(), v.cols(), -0.4, 0.4);
    auto users = column(toy.ratings, true), items = column(toy.ratings, false);
    users.push_back(5);
    items.push_back(2);
    items.push_back(5);
    users.push_back(1);
    Tensor r(static_cast<Eigen::Index>(users.size()), 1);
    for (Eigen::Index i = 0; i < r.rows(); ++i) r(i, 0) = 1.0 + double(i % 5);
    auto loss = [&] {
        Rng noise(99);
        auto out = m.forward(users, items, toy.user_graph, toy.item_graph, &noise, true);
        return total_loss(prediction_loss(out.prediction, r), out.recon);
    };
    auto report = ad::grad_check(loss, m.params(), 1e-4);
    for (const auto& f : report.failures) ADD_FAILURE() << f;
    EXPECT_LT(report.worst(), 1e-4);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    auto toy = agnn::testing::make_toy(9, 6, 6, 10, 3, 1, 1, 50.0, 2);
    Model m(small_config(8), toy.users, toy.items, 11, 3.52986);
    const auto path = std::filesystem::temp_directory_path() / "agnn_ckpt_test.json";
    write_checkpoint(path, m, {{"epoch", 4}});
    auto ck = read_checkpoint(path);
    EXPECT_EQ(ck.meta.at("epoch"), 4);
    EXPECT_EQ(ck.config.dim, 8);
    Model other(small_config(8), toy.users, toy.items, 12);
    load_parameters(other, ck);
    for (const auto& [name, v] : m.params()) EXPECT_EQ(other.params().at(name).data(), v.data()) << name;

    Model wrong(small_config(4), toy.users, toy.items, 12);
    EXPECT_THROW(load_parameters(wrong, ck), data::DataError);
    std::filesystem::remove(path);
}
