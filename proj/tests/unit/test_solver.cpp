#include <cmath>
#include <numbers>

#include <doctest.h>

#include "ecoreg/error.hpp"
#include "ecoreg/solver.hpp"
#include "generators.hpp"
#include "oracles.hpp"

using namespace ecoreg;

namespace {

SolverOptions tight(std::size_t gram_limit = 2000) {
    SolverOptions o;
    o.tolerance = 1e-10;
    o.max_sweeps = 100000;
    o.gram_limit = gram_limit;
    return o;
}

Eigen::MatrixXd free_block(const Coefficients& c, const FeatureGroup& g) {
    return c.beta.block(static_cast<Eigen::Index>(g.start), 0, static_cast<Eigen::Index>(g.span()), 2);
}

// Largest violation of the optimality conditions of the penalized objective.
double kkt_violation(const ModelFit& f, const DesignProblem& pb) {
    const Coefficients g = nll_gradient(f.coef, pb);
    double worst = g.intercepts.head<2>().cwiseAbs().maxCoeff();
    const double ridge = f.lambda * (1.0 - f.alpha);
    for (const auto& grp : pb.layout.groups()) {
        const Eigen::MatrixXd b = free_block(f.coef, grp);
        const Eigen::MatrixXd smooth = free_block(g, grp) + ridge * b;
        const double shrink = f.lambda * f.alpha * group_weight(grp);
        if (b.norm() == 0.0)
            worst = std::max(worst, smooth.norm() - shrink);
        else
            worst = std::max(worst, (smooth + shrink * b / b.norm()).norm());
    }
    return worst;
}

// Correlated columns within groups, to stress the block updates.
DesignProblem correlated_problem(std::uint64_t seed, std::size_t n, std::size_t groups, std::size_t width) {
    gen::Rng rng(seed);
    Eigen::MatrixXd X = gen::matrix(rng, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(groups * width));
    for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t j = 1; j < width; ++j)
            X.col(static_cast<Eigen::Index>(g * width + j)) =
                0.8 * X.col(static_cast<Eigen::Index>(g * width)) + 0.6 * X.col(static_cast<Eigen::Index>(g * width + j));
    X.array() += 3.0;  // far from centered
    Coefficients truth = gen::coefficients(rng, groups * width, 0.3);
    for (std::size_t g = groups / 2; g < groups; ++g)
        truth.beta.middleRows(static_cast<Eigen::Index>(g * width), static_cast<Eigen::Index>(width)).setZero();
    truth.intercepts -= (Eigen::RowVectorXd::Constant(X.cols(), 3.0) * truth.beta).transpose();
    truth.intercepts[2] = 0.0;
    return DesignProblem::make(X, gen::model_counts(rng, X, truth, 80), gen::layout(groups, width));
}

}  // namespace

TEST_SUITE("solver") {

TEST_CASE("nll and gradient agree with the long-double oracle") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        gen::Rng rng(seed);
        DesignProblem pb = gen::problem(rng, 30, 4, 2);
        for (Eigen::Index i = 0; i < 30; ++i) pb.likelihood_weights[i] = gen::uniform(rng, 0.1, 2.0);
        const Coefficients c = gen::coefficients(rng, pb.p());
        CHECK(nll(c, pb) == doctest::Approx(static_cast<double>(oracle::reference_nll(c, pb))).epsilon(1e-13));
        const Coefficients g = nll_gradient(c, pb);
        const Coefficients fd = oracle::fd_gradient(c, pb, 1e-5);
        CHECK((g.beta - fd.beta).cwiseAbs().maxCoeff() < 1e-8);
        CHECK((g.intercepts - fd.intercepts).cwiseAbs().maxCoeff() < 1e-8);
    }
}

TEST_CASE("softmax is stable for large logits") {
    const Eigen::Vector3d p = softmax(Eigen::Vector3d(1000.0, 999.0, -1000.0));
    CHECK(p.allFinite());
    CHECK(p.sum() == doctest::Approx(1.0));
    CHECK(p[0] == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));
}

TEST_CASE("null fit is the closed-form pooled-share solution") {
    gen::Rng rng(3);
    DesignProblem pb = gen::problem(rng, 25, 3, 2);
    for (Eigen::Index i = 0; i < 25; ++i) pb.likelihood_weights[i] = gen::uniform(rng, 0.1, 2.0);
    const Eigen::Vector3d expected = oracle::null_intercepts(pb.Y, pb.likelihood_weights);
    CHECK((null_fit(pb).intercepts - expected).cwiseAbs().maxCoeff() < 1e-14);
    const Coefficients g = nll_gradient(null_fit(pb), pb);
    CHECK(g.intercepts.cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("unpenalized fit matches the Newton oracle on both solver paths") {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        gen::Rng rng(seed + 100);
        const Eigen::MatrixXd X = gen::matrix(rng, 40, 5, 0.7);
        const Coefficients truth = gen::coefficients(rng, 5, 0.5);
        const DesignProblem pb = DesignProblem::make(X, gen::model_counts(rng, X, truth, 60), gen::layout(5, 1));
        const Coefficients ref = oracle::newton_mle(pb.X, pb.Y);
        for (std::size_t limit : {std::size_t{2000}, std::size_t{0}}) {
            const ModelFit f = fit_lambda(pb, 1.0, 1e-8, tight(limit));
            CHECK(f.converged);
            CHECK((f.coef.beta - ref.beta).cwiseAbs().maxCoeff() < 1e-4);
            CHECK((f.coef.intercepts - ref.intercepts).cwiseAbs().maxCoeff() < 1e-4);
        }
    }
}

TEST_CASE("lambda_max zeroes every group and leaves the null intercepts") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const DesignProblem pb = correlated_problem(seed, 60, 6, 3);
        for (double alpha : {1.0, 0.5, 0.05}) {
            const double top = lambda_max(pb, alpha);
            const ModelFit at = fit_lambda(pb, alpha, top, tight());
            CHECK(at.nonzero_groups == 0);
            CHECK((at.coef.intercepts - null_fit(pb).intercepts).cwiseAbs().maxCoeff() < 1e-8);
            const ModelFit below = fit_lambda(pb, alpha, 0.95 * top, tight());
            CHECK(below.nonzero_groups >= 1);
        }
    }
    gen::Rng rng(1);
    CHECK_THROWS_AS(lambda_max(gen::problem(rng, 10, 2, 1), 0.0), AlphaZero);
}

TEST_CASE("property: solutions satisfy the optimality conditions on both paths") {
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        const DesignProblem pb = correlated_problem(seed, 80, 8, 3);
        for (double alpha : {1.0, 0.3}) {
            const double lam = 0.2 * lambda_max(pb, alpha);
            const ModelFit gram = fit_lambda(pb, alpha, lam, tight());
            const ModelFit direct = fit_lambda(pb, alpha, lam, tight(0));
            CHECK(gram.converged);
            CHECK(direct.converged);
            CHECK(kkt_violation(gram, pb) < 1e-6);
            CHECK(kkt_violation(direct, pb) < 1e-6);
            CHECK((gram.coef.beta - direct.coef.beta).cwiseAbs().maxCoeff() < 1e-6);
        }
    }
}

TEST_CASE("property: objective trace never increases") {
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        const DesignProblem pb = correlated_problem(seed + 50, 70, 6, 4);
        for (std::size_t limit : {std::size_t{2000}, std::size_t{0}}) {
            SolverOptions o = tight(limit);
            o.record_objective = true;
            const double alpha = seed % 2 ? 1.0 : 0.5;
            const ModelFit f = fit_lambda(pb, alpha, 0.1 * lambda_max(pb, alpha), o);
            REQUIRE(f.objective_trace.size() >= 2);
            for (std::size_t k = 1; k < f.objective_trace.size(); ++k)
                CHECK(f.objective_trace[k] <= f.objective_trace[k - 1] + 1e-12);
            CHECK(f.objective_trace.back() ==
                  doctest::Approx(penalized_objective(f.coef, pb, alpha, f.lambda)).epsilon(1e-12));
        }
    }
}

TEST_CASE("property: group sparsity and a zero reference column") {
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        const DesignProblem pb = correlated_problem(seed + 7, 60, 10, 3);
        const auto path = fit_path(pb, 1.0, PathSpec{20, 1e-2, {}}, tight());
        for (const auto& f : path) {
            CHECK(f.coef.beta.col(2).isZero(0.0));
            CHECK(f.coef.intercepts[2] == 0.0);
            std::size_t active = 0;
            for (const auto& g : pb.layout.groups()) {
                const Eigen::MatrixXd b = free_block(f.coef, g);
                // A group is either entirely zero or carries no exact zeros.
                if (b.isZero(0.0))
                    continue;
                ++active;
                CHECK((b.array() != 0.0).all());
            }
            CHECK(active == f.nonzero_groups);
        }
        CHECK(path.front().nonzero_groups == 0);
        CHECK(path.back().nonzero_groups > 0);
    }
}

TEST_CASE("property: warm and cold starts agree") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const DesignProblem pb = correlated_problem(seed + 300, 60, 6, 2);
        const auto path = fit_path(pb, 0.5, PathSpec{15, 1e-2, {}}, tight());
        for (std::size_t k = 0; k < path.size(); k += 4) {
            const ModelFit cold = fit_lambda(pb, 0.5, path[k].lambda, tight());
            CHECK((cold.coef.beta - path[k].coef.beta).cwiseAbs().maxCoeff() < 1e-6);
            CHECK((cold.coef.intercepts - path[k].coef.intercepts).cwiseAbs().maxCoeff() < 1e-6);
        }
    }
}

TEST_CASE("property: shifting a column only moves the intercepts") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const DesignProblem pb = correlated_problem(seed + 400, 50, 5, 2);
        DesignProblem shifted = pb;
        shifted.X.col(3).array() += 10.0;
        const double lam = 0.05 * lambda_max(pb, 1.0);
        const ModelFit a = fit_lambda(pb, 1.0, lam, tight());
        const ModelFit b = fit_lambda(shifted, 1.0, lam, tight());
        CHECK((a.coef.beta - b.coef.beta).cwiseAbs().maxCoeff() < 1e-6);
        CHECK((a.coef.probabilities(pb.X) - b.coef.probabilities(shifted.X)).cwiseAbs().maxCoeff() < 1e-7);
    }
}

TEST_CASE("likelihood weights act as count multipliers") {
    gen::Rng rng(17);
    DesignProblem pb = gen::problem(rng, 20, 3, 2);
    DesignProblem doubled = pb;
    pb.likelihood_weights[4] = 2.0;
    doubled.Y.row(4) *= 2.0;
    const Coefficients c = gen::coefficients(rng, pb.p());
    CHECK(nll(c, pb) == doctest::Approx(nll(c, doubled)).epsilon(1e-14));
    const ModelFit a = fit_lambda(pb, 1.0, 0.01, tight());
    const ModelFit b = fit_lambda(doubled, 1.0, 0.01, tight());
    CHECK((a.coef.beta - b.coef.beta).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("deviance identities") {
    gen::Rng rng(19);
    const DesignProblem pb = gen::problem(rng, 30, 2, 2);
    Eigen::MatrixXd saturated = pb.Y;
    for (Eigen::Index i = 0; i < saturated.rows(); ++i) saturated.row(i) /= saturated.row(i).sum();
    CHECK(deviance(saturated, pb) < 1e-14);
    CHECK(std::abs(fraction_deviance_explained(null_fit(pb), pb)) < 1e-12);

    Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(9, 3);
    for (Eigen::Index i = 0; i < 9; ++i) onehot(i, i % 3) = 1.0 + static_cast<double>(i % 2);
    const DesignProblem one = DesignProblem::make(Eigen::MatrixXd::Zero(9, 1), onehot, gen::layout(1, 1));
    const Eigen::MatrixXd uniform = Eigen::MatrixXd::Constant(9, 3, 1.0 / 3.0);
    CHECK(std::abs(deviance(uniform, one) - 2.0 * std::log(3.0)) < 1e-12);
    CHECK(std::abs(deviance(uniform, one) - oracle::deviance(uniform, one.Y)) < 1e-12);

    const Coefficients c = gen::coefficients(rng, pb.p());
    CHECK(deviance(c, pb) == doctest::Approx(oracle::deviance(c.probabilities(pb.X), pb.Y)).epsilon(1e-12));
}

TEST_CASE("lambda grid") {
    gen::Rng rng(23);
    const DesignProblem pb = gen::problem(rng, 40, 4, 2);
    const auto grid = lambda_grid(pb, 1.0, PathSpec{10, 1e-3, {}});
    REQUIRE(grid.size() == 10);
    CHECK(grid.front() == doctest::Approx(lambda_max(pb, 1.0)));
    CHECK(grid.back() == doctest::Approx(1e-3 * grid.front()));
    for (std::size_t k = 1; k < grid.size(); ++k) CHECK(grid[k] < grid[k - 1]);
    CHECK(lambda_grid(pb, 0.0, PathSpec{5, 0.1, {}}).front() == doctest::Approx(lambda_max(pb, 1e-3)));
    CHECK_THROWS_AS(lambda_grid(pb, 1.0, PathSpec{5, 1e-3, {1.0, 2.0}}), ValidationError);
    CHECK_THROWS_AS(lambda_grid(pb, 1.5, PathSpec{}), ValidationError);
    CHECK_THROWS_AS(fit_lambda(pb, 1.0, -1.0), ValidationError);
}

TEST_CASE("non-convergence is reported and optionally thrown") {
    const DesignProblem pb = correlated_problem(5, 60, 6, 3);
    SolverOptions o;
    o.max_sweeps = 1;
    const ModelFit f = fit_lambda(pb, 1.0, 0.01 * lambda_max(pb, 1.0), o);
    CHECK_FALSE(f.converged);
    CHECK(f.sweeps == 1);
    o.throw_on_nonconvergence = true;
    CHECK_THROWS_AS(fit_lambda(pb, 1.0, 0.01 * lambda_max(pb, 1.0), o), NotConverged);
}

TEST_CASE("folds hold out outcome rows only and are seeded") {
    gen::Rng rng(29);
    DesignProblem pb = gen::problem(rng, 30, 2, 2);
    for (std::size_t i = 25; i < 30; ++i) pb.row_kinds[i] = RowKind::ExitPollSubgroup;
    const auto folds = assign_folds(pb, 5, 9);
    CHECK(folds == assign_folds(pb, 5, 9));
    CHECK(folds != assign_folds(pb, 5, 10));
    std::vector<int> sizes(5, 0);
    for (std::size_t i = 0; i < 30; ++i) {
        if (i >= 25) {
            CHECK(folds[i] == -1);
        } else {
            REQUIRE(folds[i] >= 0);
            ++sizes[static_cast<std::size_t>(folds[i])];
        }
    }
    for (int s : sizes) CHECK(s == 5);
    CHECK_THROWS_AS(assign_folds(pb, 1, 0), ValidationError);
    CHECK_THROWS_AS(assign_folds(pb, 26, 0), ValidationError);
}

TEST_CASE("cross-validation is deterministic across worker counts") {
    const DesignProblem pb = correlated_problem(77, 80, 6, 2);
    CvConfig cfg;
    cfg.alpha_grid = {0.5, 1.0};
    cfg.path = PathSpec{12, 1e-2, {}};
    cfg.n_folds = 4;
    cfg.seed = 3;
    const CvResult one = cross_validate(pb, cfg);
    cfg.workers = 3;
    const CvResult three = cross_validate(pb, cfg);
    REQUIRE(one.cv_table.size() == 24);
    for (std::size_t k = 0; k < one.cv_table.size(); ++k)
        CHECK(one.cv_table[k].mean_deviance == three.cv_table[k].mean_deviance);
    CHECK(one.best_fit.coef.beta == three.best_fit.coef.beta);
    CHECK(one.one_se_lambda >= one.best_lambda);
    CHECK(one.best_fit.lambda == one.best_lambda);
    CHECK(one.best_fit.alpha == one.best_alpha);
    double best = 1e300;
    for (const auto& e : one.cv_table) best = std::min(best, e.mean_deviance);
    CHECK(one.best_deviance == best);
}

TEST_CASE("restricted problems keep their source columns") {
    gen::Rng rng(31);
    const DesignProblem pb = gen::problem(rng, 20, 4, 2);
    auto [sub, cols] = pb.restrict_groups({"g2", "g0"});
    CHECK(sub.p() == 4);
    CHECK(cols == std::vector<std::size_t>{4, 5, 0, 1});
    CHECK(sub.X.col(0) == pb.X.col(4));
    ModelFit f = fit_lambda(sub, 1.0, 0.001);
    f.source_columns = cols;
    const Eigen::VectorXd mu = pb.X.row(3).transpose();
    CHECK((f.predict_full(mu) - f.predict(sub.X.row(3).transpose())).cwiseAbs().maxCoeff() == 0.0);
}

}
