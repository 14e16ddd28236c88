// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "ecoreg/container.hpp"
#include "ecoreg/explorer.hpp"
#include "ecoreg/featurizer.hpp"
#include "ecoreg/inference.hpp"
#include "ecoreg/solver.hpp"
#include "ecoreg/synthetic.hpp"
#include "generators.hpp"
#include "oracles.hpp"
#include "tempdir.hpp"

using namespace ecoreg;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

// ---------------------------------------------------------------------------

Outcome gradient_correctness() {
    const auto t0 = Clock::now();
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        gen::Rng rng(seed);
        const DesignProblem pb = gen::problem(rng, 30, 4, 2);
        const Coefficients c = gen::coefficients(rng, pb.p(), 0.7);
        const Coefficients g = nll_gradient(c, pb);
        const Coefficients fd = oracle::fd_gradient(c, pb, 1e-5);
        // Free parameters only: the reference column is pinned at zero.
        Eigen::VectorXd a(2 * pb.p() + 2), b(2 * pb.p() + 2);
        a << g.beta.col(0), g.beta.col(1), g.intercepts.head<2>();
        b << fd.beta.col(0), fd.beta.col(1), fd.intercepts.head<2>();
        worst = std::max(worst, (a - b).norm() / std::max(b.norm(), 1e-300));
    }
    const double t = seconds_since(t0);
    return {worst < 1e-5 && t < 5.0, fmt::format("max relative error {:.2e} over 20 points, {:.2f}s", worst, t)};
}

Outcome unpenalized_equivalence() {
    const auto t0 = Clock::now();
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        gen::Rng rng(seed);
        const Eigen::MatrixXd X = gen::matrix(rng, 40, 5, 0.7);
        const Coefficients truth = gen::coefficients(rng, 5, 0.5);
        const DesignProblem pb = DesignProblem::make(X, gen::model_counts(rng, X, truth, 60), gen::layout(5, 1));
        const Coefficients ref = oracle::newton_mle(pb.X, pb.Y);
        SolverOptions o;
        o.tolerance = 1e-10;
        o.max_sweeps = 100000;
        const ModelFit f = fit_lambda(pb, 1.0, 1e-8, o);
        worst = std::max({worst, (f.coef.beta - ref.beta).cwiseAbs().maxCoeff(),
                          (f.coef.intercepts - ref.intercepts).cwiseAbs().maxCoeff()});
    }
    const double t = seconds_since(t0);
    return {worst < 1e-4 && t < 10.0, fmt::format("max |diff| {:.2e} over 5 problems, {:.2f}s", worst, t)};
}

Outcome path_boundary() {
    std::size_t active = 0;
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        auto spec = SyntheticSpec{};
        spec.schema = Schema({categorical_variable("sex", {"m", "f"}, "m"),
                              categorical_variable("edu", {"a", "b", "c"}, "a"), real_variable("age")},
                             {{"sex", "edu"}});
        spec.n_regions = 80;
        spec.featurizer.rff_features_per_real_variable = 16;
        spec.random_active = {"edu", "age"};
        spec.seed = seed;
        const SyntheticData d = generate_synthetic(spec);
        const DesignProblem pb = d.problem();
        const ModelFit f = fit_lambda(pb, 1.0, lambda_max(pb, 1.0));
        active += f.nonzero_groups;
        const Eigen::Vector3d expected = oracle::null_intercepts(pb.Y, pb.likelihood_weights);
        worst = std::max(worst, (f.coef.intercepts - expected).cwiseAbs().maxCoeff());
    }
    return {active == 0 && worst < 1e-8,
            fmt::format("{} active groups, max intercept error {:.2e} over 5 problems", active, worst)};
}

Outcome sparsity_recovery() {
    const auto t0 = Clock::now();
    std::vector<VariableSpec> vars;
    for (int i = 0; i < 30; ++i) vars.push_back(categorical_variable(fmt::format("v{:02d}", i), {"a", "b", "c"}, "a"));
    std::size_t tp = 0, selected = 0, truth_total = 0, min_tp = 0, min_selected = 0;
    double weakest_signal = 1.0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        SyntheticSpec spec;
        spec.schema = Schema(vars, {});
        spec.n_regions = 500;
        spec.random_active = {"v00", "v05", "v10", "v15", "v20", "v25"};
        spec.effect_scale = 0.15;
        spec.voters_per_weight = 0.5;
        spec.seed = seed;
        const SyntheticData d = generate_synthetic(spec);
        const DesignProblem pb = d.problem();
        weakest_signal = std::min(weakest_signal, fraction_deviance_explained(d.true_probs, pb));

        CvConfig cfg;
        cfg.n_folds = 10;
        cfg.seed = substream_seed(seed, "folds");
        const CvResult cv = cross_validate(pb, cfg);
        const std::set<std::string> truth(spec.random_active.begin(), spec.random_active.end());
        auto score = [&](const ModelFit& f, std::size_t& hits, std::size_t& count) {
            const auto act = f.active_groups();
            for (std::size_t g = 0; g < act.size(); ++g) {
                if (!act[g]) continue;
                ++count;
                hits += truth.count(pb.layout.groups()[g].name);
            }
        };
        score(cv.one_se_fit, tp, selected);
        score(cv.best_fit, min_tp, min_selected);
        truth_total += truth.size();
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(truth_total);
    const double precision = selected ? static_cast<double>(tp) / static_cast<double>(selected) : 0.0;
    const double t = seconds_since(t0);
    return {weakest_signal >= 0.3 && recall >= 0.9 && precision >= 0.6 && t < 120.0,
            fmt::format("one-SE rule: recall {:.3f} precision {:.3f} (min rule: recall {:.3f} precision {:.3f}); "
                        "true frac_deviance >= {:.3f}; {:.1f}s",
                        recall, precision, static_cast<double>(min_tp) / static_cast<double>(truth_total),
                        min_selected ? static_cast<double>(min_tp) / static_cast<double>(min_selected) : 0.0,
                        weakest_signal, t)};
}

Outcome kernel_fidelity() {
    const auto t0 = Clock::now();
    double worst_orth = 0.0;
    std::size_t close = 0, total = 0;
    for (std::size_t d : {1u, 2u, 4u, 8u}) {
        gen::Rng rng(100 + d);
        const Eigen::MatrixXd pts = gen::matrix(rng, 400, static_cast<Eigen::Index>(d));
        const double sigma = median_pairwise_distance(pts);
        const OrfMap m = build_orf(d, 2048, sigma, substream_seed(d, "orf"));
        const Eigen::Index blk = static_cast<Eigen::Index>(d);
        for (Eigen::Index s = 0; s < m.projection().rows(); s += blk) {
            const Eigen::Index h = std::min(blk, m.projection().rows() - s);
            Eigen::MatrixXd b = m.projection().middleRows(s, h);
            for (Eigen::Index i = 0; i < h; ++i) b.row(i).normalize();
            worst_orth = std::max(worst_orth, (b * b.transpose() - Eigen::MatrixXd::Identity(h, h)).cwiseAbs().maxCoeff());
        }
        for (int pair = 0; pair < 1000; ++pair) {
            const Eigen::VectorXd x = pts.row(static_cast<Eigen::Index>(gen::index(rng, 400))).transpose();
            const Eigen::VectorXd y = pts.row(static_cast<Eigen::Index>(gen::index(rng, 400))).transpose();
            const double approx = m.map(std::span<const double>(x.data(), d)).dot(m.map(std::span<const double>(y.data(), d)));
            close += std::abs(approx - oracle::gaussian_kernel(x, y, sigma)) < 0.05;
            ++total;
        }
    }
    const double frac = static_cast<double>(close) / static_cast<double>(total);
    const double t = seconds_since(t0);
    return {frac >= 0.99 && worst_orth < 1e-10 && t < 10.0,
            fmt::format("{:.2f}% of {} pairs within 0.05 (dims 1,2,4,8); block orthogonality error {:.1e}; {:.2f}s",
                        100.0 * frac, total, worst_orth, t)};
}

Outcome partition_property() {
    gen::Rng rng(6);
    const Schema s = gen::schema(rng, 2, 3);
    const auto rs = gen::records(rng, s, 1, 300, 300);
    FeaturizerConfig cfg;
    cfg.rff_features_per_real_variable = 64;
    cfg.seed = 6;
    const Featurizer f = fit_featurizer(s, cfg, rs);
    const Embedding full = mean_embedding(f, rs);
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t parts = 2 + gen::index(rng, 9);
        std::vector<std::vector<Record>> split(parts);
        for (const auto& r : rs) split[gen::index(rng, parts)].push_back(r);
        Eigen::VectorXd combined = Eigen::VectorXd::Zero(full.mu.size());
        double w = 0.0;
        for (const auto& part : split) {
            if (part.empty()) continue;
            const Embedding e = mean_embedding(f, part);
            combined += e.weight_total * e.mu;
            w += e.weight_total;
        }
        worst = std::max(worst, (combined / w - full.mu).cwiseAbs().maxCoeff());
    }
    return {worst < 1e-10, fmt::format("max |diff| {:.2e} over 50 partitions", worst)};
}

Outcome exit_poll_identities() {
    SyntheticSpec spec;
    spec.schema = Schema({categorical_variable("sex", {"m", "f"}, "m"),
                          categorical_variable("edu", {"hs", "ba", "grad"}, "hs"), real_variable("age")},
                         {{"sex", "edu"}});
    spec.n_regions = 60;
    spec.min_samples = 20;
    spec.max_samples = 60;
    spec.featurizer.rff_features_per_real_variable = 16;
    spec.random_active = {"sex", "age"};
    spec.n_states = 5;
    spec.seed = 7;
    const SyntheticData d = generate_synthetic(spec);
    const DesignProblem pb = d.problem();
    const Schema& s = d.featurizer.schema();
    auto q = [&](const std::string& name, const std::string& text) { return SubgroupQuery::parse(name, text, s); };
    const std::vector<std::vector<SubgroupQuery>> partitions = {
        {q("m", "sex=m"), q("f", "sex=f")},
        {q("hs", "edu=hs"), q("ba", "edu=ba"), q("grad", "edu=grad")},
        {q("f-hs", "sex=f&edu=hs"), q("f-rest", "sex=f&edu=ba|grad"), q("m", "sex=m")},
        {q("below", "age=[-inf,0]"), q("above", "age=[0,inf]")},
    };

    gen::Rng rng(7);
    double worst = 0.0;
    std::size_t rows = 0, mismatched = 0, partitions_checked = 0;
    for (int model = 0; model < 10; ++model) {
        ModelFit fit = fit_lambda(pb, 0.5, lambda_max(pb, 0.5) * std::pow(0.5, model));
        if (model >= 5) fit.coef = gen::coefficients(rng, pb.p(), 0.5);
        for (const auto& part : partitions) {
            SubgroupEmbeddings emb(d.featurizer, part);
            emb.add_all(d.records);
            if (emb.off_partition_records() != 0) continue;
            ++partitions_checked;
            for (Level level : {Level::National, Level::State, Level::Region}) {
                TableOptions opts;
                opts.level = level;
                opts.declared_partition = true;
                opts.region_state = &d.region_state;
                const ExitPollTable t = exit_poll_table(fit, emb, opts);
                std::map<std::string, double> frac;
                for (const auto& row : t.rows) {
                    ++rows;
                    worst = std::max({worst, std::abs(row.share_A + row.share_B - 1.0),
                                      std::abs(row.participation_rate + row.other_nonvoting - 1.0)});
                    frac[row.unit_id] += row.fraction_of_electorate.value_or(-1.0);
                }
                for (const auto& [unit, total] : frac) worst = std::max(worst, std::abs(total - 1.0));
            }
            const ExitPollTable national = exit_poll_table(fit, emb, TableOptions{});
            const auto preds = predict_regions(fit, emb);
            if (national.rows.size() != part.size()) {
                ++mismatched;
                continue;
            }
            for (std::size_t k = 0; k < part.size(); ++k) {
                Eigen::Vector3d sum = Eigen::Vector3d::Zero();
                for (const auto& p : preds)
                    if (p.query == k) sum += p.expected_counts;
                mismatched += national.rows[k].expected_counts != sum;
            }
        }
    }
    return {worst < 1e-9 && mismatched == 0 && partitions_checked == 40,
            fmt::format("{} rows, max identity error {:.2e}, {} region->national count mismatches", rows, worst,
                        mismatched)};
}

Outcome subgroup_fidelity() {
    const auto t0 = Clock::now();
    std::size_t sign_ok = 0, magnitude_ok = 0;
    double worst_rel = 0.0;
    const int runs = 40;
    for (int seed = 1; seed <= runs; ++seed) {
        SyntheticSpec spec;
        spec.schema = Schema({categorical_variable("sex", {"m", "f"}, "m"),
                              categorical_variable("edu", {"hs", "ba", "grad"}, "hs"), real_variable("age")},
                             {{"sex", "edu"}});
        spec.n_regions = 500;
        spec.featurizer.rff_features_per_real_variable = 16;
        Eigen::MatrixXd beta(1, 2);
        beta << 0.0, 1.0;
        spec.effects = {{"sex", beta}};
        spec.seed = static_cast<std::uint64_t>(seed);
        const SyntheticData d = generate_synthetic(spec);

        CvConfig cfg;
        cfg.alpha_grid = {0.5, 1.0};
        cfg.path.n_lambda = 40;
        cfg.n_folds = 5;
        cfg.seed = substream_seed(spec.seed, "folds");
        const CvResult cv = cross_validate(d.problem(), cfg);

        const Schema& s = d.featurizer.schema();
        SubgroupEmbeddings emb(d.featurizer, {SubgroupQuery::parse("women", "sex=f", s),
                                              SubgroupQuery::parse("men", "sex=m", s)});
        emb.add_all(d.records);
        const double estimate = gender_gap(cv.best_fit, emb).national.gap_pp;

        // Individual-level truth: only sex moves the logits.
        const Eigen::Vector3d a = d.truth.intercepts;
        auto share_b = [](double ea, double eb) { return std::exp(eb) / (std::exp(ea) + std::exp(eb)); };
        const double truth = 100.0 * (share_b(a[0], a[1] + 1.0) - share_b(a[0], a[1]));

        sign_ok += (estimate > 0.0) == (truth > 0.0);
        const double rel = std::abs(estimate - truth) / std::abs(truth);
        magnitude_ok += rel <= 0.3;
        worst_rel = std::max(worst_rel, rel);
    }
    const double need = 0.95 * runs;
    return {static_cast<double>(sign_ok) >= need && static_cast<double>(magnitude_ok) >= need,
            fmt::format("sign correct {}/{}, within 30% {}/{} (worst relative error {:.3f}); {:.1f}s", sign_ok,
                        runs, magnitude_ok, runs, worst_rel, seconds_since(t0))};
}

Outcome exploration_ranking() {
    const auto t0 = Clock::now();
    const std::vector<std::string> generators = {"sex", "edu", "age", "region_type"};
    std::size_t first = 0, identical = 0;
    std::vector<std::string> misses;
    for (int seed = 1; seed <= 20; ++seed) {
        const std::string& active = generators[static_cast<std::size_t>(seed) % generators.size()];
        SyntheticSpec spec;
        spec.schema = Schema({categorical_variable("sex", {"m", "f"}, "m"),
                              categorical_variable("edu", {"hs", "some", "ba", "grad"}, "hs"), real_variable("age"),
                              categorical_variable("region_type", {"urban", "suburban", "rural"}, "urban"),
                              real_variable("income")},
                             {{"sex", "edu"}});
        spec.n_regions = 150;
        spec.min_samples = 30;
        spec.max_samples = 60;
        spec.featurizer.rff_features_per_real_variable = 16;
        spec.random_active = {active};
        spec.effect_scale = 0.3;
        spec.seed = static_cast<std::uint64_t>(seed);
        const SyntheticData d = generate_synthetic(spec);
        const DesignProblem pb = d.problem();
        const auto sets = enumerate_feature_sets(spec.schema, spec.featurizer);

        CvConfig cfg;
        cfg.alpha_grid = {1.0};
        cfg.path.n_lambda = 20;
        cfg.n_folds = 5;
        cfg.seed = substream_seed(spec.seed, "folds");
        std::ostringstream a, b;
        const auto runs = run_exploration(pb, sets, cfg);
        write_ranking_csv(a, runs);
        cfg.workers = 3;
        write_ranking_csv(b, run_exploration(pb, sets, cfg));
        identical += a.str() == b.str();
        if (runs.front().feature_set.name == active)
            ++first;
        else
            misses.push_back(fmt::format("seed {} ({} ranked {})", seed, active, runs.front().feature_set.name));
    }
    std::string miss_text;
    for (const auto& m : misses) miss_text += "; " + m;
    return {first >= 18 && identical == 20,
            fmt::format("generator ranked first in {}/20 seeds, rankings identical across reruns {}/20; {:.1f}s{}",
                        first, identical, seconds_since(t0), miss_text)};
}

Outcome deviance_identities() {
    gen::Rng rng(10);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const DesignProblem pb = gen::problem(rng, 25, 3, 2);
        Eigen::MatrixXd saturated = pb.Y;
        for (Eigen::Index i = 0; i < saturated.rows(); ++i) saturated.row(i) /= saturated.row(i).sum();
        worst = std::max(worst, std::abs(deviance(saturated, pb)));
        worst = std::max(worst, std::abs(fraction_deviance_explained(null_fit(pb), pb)));

        const Eigen::Index n = 1 + static_cast<Eigen::Index>(gen::index(rng, 30));
        Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(n, 3);
        for (Eigen::Index i = 0; i < n; ++i) onehot(i, static_cast<Eigen::Index>(gen::index(rng, 3))) = 1.0;
        const DesignProblem one = DesignProblem::make(Eigen::MatrixXd::Zero(n, 1), onehot, gen::layout(1, 1));
        worst = std::max(worst, std::abs(deviance(Eigen::MatrixXd::Constant(n, 3, 1.0 / 3.0), one) - 2.0 * std::log(3.0)));
    }
    return {worst < 1e-12, fmt::format("max identity error {:.2e} over 20 problems", worst)};
}

Outcome cli_reproducibility(const std::string& cli, const std::string& config) {
    if (cli.empty() || config.empty()) return {false, "no CLI binary or config given (--cli, --cli-config)"};
    fixture::TempDir dir;
    const std::vector<std::string> commands = {"synth", "featurize", "fit", "predict", "explore", "report"};
    const std::vector<std::pair<std::string, unsigned>> runs = {{"a", 1}, {"b", 4}, {"c", 2}};
    for (const auto& [run, workers] : runs) {
        fs::create_directories(dir.file(run));
        fs::copy_file(config, dir.file(run + "/config.json"));
        for (const auto& cmd : commands) {
            const std::string line = fmt::format("\"{}\" {} --config \"{}\" --workers {} > /dev/null", cli, cmd,
                                                 dir.file(run + "/config.json"), workers);
            if (std::system(line.c_str()) != 0) return {false, fmt::format("run {}: '{}' failed", run, cmd)};
        }
    }
    std::size_t files = 0;
    for (const auto& entry : fs::directory_iterator(dir.file("a"))) {
        const auto name = entry.path().filename().string();
        const std::string ref = fixture::slurp(entry.path().string());
        for (const auto& other : {"b", "c"})
            if (!fs::exists(dir.file(std::string(other) + "/" + name)) ||
                fixture::slurp(dir.file(std::string(other) + "/" + name)) != ref)
                return {false, fmt::format("'{}' differs in run {}", name, other)};
        ++files;
    }
    return {files >= 20, fmt::format("{} artifacts from 6 commands byte-identical across 3 runs (1, 4, 2 workers)",
                                     files)};
}

Outcome round_trip() {
    fixture::TempDir dir;
    std::size_t fits = 0, bit_mismatch = 0;
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        SyntheticSpec spec;
        spec.schema = Schema({categorical_variable("sex", {"m", "f"}, "m"), real_variable("age"), real_variable("inc")},
                             {{"age", "inc"}, {"sex", "age"}});
        spec.n_regions = 60;
        spec.featurizer.rff_features_per_real_variable = 16;
        spec.random_active = {"age", "sex"};
        spec.seed = seed;
        const SyntheticData d = generate_synthetic(spec);
        const DesignProblem pb = d.problem();
        CvConfig cfg;
        cfg.path.n_lambda = 20;
        cfg.n_folds = 4;
        cfg.seed = seed;
        const CvResult cv = cross_validate(pb, cfg);
        for (const ModelFit* f : {&cv.best_fit, &cv.one_se_fit}) {
            const auto path = dir.file(fmt::format("fit{}.bin", fits++));
            save_fit(path, *f);
            const ModelFit back = load_fit(path);
            bit_mismatch += !(back.coef.beta == f->coef.beta && back.coef.intercepts == f->coef.intercepts &&
                              back.lambda == f->lambda && back.alpha == f->alpha);
            worst = std::max(worst, (back.coef.probabilities(pb.X) - f->coef.probabilities(pb.X)).cwiseAbs().maxCoeff());
        }
    }
    return {bit_mismatch == 0 && worst <= 1e-12,
            fmt::format("{} fits, {} with coefficient bit differences, max prediction diff {:.1e}", fits, bit_mismatch,
                        worst)};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance checks"};
    std::string cli, cli_config;
    std::vector<int> only;
    app.add_option("--cli", cli, "path to the ecoreg binary");
    app.add_option("--cli-config", cli_config, "run configuration for the reproducibility check");
    app.add_option("--only", only, "criteria to run (default all)");
    CLI11_PARSE(app, argc, argv);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"gradient correctness", gradient_correctness},
        {"unpenalized equivalence", unpenalized_equivalence},
        {"path boundary", path_boundary},
        {"group sparsity recovery", sparsity_recovery},
        {"kernel fidelity", kernel_fidelity},
        {"embedding partition property", partition_property},
        {"exit-poll table identities", exit_poll_identities},
        {"subgroup fidelity end-to-end", subgroup_fidelity},
        {"exploration ranking", exploration_ranking},
        {"deviance identities", deviance_identities},
        {"reproducibility", [&] { return cli_reproducibility(cli, cli_config); }},
        {"round-trip", round_trip},
    };
    int failed = 0;
    for (std::size_t k = 0; k < criteria.size(); ++k) {
        const int id = static_cast<int>(k) + 1;
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
        Outcome o;
        try {
            o = criteria[k].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        fmt::print("{} {:2d} {}: {}\n", o.pass ? "PASS" : "FAIL", id, criteria[k].first, o.detail);
        std::fflush(stdout);
    }
    return failed;
}
