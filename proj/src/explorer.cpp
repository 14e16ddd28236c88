#include "ecoreg/explorer.hpp"

#include <algorithm>
#include <numeric>

#include <fmt/format.h>

#include "ecoreg/error.hpp"
#include "ecoreg/parallel.hpp"

namespace ecoreg {

std::vector<FeatureSet> enumerate_feature_sets(const Schema& schema, const FeaturizerConfig& config) {
    std::vector<FeatureSet> out;
    for (const auto& v : schema.variables()) out.push_back(FeatureSet{v.name, {v.name}});
    if (config.include_interactions) {
        for (const auto& [p, q] : schema.interactions()) {
            const auto name = interaction_name(p, q);
            out.push_back(FeatureSet{name, {name}});
        }
    }
    return out;
}

std::vector<GroupRun> run_exploration(const DesignProblem& problem, const std::vector<FeatureSet>& sets,
                                      const CvConfig& config) {
    std::vector<GroupRun> runs(sets.size());
    CvConfig inner = config;
    inner.workers = 1;
    parallel_for(sets.size(), config.workers, [&](std::size_t s) {
        auto [sub, columns] = problem.restrict_groups(sets[s].groups);
        const CvResult cv = cross_validate(sub, inner);
        GroupRun& run = runs[s];
        run.feature_set = sets[s];
        run.cv_deviance = cv.best_deviance;
        for (const auto& e : cv.cv_table) {
            if (e.alpha == cv.best_alpha && e.lambda == cv.best_lambda) {
                run.cv_se = e.se;
                run.flagged = e.flagged;
            }
        }
        run.best_alpha = cv.best_alpha;
        run.best_lambda = cv.best_lambda;
        run.fit = cv.best_fit;
        run.fit.source_columns = std::move(columns);
        run.n_active = run.fit.nonzero_groups;
        run.frac_deviance = fraction_deviance_explained(run.fit.coef, sub);
    });
    std::stable_sort(runs.begin(), runs.end(), [](const GroupRun& a, const GroupRun& b) {
        if (a.cv_deviance != b.cv_deviance) return a.cv_deviance < b.cv_deviance;
        return a.feature_set.name < b.feature_set.name;
    });
    return runs;
}

void write_ranking_csv(std::ostream& out, const std::vector<GroupRun>& runs, std::size_t top_k) {
    out << "rank,feature,deviance,frac_deviance,n_active\n";
    const std::size_t n = top_k == 0 ? runs.size() : std::min(top_k, runs.size());
    for (std::size_t i = 0; i < n; ++i)
        out << fmt::format("{},{},{:.8f},{:.8f},{}\n", i + 1, runs[i].feature_set.name, runs[i].cv_deviance,
                           runs[i].frac_deviance, runs[i].n_active);
}

std::vector<SubgroupQuery> square_plot_queries(const Schema& schema, const std::string& group_name) {
    std::vector<SubgroupQuery> out;
    if (auto idx = schema.index_of(group_name)) {
        const auto& spec = schema.variables()[*idx];
        if (!spec.is_categorical())
            throw NotCategorical("square plots need a categorical variable; '" + group_name + "' is real");
        for (const auto& level : spec.categorical().levels)
            out.emplace_back(level, std::vector<Clause>{LevelClause{spec.name, {level}}}, schema);
        return out;
    }
    for (const auto& [p, q] : schema.interactions()) {
        if (interaction_name(p, q) != group_name) continue;
        const auto& sp = schema.at(p);
        const auto& sq = schema.at(q);
        if (!sp.is_categorical() || !sq.is_categorical())
            throw NotCategorical("square plots need a categorical x categorical interaction; '" +
                                 group_name + "' is not");
        for (const auto& a : sp.categorical().levels)
            for (const auto& b : sq.categorical().levels)
                out.emplace_back(a + "&" + b,
                                 std::vector<Clause>{LevelClause{p, {a}}, LevelClause{q, {b}}}, schema);
        return out;
    }
    throw ValidationError("unknown variable or interaction '" + group_name + "'");
}

std::vector<SquarePlotPoint> square_plot_points(const ModelFit& fit, const SubgroupEmbeddings& embeddings,
                                                std::size_t top_k) {
    TableOptions opts;
    opts.level = Level::National;
    const auto table = exit_poll_table(fit, embeddings, opts);
    std::vector<SquarePlotPoint> points;
    for (const auto& row : table.rows)
        points.push_back(SquarePlotPoint{row.group, row.share_B, row.participation_rate, row.weight_total});
    if (top_k == 0 || top_k >= points.size()) return points;
    std::vector<std::size_t> order(points.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return points[a].bubble_size > points[b].bubble_size;
    });
    order.resize(top_k);
    std::sort(order.begin(), order.end());
    std::vector<SquarePlotPoint> kept;
    for (auto i : order) kept.push_back(points[i]);
    return kept;
}

std::vector<SquarePlotPoint> square_plot_data(const ModelFit& fit, const Featurizer& featurizer,
                                              std::span<const Record> records,
                                              const std::string& group_name, std::size_t top_k) {
    SubgroupEmbeddings emb(featurizer, square_plot_queries(featurizer.schema(), group_name));
    emb.add_all(records);
    return square_plot_points(fit, emb, top_k);
}

void write_square_csv(std::ostream& out, const std::vector<SquarePlotPoint>& points) {
    out << "level,share_B,participation,weight\n";
    for (const auto& p : points)
        out << fmt::format("{},{:.8f},{:.8f},{:.6f}\n", p.category_level, p.share_B_two_party,
                           p.participation_rate, p.bubble_size);
}

}  // namespace ecoreg
