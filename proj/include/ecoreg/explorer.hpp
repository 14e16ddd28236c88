#pragma once

#include <cstddef>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "ecoreg/data_model.hpp"
#include "ecoreg/featurizer.hpp"
#include "ecoreg/inference.hpp"
#include "ecoreg/solver.hpp"

namespace ecoreg {

struct FeatureSet {
    std::string name;
    std::vector<std::string> groups;
};

// One set per declared variable, then one per declared interaction (when the
// config includes interactions), in schema order.
std::vector<FeatureSet> enumerate_feature_sets(const Schema& schema, const FeaturizerConfig& config);

struct GroupRun {
    FeatureSet feature_set;
    double cv_deviance = 0.0;
    double cv_se = 0.0;
    double frac_deviance = 0.0;
    std::size_t n_active = 0;
    bool flagged = false;
    double best_alpha = 0.0;
    double best_lambda = 0.0;
    ModelFit fit;  // refit on the full data, source_columns set
};

// Cross-validates a fresh model per feature set (restricted columns only) and
// returns runs sorted ascending by CV deviance, ties broken by name. Sets
// run on up to config.workers threads; results do not depend on the count.
std::vector<GroupRun> run_exploration(const DesignProblem& problem, const std::vector<FeatureSet>& sets,
                                      const CvConfig& config);

// rank,feature,deviance,frac_deviance,n_active for the first top_k runs.
void write_ranking_csv(std::ostream& out, const std::vector<GroupRun>& runs, std::size_t top_k = 25);

struct SquarePlotPoint {
    std::string category_level;
    double share_B_two_party = 0.0;
    double participation_rate = 0.0;
    double bubble_size = 0.0;
};

// Queries "var=level" for each level of a categorical variable, or
// "p=a&q=b" for each level pair of a categorical x categorical interaction.
// Throws NotCategorical otherwise.
std::vector<SubgroupQuery> square_plot_queries(const Schema& schema, const std::string& group_name);

// National prediction per query; keeps the top_k most populous (0 = all),
// preserving level order.
std::vector<SquarePlotPoint> square_plot_points(const ModelFit& fit, const SubgroupEmbeddings& embeddings,
                                                std::size_t top_k = 12);

std::vector<SquarePlotPoint> square_plot_data(const ModelFit& fit, const Featurizer& featurizer,
                                              std::span<const Record> records,
                                              const std::string& group_name, std::size_t top_k = 12);

void write_square_csv(std::ostream& out, const std::vector<SquarePlotPoint>& points);

}  // namespace ecoreg
