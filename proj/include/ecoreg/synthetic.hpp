#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "ecoreg/data_model.hpp"
#include "ecoreg/featurizer.hpp"
#include "ecoreg/solver.hpp"

namespace ecoreg {

// Explicit coefficients for one feature group: span x 2 (classes A and B;
// class 3 is the reference).
struct GroupEffect {
    std::string group;
    Eigen::MatrixXd beta;
};

struct SyntheticSpec {
    std::size_t n_regions = 100;
    std::size_t min_samples = 50;
    std::size_t max_samples = 150;
    Schema schema;
    FeaturizerConfig featurizer;

    std::vector<GroupEffect> effects;
    // Groups with random coefficients, rescaled so the group's linear
    // predictor has across-region sd `effect_scale` in both classes.
    std::vector<std::string> random_active;
    double effect_scale = 1.0;

    double baseline_other = 0.4;          // class-3 share at the average region
    double category_concentration = 2.0;  // Dirichlet concentration per level
    double real_shift_sd = 1.0;           // sd of region means of real variables
    double weight_min = 0.5;
    double weight_max = 2.0;
    double voters_per_weight = 100.0;     // region total = round(this * sum of weights)
    std::size_t n_states = 0;             // regions dealt round-robin into states; 0 = none
    std::uint64_t seed = 0;
};

// Throws ValidationError.
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j);
void check_spec(const SyntheticSpec& spec);

struct SyntheticData {
    std::vector<Record> records;      // grouped by region, regions in id order
    RegionTable table;                // one TrueOutcome row per region
    std::vector<std::string> region_ids;
    std::map<std::string, std::string> region_state;

    Featurizer featurizer;            // fitted on `records`
    EmbeddingMatrix embeddings;       // true mean embeddings
    Coefficients truth;
    std::vector<std::string> active_groups;  // layout order
    Eigen::MatrixXd true_probs;       // n_regions x 3

    DesignProblem problem() const;
};

// A pure function of the spec.
SyntheticData generate_synthetic(const SyntheticSpec& spec);

nlohmann::json truth_to_json(const SyntheticData& data);

}  // namespace ecoreg
