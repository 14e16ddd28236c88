#pragma once

#include "ecoreg/synthetic.hpp"

namespace fixture {

// Small mixed-type synthetic world: sex, edu, age, income, two interactions.
inline ecoreg::SyntheticSpec small_world(std::uint64_t seed, std::size_t regions = 40) {
    using namespace ecoreg;
    SyntheticSpec s;
    s.n_regions = regions;
    s.min_samples = 20;
    s.max_samples = 40;
    s.schema = Schema({categorical_variable("sex", {"m", "f"}, "m"),
                       categorical_variable("edu", {"hs", "ba", "grad"}, "hs"), real_variable("age"),
                       real_variable("income")},
                      {{"sex", "edu"}, {"age", "income"}});
    s.featurizer.rff_features_per_real_variable = 8;
    s.featurizer.seed = seed;
    s.random_active = {"edu", "age"};
    s.effect_scale = 0.4;
    s.n_states = 4;
    s.seed = seed;
    return s;
}

}  // namespace fixture
