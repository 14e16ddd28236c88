#include "ecoreg/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <boost/random/binomial_distribution.hpp>
#include <boost/random/discrete_distribution.hpp>
#include <boost/random/gamma_distribution.hpp>
#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_int_distribution.hpp>
#include <boost/random/uniform_real_distribution.hpp>
#include <fmt/format.h>

#include "ecoreg/container.hpp"
#include "ecoreg/error.hpp"
#include "ecoreg/io.hpp"
#include "ecoreg/rng.hpp"

namespace ecoreg {

void check_spec(const SyntheticSpec& s) {
    if (s.n_regions == 0) throw ValidationError("n_regions must be positive");
    if (s.min_samples == 0 || s.min_samples > s.max_samples)
        throw ValidationError("samples range must satisfy 1 <= min <= max");
    if (!(s.baseline_other > 0.0 && s.baseline_other < 1.0))
        throw ValidationError("baseline_other must lie in (0, 1)");
    if (!(s.category_concentration > 0.0)) throw ValidationError("category_concentration must be positive");
    if (!(s.real_shift_sd >= 0.0)) throw ValidationError("real_shift_sd must be non-negative");
    if (!(s.weight_min > 0.0 && s.weight_min <= s.weight_max))
        throw ValidationError("weights must satisfy 0 < min <= max");
    if (!(s.voters_per_weight > 0.0)) throw ValidationError("voters_per_weight must be positive");
    if (!(s.effect_scale >= 0.0)) throw ValidationError("effect_scale must be non-negative");
    check_config(s.featurizer);
}

SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
    SyntheticSpec s;
    try {
        s.schema = schema_from_json(j.at("schema"));
        if (j.contains("featurizer")) s.featurizer = featurizer_config_from_json(j.at("featurizer"));
        s.n_regions = j.value("n_regions", s.n_regions);
        if (j.contains("samples")) {
            auto range = j.at("samples").get<std::vector<std::size_t>>();
            if (range.size() != 2) throw ValidationError("samples must be [min, max]");
            s.min_samples = range[0];
            s.max_samples = range[1];
        }
        if (j.contains("effects")) {
            for (const auto& e : j.at("effects")) {
                auto rows = e.at("beta").get<std::vector<std::vector<double>>>();
                GroupEffect g{e.at("group").get<std::string>(), Eigen::MatrixXd(rows.size(), 2)};
                for (std::size_t r = 0; r < rows.size(); ++r) {
                    if (rows[r].size() != 2) throw ValidationError("effect rows must be [A, B] pairs");
                    g.beta(r, 0) = rows[r][0];
                    g.beta(r, 1) = rows[r][1];
                }
                s.effects.push_back(std::move(g));
            }
        }
        if (j.contains("random_active")) s.random_active = j.at("random_active").get<std::vector<std::string>>();
        s.effect_scale = j.value("effect_scale", s.effect_scale);
        s.baseline_other = j.value("baseline_other", s.baseline_other);
        s.category_concentration = j.value("category_concentration", s.category_concentration);
        s.real_shift_sd = j.value("real_shift_sd", s.real_shift_sd);
        s.weight_min = j.value("weight_min", s.weight_min);
        s.weight_max = j.value("weight_max", s.weight_max);
        s.voters_per_weight = j.value("voters_per_weight", s.voters_per_weight);
        s.n_states = j.value("n_states", s.n_states);
        s.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("synthetic spec: ") + e.what());
    }
    check_spec(s);
    return s;
}

namespace {

std::vector<double> dirichlet(Engine& engine, std::size_t k, double concentration) {
    boost::random::gamma_distribution<double> gamma(concentration, 1.0);
    std::vector<double> p(k);
    double sum = 0.0;
    for (auto& x : p) sum += (x = gamma(engine));
    if (sum <= 0.0) return std::vector<double>(k, 1.0 / static_cast<double>(k));
    for (auto& x : p) x /= sum;
    return p;
}

}  // namespace

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
    check_spec(spec);
    const auto& vars = spec.schema.variables();
    SyntheticData out;

    for (std::size_t i = 0; i < spec.n_regions; ++i) {
        auto id = fmt::format("r{:05d}", i);
        out.region_ids.push_back(id);
        if (spec.n_states > 0) out.region_state[id] = fmt::format("s{:02d}", i % spec.n_states);
    }

    // Region composition, then individuals.
    Engine regions = substream(spec.seed, "synth/regions");
    for (const auto& id : out.region_ids) {
        std::vector<std::vector<double>> freqs(vars.size());
        std::vector<double> shifts(vars.size(), 0.0);
        boost::random::normal_distribution<double> shift(0.0, 1.0);
        for (std::size_t v = 0; v < vars.size(); ++v) {
            if (vars[v].is_categorical())
                freqs[v] = dirichlet(regions, vars[v].categorical().levels.size(), spec.category_concentration);
            else
                shifts[v] = spec.real_shift_sd * shift(regions);
        }
        boost::random::uniform_int_distribution<std::size_t> size(spec.min_samples, spec.max_samples);
        const auto n = size(regions);

        Engine people = substream(spec.seed, "synth/records/" + id);
        boost::random::uniform_real_distribution<double> weight(spec.weight_min, spec.weight_max);
        boost::random::normal_distribution<double> noise(0.0, 1.0);
        std::vector<boost::random::discrete_distribution<std::size_t, double>> pick(vars.size());
        for (std::size_t v = 0; v < vars.size(); ++v)
            if (vars[v].is_categorical()) pick[v] = {freqs[v].begin(), freqs[v].end()};
        for (std::size_t r = 0; r < n; ++r) {
            Record rec{id, weight(people), {}};
            for (std::size_t v = 0; v < vars.size(); ++v) {
                if (vars[v].is_categorical())
                    rec.values.emplace_back(vars[v].categorical().levels[pick[v](people)]);
                else
                    rec.values.emplace_back(shifts[v] + noise(people));
            }
            out.records.push_back(std::move(rec));
        }
    }

    out.featurizer = fit_featurizer(spec.schema, spec.featurizer, out.records);
    out.embeddings = embed_regions(out.featurizer, out.records, out.region_ids);
    const auto& layout = out.featurizer.layout();
    const Eigen::MatrixXd& X = out.embeddings.rows;

    // True coefficients.
    out.truth = Coefficients::zero(layout.dim());
    std::set<std::string> seen;
    auto group_of = [&](const std::string& name) -> const FeatureGroup& {
        auto g = layout.find(name);
        if (!g) throw ValidationError("synthetic effect names unknown feature group '" + name + "'");
        if (!seen.insert(name).second) throw ValidationError("feature group '" + name + "' given twice");
        return layout.groups()[*g];
    };
    for (const auto& e : spec.effects) {
        const auto& g = group_of(e.group);
        if (static_cast<std::size_t>(e.beta.rows()) != g.span() || e.beta.cols() != 2)
            throw ValidationError(fmt::format("effect for '{}' must be {} x 2", e.group, g.span()));
        out.truth.beta.block(g.start, 0, g.span(), 2) = e.beta;
    }
    Engine coef = substream(spec.seed, "synth/coefficients");
    boost::random::normal_distribution<double> normal(0.0, 1.0);
    for (const auto& name : spec.random_active) {
        const auto& g = group_of(name);
        Eigen::MatrixXd b(g.span(), 2);
        for (Eigen::Index c = 0; c < 2; ++c)
            for (Eigen::Index r = 0; r < b.rows(); ++r) b(r, c) = normal(coef);
        Eigen::MatrixXd eta = X.middleCols(g.start, g.span()) * b;
        for (Eigen::Index c = 0; c < 2; ++c) {
            Eigen::VectorXd centered = eta.col(c).array() - eta.col(c).mean();
            double sd = std::sqrt(centered.squaredNorm() / static_cast<double>(eta.rows()));
            if (sd > 0.0) b.col(c) *= spec.effect_scale / sd;
        }
        out.truth.beta.block(g.start, 0, g.span(), 2) = b;
    }
    for (const auto& g : layout.groups())
        if (seen.count(g.name) && out.truth.beta.middleRows(g.start, g.span()).squaredNorm() > 0.0)
            out.active_groups.push_back(g.name);

    Eigen::MatrixXd eta = X * out.truth.beta;
    const double base = std::log((1.0 - spec.baseline_other) / 2.0 / spec.baseline_other);
    for (int c = 0; c < 2; ++c) out.truth.intercepts[c] = base - eta.col(c).mean();
    out.truth.intercepts[2] = 0.0;
    out.true_probs = out.truth.probabilities(X);

    // Outcomes: sequential binomials give a multinomial draw.
    Engine counts = substream(spec.seed, "synth/counts");
    for (std::size_t i = 0; i < out.region_ids.size(); ++i) {
        const auto total = static_cast<std::int64_t>(
            std::llround(spec.voters_per_weight * out.embeddings.row_weight_totals[i]));
        const Eigen::Vector3d p = out.true_probs.row(i).transpose();
        boost::random::binomial_distribution<std::int64_t, double> first(total, std::clamp(p[0], 0.0, 1.0));
        const auto a = first(counts);
        double rest = 1.0 - p[0];
        double q = rest > 0.0 ? std::clamp(p[1] / rest, 0.0, 1.0) : 0.0;
        boost::random::binomial_distribution<std::int64_t, double> second(total - a, q);
        const auto b = second(counts);
        out.table.append({out.region_ids[i], out.region_ids[i], RowKind::TrueOutcome,
                          OutcomeCounts({static_cast<double>(a), static_cast<double>(b),
                                         static_cast<double>(total - a - b)})});
    }
    return out;
}

DesignProblem SyntheticData::problem() const {
    Eigen::MatrixXd Y(table.size(), kClasses);
    for (std::size_t i = 0; i < table.size(); ++i)
        for (int k = 0; k < kClasses; ++k) Y(i, k) = table.rows()[i].counts[k];
    auto pb = DesignProblem::make(embeddings.rows, Y, embeddings.layout);
    pb.row_ids = region_ids;
    return pb;
}

nlohmann::json truth_to_json(const SyntheticData& data) {
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& g : data.featurizer.layout().groups()) {
        auto block = data.truth.beta.middleRows(g.start, g.span());
        if (block.squaredNorm() == 0.0) continue;
        std::vector<std::vector<double>> rows;
        for (Eigen::Index r = 0; r < block.rows(); ++r) rows.push_back({block(r, 0), block(r, 1)});
        groups.push_back({{"group", g.name}, {"beta", rows}});
    }
    return {{"active_groups", data.active_groups},
            {"intercepts", {data.truth.intercepts[0], data.truth.intercepts[1], data.truth.intercepts[2]}},
            {"effects", groups}};
}

}  // namespace ecoreg
