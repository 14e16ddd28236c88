#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <boost/version.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "ecoreg/container.hpp"
#include "ecoreg/error.hpp"
#include "ecoreg/explorer.hpp"
#include "ecoreg/inference.hpp"
#include "ecoreg/io.hpp"
#include "ecoreg/rng.hpp"
#include "ecoreg/solver.hpp"
#include "ecoreg/synthetic.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ecoreg;

namespace {

constexpr const char* kVersion = "0.1.0";

struct Options {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<unsigned> workers;
    std::optional<std::string> output_dir;
};

// Effective run configuration: the config file plus command-line overrides.
class Run {
public:
    Run(std::string command, const Options& opt) : command_(std::move(command)) {
        std::ifstream in(opt.config_path);
        if (!in) throw ValidationError("cannot open config '" + opt.config_path + "'");
        try {
            in >> config_;
        } catch (const json::exception& e) {
            throw ValidationError("config: " + std::string(e.what()));
        }
        if (!config_.is_object()) throw ValidationError("config must be a JSON object");
        base_ = fs::path(opt.config_path).parent_path();
        if (opt.seed) config_["seed"] = *opt.seed;
        if (!config_.contains("seed") || !config_["seed"].is_number_unsigned())
            throw ValidationError("config: a non-negative integer 'seed' is required");
        seed_ = config_["seed"].get<std::uint64_t>();
        workers_ = opt.workers ? *opt.workers : config_.value("workers", 0u);
        if (opt.output_dir)
            out_ = *opt.output_dir;
        else
            out_ = resolve(config_.value("output_dir", std::string("out")));
        fs::create_directories(out_);
    }

    const json& config() const { return config_; }
    json section(const std::string& key) const {
        return config_.contains(key) ? config_.at(key) : json::object();
    }
    std::uint64_t seed() const { return seed_; }
    unsigned workers() const { return workers_; }
    fs::path out(const std::string& name) const { return out_ / name; }

    fs::path resolve(const std::string& p) const {
        fs::path path(p);
        return path.is_absolute() ? path : base_ / path;
    }
    std::optional<fs::path> path(const std::string& key) const {
        auto paths = section("paths");
        if (!paths.contains(key) || paths[key].is_null()) return std::nullopt;
        return resolve(paths[key].get<std::string>());
    }
    fs::path required_path(const std::string& key) const {
        auto p = path(key);
        if (!p) throw ValidationError("config: paths." + key + " is required for '" + command_ + "'");
        if (!fs::exists(*p)) throw ValidationError("input '" + p->string() + "' does not exist");
        return *p;
    }
    // Artifact produced by an earlier command; defaults to the output dir.
    fs::path artifact(const std::string& key, const std::string& default_name) const {
        auto p = path(key);
        fs::path full = p ? *p : out(default_name);
        if (!fs::exists(full)) throw ValidationError("artifact '" + full.string() + "' does not exist");
        return full;
    }

    void input(const std::string& name, const fs::path& p) { inputs_[name] = file_sha256(p.string()); }
    void output(const fs::path& p) { outputs_[p.filename().string()] = file_sha256(p.string()); }

    std::string config_hash() const { return sha256_hex(hashed_config().dump()); }
    json run_info() const { return {{"config_hash", config_hash()}, {"seed", seed_}, {"version", kVersion}}; }

    void write_manifest() const {
        json m;
        m["command"] = command_;
        m["config"] = hashed_config();
        m["config_hash"] = config_hash();
        m["seed"] = seed_;
        m["inputs"] = inputs_;
        m["outputs"] = outputs_;
        m["versions"] = {{"ecoreg", kVersion},
                         {"container_format", kFormatVersion},
                         {"eigen", fmt::format("{}.{}.{}", EIGEN_WORLD_VERSION, EIGEN_MAJOR_VERSION,
                                               EIGEN_MINOR_VERSION)},
                         {"boost", BOOST_LIB_VERSION},
                         {"fmt", FMT_VERSION}};
        std::ofstream f(out("manifest_" + command_ + ".json"), std::ios::binary | std::ios::trunc);
        f << m.dump(2) << '\n';
    }

    // Worker count and output location never change results, so they stay
    // out of the hash.
    json hashed_config() const {
        json c = config_;
        c.erase("workers");
        c.erase("output_dir");
        return c;
    }

private:
    std::string command_;
    json config_;
    fs::path base_;
    fs::path out_;
    std::uint64_t seed_ = 0;
    unsigned workers_ = 0;
    std::map<std::string, std::string> inputs_;
    std::map<std::string, std::string> outputs_;
};

std::ofstream open_out(const fs::path& p) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write '" + p.string() + "'");
    return f;
}

FeaturizerConfig featurizer_config(const Run& run) {
    FeaturizerConfig base;
    base.seed = substream_seed(run.seed(), "featurizer");
    return featurizer_config_from_json(run.section("featurizer"), base);
}

CvConfig cv_config(const Run& run, const json& overrides = json::object()) {
    json s = run.section("solver");
    for (auto& [k, v] : overrides.items()) s[k] = v;
    CvConfig c;
    try {
        if (s.contains("alpha_grid")) c.alpha_grid = s["alpha_grid"].get<std::vector<double>>();
        c.path.n_lambda = s.value("n_lambda", c.path.n_lambda);
        if (s.contains("lambda_min_ratio") && !s["lambda_min_ratio"].is_null())
            c.path.lambda_min_ratio = s["lambda_min_ratio"].get<double>();
        c.n_folds = s.value("folds", c.n_folds);
        c.options.tolerance = s.value("tolerance", c.options.tolerance);
        c.options.max_sweeps = s.value("max_sweeps", c.options.max_sweeps);
    } catch (const json::exception& e) {
        throw ValidationError("config solver: " + std::string(e.what()));
    }
    if (c.alpha_grid.empty()) throw ValidationError("config solver: alpha_grid is empty");
    for (double a : c.alpha_grid)
        if (!(a >= 0.0 && a <= 1.0)) throw ValidationError("config solver: alpha must lie in [0, 1]");
    if (c.n_folds < 2) throw ValidationError("config solver: folds must be >= 2");
    c.seed = substream_seed(run.seed(), "folds");
    c.workers = run.workers();
    return c;
}

SubgroupQuery query_from_json(const json& q, const Schema& schema) {
    try {
        return SubgroupQuery::parse(q.at("name").get<std::string>(), q.at("query").get<std::string>(), schema);
    } catch (const json::exception& e) {
        throw ValidationError("query definitions need 'name' and 'query': " + std::string(e.what()));
    }
}

std::map<std::string, std::string> region_states(Run& run) {
    auto p = run.path("regions");
    if (!p) return {};
    if (!fs::exists(*p)) throw ValidationError("input '" + p->string() + "' does not exist");
    run.input("regions", *p);
    return load_region_states(p->string());
}

// ---------------------------------------------------------------------------

int cmd_synth(Run& run) {
    json j = run.section("synth");
    if (!j.contains("seed")) j["seed"] = substream_seed(run.seed(), "synthesis");
    if (!j.contains("schema")) {
        auto schema_path = run.required_path("schema");
        run.input("schema", schema_path);
        std::ifstream in(schema_path);
        j["schema"] = json::parse(in);
    }
    if (!j.contains("featurizer")) j["featurizer"] = run.section("featurizer");
    if (!j["featurizer"].contains("seed")) j["featurizer"]["seed"] = featurizer_config(run).seed;
    const auto spec = synthetic_spec_from_json(j);
    const auto data = generate_synthetic(spec);

    write_schema(run.out("schema.json").string(), spec.schema);
    write_records(run.out("records.csv").string(), spec.schema, data.records);
    std::vector<GeoCounts> counts;
    for (const auto& row : data.table.rows()) counts.push_back({row.region_id, row.counts});
    write_outcomes(run.out("outcomes.csv").string(), counts);
    std::vector<std::string> outputs{"schema.json", "records.csv", "outcomes.csv", "truth.json"};
    if (!data.region_state.empty()) {
        write_region_states(run.out("regions.csv").string(), data.region_state);
        outputs.push_back("regions.csv");
    }

    // Optional exit polls: true per-state subgroup shares for one variable.
    if (j.contains("exitpoll_variable")) {
        if (data.region_state.empty()) throw ValidationError("synth: exitpoll_variable needs n_states > 0");
        auto queries = square_plot_queries(spec.schema, j["exitpoll_variable"].get<std::string>());
        std::map<std::string, std::vector<Record>> by_state;
        for (const auto& r : data.records) by_state[data.region_state.at(r.region_id)].push_back(r);
        std::vector<ExitPollRecord> polls;
        for (const auto& [state, recs] : by_state) {
            for (const auto& q : queries) {
                auto e = subgroup_embedding(data.featurizer, recs, q);
                if (!e) continue;
                const Eigen::Vector3d p = data.truth.probabilities(e->mu);
                const double turnout = p[0] + p[1];
                polls.push_back({state, q.name(), q.to_string(), p[0] / turnout, p[1] / turnout, turnout});
            }
        }
        write_exitpoll(run.out("exitpoll.csv").string(), polls);
        outputs.push_back("exitpoll.csv");
    }

    auto truth = open_out(run.out("truth.json"));
    truth << truth_to_json(data).dump(2) << '\n';
    truth.close();
    for (const auto& name : outputs) run.output(run.out(name));
    fmt::print("synth: {} regions, {} records, {} active groups\n", data.region_ids.size(),
               data.records.size(), data.active_groups.size());
    return 0;
}

int cmd_featurize(Run& run) {
    auto schema_path = run.required_path("schema");
    auto records_path = run.required_path("records");
    auto outcomes_path = run.required_path("outcomes");
    run.input("schema", schema_path);
    run.input("records", records_path);
    run.input("outcomes", outcomes_path);
    const auto schema = read_schema(schema_path.string());
    const auto records = load_records(records_path.string(), schema);
    const auto counts = load_outcomes(outcomes_path.string());
    Crosswalk crosswalk;
    if (auto cw = run.path("crosswalk")) {
        if (!fs::exists(*cw)) throw ValidationError("input '" + cw->string() + "' does not exist");
        run.input("crosswalk", *cw);
        crosswalk = load_crosswalk(cw->string());
    } else {
        std::vector<std::string> ids;
        for (const auto& c : counts) ids.push_back(c.geo_id);
        crosswalk = Crosswalk::identity(ids);
    }
    const auto table = merge_outcomes(counts, crosswalk);

    EmbeddingArtifact a;
    a.featurizer = fit_featurizer(schema, featurizer_config(run), records);
    std::vector<std::string> regions;
    for (const auto& row : table.rows()) regions.push_back(row.region_id);
    a.embeddings = embed_regions(a.featurizer, records, regions, run.workers());
    a.embeddings.row_ids = regions;
    a.region_ids = regions;
    a.counts.resize(static_cast<Eigen::Index>(table.size()), kClasses);
    for (std::size_t i = 0; i < table.size(); ++i)
        for (int k = 0; k < kClasses; ++k) a.counts(static_cast<Eigen::Index>(i), k) = table.rows()[i].counts[k];
    a.likelihood_weights = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(table.size()));

    std::size_t n_aug = 0;
    if (auto ep = run.path("exitpoll")) {
        if (!fs::exists(*ep)) throw ValidationError("input '" + ep->string() + "' does not exist");
        run.input("exitpoll", *ep);
        const auto states = region_states(run);
        if (states.empty()) throw ValidationError("config: exit polls need paths.regions (region_id,state)");
        const json opts = run.section("exitpoll");
        const auto polls = load_exitpoll(ep->string());
        double default_participation;
        if (opts.contains("default_participation")) {
            default_participation = opts["default_participation"].get<double>();
        } else {
            // National two-party participation of the true-outcome rows.
            double ab = a.counts.col(0).sum() + a.counts.col(1).sum();
            default_participation = ab / a.counts.sum();
        }
        const double row_weight = opts.value("row_weight", 1.0);
        if (!(row_weight >= 0.0)) throw ValidationError("exitpoll.row_weight must be non-negative");
        const auto aug = build_augmentation_rows(polls, a.featurizer, records, states, default_participation);
        const auto n0 = a.counts.rows();
        a.counts.conservativeResize(n0 + static_cast<Eigen::Index>(aug.rows.size()), kClasses);
        a.likelihood_weights.conservativeResize(a.counts.rows());
        for (std::size_t i = 0; i < aug.rows.size(); ++i) {
            const auto r = n0 + static_cast<Eigen::Index>(i);
            a.embeddings.append(aug.rows[i].row_id, RowKind::ExitPollSubgroup, aug.embeddings[i]);
            for (int k = 0; k < kClasses; ++k) a.counts(r, k) = aug.rows[i].counts[k];
            a.likelihood_weights[r] = row_weight;
            a.region_ids.push_back(aug.rows[i].region_id);
        }
        n_aug = aug.rows.size();
    }
    a.run_info = run.run_info();
    const auto path = run.out("embeddings.bin");
    save_embeddings(path.string(), a);
    run.output(path);
    fmt::print("featurize: n = {} ({} exit-poll rows), p = {}, groups = {}\n", a.embeddings.n(), n_aug,
               a.embeddings.p(), a.embeddings.layout.size());
    return 0;
}

int cmd_fit(Run& run) {
    const auto emb_path = run.artifact("embeddings", "embeddings.bin");
    run.input("embeddings", emb_path);
    const auto a = load_embeddings(emb_path.string());
    const auto problem = a.problem();
    const auto cfg = cv_config(run);
    const auto cv = cross_validate(problem, cfg);
    const std::string selection = run.section("solver").value("selection", std::string("min"));
    if (selection != "min" && selection != "one_se")
        throw ValidationError("config solver.selection must be \"min\" or \"one_se\"");
    const ModelFit& fit = selection == "min" ? cv.best_fit : cv.one_se_fit;

    const auto fit_path = run.out("fit.bin");
    save_fit(fit_path.string(), fit, run.run_info());
    run.output(fit_path);

    const auto cv_path = run.out("cv_table.csv");
    {
        auto f = open_out(cv_path);
        f << "alpha,lambda,mean_deviance,se,flagged\n";
        for (const auto& e : cv.cv_table)
            f << fmt::format("{},{},{},{},{}\n", e.alpha, e.lambda, e.mean_deviance, e.se, e.flagged ? 1 : 0);
    }
    run.output(cv_path);

    std::vector<std::string> active;
    const auto flags = fit.active_groups();
    for (std::size_t g = 0; g < flags.size(); ++g)
        if (flags[g]) active.push_back(fit.layout.groups()[g].name);
    json summary{{"alpha", fit.alpha},
                 {"lambda", fit.lambda},
                 {"selection", selection},
                 {"cv_deviance", cv.best_deviance},
                 {"one_se_lambda", cv.one_se_lambda},
                 {"nonzero_groups", fit.nonzero_groups},
                 {"total_groups", fit.layout.size()},
                 {"nonzero_features", (fit.coef.beta.array() != 0.0).rowwise().any().count()},
                 {"total_features", fit.layout.dim()},
                 {"frac_deviance", fraction_deviance_explained(fit.coef, problem)},
                 {"converged", fit.converged},
                 {"active_groups", active}};
    const auto summary_path = run.out("fit_summary.json");
    {
        auto f = open_out(summary_path);
        f << summary.dump(2) << '\n';
    }
    run.output(summary_path);
    fmt::print("fit: alpha = {}, lambda = {:.6g}, {} of {} groups active, cv deviance {:.6g}\n", fit.alpha,
               fit.lambda, fit.nonzero_groups, fit.layout.size(), cv.best_deviance);
    return 0;
}

int cmd_predict(Run& run) {
    const auto emb_path = run.artifact("embeddings", "embeddings.bin");
    const auto fit_path = run.artifact("fit", "fit.bin");
    const auto records_path = run.required_path("records");
    run.input("embeddings", emb_path);
    run.input("fit", fit_path);
    run.input("records", records_path);
    const auto a = load_embeddings(emb_path.string());
    const auto fit = load_fit(fit_path.string());
    const auto& schema = a.featurizer.schema();
    const auto states = region_states(run);
    const json opts = run.section("predict");
    const double floor = opts.value("low_support_floor", 10.0);

    // Every query set is filled in one streaming pass over the records.
    struct Table {
        std::string name;
        bool partition;
        std::vector<Level> levels;
        SubgroupEmbeddings emb;
    };
    std::vector<Table> tables;
    for (const auto& t : opts.value("tables", json::array())) {
        std::vector<SubgroupQuery> queries;
        for (const auto& q : t.at("queries")) queries.push_back(query_from_json(q, schema));
        std::vector<Level> levels;
        for (const auto& l : t.value("levels", std::vector<std::string>{"national"}))
            levels.push_back(level_from_string(l));
        tables.push_back({t.at("name").get<std::string>(), t.value("partition", false), levels,
                          SubgroupEmbeddings(a.featurizer, std::move(queries))});
    }
    std::optional<SubgroupEmbeddings> gap;
    if (opts.contains("gap")) {
        const auto& g = opts["gap"];
        gap.emplace(a.featurizer, std::vector<SubgroupQuery>{query_from_json(g.at("first"), schema),
                                                            query_from_json(g.at("second"), schema)});
    }
    RecordReader reader(records_path.string(), schema);
    Record r;
    while (reader.next(r)) {
        for (auto& t : tables) t.emb.add(r);
        if (gap) gap->add(r);
    }

    json meta{{"model_hash", file_sha256(fit_path.string())}, {"config_hash", run.config_hash()},
              {"seed", run.seed()}, {"config", run.hashed_config()}};
    json table_meta = json::object();
    for (const auto& t : tables) {
        std::vector<ExitPollRow> rows;
        json info{{"partition_verified", false}, {"low_support", json::array()}, {"empty", json::array()}};
        for (auto level : t.levels) {
            TableOptions to;
            to.level = level;
            to.declared_partition = t.partition;
            to.region_state = &states;
            to.low_support_floor = floor;
            const auto table = exit_poll_table(fit, t.emb, to);
            rows.insert(rows.end(), table.rows.begin(), table.rows.end());
            if (level == Level::National) {
                info["partition_verified"] = table.partition_verified;
                for (const auto& ls : table.low_support)
                    info["low_support"].push_back({ls.region_id, t.emb.queries()[ls.query].name()});
                for (const auto& [region, query] : table.empty) info["empty"].push_back({region, query});
            }
        }
        const auto path = run.out("exit_poll_" + t.name + ".csv");
        auto f = open_out(path);
        write_exit_poll_csv(f, rows);
        f.close();
        run.output(path);
        table_meta[t.name] = info;
    }
    meta["tables"] = table_meta;
    if (gap) {
        const auto result = gender_gap(fit, *gap, floor);
        const auto path = run.out("gap.csv");
        auto f = open_out(path);
        write_gap_csv(f, result);
        f.close();
        run.output(path);
        meta["gap_omitted_regions"] = result.omitted;
    }
    {
        const auto path = run.out("fit_scatter.csv");
        auto f = open_out(path);
        write_scatter_csv(f, fit_scatter(fit, a.problem()));
        f.close();
        run.output(path);
    }
    const auto meta_path = run.out("predict_meta.json");
    {
        auto f = open_out(meta_path);
        f << meta.dump(2) << '\n';
    }
    run.output(meta_path);
    fmt::print("predict: {} tables{}, fit scatter for {} rows\n", tables.size(), gap ? " and gap" : "",
               a.embeddings.n());
    return 0;
}

int cmd_explore(Run& run) {
    const auto emb_path = run.artifact("embeddings", "embeddings.bin");
    run.input("embeddings", emb_path);
    const auto a = load_embeddings(emb_path.string());
    const auto problem = a.problem();
    const json opts = run.section("explore");
    const auto cfg = cv_config(run, opts.value("solver", json::object()));

    std::vector<FeatureSet> sets;
    if (opts.contains("feature_sets")) {
        for (const auto& s : opts["feature_sets"])
            sets.push_back({s.at("name").get<std::string>(), s.at("groups").get<std::vector<std::string>>()});
    } else {
        sets = enumerate_feature_sets(a.featurizer.schema(), a.featurizer.config());
    }
    const auto runs = run_exploration(problem, sets, cfg);
    const auto ranking_path = run.out("exploration_ranking.csv");
    {
        auto f = open_out(ranking_path);
        write_ranking_csv(f, runs, opts.value("top_k", std::size_t{25}));
    }
    run.output(ranking_path);

    const auto square = opts.value("square", std::vector<std::string>{});
    if (!square.empty()) {
        const auto records_path = run.required_path("records");
        run.input("records", records_path);
        const auto records = load_records(records_path.string(), a.featurizer.schema());
        const auto square_k = opts.value("square_top_k", std::size_t{12});
        for (const auto& name : square) {
            auto it = std::find_if(runs.begin(), runs.end(), [&](const GroupRun& g) {
                return g.feature_set.groups.size() == 1 && g.feature_set.groups[0] == name;
            });
            if (it == runs.end()) throw ValidationError("explore: no single-group feature set named '" + name + "'");
            const auto points = square_plot_data(it->fit, a.featurizer, records, name, square_k);
            auto file = name;
            std::replace(file.begin(), file.end(), ':', '_');
            const auto path = run.out("square_" + file + ".csv");
            auto f = open_out(path);
            write_square_csv(f, points);
            f.close();
            run.output(path);
        }
    }
    fmt::print("explore: {} feature sets; best '{}' (cv deviance {:.6g})\n", runs.size(),
               runs.empty() ? "" : runs.front().feature_set.name, runs.empty() ? 0.0 : runs.front().cv_deviance);
    return 0;
}

int cmd_report(Run& run) {
    const auto fit_path = run.artifact("fit", "fit.bin");
    run.input("fit", fit_path);
    json info;
    const auto fit = load_fit(fit_path.string(), &info);
    std::string text;
    text += fmt::format("model       {}\n", file_sha256(fit_path.string()));
    text += fmt::format("seed        {}\n", info.value("seed", std::uint64_t{0}));
    text += fmt::format("alpha       {}\n", fit.alpha);
    text += fmt::format("lambda      {}\n", fit.lambda);
    text += fmt::format("converged   {} ({} sweeps)\n", fit.converged ? "yes" : "no", fit.sweeps);
    text += fmt::format("groups      {} of {} active\n", fit.nonzero_groups, fit.layout.size());
    text += "\nactive groups (coefficient block norm):\n";
    const auto flags = fit.active_groups();
    for (std::size_t g = 0; g < flags.size(); ++g) {
        if (!flags[g]) continue;
        const auto& grp = fit.layout.groups()[g];
        text += fmt::format("  {:<24} {:.6g}\n", grp.name, fit.coef.beta.middleRows(grp.start, grp.span()).norm());
    }
    if (!fit.cv_table.empty()) {
        auto best = std::min_element(fit.cv_table.begin(), fit.cv_table.end(),
                                     [](const CvEntry& x, const CvEntry& y) { return x.mean_deviance < y.mean_deviance; });
        text += fmt::format("\nbest cv deviance {:.6g} (se {:.3g}) at alpha {}, lambda {:.6g}\n", best->mean_deviance,
                            best->se, best->alpha, best->lambda);
        std::size_t flagged = 0;
        for (const auto& e : fit.cv_table) flagged += e.flagged;
        text += fmt::format("cv grid points {}, flagged non-converged {}\n", fit.cv_table.size(), flagged);
    }
    const auto path = run.out("report.txt");
    auto f = open_out(path);
    f << text;
    f.close();
    run.output(path);
    std::cout << text;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Ecological inference by distribution regression"};
    app.require_subcommand(1);
    Options opt;
    std::uint64_t seed = 0;
    unsigned workers = 0;
    std::string output_dir;

    const std::vector<std::pair<std::string, std::string>> commands{
        {"synth", "generate a synthetic dataset with known coefficients"},
        {"featurize", "fit feature maps and embed regions (and exit-poll subgroups)"},
        {"fit", "cross-validate the penalized multinomial model and save the selected fit"},
        {"predict", "exit-poll-style tables, gap CSV and fit scatter for configured queries"},
        {"explore", "rank feature sets by cross-validated deviance"},
        {"report", "summarize a saved fit"},
    };
    std::map<std::string, CLI::App*> subs;
    for (const auto& [name, help] : commands) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("--config", opt.config_path, "JSON run configuration")->required()->check(CLI::ExistingFile);
        sub->add_option("--seed", seed, "override the config seed");
        sub->add_option("--workers", workers, "worker threads (0 = all cores)");
        sub->add_option("--output-dir", output_dir, "override the output directory");
        subs[name] = sub;
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    for (const auto& [name, sub] : subs) {
        if (!sub->parsed()) continue;
        if (sub->count("--seed")) opt.seed = seed;
        if (sub->count("--workers")) opt.workers = workers;
        if (sub->count("--output-dir")) opt.output_dir = output_dir;
        try {
            Run run(name, opt);
            int rc = 0;
            if (name == "synth") rc = cmd_synth(run);
            else if (name == "featurize") rc = cmd_featurize(run);
            else if (name == "fit") rc = cmd_fit(run);
            else if (name == "predict") rc = cmd_predict(run);
            else if (name == "explore") rc = cmd_explore(run);
            else rc = cmd_report(run);
            run.write_manifest();
            return rc;
        } catch (const ValidationError& e) {
            std::cerr << "error: " << e.what() << '\n';
            return 2;
        } catch (const json::exception& e) {
            std::cerr << "error: config: " << e.what() << '\n';
            return 2;
        } catch (const std::exception& e) {
            std::cerr << "internal error: " << e.what() << '\n';
            return 1;
        }
    }
    return 1;
}
