#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "ecoreg/data_model.hpp"
#include "ecoreg/featurizer.hpp"
#include "ecoreg/solver.hpp"

namespace ecoreg {

// ---------------------------------------------------------------------------
// Subgroup queries: conjunctions of level-set and closed-interval clauses.

struct LevelClause {
    std::string variable;
    std::vector<std::string> levels;
};

struct IntervalClause {
    std::string variable;
    double lo = 0.0;
    double hi = 0.0;
};

using Clause = std::variant<LevelClause, IntervalClause>;

class SubgroupQuery {
public:
    SubgroupQuery() = default;
    // Throws ValidationError if a clause names an undeclared variable, uses
    // the wrong clause kind for the variable, an undeclared level, or lo > hi.
    SubgroupQuery(std::string name, std::vector<Clause> clauses, const Schema& schema);

    // Text form: "sex=f&age=[18,29]&race=white|black". "*" or "" matches all.
    static SubgroupQuery parse(std::string name, const std::string& text, const Schema& schema);

    const std::string& name() const { return name_; }
    const std::vector<Clause>& clauses() const { return clauses_; }
    bool matches(const Record& record) const;
    std::string to_string() const;

private:
    std::string name_;
    std::vector<Clause> clauses_;
    std::vector<std::size_t> indices_;
};

std::optional<Embedding> subgroup_embedding(const Featurizer& featurizer,
                                            std::span<const Record> region_records,
                                            const SubgroupQuery& query);

struct SubgroupPrediction {
    Eigen::Vector3d probs;
    Eigen::Vector3d expected_counts;
};

SubgroupPrediction predict_subgroup(const ModelFit& fit, const Embedding& embedding);

// Per-region, per-query embedding accumulators filled one record at a time,
// so records can be streamed. Each record is encoded once.
class SubgroupEmbeddings {
public:
    SubgroupEmbeddings(const Featurizer& featurizer, std::vector<SubgroupQuery> queries);

    void add(const Record& record);
    template <class Range>
    void add_all(const Range& records) {
        for (const auto& r : records) add(r);
    }

    const std::vector<SubgroupQuery>& queries() const { return queries_; }
    // Sorted by region id.
    std::vector<std::string> region_ids() const;
    std::optional<Embedding> get(const std::string& region_id, std::size_t query) const;
    double region_weight(const std::string& region_id) const;
    // Records that matched zero or several queries (partition violations).
    std::size_t off_partition_records() const { return off_partition_; }

private:
    struct RegionAcc {
        std::vector<EmbeddingAccumulator> per_query;
        double weight = 0.0;
    };
    const Featurizer* featurizer_;
    std::vector<SubgroupQuery> queries_;
    std::map<std::string, RegionAcc> regions_;
    std::size_t off_partition_ = 0;
    Eigen::VectorXd phi_;
};

// ---------------------------------------------------------------------------
// Exit-poll-style tables.

enum class Level { National, State, Region };
const char* to_string(Level level);
Level level_from_string(const std::string& s);

struct ExitPollRow {
    std::string group;
    double share_A = 0.0;
    double share_B = 0.0;
    std::optional<double> fraction_of_electorate;  // only for verified partitions
    double participation_rate = 0.0;
    double other_nonvoting = 0.0;
    Level level = Level::National;
    std::string unit_id;
    Eigen::Vector3d expected_counts = Eigen::Vector3d::Zero();
    double weight_total = 0.0;
};

struct RegionGroupPrediction {
    std::string region_id;
    std::size_t query = 0;
    double weight_total = 0.0;
    Eigen::Vector3d probs;
    Eigen::Vector3d expected_counts;
    bool low_support = false;
};

struct TableOptions {
    Level level = Level::National;
    bool declared_partition = false;
    // Region -> state, required for Level::State.
    const std::map<std::string, std::string>* region_state = nullptr;
    double low_support_floor = 10.0;
};

struct ExitPollTable {
    std::vector<ExitPollRow> rows;
    // Regions with an empty or low-support subgroup, by query.
    std::vector<RegionGroupPrediction> low_support;
    std::vector<std::pair<std::string, std::string>> empty;  // (region, query)
    bool partition_verified = false;
};

// Every nonempty (region, query) prediction, sorted by region id then query order.
std::vector<RegionGroupPrediction> predict_regions(const ModelFit& fit,
                                                   const SubgroupEmbeddings& embeddings,
                                                   double low_support_floor = 10.0);

ExitPollTable exit_poll_table(const ModelFit& fit, const SubgroupEmbeddings& embeddings,
                              const TableOptions& options);

// Two-party share of B, participation and electorate fraction from summed
// expected counts.
ExitPollRow summarize_counts(const std::string& group, const Eigen::Vector3d& expected,
                             double weight_total);

// ---------------------------------------------------------------------------
// Gender-gap-style differences and fit scatter.

struct GapRow {
    std::string unit_id;  // region id, or "national"
    double gap_pp = 0.0;  // share_B(first) - share_B(second), percentage points
    double weight_first = 0.0;
    double weight_second = 0.0;
    bool low_support = false;
};

struct GapResult {
    std::vector<GapRow> regions;
    GapRow national;
    std::vector<std::string> omitted;  // regions where either subgroup is empty
};

// `embeddings` must hold exactly two queries: first and second.
GapResult gender_gap(const ModelFit& fit, const SubgroupEmbeddings& embeddings,
                     double low_support_floor = 10.0);

struct ScatterPoint {
    std::string row_id;
    RowKind kind = RowKind::TrueOutcome;
    Eigen::Vector3d observed;
    Eigen::Vector3d predicted;
};

std::vector<ScatterPoint> fit_scatter(const ModelFit& fit, const DesignProblem& problem);

// ---------------------------------------------------------------------------
// CSV output.

inline constexpr const char* kExitPollHeader =
    "group,share_A,share_B,frac_electorate,participation,other_nonvoting,level,unit_id";

void write_exit_poll_csv(std::ostream& out, const std::vector<ExitPollRow>& rows, bool header = true);
void write_gap_csv(std::ostream& out, const GapResult& gap);
void write_scatter_csv(std::ostream& out, const std::vector<ScatterPoint>& points);

}  // namespace ecoreg
