#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ecoreg/data_model.hpp"
#include "ecoreg/rng.hpp"

namespace ecoreg {

// ---------------------------------------------------------------------------
// Standardization of real variables (weighted, population moments).

struct Moments {
    double mean = 0.0;
    double sd = 1.0;
};

class Standardizer {
public:
    Standardizer() = default;
    explicit Standardizer(std::map<std::string, Moments> moments) : moments_(std::move(moments)) {}

    const Moments& at(const std::string& variable) const;
    double transform(const std::string& variable, double value) const;
    const std::map<std::string, Moments>& moments() const { return moments_; }

private:
    std::map<std::string, Moments> moments_;
};

// Streaming weighted mean/variance (West's update) for every real variable.
class StandardizerBuilder {
public:
    explicit StandardizerBuilder(const Schema& schema);
    void add(const Record& record);
    // Throws ConstantVariable if a weighted variance is <= 1e-12.
    Standardizer finish() const;

private:
    struct Acc {
        std::size_t var_index;
        double weight_sum = 0.0;
        double mean = 0.0;
        double m2 = 0.0;
    };
    const Schema* schema_;
    std::vector<Acc> accs_;
};

Standardizer fit_standardizer(std::span<const Record> records, const Schema& schema);

// ---------------------------------------------------------------------------
// Orthogonal random Fourier features.

enum class RffForm {
    Paired,  // sqrt(2/D) [cos(Wz); sin(Wz)], D outputs
    Offset,  // sqrt(2/(D/2)) cos(Wz + b), D/2 outputs
};

class OrfMap {
public:
    OrfMap() = default;

    std::size_t input_dim() const { return input_dim_; }
    std::size_t num_features() const { return num_features_; }
    double bandwidth() const { return bandwidth_; }
    std::uint64_t seed() const { return seed_; }
    // (D/2) x input_dim, already divided by the bandwidth.
    const Eigen::MatrixXd& projection() const { return projection_; }
    const Eigen::VectorXd& offsets() const { return offsets_; }

    std::size_t output_dim(RffForm form) const {
        return form == RffForm::Paired ? num_features_ : num_features_ / 2;
    }
    // z must have input_dim entries; out must have output_dim(form) entries.
    void map(std::span<const double> z, RffForm form, std::span<double> out) const;
    Eigen::VectorXd map(std::span<const double> z, RffForm form = RffForm::Paired) const;

    friend OrfMap build_orf(std::size_t input_dim, std::size_t num_features, double bandwidth,
                            std::uint64_t seed);

private:
    std::size_t input_dim_ = 0;
    std::size_t num_features_ = 0;
    double bandwidth_ = 1.0;
    std::uint64_t seed_ = 0;
    Eigen::MatrixXd projection_;
    Eigen::VectorXd offsets_;
};

// ceil((D/2)/input_dim) Gaussian blocks, each QR-orthogonalized, rows scaled
// by chi(input_dim) norms, stacked, truncated to D/2 rows, divided by sigma.
// Offsets are uniform on [0, 2*pi). A pure function of its arguments.
OrfMap build_orf(std::size_t input_dim, std::size_t num_features, double bandwidth,
                 std::uint64_t seed);

// Median pairwise Euclidean distance among the rows of `points`; falls back
// to the mean distance, then 1.0, when the median is zero.
double median_pairwise_distance(const Eigen::MatrixXd& points);

// ---------------------------------------------------------------------------
// Layout and configuration.

struct FeatureGroup {
    std::string name;
    std::string first;    // variable, or first member of an interaction
    std::string second;   // empty for single-variable groups
    std::size_t start = 0;
    std::size_t end = 0;

    bool is_interaction() const { return !second.empty(); }
    std::size_t span() const { return end - start; }
};

class FeatureLayout {
public:
    FeatureLayout() = default;
    // Groups must tile [0, dim) contiguously in order.
    explicit FeatureLayout(std::vector<FeatureGroup> groups);

    const std::vector<FeatureGroup>& groups() const { return groups_; }
    std::size_t dim() const { return groups_.empty() ? 0 : groups_.back().end; }
    std::size_t size() const { return groups_.size(); }
    std::optional<std::size_t> find(const std::string& name) const;

    // Layout of the listed groups packed contiguously, plus for each new
    // column the index of its source column in this layout.
    std::pair<FeatureLayout, std::vector<std::size_t>> restrict_to(
        const std::vector<std::string>& group_names) const;

private:
    std::vector<FeatureGroup> groups_;
};

std::string interaction_name(const std::string& p, const std::string& q);

struct BandwidthRule {
    enum class Kind { Median, Fixed } kind = Kind::Median;
    double sigma = 1.0;
};

struct FeaturizerConfig {
    std::size_t rff_features_per_real_variable = 64;
    BandwidthRule bandwidth;
    std::uint64_t seed = 0;
    bool include_interactions = true;
    RffForm form = RffForm::Paired;
    std::size_t median_subsample = 2000;
};

// Throws ValidationError if D is odd or < 2.
void check_config(const FeaturizerConfig& config);

// ---------------------------------------------------------------------------
// Fitted maps: everything needed to turn a record into phi(x).

class Featurizer {
public:
    Featurizer() = default;
    Featurizer(Schema schema, FeaturizerConfig config, Standardizer standardizer,
               std::map<std::string, double> bandwidths);

    const Schema& schema() const { return schema_; }
    const FeaturizerConfig& config() const { return config_; }
    const Standardizer& standardizer() const { return standardizer_; }
    const FeatureLayout& layout() const { return layout_; }
    std::size_t dim() const { return layout_.dim(); }
    // Keyed by variable name, or interaction_name(p, q) for real x real pairs.
    const std::map<std::string, double>& bandwidths() const { return bandwidths_; }
    const OrfMap& orf(const std::string& key) const;

    Eigen::VectorXd encode_real(const std::string& variable, double value) const;
    Eigen::VectorXd encode_categorical(const std::string& variable, const std::string& level) const;
    Eigen::VectorXd encode_interaction(const std::string& p, const Value& xp, const std::string& q,
                                       const Value& xq) const;
    // Writes phi(record) into out (size dim()).
    void encode_record(const Record& record, std::span<double> out) const;
    Eigen::VectorXd encode_record(const Record& record) const;

private:
    std::size_t real_dim() const;

    Schema schema_;
    FeaturizerConfig config_;
    Standardizer standardizer_;
    std::map<std::string, double> bandwidths_;
    std::map<std::string, OrfMap> orfs_;
    FeatureLayout layout_;
};

std::uint64_t orf_seed(std::uint64_t config_seed, const std::string& key);

// Streaming fit: one pass over the records collects weighted moments and a
// seeded reservoir sample for the median bandwidth heuristic.
class FeaturizerBuilder {
public:
    FeaturizerBuilder(Schema schema, FeaturizerConfig config);
    // moments_ points into schema_.
    FeaturizerBuilder(const FeaturizerBuilder&) = delete;
    FeaturizerBuilder& operator=(const FeaturizerBuilder&) = delete;
    void add(const Record& record);
    Featurizer finish() const;

private:
    Schema schema_;
    FeaturizerConfig config_;
    StandardizerBuilder moments_;
    std::vector<std::size_t> real_vars_;
    std::vector<std::vector<double>> reservoir_;
    std::size_t seen_ = 0;
    Engine engine_;
};

Featurizer fit_featurizer(const Schema& schema, const FeaturizerConfig& config,
                          std::span<const Record> records);

// ---------------------------------------------------------------------------
// Mean embeddings.

// Running weighted sum of phi; mean() = sum / weight.
class EmbeddingAccumulator {
public:
    EmbeddingAccumulator() = default;
    explicit EmbeddingAccumulator(std::size_t dim) : sum_(Eigen::VectorXd::Zero(dim)) {}

    void add(const Eigen::Ref<const Eigen::VectorXd>& phi, double weight);
    void merge(const EmbeddingAccumulator& other);
    bool empty() const { return weight_ <= 0.0; }
    double weight() const { return weight_; }
    std::size_t count() const { return count_; }
    // Throws EmptySubset when nothing was added.
    Eigen::VectorXd mean() const;

private:
    Eigen::VectorXd sum_;
    double weight_ = 0.0;
    std::size_t count_ = 0;
};

struct Embedding {
    Eigen::VectorXd mu;
    double weight_total = 0.0;
};

// Weight-normalized mean of phi over the records. Throws EmptySubset.
Embedding mean_embedding(const Featurizer& featurizer, std::span<const Record> records);

struct EmbeddingMatrix {
    Eigen::MatrixXd rows;                 // n x p
    Eigen::VectorXd row_weight_totals;    // n
    FeatureLayout layout;
    std::vector<std::string> row_ids;
    std::vector<RowKind> row_kinds;

    std::size_t n() const { return static_cast<std::size_t>(rows.rows()); }
    std::size_t p() const { return static_cast<std::size_t>(rows.cols()); }
    void append(const std::string& row_id, RowKind kind, const Embedding& e);
};

// One row per entry of `region_ids`, in that order. Regions are embedded
// independently on up to `workers` threads; each sums its records in input
// order, so the result does not depend on the worker count. Throws
// EmptySubset if a region has no records.
EmbeddingMatrix embed_regions(const Featurizer& featurizer, std::span<const Record> records,
                              const std::vector<std::string>& region_ids, unsigned workers = 1);

}  // namespace ecoreg
