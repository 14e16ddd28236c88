#include "ecoreg/featurizer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_map>

#include <boost/random/chi_squared_distribution.hpp>
#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_int_distribution.hpp>
#include <boost/random/uniform_real_distribution.hpp>

#include "ecoreg/error.hpp"
#include "ecoreg/parallel.hpp"

namespace ecoreg {

// ---------------------------------------------------------------------------
// Standardizer

const Moments& Standardizer::at(const std::string& variable) const {
    auto it = moments_.find(variable);
    if (it == moments_.end()) throw SchemaError("no moments for variable '" + variable + "'");
    return it->second;
}

double Standardizer::transform(const std::string& variable, double value) const {
    if (!std::isfinite(value))
        throw NonFiniteInput("non-finite value for variable '" + variable + "'");
    const auto& m = at(variable);
    return (value - m.mean) / m.sd;
}

StandardizerBuilder::StandardizerBuilder(const Schema& schema) : schema_(&schema) {
    for (std::size_t i = 0; i < schema.size(); ++i)
        if (schema.variables()[i].is_real()) accs_.push_back(Acc{i});
}

void StandardizerBuilder::add(const Record& record) {
    for (auto& a : accs_) {
        const double x = std::get<double>(record.values[a.var_index]);
        const double w = record.weight;
        const double new_sum = a.weight_sum + w;
        const double delta = x - a.mean;
        const double r = delta * w / new_sum;
        a.mean += r;
        a.m2 += a.weight_sum * delta * r;
        a.weight_sum = new_sum;
    }
}

Standardizer StandardizerBuilder::finish() const {
    std::map<std::string, Moments> out;
    for (const auto& a : accs_) {
        const auto& name = schema_->variables()[a.var_index].name;
        const double var = a.weight_sum > 0.0 ? a.m2 / a.weight_sum : 0.0;
        if (!(var > 1e-12)) throw ConstantVariable(name);
        out[name] = Moments{a.mean, std::sqrt(var)};
    }
    return Standardizer(std::move(out));
}

Standardizer fit_standardizer(std::span<const Record> records, const Schema& schema) {
    StandardizerBuilder b(schema);
    for (const auto& r : records) b.add(r);
    return b.finish();
}

// ---------------------------------------------------------------------------
// ORF

OrfMap build_orf(std::size_t input_dim, std::size_t num_features, double bandwidth,
                 std::uint64_t seed) {
    if (input_dim == 0 || num_features < 2 || num_features % 2 != 0)
        throw ValidationError("ORF needs input_dim > 0 and an even feature count >= 2");
    if (!(bandwidth > 0.0) || !std::isfinite(bandwidth))
        throw ValidationError("ORF bandwidth must be positive");

    const std::size_t d = input_dim;
    const std::size_t rows = num_features / 2;
    const std::size_t blocks = (rows + d - 1) / d;

    Engine engine(seed);
    boost::random::normal_distribution<double> normal(0.0, 1.0);
    boost::random::chi_squared_distribution<double> chi2(static_cast<double>(d));

    Eigen::MatrixXd stacked(blocks * d, d);
    for (std::size_t blk = 0; blk < blocks; ++blk) {
        Eigen::MatrixXd g(d, d);
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) g(i, j) = normal(engine);
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
        Eigen::MatrixXd q = qr.householderQ();
        const Eigen::MatrixXd& r = qr.matrixQR();
        // Sign fix so Q is Haar distributed.
        for (std::size_t j = 0; j < d; ++j)
            if (r(j, j) < 0.0) q.col(j) = -q.col(j);
        for (std::size_t i = 0; i < d; ++i) {
            const double norm = std::sqrt(chi2(engine));
            stacked.row(blk * d + i) = norm * q.row(i);
        }
    }

    OrfMap m;
    m.input_dim_ = d;
    m.num_features_ = num_features;
    m.bandwidth_ = bandwidth;
    m.seed_ = seed;
    m.projection_ = stacked.topRows(rows) / bandwidth;
    boost::random::uniform_real_distribution<double> unif(0.0, 2.0 * std::numbers::pi);
    m.offsets_.resize(rows);
    for (std::size_t i = 0; i < rows; ++i) m.offsets_[i] = unif(engine);
    return m;
}

void OrfMap::map(std::span<const double> z, RffForm form, std::span<double> out) const {
    const std::size_t rows = num_features_ / 2;
    if (form == RffForm::Paired) {
        const double scale = std::sqrt(2.0 / static_cast<double>(num_features_));
        for (std::size_t k = 0; k < rows; ++k) {
            double a = 0.0;
            for (std::size_t j = 0; j < input_dim_; ++j) a += projection_(k, j) * z[j];
            out[k] = scale * std::cos(a);
            out[rows + k] = scale * std::sin(a);
        }
    } else {
        const double scale = std::sqrt(2.0 / static_cast<double>(rows));
        for (std::size_t k = 0; k < rows; ++k) {
            double a = offsets_[k];
            for (std::size_t j = 0; j < input_dim_; ++j) a += projection_(k, j) * z[j];
            out[k] = scale * std::cos(a);
        }
    }
}

Eigen::VectorXd OrfMap::map(std::span<const double> z, RffForm form) const {
    Eigen::VectorXd out(output_dim(form));
    map(z, form, std::span<double>(out.data(), out.size()));
    return out;
}

double median_pairwise_distance(const Eigen::MatrixXd& points) {
    const Eigen::Index m = points.rows();
    if (m < 2) return 1.0;
    std::vector<double> d;
    d.reserve(static_cast<std::size_t>(m * (m - 1) / 2));
    for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index j = i + 1; j < m; ++j) d.push_back((points.row(i) - points.row(j)).norm());
    const std::size_t mid = d.size() / 2;
    std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid), d.end());
    double med = d[mid];
    if (d.size() % 2 == 0) {
        const double lower = *std::max_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid));
        med = 0.5 * (med + lower);
    }
    if (med > 0.0) return med;
    double mean = 0.0;
    for (double x : d) mean += x;
    mean /= static_cast<double>(d.size());
    return mean > 0.0 ? mean : 1.0;
}

// ---------------------------------------------------------------------------
// Layout

FeatureLayout::FeatureLayout(std::vector<FeatureGroup> groups) : groups_(std::move(groups)) {
    std::size_t at = 0;
    for (const auto& g : groups_) {
        if (g.start != at || g.end <= g.start)
            throw ValidationError("feature groups must tile the columns contiguously");
        at = g.end;
    }
}

std::optional<std::size_t> FeatureLayout::find(const std::string& name) const {
    for (std::size_t i = 0; i < groups_.size(); ++i)
        if (groups_[i].name == name) return i;
    return std::nullopt;
}

std::pair<FeatureLayout, std::vector<std::size_t>> FeatureLayout::restrict_to(
    const std::vector<std::string>& group_names) const {
    std::vector<FeatureGroup> out;
    std::vector<std::size_t> columns;
    std::size_t at = 0;
    for (const auto& name : group_names) {
        auto idx = find(name);
        if (!idx) throw ValidationError("unknown feature group '" + name + "'");
        FeatureGroup g = groups_[*idx];
        for (std::size_t c = g.start; c < g.end; ++c) columns.push_back(c);
        const std::size_t span = g.span();
        g.start = at;
        g.end = at + span;
        at = g.end;
        out.push_back(std::move(g));
    }
    return {FeatureLayout(std::move(out)), std::move(columns)};
}

std::string interaction_name(const std::string& p, const std::string& q) { return p + ":" + q; }

void check_config(const FeaturizerConfig& config) {
    const auto d = config.rff_features_per_real_variable;
    if (d < 2 || d % 2 != 0)
        throw ValidationError("rff_features_per_real_variable must be even and >= 2");
    if (config.bandwidth.kind == BandwidthRule::Kind::Fixed &&
        !(config.bandwidth.sigma > 0.0 && std::isfinite(config.bandwidth.sigma)))
        throw ValidationError("fixed bandwidth must be positive");
    if (config.median_subsample < 2) throw ValidationError("median_subsample must be >= 2");
}

std::uint64_t orf_seed(std::uint64_t config_seed, const std::string& key) {
    return substream_seed(config_seed, "orf/" + key);
}

// ---------------------------------------------------------------------------
// Featurizer

namespace {

bool both_real(const Schema& s, const std::string& p, const std::string& q) {
    return s.at(p).is_real() && s.at(q).is_real();
}

}  // namespace

Featurizer::Featurizer(Schema schema, FeaturizerConfig config, Standardizer standardizer,
                       std::map<std::string, double> bandwidths)
    : schema_(std::move(schema)),
      config_(config),
      standardizer_(std::move(standardizer)),
      bandwidths_(std::move(bandwidths)) {
    check_config(config_);
    const std::size_t D = config_.rff_features_per_real_variable;
    auto bandwidth_for = [&](const std::string& key) {
        auto it = bandwidths_.find(key);
        if (it == bandwidths_.end()) throw ValidationError("no bandwidth for '" + key + "'");
        return it->second;
    };

    std::vector<FeatureGroup> groups;
    std::size_t at = 0;
    auto push = [&](std::string name, std::string first, std::string second, std::size_t span) {
        groups.push_back(FeatureGroup{std::move(name), std::move(first), std::move(second), at, at + span});
        at += span;
    };
    auto var_dim = [&](const VariableSpec& v) {
        return v.is_real() ? real_dim() : v.categorical().levels.size() - 1;
    };

    for (const auto& v : schema_.variables()) {
        if (v.is_real()) {
            standardizer_.at(v.name);
            orfs_.emplace(v.name, build_orf(1, D, bandwidth_for(v.name), orf_seed(config_.seed, v.name)));
        }
        push(v.name, v.name, "", var_dim(v));
    }
    if (config_.include_interactions) {
        for (const auto& [p, q] : schema_.interactions()) {
            const auto name = interaction_name(p, q);
            std::size_t span;
            if (both_real(schema_, p, q)) {
                orfs_.emplace(name, build_orf(2, D, bandwidth_for(name), orf_seed(config_.seed, name)));
                span = real_dim();
            } else {
                span = var_dim(schema_.at(p)) * var_dim(schema_.at(q));
            }
            push(name, p, q, span);
        }
    }
    layout_ = FeatureLayout(std::move(groups));
}

std::size_t Featurizer::real_dim() const {
    const std::size_t D = config_.rff_features_per_real_variable;
    return config_.form == RffForm::Paired ? D : D / 2;
}

const OrfMap& Featurizer::orf(const std::string& key) const {
    auto it = orfs_.find(key);
    if (it == orfs_.end()) throw SchemaError("no ORF map for '" + key + "'");
    return it->second;
}

Eigen::VectorXd Featurizer::encode_real(const std::string& variable, double value) const {
    const double z = standardizer_.transform(variable, value);
    return orf(variable).map(std::span<const double>(&z, 1), config_.form);
}

Eigen::VectorXd Featurizer::encode_categorical(const std::string& variable,
                                               const std::string& level) const {
    const auto& spec = schema_.at(variable);
    if (!spec.is_categorical()) throw NotCategorical("variable '" + variable + "' is not categorical");
    if (!spec.level_index(level)) throw UnknownLevel(variable, level);
    const auto& cat = spec.categorical();
    Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(cat.levels.size() - 1));
    Eigen::Index k = 0;
    for (const auto& l : cat.levels) {
        if (l == cat.reference) continue;
        if (l == level) out[k] = 1.0;
        ++k;
    }
    return out;
}

Eigen::VectorXd Featurizer::encode_interaction(const std::string& p, const Value& xp,
                                               const std::string& q, const Value& xq) const {
    const auto& sp = schema_.at(p);
    const auto& sq = schema_.at(q);
    if (sp.is_real() && sq.is_real()) {
        const double z[2] = {standardizer_.transform(p, std::get<double>(xp)),
                             standardizer_.transform(q, std::get<double>(xq))};
        return orf(interaction_name(p, q)).map(std::span<const double>(z, 2), config_.form);
    }
    auto encode = [&](const VariableSpec& s, const Value& x) {
        return s.is_real() ? encode_real(s.name, std::get<double>(x))
                           : encode_categorical(s.name, std::get<std::string>(x));
    };
    const Eigen::VectorXd a = encode(sp, xp);
    const Eigen::VectorXd b = encode(sq, xq);
    Eigen::VectorXd out(a.size() * b.size());
    for (Eigen::Index i = 0; i < a.size(); ++i) out.segment(i * b.size(), b.size()) = a[i] * b;
    return out;
}

void Featurizer::encode_record(const Record& record, std::span<double> out) const {
    if (record.values.size() != schema_.size())
        throw SchemaMismatch("record has " + std::to_string(record.values.size()) +
                             " values, schema declares " + std::to_string(schema_.size()));
    const auto& groups = layout_.groups();
    const auto& vars = schema_.variables();
    std::size_t g = 0;
    for (std::size_t v = 0; v < vars.size(); ++v, ++g) {
        const auto& grp = groups[g];
        auto slot = out.subspan(grp.start, grp.span());
        if (vars[v].is_real()) {
            const double z = standardizer_.transform(vars[v].name, std::get<double>(record.values[v]));
            orf(vars[v].name).map(std::span<const double>(&z, 1), config_.form, slot);
        } else {
            const Eigen::VectorXd e =
                encode_categorical(vars[v].name, std::get<std::string>(record.values[v]));
            std::copy(e.data(), e.data() + e.size(), slot.begin());
        }
    }
    for (; g < groups.size(); ++g) {
        const auto& grp = groups[g];
        const auto ip = *schema_.index_of(grp.first);
        const auto iq = *schema_.index_of(grp.second);
        const Eigen::VectorXd e =
            encode_interaction(grp.first, record.values[ip], grp.second, record.values[iq]);
        std::copy(e.data(), e.data() + e.size(), out.begin() + static_cast<std::ptrdiff_t>(grp.start));
    }
}

Eigen::VectorXd Featurizer::encode_record(const Record& record) const {
    Eigen::VectorXd out(static_cast<Eigen::Index>(dim()));
    encode_record(record, std::span<double>(out.data(), out.size()));
    return out;
}

// ---------------------------------------------------------------------------
// Builder

FeaturizerBuilder::FeaturizerBuilder(Schema schema, FeaturizerConfig config)
    : schema_(std::move(schema)),
      config_(config),
      moments_(schema_),
      engine_(substream(config.seed, "bandwidth-subsample")) {
    check_config(config_);
    for (std::size_t i = 0; i < schema_.size(); ++i)
        if (schema_.variables()[i].is_real()) real_vars_.push_back(i);
}

void FeaturizerBuilder::add(const Record& record) {
    moments_.add(record);
    if (config_.bandwidth.kind != BandwidthRule::Kind::Median || real_vars_.empty()) {
        ++seen_;
        return;
    }
    auto row = [&] {
        std::vector<double> r;
        r.reserve(real_vars_.size());
        for (auto i : real_vars_) r.push_back(std::get<double>(record.values[i]));
        return r;
    };
    const std::size_t k = config_.median_subsample;
    if (seen_ < k) {
        reservoir_.push_back(row());
    } else {
        boost::random::uniform_int_distribution<std::size_t> pick(0, seen_);
        const std::size_t j = pick(engine_);
        if (j < k) reservoir_[j] = row();
    }
    ++seen_;
}

Featurizer FeaturizerBuilder::finish() const {
    Standardizer st = moments_.finish();
    std::map<std::string, double> bw;
    const auto& vars = schema_.variables();
    std::vector<std::string> keys;
    for (auto i : real_vars_) keys.push_back(vars[i].name);
    if (config_.include_interactions)
        for (const auto& [p, q] : schema_.interactions())
            if (both_real(schema_, p, q)) keys.push_back(interaction_name(p, q));

    if (config_.bandwidth.kind == BandwidthRule::Kind::Fixed) {
        for (const auto& k : keys) bw[k] = config_.bandwidth.sigma;
        return Featurizer(schema_, config_, std::move(st), std::move(bw));
    }

    const auto m = static_cast<Eigen::Index>(reservoir_.size());
    auto column = [&](std::size_t var_index) {
        std::size_t slot = static_cast<std::size_t>(
            std::find(real_vars_.begin(), real_vars_.end(), var_index) - real_vars_.begin());
        Eigen::VectorXd z(m);
        for (Eigen::Index r = 0; r < m; ++r)
            z[r] = st.transform(vars[var_index].name, reservoir_[static_cast<std::size_t>(r)][slot]);
        return z;
    };
    for (auto i : real_vars_) bw[vars[i].name] = median_pairwise_distance(column(i));
    if (config_.include_interactions) {
        for (const auto& [p, q] : schema_.interactions()) {
            if (!both_real(schema_, p, q)) continue;
            Eigen::MatrixXd pts(m, 2);
            pts.col(0) = column(*schema_.index_of(p));
            pts.col(1) = column(*schema_.index_of(q));
            bw[interaction_name(p, q)] = median_pairwise_distance(pts);
        }
    }
    return Featurizer(schema_, config_, std::move(st), std::move(bw));
}

Featurizer fit_featurizer(const Schema& schema, const FeaturizerConfig& config,
                          std::span<const Record> records) {
    FeaturizerBuilder b(schema, config);
    for (const auto& r : records) b.add(r);
    return b.finish();
}

// ---------------------------------------------------------------------------
// Embeddings

void EmbeddingAccumulator::add(const Eigen::Ref<const Eigen::VectorXd>& phi, double weight) {
    if (sum_.size() == 0) sum_ = Eigen::VectorXd::Zero(phi.size());
    sum_.noalias() += weight * phi;
    weight_ += weight;
    ++count_;
}

void EmbeddingAccumulator::merge(const EmbeddingAccumulator& other) {
    if (other.count_ == 0) return;
    if (sum_.size() == 0) sum_ = Eigen::VectorXd::Zero(other.sum_.size());
    sum_ += other.sum_;
    weight_ += other.weight_;
    count_ += other.count_;
}

Eigen::VectorXd EmbeddingAccumulator::mean() const {
    if (count_ == 0 || !(weight_ > 0.0)) throw EmptySubset();
    return sum_ / weight_;
}

Embedding mean_embedding(const Featurizer& featurizer, std::span<const Record> records) {
    if (records.empty()) throw EmptySubset();
    EmbeddingAccumulator acc(featurizer.dim());
    Eigen::VectorXd phi(static_cast<Eigen::Index>(featurizer.dim()));
    for (const auto& r : records) {
        featurizer.encode_record(r, std::span<double>(phi.data(), phi.size()));
        acc.add(phi, r.weight);
    }
    return Embedding{acc.mean(), acc.weight()};
}

void EmbeddingMatrix::append(const std::string& row_id, RowKind kind, const Embedding& e) {
    const Eigen::Index n = rows.rows();
    if (n == 0 && rows.cols() == 0) rows.resize(0, e.mu.size());
    rows.conservativeResize(n + 1, e.mu.size());
    rows.row(n) = e.mu.transpose();
    row_weight_totals.conservativeResize(n + 1);
    row_weight_totals[n] = e.weight_total;
    row_ids.push_back(row_id);
    row_kinds.push_back(kind);
}

EmbeddingMatrix embed_regions(const Featurizer& featurizer, std::span<const Record> records,
                              const std::vector<std::string>& region_ids, unsigned workers) {
    std::unordered_map<std::string, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < records.size(); ++i) members[records[i].region_id].push_back(i);

    const auto n = static_cast<Eigen::Index>(region_ids.size());
    const auto p = static_cast<Eigen::Index>(featurizer.dim());
    EmbeddingMatrix out;
    out.rows.resize(n, p);
    out.row_weight_totals.resize(n);
    out.layout = featurizer.layout();
    out.row_ids = region_ids;
    out.row_kinds.assign(region_ids.size(), RowKind::TrueOutcome);

    parallel_for(region_ids.size(), workers, [&](std::size_t i) {
        auto it = members.find(region_ids[i]);
        if (it == members.end()) throw EmptySubset();
        EmbeddingAccumulator acc(featurizer.dim());
        Eigen::VectorXd phi(p);
        for (auto idx : it->second) {
            featurizer.encode_record(records[idx], std::span<double>(phi.data(), phi.size()));
            acc.add(phi, records[idx].weight);
        }
        out.rows.row(static_cast<Eigen::Index>(i)) = acc.mean().transpose();
        out.row_weight_totals[static_cast<Eigen::Index>(i)] = acc.weight();
    });
    return out;
}

}  // namespace ecoreg
