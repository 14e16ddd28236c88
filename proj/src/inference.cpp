#include "ecoreg/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <sstream>

#include <fmt/format.h>

#include "ecoreg/error.hpp"

namespace ecoreg {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep)) out.push_back(trim(cur));
    if (!s.empty() && s.back() == sep) out.emplace_back();
    return out;
}

double parse_bound(const std::string& s, const std::string& text) {
    const std::string t = trim(s);
    if (t == "-inf") return -std::numeric_limits<double>::infinity();
    if (t == "inf" || t == "+inf") return std::numeric_limits<double>::infinity();
    try {
        std::size_t used = 0;
        const double v = std::stod(t, &used);
        if (used != t.size()) throw std::invalid_argument(t);
        return v;
    } catch (const std::exception&) {
        throw ValidationError("bad interval bound '" + t + "' in query '" + text + "'");
    }
}

std::string format_bound(double v) {
    if (std::isinf(v)) return v < 0 ? "-inf" : "inf";
    return fmt::format("{}", v);
}

}  // namespace

// ---------------------------------------------------------------------------
// SubgroupQuery

SubgroupQuery::SubgroupQuery(std::string name, std::vector<Clause> clauses, const Schema& schema)
    : name_(std::move(name)), clauses_(std::move(clauses)) {
    for (const auto& c : clauses_) {
        const std::string& var =
            std::visit([](const auto& cl) -> const std::string& { return cl.variable; }, c);
        const auto idx = schema.index_of(var);
        if (!idx) throw ValidationError("query '" + name_ + "' references unknown variable '" + var + "'");
        const auto& spec = schema.variables()[*idx];
        if (const auto* lc = std::get_if<LevelClause>(&c)) {
            if (!spec.is_categorical())
                throw ValidationError("query '" + name_ + "': level clause on real variable '" + var + "'");
            if (lc->levels.empty())
                throw ValidationError("query '" + name_ + "': empty level set for '" + var + "'");
            for (const auto& l : lc->levels)
                if (!spec.level_index(l)) throw UnknownLevel(var, l);
        } else {
            const auto& ic = std::get<IntervalClause>(c);
            if (!spec.is_real())
                throw ValidationError("query '" + name_ + "': interval clause on categorical variable '" +
                                      var + "'");
            if (!(ic.lo <= ic.hi))
                throw ValidationError("query '" + name_ + "': interval lo > hi for '" + var + "'");
        }
        indices_.push_back(*idx);
    }
}

SubgroupQuery SubgroupQuery::parse(std::string name, const std::string& text, const Schema& schema) {
    std::vector<Clause> clauses;
    const std::string body = trim(text);
    if (!body.empty() && body != "*") {
        for (const auto& part : split(body, '&')) {
            const auto eq = part.find('=');
            if (eq == std::string::npos || eq == 0)
                throw ValidationError("malformed clause '" + part + "' in query '" + text + "'");
            const std::string var = trim(part.substr(0, eq));
            const std::string rhs = trim(part.substr(eq + 1));
            if (!rhs.empty() && rhs.front() == '[') {
                if (rhs.back() != ']' || rhs.find(',') == std::string::npos)
                    throw ValidationError("malformed interval '" + rhs + "' in query '" + text + "'");
                const auto inner = rhs.substr(1, rhs.size() - 2);
                const auto comma = inner.find(',');
                clauses.emplace_back(IntervalClause{var, parse_bound(inner.substr(0, comma), text),
                                                    parse_bound(inner.substr(comma + 1), text)});
            } else {
                clauses.emplace_back(LevelClause{var, split(rhs, '|')});
            }
        }
    }
    return SubgroupQuery(std::move(name), std::move(clauses), schema);
}

bool SubgroupQuery::matches(const Record& record) const {
    for (std::size_t c = 0; c < clauses_.size(); ++c) {
        const Value& v = record.values[indices_[c]];
        if (const auto* lc = std::get_if<LevelClause>(&clauses_[c])) {
            const auto& level = std::get<std::string>(v);
            if (std::find(lc->levels.begin(), lc->levels.end(), level) == lc->levels.end()) return false;
        } else {
            const auto& ic = std::get<IntervalClause>(clauses_[c]);
            const double x = std::get<double>(v);
            if (!(x >= ic.lo && x <= ic.hi)) return false;
        }
    }
    return true;
}

std::string SubgroupQuery::to_string() const {
    if (clauses_.empty()) return "*";
    std::string out;
    for (const auto& c : clauses_) {
        if (!out.empty()) out += '&';
        if (const auto* lc = std::get_if<LevelClause>(&c)) {
            out += lc->variable + '=';
            for (std::size_t i = 0; i < lc->levels.size(); ++i) out += (i ? "|" : "") + lc->levels[i];
        } else {
            const auto& ic = std::get<IntervalClause>(c);
            out += ic.variable + "=[" + format_bound(ic.lo) + ',' + format_bound(ic.hi) + ']';
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Embedding and prediction

std::optional<Embedding> subgroup_embedding(const Featurizer& featurizer,
                                            std::span<const Record> region_records,
                                            const SubgroupQuery& query) {
    EmbeddingAccumulator acc(featurizer.dim());
    Eigen::VectorXd phi(static_cast<Eigen::Index>(featurizer.dim()));
    for (const auto& r : region_records) {
        if (!query.matches(r)) continue;
        featurizer.encode_record(r, std::span<double>(phi.data(), phi.size()));
        acc.add(phi, r.weight);
    }
    if (acc.empty()) return std::nullopt;
    return Embedding{acc.mean(), acc.weight()};
}

SubgroupPrediction predict_subgroup(const ModelFit& fit, const Embedding& e) {
    SubgroupPrediction out;
    out.probs = fit.predict_full(e.mu);
    out.expected_counts = out.probs * e.weight_total;
    return out;
}

SubgroupEmbeddings::SubgroupEmbeddings(const Featurizer& featurizer, std::vector<SubgroupQuery> queries)
    : featurizer_(&featurizer),
      queries_(std::move(queries)),
      phi_(static_cast<Eigen::Index>(featurizer.dim())) {}

void SubgroupEmbeddings::add(const Record& record) {
    auto& region = regions_[record.region_id];
    if (region.per_query.empty())
        region.per_query.assign(queries_.size(), EmbeddingAccumulator(featurizer_->dim()));
    region.weight += record.weight;
    bool encoded = false;
    std::size_t hits = 0;
    for (std::size_t q = 0; q < queries_.size(); ++q) {
        if (!queries_[q].matches(record)) continue;
        if (!encoded) {
            featurizer_->encode_record(record, std::span<double>(phi_.data(), phi_.size()));
            encoded = true;
        }
        region.per_query[q].add(phi_, record.weight);
        ++hits;
    }
    if (hits != 1) ++off_partition_;
}

std::vector<std::string> SubgroupEmbeddings::region_ids() const {
    std::vector<std::string> out;
    for (const auto& [id, _] : regions_) out.push_back(id);
    return out;
}

std::optional<Embedding> SubgroupEmbeddings::get(const std::string& region_id, std::size_t query) const {
    auto it = regions_.find(region_id);
    if (it == regions_.end()) return std::nullopt;
    const auto& acc = it->second.per_query.at(query);
    if (acc.empty()) return std::nullopt;
    return Embedding{acc.mean(), acc.weight()};
}

double SubgroupEmbeddings::region_weight(const std::string& region_id) const {
    auto it = regions_.find(region_id);
    return it == regions_.end() ? 0.0 : it->second.weight;
}

// ---------------------------------------------------------------------------
// Tables

const char* to_string(Level level) {
    switch (level) {
        case Level::National: return "national";
        case Level::State: return "state";
        case Level::Region: return "region";
    }
    return "?";
}

Level level_from_string(const std::string& s) {
    if (s == "national") return Level::National;
    if (s == "state") return Level::State;
    if (s == "region") return Level::Region;
    throw ValidationError("unknown level '" + s + "' (national|state|region)");
}

std::vector<RegionGroupPrediction> predict_regions(const ModelFit& fit,
                                                   const SubgroupEmbeddings& embeddings,
                                                   double low_support_floor) {
    std::vector<RegionGroupPrediction> out;
    for (const auto& region : embeddings.region_ids()) {
        for (std::size_t q = 0; q < embeddings.queries().size(); ++q) {
            const auto e = embeddings.get(region, q);
            if (!e) continue;
            const auto pred = predict_subgroup(fit, *e);
            out.push_back(RegionGroupPrediction{region, q, e->weight_total, pred.probs,
                                                pred.expected_counts,
                                                e->weight_total < low_support_floor});
        }
    }
    return out;
}

ExitPollRow summarize_counts(const std::string& group, const Eigen::Vector3d& expected,
                             double weight_total) {
    ExitPollRow row;
    row.group = group;
    row.expected_counts = expected;
    row.weight_total = weight_total;
    const double two_party = expected[0] + expected[1];
    row.share_A = two_party > 0.0 ? expected[0] / two_party : 0.0;
    row.share_B = two_party > 0.0 ? expected[1] / two_party : 0.0;
    row.participation_rate = weight_total > 0.0 ? two_party / weight_total : 0.0;
    row.other_nonvoting = 1.0 - row.participation_rate;
    return row;
}

ExitPollTable exit_poll_table(const ModelFit& fit, const SubgroupEmbeddings& embeddings,
                              const TableOptions& options) {
    if (embeddings.queries().empty()) throw ValidationError("exit-poll table needs at least one query");
    if (options.level == Level::State && !options.region_state)
        throw ValidationError("state-level table needs a region-to-state map");

    ExitPollTable table;
    table.partition_verified = options.declared_partition && embeddings.off_partition_records() == 0;

    const auto preds = predict_regions(fit, embeddings, options.low_support_floor);
    const std::size_t Q = embeddings.queries().size();

    auto unit_of = [&](const std::string& region) -> std::string {
        switch (options.level) {
            case Level::National: return "national";
            case Level::Region: return region;
            case Level::State: {
                auto it = options.region_state->find(region);
                if (it == options.region_state->end())
                    throw ValidationError("region '" + region + "' has no state");
                return it->second;
            }
        }
        return "";
    };

    struct Agg {
        Eigen::Vector3d expected = Eigen::Vector3d::Zero();
        double weight = 0.0;
        bool any = false;
    };
    std::map<std::string, std::vector<Agg>> units;
    for (const auto& p : preds) {
        auto& slot = units[unit_of(p.region_id)];
        if (slot.empty()) slot.resize(Q);
        slot[p.query].expected += p.expected_counts;
        slot[p.query].weight += p.weight_total;
        slot[p.query].any = true;
        if (p.low_support) table.low_support.push_back(p);
    }
    for (const auto& region : embeddings.region_ids())
        for (std::size_t q = 0; q < Q; ++q)
            if (!embeddings.get(region, q)) table.empty.emplace_back(region, embeddings.queries()[q].name());

    for (const auto& [unit, aggs] : units) {
        double electorate = 0.0;
        for (const auto& a : aggs) electorate += a.expected[0] + a.expected[1];
        for (std::size_t q = 0; q < Q; ++q) {
            if (!aggs[q].any) continue;
            ExitPollRow row = summarize_counts(embeddings.queries()[q].name(), aggs[q].expected, aggs[q].weight);
            row.level = options.level;
            row.unit_id = unit;
            if (table.partition_verified && electorate > 0.0)
                row.fraction_of_electorate = (aggs[q].expected[0] + aggs[q].expected[1]) / electorate;
            table.rows.push_back(std::move(row));
        }
    }
    return table;
}

GapResult gender_gap(const ModelFit& fit, const SubgroupEmbeddings& embeddings, double low_support_floor) {
    if (embeddings.queries().size() != 2) throw ValidationError("gender gap needs exactly two queries");
    GapResult out;
    Eigen::Vector3d total_a = Eigen::Vector3d::Zero(), total_b = Eigen::Vector3d::Zero();
    double wa = 0.0, wb = 0.0;
    auto share_b = [](const Eigen::Vector3d& e) { return e[1] / (e[0] + e[1]); };
    for (const auto& region : embeddings.region_ids()) {
        const auto ea = embeddings.get(region, 0);
        const auto eb = embeddings.get(region, 1);
        if (!ea || !eb) {
            out.omitted.push_back(region);
            continue;
        }
        const auto pa = predict_subgroup(fit, *ea);
        const auto pb = predict_subgroup(fit, *eb);
        GapRow row;
        row.unit_id = region;
        row.gap_pp = 100.0 * (share_b(pa.probs) - share_b(pb.probs));
        row.weight_first = ea->weight_total;
        row.weight_second = eb->weight_total;
        row.low_support = ea->weight_total < low_support_floor || eb->weight_total < low_support_floor;
        out.regions.push_back(row);
        total_a += pa.expected_counts;
        total_b += pb.expected_counts;
        wa += ea->weight_total;
        wb += eb->weight_total;
    }
    out.national.unit_id = "national";
    out.national.weight_first = wa;
    out.national.weight_second = wb;
    out.national.gap_pp = (wa > 0.0 && wb > 0.0) ? 100.0 * (share_b(total_a) - share_b(total_b))
                                                 : std::numeric_limits<double>::quiet_NaN();
    return out;
}

std::vector<ScatterPoint> fit_scatter(const ModelFit& fit, const DesignProblem& problem) {
    std::vector<ScatterPoint> out;
    out.reserve(problem.n());
    for (std::size_t i = 0; i < problem.n(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        ScatterPoint pt;
        pt.row_id = problem.row_ids[i];
        pt.kind = problem.row_kinds[i];
        const double t = problem.Y.row(r).sum();
        pt.observed = t > 0.0 ? Eigen::Vector3d(problem.Y.row(r).transpose() / t) : Eigen::Vector3d::Zero();
        pt.predicted = fit.predict_full(problem.X.row(r).transpose());
        out.push_back(pt);
    }
    return out;
}

// ---------------------------------------------------------------------------
// CSV

void write_exit_poll_csv(std::ostream& out, const std::vector<ExitPollRow>& rows, bool header) {
    if (header) out << kExitPollHeader << '\n';
    for (const auto& r : rows) {
        out << fmt::format("{},{:.6f},{:.6f},{},{:.6f},{:.6f},{},{}\n", r.group, r.share_A, r.share_B,
                           r.fraction_of_electorate ? fmt::format("{:.6f}", *r.fraction_of_electorate)
                                                    : std::string("NA"),
                           r.participation_rate, r.other_nonvoting, to_string(r.level), r.unit_id);
    }
}

void write_gap_csv(std::ostream& out, const GapResult& gap) {
    out << "unit_id,gap_pp,weight_first,weight_second,low_support\n";
    auto line = [&](const GapRow& r) {
        out << fmt::format("{},{:.6f},{:.6f},{:.6f},{}\n", r.unit_id, r.gap_pp, r.weight_first,
                           r.weight_second, r.low_support ? 1 : 0);
    };
    for (const auto& r : gap.regions) line(r);
    line(gap.national);
}

void write_scatter_csv(std::ostream& out, const std::vector<ScatterPoint>& points) {
    out << "row_id,kind,obs_A,obs_B,obs_other,pred_A,pred_B,pred_other\n";
    for (const auto& p : points)
        out << fmt::format("{},{},{:.8f},{:.8f},{:.8f},{:.8f},{:.8f},{:.8f}\n", p.row_id, to_string(p.kind),
                           p.observed[0], p.observed[1], p.observed[2], p.predicted[0], p.predicted[1],
                           p.predicted[2]);
}

}  // namespace ecoreg
