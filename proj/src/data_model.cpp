#include "ecoreg/data_model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "ecoreg/error.hpp"

namespace ecoreg {

std::optional<std::size_t> VariableSpec::level_index(const std::string& level) const {
    const auto& levels = categorical().levels;
    auto it = std::find(levels.begin(), levels.end(), level);
    if (it == levels.end()) return std::nullopt;
    return static_cast<std::size_t>(it - levels.begin());
}

std::vector<std::string> VariableSpec::non_reference_levels() const {
    std::vector<std::string> out;
    const auto& cat = categorical();
    for (const auto& l : cat.levels)
        if (l != cat.reference) out.push_back(l);
    return out;
}

VariableSpec real_variable(std::string name) { return VariableSpec{std::move(name), RealKind{}}; }

VariableSpec categorical_variable(std::string name, std::vector<std::string> levels,
                                  std::string reference) {
    return VariableSpec{std::move(name), CategoricalKind{std::move(levels), std::move(reference)}};
}

Schema::Schema(std::vector<VariableSpec> variables,
               std::vector<std::pair<std::string, std::string>> interactions)
    : variables_(std::move(variables)), interactions_(std::move(interactions)) {
    std::set<std::string> names;
    for (const auto& v : variables_) {
        if (v.name.empty()) throw SchemaError("empty variable name");
        if (!names.insert(v.name).second) throw SchemaError("duplicate variable '" + v.name + "'");
        if (v.is_categorical()) {
            const auto& cat = v.categorical();
            if (cat.levels.size() < 2)
                throw SchemaError("categorical variable '" + v.name + "' needs at least 2 levels");
            std::set<std::string> lv(cat.levels.begin(), cat.levels.end());
            if (lv.size() != cat.levels.size())
                throw SchemaError("duplicate level in variable '" + v.name + "'");
            if (!lv.count(cat.reference))
                throw SchemaError("reference level '" + cat.reference + "' of '" + v.name +
                                  "' is not a declared level");
        }
    }
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& [p, q] : interactions_) {
        if (p == q) throw SchemaError("interaction of '" + p + "' with itself");
        if (!names.count(p) || !names.count(q))
            throw SchemaError("interaction '" + p + ":" + q + "' references an undeclared variable");
        if (!seen.insert({p, q}).second || seen.count({q, p}))
            throw SchemaError("duplicate interaction '" + p + ":" + q + "'");
    }
}

std::optional<std::size_t> Schema::index_of(const std::string& name) const {
    for (std::size_t i = 0; i < variables_.size(); ++i)
        if (variables_[i].name == name) return i;
    return std::nullopt;
}

const VariableSpec& Schema::at(const std::string& name) const {
    auto idx = index_of(name);
    if (!idx) throw SchemaError("unknown variable '" + name + "'");
    return variables_[*idx];
}

const char* to_string(ViolationKind kind) {
    switch (kind) {
        case ViolationKind::NonPositiveWeight: return "nonpositive_weight";
        case ViolationKind::WrongArity: return "wrong_arity";
        case ViolationKind::TypeMismatch: return "type_mismatch";
        case ViolationKind::UnknownLevel: return "unknown_level";
        case ViolationKind::NonFiniteValue: return "non_finite_value";
        case ViolationKind::MissingRegion: return "missing_region";
    }
    return "?";
}

std::vector<Violation> validate_record(const Schema& schema, const Record& r, std::size_t index) {
    std::vector<Violation> out;
    if (r.region_id.empty())
        out.push_back({index, ViolationKind::MissingRegion, "", "empty region id"});
    if (!(r.weight > 0.0) || !std::isfinite(r.weight))
        out.push_back({index, ViolationKind::NonPositiveWeight, "",
                       "weight " + std::to_string(r.weight)});
    if (r.values.size() != schema.size()) {
        out.push_back({index, ViolationKind::WrongArity, "",
                       std::to_string(r.values.size()) + " values for " +
                           std::to_string(schema.size()) + " variables"});
        return out;
    }
    for (std::size_t v = 0; v < schema.size(); ++v) {
        const auto& spec = schema.variables()[v];
        const auto& val = r.values[v];
        if (spec.is_real()) {
            const double* x = std::get_if<double>(&val);
            if (!x)
                out.push_back({index, ViolationKind::TypeMismatch, spec.name, "expected a real"});
            else if (!std::isfinite(*x))
                out.push_back({index, ViolationKind::NonFiniteValue, spec.name, "non-finite"});
        } else {
            const std::string* s = std::get_if<std::string>(&val);
            if (!s)
                out.push_back({index, ViolationKind::TypeMismatch, spec.name, "expected a level"});
            else if (!spec.level_index(*s))
                out.push_back({index, ViolationKind::UnknownLevel, spec.name, *s});
        }
    }
    return out;
}

std::vector<Violation> validate(const Schema& schema, const std::vector<Record>& records) {
    std::vector<Violation> out;
    for (std::size_t i = 0; i < records.size(); ++i) {
        auto v = validate_record(schema, records[i], i);
        out.insert(out.end(), v.begin(), v.end());
    }
    return out;
}

OutcomeCounts::OutcomeCounts(std::array<double, 3> counts) : counts_(counts) {
    total_ = 0.0;
    for (double c : counts_) {
        if (!std::isfinite(c) || c < 0.0)
            throw ValidationError("outcome counts must be finite and nonnegative");
        total_ += c;
    }
}

std::array<double, 3> OutcomeCounts::shares() const {
    if (total_ <= 0.0) return {0.0, 0.0, 0.0};
    return {counts_[0] / total_, counts_[1] / total_, counts_[2] / total_};
}

const char* to_string(RowKind kind) {
    return kind == RowKind::TrueOutcome ? "TrueOutcome" : "ExitPollSubgroup";
}

RowKind row_kind_from_string(const std::string& s) {
    if (s == "TrueOutcome") return RowKind::TrueOutcome;
    if (s == "ExitPollSubgroup") return RowKind::ExitPollSubgroup;
    throw ValidationError("unknown row kind '" + s + "'");
}

RegionTable::RegionTable(std::vector<RegionRow> rows) {
    rows_.reserve(rows.size());
    for (auto& r : rows) append(std::move(r));
}

void RegionTable::append(RegionRow row) {
    if (!ids_.insert(row.row_id).second)
        throw ValidationError("duplicate row id '" + row.row_id + "'");
    rows_.push_back(std::move(row));
}

double RegionTable::grand_total() const {
    double s = 0.0;
    for (const auto& r : rows_) s += r.counts.total();
    return s;
}

}  // namespace ecoreg
