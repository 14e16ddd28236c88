#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <unordered_set>
#include <utility>
#include <variant>
#include <vector>

namespace ecoreg {

struct RealKind {};

struct CategoricalKind {
    std::vector<std::string> levels;
    std::string reference;
};

struct VariableSpec {
    std::string name;
    std::variant<RealKind, CategoricalKind> kind;

    bool is_real() const { return std::holds_alternative<RealKind>(kind); }
    bool is_categorical() const { return std::holds_alternative<CategoricalKind>(kind); }
    const CategoricalKind& categorical() const { return std::get<CategoricalKind>(kind); }

    // Index into `levels`, or nullopt.
    std::optional<std::size_t> level_index(const std::string& level) const;
    // Non-reference levels in declared order.
    std::vector<std::string> non_reference_levels() const;
};

VariableSpec real_variable(std::string name);
VariableSpec categorical_variable(std::string name, std::vector<std::string> levels,
                                  std::string reference);

class Schema {
public:
    Schema() = default;
    // Throws SchemaError if names collide, a categorical spec is malformed, or
    // an interaction references undeclared/identical variables.
    Schema(std::vector<VariableSpec> variables,
           std::vector<std::pair<std::string, std::string>> interactions);

    const std::vector<VariableSpec>& variables() const { return variables_; }
    const std::vector<std::pair<std::string, std::string>>& interactions() const {
        return interactions_;
    }
    std::size_t size() const { return variables_.size(); }
    std::optional<std::size_t> index_of(const std::string& name) const;
    const VariableSpec& at(const std::string& name) const;

private:
    std::vector<VariableSpec> variables_;
    std::vector<std::pair<std::string, std::string>> interactions_;
};

using Value = std::variant<double, std::string>;

// One weighted survey respondent. `values` is aligned with Schema::variables().
struct Record {
    std::string region_id;
    double weight = 1.0;
    std::vector<Value> values;
};

enum class ViolationKind {
    NonPositiveWeight,
    WrongArity,
    TypeMismatch,
    UnknownLevel,
    NonFiniteValue,
    MissingRegion,
};

const char* to_string(ViolationKind kind);

struct Violation {
    std::size_t record_index;
    ViolationKind kind;
    std::string variable;  // empty when the violation is not variable specific
    std::string detail;
};

// Violations in record order; empty iff every record conforms to the schema.
std::vector<Violation> validate(const Schema& schema, const std::vector<Record>& records);
std::vector<Violation> validate_record(const Schema& schema, const Record& record,
                                       std::size_t index);

// Counts for [A, B, other/non-vote]. Reals because augmentation rows carry
// fractional pseudo-counts.
class OutcomeCounts {
public:
    OutcomeCounts() = default;
    // Throws ValidationError on negative or non-finite entries.
    explicit OutcomeCounts(std::array<double, 3> counts);

    const std::array<double, 3>& counts() const { return counts_; }
    double operator[](std::size_t k) const { return counts_[k]; }
    double total() const { return total_; }
    std::array<double, 3> shares() const;

private:
    std::array<double, 3> counts_{0.0, 0.0, 0.0};
    double total_ = 0.0;
};

enum class RowKind { TrueOutcome, ExitPollSubgroup };

const char* to_string(RowKind kind);
RowKind row_kind_from_string(const std::string& s);

struct RegionRow {
    std::string row_id;
    std::string region_id;
    RowKind kind = RowKind::TrueOutcome;
    OutcomeCounts counts;
};

class RegionTable {
public:
    RegionTable() = default;
    // Throws ValidationError on duplicate row ids.
    explicit RegionTable(std::vector<RegionRow> rows);

    const std::vector<RegionRow>& rows() const { return rows_; }
    std::size_t size() const { return rows_.size(); }
    void append(RegionRow row);
    double grand_total() const;

private:
    std::vector<RegionRow> rows_;
    std::unordered_set<std::string> ids_;
};

}  // namespace ecoreg
