#include "ecoreg/io.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <iterator>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <openssl/evp.h>

#include "ecoreg/error.hpp"

namespace ecoreg {

namespace {

std::vector<std::string> split_csv(std::string_view line, const std::string& file, std::size_t lineno) {
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find('"') != std::string_view::npos)
        throw ParseError(file, lineno, "quoted fields are not supported");
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        auto comma = line.find(',', start);
        if (comma == std::string_view::npos) {
            out.emplace_back(line.substr(start));
            break;
        }
        out.emplace_back(line.substr(start, comma - start));
        start = comma + 1;
    }
    return out;
}

double parse_number(const std::string& field, const std::string& file, std::size_t lineno,
                    const std::string& column) {
    double value = 0.0;
    const char* first = field.data();
    const char* last = field.data() + field.size();
    if (first != last && *first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (field.empty() || ec != std::errc() || ptr != last)
        throw ParseError(file, lineno, fmt::format("column '{}': '{}' is not a number", column, field));
    if (!std::isfinite(value))
        throw ParseError(file, lineno, fmt::format("column '{}': non-finite value '{}'", column, field));
    return value;
}

std::ifstream open_input(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open '" + path + "'");
    return in;
}

std::ofstream open_output(const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + path + "'");
    return out;
}

// Reads the header line and checks it equals `expected`.
void expect_header(std::istream& in, const std::string& path, const std::vector<std::string>& expected) {
    std::string line;
    if (!std::getline(in, line)) throw ParseError(path, 1, "missing header");
    auto cols = split_csv(line, path, 1);
    if (cols != expected) {
        std::string want;
        for (std::size_t i = 0; i < expected.size(); ++i) want += (i ? "," : "") + expected[i];
        throw SchemaMismatch(fmt::format("{}: header must be '{}'", path, want));
    }
}

// Iterates data lines with their 1-based line numbers, skipping blank lines.
template <class Fn>
void for_each_row(std::istream& in, const std::string& path, std::size_t n_cols, Fn&& fn) {
    std::string line;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        auto fields = split_csv(line, path, lineno);
        if (fields.size() != n_cols)
            throw ParseError(path, lineno,
                             fmt::format("expected {} fields, found {}", n_cols, fields.size()));
        fn(fields, lineno);
    }
}

}  // namespace

std::string format_double(double x) { return fmt::format("{}", x); }

// ---------------------------------------------------------------------------
// Schema files.

Schema schema_from_json(const nlohmann::json& j) {
    try {
        std::vector<VariableSpec> vars;
        for (const auto& v : j.at("variables")) {
            auto name = v.at("name").get<std::string>();
            auto kind = v.at("kind").get<std::string>();
            if (kind == "real") {
                vars.push_back(real_variable(name));
            } else if (kind == "categorical") {
                vars.push_back(categorical_variable(name, v.at("levels").get<std::vector<std::string>>(),
                                                    v.at("reference").get<std::string>()));
            } else {
                throw SchemaError("variable '" + name + "': unknown kind '" + kind + "'");
            }
        }
        std::vector<std::pair<std::string, std::string>> inter;
        if (j.contains("interactions")) {
            for (const auto& pair : j.at("interactions")) {
                if (!pair.is_array() || pair.size() != 2)
                    throw SchemaError("interactions must be pairs of variable names");
                inter.emplace_back(pair[0].get<std::string>(), pair[1].get<std::string>());
            }
        }
        return Schema(std::move(vars), std::move(inter));
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("malformed schema: ") + e.what());
    }
}

nlohmann::json schema_to_json(const Schema& schema) {
    nlohmann::json vars = nlohmann::json::array();
    for (const auto& v : schema.variables()) {
        nlohmann::json entry{{"name", v.name}};
        if (v.is_real()) {
            entry["kind"] = "real";
        } else {
            entry["kind"] = "categorical";
            entry["levels"] = v.categorical().levels;
            entry["reference"] = v.categorical().reference;
        }
        vars.push_back(std::move(entry));
    }
    nlohmann::json inter = nlohmann::json::array();
    for (const auto& [p, q] : schema.interactions()) inter.push_back({p, q});
    return {{"variables", vars}, {"interactions", inter}};
}

Schema read_schema(const std::string& path) {
    auto in = open_input(path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(path + ": " + e.what());
    }
    return schema_from_json(j);
}

void write_schema(const std::string& path, const Schema& schema) {
    auto out = open_output(path);
    out << schema_to_json(schema).dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Records.

RecordReader::RecordReader(const std::string& path, const Schema& schema)
    : path_(path), schema_(&schema), in_(open_input(path)) {
    std::string line;
    if (!std::getline(in_, line)) throw ParseError(path_, 1, "missing header");
    line_ = 1;
    auto cols = split_csv(line, path_, 1);
    if (cols.size() < 2 || cols[0] != "region_id" || cols[1] != "weight")
        throw SchemaMismatch(path_ + ": header must start with 'region_id,weight'");
    std::vector<bool> seen(schema.size(), false);
    for (std::size_t c = 2; c < cols.size(); ++c) {
        auto idx = schema.index_of(cols[c]);
        if (!idx) throw SchemaMismatch(path_ + ": column '" + cols[c] + "' is not in the schema");
        if (seen[*idx]) throw SchemaMismatch(path_ + ": duplicate column '" + cols[c] + "'");
        seen[*idx] = true;
        column_to_var_.push_back(*idx);
    }
    for (std::size_t v = 0; v < schema.size(); ++v)
        if (!seen[v])
            throw SchemaMismatch(path_ + ": schema variable '" + schema.variables()[v].name +
                                 "' has no column");
}

bool RecordReader::read_line(Record& out) {
    std::string line;
    while (std::getline(in_, line)) {
        ++line_;
        if (line.empty() || line == "\r") continue;
        auto fields = split_csv(line, path_, line_);
        if (fields.size() != column_to_var_.size() + 2)
            throw ParseError(path_, line_,
                             fmt::format("expected {} fields, found {}", column_to_var_.size() + 2,
                                         fields.size()));
        out.region_id = fields[0];
        out.weight = parse_number(fields[1], path_, line_, "weight");
        out.values.assign(schema_->size(), Value{0.0});
        for (std::size_t c = 0; c < column_to_var_.size(); ++c) {
            const auto& spec = schema_->variables()[column_to_var_[c]];
            const auto& field = fields[c + 2];
            if (spec.is_real())
                out.values[column_to_var_[c]] = parse_number(field, path_, line_, spec.name);
            else
                out.values[column_to_var_[c]] = field;
        }
        auto violations = validate_record(*schema_, out, line_);
        if (!violations.empty()) {
            const auto& v = violations.front();
            throw ParseError(path_, line_,
                             fmt::format("{}{}{}", to_string(v.kind),
                                         v.variable.empty() ? "" : " in '" + v.variable + "'",
                                         v.detail.empty() ? "" : ": " + v.detail));
        }
        return true;
    }
    return false;
}

bool RecordReader::next(Record& out) {
    if (pending_) {
        out = std::move(*pending_);
        pending_.reset();
        return true;
    }
    return read_line(out);
}

std::vector<Record> RecordReader::next_region() {
    std::vector<Record> block;
    Record r;
    if (!next(r)) return block;
    block.push_back(std::move(r));
    Record more;
    while (read_line(more)) {
        if (more.region_id != block.front().region_id) {
            pending_ = std::move(more);
            break;
        }
        block.push_back(more);
    }
    max_block_ = std::max(max_block_, block.size());
    return block;
}

std::vector<Record> load_records(const std::string& path, const Schema& schema) {
    RecordReader reader(path, schema);
    std::vector<Record> out;
    Record r;
    while (reader.next(r)) out.push_back(r);
    return out;
}

void write_records(std::ostream& out, const Schema& schema, std::span<const Record> records) {
    out << "region_id,weight";
    for (const auto& v : schema.variables()) out << ',' << v.name;
    out << '\n';
    for (const auto& r : records) {
        if (r.values.size() != schema.size()) throw ValidationError("record arity does not match schema");
        out << r.region_id << ',' << format_double(r.weight);
        for (const auto& v : r.values) {
            out << ',';
            if (const double* d = std::get_if<double>(&v))
                out << format_double(*d);
            else
                out << std::get<std::string>(v);
        }
        out << '\n';
    }
}

void write_records(const std::string& path, const Schema& schema, std::span<const Record> records) {
    auto out = open_output(path);
    write_records(out, schema, records);
}

// ---------------------------------------------------------------------------
// Outcomes, crosswalk, region states.

std::vector<GeoCounts> load_outcomes(const std::string& path) {
    auto in = open_input(path);
    expect_header(in, path, {"geo_id", "count_A", "count_B", "count_other"});
    std::vector<GeoCounts> rows;
    std::set<std::string> seen;
    for_each_row(in, path, 4, [&](const std::vector<std::string>& f, std::size_t line) {
        std::array<double, 3> c{};
        const char* names[] = {"count_A", "count_B", "count_other"};
        for (int k = 0; k < 3; ++k) {
            c[k] = parse_number(f[k + 1], path, line, names[k]);
            if (c[k] < 0) throw ParseError(path, line, fmt::format("{} is negative", names[k]));
        }
        if (!seen.insert(f[0]).second) throw ParseError(path, line, "duplicate geo_id '" + f[0] + "'");
        rows.push_back({f[0], OutcomeCounts(c)});
    });
    return rows;
}

void write_outcomes(const std::string& path, const std::vector<GeoCounts>& rows) {
    auto out = open_output(path);
    out << "geo_id,count_A,count_B,count_other\n";
    for (const auto& r : rows)
        out << r.geo_id << ',' << format_double(r.counts[0]) << ',' << format_double(r.counts[1]) << ','
            << format_double(r.counts[2]) << '\n';
}

Crosswalk::Crosswalk(std::map<std::string, std::vector<Allocation>> map) : map_(std::move(map)) {
    for (const auto& [geo, allocs] : map_) {
        if (allocs.empty()) throw ValidationError("crosswalk: '" + geo + "' has no allocations");
        double sum = 0.0;
        for (const auto& a : allocs) {
            if (!(a.weight > 0.0 && a.weight <= 1.0))
                throw ValidationError(
                    fmt::format("crosswalk: allocation {} of '{}' is outside (0, 1]", a.weight, geo));
            sum += a.weight;
        }
        if (std::abs(sum - 1.0) > 1e-9)
            throw ValidationError(fmt::format("crosswalk: allocations of '{}' sum to {}", geo, sum));
    }
}

Crosswalk Crosswalk::identity(const std::vector<std::string>& ids) {
    std::map<std::string, std::vector<Allocation>> map;
    for (const auto& id : ids) map[id] = {{id, 1.0}};
    return Crosswalk(std::move(map));
}

Crosswalk load_crosswalk(const std::string& path) {
    auto in = open_input(path);
    expect_header(in, path, {"geo_id", "region_id", "allocation"});
    std::map<std::string, std::vector<Crosswalk::Allocation>> map;
    for_each_row(in, path, 3, [&](const std::vector<std::string>& f, std::size_t line) {
        map[f[0]].push_back({f[1], parse_number(f[2], path, line, "allocation")});
    });
    return Crosswalk(std::move(map));
}

void write_crosswalk(const std::string& path, const Crosswalk& crosswalk) {
    auto out = open_output(path);
    out << "geo_id,region_id,allocation\n";
    for (const auto& [geo, allocs] : crosswalk.map())
        for (const auto& a : allocs) out << geo << ',' << a.region_id << ',' << format_double(a.weight) << '\n';
}

RegionTable merge_outcomes(const std::vector<GeoCounts>& counts, const Crosswalk& crosswalk) {
    std::map<std::string, std::array<double, 3>> regions;
    for (const auto& g : counts) {
        auto it = crosswalk.map().find(g.geo_id);
        if (it == crosswalk.map().end()) throw UnmappedGeography(g.geo_id);
        for (const auto& a : it->second) {
            auto& acc = regions.try_emplace(a.region_id, std::array<double, 3>{0.0, 0.0, 0.0}).first->second;
            for (int k = 0; k < 3; ++k) acc[k] += a.weight * g.counts[k];
        }
    }
    RegionTable table;
    for (const auto& [region, c] : regions)
        table.append({region, region, RowKind::TrueOutcome, OutcomeCounts(c)});
    return table;
}

std::map<std::string, std::string> load_region_states(const std::string& path) {
    auto in = open_input(path);
    expect_header(in, path, {"region_id", "state"});
    std::map<std::string, std::string> map;
    for_each_row(in, path, 2, [&](const std::vector<std::string>& f, std::size_t line) {
        if (!map.emplace(f[0], f[1]).second)
            throw ParseError(path, line, "duplicate region_id '" + f[0] + "'");
    });
    return map;
}

void write_region_states(const std::string& path, const std::map<std::string, std::string>& map) {
    auto out = open_output(path);
    out << "region_id,state\n";
    for (const auto& [region, state] : map) out << region << ',' << state << '\n';
}

// ---------------------------------------------------------------------------
// Weight adjustment.

namespace {

std::map<std::string, double> region_totals(const std::vector<Record>& records) {
    std::map<std::string, double> totals;
    for (const auto& r : records) totals[r.region_id] += r.weight;
    return totals;
}

const std::vector<Record>& year_records(const RecordsByYear& records, const std::string& year) {
    auto it = records.find(year);
    if (it == records.end()) throw MissingYear("no records for year '" + year + "'");
    return it->second;
}

}  // namespace

std::map<std::string, double> weight_adjustment_factors(const RecordsByYear& records,
                                                        const std::vector<std::string>& reference_years,
                                                        const std::string& target_year) {
    if (reference_years.empty()) throw MissingYear("at least one reference year is required");
    auto target = region_totals(year_records(records, target_year));
    std::map<std::string, std::pair<double, std::size_t>> ref;  // sum of totals, years present
    for (const auto& year : reference_years)
        for (const auto& [region, total] : region_totals(year_records(records, year))) {
            auto& acc = ref[region];
            acc.first += total;
            acc.second += 1;
        }
    std::map<std::string, double> factors;
    for (const auto& [region, total] : target) {
        auto it = ref.find(region);
        if (it == ref.end())
            throw MissingYear("region '" + region + "' has no records in any reference year");
        double mean = it->second.first / static_cast<double>(it->second.second);
        factors[region] = mean / total;
    }
    return factors;
}

RecordsByYear adjust_weights(const RecordsByYear& records, const std::vector<std::string>& reference_years,
                             const std::string& target_year) {
    auto factors = weight_adjustment_factors(records, reference_years, target_year);
    RecordsByYear out = records;
    for (auto& r : out.at(target_year)) r.weight *= factors.at(r.region_id);
    return out;
}

// ---------------------------------------------------------------------------
// Exit polls.

std::vector<ExitPollRecord> load_exitpoll(const std::string& path) {
    auto in = open_input(path);
    expect_header(in, path, {"state", "group", "query", "share_A", "share_B", "participation"});
    std::vector<ExitPollRecord> rows;
    for_each_row(in, path, 6, [&](const std::vector<std::string>& f, std::size_t line) {
        ExitPollRecord r;
        r.state = f[0];
        r.group = f[1];
        r.query = f[2];
        r.share_A = parse_number(f[3], path, line, "share_A");
        r.share_B = parse_number(f[4], path, line, "share_B");
        if (f[5] != "NA") r.participation = parse_number(f[5], path, line, "participation");
        auto unit = [](double x) { return x >= 0.0 && x <= 1.0; };
        if (!unit(r.share_A) || !unit(r.share_B) || r.share_A + r.share_B > 1.0 + 1e-9)
            throw ParseError(path, line, "shares must lie in [0, 1] and sum to at most 1");
        if (r.participation && !unit(*r.participation))
            throw ParseError(path, line, "participation must lie in [0, 1]");
        rows.push_back(std::move(r));
    });
    return rows;
}

void write_exitpoll(const std::string& path, const std::vector<ExitPollRecord>& rows) {
    auto out = open_output(path);
    out << "state,group,query,share_A,share_B,participation\n";
    for (const auto& r : rows)
        out << r.state << ',' << r.group << ',' << r.query << ',' << format_double(r.share_A) << ','
            << format_double(r.share_B) << ','
            << (r.participation ? format_double(*r.participation) : std::string("NA")) << '\n';
}

AugmentationRows build_augmentation_rows(const std::vector<ExitPollRecord>& polls,
                                         const Featurizer& featurizer, std::span<const Record> records,
                                         const std::map<std::string, std::string>& region_state,
                                         double default_participation) {
    if (!(default_participation >= 0.0 && default_participation <= 1.0))
        throw ValidationError("default participation must lie in [0, 1]");
    std::vector<SubgroupQuery> queries;
    std::map<std::string, std::vector<std::size_t>> by_state;
    for (std::size_t i = 0; i < polls.size(); ++i) {
        queries.push_back(SubgroupQuery::parse(polls[i].group, polls[i].query, featurizer.schema()));
        by_state[polls[i].state].push_back(i);
    }

    std::vector<EmbeddingAccumulator> accs(polls.size(), EmbeddingAccumulator(featurizer.dim()));
    Eigen::VectorXd phi(featurizer.dim());
    for (const auto& r : records) {
        auto st = region_state.find(r.region_id);
        if (st == region_state.end()) continue;
        auto polls_here = by_state.find(st->second);
        if (polls_here == by_state.end()) continue;
        bool encoded = false;
        for (auto i : polls_here->second) {
            if (!queries[i].matches(r)) continue;
            if (!encoded) {
                featurizer.encode_record(r, std::span<double>(phi.data(), phi.size()));
                encoded = true;
            }
            accs[i].add(phi, r.weight);
        }
    }

    AugmentationRows out;
    std::set<std::string> ids;
    for (std::size_t i = 0; i < polls.size(); ++i) {
        const auto& p = polls[i];
        if (accs[i].empty()) throw EmptySubgroup(p.state, p.group);
        double w = accs[i].weight();
        double part = p.participation.value_or(default_participation);
        double a = w * part * p.share_A;
        double b = w * part * p.share_B;
        RegionRow row;
        row.row_id = "exitpoll:" + p.state + ":" + p.group;
        if (!ids.insert(row.row_id).second)
            throw ValidationError("duplicate exit-poll subgroup '" + p.group + "' in state '" + p.state + "'");
        row.region_id = p.state;
        row.kind = RowKind::ExitPollSubgroup;
        row.counts = OutcomeCounts({a, b, std::max(0.0, w - a - b)});
        out.rows.push_back(std::move(row));
        out.embeddings.push_back({accs[i].mean(), w});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Hashing.

std::string sha256_hex(std::span<const unsigned char> bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw Error("SHA-256 failed");
    std::string hex;
    hex.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", digest[i]);
    return hex;
}

std::string sha256_hex(const std::string& text) {
    return sha256_hex(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(text.data()),
                                                     text.size()));
}

std::string file_sha256(const std::string& path) {
    auto in = open_input(path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return sha256_hex(bytes);
}

}  // namespace ecoreg
