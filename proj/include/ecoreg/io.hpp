#pragma once

#include <cstddef>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecoreg/data_model.hpp"
#include "ecoreg/featurizer.hpp"
#include "ecoreg/inference.hpp"

namespace ecoreg {

// ---------------------------------------------------------------------------
// Schema files (JSON):
// {"variables": [{"name": "sex", "kind": "categorical", "levels": [...],
//                 "reference": "m"}, {"name": "age", "kind": "real"}],
//  "interactions": [["sex", "age"]]}

Schema schema_from_json(const nlohmann::json& j);
nlohmann::json schema_to_json(const Schema& schema);
Schema read_schema(const std::string& path);
void write_schema(const std::string& path, const Schema& schema);

// ---------------------------------------------------------------------------
// records.csv: region_id,weight,<var1>,<var2>,...

// Streams records.csv one record (or one contiguous region block) at a time.
// Every record is validated; loaders never coerce a missing value.
class RecordReader {
public:
    RecordReader(const std::string& path, const Schema& schema);

    // False at end of file. Throws ParseError/SchemaMismatch.
    bool next(Record& out);
    // The next maximal run of records sharing a region id; empty at EOF.
    std::vector<Record> next_region();
    // Largest block ever returned by next_region().
    std::size_t max_block() const { return max_block_; }
    std::size_t line() const { return line_; }

private:
    bool read_line(Record& out);

    std::string path_;
    const Schema* schema_;
    std::ifstream in_;
    std::vector<std::size_t> column_to_var_;  // for columns after region_id,weight
    std::size_t line_ = 0;
    std::optional<Record> pending_;
    std::size_t max_block_ = 0;
};

std::vector<Record> load_records(const std::string& path, const Schema& schema);
void write_records(std::ostream& out, const Schema& schema, std::span<const Record> records);
void write_records(const std::string& path, const Schema& schema, std::span<const Record> records);

// ---------------------------------------------------------------------------
// outcomes.csv: geo_id,count_A,count_B,count_other

struct GeoCounts {
    std::string geo_id;
    OutcomeCounts counts;
};

std::vector<GeoCounts> load_outcomes(const std::string& path);
void write_outcomes(const std::string& path, const std::vector<GeoCounts>& rows);

// ---------------------------------------------------------------------------
// crosswalk.csv: geo_id,region_id,allocation

class Crosswalk {
public:
    struct Allocation {
        std::string region_id;
        double weight = 1.0;
    };

    Crosswalk() = default;
    // Throws ValidationError unless every allocation is in (0, 1] and each
    // source id's allocations sum to 1 within 1e-9.
    explicit Crosswalk(std::map<std::string, std::vector<Allocation>> map);
    static Crosswalk identity(const std::vector<std::string>& ids);

    const std::map<std::string, std::vector<Allocation>>& map() const { return map_; }

private:
    std::map<std::string, std::vector<Allocation>> map_;
};

Crosswalk load_crosswalk(const std::string& path);
void write_crosswalk(const std::string& path, const Crosswalk& crosswalk);

// Region counts = sum of allocation x county counts, rows sorted by region id.
// Throws UnmappedGeography.
RegionTable merge_outcomes(const std::vector<GeoCounts>& counts, const Crosswalk& crosswalk);

// ---------------------------------------------------------------------------
// regions.csv: region_id,state

std::map<std::string, std::string> load_region_states(const std::string& path);
void write_region_states(const std::string& path, const std::map<std::string, std::string>& map);

// ---------------------------------------------------------------------------
// Survey-year weight adjustment.

using RecordsByYear = std::map<std::string, std::vector<Record>>;

// Per region: mean over reference years (where the region appears) of the
// yearly weight total, divided by the target year's total.
std::map<std::string, double> weight_adjustment_factors(const RecordsByYear& records,
                                                        const std::vector<std::string>& reference_years,
                                                        const std::string& target_year);

// Copy of `records` with the target year's weights scaled per region so its
// totals match the reference mean. Throws MissingYear.
RecordsByYear adjust_weights(const RecordsByYear& records, const std::vector<std::string>& reference_years,
                             const std::string& target_year);

// ---------------------------------------------------------------------------
// exitpoll.csv: state,group,query,share_A,share_B,participation
// participation may be "NA" (unknown).

struct ExitPollRecord {
    std::string state;
    std::string group;
    std::string query;
    double share_A = 0.0;
    double share_B = 0.0;
    std::optional<double> participation;
};

std::vector<ExitPollRecord> load_exitpoll(const std::string& path);
void write_exitpoll(const std::string& path, const std::vector<ExitPollRecord>& rows);

struct AugmentationRows {
    std::vector<RegionRow> rows;          // kind ExitPollSubgroup, region_id = state
    std::vector<Embedding> embeddings;    // aligned with rows
};

// Subgroup embedding over the state's matching records, with pseudo-counts
// W * participation * (share_A, share_B) and the remainder in class 3.
// Unknown participation uses `default_participation`. Throws EmptySubgroup.
AugmentationRows build_augmentation_rows(const std::vector<ExitPollRecord>& polls,
                                         const Featurizer& featurizer, std::span<const Record> records,
                                         const std::map<std::string, std::string>& region_state,
                                         double default_participation);

// ---------------------------------------------------------------------------
// Misc.

std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_hex(const std::string& text);
std::string file_sha256(const std::string& path);

// Shortest decimal that round-trips.
std::string format_double(double x);

}  // namespace ecoreg
