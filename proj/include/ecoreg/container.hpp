#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ecoreg/featurizer.hpp"
#include "ecoreg/solver.hpp"

namespace ecoreg {

// Binary artifact layout:
//   8-byte magic | u64 LE metadata length | JSON metadata |
//   u64 LE payload length | payload as LE IEEE-754 doubles.
// metadata["content_hash"] is the SHA-256 of the metadata (without that key,
// compact dump) followed by the payload bytes.
inline constexpr std::string_view kFitMagic = "ECOREG01";
inline constexpr std::string_view kEmbeddingMagic = "ECOEMB01";
inline constexpr int kFormatVersion = 1;

struct Container {
    nlohmann::json meta;
    std::vector<double> payload;
};

void write_container(const std::string& path, std::string_view magic, nlohmann::json meta,
                     std::span<const double> payload);
// Throws IncompatibleVersion (magic or version) and HashMismatch.
Container read_container(const std::string& path, std::string_view magic);

// ---------------------------------------------------------------------------
// Configuration <-> JSON.

nlohmann::json featurizer_config_to_json(const FeaturizerConfig& config);
FeaturizerConfig featurizer_config_from_json(const nlohmann::json& j, FeaturizerConfig base = {});

nlohmann::json layout_to_json(const FeatureLayout& layout);
FeatureLayout layout_from_json(const nlohmann::json& j);

nlohmann::json cv_table_to_json(const std::vector<CvEntry>& table);
std::vector<CvEntry> cv_table_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Fits. `run_info` (config, seed, input hashes) is stored verbatim.

void save_fit(const std::string& path, const ModelFit& fit, const nlohmann::json& run_info = {});
ModelFit load_fit(const std::string& path, nlohmann::json* run_info = nullptr);

// ---------------------------------------------------------------------------
// Featurized datasets: fitted maps plus the training design.

struct EmbeddingArtifact {
    Featurizer featurizer;
    EmbeddingMatrix embeddings;
    Eigen::MatrixXd counts;                 // n x 3
    std::vector<std::string> region_ids;    // region (or state) of each row
    Eigen::VectorXd likelihood_weights;     // n
    nlohmann::json run_info;

    DesignProblem problem() const;
};

void save_embeddings(const std::string& path, const EmbeddingArtifact& artifact);
EmbeddingArtifact load_embeddings(const std::string& path);

}  // namespace ecoreg
