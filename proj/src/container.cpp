#include "ecoreg/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "ecoreg/error.hpp"
#include "ecoreg/io.hpp"

namespace ecoreg {

namespace {

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& in, std::size_t at) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
    return v;
}

std::string payload_bytes(std::span<const double> payload) {
    std::string out;
    out.reserve(payload.size() * 8);
    for (double d : payload) put_u64(out, std::bit_cast<std::uint64_t>(d));
    return out;
}

std::string content_hash(const nlohmann::json& meta_without_hash, const std::string& payload) {
    return sha256_hex(meta_without_hash.dump() + payload);
}

void append(std::vector<double>& out, const Eigen::MatrixXd& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) out.push_back(m(i, j));
}

// Sequential reader over a container payload.
class Cursor {
public:
    explicit Cursor(const std::vector<double>& data) : data_(data) {}
    double take() {
        if (at_ >= data_.size()) throw HashMismatch("payload shorter than its metadata declares");
        return data_[at_++];
    }
    Eigen::MatrixXd matrix(std::size_t rows, std::size_t cols) {
        Eigen::MatrixXd m(rows, cols);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) m(i, j) = take();
        return m;
    }
    void finish() const {
        if (at_ != data_.size()) throw HashMismatch("payload longer than its metadata declares");
    }

private:
    const std::vector<double>& data_;
    std::size_t at_ = 0;
};

}  // namespace

void write_container(const std::string& path, std::string_view magic, nlohmann::json meta,
                     std::span<const double> payload) {
    meta.erase("content_hash");
    meta["format_version"] = kFormatVersion;
    auto body = payload_bytes(payload);
    meta["content_hash"] = content_hash(meta, body);
    auto text = meta.dump();

    std::string out(magic);
    put_u64(out, text.size());
    out += text;
    put_u64(out, payload.size());
    out += body;

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write '" + path + "'");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw Error("write failed for '" + path + "'");
}

Container read_container(const std::string& path, std::string_view magic) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ValidationError("cannot open '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (bytes.size() < magic.size() || std::string_view(bytes).substr(0, magic.size()) != magic)
        throw IncompatibleVersion(path + ": not a '" + std::string(magic) + "' container");
    std::size_t at = magic.size();
    auto need = [&](std::size_t n) {
        if (bytes.size() - at < n) throw HashMismatch(path + ": truncated container");
    };
    need(8);
    auto meta_len = get_u64(bytes, at);
    at += 8;
    need(meta_len);
    Container c;
    try {
        c.meta = nlohmann::json::parse(bytes.substr(at, meta_len));
    } catch (const nlohmann::json::exception&) {
        throw HashMismatch(path + ": corrupt metadata");
    }
    at += meta_len;
    need(8);
    auto n = get_u64(bytes, at);
    at += 8;
    if (n > (bytes.size() - at) / 8) throw HashMismatch(path + ": truncated payload");
    need(n * 8);
    if (bytes.size() - at != n * 8) throw HashMismatch(path + ": trailing bytes");
    std::string body = bytes.substr(at);

    if (!c.meta.is_object() || !c.meta.contains("format_version") || !c.meta.contains("content_hash"))
        throw HashMismatch(path + ": metadata lacks version or hash");
    if (c.meta["format_version"] != kFormatVersion)
        throw IncompatibleVersion(path + ": format version " + c.meta["format_version"].dump() +
                                  " (expected " + std::to_string(kFormatVersion) + ")");
    auto stored = c.meta["content_hash"];
    c.meta.erase("content_hash");
    if (!stored.is_string() || stored.get<std::string>() != content_hash(c.meta, body))
        throw HashMismatch(path + ": content hash does not match");
    c.meta["content_hash"] = stored;

    c.payload.resize(n);
    for (std::size_t i = 0; i < n; ++i) c.payload[i] = std::bit_cast<double>(get_u64(body, 8 * i));
    return c;
}

// ---------------------------------------------------------------------------
// JSON helpers.

nlohmann::json featurizer_config_to_json(const FeaturizerConfig& config) {
    nlohmann::json j;
    j["rff_features_per_real_variable"] = config.rff_features_per_real_variable;
    if (config.bandwidth.kind == BandwidthRule::Kind::Median)
        j["bandwidth"] = "median";
    else
        j["bandwidth"] = config.bandwidth.sigma;
    j["seed"] = config.seed;
    j["include_interactions"] = config.include_interactions;
    j["form"] = config.form == RffForm::Paired ? "paired" : "offset";
    j["median_subsample"] = config.median_subsample;
    return j;
}

FeaturizerConfig featurizer_config_from_json(const nlohmann::json& j, FeaturizerConfig c) {
    try {
        if (j.contains("rff_features_per_real_variable"))
            c.rff_features_per_real_variable = j.at("rff_features_per_real_variable").get<std::size_t>();
        if (j.contains("bandwidth")) {
            const auto& b = j.at("bandwidth");
            if (b.is_string()) {
                if (b.get<std::string>() != "median")
                    throw ValidationError("bandwidth must be \"median\" or a positive number");
                c.bandwidth = {BandwidthRule::Kind::Median, 1.0};
            } else {
                c.bandwidth = {BandwidthRule::Kind::Fixed, b.get<double>()};
            }
        }
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("include_interactions")) c.include_interactions = j.at("include_interactions").get<bool>();
        if (j.contains("form")) {
            auto f = j.at("form").get<std::string>();
            if (f == "paired")
                c.form = RffForm::Paired;
            else if (f == "offset")
                c.form = RffForm::Offset;
            else
                throw ValidationError("form must be \"paired\" or \"offset\"");
        }
        if (j.contains("median_subsample")) c.median_subsample = j.at("median_subsample").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("featurizer config: ") + e.what());
    }
    check_config(c);
    return c;
}

nlohmann::json layout_to_json(const FeatureLayout& layout) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& g : layout.groups())
        arr.push_back({{"name", g.name}, {"first", g.first}, {"second", g.second}, {"start", g.start},
                       {"end", g.end}});
    return arr;
}

FeatureLayout layout_from_json(const nlohmann::json& j) {
    std::vector<FeatureGroup> groups;
    for (const auto& g : j)
        groups.push_back({g.at("name").get<std::string>(), g.at("first").get<std::string>(),
                          g.at("second").get<std::string>(), g.at("start").get<std::size_t>(),
                          g.at("end").get<std::size_t>()});
    return FeatureLayout(std::move(groups));
}

nlohmann::json cv_table_to_json(const std::vector<CvEntry>& table) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : table)
        arr.push_back({{"alpha", e.alpha}, {"lambda", e.lambda}, {"mean_deviance", e.mean_deviance},
                       {"se", e.se}, {"flagged", e.flagged}});
    return arr;
}

std::vector<CvEntry> cv_table_from_json(const nlohmann::json& j) {
    std::vector<CvEntry> out;
    for (const auto& e : j)
        out.push_back({e.at("alpha").get<double>(), e.at("lambda").get<double>(),
                       e.at("mean_deviance").get<double>(), e.at("se").get<double>(),
                       e.at("flagged").get<bool>()});
    return out;
}

// ---------------------------------------------------------------------------
// Fits.

void save_fit(const std::string& path, const ModelFit& fit, const nlohmann::json& run_info) {
    nlohmann::json meta;
    meta["kind"] = "fit";
    meta["p"] = fit.coef.beta.rows();
    meta["n_lambda"] = fit.lambda_path.size();
    meta["layout"] = layout_to_json(fit.layout);
    meta["source_columns"] = fit.source_columns;
    meta["nonzero_groups"] = fit.nonzero_groups;
    meta["converged"] = fit.converged;
    meta["sweeps"] = fit.sweeps;
    meta["cv_table"] = cv_table_to_json(fit.cv_table);
    meta["run"] = run_info;

    // alpha, lambda, final_change, beta (row-major), intercepts, lambda path
    std::vector<double> payload{fit.alpha, fit.lambda, fit.final_change};
    append(payload, fit.coef.beta);
    for (int k = 0; k < kClasses; ++k) payload.push_back(fit.coef.intercepts[k]);
    payload.insert(payload.end(), fit.lambda_path.begin(), fit.lambda_path.end());
    write_container(path, kFitMagic, std::move(meta), payload);
}

ModelFit load_fit(const std::string& path, nlohmann::json* run_info) {
    auto c = read_container(path, kFitMagic);
    try {
        if (c.meta.at("kind") != "fit") throw IncompatibleVersion(path + ": not a fit artifact");
        ModelFit fit;
        const auto p = c.meta.at("p").get<std::size_t>();
        const auto k = c.meta.at("n_lambda").get<std::size_t>();
        Cursor cur(c.payload);
        fit.alpha = cur.take();
        fit.lambda = cur.take();
        fit.final_change = cur.take();
        fit.coef.beta = cur.matrix(p, kClasses);
        for (int j = 0; j < kClasses; ++j) fit.coef.intercepts[j] = cur.take();
        for (std::size_t i = 0; i < k; ++i) fit.lambda_path.push_back(cur.take());
        cur.finish();
        fit.layout = layout_from_json(c.meta.at("layout"));
        fit.source_columns = c.meta.at("source_columns").get<std::vector<std::size_t>>();
        fit.nonzero_groups = c.meta.at("nonzero_groups").get<std::size_t>();
        fit.converged = c.meta.at("converged").get<bool>();
        fit.sweeps = c.meta.at("sweeps").get<std::size_t>();
        fit.cv_table = cv_table_from_json(c.meta.at("cv_table"));
        if (fit.layout.dim() != p) throw IncompatibleVersion(path + ": layout does not match coefficients");
        if (run_info) *run_info = c.meta.at("run");
        return fit;
    } catch (const nlohmann::json::exception& e) {
        throw IncompatibleVersion(path + ": unexpected metadata (" + e.what() + ")");
    }
}

// ---------------------------------------------------------------------------
// Embedding artifacts.

DesignProblem EmbeddingArtifact::problem() const {
    auto pb = DesignProblem::make(embeddings.rows, counts, embeddings.layout);
    pb.row_ids = embeddings.row_ids;
    pb.row_kinds = embeddings.row_kinds;
    pb.likelihood_weights = likelihood_weights;
    pb.validate();
    return pb;
}

void save_embeddings(const std::string& path, const EmbeddingArtifact& a) {
    const auto& fz = a.featurizer;
    const auto n = a.embeddings.n();
    if (static_cast<std::size_t>(a.counts.rows()) != n || a.region_ids.size() != n ||
        static_cast<std::size_t>(a.likelihood_weights.size()) != n)
        throw ValidationError("embedding artifact rows are inconsistent");

    nlohmann::json meta;
    meta["kind"] = "embeddings";
    meta["schema"] = schema_to_json(fz.schema());
    meta["featurizer"] = featurizer_config_to_json(fz.config());
    std::vector<std::string> moment_names, bandwidth_keys;
    for (const auto& [name, m] : fz.standardizer().moments()) moment_names.push_back(name);
    for (const auto& [key, s] : fz.bandwidths()) bandwidth_keys.push_back(key);
    meta["standardized"] = moment_names;
    meta["bandwidth_keys"] = bandwidth_keys;
    meta["n"] = n;
    meta["p"] = a.embeddings.p();
    meta["layout"] = layout_to_json(a.embeddings.layout);
    meta["row_ids"] = a.embeddings.row_ids;
    std::vector<std::string> kinds;
    for (auto k : a.embeddings.row_kinds) kinds.emplace_back(to_string(k));
    meta["row_kinds"] = kinds;
    meta["region_ids"] = a.region_ids;
    meta["run"] = a.run_info;

    // moments (mean, sd), bandwidths, X, weight totals, counts, likelihood weights
    std::vector<double> payload;
    for (const auto& [name, m] : fz.standardizer().moments()) {
        payload.push_back(m.mean);
        payload.push_back(m.sd);
    }
    for (const auto& [key, s] : fz.bandwidths()) payload.push_back(s);
    append(payload, a.embeddings.rows);
    append(payload, a.embeddings.row_weight_totals);
    append(payload, a.counts);
    append(payload, a.likelihood_weights);
    write_container(path, kEmbeddingMagic, std::move(meta), payload);
}

EmbeddingArtifact load_embeddings(const std::string& path) {
    auto c = read_container(path, kEmbeddingMagic);
    try {
        const auto& m = c.meta;
        if (m.at("kind") != "embeddings") throw IncompatibleVersion(path + ": not an embedding artifact");
        Cursor cur(c.payload);
        std::map<std::string, Moments> moments;
        for (const auto& name : m.at("standardized").get<std::vector<std::string>>()) {
            Moments mo;
            mo.mean = cur.take();
            mo.sd = cur.take();
            moments[name] = mo;
        }
        std::map<std::string, double> bandwidths;
        for (const auto& key : m.at("bandwidth_keys").get<std::vector<std::string>>())
            bandwidths[key] = cur.take();

        EmbeddingArtifact a;
        a.featurizer = Featurizer(schema_from_json(m.at("schema")), featurizer_config_from_json(m.at("featurizer")),
                                  Standardizer(std::move(moments)), std::move(bandwidths));
        const auto n = m.at("n").get<std::size_t>();
        const auto p = m.at("p").get<std::size_t>();
        a.embeddings.rows = cur.matrix(n, p);
        a.embeddings.row_weight_totals = cur.matrix(n, 1);
        a.counts = cur.matrix(n, kClasses);
        a.likelihood_weights = cur.matrix(n, 1);
        cur.finish();
        a.embeddings.layout = layout_from_json(m.at("layout"));
        a.embeddings.row_ids = m.at("row_ids").get<std::vector<std::string>>();
        for (const auto& k : m.at("row_kinds").get<std::vector<std::string>>())
            a.embeddings.row_kinds.push_back(row_kind_from_string(k));
        a.region_ids = m.at("region_ids").get<std::vector<std::string>>();
        a.run_info = m.at("run");
        if (a.featurizer.dim() != p || a.embeddings.layout.dim() != p)
            throw IncompatibleVersion(path + ": layout does not match the stored maps");
        return a;
    } catch (const nlohmann::json::exception& e) {
        throw IncompatibleVersion(path + ": unexpected metadata (" + e.what() + ")");
    }
}

}  // namespace ecoreg
