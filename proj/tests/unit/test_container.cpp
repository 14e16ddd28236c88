#include <doctest.h>

#include "ecoreg/container.hpp"
#include "ecoreg/error.hpp"
#include "fixtures.hpp"
#include "tempdir.hpp"

using namespace ecoreg;
using fixture::TempDir;

namespace {

const SyntheticData& data() {
    static const SyntheticData d = generate_synthetic(fixture::small_world(9, 30));
    return d;
}

ModelFit sample_fit() {
    CvConfig cfg;
    cfg.alpha_grid = {0.5, 1.0};
    cfg.path = PathSpec{8, 1e-2, {}};
    cfg.n_folds = 3;
    cfg.seed = 1;
    return cross_validate(data().problem(), cfg).best_fit;
}

void flip_byte(const std::string& path, std::size_t from_end) {
    std::string bytes = fixture::slurp(path);
    bytes[bytes.size() - from_end] ^= 0x01;
    std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes;
}

}  // namespace

TEST_SUITE("container") {

TEST_CASE("fit round trip is bit exact") {
    TempDir dir;
    auto [sub, cols] = data().problem().restrict_groups({"edu", "sex"});
    ModelFit fit = fit_lambda(sub, 0.5, 0.01);
    fit.source_columns = cols;
    fit.cv_table = sample_fit().cv_table;
    const nlohmann::json run = {{"seed", 5}, {"note", "x"}};
    save_fit(dir.file("fit.bin"), fit, run);
    nlohmann::json run_back;
    const ModelFit back = load_fit(dir.file("fit.bin"), &run_back);
    CHECK(run_back == run);
    CHECK(back.coef.beta == fit.coef.beta);
    CHECK(back.coef.intercepts == fit.coef.intercepts);
    CHECK(back.alpha == fit.alpha);
    CHECK(back.lambda == fit.lambda);
    CHECK(back.lambda_path == fit.lambda_path);
    CHECK(back.source_columns == fit.source_columns);
    CHECK(back.nonzero_groups == fit.nonzero_groups);
    CHECK(back.converged == fit.converged);
    CHECK(back.final_change == fit.final_change);
    REQUIRE(back.cv_table.size() == fit.cv_table.size());
    for (std::size_t k = 0; k < fit.cv_table.size(); ++k) {
        CHECK(back.cv_table[k].mean_deviance == fit.cv_table[k].mean_deviance);
        CHECK(back.cv_table[k].se == fit.cv_table[k].se);
    }
    CHECK(back.layout.groups().size() == 2);
    CHECK(back.predict_full(data().embeddings.rows.row(0).transpose()) ==
          fit.predict_full(data().embeddings.rows.row(0).transpose()));

    // Saving the loaded fit reproduces the file byte for byte.
    save_fit(dir.file("again.bin"), back, run_back);
    CHECK(fixture::slurp(dir.file("again.bin")) == fixture::slurp(dir.file("fit.bin")));
}

TEST_CASE("tampering and version checks") {
    TempDir dir;
    const ModelFit fit = sample_fit();
    const auto path = dir.file("fit.bin");

    save_fit(path, fit);
    flip_byte(path, 3);
    CHECK_THROWS_AS(load_fit(path), HashMismatch);

    save_fit(path, fit);
    std::string bytes = fixture::slurp(path);
    bytes[0] = 'X';
    std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes;
    CHECK_THROWS_AS(load_fit(path), IncompatibleVersion);

    save_fit(path, fit);
    bytes = fixture::slurp(path);
    const auto at = bytes.find("\"format_version\":1");
    REQUIRE(at != std::string::npos);
    bytes[at + std::string("\"format_version\":").size()] = '2';
    std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes;
    CHECK_THROWS_AS(load_fit(path), IncompatibleVersion);

    save_fit(path, fit);
    bytes = fixture::slurp(path);
    bytes.resize(bytes.size() - 8);
    std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes;
    CHECK_THROWS_AS(load_fit(path), HashMismatch);

    save_fit(path, fit);
    std::ofstream(path, std::ios::binary | std::ios::app) << "extra";
    CHECK_THROWS_AS(load_fit(path), HashMismatch);

    // Embedding artifacts are not fits.
    EmbeddingArtifact art{data().featurizer, data().embeddings, data().problem().Y, data().region_ids,
                          Eigen::VectorXd::Ones(static_cast<Eigen::Index>(data().region_ids.size())), {}};
    save_embeddings(dir.file("emb.bin"), art);
    CHECK_THROWS_AS(load_fit(dir.file("emb.bin")), IncompatibleVersion);
}

TEST_CASE("predictions agree after a round trip") {
    TempDir dir;
    const ModelFit fit = sample_fit();
    save_fit(dir.file("fit.bin"), fit);
    const ModelFit back = load_fit(dir.file("fit.bin"));
    const Eigen::MatrixXd before = fit.coef.probabilities(data().embeddings.rows);
    const Eigen::MatrixXd after = back.coef.probabilities(data().embeddings.rows);
    CHECK((before - after).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("embedding artifact round trip rebuilds the featurizer") {
    TempDir dir;
    const auto& d = data();
    Eigen::VectorXd w = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(d.region_ids.size()));
    w[2] = 0.5;
    EmbeddingArtifact art{d.featurizer, d.embeddings, d.problem().Y, d.region_ids, w, {{"seed", 1}}};
    save_embeddings(dir.file("emb.bin"), art);
    const EmbeddingArtifact back = load_embeddings(dir.file("emb.bin"));
    CHECK(back.embeddings.rows == art.embeddings.rows);
    CHECK(back.embeddings.row_weight_totals == art.embeddings.row_weight_totals);
    CHECK(back.embeddings.row_ids == art.embeddings.row_ids);
    CHECK(back.counts == art.counts);
    CHECK(back.likelihood_weights == w);
    CHECK(back.region_ids == art.region_ids);
    CHECK(back.run_info == art.run_info);
    CHECK(back.featurizer.bandwidths() == d.featurizer.bandwidths());
    CHECK(back.featurizer.encode_record(d.records[5]) == d.featurizer.encode_record(d.records[5]));
    const DesignProblem pb = back.problem();
    CHECK(pb.likelihood_weights == w);
    CHECK(pb.X == d.embeddings.rows);
}

}
