#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ecoreg/data_model.hpp"
#include "ecoreg/error.hpp"
#include "ecoreg/featurizer.hpp"

namespace ecoreg {

inline constexpr int kClasses = 3;

// Regression inputs: mean embeddings X (n x p), counts Y (n x 3).
struct DesignProblem {
    Eigen::MatrixXd X;
    Eigen::MatrixXd Y;
    FeatureLayout layout;
    // Multiplies row i's counts in the likelihood (exit-poll down-weighting).
    Eigen::VectorXd likelihood_weights;
    // Weights of per-unit-count row deviances when averaging held-out folds.
    Eigen::VectorXd cv_weights;
    std::vector<RowKind> row_kinds;
    std::vector<std::string> row_ids;

    // Fills default weights (1 and row totals), kinds and ids, then checks
    // shapes and finiteness. Throws ValidationError.
    static DesignProblem make(Eigen::MatrixXd X, Eigen::MatrixXd Y, FeatureLayout layout);
    void validate() const;

    std::size_t n() const { return static_cast<std::size_t>(X.rows()); }
    std::size_t p() const { return static_cast<std::size_t>(X.cols()); }
    Eigen::VectorXd totals() const { return Y.rowwise().sum(); }
    // Sum of likelihood-weighted counts; the NLL normalizer.
    double weighted_count() const;

    DesignProblem subset_rows(const std::vector<std::size_t>& rows) const;
    // Problem over the listed feature groups only, and the source columns.
    std::pair<DesignProblem, std::vector<std::size_t>> restrict_groups(
        const std::vector<std::string>& group_names) const;
};

Eigen::Vector3d softmax(const Eigen::Vector3d& eta);

// Reference-class parameterization: column 2 of beta and intercepts[2] are 0.
struct Coefficients {
    Eigen::MatrixXd beta;        // p x 3
    Eigen::Vector3d intercepts;

    static Coefficients zero(std::size_t p);
    Eigen::MatrixXd probabilities(const Eigen::MatrixXd& X) const;  // n x 3
    Eigen::Vector3d probabilities(const Eigen::VectorXd& mu) const;
};

struct CvEntry {
    double alpha = 0.0;
    double lambda = 0.0;
    double mean_deviance = 0.0;
    double se = 0.0;
    bool flagged = false;  // some fold failed to converge
};

struct ModelFit {
    Coefficients coef;
    double alpha = 0.0;
    double lambda = 0.0;
    std::vector<double> lambda_path;
    std::size_t nonzero_groups = 0;
    std::vector<CvEntry> cv_table;
    FeatureLayout layout;
    // Embedding columns this fit reads, for fits on a restricted feature
    // set; empty means all columns in order.
    std::vector<std::size_t> source_columns;

    bool converged = true;
    double final_change = 0.0;
    std::size_t sweeps = 0;
    std::vector<double> objective_trace;  // filled when SolverOptions::record_objective

    const Eigen::MatrixXd& beta() const { return coef.beta; }
    const Eigen::Vector3d& intercepts() const { return coef.intercepts; }
    std::vector<bool> active_groups() const;
    Eigen::Vector3d predict(const Eigen::VectorXd& mu) const { return coef.probabilities(mu); }
    // Picks source_columns out of a full-layout embedding first.
    Eigen::Vector3d predict_full(const Eigen::VectorXd& full_mu) const;
};

class NotConverged : public Error {
public:
    NotConverged(ModelFit partial, double change)
        : Error("solver did not converge at lambda=" + std::to_string(partial.lambda) +
                " (max relative change " + std::to_string(change) + ")"),
          fit(std::move(partial)),
          change(change) {}
    ModelFit fit;
    double change;
};

struct SolverOptions {
    double tolerance = 1e-7;
    std::size_t max_sweeps = 10000;
    bool record_objective = false;
    bool throw_on_nonconvergence = false;
    // Designs with at most this many columns take majorization steps on a
    // cached p x p Gram matrix; wider ones re-evaluate the softmax per group.
    std::size_t gram_limit = 2000;
};

struct PathSpec {
    std::size_t n_lambda = 100;
    // Default: 1e-3 when n > p, else 1e-2.
    std::optional<double> lambda_min_ratio;
    // Explicit descending grid; overrides n_lambda/lambda_min_ratio.
    std::vector<double> lambdas;
};

// ---------------------------------------------------------------------------
// Likelihood and deviance.

// Count-normalized multinomial negative log-likelihood (no constant term).
double nll(const Coefficients& c, const DesignProblem& problem);

// Gradient of nll with respect to all three columns; column 2 is only
// meaningful in the overparameterized form.
Coefficients nll_gradient(const Coefficients& c, const DesignProblem& problem);

// Deviance per unit count: 2 * sum_ik v_i y_ik log(y_ik / (t_i p_ik)) / sum v_i t_i
// with v = likelihood weights. Zero-count cells contribute nothing.
double deviance(const Eigen::MatrixXd& probs, const DesignProblem& problem);
double deviance(const Coefficients& c, const DesignProblem& problem);

// Per-unit-count deviance of the listed rows, averaged with cv_weights.
double heldout_deviance(const Coefficients& c, const DesignProblem& problem,
                        const std::vector<std::size_t>& rows);

// Intercept-only MLE: log pooled shares relative to class 3.
Coefficients null_fit(const DesignProblem& problem);
double null_deviance(const DesignProblem& problem);

double fraction_deviance_explained(const Coefficients& c, const DesignProblem& problem);
double fraction_deviance_explained(const Eigen::MatrixXd& probs, const DesignProblem& problem);

// ---------------------------------------------------------------------------
// Penalized fitting.

double group_weight(const FeatureGroup& g);

// (1/N) NLL + lambda [ (1-alpha)/2 ||B||^2 + alpha sum_g w_g ||B_g|| ].
double penalized_objective(const Coefficients& c, const DesignProblem& problem, double alpha,
                           double lambda);

// Smallest lambda with every group zero at the optimum. Throws AlphaZero.
double lambda_max(const DesignProblem& problem, double alpha);

// Log-spaced descending grid starting at lambda_max (alpha floored at 1e-3
// so the pure-ridge path still has a finite start).
std::vector<double> lambda_grid(const DesignProblem& problem, double alpha, const PathSpec& path);

ModelFit fit_lambda(const DesignProblem& problem, double alpha, double lambda,
                    const SolverOptions& options = {}, const Coefficients* warm_start = nullptr);

// Warm-started fits along the grid, in grid order.
std::vector<ModelFit> fit_path(const DesignProblem& problem, double alpha, const PathSpec& path,
                               const SolverOptions& options = {});

// ---------------------------------------------------------------------------
// Cross-validation.

struct CvConfig {
    std::vector<double> alpha_grid{0.05, 0.5, 1.0};
    PathSpec path;
    std::size_t n_folds = 10;
    std::uint64_t seed = 0;
    SolverOptions options;
    unsigned workers = 1;
};

struct CvResult {
    double best_alpha = 0.0;
    double best_lambda = 0.0;
    double best_deviance = 0.0;
    double one_se_lambda = 0.0;
    std::vector<CvEntry> cv_table;
    std::vector<ModelFit> path;  // full-data path for best_alpha
    ModelFit best_fit;           // entry of `path` at best_lambda, cv_table attached
    ModelFit one_se_fit;
    std::vector<int> folds;      // fold per row; -1 = never held out
};

// Seeded shuffle of TrueOutcome rows dealt round-robin into folds;
// ExitPollSubgroup rows get -1 and always train.
std::vector<int> assign_folds(const DesignProblem& problem, std::size_t n_folds, std::uint64_t seed);

CvResult cross_validate(const DesignProblem& problem, const CvConfig& config);

}  // namespace ecoreg
