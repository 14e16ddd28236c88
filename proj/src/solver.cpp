#include "ecoreg/solver.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/math/tools/toms748_solve.hpp>
#include <boost/random/uniform_int_distribution.hpp>

#include "ecoreg/parallel.hpp"
#include "ecoreg/rng.hpp"

namespace ecoreg {

// ---------------------------------------------------------------------------
// DesignProblem

DesignProblem DesignProblem::make(Eigen::MatrixXd X, Eigen::MatrixXd Y, FeatureLayout layout) {
    DesignProblem pb;
    pb.X = std::move(X);
    pb.Y = std::move(Y);
    pb.layout = std::move(layout);
    const auto n = pb.X.rows();
    pb.likelihood_weights = Eigen::VectorXd::Ones(n);
    if (pb.Y.rows() == n && pb.Y.cols() == kClasses) pb.cv_weights = pb.Y.rowwise().sum();
    pb.row_kinds.assign(static_cast<std::size_t>(n), RowKind::TrueOutcome);
    for (Eigen::Index i = 0; i < n; ++i) pb.row_ids.push_back(std::to_string(i));
    pb.validate();
    return pb;
}

void DesignProblem::validate() const {
    const auto n = X.rows();
    if (Y.rows() != n || Y.cols() != kClasses) throw ValidationError("Y must be n x 3");
    if (layout.dim() != static_cast<std::size_t>(X.cols()))
        throw ValidationError("feature layout does not cover the columns of X");
    if (likelihood_weights.size() != n || cv_weights.size() != n ||
        row_kinds.size() != static_cast<std::size_t>(n) || row_ids.size() != static_cast<std::size_t>(n))
        throw ValidationError("row metadata length mismatch");
    if (!X.allFinite() || !Y.allFinite() || !likelihood_weights.allFinite() || !cv_weights.allFinite())
        throw ValidationError("design problem contains NaN or Inf");
    if ((Y.array() < 0.0).any()) throw ValidationError("negative outcome count");
    if ((likelihood_weights.array() < 0.0).any() || (cv_weights.array() < 0.0).any())
        throw ValidationError("negative row weight");
}

double DesignProblem::weighted_count() const {
    return likelihood_weights.dot(Y.rowwise().sum());
}

DesignProblem DesignProblem::subset_rows(const std::vector<std::size_t>& rows) const {
    DesignProblem out;
    const auto m = static_cast<Eigen::Index>(rows.size());
    out.X.resize(m, X.cols());
    out.Y.resize(m, Y.cols());
    out.likelihood_weights.resize(m);
    out.cv_weights.resize(m);
    out.layout = layout;
    for (Eigen::Index r = 0; r < m; ++r) {
        const auto i = static_cast<Eigen::Index>(rows[static_cast<std::size_t>(r)]);
        out.X.row(r) = X.row(i);
        out.Y.row(r) = Y.row(i);
        out.likelihood_weights[r] = likelihood_weights[i];
        out.cv_weights[r] = cv_weights[i];
        out.row_kinds.push_back(row_kinds[static_cast<std::size_t>(i)]);
        out.row_ids.push_back(row_ids[static_cast<std::size_t>(i)]);
    }
    return out;
}

std::pair<DesignProblem, std::vector<std::size_t>> DesignProblem::restrict_groups(
    const std::vector<std::string>& group_names) const {
    auto [sub_layout, columns] = layout.restrict_to(group_names);
    DesignProblem out = *this;
    out.layout = std::move(sub_layout);
    out.X.resize(X.rows(), static_cast<Eigen::Index>(columns.size()));
    for (std::size_t c = 0; c < columns.size(); ++c)
        out.X.col(static_cast<Eigen::Index>(c)) = X.col(static_cast<Eigen::Index>(columns[c]));
    return {std::move(out), std::move(columns)};
}

// ---------------------------------------------------------------------------
// Softmax, likelihood, deviance

Eigen::Vector3d softmax(const Eigen::Vector3d& eta) {
    const double m = eta.maxCoeff();
    Eigen::Vector3d e = (eta.array() - m).exp();
    return e / e.sum();
}

namespace {

// log p for each row and class.
Eigen::MatrixXd log_probabilities(const Coefficients& c, const Eigen::MatrixXd& X) {
    Eigen::MatrixXd eta = X * c.beta;
    eta.rowwise() += c.intercepts.transpose();
    for (Eigen::Index i = 0; i < eta.rows(); ++i) {
        const double m = eta.row(i).maxCoeff();
        const double lse = m + std::log((eta.row(i).array() - m).exp().sum());
        eta.row(i).array() -= lse;
    }
    return eta;
}

double row_deviance(const Eigen::MatrixXd& Y, Eigen::Index i, const Eigen::MatrixXd& logp) {
    const double t = Y.row(i).sum();
    double d = 0.0;
    for (int k = 0; k < kClasses; ++k) {
        const double y = Y(i, k);
        if (y > 0.0) d += y * (std::log(y / t) - logp(i, k));
    }
    return 2.0 * d;
}

double weighted_deviance(const Eigen::MatrixXd& logp, const DesignProblem& pb) {
    const double denom = pb.weighted_count();
    if (!(denom > 0.0)) throw ValidationError("no outcome counts");
    double s = 0.0;
    for (Eigen::Index i = 0; i < pb.X.rows(); ++i)
        if (pb.likelihood_weights[i] > 0.0) s += pb.likelihood_weights[i] * row_deviance(pb.Y, i, logp);
    return std::max(0.0, s / denom);
}

}  // namespace

Coefficients Coefficients::zero(std::size_t p) {
    return Coefficients{Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(p), kClasses),
                        Eigen::Vector3d::Zero()};
}

Eigen::MatrixXd Coefficients::probabilities(const Eigen::MatrixXd& X) const {
    return log_probabilities(*this, X).array().exp();
}

Eigen::Vector3d Coefficients::probabilities(const Eigen::VectorXd& mu) const {
    const Eigen::Vector3d eta = intercepts + beta.transpose() * mu;
    return softmax(eta);
}

double nll(const Coefficients& c, const DesignProblem& pb) {
    const Eigen::MatrixXd logp = log_probabilities(c, pb.X);
    double s = 0.0;
    for (Eigen::Index i = 0; i < pb.X.rows(); ++i)
        s -= pb.likelihood_weights[i] * pb.Y.row(i).dot(logp.row(i));
    return s / pb.weighted_count();
}

Coefficients nll_gradient(const Coefficients& c, const DesignProblem& pb) {
    const Eigen::MatrixXd probs = c.probabilities(pb.X);
    const Eigen::VectorXd t = pb.Y.rowwise().sum();
    Eigen::MatrixXd r(pb.X.rows(), kClasses);
    for (Eigen::Index i = 0; i < pb.X.rows(); ++i)
        r.row(i) = pb.likelihood_weights[i] * (pb.Y.row(i) - t[i] * probs.row(i));
    const double n = pb.weighted_count();
    Coefficients g;
    g.beta = -(pb.X.transpose() * r) / n;
    g.intercepts = -r.colwise().sum().transpose() / n;
    return g;
}

double deviance(const Eigen::MatrixXd& probs, const DesignProblem& pb) {
    return weighted_deviance(probs.array().log().matrix(), pb);
}

double deviance(const Coefficients& c, const DesignProblem& pb) {
    return weighted_deviance(log_probabilities(c, pb.X), pb);
}

double heldout_deviance(const Coefficients& c, const DesignProblem& pb,
                        const std::vector<std::size_t>& rows) {
    double num = 0.0, den = 0.0;
    for (auto idx : rows) {
        const auto i = static_cast<Eigen::Index>(idx);
        const double t = pb.Y.row(i).sum();
        if (!(t > 0.0)) continue;
        Eigen::MatrixXd logp = log_probabilities(c, pb.X.row(i));
        const double d = row_deviance(pb.Y.row(i), 0, logp) / t;
        num += pb.cv_weights[i] * d;
        den += pb.cv_weights[i];
    }
    return den > 0.0 ? num / den : 0.0;
}

Coefficients null_fit(const DesignProblem& pb) {
    Eigen::Vector3d pooled = (pb.Y.transpose() * pb.likelihood_weights);
    if ((pooled.array() <= 0.0).any())
        throw ValidationError("an outcome class has zero pooled count; intercepts are unbounded");
    Coefficients c = Coefficients::zero(pb.p());
    for (int k = 0; k < kClasses; ++k) c.intercepts[k] = std::log(pooled[k] / pooled[2]);
    c.intercepts[2] = 0.0;
    return c;
}

double null_deviance(const DesignProblem& pb) { return deviance(null_fit(pb), pb); }

double fraction_deviance_explained(const Coefficients& c, const DesignProblem& pb) {
    const double d0 = null_deviance(pb);
    if (!(d0 > 0.0)) return 0.0;
    return 1.0 - deviance(c, pb) / d0;
}

double fraction_deviance_explained(const Eigen::MatrixXd& probs, const DesignProblem& pb) {
    const double d0 = null_deviance(pb);
    if (!(d0 > 0.0)) return 0.0;
    return 1.0 - deviance(probs, pb) / d0;
}

double group_weight(const FeatureGroup& g) {
    return std::sqrt(static_cast<double>(kClasses * g.span()));
}

double penalized_objective(const Coefficients& c, const DesignProblem& pb, double alpha,
                           double lambda) {
    double group_sum = 0.0;
    for (const auto& g : pb.layout.groups())
        group_sum += group_weight(g) *
                     c.beta.middleRows(static_cast<Eigen::Index>(g.start),
                                       static_cast<Eigen::Index>(g.span()))
                         .norm();
    return nll(c, pb) +
           lambda * ((1.0 - alpha) / 2.0 * c.beta.squaredNorm() + alpha * group_sum);
}

std::vector<bool> ModelFit::active_groups() const {
    std::vector<bool> out;
    for (const auto& g : layout.groups())
        out.push_back(!coef.beta
                           .middleRows(static_cast<Eigen::Index>(g.start),
                                       static_cast<Eigen::Index>(g.span()))
                           .isZero(0.0));
    return out;
}

Eigen::Vector3d ModelFit::predict_full(const Eigen::VectorXd& full_mu) const {
    if (source_columns.empty()) return predict(full_mu);
    Eigen::VectorXd mu(static_cast<Eigen::Index>(source_columns.size()));
    for (std::size_t c = 0; c < source_columns.size(); ++c)
        mu[static_cast<Eigen::Index>(c)] = full_mu[static_cast<Eigen::Index>(source_columns[c])];
    return predict(mu);
}

// ---------------------------------------------------------------------------
// Block-proximal majorization-minimization solver

namespace {

// Quantities that depend only on the problem, shared along a path.
struct ProblemCache {
    ProblemCache(const DesignProblem& pb, std::size_t gram_limit) : pb(pb) {
        t = pb.Y.rowwise().sum();
        ct = pb.likelihood_weights.cwiseProduct(t);
        cy = pb.Y.array().colwise() * pb.likelihood_weights.array();
        total = ct.sum();
        if (!(total > 0.0)) throw ValidationError("no outcome counts");
        means = ct.transpose() * pb.X / total;
        X = pb.X.rowwise() - means;
        if (pb.p() <= gram_limit) gram = X.transpose() * ct.asDiagonal() * X / total;
        for (const auto& g : pb.layout.groups()) {
            const auto xg = X.middleCols(static_cast<Eigen::Index>(g.start),
                                            static_cast<Eigen::Index>(g.span()));
            const auto s0 = static_cast<Eigen::Index>(g.start);
            const auto sp = static_cast<Eigen::Index>(g.span());
            Eigen::MatrixXd h = gram.size() > 0 ? Eigen::MatrixXd(gram.block(s0, s0, sp, sp))
                                                : Eigen::MatrixXd(xg.transpose() * ct.asDiagonal() * xg / total);
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(h);
            gram_vectors.push_back(es.eigenvectors());
            gram_values.push_back(es.eigenvalues().cwiseMax(0.0));
            weights.push_back(group_weight(g));
        }
    }

    const DesignProblem& pb;
    Eigen::VectorXd t, ct;
    Eigen::MatrixXd cy;
    double total = 0.0;
    // Columns centered at their count-weighted means; the intercepts absorb
    // the shift, which decouples them from the groups.
    Eigen::RowVectorXd means;
    Eigen::MatrixXd X;
    Eigen::MatrixXd gram;  // X' diag(c t) X / N, empty for wide designs
    // Eigendecomposition of X_g' diag(c t) X_g / N per group.
    std::vector<Eigen::MatrixXd> gram_vectors;
    std::vector<Eigen::VectorXd> gram_values;
    std::vector<double> weights;
};

// Curvature bound of the softmax in the two free classes:
// S = (I - 11'/3) / 2, eigenvalues 1/6 along (1,1) and 1/2 along (1,-1).
const Eigen::Matrix2d kClassBasis = (Eigen::Matrix2d() << 1.0, 1.0, 1.0, -1.0).finished() / std::sqrt(2.0);
const Eigen::Vector2d kClassCurvature(1.0 / 6.0, 0.5);
const Eigen::Matrix2d kClassCurvatureMatrix = (Eigen::Matrix2d() << 1.0 / 3.0, -1.0 / 6.0, -1.0 / 6.0, 1.0 / 3.0).finished();
const Eigen::Matrix2d kInverseCurvature = (Eigen::Matrix2d() << 4.0, 2.0, 2.0, 4.0).finished();

// argmin_U  sum_ja [ (d_ja + ridge)/2 u_ja^2 - v_ja u_ja ] + shrink * ||U||_F.
Eigen::MatrixXd group_prox(const Eigen::MatrixXd& v, const Eigen::MatrixXd& d, double ridge, double shrink) {
    const double vn = v.norm();
    if (vn <= shrink * (1.0 + 1e-12)) return Eigen::MatrixXd::Zero(v.rows(), v.cols());
    // Raising tiny curvatures keeps the majorizer valid and the step bounded.
    const Eigen::ArrayXXd curv = d.array().max(1e-10 * std::max(d.maxCoeff(), 1e-300)) + ridge;
    if (shrink <= 0.0) {
        const double floor = 1e-14 * std::max(1.0, curv.maxCoeff());
        return (curv > floor).select(v.array() / curv.max(floor), 0.0).matrix();
    }
    // With kappa = shrink / ||U||, U = v / (curv + kappa) and kappa solves
    // sum v^2 kappa^2 / (curv + kappa)^2 = shrink^2, increasing in kappa.
    const Eigen::ArrayXXd v2 = v.array().square();
    auto g = [&](double kappa) {
        return (v2 * kappa * kappa / (curv + kappa).square()).sum() - shrink * shrink;
    };
    const double gap = vn - shrink;
    double lo = shrink * curv.minCoeff() / gap;
    double hi = shrink * curv.maxCoeff() / gap;
    if (!(hi > lo)) {
        lo = hi;
    } else {
        if (g(lo) > 0.0) lo = 0.0;
        while (g(hi) < 0.0) hi *= 2.0;
        boost::uintmax_t iters = 200;
        auto r = boost::math::tools::toms748_solve(g, lo, hi, boost::math::tools::eps_tolerance<double>(52), iters);
        lo = 0.5 * (r.first + r.second);
    }
    return (v.array() / (curv + lo)).matrix();
}

class BlockSolver {
public:
    BlockSolver(const ProblemCache& cache, double alpha, double lambda, const SolverOptions& opt,
                const Coefficients& start)
        : c_(cache), pb_(cache.pb), alpha_(alpha), lambda_(lambda), opt_(opt) {
        B_ = start.beta.leftCols(2);
        a_ = start.intercepts.head<2>() - Eigen::Vector2d::Constant(start.intercepts[2]);
        // Fold a nonzero class-3 column into the reference parameterization.
        if (!start.beta.col(2).isZero(0.0)) B_.colwise() -= start.beta.col(2);
        a_ += (c_.means * B_).transpose();
        eta_ = c_.X * B_;
        r_.resize(pb_.X.rows(), 2);
        refresh();
    }

    Eigen::Block<const Eigen::MatrixXd> block(std::size_t g) const {
        const auto& grp = pb_.layout.groups()[g];
        return B_.middleRows(static_cast<Eigen::Index>(grp.start), static_cast<Eigen::Index>(grp.span()));
    }

    ModelFit run() {
        ModelFit fit;
        std::size_t sweeps = 0;
        double change = 0.0;
        bool converged = false;
        if (opt_.record_objective) fit.objective_trace.push_back(objective());
        auto record = [&] {
            ++sweeps;
            if (opt_.record_objective) fit.objective_trace.push_back(objective());
        };
        const std::size_t G = pb_.layout.size();
        std::vector<std::size_t> all(G);
        std::iota(all.begin(), all.end(), 0);
        if (c_.gram.size() > 0) {
            while (sweeps < opt_.max_sweeps) {
                change = gram_step(all);
                record();
                if (change < opt_.tolerance) {
                    converged = true;
                    break;
                }
            }
        } else {
            while (sweeps < opt_.max_sweeps) {
                change = direct_sweep(all);
                record();
                if (change < opt_.tolerance) {
                    converged = true;
                    break;
                }
                const auto active = active_groups();
                while (sweeps < opt_.max_sweeps) {
                    change = direct_sweep(active);
                    record();
                    if (change < opt_.tolerance) break;
                }
            }
        }
        fit.coef = coefficients();
        fit.alpha = alpha_;
        fit.lambda = lambda_;
        fit.layout = pb_.layout;
        fit.converged = converged;
        fit.final_change = change;
        fit.sweeps = sweeps;
        fit.nonzero_groups = active_groups().size();
        return fit;
    }

    double objective() const {
        double group_sum = 0.0;
        for (std::size_t g = 0; g < pb_.layout.size(); ++g) group_sum += c_.weights[g] * block(g).norm();
        double loss = 0.0;
        for (Eigen::Index i = 0; i < pb_.X.rows(); ++i) {
            const double e1 = a_[0] + eta_(i, 0), e2 = a_[1] + eta_(i, 1);
            const double m = std::max({e1, e2, 0.0});
            const double lse = m + std::log(std::exp(e1 - m) + std::exp(e2 - m) + std::exp(-m));
            loss -= c_.cy(i, 0) * (e1 - lse) + c_.cy(i, 1) * (e2 - lse) + c_.cy(i, 2) * (-lse);
        }
        return loss / c_.total +
               lambda_ * ((1.0 - alpha_) / 2.0 * B_.squaredNorm() + alpha_ * group_sum);
    }

private:
    Coefficients coefficients() const {
        Coefficients c = Coefficients::zero(pb_.p());
        c.beta.leftCols(2) = B_;
        c.intercepts.head<2>() = a_ - (c_.means * B_).transpose();
        return c;
    }

    std::vector<std::size_t> active_groups() const {
        std::vector<std::size_t> out;
        for (std::size_t g = 0; g < pb_.layout.size(); ++g)
            if (!block(g).isZero(0.0)) out.push_back(g);
        return out;
    }

    // Residuals r_ik = c_i (y_ik - t_i p_ik) for the two free classes.
    void refresh() {
        for (Eigen::Index i = 0; i < pb_.X.rows(); ++i) {
            const double e1 = a_[0] + eta_(i, 0), e2 = a_[1] + eta_(i, 1);
            const double m = std::max({e1, e2, 0.0});
            const double x1 = std::exp(e1 - m), x2 = std::exp(e2 - m), x3 = std::exp(-m);
            const double s = x1 + x2 + x3;
            r_(i, 0) = c_.cy(i, 0) - c_.ct[i] * (x1 / s);
            r_(i, 1) = c_.cy(i, 1) - c_.ct[i] * (x2 / s);
        }
    }

    static double rel_change(double before, double after) {
        return std::abs(after - before) / std::max(1.0, std::abs(after));
    }

    static double max_rel_change(const Eigen::MatrixXd& before, const Eigen::MatrixXd& after) {
        double change = 0.0;
        for (Eigen::Index i = 0; i < before.size(); ++i)
            change = std::max(change, rel_change(before.data()[i], after.data()[i]));
        return change;
    }

    Eigen::Vector2d intercept_step() const {
        const Eigen::Vector2d grad = -r_.colwise().sum().transpose() / c_.total;
        return a_ - kInverseCurvature * grad;
    }

    // Minimizer over group g of <grad, B_g - current> + (S kron H_gg) quadratic
    // + penalty, solved exactly in the joint eigenbasis of H_gg and S.
    Eigen::MatrixXd group_step(std::size_t g, const Eigen::MatrixXd& current, const Eigen::MatrixXd& grad) const {
        const Eigen::MatrixXd& q = c_.gram_vectors[g];
        const Eigen::MatrixXd d = c_.gram_values[g] * kClassCurvature.transpose();
        const Eigen::MatrixXd v = d.cwiseProduct(q.transpose() * current * kClassBasis) -
                                  q.transpose() * grad * kClassBasis;
        const Eigen::MatrixXd u = group_prox(v, d, lambda_ * (1.0 - alpha_), lambda_ * alpha_ * c_.weights[g]);
        if (u.isZero(0.0)) return Eigen::MatrixXd::Zero(current.rows(), 2);
        return q * u * kClassBasis.transpose();
    }

    // Exact block descent on the loss: the softmax is re-evaluated after
    // every group. Used when the design is too wide for a cached Gram matrix.
    double direct_sweep(const std::vector<std::size_t>& groups) {
        const Eigen::Vector2d next_a = intercept_step();
        double change = std::max(rel_change(a_[0], next_a[0]), rel_change(a_[1], next_a[1]));
        if (next_a != a_) {
            a_ = next_a;
            refresh();
        }
        for (auto g : groups) {
            const auto& grp = pb_.layout.groups()[g];
            const auto start = static_cast<Eigen::Index>(grp.start);
            const auto span = static_cast<Eigen::Index>(grp.span());
            const auto xg = c_.X.middleCols(start, span);
            const Eigen::MatrixXd current = B_.middleRows(start, span);
            const Eigen::MatrixXd next = group_step(g, current, -(xg.transpose() * r_) / c_.total);
            const Eigen::MatrixXd delta = next - current;
            if (delta.isZero(0.0)) continue;
            change = std::max(change, max_rel_change(current, next));
            B_.middleRows(start, span) = next;
            eta_.noalias() += xg * delta;
            refresh();
        }
        return change;
    }

    // One majorization step: the softmax is evaluated once, then block
    // descent runs on the fixed quadratic bound using the Gram matrix.
    double gram_step(const std::vector<std::size_t>& all) {
        const Eigen::MatrixXd G = -(c_.X.transpose() * r_) / c_.total;
        const Eigen::Vector2d next_a = intercept_step();
        const Eigen::MatrixXd B0 = B_;
        Eigen::MatrixXd HD = Eigen::MatrixXd::Zero(B_.rows(), 2);  // H (B - B0)

        auto inner = [&](const std::vector<std::size_t>& groups) {
            double change = 0.0;
            for (auto g : groups) {
                const auto& grp = pb_.layout.groups()[g];
                const auto start = static_cast<Eigen::Index>(grp.start);
                const auto span = static_cast<Eigen::Index>(grp.span());
                const Eigen::MatrixXd current = B_.middleRows(start, span);
                const Eigen::MatrixXd grad = G.middleRows(start, span) + HD.middleRows(start, span) * kClassCurvatureMatrix;
                const Eigen::MatrixXd next = group_step(g, current, grad);
                const Eigen::MatrixXd delta = next - current;
                if (delta.isZero(0.0)) continue;
                change = std::max(change, max_rel_change(current, next));
                B_.middleRows(start, span) = next;
                HD.noalias() += c_.gram.middleCols(start, span) * delta;
            }
            return change;
        };
        std::size_t passes = 0;
        while (passes < kMaxInnerPasses) {
            ++passes;
            if (inner(all) < opt_.tolerance) break;
            const auto active = active_groups();
            while (passes < kMaxInnerPasses) {
                ++passes;
                if (inner(active) < opt_.tolerance) break;
            }
        }

        double change = std::max({rel_change(a_[0], next_a[0]), rel_change(a_[1], next_a[1]),
                                  max_rel_change(B0, B_)});
        a_ = next_a;
        eta_.noalias() = c_.X * B_;
        refresh();
        return change;
    }

    static constexpr std::size_t kMaxInnerPasses = 1000;

    const ProblemCache& c_;
    const DesignProblem& pb_;
    double alpha_, lambda_;
    SolverOptions opt_;
    Eigen::MatrixXd B_;   // p x 2
    Eigen::Vector2d a_;   // intercepts for the centered columns
    Eigen::MatrixXd eta_; // n x 2, X_centered * B_
    Eigen::MatrixXd r_;   // n x 2
};

void check_alpha(double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in [0, 1]");
}

ModelFit solve(const ProblemCache& cache, double alpha, double lambda, const SolverOptions& opt,
               const Coefficients& start) {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ValidationError("lambda must be >= 0");
    BlockSolver s(cache, alpha, lambda, opt, start);
    ModelFit fit = s.run();
    if (!fit.converged && opt.throw_on_nonconvergence) throw NotConverged(fit, fit.final_change);
    return fit;
}

}  // namespace

double lambda_max(const DesignProblem& pb, double alpha) {
    if (!(alpha > 0.0)) throw AlphaZero();
    check_alpha(alpha);
    const Coefficients g = nll_gradient(null_fit(pb), pb);
    double best = 0.0;
    for (const auto& grp : pb.layout.groups()) {
        const double norm = g.beta
                                .block(static_cast<Eigen::Index>(grp.start), 0,
                                       static_cast<Eigen::Index>(grp.span()), 2)
                                .norm();
        best = std::max(best, norm / (alpha * group_weight(grp)));
    }
    return best;
}

std::vector<double> lambda_grid(const DesignProblem& pb, double alpha, const PathSpec& path) {
    check_alpha(alpha);
    if (!path.lambdas.empty()) {
        for (std::size_t i = 1; i < path.lambdas.size(); ++i)
            if (path.lambdas[i] > path.lambdas[i - 1])
                throw ValidationError("explicit lambda grid must be descending");
        return path.lambdas;
    }
    if (path.n_lambda < 1) throw ValidationError("n_lambda must be >= 1");
    const double top = lambda_max(pb, std::max(alpha, 1e-3));
    const double ratio = path.lambda_min_ratio.value_or(pb.n() > pb.p() ? 1e-3 : 1e-2);
    if (!(ratio > 0.0 && ratio <= 1.0)) throw ValidationError("lambda_min_ratio must be in (0, 1]");
    if (!(top > 0.0)) return std::vector<double>(path.n_lambda, 0.0);
    std::vector<double> out(path.n_lambda);
    for (std::size_t k = 0; k < path.n_lambda; ++k) {
        const double frac =
            path.n_lambda == 1 ? 0.0 : static_cast<double>(k) / static_cast<double>(path.n_lambda - 1);
        out[k] = top * std::pow(ratio, frac);
    }
    return out;
}

ModelFit fit_lambda(const DesignProblem& pb, double alpha, double lambda, const SolverOptions& options,
                    const Coefficients* warm_start) {
    check_alpha(alpha);
    ProblemCache cache(pb, options.gram_limit);
    const Coefficients start = warm_start ? *warm_start : null_fit(pb);
    return solve(cache, alpha, lambda, options, start);
}

std::vector<ModelFit> fit_path(const DesignProblem& pb, double alpha, const PathSpec& path,
                               const SolverOptions& options) {
    check_alpha(alpha);
    const std::vector<double> grid = lambda_grid(pb, alpha, path);
    ProblemCache cache(pb, options.gram_limit);
    std::vector<ModelFit> fits;
    fits.reserve(grid.size());
    Coefficients start = null_fit(pb);
    for (double lambda : grid) {
        ModelFit f = solve(cache, alpha, lambda, options, start);
        start = f.coef;
        f.lambda_path = grid;
        fits.push_back(std::move(f));
    }
    return fits;
}

// ---------------------------------------------------------------------------
// Cross-validation

std::vector<int> assign_folds(const DesignProblem& pb, std::size_t n_folds, std::uint64_t seed) {
    if (n_folds < 2) throw ValidationError("need at least 2 folds");
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < pb.n(); ++i)
        if (pb.row_kinds[i] == RowKind::TrueOutcome) candidates.push_back(i);
    if (candidates.size() < n_folds)
        throw ValidationError("fewer outcome rows than cross-validation folds");
    Engine engine = substream(seed, "cv-folds");
    // Fisher-Yates with a portable integer distribution.
    for (std::size_t i = candidates.size() - 1; i > 0; --i) {
        boost::random::uniform_int_distribution<std::size_t> pick(0, i);
        std::swap(candidates[i], candidates[pick(engine)]);
    }
    std::vector<int> folds(pb.n(), -1);
    for (std::size_t k = 0; k < candidates.size(); ++k)
        folds[candidates[k]] = static_cast<int>(k % n_folds);
    return folds;
}

CvResult cross_validate(const DesignProblem& pb, const CvConfig& cfg) {
    if (cfg.alpha_grid.empty()) throw ValidationError("empty alpha grid");
    for (double a : cfg.alpha_grid) check_alpha(a);
    CvResult result;
    result.folds = assign_folds(pb, cfg.n_folds, cfg.seed);
    const std::size_t K = cfg.n_folds;
    const std::size_t A = cfg.alpha_grid.size();

    std::vector<std::vector<double>> grids(A);
    for (std::size_t a = 0; a < A; ++a) grids[a] = lambda_grid(pb, cfg.alpha_grid[a], cfg.path);

    std::vector<std::vector<std::size_t>> train(K), held(K);
    for (std::size_t i = 0; i < pb.n(); ++i)
        for (std::size_t k = 0; k < K; ++k)
            (result.folds[i] == static_cast<int>(k) ? held[k] : train[k]).push_back(i);

    // dev[a][k][l], flag[a][k][l]
    std::vector<std::vector<std::vector<double>>> dev(A, std::vector<std::vector<double>>(K));
    std::vector<std::vector<std::vector<bool>>> flag(A, std::vector<std::vector<bool>>(K));
    parallel_for(A * K, cfg.workers, [&](std::size_t task) {
        const std::size_t a = task / K, k = task % K;
        const DesignProblem tr = pb.subset_rows(train[k]);
        PathSpec ps;
        ps.lambdas = grids[a];
        const auto fits = fit_path(tr, cfg.alpha_grid[a], ps, cfg.options);
        for (const auto& f : fits) {
            dev[a][k].push_back(heldout_deviance(f.coef, pb, held[k]));
            flag[a][k].push_back(!f.converged);
        }
    });

    double best = std::numeric_limits<double>::infinity();
    std::size_t best_a = 0, best_l = 0;
    for (std::size_t a = 0; a < A; ++a) {
        for (std::size_t l = 0; l < grids[a].size(); ++l) {
            double mean = 0.0;
            bool flagged = false;
            for (std::size_t k = 0; k < K; ++k) {
                mean += dev[a][k][l];
                flagged = flagged || flag[a][k][l];
            }
            mean /= static_cast<double>(K);
            double ss = 0.0;
            for (std::size_t k = 0; k < K; ++k) ss += (dev[a][k][l] - mean) * (dev[a][k][l] - mean);
            const double se = std::sqrt(ss / static_cast<double>(K - 1) / static_cast<double>(K));
            result.cv_table.push_back(CvEntry{cfg.alpha_grid[a], grids[a][l], mean, se, flagged});
            if (mean < best) {
                best = mean;
                best_a = a;
                best_l = l;
            }
        }
    }
    result.best_alpha = cfg.alpha_grid[best_a];
    result.best_lambda = grids[best_a][best_l];
    result.best_deviance = best;

    const std::size_t base = [&] {
        std::size_t b = 0;
        for (std::size_t a = 0; a < best_a; ++a) b += grids[a].size();
        return b;
    }();
    const double limit = best + result.cv_table[base + best_l].se;
    std::size_t one_se_l = best_l;
    for (std::size_t l = 0; l <= best_l; ++l) {
        if (result.cv_table[base + l].mean_deviance <= limit) {
            one_se_l = l;
            break;
        }
    }
    result.one_se_lambda = grids[best_a][one_se_l];

    PathSpec ps;
    ps.lambdas = grids[best_a];
    result.path = fit_path(pb, result.best_alpha, ps, cfg.options);
    result.best_fit = result.path[best_l];
    result.best_fit.cv_table = result.cv_table;
    result.one_se_fit = result.path[one_se_l];
    result.one_se_fit.cv_table = result.cv_table;
    return result;
}

}  // namespace ecoreg
