#include "graphecho/sinkhorn.hpp"

#include <cmath>
#include <string>

#include "graphecho/error.hpp"

namespace graphecho {

namespace {

// rowwise log-sum-exp of (f_i + g_j - C_ij)/eps style matrices
Eigen::VectorXd lse_rows(const Eigen::MatrixXd& m) {
    Eigen::VectorXd mx = m.rowwise().maxCoeff();
    return mx.array() + ((m.colwise() - mx).array().exp().rowwise().sum()).log();
}

}  // namespace

TransportPlan sinkhorn(const Eigen::MatrixXd& cost, double epsilon, int max_iterations,
                       const Eigen::VectorXd& row_marginal, const Eigen::VectorXd& col_marginal,
                       double tolerance) {
    if (epsilon <= 0.0) throw NumericError("sinkhorn: epsilon must be positive");
    if (!cost.allFinite()) throw NumericError("sinkhorn: non-finite cost matrix");
    const Eigen::Index n = cost.rows(), m = cost.cols();
    if (row_marginal.size() != n || col_marginal.size() != m)
        throw ShapeError("sinkhorn: marginal sizes do not match cost " + std::to_string(n) + "x" +
                         std::to_string(m));

    const Eigen::VectorXd log_a = row_marginal.array().log();
    const Eigen::VectorXd log_b = col_marginal.array().log();
    Eigen::VectorXd f = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(m);

    TransportPlan result;
    result.cost = cost;
    result.epsilon = epsilon;

    auto plan_from = [&](const Eigen::VectorXd& fv, const Eigen::VectorXd& gv) {
        Eigen::MatrixXd logp = ((-cost).colwise() + fv).rowwise() + gv.transpose();
        return (logp / epsilon).array().exp().matrix();
    };

    int it = 0;
    double residual = 0.0;
    for (it = 1; it <= max_iterations; ++it) {
        // f update matches row marginals, g update matches column marginals
        Eigen::MatrixXd t = ((-cost).rowwise() + g.transpose()) / epsilon;
        f = epsilon * (log_a - lse_rows(t));
        t = ((-cost.transpose()).rowwise() + f.transpose()) / epsilon;
        g = epsilon * (log_b - lse_rows(t));
        if (!f.allFinite() || !g.allFinite())
            throw NumericError("sinkhorn: non-finite scaling at iteration " + std::to_string(it));
        Eigen::MatrixXd p = plan_from(f, g);
        residual = std::max((p.rowwise().sum() - row_marginal).cwiseAbs().maxCoeff(),
                            (p.colwise().sum().transpose() - col_marginal).cwiseAbs().maxCoeff());
        if (residual < tolerance) break;
    }
    result.iterations_used = std::min(it, max_iterations);
    result.plan = plan_from(f, g);
    if (!result.plan.allFinite())
        throw NumericError("sinkhorn: non-finite plan after " + std::to_string(it) + " iterations");
    result.marginal_residual = residual;
    return result;
}

TransportPlan sinkhorn_uniform(const Eigen::MatrixXd& cost, double epsilon, int max_iterations,
                               double tolerance) {
    Eigen::VectorXd a = Eigen::VectorXd::Constant(cost.rows(), 1.0 / double(cost.rows()));
    Eigen::VectorXd b = Eigen::VectorXd::Constant(cost.cols(), 1.0 / double(cost.cols()));
    return sinkhorn(cost, epsilon, max_iterations, a, b, tolerance);
}

}  // namespace graphecho
