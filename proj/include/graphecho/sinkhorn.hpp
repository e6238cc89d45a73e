#pragma once

#include <Eigen/Core>

namespace graphecho {

// Entropically regularized optimal transport plan: diag(u) K diag(w) with
// K = exp(-cost/epsilon), computed by alternating marginal scaling in
// log space. The plan is used as a detached constant in the matching loss;
// gradients reach the embeddings through the cost matrix, and the plan
// tracks them because it is re-derived every step.
struct TransportPlan {
    Eigen::MatrixXd plan;  // row sums ~ row_marginal, col sums ~ col_marginal
    Eigen::MatrixXd cost;
    double epsilon = 0.0;
    int iterations_used = 0;
    double marginal_residual = 0.0;
};

TransportPlan sinkhorn(const Eigen::MatrixXd& cost, double epsilon, int max_iterations,
                       const Eigen::VectorXd& row_marginal, const Eigen::VectorXd& col_marginal,
                       double tolerance = 1e-9);

// uniform marginals 1/n_rows and 1/n_cols
TransportPlan sinkhorn_uniform(const Eigen::MatrixXd& cost, double epsilon, int max_iterations,
                               double tolerance = 1e-9);

}  // namespace graphecho
