"""High-accuracy generic convex reference for deconvolution problems."""

import cvxpy as cp
import numpy as np

from sevdeconv.solver import DeconvProblem


def reference_solve(prob: DeconvProblem) -> tuple[np.ndarray, float]:
    """Solve ``prob`` with a conic interior-point solver at tight tolerances."""
    n = prob.n
    A = prob.A.todense()
    y, w = prob.y, prob.weights
    p = cp.Variable(n)
    mu = A @ p
    rows = prob._smooth_rows
    if prob.spec.loss == "poisson":
        f = cp.sum(cp.multiply(w[rows], mu[rows])
                   - cp.multiply(w[rows] * y[rows], cp.log(mu[rows]))) / prob.n_train
    else:
        f = cp.sum(cp.multiply(w / prob.variance, cp.square(y - mu))) / prob.n_train
    if prob.n_rows:
        f = f + prob.lam_scaled * cp.norm1(prob.D.matrix @ p)
    if prob.tail is not None and prob.spec.gamma > 0:
        f = f + prob.gamma_scaled * cp.sum(cp.multiply(prob.tail, cp.square(cp.diff(p))))
    cons = [p >= prob.spec.lower, p <= prob.spec.upper]
    c = prob.constraint()
    if c is not None:
        cons.append(c @ p == 0)
    problem = cp.Problem(cp.Minimize(f), cons)
    problem.solve(solver="CLARABEL", tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12,
                  max_iter=500)
    # report the objective through the same evaluator used for our solution
    values = np.clip(p.value, prob.spec.lower, prob.spec.upper)
    return values, prob.objective(values)
