"""Regularized Poisson (and Gaussian) deconvolution of secondary counts.

Every estimator here minimizes

    (1/N) * sum_t loss_t(A p) + lam/(n_p - m - 1) * ||D^(m+1) p||_1
                               + gamma/(d + 1) * ||W D^(1) p||_2^2

over ``0 <= p <= 1``, optionally with the last row of ``D^(m+1) p`` held at
zero (the real-time tail constraint).  The solver is a primal-dual
interior-point method; all Newton systems are banded with bandwidth ``d`` so a
solve costs ``O(n d^2)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from datetime import date, timedelta

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import linprog

from .core import (
    AlignmentError,
    ConvolutionOperator,
    CountSeries,
    DegenerateError,
    DelayDistribution,
    DifferenceOperator,
    ParameterError,
    SeverityCurve,
    day_offset,
)
from .smoothing import smooth_mean

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-10
KNOT_TOL = 1e-6
MAX_ITER = 200


class NumericError(ArithmeticError):
    """The objective evaluated to a non-finite value."""


class VarianceError(ValueError):
    """A Gaussian plug-in variance is not strictly positive."""


@dataclass(frozen=True)
class DeconvSpec:
    """Configuration of one deconvolution problem."""

    loss: str = "poisson"
    order: int = 0
    lam: float = 0.0
    gamma: float = 0.0
    tail_constraint: bool = False
    lower: float = 0.0
    upper: float = 1.0

    def __post_init__(self):
        if self.loss not in ("poisson", "gaussian"):
            raise ParameterError(f"unknown loss {self.loss!r}")
        if self.order not in (0, 1, 2):
            raise ParameterError(f"trend filtering order must be 0, 1 or 2, got {self.order}")
        if self.lam < 0 or self.gamma < 0:
            raise ParameterError("lam and gamma must be nonnegative")
        if not 0.0 <= self.lower < self.upper <= 1.0:
            raise ParameterError("box bounds must satisfy 0 <= lower < upper <= 1")


@dataclass
class FitResult:
    curve: SeverityCurve
    objective: float
    iterations: int
    converged: bool
    knots: np.ndarray
    burn: int
    gap: float = float("nan")
    polished: bool = False
    spec: DeconvSpec | None = None

    @property
    def estimate(self) -> float:
        """Last element of the curve: the real-time estimate."""
        return float(self.curve.values[-1])


@dataclass
class DeconvProblem:
    """A fully aligned instance: arrays only, no dates."""

    A: ConvolutionOperator
    y: np.ndarray
    spec: DeconvSpec
    weights: np.ndarray
    variance: np.ndarray | None = None
    tail: np.ndarray | None = None
    p_origin: date | None = None
    _smooth_rows: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.y.shape != (self.A.n_y,) or self.weights.shape != (self.A.n_y,):
            raise AlignmentError("secondary counts do not match the operator rows")
        if self.spec.loss == "gaussian":
            if self.variance is None:
                raise VarianceError("Gaussian loss needs a plug-in variance")
            self.variance = np.asarray(self.variance, float)
            bad = np.flatnonzero(self.weights * (self.variance <= 0))
            if bad.size:
                raise VarianceError(f"plug-in variance not positive at rows {bad[:5].tolist()}")
        # rows that cannot be influenced by p contribute a constant only
        self._smooth_rows = (self.weights > 0) & (self.A.row_sums() > 0)

    @property
    def n(self) -> int:
        return self.A.n_p

    @property
    def n_train(self) -> float:
        return float(self.weights.sum())

    @property
    def n_rows(self) -> int:
        return max(self.n - self.spec.order - 1, 0)

    @property
    def lam_scaled(self) -> float:
        return self.spec.lam / self.n_rows if self.n_rows else 0.0

    @property
    def gamma_scaled(self) -> float:
        return self.spec.gamma / (self.A.d + 1)

    @property
    def D(self) -> DifferenceOperator:
        return DifferenceOperator(self.spec.order + 1, self.n)

    def constraint(self) -> np.ndarray | None:
        if not self.spec.tail_constraint:
            return None
        c = np.zeros(self.n)
        c[-(self.spec.order + 2):] = self.D.stencil()
        return c

    # smooth part -------------------------------------------------------
    def loss(self, p) -> float:
        mu = self.A.matvec(p)
        w = self.weights
        if self.spec.loss == "poisson":
            val = np.sum(w * (mu - self.y * np.log(np.maximum(mu, LOG_FLOOR))))
        else:
            val = np.sum(w * (self.y - mu) ** 2 / self.variance)
        return float(val / self.n_train)

    def quad(self, p) -> float:
        if self.tail is None or self.spec.gamma == 0:
            return 0.0
        return float(self.gamma_scaled * np.sum(self.tail * np.diff(p) ** 2))

    def penalty(self, p) -> float:
        if self.n_rows == 0:
            return 0.0
        return float(self.lam_scaled * np.sum(np.abs(self.D @ p)))

    def objective(self, p) -> float:
        val = self.loss(p) + self.penalty(p) + self.quad(p)
        if not np.isfinite(val):
            mu = self.A.matvec(p)
            bad = np.flatnonzero(~np.isfinite(mu))
            raise NumericError(f"objective is not finite (rows {bad[:5].tolist()})")
        return val

    def smooth_grad(self, p) -> np.ndarray:
        mu = self.A.matvec(p)
        g = self._row_grad(mu)
        out = self.A.rmatvec(g) / self.n_train
        if self.tail is not None and self.spec.gamma > 0:
            out += 2 * self.gamma_scaled * _d1t(self.tail * np.diff(p))
        return out

    def _row_grad(self, mu):
        w = np.where(self._smooth_rows, self.weights, 0.0)
        if self.spec.loss == "poisson":
            return w * (1.0 - self.y / np.maximum(mu, LOG_FLOOR))
        return -2.0 * w * (self.y - mu) / self.variance

    def _row_curv(self, mu):
        w = np.where(self._smooth_rows, self.weights, 0.0)
        if self.spec.loss == "poisson":
            return w * self.y / np.maximum(mu, LOG_FLOOR) ** 2
        return 2.0 * w / self.variance

    def smooth_hess_banded(self, p, bw: int) -> np.ndarray:
        """Upper banded Hessian of the smooth part, bandwidth ``bw >= d``."""
        mu = self.A.matvec(p)
        ab = np.zeros((bw + 1, self.n))
        d = self.A.d
        ab[bw - d:] = self.A.gram_banded(self._row_curv(mu) / self.n_train)
        if self.tail is not None and self.spec.gamma > 0:
            _add_dtwd(ab, 2 * self.gamma_scaled * self.tail, np.array([-1.0, 1.0]))
        return ab

    def smooth_hess_dense(self, p) -> np.ndarray:
        mu = self.A.matvec(p)
        Ad = self.A.todense()
        H = Ad.T @ (self._row_curv(mu)[:, None] * Ad) / self.n_train
        if self.tail is not None and self.spec.gamma > 0:
            D1 = np.diff(np.eye(self.n), axis=0)
            H += 2 * self.gamma_scaled * D1.T @ (self.tail[:, None] * D1)
        return H

    def feasible_mu(self, p) -> bool:
        if self.spec.loss != "poisson":
            return True
        mu = self.A.matvec(p)
        need = self._smooth_rows & (self.y > 0)
        return bool(np.all(mu[need] > 0))


def _d1t(v) -> np.ndarray:
    return -np.diff(np.concatenate(([0.0], v, [0.0])))


def _add_dtwd(ab: np.ndarray, omega: np.ndarray, stencil: np.ndarray):
    """Add ``D^T diag(omega) D`` to upper banded ``ab`` for a difference stencil."""
    bw = ab.shape[0] - 1
    k = stencil.size - 1
    n = ab.shape[1]
    r = omega.size
    for o in range(k + 1):
        band = np.zeros(n - o)
        for j in range(k + 1 - o):
            # row i touches columns i..i+k; column c = i + j pairs with c + o
            band[j:j + r] += omega * stencil[j] * stencil[j + o]
        ab[bw - o, o:] += band


def _add_diag(ab: np.ndarray, diag: np.ndarray):
    ab[-1] += diag


class _BandedSystem:
    """Cholesky factor of an SPD banded matrix, with a diagonal safeguard."""

    def __init__(self, ab: np.ndarray):
        scale = np.max(np.abs(ab[-1])) if ab.size else 1.0
        shift = 0.0
        for _ in range(8):
            try:
                work = ab.copy()
                work[-1] += shift
                self.cb = sla.cholesky_banded(work, lower=False, check_finite=False)
                return
            except np.linalg.LinAlgError:
                shift = max(shift * 100, 1e-14 * max(scale, 1.0))
        raise NumericError("Newton system is not positive definite")

    def solve(self, b):
        return sla.cho_solve_banded((self.cb, False), b, check_finite=False)


@dataclass
class _IPState:
    p: np.ndarray
    s: np.ndarray
    l1: np.ndarray
    l2: np.ndarray
    l3: np.ndarray
    l4: np.ndarray
    nu: float


def _interior_point(prob: DeconvProblem, p0: np.ndarray, tol: float, max_iter: int):
    spec = prob.spec
    n = prob.n
    use_l1 = prob.lam_scaled > 0 and prob.n_rows > 0
    D = prob.D
    r = prob.n_rows if use_l1 else 0
    lo, hi = spec.lower, spec.upper
    c = prob.constraint()
    lam = prob.lam_scaled
    bw = max(prob.A.d, spec.order + 1 if use_l1 else 0,
             1 if (prob.tail is not None and spec.gamma > 0) else 0, 1)
    stencil = D.stencil()
    m_ineq = 2 * r + 2 * n

    p = p0.copy()
    z = D @ p if use_l1 else np.zeros(0)
    s = np.abs(z) + max(1e-2, 0.1 * np.max(np.abs(z), initial=0))
    g0 = prob.smooth_grad(p)
    gscale = max(1.0, float(np.max(np.abs(g0))))
    l3 = np.full(n, gscale / n)
    l4 = np.full(n, gscale / n)
    l1 = np.full(r, lam / 2)
    l2 = np.full(r, lam / 2)
    st = _IPState(p, s, l1, l2, l3, l4, 0.0)

    def ineq(state):
        zz = D @ state.p if use_l1 else np.zeros(0)
        return (zz - state.s, -zz - state.s, lo - state.p, state.p - hi)

    def residuals(state, t):
        f1, f2, f3, f4 = ineq(state)
        grad = prob.smooth_grad(state.p)
        rp = grad - state.l3 + state.l4
        if use_l1:
            rp = rp + D.rmatvec(state.l1 - state.l2)
        if c is not None:
            rp = rp + c * state.nu
        rs = lam - state.l1 - state.l2
        rc = np.concatenate((-state.l1 * f1 - 1 / t, -state.l2 * f2 - 1 / t,
                             -state.l3 * f3 - 1 / t, -state.l4 * f4 - 1 / t))
        rpri = np.array([c @ state.p]) if c is not None else np.zeros(0)
        return rp, rs, rc, rpri

    def resnorm(parts):
        return float(np.sqrt(sum(np.dot(v, v) for v in parts)))

    def gap_of(state):
        f1, f2, f3, f4 = ineq(state)
        return -(f1 @ state.l1 + f2 @ state.l2 + f3 @ state.l3 + f4 @ state.l4)

    mu_factor = 10.0
    converged = False
    it = 0
    obj_scale = 1.0 + abs(prob.objective(p))
    feas_tol = 1e-8 * gscale
    gaps = []
    for it in range(1, max_iter + 1):
        eta = gap_of(st)
        t = mu_factor * m_ineq / eta
        f1, f2, f3, f4 = ineq(st)
        rp, rs, rc, rpri = residuals(st, t)
        if (eta <= tol * obj_scale and np.linalg.norm(rp) <= feas_tol
                and np.linalg.norm(rs) <= feas_tol and np.linalg.norm(rpri) <= 1e-10):
            converged = True
            break
        sig3 = st.l3 / -f3
        sig4 = st.l4 / -f4
        ab = prob.smooth_hess_banded(st.p, bw)
        _add_diag(ab, sig3 + sig4)
        grad = prob.smooth_grad(st.p)
        rhs_p = -grad + (1 / f4 - 1 / f3) / t
        if c is not None:
            rhs_p -= c * st.nu
        if use_l1:
            sig1 = st.l1 / -f1
            sig2 = st.l2 / -f2
            ssum = sig1 + sig2
            _add_dtwd(ab, 4 * sig1 * sig2 / ssum, stencil)
            rhs_p += D.rmatvec(1 / f1 - 1 / f2) / t
            rhs_s = -lam + (-1 / f1 - 1 / f2) / t
            rhs_p -= D.rmatvec((sig2 - sig1) / ssum * rhs_s)
        system = _BandedSystem(ab)
        dp = system.solve(rhs_p)
        dnu = 0.0
        if c is not None:
            hc = system.solve(c)
            dnu = (c @ dp + c @ st.p) / (c @ hc)
            dp = dp - hc * dnu
        if use_l1:
            Ddp = D @ dp
            ds = (rhs_s - (sig2 - sig1) * Ddp) / ssum
            df1 = Ddp - ds
            df2 = -Ddp - ds
        else:
            ds = np.zeros(0)
            df1 = df2 = np.zeros(0)
        df3, df4 = -dp, dp
        dl = [(-l - (1 / t + l * df) / f) for l, df, f in
              ((st.l1, df1, f1), (st.l2, df2, f2), (st.l3, df3, f3), (st.l4, df4, f4))]

        step = 1.0
        for l, dlv in zip((st.l1, st.l2, st.l3, st.l4), dl):
            neg = dlv < 0
            if np.any(neg):
                step = min(step, float(np.min(-l[neg] / dlv[neg])))
        step *= 0.99
        base = resnorm(residuals(st, t))

        def moved(a):
            return _IPState(st.p + a * dp, st.s + a * ds, st.l1 + a * dl[0], st.l2 + a * dl[1],
                            st.l3 + a * dl[2], st.l4 + a * dl[3], st.nu + a * dnu)

        while step > 1e-14:
            cand = moved(step)
            if all(np.all(f < 0) for f in ineq(cand)) and prob.feasible_mu(cand.p):
                break
            step *= 0.5
        while step > 1e-14:
            cand = moved(step)
            if resnorm(residuals(cand, t)) <= (1 - 0.01 * step) * base:
                break
            step *= 0.5
        if step <= 1e-14:
            break
        st = cand
        # degenerate instances (e.g. lam exactly at lambda_max) stall at the
        # roundoff floor; accept a near-converged point once progress stops
        gaps.append(eta)
        if len(gaps) > 15 and gaps[-16] < 1.1 * eta:
            converged = (eta <= 100 * tol * obj_scale and np.linalg.norm(rp) <= 100 * feas_tol
                         and np.linalg.norm(rs) <= 100 * feas_tol)
            break
    return st.p, it, converged, gap_of(st)


def _polish(prob: DeconvProblem, p: np.ndarray, snap: float):
    """Re-solve with near-zero differences and near-active bounds held exactly.

    Rows whose sign flips in the re-solve join the zero set and the re-solve
    is repeated.  Returns ``None`` if no consistent snapped solution is found.
    """
    use_l1 = prob.lam_scaled > 0 and prob.n_rows > 0
    z = prob.D @ p if prob.n_rows > 0 else np.zeros(0)
    zero = np.abs(z) <= snap if use_l1 else np.zeros(0, dtype=bool)
    at_lo = p - prob.spec.lower <= snap
    at_hi = prob.spec.upper - p <= snap
    for _ in range(4):
        q = _polish_once(prob, p, zero, np.sign(z), at_lo, at_hi)
        if q is None:
            return None
        if not use_l1:
            return q
        flipped = ~zero & (np.sign(prob.D @ q) != np.sign(z))
        if not flipped.any():
            return q
        zero = zero | flipped
    return None


def _polish_once(prob, p, zero, sign, at_lo, at_hi):
    spec = prob.spec
    n = prob.n
    use_l1 = zero.size > 0
    rows, target = [], []
    lin = np.zeros(n)
    if use_l1:
        Dm = sp.diags([float(v) for v in prob.D.stencil()], list(range(spec.order + 2)),
                      shape=(prob.n_rows, n), format="csr")
        rows.append(Dm[np.flatnonzero(zero)])
        target.append(np.zeros(int(zero.sum())))
        free = np.flatnonzero(~zero)
        if free.size:
            lin = Dm[free].T @ (prob.lam_scaled * sign[free])
    fixed = np.flatnonzero(at_lo | at_hi)
    if fixed.size:
        rows.append(sp.csr_matrix((np.ones(fixed.size), (np.arange(fixed.size), fixed)),
                                  shape=(fixed.size, n)))
        target.append(np.where(at_lo[fixed], spec.lower, spec.upper))
    c = prob.constraint()
    if c is not None:
        rows.append(sp.csr_matrix(c[None, :]))
        target.append(np.zeros(1))
    if not rows:
        return None
    E = sp.vstack(rows, format="csc")
    e = np.concatenate(target)
    q = p.copy()
    bw = max(prob.A.d, 1)
    for _ in range(8):
        g = prob.smooth_grad(q) + lin
        H = _banded_to_sparse(prob.smooth_hess_banded(q, bw))
        rhs = np.concatenate((-g, e - E @ q))
        dq = _kkt_solve(H, E, rhs)
        if dq is None:
            return None
        dq = dq[:n]
        step = 1.0
        while step > 1e-10:
            cand = q + step * dq
            if (prob.feasible_mu(cand) and np.all(cand >= spec.lower - 1e-12)
                    and np.all(cand <= spec.upper + 1e-12)):
                break
            step *= 0.5
        q = q + step * dq
        if np.max(np.abs(step * dq)) <= 1e-11 * max(1.0, np.max(np.abs(q))):
            break
    q = np.clip(q, spec.lower, spec.upper)
    if not prob.feasible_mu(q):
        return None
    return q


def _kkt_solve(H, E, rhs):
    K = sp.bmat([[H, E.T], [E, None]], format="csc")
    try:
        return spla.splu(K).solve(rhs)
    except RuntimeError:
        pass
    # redundant constraints (a zero difference between two pinned rates) make
    # the KKT matrix singular; factor a quasi-definite shift and refine
    delta = 1e-10 * max(1.0, abs(H).max())
    n, k = H.shape[0], E.shape[0]
    shifted = sp.bmat([[H + delta * sp.eye(n), E.T], [E, -delta * sp.eye(k)]], format="csc")
    try:
        lu = spla.splu(shifted)
    except RuntimeError:
        return None
    sol = lu.solve(rhs)
    for _ in range(5):
        sol = sol + lu.solve(rhs - K @ sol)
    return sol


def _banded_to_sparse(ab: np.ndarray) -> sp.csc_matrix:
    bw, n = ab.shape[0] - 1, ab.shape[1]
    diags, offs = [], []
    for o in range(bw + 1):
        band = ab[bw - o, o:]
        diags.append(band)
        offs.append(o)
        if o:
            diags.append(band)
            offs.append(-o)
    return sp.diags(diags, offs, shape=(n, n), format="csc")


def _initial_point(prob: DeconvProblem) -> np.ndarray:
    spec = prob.spec
    rows = prob._smooth_rows
    a = prob.A.row_sums()
    if rows.any() and np.sum(prob.weights[rows] * a[rows]) > 0:
        c0 = np.sum(prob.weights[rows] * prob.y[rows]) / np.sum(prob.weights[rows] * a[rows])
    else:
        c0 = 0.5
    width = spec.upper - spec.lower
    c0 = float(np.clip(c0, spec.lower + 0.02 * width, spec.upper - 0.02 * width))
    return np.full(prob.n, c0)


def knots_of(p: np.ndarray, order: int, tol: float = KNOT_TOL) -> np.ndarray:
    if p.size <= order + 1:
        return np.zeros(0, dtype=int)
    z = np.diff(p, n=order + 1)
    return np.flatnonzero(np.abs(z) > tol * max(1.0, float(np.max(np.abs(p)))))


def solve(prob: DeconvProblem, *, tol: float = 1e-10, max_iter: int = MAX_ITER,
          polish: bool = False) -> FitResult:
    """Minimize the problem's objective; see the module docstring."""
    p0 = _initial_point(prob)
    p, it, converged, gap = _interior_point(prob, p0, tol, max_iter)
    p = np.clip(p, prob.spec.lower, prob.spec.upper)
    obj = prob.objective(p)
    polished = False
    if polish:
        snap = 1e-6 * max(1.0, float(np.max(np.abs(p))))
        q = _polish(prob, p, snap)
        if q is not None:
            obj_q = prob.objective(q)
            if obj_q <= obj + 1e-12 * (1 + abs(obj)):
                p, obj, polished = q, obj_q, True
    if not converged:
        log.warning("interior point stopped after %d iterations (gap %.3g)", it, gap)
    origin = prob.p_origin or date(2000, 1, 1)
    return FitResult(SeverityCurve(origin, p), obj, it, converged,
                     knots_of(p, prob.spec.order), prob.A.d, gap, polished, prob.spec)


# ---------------------------------------------------------------------------
# problem builders


def tail_weights(delay: DelayDistribution, n: int, T: date, p_origin: date) -> np.ndarray:
    """Squared tail weights ``w_t = 1/F(T - t)`` on the first-difference rows.

    Row ``j`` of ``D^(1) p`` is ``p_{j+1} - p_j``, i.e. belongs to time
    ``t = p_origin + j + 1``.  Rows before ``T - d`` get weight 0.
    """
    d = delay.d
    cdf = np.cumsum(delay.at(T))
    positive = cdf[cdf > 0]
    if positive.size == 0:
        raise ParameterError("delay CDF is identically zero")
    w = np.zeros(n - 1)
    t_idx = np.arange(1, n)
    back = day_offset(p_origin, T) - t_idx
    inside = (back >= 0) & (back <= d)
    # a zero CDF value would give an infinite weight; use the smallest positive one
    cdf_safe = np.where(cdf > 0, cdf, positive[0])
    w[inside] = 1.0 / cdf_safe[back[inside]]
    return w


def _secondary_slice(Y: CountSeries, start: date, end: date) -> np.ndarray:
    n = day_offset(start, end) + 1
    return Y.window(start, n).astype(float)


def build_problem(X: CountSeries, Y: CountSeries, delay: DelayDistribution, spec: DeconvSpec,
                  *, T: date | None = None, window: int | None = None,
                  train: np.ndarray | None = None, variance=None) -> DeconvProblem:
    """Align the inputs and assemble a :class:`DeconvProblem`.

    Secondary counts on ``Y``'s axis up to ``T`` (default: ``Y.end``) enter the
    loss; with ``window`` only the last ``window`` days do.  ``train`` is a
    0/1 mask over those days (cross-validation holds rows out through it).
    """
    end = T or Y.end
    if day_offset(Y.origin, end) < 0 or end > Y.end:
        raise AlignmentError(f"estimation time {end} outside secondary series {Y.origin}..{Y.end}")
    start = Y.origin
    if window is not None:
        start = max(start, end - timedelta(days=window - 1))
    y = _secondary_slice(Y, start, end)
    A = ConvolutionOperator(X, delay, start, y.size)
    weights = np.ones(y.size) if train is None else np.asarray(train, float)
    tail = None
    if spec.gamma > 0:
        tail = tail_weights(delay, A.n_p, end, A.p_origin)
    var = None
    if spec.loss == "gaussian":
        if variance is None:
            var = np.maximum(smooth_mean(y[weights > 0], np.flatnonzero(weights > 0)), 0.0)
            var = np.interp(np.arange(y.size), np.flatnonzero(weights > 0), var)
            var = np.maximum(var, 1.0)
        else:
            var = np.asarray(variance, float)
            if var.size == len(Y) and var.size != y.size:
                var = var[day_offset(Y.origin, start):day_offset(Y.origin, end) + 1]
            if var.size != y.size:
                raise AlignmentError("plug-in variance does not match the secondary counts")
    return DeconvProblem(A, y, spec, weights, var, tail, A.p_origin)


def objective(p, X: CountSeries, Y: CountSeries, delay: DelayDistribution, spec: DeconvSpec,
              *, T: date | None = None, window: int | None = None, train=None,
              variance=None) -> float:
    """Normalized objective value at rates ``p`` (on the problem's rate axis)."""
    prob = build_problem(X, Y, delay, spec, T=T, window=window, train=train, variance=variance)
    p = np.asarray(p.values if isinstance(p, SeverityCurve) else p, float)
    if p.size != prob.n:
        raise AlignmentError(f"rates have length {p.size}, problem needs {prob.n}")
    return prob.objective(p)


def _check_length(Y: CountSeries, d: int):
    if len(Y) < d + 5:
        raise ParameterError(f"need at least d + 5 = {d + 5} secondary days, got {len(Y)}")


def solve_retrospective(X: CountSeries, Y: CountSeries, delay: DelayDistribution,
                        order: int, lam: float, *, train=None, polish: bool = True,
                        **solve_kw) -> FitResult:
    """Retrospective trend-filtered Poisson deconvolution over all of ``Y``."""
    _check_length(Y, delay.d)
    spec = DeconvSpec("poisson", order, lam)
    return solve(build_problem(X, Y, delay, spec, train=train), polish=polish, **solve_kw)


def solve_realtime(X: CountSeries, Y: CountSeries, delay: DelayDistribution, order: int,
                   lam: float, gamma: float, T: date, *, tail_constraint: bool = True,
                   window: int | None = None, train=None, polish: bool = True,
                   **solve_kw) -> FitResult:
    """Real-time estimate at ``T`` using data through ``T`` only.

    Adds the tapered tail penalty (``gamma``) and holds the last
    ``(order+1)``-th difference at zero.  ``result.estimate`` is ``p_T``.
    """
    spec = DeconvSpec("poisson", order, lam, gamma, tail_constraint)
    prob = build_problem(X, Y, delay, spec, T=T, window=window, train=train)
    return solve(prob, polish=polish, **solve_kw)


def solve_gaussian(X: CountSeries, Y: CountSeries, delay: DelayDistribution, order: int,
                   lam: float, gamma: float = 0.0, T: date | None = None, *,
                   variance=None, tail_constraint: bool | None = None, window=None,
                   train=None, polish: bool = True, **solve_kw) -> FitResult:
    """Weighted least-squares deconvolution with a fixed plug-in variance.

    ``variance`` defaults to a smoothing-spline fit of ``Y``.  With ``T`` set
    the real-time regularizers are added as in :func:`solve_realtime`.
    """
    if tail_constraint is None:
        tail_constraint = T is not None
    spec = DeconvSpec("gaussian", order, lam, gamma, tail_constraint)
    prob = build_problem(X, Y, delay, spec, T=T, window=window, train=train, variance=variance)
    return solve(prob, polish=polish, **solve_kw)


# ---------------------------------------------------------------------------
# lambda_max


def polynomial_basis(n: int, order: int) -> np.ndarray:
    """Columns span polynomials of degree ``order`` on ``n`` points (Legendre)."""
    x = np.linspace(-1.0, 1.0, n)
    return np.polynomial.legendre.legvander(x, order)


def _restricted_fit(prob: DeconvProblem, B: np.ndarray) -> np.ndarray:
    """Minimize the smooth loss over ``p = B a`` subject to the box (log barrier)."""
    lo, hi = prob.spec.lower, prob.spec.upper
    a = np.zeros(B.shape[1])
    a[0] = _initial_point(prob)[0]
    if B.shape[1] == 1:
        rows = prob._smooth_rows
        w, aa = prob.weights[rows], prob.A.row_sums()[rows]
        if prob.spec.loss == "poisson":
            c = np.sum(w * prob.y[rows]) / np.sum(w * aa)
        else:
            v = prob.variance[rows]
            c = np.sum(w * prob.y[rows] * aa / v) / np.sum(w * aa ** 2 / v)
        return np.array([float(np.clip(c, lo, hi))])
    t = 1.0
    m = 2 * B.shape[0]
    for _ in range(60):
        for _ in range(50):
            p = B @ a
            g = t * (B.T @ prob.smooth_grad(p)) - B.T @ (1 / (p - lo)) + B.T @ (1 / (hi - p))
            H = t * (B.T @ prob.smooth_hess_dense(p) @ B) + \
                B.T @ ((1 / (p - lo) ** 2 + 1 / (hi - p) ** 2)[:, None] * B)
            da = -np.linalg.solve(H, g)
            dec = -g @ da
            if dec / 2 <= 1e-12:
                break
            step = 1.0
            f0 = t * prob.loss(p) - np.sum(np.log(p - lo)) - np.sum(np.log(hi - p))
            while step > 1e-12:
                q = B @ (a + step * da)
                if np.all(q > lo) and np.all(q < hi) and prob.feasible_mu(q):
                    fq = t * prob.loss(q) - np.sum(np.log(q - lo)) - np.sum(np.log(hi - q))
                    if fq <= f0 - 0.25 * step * dec:
                        break
                step *= 0.5
            a = a + step * da
        if m / t < 1e-13:
            break
        t *= 20
    return a


def _dual_sup(prob: DeconvProblem, grad: np.ndarray) -> float:
    """``||(D D^T)^{-1} D grad||_inf`` for the problem's difference operator."""
    Dm = prob.D.matrix
    return float(np.max(np.abs(np.linalg.solve(Dm @ Dm.T, Dm @ grad))))


def lambda_max_exact(prob: DeconvProblem) -> float:
    """Smallest ``lam`` at which the solution is a global polynomial.

    Evaluated at the polynomial-restricted optimum, where the smooth gradient
    lies in the row space of ``D`` and ``(D D^T)^{-1} D grad`` is the unique
    dual certificate.  If the box binds there, the normal-cone multipliers are
    chosen by a linear program to minimize the certificate's sup-norm.
    """
    if prob.n_rows == 0:
        return 0.0
    if not np.any(prob.weights * prob.y > 0):
        raise DegenerateError("secondary counts are identically zero")
    B = polynomial_basis(prob.n, prob.spec.order)
    a = _restricted_fit(prob, B)
    p = B @ a
    grad = prob.smooth_grad(p)
    lo, hi = prob.spec.lower, prob.spec.upper
    bound_tol = 1e-9
    active_lo = np.flatnonzero(p - lo <= bound_tol)
    active_hi = np.flatnonzero(hi - p <= bound_tol)
    scale = prob.n_rows
    if active_lo.size + active_hi.size == 0:
        return scale * _dual_sup(prob, grad)
    # grad + nu must lie in range(D^T) (i.e. B^T (grad + nu) = 0), nu in the normal cone
    Dm = prob.D.matrix
    M = np.linalg.solve(Dm @ Dm.T, Dm)
    idx = np.concatenate((active_lo, active_hi))
    k = idx.size
    r = Dm.shape[0]
    # variables: nu (k), tau (1); minimize tau s.t. -tau <= M (grad + E nu) <= tau
    E = np.zeros((prob.n, k))
    E[idx, np.arange(k)] = 1.0
    ME = M @ E
    Mg = M @ grad
    c_obj = np.zeros(k + 1)
    c_obj[-1] = 1.0
    A_ub = np.block([[ME, -np.ones((r, 1))], [-ME, -np.ones((r, 1))]])
    b_ub = np.concatenate((-Mg, Mg))
    A_eq = np.hstack((B.T @ E, np.zeros((B.shape[1], 1))))
    b_eq = -B.T @ grad
    # at a lower bound the multiplier pushes up (nu <= 0), at an upper bound down
    bounds = [(None, 0.0)] * active_lo.size + [(0.0, None)] * active_hi.size + [(0.0, None)]
    res = linprog(c_obj, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds,
                  method="highs")
    if not res.success:
        raise DegenerateError(f"lambda_max certificate LP failed: {res.message}")
    return scale * float(res.x[-1])


def lambda_max_alternating(prob: DeconvProblem, iterations: int = 200,
                           step: float = 1e-2) -> tuple[float, np.ndarray]:
    """Alternating min-max approximation of the polynomial-restricted bound.

    Alternates exact maximization over the l1-ball vector ``u`` (a signed
    coordinate vector at the arg-max of ``|x|``) with a projected gradient step
    on the polynomial coefficients.  Returns the best value and the history of
    best-so-far values, which is nonincreasing by construction.

    This minimizes ``||(D D^T)^{-1} D grad(B a)||_inf`` over *all* feasible
    polynomials, which can undershoot the true ``lambda_max``; see
    :func:`lambda_max_exact` for the certified value.
    """
    if prob.n_rows == 0:
        return 0.0, np.zeros(0)
    Dm = prob.D.matrix
    M = np.linalg.solve(Dm @ Dm.T, Dm)
    B = polynomial_basis(prob.n, prob.spec.order)
    a = _restricted_fit(prob, B)
    lo, hi = prob.spec.lower, prob.spec.upper
    scale = prob.n_rows

    def value(coef):
        return float(np.max(np.abs(M @ prob.smooth_grad(B @ coef))))

    best = value(a)
    history = [best]
    for _ in range(iterations):
        x = M @ prob.smooth_grad(B @ a)
        i = int(np.argmax(np.abs(x)))
        u = np.zeros_like(x)
        u[i] = np.sign(x[i])
        p = B @ a
        mu = prob.A.matvec(p)
        curv = prob._row_curv(mu) / prob.n_train
        # d/da of u^T M grad(B a) = B^T H M^T u with H the loss Hessian
        Mt_u = M.T @ u
        g = B.T @ prob.A.rmatvec(curv * prob.A.matvec(Mt_u))
        gn = np.linalg.norm(g)
        if gn == 0:
            break
        cand = _project_box_poly(B, a - step * g / gn * max(np.linalg.norm(a), 1e-3), lo, hi)
        if not prob.feasible_mu(B @ cand):
            step *= 0.5
            history.append(best)
            continue
        val = value(cand)
        if val < best:
            best, a = val, cand
        else:
            step *= 0.5
        history.append(best)
    return scale * best, scale * np.asarray(history)


def _project_box_poly(B: np.ndarray, a: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Euclidean projection of ``a`` onto ``{a : lo <= B a <= hi}``."""
    p = B @ a
    if np.all(p >= lo) and np.all(p <= hi):
        return a
    from scipy.optimize import minimize, LinearConstraint

    res = minimize(lambda v: 0.5 * np.sum((v - a) ** 2), a, jac=lambda v: v - a,
                   constraints=[LinearConstraint(B, lo, hi)], method="SLSQP",
                   options={"ftol": 1e-14, "maxiter": 200})
    return res.x


def lambda_max_bound(X: CountSeries, Y: CountSeries, delay: DelayDistribution, order: int,
                     iterations: int = 0, *, train=None, T: date | None = None,
                     window: int | None = None, loss: str = "poisson", variance=None) -> float:
    """Regularization level above which the fit has no knots.

    Returns the certified value from :func:`lambda_max_exact`.  With
    ``iterations > 0`` the alternating scheme is also run and its value is
    logged for comparison.
    """
    spec = DeconvSpec(loss, order, 0.0)
    prob = build_problem(X, Y, delay, spec, T=T, window=window, train=train, variance=variance)
    val = lambda_max_exact(prob)
    if iterations > 0:
        alt, _ = lambda_max_alternating(prob, iterations)
        log.debug("lambda_max certified %.6g, alternating %.6g", val, alt)
    return val


def with_lambda(prob: DeconvProblem, lam: float, gamma: float | None = None) -> DeconvProblem:
    """Same instance at a different regularization level."""
    spec = replace(prob.spec, lam=lam, gamma=prob.spec.gamma if gamma is None else gamma)
    out = DeconvProblem(prob.A, prob.y, spec, prob.weights, prob.variance, prob.tail,
                        prob.p_origin)
    return out
