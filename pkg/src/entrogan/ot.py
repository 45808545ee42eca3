"""Discrete entropic optimal transport.

Couplings are represented through dual potentials with the convention

    pi_ij = a_i * b_j * exp((phi_i - psi_j - C_ij) / lam)

so the Sinkhorn updates are pure log-sum-exp sweeps and survive lam down
to 1e-3.  Two independent solvers are provided: ``sinkhorn`` (the workhorse)
and ``brute_force_entropic_ot`` (projected mirror descent on the transport
polytope, kept deliberately different so it can serve as an oracle).

Two entropy conventions appear in the objectives.  ``shannon-joint`` is
cost - lam * H(pi); ``kl-to-product`` is cost + lam * KL(pi || a x b).
They differ by the constant lam * (H(a) + H(b)) for feasible couplings.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

OBJECTIVE_VARIANTS = ("shannon-joint", "kl-to-product")


class LossKind(enum.Enum):
    L2_NORM = "l2"
    HALF_SQUARED_L2 = "half-squared-l2"

    @classmethod
    def from_name(cls, name: str) -> "LossKind":
        for kind in cls:
            if kind.value == name:
                return kind
        raise ValueError(f"unknown loss {name!r};"
                         f" choose from {[k.value for k in cls]}")


class SinkhornError(RuntimeError):
    """Iteration budget exhausted.  Carries the last marginal residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


@dataclass
class SampleBatch:
    points: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] == 0:
            raise ValueError(f"points must be a nonempty n x d matrix,"
                             f" got shape {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("points contain non-finite entries")
        n = self.points.shape[0]
        if self.weights is None:
            self.weights = np.full(n, 1.0 / n)
        else:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if self.weights.shape != (n,):
                raise ValueError(f"weights shape {self.weights.shape}"
                                 f" does not match {n} points")
            if np.any(self.weights < 0.0):
                raise ValueError("weights must be nonnegative")
            if abs(self.weights.sum() - 1.0) > 1e-12:
                raise ValueError(f"weights sum to {self.weights.sum()!r},"
                                 f" not 1")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass
class Coupling:
    matrix: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray

    def validate(self, tol: float = 1e-8) -> None:
        if np.any(self.matrix < 0.0):
            raise ValueError("coupling has negative entries")
        row_err = np.max(np.abs(self.matrix.sum(axis=1) - self.row_marginal))
        col_err = np.max(np.abs(self.matrix.sum(axis=0) - self.col_marginal))
        if max(row_err, col_err) > tol:
            raise ValueError(f"coupling infeasible: row error {row_err:.3e},"
                             f" col error {col_err:.3e}, tol {tol:.1e}")


@dataclass
class DiscreteDualPotentials:
    phi: np.ndarray
    psi: np.ndarray
    lam: float
    residuals: list[float] = field(default_factory=list)


def pairwise_sq_dists(y: np.ndarray, yhat: np.ndarray) -> np.ndarray:
    yy = np.sum(y * y, axis=1)
    hh = np.sum(yhat * yhat, axis=1)
    sq = yy[:, None] + hh[None, :] - 2.0 * (y @ yhat.T)
    np.maximum(sq, 0.0, out=sq)
    return sq


def cost_matrix(loss: LossKind, y: SampleBatch, yhat: SampleBatch) -> np.ndarray:
    if y.dim != yhat.dim:
        raise ValueError(f"dimension mismatch: {y.dim} vs {yhat.dim}")
    sq = pairwise_sq_dists(y.points, yhat.points)
    if y.points.shape == yhat.points.shape and \
            np.array_equal(y.points, yhat.points):
        np.fill_diagonal(sq, 0.0)
    if loss is LossKind.HALF_SQUARED_L2:
        return 0.5 * sq
    if loss is LossKind.L2_NORM:
        return np.sqrt(sq)
    raise ValueError(f"unknown loss {loss!r}")


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    """Log-sum-exp along ``axis``; tolerates -inf entries and whole slices."""
    shift = np.max(x, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - shift), axis=axis, keepdims=True))
    return np.squeeze(out + shift, axis=axis)


def _log_coupling(c: np.ndarray, log_a: np.ndarray, log_b: np.ndarray,
                  phi: np.ndarray, psi: np.ndarray, lam: float) -> np.ndarray:
    return log_a[:, None] + log_b[None, :] + \
        (phi[:, None] - psi[None, :] - c) / lam


def _sweeps(c, log_a, log_b, a, lam, tol, max_iter, phi, psi,
            residuals: list[float] | None):
    """Alternating updates; returns (phi, psi, last residual, converged).

    The column update is exact by construction, so the marginal violation
    that matters is on the rows of the rebuilt coupling.
    """
    res = np.inf
    for _ in range(max_iter):
        phi = -lam * _lse(log_b[None, :] + (-psi[None, :] - c) / lam, axis=1)
        psi = lam * _lse(log_a[:, None] + (phi[:, None] - c) / lam, axis=0)
        log_pi = _log_coupling(c, log_a, log_b, phi, psi, lam)
        row = np.exp(_lse(log_pi, axis=1))
        res = float(np.max(np.abs(row - a)))
        if residuals is not None:
            residuals.append(res)
        if res <= tol:
            return phi, psi, res, True
    return phi, psi, res, False


def sinkhorn(c: np.ndarray, a: np.ndarray, b: np.ndarray, lam: float,
             tol: float = 1e-9, max_iter: int = 100000,
             anneal: bool = False,
             ) -> tuple[Coupling, DiscreteDualPotentials]:
    """Log-domain Sinkhorn until the largest marginal violation drops to
    ``tol``.  Residuals after each sweep are kept on the returned potentials.

    ``anneal=True`` warm-starts the potentials through a decreasing
    regularization schedule before the final solve at ``lam``; use it for
    lam below about 1e-2, where the plain iteration mixes very slowly.
    Only the final phase contributes to the residual log.
    """
    if lam <= 0.0:
        raise ValueError(f"lam must be positive, got {lam}")
    c = np.asarray(c, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n, m = c.shape
    if a.shape != (n,) or b.shape != (m,):
        raise ValueError(f"marginal shapes {a.shape}, {b.shape} do not match"
                         f" cost shape {c.shape}")
    with np.errstate(divide="ignore"):
        log_a = np.log(a)
        log_b = np.log(b)
    phi = np.zeros(n)
    psi = np.zeros(m)
    if anneal and lam < 1.0:
        schedule = []
        level = 1.0
        while level > lam * 1.0001:
            schedule.append(level)
            level /= np.sqrt(10.0)
        for level in schedule:
            phi, psi, _, _ = _sweeps(c, log_a, log_b, a, level, tol, 20000,
                                     phi, psi, None)
    residuals: list[float] = []
    phi, psi, res, ok = _sweeps(c, log_a, log_b, a, lam, tol, max_iter,
                                phi, psi, residuals)
    if not ok:
        raise SinkhornError(
            f"no convergence in {max_iter} iterations"
            f" (residual {res:.3e}, tol {tol:.1e})", res)
    log_pi = _log_coupling(c, log_a, log_b, phi, psi, lam)
    coupling = Coupling(np.exp(log_pi), a.copy(), b.copy())
    coupling.validate(10.0 * tol)
    pots = DiscreteDualPotentials(phi, psi, lam, residuals)
    return coupling, pots


def entropic_objective(pi: Coupling, c: np.ndarray, lam: float,
                       variant: str) -> float:
    """Regularized transport objective under the chosen entropy convention.

    0 * log 0 is taken as 0 throughout.
    """
    if variant not in OBJECTIVE_VARIANTS:
        raise ValueError(f"unknown variant {variant!r};"
                         f" choose from {OBJECTIVE_VARIANTS}")
    p = pi.matrix
    cost = float(np.sum(p * c))
    mask = p > 0.0
    safe_p = np.where(mask, p, 1.0)
    if variant == "shannon-joint":
        ent = -float(np.sum(np.where(mask, safe_p * np.log(safe_p), 0.0)))
        return cost - lam * ent
    prod = pi.row_marginal[:, None] * pi.col_marginal[None, :]
    safe_prod = np.where(mask, prod, 1.0)
    kl = float(np.sum(np.where(mask,
                               safe_p * (np.log(safe_p) - np.log(safe_prod)),
                               0.0)))
    return cost + lam * kl


def entropic_ot_value(p: SampleBatch, q: SampleBatch, loss: LossKind,
                      lam: float, tol: float = 1e-9,
                      max_iter: int = 100000) -> float:
    """W_{loss,lam}(p, q): cost plus lam * KL to the product measure, at the
    Sinkhorn optimum."""
    c = cost_matrix(loss, p, q)
    coupling, _ = sinkhorn(c, p.weights, q.weights, lam, tol, max_iter)
    return entropic_objective(coupling, c, lam, "kl-to-product")


def sinkhorn_loss(p: SampleBatch, q: SampleBatch, loss: LossKind, lam: float,
                  tol: float = 1e-9, max_iter: int = 100000) -> float:
    """Debiased divergence 2 W(p,q) - W(p,p) - W(q,q); zero when p is q."""
    w_pq = entropic_ot_value(p, q, loss, lam, tol, max_iter)
    w_pp = entropic_ot_value(p, p, loss, lam, tol, max_iter)
    w_qq = entropic_ot_value(q, q, loss, lam, tol, max_iter)
    return 2.0 * w_pq - w_pp - w_qq


def _kl_projection(log_rho: np.ndarray, a: np.ndarray, b: np.ndarray,
                   u: np.ndarray, v: np.ndarray
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """I-projection of exp(log_rho) onto the transport polytope.

    Damped Newton ascent on the projection dual: potentials (u, v) give
    pi = exp(log_rho + u + v), the gradient is the marginal defect, and
    the Hessian is [[diag r, pi], [pi^T, diag s]].  A least-squares
    solve quotients out the translation gauge.  Quadratic convergence
    keeps this exact even for the near-deterministic kernels that stall
    alternating marginal fits.  (u, v) warm-start the solve and the
    updated pair is returned for the next call.
    """
    n, m = log_rho.shape

    def dual(u, v):
        with np.errstate(over="ignore"):
            pi = np.exp(log_rho + u[:, None] + v[None, :])
            return float(a @ u + b @ v - pi.sum()), pi

    val, pi = dual(u, v)
    if not np.isfinite(val):
        u = np.zeros(n)
        v = np.zeros(m)
        val, pi = dual(u, v)
    prev_defect = np.inf
    stalled = 0
    for _ in range(200):
        r = pi.sum(axis=1)
        s = pi.sum(axis=0)
        g = np.concatenate([a - r, b - s])
        defect = float(np.abs(g).max())
        if defect <= 1e-14:
            break
        # quadratic steps halve the defect many times over; three
        # consecutive non-halving steps mean the float floor is reached
        if defect >= 0.5 * prev_defect:
            stalled += 1
            if stalled >= 3:
                break
        else:
            stalled = 0
        prev_defect = defect
        h = np.zeros((n + m, n + m))
        h[:n, :n] = np.diag(r)
        h[n:, n:] = np.diag(s)
        h[:n, n:] = pi
        h[n:, :n] = pi.T
        # pin the translation gauge (1, -1) by rank-1 augmentation; g is
        # orthogonal to it, so the Newton direction is unchanged and the
        # solve stays exact where lstsq's spectral cutoff would bend it
        z = np.concatenate([np.ones(n), -np.ones(m)]) / np.sqrt(n + m)
        try:
            step = np.linalg.solve(h + np.outer(z, z), g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(h, g, rcond=None)[0]
        t = 1.0
        for _ in range(60):
            trial_u = u + t * step[:n]
            trial_v = v + t * step[n:]
            trial_val, trial_pi = dual(trial_u, trial_v)
            if np.isfinite(trial_val) and trial_val >= val:
                break
            t *= 0.5
        else:
            break   # float optimum; gradient already tiny
        u, v, val, pi = trial_u, trial_v, trial_val, trial_pi
    return log_rho + u[:, None] + v[None, :], u, v


def brute_force_entropic_ot(c: np.ndarray, a: np.ndarray, b: np.ndarray,
                            lam: float, tol: float = 1e-12,
                            max_outer: int = 500) -> Coupling:
    """Projected mirror descent for the same strictly convex program.

    Entropic mirror step on the objective gradient followed by an exact
    KL projection back onto the transport polytope.  The step size
    1/(2 lam) is deliberately below 1/lam: at 1/lam a single step lands
    on the Gibbs kernel and the projection IS Sinkhorn, which would
    defeat the point of an independent oracle.  Residual here is the
    largest entrywise change of the iterate per outer step.
    """
    c = np.asarray(c, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n, m = c.shape
    if n * m > 64:
        raise ValueError(f"oracle capped at 64 entries, got {n}x{m}")
    if lam <= 0.0:
        raise ValueError(f"lam must be positive, got {lam}")
    with np.errstate(divide="ignore"):
        log_a = np.log(a)
        log_b = np.log(b)
    log_ab = log_a[:, None] + log_b[None, :]
    eta = 1.0 / (2.0 * lam)
    log_pi = log_ab.copy()   # start at the product coupling
    pi = np.exp(log_pi)
    residual = np.inf
    pot_u = np.zeros(n)
    pot_v = np.zeros(m)
    for _ in range(max_outer):
        # zero-mass entries stay at -inf; mask out the nan from inf - inf
        with np.errstate(invalid="ignore"):
            grad = c + lam * (log_pi - log_ab + 1.0)
            log_rho = np.where(np.isfinite(log_pi), log_pi - eta * grad,
                               log_pi)
        log_rho, pot_u, pot_v = _kl_projection(log_rho, a, b, pot_u, pot_v)
        new_pi = np.exp(log_rho)
        residual = float(np.max(np.abs(new_pi - pi)))
        log_pi, pi = log_rho, new_pi
        if residual <= tol:
            break
    else:
        raise RuntimeError(f"mirror descent did not settle in {max_outer}"
                           f" outer steps (last change {residual:.3e})")
    coupling = Coupling(pi, a.copy(), b.copy())
    coupling.validate(1e-8)
    return coupling


def lp_assignment_value(c: np.ndarray) -> float:
    """Exact unregularized OT value for uniform square instances by
    enumerating permutation vertices of the Birkhoff polytope.  n <= 6."""
    c = np.asarray(c, dtype=np.float64)
    n, m = c.shape
    if n != m:
        raise ValueError(f"square cost required, got {n}x{m}")
    if n > 6:
        raise ValueError(f"enumeration capped at n=6, got {n}")
    best = np.inf
    rows = np.arange(n)
    for perm in itertools.permutations(range(n)):
        best = min(best, float(c[rows, list(perm)].sum()) / n)
    return best
