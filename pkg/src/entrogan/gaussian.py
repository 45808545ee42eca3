"""Closed-form linear-Gaussian ground truth.

For y = G x + c + sqrt(lam) * eps with x, eps standard normal, everything
is Gaussian: the latent posterior is N(R (y - c), I - R G) with
R = G^T (G G^T + lam I)^{-1}, and the marginal is N(c, G G^T + lam I).
The offset c defaults to zero (the data-generating model); it is there so
an oracle can also describe a trained affine generator, whose composed
layers generally carry a bias.

The module also hosts the desk-scale quadrature machinery (composite
Simpson) used to certify 1-D quantities to 1e-6.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

log = logging.getLogger(__name__)

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class GapEstimate:
    value: float
    standard_error: float


class LinearGaussianOracle:
    """Immutable closed forms for one (G, lam, c) triple."""

    def __init__(self, g: np.ndarray, lam: float,
                 mean: np.ndarray | None = None):
        g = np.asarray(g, dtype=np.float64)
        if g.ndim != 2:
            raise ValueError(f"G must be d x r, got shape {g.shape}")
        if lam <= 0.0:
            raise ValueError(f"lam must be positive, got {lam}")
        d, r = g.shape
        self.g = g
        self.lam = float(lam)
        self.d = d
        self.r = r
        self.mean = np.zeros(d) if mean is None else \
            np.asarray(mean, dtype=np.float64)
        if self.mean.shape != (d,):
            raise ValueError(f"mean shape {self.mean.shape} does not match"
                             f" d={d}")
        self.marginal_cov = g @ g.T + lam * np.eye(d)
        self._chol, self.jitter_applied = self._factor(self.marginal_cov,
                                                       "marginal covariance")
        diag = np.diagonal(self._chol[0])
        self.marginal_log_det = 2.0 * float(np.sum(np.log(diag)))
        self.r_matrix = cho_solve(self._chol, g).T
        self.posterior_cov = np.eye(r) - self.r_matrix @ g
        # symmetrize away factorization round-off before anyone probes it
        self.posterior_cov = 0.5 * (self.posterior_cov + self.posterior_cov.T)
        eigs = np.linalg.eigvalsh(self.posterior_cov)
        if eigs.min() < -1e-10:
            raise ValueError(f"posterior covariance not PSD"
                             f" (min eigenvalue {eigs.min():.3e})")
        self._posterior_chol = None

    @staticmethod
    def _factor(mat: np.ndarray, label: str):
        try:
            return cho_factor(mat, lower=True), False
        except np.linalg.LinAlgError:
            jitter = 1e-12 * np.eye(mat.shape[0])
            log.warning("%s required 1e-12 jitter to factorize", label)
            return cho_factor(mat + jitter, lower=True), True

    def posterior_log_density(self, y: np.ndarray,
                              x: np.ndarray) -> np.ndarray:
        """log of the N(R(y - c), I - RG) density at rows of ``x``."""
        if self._posterior_chol is None:
            chol, jit = self._factor(self.posterior_cov,
                                     "posterior covariance")
            diag = np.diagonal(chol[0])
            if np.any(diag <= 0.0) or not np.all(np.isfinite(diag)):
                raise ValueError("degenerate posterior covariance")
            self._posterior_chol = chol
            self._posterior_log_det = 2.0 * float(np.sum(np.log(diag)))
        mean = self.r_matrix @ (np.asarray(y, dtype=np.float64) - self.mean)
        delta = np.atleast_2d(x) - mean
        solved = cho_solve(self._posterior_chol, delta.T)
        quad = np.sum(delta.T * solved, axis=0)
        out = -0.5 * (self.r * _LOG_2PI + self._posterior_log_det + quad)
        return out if np.ndim(x) == 2 else float(out[0])


def sample_data(oracle: LinearGaussianOracle, n: int, seed: int):
    """n draws of y = G x + c + sqrt(lam) eps.  The latent block is drawn
    first, then the noise block, so the stream layout is part of the
    contract."""
    from .ot import SampleBatch
    from .rng import SplitMix64
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    rng = SplitMix64(seed)
    x = rng.normal_matrix(n, oracle.r)
    eps = rng.normal_matrix(n, oracle.d)
    y = x @ oracle.g.T + oracle.mean + np.sqrt(oracle.lam) * eps
    return SampleBatch(y)


def posterior(oracle: LinearGaussianOracle,
              y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (oracle.d,):
        raise ValueError(f"y shape {y.shape} does not match d={oracle.d}")
    return oracle.r_matrix @ (y - oracle.mean), oracle.posterior_cov.copy()


def exact_log_likelihood(oracle: LinearGaussianOracle, y: np.ndarray) -> float:
    """log-density of N(c, G G^T + lam I) at ``y``."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (oracle.d,):
        raise ValueError(f"y shape {y.shape} does not match d={oracle.d}")
    delta = y - oracle.mean
    solved = cho_solve(oracle._chol, delta)
    quad = float(delta @ solved)
    return -0.5 * (oracle.d * _LOG_2PI + oracle.marginal_log_det + quad)


def exact_log_likelihood_batch(oracle: LinearGaussianOracle,
                               ys: np.ndarray) -> np.ndarray:
    return np.array([exact_log_likelihood(oracle, y) for y in ys])


def snis_standard_error(weights: np.ndarray, terms: np.ndarray,
                        normalizer_coeff: float = 0.0) -> float:
    """Delta-method standard error for  sum_i p_i t_i + alpha * log Zhat
    built from one set of self-normalized weights p_i = w_i / sum w and
    Zhat = mean(w).  alpha=0 recovers the plain SNIS ratio estimator;
    the alpha term matters whenever log Zhat enters the statistic (KL
    gap, differential entropy), where its own Monte-Carlo noise would
    otherwise be dropped.
    """
    n = weights.shape[0]
    mean = float(np.sum(weights * terms))
    influence = weights * (terms - mean + normalizer_coeff) \
        - normalizer_coeff / n
    return float(np.sqrt(np.sum(influence ** 2)))


def approximation_gap(oracle: LinearGaussianOracle, y_test: np.ndarray,
                      post) -> GapEstimate:
    """KL(variational latent posterior || oracle posterior) by
    self-normalized importance sampling.

    ``post`` must come from latent_posterior in snis mode: then p_i targets
    the density phi(x) exp(v/lam) / Z and the integrand
    log phi + v/lam - log Z - log q is an unbiased log-ratio.  The standard
    error is the delta-method one for self-normalized weights, including
    the log Zhat contribution.
    """
    if post.mode != "snis":
        raise ValueError(f"approximation gap needs snis weights,"
                         f" got mode {post.mode!r}")
    log_phi = -0.5 * (oracle.r * _LOG_2PI
                      + np.sum(post.latents ** 2, axis=1))
    log_q = oracle.posterior_log_density(y_test, post.latents)
    if not np.all(np.isfinite(log_q)):
        raise ValueError("oracle posterior density vanished at a sampled"
                         " latent (degenerate posterior covariance)")
    base = log_phi + post.violations / post.lam - log_q
    value = float(np.sum(post.weights * base)) - post.log_normalizer
    se = snis_standard_error(post.weights, base, normalizer_coeff=-1.0)
    return GapEstimate(value, se)


def simpson_weights(lo: float, hi: float, n: int = 4097
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Composite-Simpson nodes and weights on [lo, hi]; n odd, >= 3.

    sum(w * f(nodes)) integrates f; named the 1-D oracle quadrature rule.
    """
    if n < 3 or n % 2 == 0:
        raise ValueError(f"need an odd node count >= 3, got {n}")
    nodes = np.linspace(lo, hi, n)
    h = (hi - lo) / (n - 1)
    w = np.ones(n)
    w[1:-1:2] = 4.0
    w[2:-2:2] = 2.0
    return nodes, w * h / 3.0
