"""Coupling and latent-posterior recovery from a trained dual model.

The optimal coupling density factorizes as marginal * marginal *
exp(violation / lam); conditioning on a data point y gives the latent
posterior proportional to prior(x) * exp(v(y, G(x)) / lam).  Everything
here works in the log domain; the only exponentials taken are of shifted
quantities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from . import nets
from .ot import LossKind, SampleBatch, pairwise_sq_dists
from .rng import SplitMix64
from .training import violation_matrix

WEIGHT_MODES = ("algorithm1", "snis")

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class ConditionalLatentPosterior:
    """Weighted latent sample approximating the posterior at one test point.

    ``log_u`` holds the log unnormalized weights for the declared mode:
    log prior density + v/lam for algorithm1, v/lam for snis.
    ``log_normalizer`` is log[(1/N) sum exp(v_i/lam)] in either mode.
    """

    y_test: np.ndarray
    latents: np.ndarray
    log_u: np.ndarray
    weights: np.ndarray
    violations: np.ndarray
    log_normalizer: float
    mode: str
    lam: float

    def __post_init__(self):
        self.y_test = np.asarray(self.y_test, dtype=np.float64).reshape(-1)
        self.latents = np.atleast_2d(np.asarray(self.latents,
                                                dtype=np.float64))
        for field in ("log_u", "weights", "violations"):
            setattr(self, field,
                    np.asarray(getattr(self, field),
                               dtype=np.float64).reshape(-1))
        self.validate()

    @property
    def n(self) -> int:
        return self.latents.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.latents.shape[1]

    def validate(self) -> None:
        if self.mode not in WEIGHT_MODES:
            raise ValueError(f"unknown weight mode {self.mode!r}")
        if self.lam <= 0.0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        n = self.latents.shape[0]
        if n < 1:
            raise ValueError("need at least one latent sample")
        for field in ("log_u", "weights", "violations"):
            if getattr(self, field).shape != (n,):
                raise ValueError(f"{field} must have shape ({n},)")
        if np.any(self.weights < 0.0):
            raise ValueError("negative posterior weight")
        total = float(self.weights.sum())
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {total}, not 1")


def log_prior_density(latents: np.ndarray) -> np.ndarray:
    """Standard-normal log density per row."""
    x = np.atleast_2d(latents)
    return -0.5 * np.sum(x * x, axis=1) - 0.5 * x.shape[1] * _LOG_2PI


def joint_coupling_density(y_index: int, yhat_index: int,
                           marginals: tuple[np.ndarray, np.ndarray],
                           violations: np.ndarray, lam: float) -> float:
    """Coupling mass at (y_i, yhat_j): a_i * b_j * exp(v_ij / lam)."""
    if lam <= 0.0:
        raise ValueError(f"lam must be positive, got {lam}")
    a, b = marginals
    v = np.asarray(violations, dtype=np.float64)
    return float(a[y_index] * b[yhat_index]
                 * np.exp(v[y_index, yhat_index] / lam))


def latent_posterior(y_test: np.ndarray, model, n: int, seed: int,
                     mode: str = "algorithm1") -> ConditionalLatentPosterior:
    """Draw n prior latents and weight them by the model's violations.

    algorithm1 multiplies the prior density into the weights (the sampled
    procedure verbatim); snis drops it, giving a self-normalized importance
    estimate of the posterior density under prior proposals.
    """
    if mode not in WEIGHT_MODES:
        raise ValueError(f"unknown weight mode {mode!r}; "
                         f"expected one of {WEIGHT_MODES}")
    if n < 1:
        raise ValueError(f"need n >= 1 latent samples, got {n}")
    y = np.asarray(y_test, dtype=np.float64).reshape(1, -1)
    latents = SplitMix64(seed).normal_matrix(n, model.latent_dim)
    v = violation_matrix(y, model.generate(latents), model)[0]
    scaled = v / model.lam
    log_u = scaled + log_prior_density(latents) if mode == "algorithm1" \
        else scaled.copy()
    peak = np.max(log_u)
    if not np.isfinite(peak):
        raise ValueError(
            "all posterior weights underflowed in the log domain; "
            "increase the sample count n or the regularizer lam")
    weights = np.exp(log_u - peak)
    weights /= weights.sum()
    log_normalizer = float(logsumexp(scaled) - np.log(n))
    return ConditionalLatentPosterior(
        y_test=y[0], latents=latents, log_u=log_u, weights=weights,
        violations=v, log_normalizer=log_normalizer, mode=mode,
        lam=model.lam)


def w2_pushforward(y_batch: SampleBatch, discriminator) -> SampleBatch:
    """Transport each row by the discriminator gradient: y - grad D(y).

    ``discriminator`` is either MlpParams or a callable
    ``(tape, y_node) -> Node`` producing one value per row.
    """
    points = y_batch.points
    tape = ad.Tape()
    y_node = tape.input(points.shape, "y")
    if isinstance(discriminator, nets.MlpParams):
        spec = discriminator.spec
        if spec.out_dim != 1 or spec.in_dim != points.shape[1]:
            raise ValueError("discriminator must map data rows to scalars")
        consts = [tape.constant(t) for t in discriminator.flatten()]
        out = nets.mlp_graph(spec, consts, y_node)
    else:
        out = discriminator(tape, y_node)
    ad.reduce_sum(out)
    ad.forward(tape, [points])
    grad = ad.backward(tape)[0]
    if not np.all(np.isfinite(grad)):
        raise ArithmeticError("non-finite discriminator gradient")
    return SampleBatch(points - grad, y_batch.weights.copy())


def nearest_latent_coupling(y_test: np.ndarray, model, k: int, seed: int
                            ) -> tuple[np.ndarray, ConditionalLatentPosterior]:
    """Couple y_test to the best of k drawn latents.

    Ranking is by loss(y_test, G(x)), ties by smaller latent norm, then by
    draw index.  The returned posterior is an impulse: all mass on the
    selected latent.
    """
    if k < 1:
        raise ValueError(f"need k >= 1 candidates, got {k}")
    y = np.asarray(y_test, dtype=np.float64).reshape(1, -1)
    latents = SplitMix64(seed).normal_matrix(k, model.latent_dim)
    sq = pairwise_sq_dists(y, model.generate(latents))[0]
    costs = np.sqrt(sq) if model.loss is LossKind.L2_NORM else 0.5 * sq
    norms = np.sum(latents * latents, axis=1)
    best = min(range(k), key=lambda i: (costs[i], norms[i], i))
    x_best = latents[best].copy()
    v = violation_matrix(y, model.generate(x_best[None]), model)[0, 0]
    post = ConditionalLatentPosterior(
        y_test=y[0], latents=x_best[None], log_u=np.array([v / model.lam]),
        weights=np.array([1.0]), violations=np.array([v]),
        log_normalizer=v / model.lam, mode="snis", lam=model.lam)
    return x_best, post
