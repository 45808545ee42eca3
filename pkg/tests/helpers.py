"""Shared test scaffolding: tiny duck-typed models with analytically known
optimal potentials for the 1-D linear-Gaussian case.

For y = g x + sqrt(lam) eps the dual of the entropic problem is solved by
D1(y) = lam y^2 / (2 (g^2 + lam)) + (lam / 2) log((g^2 + lam) / lam) and
D2 = 0 (potentials are unique only up to a shared constant).  With these,
exp(v(y, g x)/lam) * phi(x) is exactly the Bayes posterior over x, which
makes planted-truth tests possible without any training.
"""

from __future__ import annotations

import numpy as np

from entrogan.ot import LossKind


class AffineModel:
    """Duck-typed stand-in for a trained model: scalar or diagonal linear
    generator plus explicit quadratic discriminators."""

    def __init__(self, gen_matrix, lam, d1=None, d2=None,
                 loss=LossKind.HALF_SQUARED_L2, gen_offset=None,
                 train_size=1):
        self.gen_matrix = np.atleast_2d(np.asarray(gen_matrix, dtype=float))
        self.d, self.r = self.gen_matrix.shape
        self.latent_dim = self.r
        self.data_dim = self.d
        self.lam = float(lam)
        self.loss = loss
        self.train_size = train_size
        self.gen_offset = np.zeros(self.d) if gen_offset is None \
            else np.asarray(gen_offset, dtype=float)
        self._d1 = d1 or (lambda y: np.zeros(y.shape[0]))
        self._d2 = d2 or (lambda y: np.zeros(y.shape[0]))

    def generate(self, xs):
        return xs @ self.gen_matrix.T + self.gen_offset

    def disc_real(self, ys):
        return self._d1(ys)

    def disc_fake(self, ys):
        return self._d2(ys)


def exact_model_1d(g: float, lam: float) -> AffineModel:
    """1-D model whose potentials are the exact optimal dual pair."""
    shift = 0.5 * lam * np.log((g * g + lam) / lam)

    def d1(ys):
        return lam * ys[:, 0] ** 2 / (2.0 * (g * g + lam)) + shift

    return AffineModel([[g]], lam, d1=d1)


def violation_fn(model):
    """v(y, yhat) = D1(y) - D2(yhat) - loss, vectorized over yhat rows."""

    def v(y, yhats):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        diffs = y[None, :] - yhats
        sq = 0.5 * np.sum(diffs * diffs, axis=1)
        if model.loss is LossKind.L2_NORM:
            cost = np.sqrt(2.0 * sq)
        else:
            cost = sq
        d1 = model.disc_real(y[None, :])[0]
        return d1 - model.disc_fake(yhats) - cost

    return v


def bound_identity_parts(g: float, lam: float, y: float,
                         d2_coeff: float = 0.0, n: int = 4097) -> dict:
    """Quadrature evaluation of every term of the exact decomposition

        log f_Y(y) = cost + differential entropy + prior
                     - (1/2) log(2 pi lam) - (1/2) log(2 pi) + KL(rho || post)

    for the 1-D model y = g x + sqrt(lam) eps, where rho is the
    variational density prior(x) exp(v(y, g x)/lam) normalized.  d2_coeff
    adds a quadratic fake critic, which detunes rho away from the Bayes
    posterior (KL > 0) while the identity must keep holding.
    """
    from entrogan import gaussian

    model = exact_model_1d(g, lam)
    if d2_coeff != 0.0:
        model._d2 = lambda ys: d2_coeff * ys[:, 0] ** 2
    oracle = gaussian.LinearGaussianOracle(np.array([[g]]), lam)
    mean, cov = gaussian.posterior(oracle, np.array([y]))
    sd = float(np.sqrt(cov[0, 0]))
    lo = min(-10.0, float(mean[0]) - 12.0 * sd)
    hi = max(10.0, float(mean[0]) + 12.0 * sd)
    xs, w = gaussian.simpson_weights(lo, hi, n)
    v = violation_fn(model)(y, model.generate(xs[:, None]))
    log_phi = -0.5 * xs ** 2 - 0.5 * np.log(2.0 * np.pi)
    log_unnorm = log_phi + v / lam
    peak = log_unnorm.max()
    z = float(w @ np.exp(log_unnorm - peak))
    log_z = peak + np.log(z)
    rho = np.exp(log_unnorm - log_z)
    losses = 0.5 * (y - g * xs) ** 2
    cost = -float(w @ (rho * losses)) / lam
    entropy = -float(w @ (rho * (log_unnorm - log_z)))
    prior = -0.5 * float(w @ (rho * xs ** 2))
    constant = -0.5 * np.log(2.0 * np.pi * lam) - 0.5 * np.log(2.0 * np.pi)
    log_post = -0.5 * (xs - mean[0]) ** 2 / cov[0, 0] \
        - 0.5 * np.log(2.0 * np.pi * cov[0, 0])
    kl = float(w @ (rho * (log_unnorm - log_z - log_post)))
    exact = gaussian.exact_log_likelihood(oracle, np.array([y]))
    total = cost + entropy + prior + constant + kl
    return {"exact": exact, "cost": cost, "entropy": entropy,
            "prior": prior, "constant": constant, "kl": kl,
            "residual": abs(exact - total)}
