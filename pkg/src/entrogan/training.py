"""Dual entropic-GAN training: ascent on the discriminators, descent on
the generator.

The objective is mean D1(y) - mean D2(G(x)) - lam * mean exp(v / lam)
with the violation v(y, yhat) = D1(y) - D2(yhat) - loss(y, yhat) taken
over all real x fake pairs of the minibatch (the expectation is under the
product measure).  The pair term is evaluated as exp(logsumexp(v / lam)
+ log lam - log(n m)) so the only way to overflow is for the objective to
be genuinely astronomical.

One tape is built per phase and rebound every step; all randomness comes
from a single SplitMix64 stream (batch indices, then latents, per step),
with parameter inits on seed+1, seed+2, seed+3 for G, D1, D2.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import nets
from .ot import LossKind, SampleBatch, pairwise_sq_dists
from .rng import SplitMix64


class TrainingDiverged(RuntimeError):
    """Non-finite objective or gradient.  Carries the last good checkpoint."""

    def __init__(self, iteration: int, model: "EntropicGanModel",
                 log: "TrainLog", checkpoint_iteration: int):
        super().__init__(f"training diverged at iteration {iteration};"
                         f" last good checkpoint is iteration"
                         f" {checkpoint_iteration}")
        self.iteration = iteration
        self.model = model
        self.log = log
        self.checkpoint_iteration = checkpoint_iteration


@dataclass
class EntropicGanModel:
    gen: nets.MlpParams
    d1: nets.MlpParams
    d2: nets.MlpParams
    lam: float
    loss: LossKind
    latent_dim: int
    data_dim: int
    train_size: int
    seed: int
    iterations: int = 0

    def validate(self) -> None:
        if self.lam <= 0.0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        if self.gen.spec.in_dim != self.latent_dim:
            raise ValueError("generator input width != latent dim")
        if self.gen.spec.out_dim != self.data_dim:
            raise ValueError("generator output width != data dim")
        for name, disc in (("d1", self.d1), ("d2", self.d2)):
            if disc.spec.in_dim != self.data_dim or disc.spec.out_dim != 1:
                raise ValueError(f"{name} must map data dim to a scalar")
        for p in (self.gen, self.d1, self.d2):
            p.validate()

    def copy(self) -> "EntropicGanModel":
        return replace(self, gen=self.gen.copy(), d1=self.d1.copy(),
                       d2=self.d2.copy())

    def generate(self, xs: np.ndarray) -> np.ndarray:
        return nets.mlp_forward(self.gen, xs)

    def disc_real(self, ys: np.ndarray) -> np.ndarray:
        return nets.mlp_forward(self.d1, ys)[:, 0]

    def disc_fake(self, ys: np.ndarray) -> np.ndarray:
        return nets.mlp_forward(self.d2, ys)[:, 0]


@dataclass
class TrainConfig:
    latent_dim: int
    lam: float = 0.1
    loss: LossKind = LossKind.HALF_SQUARED_L2
    gen_hidden: tuple[int, ...] = (128, 128)
    gen_activation: str = "identity"
    disc_hidden: tuple[int, ...] = (128, 128)
    gen_lr: float = 2e-4
    disc_lr: float = 2e-4
    optimizer: str = "adam"
    beta1: float = 0.5
    beta2: float = 0.9
    momentum: float = 0.0
    batch_size: int = 512
    critic_steps: int = 10
    iterations: int = 2000
    checkpoint_interval: int = 500
    sinkhorn_unroll: int = 20
    cooldown: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim < 1 or self.batch_size < 1 or \
                self.critic_steps < 1 or self.checkpoint_interval < 1 or \
                self.sinkhorn_unroll < 1:
            raise ValueError("counts must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.gen_lr <= 0 or self.disc_lr <= 0 or self.lam <= 0:
            raise ValueError("rates and lam must be positive")
        if not 0.0 <= self.cooldown <= 1.0:
            raise ValueError(f"cooldown must be in [0, 1],"
                             f" got {self.cooldown}")


@dataclass
class IterationRecord:
    iteration: int
    objective: float
    mean_violation: float
    gen_grad_norm: float
    disc_grad_norm: float
    wall_time: float


@dataclass
class TrainLog:
    records: list[IterationRecord] = field(default_factory=list)


def _pair_cost_graph(y: ad.Node, yhat: ad.Node, loss: LossKind,
                     tape: ad.Tape) -> ad.Node:
    """(n, m) matrix of loss(y_i, yhat_j) on the tape."""
    yy = ad.reduce_sum(ad.square(y), axis=1, keepdims=True)      # (n, 1)
    hh = ad.reduce_sum(ad.square(yhat), axis=1)                  # (m,)
    cross = ad.affine(y, yhat, transpose_w=True, name="cross")   # (n, m)
    sq = ad.lincomb(-2.0, cross, 1.0, yy) + hh
    if loss is LossKind.HALF_SQUARED_L2:
        return ad.lincomb(0.5, sq)
    # L2: clip the float-negative dust, then sqrt as exp(0.5 log(. + tiny))
    clipped = ad.leaky_rectifier(sq, 0.0)
    shifted = ad.lincomb(1.0, clipped, 1.0, tape.constant(1e-30))
    return ad.exp(ad.lincomb(0.5, ad.log(shifted)))


class _DualGraph:
    """Reusable tape computing the dual objective for fixed batch shapes."""

    def __init__(self, gen_spec, d1_spec, d2_spec, loss: LossKind,
                 lam: float, n_real: int, n_latent: int):
        tape = ad.Tape()
        self.gen_nodes = nets.param_inputs(tape, gen_spec, "gen")
        self.d1_nodes = nets.param_inputs(tape, d1_spec, "d1")
        self.d2_nodes = nets.param_inputs(tape, d2_spec, "d2")
        y = tape.input((n_real, gen_spec.out_dim), "real")
        x = tape.input((n_latent, gen_spec.in_dim), "latent")
        yhat = nets.mlp_graph(gen_spec, self.gen_nodes, x)
        d1_out = nets.mlp_graph(d1_spec, self.d1_nodes, y)
        d2_out = nets.mlp_graph(d2_spec, self.d2_nodes, yhat)
        cost = _pair_cost_graph(y, yhat, loss, tape)
        d2_row = ad.reduce_sum(d2_out, axis=1)                   # (m,)
        v = ad.lincomb(1.0, d1_out, -1.0, d2_row) - cost         # (n, m)
        self.violation_node = v
        lse = ad.logsumexp(ad.lincomb(1.0 / lam, v))
        pair_term = ad.exp(lse + tape.constant(
            np.log(lam) - np.log(n_real * n_latent), name="pair-shift"))
        mean_d1 = ad.reduce_mean(d1_out)
        mean_d2 = ad.reduce_mean(d2_out)
        ad.lincomb(1.0, mean_d1 - mean_d2, -1.0, pair_term)
        self.tape = tape
        self.n_gen = len(self.gen_nodes)
        self.n_d1 = len(self.d1_nodes)
        self.n_d2 = len(self.d2_nodes)

    def run(self, gen, d1, d2, real, latents):
        """Forward+backward; returns (value, gen grads, d1 grads, d2 grads,
        mean violation)."""
        inputs = gen.flatten() + d1.flatten() + d2.flatten() + [real, latents]
        value = float(ad.forward(self.tape, inputs))
        grads = ad.backward(self.tape)
        k1 = self.n_gen
        k2 = k1 + self.n_d1
        k3 = k2 + self.n_d2
        mean_v = float(np.mean(self.violation_node.value))
        return value, grads[:k1], grads[k1:k2], grads[k2:k3], mean_v


def violation(y: np.ndarray, yhat: np.ndarray,
              model: EntropicGanModel) -> float:
    """v(y, yhat) = D1(y) - D2(yhat) - loss(y, yhat) for single points."""
    y = np.asarray(y, dtype=np.float64).reshape(1, -1)
    yhat = np.asarray(yhat, dtype=np.float64).reshape(1, -1)
    if y.shape[1] != model.data_dim or yhat.shape[1] != model.data_dim:
        raise ValueError(f"points must have dimension {model.data_dim}")
    sq = float(pairwise_sq_dists(y, yhat)[0, 0])
    cost = np.sqrt(sq) if model.loss is LossKind.L2_NORM else 0.5 * sq
    return float(model.disc_real(y)[0] - model.disc_fake(yhat)[0] - cost)


def violation_matrix(y: np.ndarray, yhat: np.ndarray,
                     model: EntropicGanModel) -> np.ndarray:
    """All-pairs violations, numpy path (no tape)."""
    sq = pairwise_sq_dists(np.atleast_2d(y), np.atleast_2d(yhat))
    cost = np.sqrt(sq) if model.loss is LossKind.L2_NORM else 0.5 * sq
    return model.disc_real(np.atleast_2d(y))[:, None] \
        - model.disc_fake(np.atleast_2d(yhat))[None, :] - cost


def dual_objective(real: np.ndarray, latents: np.ndarray,
                   model: EntropicGanModel) -> float:
    """Dual objective value at the model's current parameters."""
    real = np.atleast_2d(np.asarray(real, dtype=np.float64))
    latents = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    graph = _DualGraph(model.gen.spec, model.d1.spec, model.d2.spec,
                       model.loss, model.lam, real.shape[0],
                       latents.shape[0])
    inputs = model.gen.flatten() + model.d1.flatten() + model.d2.flatten() \
        + [real, latents]
    return float(ad.forward(graph.tape, inputs))


def _make_optimizer(kind: str, lr: float, cfg: TrainConfig) -> nets.Optimizer:
    return nets.Optimizer(kind, lr, beta1=cfg.beta1, beta2=cfg.beta2,
                          momentum=cfg.momentum)


def _lr_scale(it: int, total: int, cooldown: float) -> float:
    """Full rate, then linear decay to 1% over the final cooldown span.

    Adversarial training orbits its equilibrium at a radius set by the
    learning rate; the cooldown collapses the orbit so late checkpoints
    sit at the equilibrium instead of circling it.
    """
    start = (1.0 - cooldown) * total
    if total <= 0 or it <= start:
        return 1.0
    return 1.0 - 0.99 * min((it - start) / (total - start), 1.0)


def _grad_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def init_model(config: TrainConfig, data_dim: int,
               train_size: int) -> EntropicGanModel:
    gen_spec = nets.MlpSpec((config.latent_dim, *config.gen_hidden, data_dim),
                            activation=config.gen_activation)
    disc_spec = nets.MlpSpec((data_dim, *config.disc_hidden, 1),
                             activation="leaky_rectifier")
    model = EntropicGanModel(
        gen=nets.init_params(gen_spec, config.seed + 1),
        d1=nets.init_params(disc_spec, config.seed + 2),
        d2=nets.init_params(disc_spec, config.seed + 3),
        lam=config.lam, loss=config.loss, latent_dim=config.latent_dim,
        data_dim=data_dim, train_size=train_size, seed=config.seed)
    model.validate()
    return model


def train(config: TrainConfig, data: SampleBatch, checkpoint_callback=None
          ) -> tuple[EntropicGanModel, TrainLog]:
    """Alternating dual training.  ``checkpoint_callback(iteration, model)``
    fires on a fresh copy at iteration 0 and every checkpoint interval.

    On divergence raises TrainingDiverged carrying the last good checkpoint.
    """
    if data.n < config.batch_size:
        raise ValueError(f"need at least batch_size={config.batch_size}"
                         f" rows, got {data.n}")
    model = init_model(config, data.dim, data.n)
    rng = SplitMix64(config.seed)
    graph = _DualGraph(model.gen.spec, model.d1.spec, model.d2.spec,
                       model.loss, model.lam, config.batch_size,
                       config.batch_size)
    gen_opt = _make_optimizer(config.optimizer, config.gen_lr, config)
    disc_opt = _make_optimizer(config.optimizer, config.disc_lr, config)
    gen_tensors = model.gen.flatten()
    disc_tensors = model.d1.flatten() + model.d2.flatten()
    log = TrainLog()
    last_good = model.copy()
    last_good_iter = 0
    if checkpoint_callback is not None:
        checkpoint_callback(0, model.copy())
    start = time.perf_counter()

    def draw():
        idx = rng.indices(config.batch_size, data.n)
        latents = rng.normal_matrix(config.batch_size, config.latent_dim)
        return data.points[idx], latents

    for it in range(1, config.iterations + 1):
        scale = _lr_scale(it, config.iterations, config.cooldown)
        try:
            for _ in range(config.critic_steps):
                real, latents = draw()
                _, _, gd1, gd2, _ = graph.run(model.gen, model.d1, model.d2,
                                              real, latents)
                disc_opt.step(disc_tensors, [-g for g in gd1 + gd2],
                              scale=scale)
            real, latents = draw()
            value, ggen, gd1, gd2, mean_v = graph.run(
                model.gen, model.d1, model.d2, real, latents)
            gen_opt.step(gen_tensors, ggen, scale=scale)
        except (ad.NumericOverflow, ValueError):
            raise TrainingDiverged(it, last_good, log, last_good_iter)
        log.records.append(IterationRecord(
            iteration=it, objective=value, mean_violation=mean_v,
            gen_grad_norm=_grad_norm(ggen),
            disc_grad_norm=_grad_norm(gd1 + gd2),
            wall_time=time.perf_counter() - start))
        if it % config.checkpoint_interval == 0 or it == config.iterations:
            model.iterations = it
            last_good = model.copy()
            last_good_iter = it
            if checkpoint_callback is not None:
                checkpoint_callback(it, model.copy())
    model.iterations = config.iterations
    return model, log


def refine_discriminators(model: EntropicGanModel, data: SampleBatch,
                          steps: int, *, disc_lr: float = 2e-4,
                          batch_size: int = 512, optimizer: str = "adam",
                          beta1: float = 0.5, beta2: float = 0.9,
                          seed: int | None = None) -> EntropicGanModel:
    """Ascent on D1, D2 with G frozen; the generator tensors of the result
    are the same bits as the input's."""
    if steps < 0:
        raise ValueError(f"steps must be nonnegative, got {steps}")
    out = model.copy()
    if steps == 0:
        return out
    batch_size = min(batch_size, data.n)
    rng = SplitMix64(model.seed + 1_000_003 if seed is None else seed)
    graph = _DualGraph(out.gen.spec, out.d1.spec, out.d2.spec, out.loss,
                       out.lam, batch_size, batch_size)
    opt = nets.Optimizer(optimizer, disc_lr, beta1=beta1, beta2=beta2)
    disc_tensors = out.d1.flatten() + out.d2.flatten()
    for k in range(1, steps + 1):
        idx = rng.indices(batch_size, data.n)
        latents = rng.normal_matrix(batch_size, out.latent_dim)
        _, _, gd1, gd2, _ = graph.run(out.gen, out.d1, out.d2,
                                      data.points[idx], latents)
        opt.step(disc_tensors, [-g for g in gd1 + gd2],
                 scale=_lr_scale(k, steps, 0.5))
    return out


class _SinkhornLossGraph:
    """Tape computing the debiased divergence between the real batch and
    the generator pushforward, through ``unroll`` alternating projections."""

    def __init__(self, gen_spec, loss: LossKind, lam: float, n: int, m: int,
                 unroll: int):
        tape = ad.Tape()
        self.gen_nodes = nets.param_inputs(tape, gen_spec, "gen")
        y = tape.input((n, gen_spec.out_dim), "real")
        x = tape.input((m, gen_spec.in_dim), "latent")
        yhat = nets.mlp_graph(gen_spec, self.gen_nodes, x)

        def w_term(p: ad.Node, q: ad.Node, np_: int, nq: int) -> ad.Node:
            cost = _pair_cost_graph(p, q, loss, tape)
            log_pi = ad.lincomb(-1.0 / lam, cost)
            log_a = tape.constant(-np.log(np_))
            log_b = tape.constant(-np.log(nq))
            for _ in range(unroll):
                row = ad.logsumexp(log_pi, axis=1, keepdims=True)
                log_pi = ad.lincomb(1.0, log_pi, -1.0, row) + log_a
                col = ad.logsumexp(log_pi, axis=0, keepdims=True)
                log_pi = ad.lincomb(1.0, log_pi, -1.0, col) + log_b
            pi = ad.exp(log_pi)
            transport = ad.reduce_sum(ad.mul(pi, cost))
            dev = ad.lincomb(1.0, log_pi, -1.0,
                             tape.constant(-np.log(np_ * nq)))
            kl = ad.reduce_sum(ad.mul(pi, dev))
            return ad.lincomb(1.0, transport, lam, kl)

        w_xy = w_term(y, yhat, n, m)
        w_hh = w_term(yhat, yhat, m, m)
        w_yy = w_term(y, y, n, n)
        ad.lincomb(2.0, w_xy, -1.0, w_hh) - w_yy
        self.tape = tape
        self.n_gen = len(self.gen_nodes)

    def run(self, gen, real, latents):
        inputs = gen.flatten() + [real, latents]
        value = float(ad.forward(self.tape, inputs))
        grads = ad.backward(self.tape)
        return value, grads[:self.n_gen]


def sinkhorn_loss_train(config: TrainConfig, data: SampleBatch,
                        checkpoint_callback=None
                        ) -> tuple[EntropicGanModel, TrainLog]:
    """Generator-only trainer on the debiased divergence; discriminators
    stay at their init."""
    if data.n < config.batch_size:
        raise ValueError(f"need at least batch_size={config.batch_size}"
                         f" rows, got {data.n}")
    model = init_model(config, data.dim, data.n)
    rng = SplitMix64(config.seed)
    graph = _SinkhornLossGraph(model.gen.spec, model.loss, model.lam,
                               config.batch_size, config.batch_size,
                               config.sinkhorn_unroll)
    opt = _make_optimizer(config.optimizer, config.gen_lr, config)
    gen_tensors = model.gen.flatten()
    log = TrainLog()
    last_good = model.copy()
    last_good_iter = 0
    if checkpoint_callback is not None:
        checkpoint_callback(0, model.copy())
    start = time.perf_counter()
    for it in range(1, config.iterations + 1):
        idx = rng.indices(config.batch_size, data.n)
        latents = rng.normal_matrix(config.batch_size, config.latent_dim)
        try:
            value, ggen = graph.run(model.gen, data.points[idx], latents)
            opt.step(gen_tensors, ggen,
                     scale=_lr_scale(it, config.iterations, config.cooldown))
        except (ad.NumericOverflow, ValueError):
            raise TrainingDiverged(it, last_good, log, last_good_iter)
        log.records.append(IterationRecord(
            iteration=it, objective=value, mean_violation=0.0,
            gen_grad_norm=_grad_norm(ggen), disc_grad_norm=0.0,
            wall_time=time.perf_counter() - start))
        if it % config.checkpoint_interval == 0 or it == config.iterations:
            model.iterations = it
            last_good = model.copy()
            last_good_iter = it
            if checkpoint_callback is not None:
                checkpoint_callback(it, model.copy())
    model.iterations = config.iterations
    return model, log
