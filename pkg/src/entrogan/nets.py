"""Small dense nets (generator and discriminators) plus their optimizers.

Weights are stored as (fan_in, fan_out) matrices so a forward pass is
``x @ W + b`` on row-major batches.  The same layer stack can be evaluated
two ways: ``mlp_forward`` is the plain numpy path used everywhere values
are enough, and ``mlp_graph`` records the identical computation on an
autodiff tape for training.  Both apply the hidden activation after every
layer but the last; the output layer is always linear.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .rng import SplitMix64

ACTIVATIONS = ("identity", "leaky_rectifier")


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    activation: str = "leaky_rectifier"
    slope: float = 0.2

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError(f"need input and output widths, got {self.widths}")
        if any(w <= 0 for w in self.widths):
            raise ValueError(f"widths must be positive, got {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


@dataclass
class MlpParams:
    spec: MlpSpec
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)

    def validate(self) -> None:
        if len(self.weights) != self.spec.n_layers or \
                len(self.biases) != self.spec.n_layers:
            raise ValueError("layer count does not match spec")
        for i in range(self.spec.n_layers):
            fan_in, fan_out = self.spec.widths[i], self.spec.widths[i + 1]
            if self.weights[i].shape != (fan_in, fan_out):
                raise ValueError(f"weight {i} has shape"
                                 f" {self.weights[i].shape},"
                                 f" expected {(fan_in, fan_out)}")
            if self.biases[i].shape != (fan_out,):
                raise ValueError(f"bias {i} has shape {self.biases[i].shape},"
                                 f" expected {(fan_out,)}")
        for i, arr in enumerate(self.weights + self.biases):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite parameter tensor at slot {i}")

    def flatten(self) -> list[np.ndarray]:
        """Interleaved [W0, b0, W1, b1, ...]; the shared tensor objects."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(self.spec, [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases])


def init_params(spec: MlpSpec, seed: int) -> MlpParams:
    """Weights ~ N(0, 1/fan_in) drawn layer by layer from SplitMix64(seed);
    biases zero."""
    rng = SplitMix64(seed)
    params = MlpParams(spec)
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        scale = 1.0 / np.sqrt(fan_in)
        params.weights.append(rng.normal_matrix(fan_in, fan_out) * scale)
        params.biases.append(np.zeros(fan_out))
    return params


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    spec = params.spec
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.in_dim:
        raise ValueError(f"batch shape {x.shape} does not match input width"
                         f" {spec.in_dim}")
    h = x
    for i in range(spec.n_layers):
        h = h @ params.weights[i] + params.biases[i]
        if i < spec.n_layers - 1 and spec.activation == "leaky_rectifier":
            h = np.where(h > 0.0, h, spec.slope * h)
    return h


def param_inputs(tape: ad.Tape, spec: MlpSpec, prefix: str) -> list[ad.Node]:
    """Declare tape inputs for every layer tensor, interleaved like
    MlpParams.flatten()."""
    nodes = []
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        nodes.append(tape.input((fan_in, fan_out), f"{prefix}.w{i}"))
        nodes.append(tape.input((fan_out,), f"{prefix}.b{i}"))
    return nodes


def mlp_graph(spec: MlpSpec, param_nodes: list[ad.Node],
              x: ad.Node) -> ad.Node:
    """Record the forward pass of ``spec`` on a tape.  ``param_nodes`` is the
    interleaved list from param_inputs (or constants with those shapes)."""
    if len(param_nodes) != 2 * spec.n_layers:
        raise ValueError(f"expected {2 * spec.n_layers} parameter nodes,"
                         f" got {len(param_nodes)}")
    h = x
    for i in range(spec.n_layers):
        h = ad.affine(h, param_nodes[2 * i], param_nodes[2 * i + 1],
                      name=f"layer{i}")
        if i < spec.n_layers - 1 and spec.activation == "leaky_rectifier":
            h = ad.leaky_rectifier(h, spec.slope)
    return h


class Optimizer:
    """Adam or SGD-momentum over a flat list of tensors, updated in place.

    Moment buffers are allocated on the first step and locked to those
    shapes afterwards.
    """

    def __init__(self, kind: str, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 momentum: float = 0.0):
        if kind not in ("adam", "sgd-momentum"):
            raise ValueError(f"unknown optimizer kind {kind!r}")
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.kind = kind
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.momentum = momentum
        self.step_count = 0
        self._m: list[np.ndarray] | None = None
        self._v: list[np.ndarray] | None = None

    def step(self, tensors: list[np.ndarray], grads: list[np.ndarray],
             names: list[str] | None = None, scale: float = 1.0) -> None:
        if len(tensors) != len(grads):
            raise ValueError(f"{len(tensors)} tensors but {len(grads)} grads")
        for i, (p, g) in enumerate(zip(tensors, grads)):
            if p.shape != np.shape(g):
                raise ValueError(f"grad {i} shape {np.shape(g)} does not"
                                 f" match tensor shape {p.shape}")
            if not np.all(np.isfinite(g)):
                label = names[i] if names else f"tensor {i}"
                raise ValueError(f"non-finite gradient for {label}")
        if self._m is None:
            self._m = [np.zeros_like(p) for p in tensors]
            if self.kind == "adam":
                self._v = [np.zeros_like(p) for p in tensors]
        elif len(self._m) != len(tensors):
            raise ValueError("tensor list changed length between steps")
        self.step_count += 1
        t = self.step_count
        lr = scale * self.lr
        if self.kind == "adam":
            c1 = 1.0 - self.beta1 ** t
            c2 = 1.0 - self.beta2 ** t
            for p, g, m, v in zip(tensors, grads, self._m, self._v):
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * np.square(g)
                p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        else:
            for p, g, m in zip(tensors, grads, self._m):
                m *= self.momentum
                m += g
                p -= lr * m
