"""Structured-text persistence for models and data oracles.

Scalars and tensor entries are written as hexadecimal float literals
(float.hex), so a save/load round trip reproduces every parameter bit for
bit.  Files are written to a temp name and renamed into place, keeping
half-written checkpoints from ever being visible under the final name.

Layout: '#' comment lines, then `format_version 1`, then `key value`
lines, then `tensor NAME dim0 dim1` blocks with one hex row per line,
then `end`.
"""

from __future__ import annotations

import os

import numpy as np

from . import nets
from .gaussian import LinearGaussianOracle
from .ot import LossKind
from .training import EntropicGanModel

FORMAT_VERSION = 1


class ModelFileError(ValueError):
    pass


def _hex_row(row: np.ndarray) -> str:
    return " ".join(float.hex(float(x)) for x in row)


def _write_tensor(lines: list[str], name: str, arr: np.ndarray) -> None:
    mat = np.atleast_2d(arr)
    lines.append(f"tensor {name} " + " ".join(str(s) for s in arr.shape))
    for row in mat:
        lines.append(_hex_row(row))


def _atomic_write(path: str, lines: list[str]) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def _spec_lines(prefix: str, spec: nets.MlpSpec) -> list[str]:
    return [
        f"{prefix}_widths " + " ".join(str(w) for w in spec.widths),
        f"{prefix}_activation {spec.activation}",
        f"{prefix}_slope {float.hex(spec.slope)}",
    ]


def save_model(path: str, model: EntropicGanModel,
               header: str | None = None) -> None:
    lines = []
    if header:
        lines.extend("# " + h for h in header.splitlines())
    lines.append(f"format_version {FORMAT_VERSION}")
    lines.append(f"lam {float.hex(model.lam)}")
    lines.append(f"loss {model.loss.value}")
    lines.append(f"data_dim {model.data_dim}")
    lines.append(f"latent_dim {model.latent_dim}")
    lines.append(f"train_size {model.train_size}")
    lines.append(f"seed {model.seed}")
    lines.append(f"iterations {model.iterations}")
    for prefix, params in (("gen", model.gen), ("d1", model.d1),
                           ("d2", model.d2)):
        lines.extend(_spec_lines(prefix, params.spec))
        for i, (w, b) in enumerate(zip(params.weights, params.biases)):
            _write_tensor(lines, f"{prefix}.w{i}", w)
            _write_tensor(lines, f"{prefix}.b{i}", b)
    lines.append("end")
    _atomic_write(path, lines)


class _Parser:
    def __init__(self, path: str):
        try:
            with open(path) as fh:
                raw = fh.read().splitlines()
        except OSError as exc:
            raise ModelFileError(f"cannot read {path}: {exc}") from exc
        self.path = path
        self.lines = [ln for ln in raw
                      if ln.strip() and not ln.lstrip().startswith("#")]
        self.pos = 0
        first = self.next()
        if first[0] != "format_version":
            raise ModelFileError(f"{path}: missing format_version line")
        if first[1:] != [str(FORMAT_VERSION)]:
            raise ModelFileError(
                f"{path}: unsupported format version {' '.join(first[1:])},"
                f" expected {FORMAT_VERSION}")
        self.fields: dict[str, list[str]] = {}
        self.tensors: dict[str, np.ndarray] = {}
        while True:
            tok = self.next()
            if tok[0] == "end":
                break
            if tok[0] == "tensor":
                self.tensors[tok[1]] = self._read_tensor(tok)
            else:
                self.fields[tok[0]] = tok[1:]

    def next(self) -> list[str]:
        if self.pos >= len(self.lines):
            raise ModelFileError(f"{self.path}: truncated file (no 'end')")
        tok = self.lines[self.pos].split()
        self.pos += 1
        return tok

    def _read_tensor(self, tok: list[str]) -> np.ndarray:
        try:
            shape = tuple(int(s) for s in tok[2:])
        except ValueError as exc:
            raise ModelFileError(f"{self.path}: bad tensor header"
                                 f" {' '.join(tok)}") from exc
        rows = shape[0] if len(shape) == 2 else 1
        data = []
        for _ in range(rows):
            data.append([float.fromhex(x) for x in self.next()])
        arr = np.array(data, dtype=np.float64)
        if arr.size != int(np.prod(shape)):
            raise ModelFileError(f"{self.path}: tensor {tok[1]} has"
                                 f" {arr.size} entries, expected shape"
                                 f" {shape}")
        return arr.reshape(shape)

    def field(self, key: str) -> list[str]:
        if key not in self.fields:
            raise ModelFileError(f"{self.path}: missing field {key!r}")
        return self.fields[key]

    def scalar(self, key: str) -> float:
        return float.fromhex(self.field(key)[0])

    def integer(self, key: str) -> int:
        return int(self.field(key)[0])


def _load_params(parser: _Parser, prefix: str) -> nets.MlpParams:
    widths = tuple(int(w) for w in parser.field(f"{prefix}_widths"))
    spec = nets.MlpSpec(widths,
                        activation=parser.field(f"{prefix}_activation")[0],
                        slope=parser.scalar(f"{prefix}_slope"))
    weights, biases = [], []
    for i in range(spec.n_layers):
        for kind, bucket in (("w", weights), ("b", biases)):
            name = f"{prefix}.{kind}{i}"
            if name not in parser.tensors:
                raise ModelFileError(f"{parser.path}: missing tensor {name}")
            arr = parser.tensors[name]
            bucket.append(arr if kind == "w" else arr.reshape(-1))
    params = nets.MlpParams(spec, weights, biases)
    params.validate()
    return params


def load_model(path: str) -> EntropicGanModel:
    parser = _Parser(path)
    model = EntropicGanModel(
        gen=_load_params(parser, "gen"),
        d1=_load_params(parser, "d1"),
        d2=_load_params(parser, "d2"),
        lam=parser.scalar("lam"),
        loss=LossKind.from_name(parser.field("loss")[0]),
        data_dim=parser.integer("data_dim"),
        latent_dim=parser.integer("latent_dim"),
        train_size=parser.integer("train_size"),
        seed=parser.integer("seed"),
        iterations=parser.integer("iterations"))
    model.validate()
    return model


def save_oracle(path: str, oracle: LinearGaussianOracle,
                header: str | None = None) -> None:
    lines = []
    if header:
        lines.extend("# " + h for h in header.splitlines())
    lines.append(f"format_version {FORMAT_VERSION}")
    lines.append(f"lam {float.hex(oracle.lam)}")
    _write_tensor(lines, "g", oracle.g)
    _write_tensor(lines, "mean", oracle.mean)
    lines.append("end")
    _atomic_write(path, lines)


def load_oracle(path: str) -> LinearGaussianOracle:
    parser = _Parser(path)
    for name in ("g", "mean"):
        if name not in parser.tensors:
            raise ModelFileError(f"{path}: missing tensor {name}")
    return LinearGaussianOracle(parser.tensors["g"], parser.scalar("lam"),
                                mean=parser.tensors["mean"].reshape(-1))
