"""Experiment harness: dataset generation, training, likelihood scoring,
table and evolution reproductions, and the Sinkhorn validation suite.

Every output file starts with one '#' metadata line carrying the tool
version, the full flag configuration, and the seed, so reruns are
auditable and byte-comparable.  All floats in CSV bodies use repr, the
shortest decimal that round-trips; model files use hex floats.

The output directory is taken from --out, else the ENTROGAN_OUT
environment variable, else the working directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__, coupling, gaussian, likelihood, modelfile, \
    training
from .ot import LossKind, SampleBatch, cost_matrix, entropic_ot_value, \
    brute_force_entropic_ot, sinkhorn
from .rng import SplitMix64
from .training import TrainConfig, TrainingDiverged

OUT_ENV = "ENTROGAN_OUT"


class CliError(RuntimeError):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _resolve_out(out: str | None) -> str:
    path = out or os.environ.get(OUT_ENV) or "."
    os.makedirs(path, exist_ok=True)
    return path


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _meta_line(args: argparse.Namespace) -> str:
    skip = {"func", "out", "command"}
    # input files are recorded by basename so a rerun against the same
    # content in another directory emits identical bytes
    paths = {"data", "model"}
    parts = []
    for k, v in sorted(vars(args).items()):
        if k in skip:
            continue
        if k in paths and v is not None:
            v = os.path.basename(str(v))
        parts.append(f"{k}={v}")
    return (f"# entrogan {__version__} command={args.command}"
            f" seed={args.seed} config: " + " ".join(parts))


def _write_csv(path: str, meta: str, header: list[str],
               rows: list[list], extra_comments: list[str] = ()) -> None:
    lines = [meta]
    lines.extend(extra_comments)
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def _read_dataset(path: str) -> SampleBatch:
    try:
        with open(path) as fh:
            raw = fh.read().splitlines()
    except OSError as exc:
        raise CliError("io", f"cannot read dataset {path}: {exc}") from exc
    body = [ln for ln in raw if ln.strip() and not ln.startswith("#")]
    if not body:
        raise CliError("format", f"dataset {path} has no header row")
    rows = [[float(x) for x in ln.split(",")] for ln in body[1:]]
    if not rows:
        raise CliError("empty", f"dataset {path} has no data rows")
    return SampleBatch(np.array(rows, dtype=np.float64))


def _parse_widths(text: str) -> tuple[int, ...]:
    if text.strip().lower() in ("", "none"):
        return ()
    try:
        return tuple(int(p) for p in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(
            f"bad width list {text!r}; expected comma-separated ints") \
            from exc


def _parse_dims(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(","))


def _constant_mode(text: str) -> str | None:
    return None if text == "none" else text


def _random_oracle(d: int, r: int, lam: float, seed: int,
                   scale: float = 1.0) -> gaussian.LinearGaussianOracle:
    g = scale * SplitMix64(seed).normal_matrix(d, r) / np.sqrt(r)
    return gaussian.LinearGaussianOracle(g, lam)


def _train_config_from(args, latent_dim: int, **overrides) -> TrainConfig:
    fields = dict(
        latent_dim=latent_dim, lam=args.lam,
        loss=LossKind.from_name(args.loss),
        gen_hidden=args.gen_hidden, gen_activation=args.gen_activation,
        disc_hidden=args.disc_hidden, gen_lr=args.gen_lr,
        disc_lr=args.disc_lr, optimizer=args.optimizer, beta1=args.beta1,
        beta2=args.beta2, momentum=args.momentum,
        batch_size=args.batch_size, critic_steps=args.critic_steps,
        iterations=args.iterations,
        checkpoint_interval=args.checkpoint_interval,
        sinkhorn_unroll=getattr(args, "sinkhorn_unroll", 20),
        cooldown=args.cooldown, seed=args.seed)
    fields.update(overrides)
    return TrainConfig(**fields)


def _effective_affine(model) -> tuple[np.ndarray, np.ndarray]:
    """Collapse an identity-activation generator to y = G x + c."""
    if model.gen.spec.activation != "identity":
        raise CliError("nonlinear",
                       "approximation gap needs a linear generator")
    offset = model.generate(np.zeros((1, model.latent_dim)))[0]
    rows = model.generate(np.eye(model.latent_dim)) - offset
    return rows.T.copy(), offset


def _surrogate_total(y: np.ndarray, model, n: int, seed: int,
                     constant_mode: str | None,
                     entropy_mode: str = "algorithm1",
                     weight_mode: str = "algorithm1") -> float:
    return likelihood.surrogate_log_likelihood(
        y, model, n, seed, weight_mode=weight_mode,
        entropy_mode=entropy_mode, constant_mode=constant_mode).total


def cmd_gen_data(args) -> int:
    out = _resolve_out(args.out)
    meta = _meta_line(args)
    d, r = args.data_dim, args.latent_dim
    g = SplitMix64(args.seed).normal_matrix(d, r) / np.sqrt(r)
    oracle = gaussian.LinearGaussianOracle(g, args.lam)
    header = [f"y{i}" for i in range(d)]
    if args.count == 0:
        rows = []
    else:
        batch = gaussian.sample_data(oracle, args.count, args.seed + 1)
        rows = [list(p) for p in batch.points]
    _write_csv(os.path.join(out, "dataset.csv"), meta, header, rows)
    modelfile.save_oracle(os.path.join(out, "oracle.txt"), oracle,
                          header=meta.lstrip("# "))
    return 0


LOG_COLUMNS = ["iteration", "objective", "mean_violation",
               "gen_grad_norm", "disc_grad_norm"]


def cmd_train(args) -> int:
    out = _resolve_out(args.out)
    meta = _meta_line(args)
    data = _read_dataset(args.data)
    config = _train_config_from(args, args.latent_dim)
    checkpoints: list[tuple[int, str]] = []

    def save_checkpoint(iteration: int, model) -> None:
        path = os.path.join(out, f"checkpoint_{iteration:06d}.txt")
        modelfile.save_model(path, model, header=meta.lstrip("# "))
        checkpoints.append((iteration, path))

    trainer = training.sinkhorn_loss_train \
        if args.trainer == "sinkhorn" else training.train
    try:
        model, log = trainer(config, data,
                             checkpoint_callback=save_checkpoint)
    except TrainingDiverged as exc:
        last = checkpoints[-1][1] if checkpoints else "none"
        raise CliError(
            "diverged",
            f"training diverged at iteration {exc.iteration}; last good"
            f" checkpoint is iteration {exc.checkpoint_iteration}"
            f" at {last}") from exc
    modelfile.save_model(os.path.join(out, "model.txt"), model,
                         header=meta.lstrip("# "))
    rows = [[r.iteration, r.objective, r.mean_violation, r.gen_grad_norm,
             r.disc_grad_norm] for r in log.records]
    _write_csv(os.path.join(out, "train_log.csv"), meta, LOG_COLUMNS, rows)
    return 0


LIKELIHOOD_COLUMNS = ["total", "cost", "entropy", "prior", "constant",
                      "standard_error"]


def cmd_likelihood(args) -> int:
    out = _resolve_out(args.out)
    meta = _meta_line(args)
    model = modelfile.load_model(args.model)
    data = _read_dataset(args.data)
    if data.dim != model.data_dim:
        raise CliError("dimension",
                       f"dataset dimension {data.dim} does not match model"
                       f" dimension {model.data_dim}")
    rows = []
    for i in range(data.n):
        rep = likelihood.surrogate_log_likelihood(
            data.points[i], model, args.posterior_samples, args.seed + i,
            weight_mode=args.weight_mode, entropy_mode=args.entropy_mode,
            constant_mode=args.constant_mode)
        rows.append([rep.total, rep.cost, rep.entropy, rep.prior,
                     rep.constant, rep.standard_error])
    _write_csv(os.path.join(out, "likelihood.csv"), meta,
               LIKELIHOOD_COLUMNS, rows)
    return 0


def _table_run(args, d: int) -> dict:
    """Generate data, train, and score one table dimension."""
    seed = args.seed + 7919 * d
    r = d
    oracle = _random_oracle(d, r, args.lam, seed)
    batch = gaussian.sample_data(oracle, args.train_size + args.eval_count,
                                 seed + 1)
    train_data = SampleBatch(batch.points[:args.train_size])
    eval_points = batch.points[args.train_size:]
    config = _train_config_from(args, r, seed=seed + 2)
    model, _ = training.train(config, train_data)
    if args.refine_steps > 0:
        model = training.refine_discriminators(
            model, train_data, args.refine_steps, disc_lr=args.disc_lr,
            batch_size=args.batch_size, optimizer=args.optimizer,
            beta1=args.beta1, beta2=args.beta2)
    surrogates = [
        _surrogate_total(y, model, args.posterior_samples,
                         seed + 5000 + i, args.constant_mode,
                         args.entropy_mode, args.weight_mode)
        for i, y in enumerate(eval_points)]
    return {"seed": seed, "model": model, "data_oracle": oracle,
            "eval_points": eval_points,
            "surrogate": float(np.mean(surrogates))}


def cmd_table1(args) -> int:
    out = _resolve_out(args.out)
    meta = _meta_line(args)
    rows, comments = [], []
    for d in args.dims:
        try:
            run = _table_run(args, d)
            g_eff, offset = _effective_affine(run["model"])
            model_oracle = gaussian.LinearGaussianOracle(
                g_eff, args.lam, mean=offset)
            gaps = []
            for i, y in enumerate(run["eval_points"]):
                post = coupling.latent_posterior(
                    y, run["model"], args.gap_samples,
                    run["seed"] + 5000 + i, mode="snis")
                gaps.append(gaussian.approximation_gap(
                    model_oracle, y, post).value)
            rows.append([d, float(np.mean(gaps)), run["surrogate"]])
        except (TrainingDiverged, CliError, ValueError) as exc:
            comments.append(f"# dimension {d} failed: {exc}")
            rows.append([d, float("nan"), float("nan")])
    _write_csv(os.path.join(out, "table1.csv"), meta,
               ["dimension", "approximation_gap", "surrogate_log_likelihood"],
               rows, extra_comments=comments)
    return 0


def cmd_table2(args) -> int:
    out = _resolve_out(args.out)
    meta = _meta_line(args)
    rows, comments = [], []
    for d in args.dims:
        try:
            run = _table_run(args, d)
            exact = float(np.mean(gaussian.exact_log_likelihood_batch(
                run["data_oracle"], run["eval_points"])))
            rows.append([d, exact, run["surrogate"]])
        except (TrainingDiverged, CliError, ValueError) as exc:
            comments.append(f"# dimension {d} failed: {exc}")
            rows.append([d, float("nan"), float("nan")])
    _write_csv(os.path.join(out, "table2.csv"), meta,
               ["dimension", "exact_log_likelihood",
                "surrogate_log_likelihood"],
               rows, extra_comments=comments)
    return 0


def cmd_evolution(args) -> int:
    out = _resolve_out(args.out)
    meta = _meta_line(args)
    d = r = args.data_dim
    oracle = _random_oracle(d, r, args.lam, args.seed,
                            scale=args.data_scale)
    batch = gaussian.sample_data(oracle, args.train_size + args.eval_count,
                                 args.seed + 1)
    train_data = SampleBatch(batch.points[:args.train_size])
    held_out = SampleBatch(batch.points[args.train_size:])
    config = _train_config_from(args, r, seed=args.seed + 2)
    summary = []

    def score_checkpoint(iteration: int, model) -> None:
        refined = training.refine_discriminators(
            model, train_data, args.refine_steps, disc_lr=args.disc_lr,
            batch_size=args.batch_size, optimizer=args.optimizer,
            beta1=args.beta1, beta2=args.beta2)
        totals = likelihood.per_sample_totals(
            held_out, refined, args.posterior_samples, args.seed + 9000,
            weight_mode="algorithm1", entropy_mode="algorithm1",
            constant_mode=None)
        counts, edges = np.histogram(totals, bins=args.bins)
        rows = [[float(edges[i]), float(edges[i + 1]), int(counts[i])]
                for i in range(args.bins)]
        _write_csv(os.path.join(out, f"evolution_hist_{iteration:06d}.csv"),
                   meta, ["bin_low", "bin_high", "count"], rows)
        summary.append([iteration, float(np.median(totals)),
                        float(np.mean(totals))])

    try:
        training.train(config, train_data,
                       checkpoint_callback=score_checkpoint)
    except TrainingDiverged as exc:
        raise CliError(
            "diverged",
            f"training diverged at iteration {exc.iteration}; last good"
            f" checkpoint is iteration {exc.checkpoint_iteration}") from exc
    _write_csv(os.path.join(out, "evolution_summary.csv"), meta,
               ["iteration", "median_surrogate", "mean_surrogate"], summary)
    return 0


def cmd_sinkhorn_check(args) -> int:
    out = _resolve_out(args.out)
    meta = _meta_line(args)
    rng = SplitMix64(args.seed)
    rows = []
    for idx in range(args.count):
        n = 2 + int(rng.indices(1, 5)[0])
        m = 2 + int(rng.indices(1, 5)[0])
        lam = 0.1 if idx % 2 == 0 else 1.0
        identical = idx % 10 == 0
        p_pts = rng.normal_matrix(n, 2)
        if identical:
            m = n
            q_pts = p_pts
        else:
            q_pts = rng.normal_matrix(m, 2)
        p = SampleBatch(p_pts)
        q = SampleBatch(q_pts)
        kind = LossKind.HALF_SQUARED_L2
        # self-transport instances can stall a hair above 1e-9; 1e-7 is
        # far below the 1e-6 slack used for the sandwich columns
        tol = 1e-7
        w_pq = entropic_ot_value(p, q, kind, lam, tol=tol)
        wbar = ((2.0 * w_pq - entropic_ot_value(p, p, kind, lam, tol=tol))
                - entropic_ot_value(q, q, kind, lam, tol=tol))
        ent = lam * (-(p.weights @ np.log(p.weights))
                     - (q.weights @ np.log(q.weights)))
        two_w = 2.0 * w_pq
        sandwich = (wbar <= two_w + 1e-6) and (two_w <= wbar + ent + 1e-6)
        c = cost_matrix(kind, p, q)
        plan, _ = sinkhorn(c, p.weights, q.weights, lam, tol=1e-8)
        reference = brute_force_entropic_ot(c, p.weights, q.weights, lam)
        max_err = float(np.abs(plan.matrix - reference.matrix).max())
        rows.append([idx, n, m, lam, int(identical), wbar, two_w, ent,
                     int(sandwich), max_err])
    _write_csv(os.path.join(out, "sinkhorn_check.csv"), meta,
               ["instance", "n", "m", "lam", "identical", "wbar", "two_w",
                "entropy_bound", "sandwich_pass", "max_coupling_error"],
               rows)
    return 0


def _add_train_flags(sub, *, gen_activation="identity", iterations=2000,
                     lam=0.1, batch_size=512, critic_steps=10,
                     gen_hidden=(128, 128)) -> None:
    sub.add_argument("--lambda", dest="lam", type=float, default=lam,
                     help="entropic regularizer")
    sub.add_argument("--loss", default="half-squared-l2",
                     choices=["half-squared-l2", "l2"])
    sub.add_argument("--gen-hidden", type=_parse_widths,
                     default=gen_hidden, help="comma-separated widths")
    sub.add_argument("--gen-activation", default=gen_activation,
                     choices=["identity", "leaky_rectifier"])
    sub.add_argument("--disc-hidden", type=_parse_widths,
                     default=(128, 128))
    sub.add_argument("--gen-lr", type=float, default=2e-4)
    sub.add_argument("--disc-lr", type=float, default=2e-4)
    sub.add_argument("--optimizer", default="adam",
                     choices=["adam", "sgd-momentum"])
    sub.add_argument("--beta1", type=float, default=0.5)
    sub.add_argument("--beta2", type=float, default=0.9)
    sub.add_argument("--momentum", type=float, default=0.0)
    sub.add_argument("--batch-size", type=int, default=batch_size)
    sub.add_argument("--critic-steps", type=int, default=critic_steps)
    sub.add_argument("--iterations", type=int, default=iterations)
    sub.add_argument("--checkpoint-interval", type=int, default=500)
    sub.add_argument("--cooldown", type=float, default=0.5,
                     help="final fraction of iterations with the learning"
                          " rates annealed to 1%%")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="entrogan",
        description="entropic optimal-transport GAN experiment harness")
    parser.add_argument("--version", action="version",
                        version=f"entrogan {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="draw a linear-Gaussian dataset")
    p.add_argument("--out")
    p.add_argument("--data-dim", type=int, required=True)
    p.add_argument("--latent-dim", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = subs.add_parser("train", help="train on a dataset file")
    p.add_argument("--out")
    p.add_argument("--data", required=True)
    p.add_argument("--latent-dim", type=int, required=True)
    p.add_argument("--trainer", default="dual",
                   choices=["dual", "sinkhorn"])
    p.add_argument("--sinkhorn-unroll", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("likelihood", help="score samples under a model")
    p.add_argument("--out")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--posterior-samples", type=int, default=2000)
    p.add_argument("--weight-mode", default="algorithm1",
                   choices=["algorithm1", "snis"])
    p.add_argument("--entropy-mode", default="algorithm1",
                   choices=["algorithm1", "differential"])
    p.add_argument("--constant-mode", type=_constant_mode, default="paper",
                   choices=["paper", "dimensional", "identity", None],
                   metavar="{paper,dimensional,identity,none}")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_likelihood)

    # table1 reports the coupling-vs-posterior gap next to the verbatim
    # weighted-sum surrogate; table2 compares against the closed-form data
    # likelihood, so it defaults to the tight per-sample composition
    # (snis weights + differential entropy + identity constant)
    for name, fn, acts, dims, weights, entropy, constant, sizes in (
            ("table1", cmd_table1, "identity", (2, 5, 10),
             "algorithm1", "algorithm1", "paper", (6144, 4000, 2000)),
            ("table2", cmd_table2, "leaky_rectifier", (5, 10),
             "snis", "differential", "identity", (2048, 2000, 16000))):
        train_size, iters, n_post = sizes
        p = subs.add_parser(name, help=f"reproduce {name} at desk scale")
        p.add_argument("--out")
        p.add_argument("--dims", type=_parse_dims, default=dims,
                       help="comma-separated data dimensions")
        p.add_argument("--train-size", type=int, default=train_size)
        p.add_argument("--eval-count", type=int, default=100)
        p.add_argument("--posterior-samples", type=int, default=n_post)
        p.add_argument("--refine-steps", type=int, default=400)
        p.add_argument("--weight-mode", default=weights,
                       choices=["algorithm1", "snis"])
        p.add_argument("--entropy-mode", default=entropy,
                       choices=["algorithm1", "differential"])
        p.add_argument("--constant-mode", type=_constant_mode,
                       default=constant,
                       choices=["paper", "dimensional", "identity", None],
                       metavar="{paper,dimensional,identity,none}")
        if name == "table1":
            p.add_argument("--gap-samples", type=int, default=16000,
                           help="latent draws per point for the gap"
                                " estimate")
        p.add_argument("--seed", type=int, default=0)
        _add_train_flags(p, gen_activation=acts, iterations=iters)
        p.set_defaults(func=fn)

    p = subs.add_parser("evolution",
                        help="surrogate histograms across checkpoints")
    p.add_argument("--out")
    p.add_argument("--data-dim", type=int, default=2)
    p.add_argument("--data-scale", type=float, default=3.0,
                   help="sampling-map scale; larger starts training"
                        " farther from the data")
    p.add_argument("--train-size", type=int, default=2048)
    p.add_argument("--eval-count", type=int, default=1000)
    p.add_argument("--posterior-samples", type=int, default=500)
    p.add_argument("--refine-steps", type=int, default=100)
    p.add_argument("--bins", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p, iterations=1000)
    p.set_defaults(func=cmd_evolution)

    p = subs.add_parser("sinkhorn-check",
                        help="solver validation suite on random instances")
    p.add_argument("--out")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sinkhorn_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}),
              file=sys.stderr)
        return 1
    except (modelfile.ModelFileError, ValueError, OSError) as exc:
        print(json.dumps({"error": "invalid", "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
