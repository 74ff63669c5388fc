"""Command-line surface: synth, train, eval, gradcheck, identity-check, inspect.

Exit codes: 0 success, 1 validation/usage error, 2 numeric check failure,
3 I/O or file-format error.  Every run echoes its fully resolved config
into the output directory so results can be reproduced bit-for-bit.
"""

from __future__ import annotations

import argparse
import json
import struct
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import generator, retrieval, store, trainer
from .errors import InvalidConfig, TensorFormatError, TextProxyError

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERIC = 2
EXIT_IO = 3


@dataclass
class RunConfig:
    """Fully resolved run parameters; unknown keys are rejected."""

    dim: int = 32
    num_video_proxies: int = 4
    k_iterations: int = 2
    delta: float = 1.0
    eta: float = 1.0
    dash_mode: str = "scalar"
    scaled_attention: bool = False
    alpha: float = 0.5
    beta: float = 0.25
    gamma: float = 0.5
    lr: float = 1e-3
    weight_decay: float = 0.2
    epochs: int = 30
    batch_size: int = 32
    seed: int = 42
    sigma_text: float = 0.4
    sigma_video: float = 0.2
    sigma_corrupt: float = 0.8
    n_pairs: int = 256

    @classmethod
    def resolve(cls, config_path: str | None, overrides: dict) -> "RunConfig":
        values: dict = {}
        if config_path is not None:
            raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
            known = {f.name for f in fields(cls)}
            unknown = set(raw) - known
            if unknown:
                raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
            values.update(raw)
        values.update({k: v for k, v in overrides.items() if v is not None})
        cfg = cls(**values)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.dim < 2:
            raise InvalidConfig("dim must be >= 2")
        if self.num_video_proxies < 1:
            raise InvalidConfig("num_video_proxies must be >= 1")
        if self.k_iterations < 1:
            raise InvalidConfig("k_iterations must be >= 1")
        if self.dash_mode not in (generator.SCALAR_DASH, generator.VECTOR_DASH):
            raise InvalidConfig(f"unknown dash_mode {self.dash_mode!r}")
        if self.epochs < 1:
            raise InvalidConfig("epochs must be >= 1")
        if self.batch_size < 2:
            raise InvalidConfig("batch_size must be >= 2")
        if self.lr <= 0:
            raise InvalidConfig("lr must be > 0")
        if self.weight_decay < 0:
            raise InvalidConfig("weight_decay must be >= 0")
        if self.n_pairs < 2:
            raise InvalidConfig("n_pairs must be >= 2")
        for name in ("sigma_text", "sigma_video", "sigma_corrupt"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be >= 0")

    def echo(self, out_dir: Path) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "run_config.json").write_text(
            json.dumps(asdict(self), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )

    def train_config(self) -> trainer.TrainConfig:
        return trainer.TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            alpha=self.alpha,
            beta=self.beta,
            k=self.k_iterations,
            delta=self.delta,
            eta=self.eta,
            dash_mode=self.dash_mode,
            scaled_attention=self.scaled_attention,
        )

    def adamw_config(self) -> trainer.AdamWConfig:
        return trainer.AdamWConfig(lr=self.lr, weight_decay=self.weight_decay)


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on usage errors; the contract here is 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def _build_parser() -> _Parser:
    parser = _Parser(prog="textproxy", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a planted synthetic dataset")
    synth.add_argument("--config", metavar="PATH")
    synth.add_argument("--out", metavar="DIR", required=True)
    synth.add_argument("--seed", type=int)

    train = sub.add_parser("train", help="train the proxy generator")
    train.add_argument("--config", metavar="PATH")
    train.add_argument("--data", metavar="DIR", required=True)
    train.add_argument("--out", metavar="DIR", required=True)
    train.add_argument("--seed", type=int)
    train.add_argument("--workers", type=int, default=1)

    evalp = sub.add_parser("eval", help="score retrieval and report metrics")
    evalp.add_argument("--config", metavar="PATH")
    evalp.add_argument("--data", metavar="DIR", required=True)
    evalp.add_argument("--params", metavar="DIR", required=True)
    evalp.add_argument("--report", metavar="DIR", required=True)
    evalp.add_argument("--gamma", type=float)
    evalp.add_argument("--gamma-sweep", metavar="LO:HI:STEP")
    evalp.add_argument("--workers", type=int, default=1)

    grad = sub.add_parser("gradcheck", help="verify gradients by finite differences")
    grad.add_argument("--config", metavar="PATH")
    grad.add_argument("--seed", type=int, default=7)
    grad.add_argument("--tol", type=float, default=1e-4)

    ident = sub.add_parser(
        "identity-check", help="verify the combined/factored score identity"
    )
    ident.add_argument("--trials", type=int, default=100)
    ident.add_argument("--tol", type=float, default=1e-9)
    ident.add_argument("--seed", type=int, default=0)

    inspect = sub.add_parser("inspect", help="print a tensor file header")
    inspect.add_argument("path", metavar="PATH")

    return parser


def _cmd_synth(args) -> int:
    cfg = RunConfig.resolve(args.config, {"seed": args.seed})
    dataset = store.generate_synthetic(
        store.SynthConfig(
            n_pairs=cfg.n_pairs,
            dim=cfg.dim,
            num_video_proxies=cfg.num_video_proxies,
            sigma_text=cfg.sigma_text,
            sigma_video=cfg.sigma_video,
            sigma_corrupt=cfg.sigma_corrupt,
            seed=cfg.seed,
        )
    )
    out = Path(args.out)
    store.save_dataset(dataset, out)
    cfg.echo(out)
    print(f"wrote {dataset.n_pairs} pairs (d={cfg.dim}, M={cfg.num_video_proxies}) to {out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = RunConfig.resolve(args.config, {"seed": args.seed})
    if args.workers < 1:
        raise InvalidConfig("--workers must be >= 1")
    dataset = store.load_dataset(args.data)
    out = Path(args.out)
    result = trainer.train(dataset, cfg.train_config(), cfg.adamw_config(), out)
    cfg.echo(out)
    first, last = result.history[0]["total"], result.history[-1]["total"]
    print(
        f"trained {result.steps} steps; total loss {first:.6f} -> {last:.6f}; "
        f"checkpoint in {out / 'checkpoint'}"
    )
    return EXIT_OK


def _parse_sweep(spec: str) -> list[float]:
    try:
        lo, hi, step = (float(x) for x in spec.split(":"))
    except ValueError:
        raise InvalidConfig(f"--gamma-sweep expects LO:HI:STEP, got {spec!r}")
    if step <= 0 or hi < lo:
        raise InvalidConfig(f"invalid sweep range {spec!r}")
    out = []
    g = lo
    while g <= hi + 1e-12:
        out.append(round(g, 12))
        g += step
    return out


def _cmd_eval(args) -> int:
    overrides = {"gamma": args.gamma}
    cfg = RunConfig.resolve(args.config, overrides)
    if args.workers < 1:
        raise InvalidConfig("--workers must be >= 1")
    dataset = store.load_dataset(args.data)
    params, _ = generator.load_params(args.params)
    out = Path(args.report)
    gammas = (
        _parse_sweep(args.gamma_sweep) if args.gamma_sweep else [cfg.gamma]
    )
    ground_truth = dataset.ground_truth()
    for gamma in gammas:
        scores = retrieval.combined_scores(
            dataset.text_queries,
            dataset.video_proxies,
            params,
            gamma,
            workers=args.workers,
        )
        report = retrieval.evaluate(scores, ground_truth)
        suffix = f"_gamma_{gamma:g}" if len(gammas) > 1 else ""
        retrieval.export_report(report, scores, out, suffix=suffix)
        print(
            f"gamma={gamma:g}: R@1={report.recall_at_1:.2f} "
            f"R@5={report.recall_at_5:.2f} R@10={report.recall_at_10:.2f} "
            f"MdR={report.median_rank:g} MnR={report.mean_rank:.2f}"
        )
    cfg.echo(out)
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    cfg = RunConfig.resolve(args.config, {"seed": args.seed})
    base = trainer.TrainConfig(
        epochs=1,
        batch_size=4,
        seed=cfg.seed,
        alpha=cfg.alpha,
        beta=cfg.beta,
        k=cfg.k_iterations,
        delta=cfg.delta,
        eta=cfg.eta,
        dash_mode=cfg.dash_mode,
        scaled_attention=cfg.scaled_attention,
    )
    ok = True
    for mode in (generator.SCALAR_DASH, generator.VECTOR_DASH):
        from dataclasses import replace

        report = trainer.grad_check(
            replace(base, dash_mode=mode), tolerance=args.tol, seed=cfg.seed
        )
        status = "PASS" if report.passed else "FAIL"
        print(
            f"{status} dash={mode}: max relative error {report.max_rel_err:.3e} "
            f"(worst {report.worst_param}, {report.n_scalars} scalars, "
            f"tol {args.tol:g})"
        )
        ok = ok and report.passed
    return EXIT_OK if ok else EXIT_NUMERIC


def _cmd_identity_check(args) -> int:
    report = retrieval.identity_check(
        trials=args.trials,
        dim=16,
        gamma_range=(0.1, 0.8),
        tolerance=args.tol,
        seed=args.seed,
    )
    status = "PASS" if report.passed else "FAIL"
    print(
        f"{status}: max |combined - factored| = {report.max_abs_diff:.3e} over "
        f"{report.trials} trials ({report.degenerate_trials} degenerate, "
        f"tol {report.tolerance:g})"
    )
    return EXIT_OK if report.passed else EXIT_NUMERIC


def _cmd_inspect(args) -> int:
    raw = Path(args.path).read_bytes()
    if raw[:4] != store.MAGIC:
        raise TensorFormatError(f"not a tensor file (magic {raw[:4]!r})")
    (version,) = struct.unpack_from("<I", raw, 4)
    (dtype,) = struct.unpack_from("<B", raw, 8)
    (ndims,) = struct.unpack_from("<I", raw, 9)
    dims = struct.unpack_from(f"<{ndims}Q", raw, 13)
    payload = len(raw) - 13 - 8 * ndims
    print(
        f"{args.path}: magic={store.MAGIC.decode()} version={version} "
        f"dtype={dtype} dims={list(dims)} payload_bytes={payload}"
    )
    return EXIT_OK


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "identity-check": _cmd_identity_check,
    "inspect": _cmd_inspect,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except InvalidConfig as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except TensorFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TextProxyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
