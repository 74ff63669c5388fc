"""AdamW training loop over generator parameters plus the temperature.

The embeddings are frozen inputs; only the proxy-generator parameters and
the log-temperature are updated.  A built-in gradient-check mode compares
every analytic gradient against central finite differences on a small
instance.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import generator, objectives, store
from .errors import DegenerateDirector, InvalidConfig, ShapeMismatch
from .generator import SCALAR_DASH, VECTOR_DASH, GeneratorParams

INITIAL_LOG_TEMP = math.log(0.01)

LOSS_LOG_HEADER = ["step", "l_r", "l_p", "l_pos", "total", "sigma"]


@dataclass(frozen=True)
class AdamWConfig:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.2

    def validate(self) -> None:
        if self.lr <= 0:
            raise InvalidConfig("lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidConfig("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise InvalidConfig("eps must be > 0")
        if self.weight_decay < 0:
            raise InvalidConfig("weight_decay must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    seed: int
    alpha: float = 0.5
    beta: float = 0.25
    k: int = 2
    delta: float = 1.0
    eta: float = 1.0
    dash_mode: str = SCALAR_DASH
    scaled_attention: bool = False

    def validate(self) -> None:
        if self.epochs < 1:
            raise InvalidConfig("epochs must be >= 1")
        if self.batch_size < 2:
            raise InvalidConfig("batch_size must be >= 2")
        if self.k < 1:
            raise InvalidConfig("k must be >= 1")
        if self.dash_mode not in (SCALAR_DASH, VECTOR_DASH):
            raise InvalidConfig(f"unknown dash mode {self.dash_mode!r}")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_tree(cls, tree: dict[str, np.ndarray]) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p) for k, p in tree.items()},
            v={k: np.zeros_like(p) for k, p in tree.items()},
        )


def adamw_step(
    tree: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    cfg: AdamWConfig,
) -> None:
    """One decoupled-weight-decay update, in place, in fixed key order."""
    state.step += 1
    t = state.step
    bias1 = 1.0 - cfg.beta1**t
    bias2 = 1.0 - cfg.beta2**t
    for name, param in tree.items():
        if name not in grads:
            raise ShapeMismatch(f"missing gradient for parameter {name!r}")
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != param.shape:
            raise ShapeMismatch(
                f"gradient for {name!r} has shape {g.shape}, "
                f"parameter has {param.shape}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        param -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps) + (
            cfg.lr * cfg.weight_decay
        ) * param


def param_tree(params: GeneratorParams, log_temp: float) -> dict[str, np.ndarray]:
    """Trainable parameters as a flat name -> array mapping.

    Matrix entries alias the arrays inside ``params`` so in-place optimizer
    updates propagate; the two scalars (theta or nothing, plus log_temp)
    are fresh 0-d arrays that callers must read back via ``scalars_from_tree``.
    """
    tree: dict[str, np.ndarray] = {}
    for r, proj in enumerate(params.projections):
        tree[f"w_q.{r}"] = proj.w_q
        tree[f"w_k.{r}"] = proj.w_k
        tree[f"w_v.{r}"] = proj.w_v
    if params.dash_mode == SCALAR_DASH:
        tree["theta"] = np.asarray(float(params.theta))
    else:
        tree["w_dash"] = params.w_dash
    tree["log_temp"] = np.asarray(float(log_temp))
    return tree


def scalars_from_tree(
    params: GeneratorParams, tree: dict[str, np.ndarray]
) -> tuple[GeneratorParams, float]:
    """Pull the scalar entries of the tree back into python floats."""
    if params.dash_mode == SCALAR_DASH:
        params.theta = float(tree["theta"])
    return params, float(tree["log_temp"])


@dataclass(frozen=True)
class TrainResult:
    params: GeneratorParams
    log_temp: float
    history: list[dict[str, float]] = field(repr=False)

    @property
    def steps(self) -> int:
        return len(self.history)


def train(
    dataset: store.EmbeddingDataset,
    cfg: TrainConfig,
    opt_cfg: AdamWConfig,
    out_dir=None,
) -> TrainResult:
    """Run epochs x floor(N / B) optimizer steps; optionally persist a run.

    With an ``out_dir`` the run directory receives ``train_config.json``,
    ``loss_log.csv`` and a ``checkpoint/`` with every parameter.  Given a
    fixed seed and single-worker execution the result is bit-reproducible.
    """
    cfg.validate()
    opt_cfg.validate()
    if cfg.batch_size > dataset.n_pairs:
        raise InvalidConfig(
            f"batch_size {cfg.batch_size} exceeds dataset size {dataset.n_pairs}"
        )
    rng = np.random.default_rng(cfg.seed)
    params = generator.init_params(
        dim=dataset.dim,
        num_video_proxies=dataset.num_video_proxies,
        k=cfg.k,
        delta=cfg.delta,
        eta=cfg.eta,
        dash_mode=cfg.dash_mode,
        scaled_attention=cfg.scaled_attention,
        seed=rng,
    )
    log_temp = INITIAL_LOG_TEMP
    tree = param_tree(params, log_temp)
    state = OptimizerState.for_tree(tree)
    epoch_seeds = rng.integers(0, 2**62, size=cfg.epochs)

    history: list[dict[str, float]] = []
    step = 0
    for epoch in range(cfg.epochs):
        batches = store.make_batches(dataset, cfg.batch_size, int(epoch_seeds[epoch]))
        for batch in batches:
            params, log_temp = scalars_from_tree(params, tree)
            text = dataset.text_queries[batch]
            video = dataset.video_proxies[batch]
            try:
                breakdown, grads = objectives.loss_backward(
                    text, video, params, log_temp, cfg.alpha, cfg.beta
                )
            except DegenerateDirector as exc:
                raise DegenerateDirector(
                    f"degenerate director at step {step} (epoch {epoch}, "
                    f"pair {exc.pair}): {exc}",
                    pair=exc.pair,
                ) from None
            adamw_step(tree, grads, state, opt_cfg)
            step += 1
            history.append(
                {
                    "step": step,
                    "l_r": breakdown.l_r,
                    "l_p": breakdown.l_p,
                    "l_pos": breakdown.l_pos,
                    "total": breakdown.total,
                    "sigma": breakdown.sigma,
                }
            )
    params, log_temp = scalars_from_tree(params, tree)
    result = TrainResult(params=params, log_temp=log_temp, history=history)
    if out_dir is not None:
        _write_run(Path(out_dir), cfg, opt_cfg, result)
    return result


def _write_run(
    out: Path, cfg: TrainConfig, opt_cfg: AdamWConfig, result: TrainResult
) -> None:
    out.mkdir(parents=True, exist_ok=True)
    echo = {"train": cfg.__dict__, "optimizer": opt_cfg.__dict__}
    (out / "train_config.json").write_text(
        json.dumps(echo, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    with open(out / "loss_log.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_LOG_HEADER)
        for row in result.history:
            writer.writerow([row["step"]] + [repr(row[k]) for k in LOSS_LOG_HEADER[1:]])
    generator.save_params(out / "checkpoint", result.params, result.log_temp)


# --- gradient checking -------------------------------------------------------

FD_STEP = 1e-6
# Relative error floor: below this magnitude the comparison is effectively
# absolute, keeping finite-difference roundoff noise out of the verdict.
REL_ERR_FLOOR = 1e-3

GRADCHECK_MAX_DIM = 16
GRADCHECK_MAX_BATCH = 8
GRADCHECK_MAX_PROXIES = 4


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    tolerance: float
    passed: bool
    n_scalars: int
    dash_mode: str


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), REL_ERR_FLOOR)


def grad_check(
    cfg: TrainConfig,
    tolerance: float,
    seed: int,
    dim: int = 8,
    num_video_proxies: int = 3,
) -> GradCheckReport:
    """Compare analytic gradients to central finite differences.

    Every trainable scalar (each projection entry of every round, the
    active dash parameter and the log-temperature) is perturbed by
    +-FD_STEP with the full loss recomputed.  Small instances only.
    """
    cfg.validate()
    if dim > GRADCHECK_MAX_DIM:
        raise InvalidConfig(f"grad_check requires dim <= {GRADCHECK_MAX_DIM}")
    if cfg.batch_size > GRADCHECK_MAX_BATCH:
        raise InvalidConfig(f"grad_check requires batch_size <= {GRADCHECK_MAX_BATCH}")
    if num_video_proxies > GRADCHECK_MAX_PROXIES:
        raise InvalidConfig(
            f"grad_check requires num_video_proxies <= {GRADCHECK_MAX_PROXIES}"
        )
    rng = np.random.default_rng(seed)
    b = cfg.batch_size
    text = rng.standard_normal((b, dim))
    text /= np.linalg.norm(text, axis=1, keepdims=True)
    video = rng.standard_normal((b, num_video_proxies, dim))
    video /= np.linalg.norm(video, axis=2, keepdims=True)
    params = generator.init_params(
        dim=dim,
        num_video_proxies=num_video_proxies,
        k=cfg.k,
        delta=cfg.delta,
        eta=cfg.eta,
        dash_mode=cfg.dash_mode,
        scaled_attention=cfg.scaled_attention,
        seed=rng,
    )
    log_temp = INITIAL_LOG_TEMP
    tree = param_tree(params, log_temp)
    _, grads = objectives.loss_backward(
        text, video, params, log_temp, cfg.alpha, cfg.beta
    )

    def total_at(tree_now: dict[str, np.ndarray]) -> float:
        params_now, log_temp_now = scalars_from_tree(params, tree_now)
        return objectives.loss_value(
            text, video, params_now, log_temp_now, cfg.alpha, cfg.beta
        ).total

    worst = ("", 0.0)
    n_scalars = 0
    for name, param in tree.items():
        flat = param.reshape(-1) if param.ndim else param.reshape(1)
        gflat = np.asarray(grads[name]).reshape(flat.shape)
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + FD_STEP
            up = total_at(tree)
            flat[idx] = original - FD_STEP
            down = total_at(tree)
            flat[idx] = original
            numeric = (up - down) / (2 * FD_STEP)
            err = _rel_err(float(gflat[idx]), numeric)
            n_scalars += 1
            if err > worst[1]:
                label = name if param.ndim == 0 else f"{name}[{idx}]"
                worst = (label, err)
    # Restore scalar views after the final perturbation.
    scalars_from_tree(params, tree)
    return GradCheckReport(
        max_rel_err=worst[1],
        worst_param=worst[0],
        tolerance=tolerance,
        passed=worst[1] <= tolerance,
        n_scalars=n_scalars,
        dash_mode=cfg.dash_mode,
    )
