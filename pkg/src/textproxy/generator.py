"""Pair-specific text-proxy generation.

A proxy for a (text, video) pair is the text query displaced along a unit
direction by a strictly positive magnitude:

    t_p = t_q + dash * director / |director|

The director is ``delta * t_q - eta * d_l`` where the direction leader d_l
is produced by k rounds of single-head cross-attention from the query onto
the video's proxy embeddings (with the projected query as the residual).
The dash is an exponential of the query-to-proxy cosine similarities:
either a scalar exp(theta * mean(s)) or a per-dimension vector exp(s @ W).

Each grid entry (i, j) depends only on text i, video j and the parameters;
the backward pass for every trainable parameter is hand-written here.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import store
from .errors import DegenerateDirector, InvalidConfig, ShapeMismatch, ZeroVector
from .numkernel import (
    ZERO_NORM_THRESHOLD,
    cosine_sim,
    l2_norm,
    matmul,
    matmul_vjp,
    softmax_row,
    softmax_row_vjp,
)

DIRECTOR_NORM_THRESHOLD = 1e-12

SCALAR_DASH = "scalar"
VECTOR_DASH = "vector"


@dataclass
class ProjectionSet:
    """Query/key/value projections for one cross-attention round."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def validate(self, dim: int) -> None:
        for name in ("w_q", "w_k", "w_v"):
            w = getattr(self, name)
            if w.shape != (dim, dim):
                raise ShapeMismatch(f"{name} must be {dim}x{dim}, got {w.shape}")
            if not np.isfinite(w).all():
                raise InvalidConfig(f"{name} contains non-finite entries")


@dataclass
class GeneratorParams:
    """All proxy-generator parameters and hyperparameters.

    ``projections`` holds one ProjectionSet per attention round (distinct
    parameters per round).  Exactly the parameters of the active dash mode
    are trainable: ``theta`` in scalar mode, ``w_dash`` in vector mode.
    ``delta`` and ``eta`` are fixed hyperparameters.
    """

    projections: list[ProjectionSet]
    delta: float
    eta: float
    dash_mode: str = SCALAR_DASH
    theta: float = 1.0
    w_dash: np.ndarray | None = None
    scaled_attention: bool = False

    @property
    def k(self) -> int:
        return len(self.projections)

    def validate(self) -> None:
        if self.k < 1:
            raise InvalidConfig("at least one attention round is required")
        dim = self.projections[0].w_q.shape[0]
        for proj in self.projections:
            proj.validate(dim)
        if self.dash_mode not in (SCALAR_DASH, VECTOR_DASH):
            raise InvalidConfig(f"unknown dash mode {self.dash_mode!r}")
        if self.dash_mode == VECTOR_DASH:
            if self.w_dash is None or self.w_dash.ndim != 2:
                raise InvalidConfig("vector dash mode requires an M x d w_dash")
            if self.w_dash.shape[1] != dim:
                raise ShapeMismatch(
                    f"w_dash must have {dim} columns, got {self.w_dash.shape}"
                )


def init_params(
    dim: int,
    num_video_proxies: int,
    k: int,
    delta: float,
    eta: float,
    dash_mode: str = SCALAR_DASH,
    scaled_attention: bool = False,
    seed: int | np.random.Generator = 0,
) -> GeneratorParams:
    """Fresh parameters: projections ~ N(0, 1/d), theta = 1, w_dash ~ N(0, 1/d)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    scale = 1.0 / math.sqrt(dim)
    projections = [
        ProjectionSet(
            w_q=rng.standard_normal((dim, dim)) * scale,
            w_k=rng.standard_normal((dim, dim)) * scale,
            w_v=rng.standard_normal((dim, dim)) * scale,
        )
        for _ in range(k)
    ]
    w_dash = None
    if dash_mode == VECTOR_DASH:
        w_dash = rng.standard_normal((num_video_proxies, dim)) * scale
    params = GeneratorParams(
        projections=projections,
        delta=delta,
        eta=eta,
        dash_mode=dash_mode,
        theta=1.0,
        w_dash=w_dash,
        scaled_attention=scaled_attention,
    )
    params.validate()
    return params


class _RoundCache(NamedTuple):
    l_prev: np.ndarray
    q: np.ndarray
    keys: np.ndarray
    vals: np.ndarray
    logits: np.ndarray
    attn: np.ndarray


class _PairCache(NamedTuple):
    t_q: np.ndarray
    video_proxies: np.ndarray
    rounds: list[_RoundCache]
    director: np.ndarray
    dir_norm: float
    unit: np.ndarray
    sims: np.ndarray
    dash: float | np.ndarray


def _leader_step_cached(
    prev_leader: np.ndarray,
    video_proxies: np.ndarray,
    proj: ProjectionSet,
    scaled: bool,
) -> tuple[np.ndarray, _RoundCache]:
    q = prev_leader @ proj.w_q
    keys = matmul(video_proxies, proj.w_k)
    vals = matmul(video_proxies, proj.w_v)
    logits = keys @ q
    if scaled:
        logits = logits / math.sqrt(q.shape[0])
    attn = softmax_row(logits)
    # Residual adds the projected query q, not the raw previous leader.
    out = attn @ vals + q
    return out, _RoundCache(prev_leader, q, keys, vals, logits, attn)


def leader_step(
    prev_leader: np.ndarray,
    video_proxies: np.ndarray,
    proj: ProjectionSet,
    scaled: bool = False,
) -> np.ndarray:
    """One cross-attention refinement of the direction leader."""
    prev_leader = np.asarray(prev_leader, dtype=np.float64)
    video_proxies = np.asarray(video_proxies, dtype=np.float64)
    if video_proxies.ndim != 2 or video_proxies.shape[1] != prev_leader.shape[0]:
        raise ShapeMismatch(
            f"video proxies {video_proxies.shape} do not match leader "
            f"dimension {prev_leader.shape}"
        )
    out, _ = _leader_step_cached(prev_leader, video_proxies, proj, scaled)
    return out


def leader_path(
    t_q: np.ndarray, video_proxies: np.ndarray, params: GeneratorParams
) -> np.ndarray:
    """k leader rounds starting from the query itself."""
    leader = np.asarray(t_q, dtype=np.float64)
    for proj in params.projections:
        leader = leader_step(leader, video_proxies, proj, params.scaled_attention)
    return leader


def compute_director(
    t_q: np.ndarray, d_l: np.ndarray, delta: float, eta: float
) -> np.ndarray:
    """Direction vector delta * t_q - eta * d_l; errors if it collapses."""
    director = delta * np.asarray(t_q, dtype=np.float64) - eta * np.asarray(
        d_l, dtype=np.float64
    )
    if l2_norm(director) < DIRECTOR_NORM_THRESHOLD:
        raise DegenerateDirector(
            f"director norm below {DIRECTOR_NORM_THRESHOLD:g}: "
            f"delta*t_q nearly cancels eta*d_l (delta={delta}, eta={eta})"
        )
    return director


def _similarities(t_q: np.ndarray, video_proxies: np.ndarray) -> np.ndarray:
    """Cosine similarity of the query against each video proxy row."""
    t_q = np.asarray(t_q, dtype=np.float64)
    video_proxies = np.asarray(video_proxies, dtype=np.float64)
    nt = np.sqrt(np.dot(t_q, t_q))
    row_norms = np.sqrt((video_proxies * video_proxies).sum(axis=1))
    if nt < ZERO_NORM_THRESHOLD or (row_norms < ZERO_NORM_THRESHOLD).any():
        raise ZeroVector("similarity against a (near-)zero vector")
    return (video_proxies @ t_q) / (row_norms * nt)


def scalar_dash(t_q: np.ndarray, video_proxies: np.ndarray, theta: float) -> float:
    """exp(theta * mean similarity); strictly positive."""
    sims = _similarities(t_q, video_proxies)
    return float(np.exp(np.mean(theta * sims)))


def vector_dash(
    t_q: np.ndarray, video_proxies: np.ndarray, w_dash: np.ndarray
) -> np.ndarray:
    """Per-dimension dash exp(s @ W); every component strictly positive."""
    sims = _similarities(t_q, video_proxies)
    w_dash = np.asarray(w_dash, dtype=np.float64)
    if w_dash.ndim != 2 or w_dash.shape[0] != sims.shape[0]:
        raise ShapeMismatch(
            f"w_dash {w_dash.shape} does not match {sims.shape[0]} proxies"
        )
    return np.exp(sims @ w_dash)


def assemble_proxy(
    t_q: np.ndarray, director: np.ndarray, dash: float | np.ndarray
) -> np.ndarray:
    """Displace the query along the unit director by the dash magnitude(s)."""
    director = np.asarray(director, dtype=np.float64)
    norm = l2_norm(director)
    if norm < DIRECTOR_NORM_THRESHOLD:
        raise DegenerateDirector(
            f"cannot assemble proxy: director norm {norm:g} below threshold"
        )
    return np.asarray(t_q, dtype=np.float64) + dash * (director / norm)


def _proxy_forward(
    t_q: np.ndarray, video_proxies: np.ndarray, params: GeneratorParams
) -> tuple[np.ndarray, _PairCache]:
    rounds: list[_RoundCache] = []
    leader = t_q
    for proj in params.projections:
        leader, cache = _leader_step_cached(
            leader, video_proxies, proj, params.scaled_attention
        )
        rounds.append(cache)
    director = compute_director(t_q, leader, params.delta, params.eta)
    dir_norm = l2_norm(director)
    unit = director / dir_norm
    sims = _similarities(t_q, video_proxies)
    if params.dash_mode == SCALAR_DASH:
        dash: float | np.ndarray = float(np.exp(np.mean(params.theta * sims)))
    else:
        dash = np.exp(sims @ params.w_dash)
    t_p = t_q + dash * unit
    return t_p, _PairCache(
        t_q, video_proxies, rounds, director, dir_norm, unit, sims, dash
    )


def make_proxy(
    t_q: np.ndarray, video_proxies: np.ndarray, params: GeneratorParams
) -> np.ndarray:
    """Full single-pair pipeline: leader path, director, dash, assembly."""
    t_q = np.asarray(t_q, dtype=np.float64)
    video_proxies = np.asarray(video_proxies, dtype=np.float64)
    t_p, _ = _proxy_forward(t_q, video_proxies, params)
    return t_p


@dataclass(frozen=True)
class ProxyGrid:
    """Pair-specific proxies for a batch: values[i, j] = t_p(text i, video j)."""

    values: np.ndarray
    pipeline_calls: int
    caches: list[list[_PairCache]] | None = field(default=None, repr=False)


def proxy_grid(
    text_batch: np.ndarray,
    video_batch: np.ndarray,
    params: GeneratorParams,
    keep_caches: bool = False,
) -> ProxyGrid:
    """Run the pair pipeline for every (text, video) combination.

    Entry (i, j) is a function of text i, video j and the parameters only;
    ``pipeline_calls`` counts exactly one invocation per grid entry.
    """
    text_batch = np.asarray(text_batch, dtype=np.float64)
    video_batch = np.asarray(video_batch, dtype=np.float64)
    if text_batch.ndim != 2 or video_batch.ndim != 3:
        raise ShapeMismatch(
            f"expected (B_t, d) texts and (B_v, M, d) videos, got "
            f"{text_batch.shape} and {video_batch.shape}"
        )
    if text_batch.shape[0] == 0 or video_batch.shape[0] == 0:
        raise ShapeMismatch("empty batch")
    n_t, dim = text_batch.shape
    n_v = video_batch.shape[0]
    values = np.empty((n_t, n_v, dim), dtype=np.float64)
    caches: list[list[_PairCache]] | None = [] if keep_caches else None
    calls = 0
    for i in range(n_t):
        row_caches: list[_PairCache] = []
        for j in range(n_v):
            try:
                t_p, cache = _proxy_forward(text_batch[i], video_batch[j], params)
            except DegenerateDirector as exc:
                raise DegenerateDirector(str(exc), pair=(i, j)) from None
            values[i, j] = t_p
            calls += 1
            if keep_caches:
                row_caches.append(cache)
        if caches is not None:
            caches.append(row_caches)
    return ProxyGrid(values=values, pipeline_calls=calls, caches=caches)


def zero_grads(params: GeneratorParams) -> dict[str, np.ndarray]:
    """Zero-filled gradient slots for every trainable generator parameter."""
    grads: dict[str, np.ndarray] = {}
    for r, proj in enumerate(params.projections):
        grads[f"w_q.{r}"] = np.zeros_like(proj.w_q)
        grads[f"w_k.{r}"] = np.zeros_like(proj.w_k)
        grads[f"w_v.{r}"] = np.zeros_like(proj.w_v)
    if params.dash_mode == SCALAR_DASH:
        grads["theta"] = np.zeros(())
    else:
        grads["w_dash"] = np.zeros_like(params.w_dash)
    return grads


def proxy_backward(
    cache: _PairCache,
    params: GeneratorParams,
    grad_proxy: np.ndarray,
    grads: dict[str, np.ndarray],
) -> None:
    """Accumulate parameter cotangents for one pair given d(loss)/d(t_p).

    Embeddings are inputs, not parameters: no cotangents are produced for
    the text query or the video proxies.
    """
    unit = cache.unit
    if params.dash_mode == SCALAR_DASH:
        dash = cache.dash
        grad_dash = float(np.dot(grad_proxy, unit))
        grad_unit = dash * grad_proxy
        grads["theta"] += grad_dash * dash * float(np.mean(cache.sims))
    else:
        dash_vec = cache.dash
        grad_dash_vec = grad_proxy * unit
        grad_unit = grad_proxy * dash_vec
        grads["w_dash"] += np.outer(cache.sims, grad_dash_vec * dash_vec)

    # unit = director / |director|: J^T g = (g - <g, unit> unit) / |director|
    grad_dir = (grad_unit - float(np.dot(grad_unit, unit)) * unit) / cache.dir_norm
    grad_leader = -params.eta * grad_dir

    for r in range(params.k - 1, -1, -1):
        rc = cache.rounds[r]
        proj = params.projections[r]
        grad_attn = rc.vals @ grad_leader
        grad_vals = np.outer(rc.attn, grad_leader)
        grad_q = grad_leader.copy()
        grad_logits = softmax_row_vjp(rc.logits, grad_attn)
        if params.scaled_attention:
            grad_logits = grad_logits / math.sqrt(rc.q.shape[0])
        # logits = keys @ q
        grad_q += rc.keys.T @ grad_logits
        grad_keys = np.outer(grad_logits, rc.q)
        _, g_wk = matmul_vjp(cache.video_proxies, proj.w_k, grad_keys)
        _, g_wv = matmul_vjp(cache.video_proxies, proj.w_v, grad_vals)
        grads[f"w_k.{r}"] += g_wk
        grads[f"w_v.{r}"] += g_wv
        grads[f"w_q.{r}"] += np.outer(rc.l_prev, grad_q)
        grad_leader = proj.w_q @ grad_q


# --- parameter checkpointing -------------------------------------------------

PARAMS_FILE = "params.json"


def save_params(out_dir, params: GeneratorParams, log_temp: float) -> None:
    """One tensor file per matrix parameter plus a JSON index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensors: dict[str, str] = {}
    for r, proj in enumerate(params.projections):
        for name, w in (("w_q", proj.w_q), ("w_k", proj.w_k), ("w_v", proj.w_v)):
            fname = f"{name}_{r}.tvpx"
            store.write_tensor(out / fname, w)
            tensors[f"{name}.{r}"] = fname
    if params.dash_mode == VECTOR_DASH:
        store.write_tensor(out / "w_dash.tvpx", params.w_dash)
        tensors["w_dash"] = "w_dash.tvpx"
    meta = {
        "k": params.k,
        "delta": params.delta,
        "eta": params.eta,
        "dash_mode": params.dash_mode,
        "scaled_attention": params.scaled_attention,
        "theta": params.theta,
        "lambda": log_temp,
        "tensors": tensors,
    }
    (out / PARAMS_FILE).write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_params(params_dir) -> tuple[GeneratorParams, float]:
    """Inverse of save_params; returns (params, log-temperature)."""
    root = Path(params_dir)
    meta = json.loads((root / PARAMS_FILE).read_text(encoding="utf-8"))
    tensors = meta["tensors"]
    projections = []
    for r in range(meta["k"]):
        projections.append(
            ProjectionSet(
                w_q=store.read_tensor(root / tensors[f"w_q.{r}"]),
                w_k=store.read_tensor(root / tensors[f"w_k.{r}"]),
                w_v=store.read_tensor(root / tensors[f"w_v.{r}"]),
            )
        )
    w_dash = None
    if meta["dash_mode"] == VECTOR_DASH:
        w_dash = store.read_tensor(root / tensors["w_dash"])
    params = GeneratorParams(
        projections=projections,
        delta=meta["delta"],
        eta=meta["eta"],
        dash_mode=meta["dash_mode"],
        theta=meta["theta"],
        w_dash=w_dash,
        scaled_attention=meta["scaled_attention"],
    )
    params.validate()
    return params, float(meta["lambda"])
