"""Similarity grids and the three-part InfoNCE training objective.

Three B x B grids are built per square batch:

    R[i, j] = cos(t_q_i,      p1_j)   regular text-video scores
    G[i, j] = cos(t_p(i, j),  p1_j)   proxy-video scores
    H[i, j] = cos(t_p(i, i),  p1_j)   positive proxy against every video

H exists only for the hard-negative positive-proxy loss; it is never used
for retrieval (the diagonal proxy leaks information about its own video).
Each grid feeds a bidirectional InfoNCE term and the total is

    total = L_r(R) + alpha * L_p(G) + beta * L_pos(H)

with a shared learnable temperature sigma = exp(lambda).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BatchTooSmall, NonPositiveTemperature, NonSquareBatch
from .generator import GeneratorParams, ProxyGrid, proxy_backward, proxy_grid, zero_grads
from .numkernel import cosine_sim, cosine_sim_vjp


@dataclass(frozen=True)
class ScoreGrids:
    """The three training grids plus the pipeline invocation count."""

    r: np.ndarray
    g: np.ndarray
    h: np.ndarray
    pipeline_calls: int


@dataclass(frozen=True)
class LossBreakdown:
    l_r: float
    l_p: float
    l_pos: float
    total: float
    alpha: float
    beta: float
    sigma: float


def _grids_from_proxies(
    text_batch: np.ndarray, video_batch: np.ndarray, grid: ProxyGrid
) -> ScoreGrids:
    b = text_batch.shape[0]
    p1 = video_batch[:, 0, :]
    r = np.empty((b, b))
    g = np.empty((b, b))
    h = np.empty((b, b))
    for i in range(b):
        diag_proxy = grid.values[i, i]
        for j in range(b):
            r[i, j] = cosine_sim(text_batch[i], p1[j])
            g[i, j] = cosine_sim(grid.values[i, j], p1[j])
            h[i, j] = cosine_sim(diag_proxy, p1[j])
    return ScoreGrids(r=r, g=g, h=h, pipeline_calls=grid.pipeline_calls)


def build_grids(
    text_batch: np.ndarray, video_batch: np.ndarray, params: GeneratorParams
) -> ScoreGrids:
    """Score grids for a square, diagonally-aligned batch."""
    text_batch = np.asarray(text_batch, dtype=np.float64)
    video_batch = np.asarray(video_batch, dtype=np.float64)
    if text_batch.shape[0] != video_batch.shape[0]:
        raise NonSquareBatch(
            f"{text_batch.shape[0]} texts vs {video_batch.shape[0]} videos"
        )
    grid = proxy_grid(text_batch, video_batch, params)
    return _grids_from_proxies(text_batch, video_batch, grid)


def _check_loss_inputs(grid: np.ndarray, sigma: float) -> None:
    if sigma <= 0:
        raise NonPositiveTemperature(f"sigma must be > 0, got {sigma}")
    if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
        raise NonSquareBatch(f"loss grid must be square, got {grid.shape}")
    if grid.shape[0] < 2:
        raise BatchTooSmall("InfoNCE needs a batch of at least 2")


def _log_softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def infonce_bidirectional(grid: np.ndarray, sigma: float) -> float:
    """Mean of row-wise and column-wise softmax cross-entropy on the diagonal."""
    grid = np.asarray(grid, dtype=np.float64)
    _check_loss_inputs(grid, sigma)
    z = grid / sigma
    row = -float(np.mean(np.diag(_log_softmax_rows(z))))
    col = -float(np.mean(np.diag(_log_softmax_rows(z.T))))
    return 0.5 * (row + col)


def _infonce_value_grad(
    grid: np.ndarray, sigma: float
) -> tuple[float, np.ndarray, float]:
    """Loss, cotangent w.r.t. the grid, and cotangent w.r.t. lambda = log sigma."""
    grid = np.asarray(grid, dtype=np.float64)
    _check_loss_inputs(grid, sigma)
    b = grid.shape[0]
    z = grid / sigma
    log_p_row = _log_softmax_rows(z)
    log_p_col = _log_softmax_rows(z.T).T
    loss = -0.5 * float(np.mean(np.diag(log_p_row)) + np.mean(np.diag(log_p_col)))
    eye = np.eye(b)
    dz = (np.exp(log_p_row) - eye) / (2 * b) + (np.exp(log_p_col) - eye) / (2 * b)
    dgrid = dz / sigma
    # z = grid * exp(-lambda)  =>  dz/dlambda = -z
    dlambda = -float(np.sum(dz * z))
    return loss, dgrid, dlambda


def loss_total(
    grids: ScoreGrids, sigma: float, alpha: float, beta: float
) -> LossBreakdown:
    """Weighted sum of the three InfoNCE terms."""
    l_r = infonce_bidirectional(grids.r, sigma)
    l_p = infonce_bidirectional(grids.g, sigma)
    l_pos = infonce_bidirectional(grids.h, sigma)
    return LossBreakdown(
        l_r=l_r,
        l_p=l_p,
        l_pos=l_pos,
        total=l_r + alpha * l_p + beta * l_pos,
        alpha=alpha,
        beta=beta,
        sigma=sigma,
    )


def loss_value(
    text_batch: np.ndarray,
    video_batch: np.ndarray,
    params: GeneratorParams,
    log_temp: float,
    alpha: float,
    beta: float,
) -> LossBreakdown:
    """Forward-only total loss for a batch."""
    grids = build_grids(text_batch, video_batch, params)
    return loss_total(grids, math.exp(log_temp), alpha, beta)


def loss_backward(
    text_batch: np.ndarray,
    video_batch: np.ndarray,
    params: GeneratorParams,
    log_temp: float,
    alpha: float,
    beta: float,
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Total loss plus gradients for every trainable scalar.

    Gradients cover each round's projections, the active dash parameter
    (theta or w_dash) and the log-temperature ``lambda``.  Embeddings are
    inputs, not parameters: no gradients are emitted for them.
    """
    text_batch = np.asarray(text_batch, dtype=np.float64)
    video_batch = np.asarray(video_batch, dtype=np.float64)
    if text_batch.shape[0] != video_batch.shape[0]:
        raise NonSquareBatch(
            f"{text_batch.shape[0]} texts vs {video_batch.shape[0]} videos"
        )
    b = text_batch.shape[0]
    sigma = math.exp(log_temp)
    grid = proxy_grid(text_batch, video_batch, params, keep_caches=True)
    grids = _grids_from_proxies(text_batch, video_batch, grid)

    l_r, _, dlam_r = _infonce_value_grad(grids.r, sigma)
    l_p, dg, dlam_p = _infonce_value_grad(grids.g, sigma)
    l_pos, dh, dlam_pos = _infonce_value_grad(grids.h, sigma)
    breakdown = LossBreakdown(
        l_r=l_r,
        l_p=l_p,
        l_pos=l_pos,
        total=l_r + alpha * l_p + beta * l_pos,
        alpha=alpha,
        beta=beta,
        sigma=sigma,
    )

    grads = zero_grads(params)
    grads["log_temp"] = np.asarray(dlam_r + alpha * dlam_p + beta * dlam_pos)

    p1 = video_batch[:, 0, :]
    for i in range(b):
        # H row i scores the diagonal proxy t_p(i, i) against every video.
        grad_diag = np.zeros(text_batch.shape[1])
        for j in range(b):
            grad_diag += cosine_sim_vjp(grid.values[i, i], p1[j], beta * dh[i, j])[0]
        for j in range(b):
            grad_tp = cosine_sim_vjp(grid.values[i, j], p1[j], alpha * dg[i, j])[0]
            if i == j:
                grad_tp = grad_tp + grad_diag
            proxy_backward(grid.caches[i][j], params, grad_tp, grads)
    return breakdown, grads
