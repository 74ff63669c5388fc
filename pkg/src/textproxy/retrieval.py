"""Inference scoring and ranking metrics.

The retrieval logit for pair (i, j) combines the plain text-video score
with the proxy-video score:

    combined(i, j) = cos(t_q_i, p1_j) + gamma * cos(t_p(i, j), p1_j)

The proxy for (i, j) derives from video j only -- never from text i's own
paired video -- so scoring stays honest.  An algebraically equivalent
factored form

    sqrt(1 + gamma^2 + 2 gamma cos(t_q, t_p)) * cos(q, p1),
    q = t_q/|t_q| + gamma * t_p/|t_p|

is provided for verification and feature-space export.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidConfig, MissingGroundTruth, ZeroVector
from .generator import GeneratorParams, init_params, proxy_grid
from .numkernel import ZERO_NORM_THRESHOLD, cosine_sim, l2_norm

TEXT_ONLY = "text_only"
COMBINED = "combined"
FACTORED = "factored"

TIE_RULE = "strict-greater"


@dataclass(frozen=True)
class ScoreMatrix:
    """Retrieval logits (texts x videos) with provenance."""

    values: np.ndarray
    kind: str
    gamma: float
    pipeline_calls: int


def _check_batches(text_batch: np.ndarray, video_batch: np.ndarray) -> None:
    if text_batch.ndim != 2 or video_batch.ndim != 3:
        raise InvalidConfig(
            f"expected (N_t, d) texts and (N_v, M, d) videos, got "
            f"{text_batch.shape} and {video_batch.shape}"
        )


def _text_video_scores(text_batch: np.ndarray, p1: np.ndarray) -> np.ndarray:
    out = np.empty((text_batch.shape[0], p1.shape[0]))
    for i in range(text_batch.shape[0]):
        for j in range(p1.shape[0]):
            out[i, j] = cosine_sim(text_batch[i], p1[j])
    return out


def text_only_scores(
    text_batch: np.ndarray, video_batch: np.ndarray
) -> ScoreMatrix:
    """Plain cosine scores against each video's retrieval feature p1."""
    text_batch = np.asarray(text_batch, dtype=np.float64)
    video_batch = np.asarray(video_batch, dtype=np.float64)
    _check_batches(text_batch, video_batch)
    values = _text_video_scores(text_batch, video_batch[:, 0, :])
    return ScoreMatrix(values=values, kind=TEXT_ONLY, gamma=0.0, pipeline_calls=0)


def _grid_row_block(args):
    text_rows, video_batch, params, start = args
    grid = proxy_grid(text_rows, video_batch, params)
    return start, grid.values, grid.pipeline_calls


def _proxy_grid_sharded(
    text_batch: np.ndarray,
    video_batch: np.ndarray,
    params: GeneratorParams,
    workers: int,
):
    """Row-sharded proxy grid; each entry is pair-local, so sharding is exact."""
    if workers <= 1 or text_batch.shape[0] == 1:
        return proxy_grid(text_batch, video_batch, params)
    bounds = np.linspace(0, text_batch.shape[0], workers + 1, dtype=int)
    tasks = [
        (text_batch[lo:hi], video_batch, params, int(lo))
        for lo, hi in zip(bounds[:-1], bounds[1:])
        if hi > lo
    ]
    values = np.empty(
        (text_batch.shape[0], video_batch.shape[0], text_batch.shape[1])
    )
    calls = 0
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for start, block, block_calls in pool.map(_grid_row_block, tasks):
            values[start : start + block.shape[0]] = block
            calls += block_calls
    from .generator import ProxyGrid

    return ProxyGrid(values=values, pipeline_calls=calls)


def combined_scores(
    text_batch: np.ndarray,
    video_batch: np.ndarray,
    params: GeneratorParams,
    gamma: float,
    workers: int = 1,
) -> ScoreMatrix:
    """Text-video scores remedied by pair-specific proxy-video scores."""
    text_batch = np.asarray(text_batch, dtype=np.float64)
    video_batch = np.asarray(video_batch, dtype=np.float64)
    _check_batches(text_batch, video_batch)
    if not math.isfinite(gamma):
        raise InvalidConfig("gamma must be finite")
    p1 = video_batch[:, 0, :]
    grid = _proxy_grid_sharded(text_batch, video_batch, params, workers)
    base = _text_video_scores(text_batch, p1)
    if gamma == 0.0:
        values = base
    else:
        proxy_part = np.empty_like(base)
        for i in range(base.shape[0]):
            for j in range(base.shape[1]):
                proxy_part[i, j] = cosine_sim(grid.values[i, j], p1[j])
        values = base + gamma * proxy_part
    return ScoreMatrix(
        values=values,
        kind=COMBINED,
        gamma=gamma,
        pipeline_calls=grid.pipeline_calls,
    )


def combined_query(t_q: np.ndarray, t_p: np.ndarray, gamma: float) -> np.ndarray:
    """q = t_q/|t_q| + gamma * t_p/|t_p|, the externally computed query."""
    t_q = np.asarray(t_q, dtype=np.float64)
    t_p = np.asarray(t_p, dtype=np.float64)
    nq = l2_norm(t_q)
    np_ = l2_norm(t_p)
    if nq < ZERO_NORM_THRESHOLD or np_ < ZERO_NORM_THRESHOLD:
        raise ZeroVector("combined_query of a (near-)zero vector")
    return t_q / nq + gamma * (t_p / np_)


def factored_scores(
    text_batch: np.ndarray,
    video_batch: np.ndarray,
    params: GeneratorParams,
    gamma: float,
    workers: int = 1,
) -> ScoreMatrix:
    """Combined scores via the factored identity; agrees within 1e-9."""
    text_batch = np.asarray(text_batch, dtype=np.float64)
    video_batch = np.asarray(video_batch, dtype=np.float64)
    _check_batches(text_batch, video_batch)
    if not math.isfinite(gamma):
        raise InvalidConfig("gamma must be finite")
    p1 = video_batch[:, 0, :]
    grid = _proxy_grid_sharded(text_batch, video_batch, params, workers)
    values = np.empty((text_batch.shape[0], video_batch.shape[0]))
    for i in range(values.shape[0]):
        for j in range(values.shape[1]):
            t_p = grid.values[i, j]
            q = combined_query(text_batch[i], t_p, gamma)
            coeff = math.sqrt(
                1.0 + gamma * gamma + 2.0 * gamma * cosine_sim(text_batch[i], t_p)
            )
            values[i, j] = coeff * cosine_sim(q, p1[j])
    return ScoreMatrix(
        values=values,
        kind=FACTORED,
        gamma=gamma,
        pipeline_calls=grid.pipeline_calls,
    )


@dataclass(frozen=True)
class IdentityCheckReport:
    trials: int
    degenerate_trials: int
    max_abs_diff: float
    tolerance: float
    passed: bool


def identity_check(
    trials: int,
    dim: int,
    gamma_range: tuple[float, float],
    tolerance: float,
    seed: int = 0,
    num_video_proxies: int = 3,
    k: int = 2,
) -> IdentityCheckReport:
    """Sample random instances and compare combined vs factored scores.

    Trials whose factored form degenerates (a zero combined query, e.g.
    gamma = -1 with collinear proxy) are counted, not failed.
    """
    if trials < 1:
        raise InvalidConfig("trials must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = gamma_range
    max_diff = 0.0
    degenerate = 0
    for _ in range(trials):
        n_t = int(rng.integers(1, 4))
        n_v = int(rng.integers(1, 4))
        text = rng.standard_normal((n_t, dim))
        text /= np.linalg.norm(text, axis=1, keepdims=True)
        video = rng.standard_normal((n_v, num_video_proxies, dim))
        video /= np.linalg.norm(video, axis=2, keepdims=True)
        params = init_params(
            dim=dim,
            num_video_proxies=num_video_proxies,
            k=k,
            delta=1.0,
            eta=1.0,
            dash_mode="scalar" if rng.integers(2) == 0 else "vector",
            seed=rng,
        )
        gamma = float(rng.uniform(lo, hi))
        direct = combined_scores(text, video, params, gamma)
        try:
            factored = factored_scores(text, video, params, gamma)
        except ZeroVector:
            degenerate += 1
            continue
        diff = float(np.max(np.abs(direct.values - factored.values)))
        max_diff = max(max_diff, diff)
    return IdentityCheckReport(
        trials=trials,
        degenerate_trials=degenerate,
        max_abs_diff=max_diff,
        tolerance=tolerance,
        passed=max_diff <= tolerance,
    )


@dataclass(frozen=True)
class RetrievalReport:
    recall_at_1: float
    recall_at_5: float
    recall_at_10: float
    median_rank: float
    mean_rank: float
    ranks: np.ndarray

    def as_dict(self, gamma: float, n_text: int, n_video: int) -> dict:
        return {
            "recall_at": {
                "1": self.recall_at_1,
                "5": self.recall_at_5,
                "10": self.recall_at_10,
            },
            "mdr": self.median_rank,
            "mnr": self.mean_rank,
            "gamma": gamma,
            "n_text": n_text,
            "n_video": n_video,
            "tie_rule": TIE_RULE,
        }


def evaluate(score_matrix, ground_truth) -> RetrievalReport:
    """Rank ground-truth videos per query; ties resolve in their favor.

    rank(i) = 1 + #{j : score[i, j] > score[i, gt_i]}.  R@K are percentages;
    the median rank takes the lower-median element for even counts.
    """
    values = (
        score_matrix.values
        if isinstance(score_matrix, ScoreMatrix)
        else np.asarray(score_matrix, dtype=np.float64)
    )
    n_text, n_video = values.shape
    gt = list(ground_truth)
    if len(gt) != n_text:
        raise MissingGroundTruth(
            f"{n_text} queries but {len(gt)} ground-truth entries"
        )
    ranks = np.empty(n_text, dtype=np.int64)
    for i, g in enumerate(gt):
        if g is None or not (0 <= int(g) < n_video):
            raise MissingGroundTruth(f"query {i} has no valid ground truth ({g!r})")
        own = values[i, int(g)]
        ranks[i] = 1 + int((values[i] > own).sum())
    sorted_ranks = np.sort(ranks)
    return RetrievalReport(
        recall_at_1=100.0 * float((ranks <= 1).mean()),
        recall_at_5=100.0 * float((ranks <= 5).mean()),
        recall_at_10=100.0 * float((ranks <= 10).mean()),
        median_rank=float(sorted_ranks[(n_text - 1) // 2]),
        mean_rank=float(ranks.mean()),
        ranks=ranks,
    )


def export_report(
    report: RetrievalReport, score_matrix: ScoreMatrix, out_dir, suffix: str = ""
) -> None:
    """Write report.json, scores.csv and ranks.csv into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_text, n_video = score_matrix.values.shape
    payload = report.as_dict(score_matrix.gamma, n_text, n_video)
    (out / f"report{suffix}.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    with open(out / f"scores{suffix}.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["text_id"] + [f"video_{j}" for j in range(n_video)])
        for i in range(n_text):
            writer.writerow([i] + [repr(float(x)) for x in score_matrix.values[i]])
    with open(out / f"ranks{suffix}.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["text_id", "rank"])
        for i, r in enumerate(report.ranks):
            writer.writerow([i, int(r)])
