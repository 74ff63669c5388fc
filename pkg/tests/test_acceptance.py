"""Acceptance suite: every criterion at its stated tolerance.

Each test prints one `[acceptance] ... PASS/FAIL` line (visible with -s),
and fails the run if its criterion is not met.
"""

import json
import math
import time

import numpy as np
import pytest

from textproxy.cli import main as cli_main
from textproxy.generator import init_params, proxy_grid
from textproxy.numkernel import cosine_sim
from textproxy.objectives import ScoreGrids, build_grids, infonce_bidirectional, loss_total
from textproxy.retrieval import combined_scores, evaluate, identity_check, text_only_scores
from textproxy.store import SynthConfig, generate_synthetic
from textproxy.trainer import AdamWConfig, TrainConfig, grad_check, train

GAMMAS = [round(0.1 * i, 1) for i in range(1, 9)]  # 0.1 .. 0.8

PLANTED = dict(
    n_pairs=256, dim=32, num_video_proxies=4,
    sigma_text=0.4, sigma_video=0.2, sigma_corrupt=0.8,
)


def _report(criterion: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    print(f"[acceptance] {criterion}: {status} {detail}".rstrip())
    assert passed, f"{criterion}: {detail}"


def _random_instance(rng, d, m, dash_mode):
    t_q = rng.standard_normal(d)
    t_q /= np.linalg.norm(t_q)
    videos = rng.standard_normal((m, d))
    videos /= np.linalg.norm(videos, axis=1, keepdims=True)
    params = init_params(
        dim=d, num_video_proxies=m, k=2, delta=1.0, eta=1.0,
        dash_mode=dash_mode, seed=rng,
    )
    return t_q, videos, params


def test_criterion_1_factored_identity():
    start = time.perf_counter()
    report = identity_check(
        trials=100, dim=16, gamma_range=(0.1, 0.8), tolerance=1e-9, seed=0
    )
    elapsed = time.perf_counter() - start
    _report(
        "1 appendix identity",
        report.passed and elapsed < 5.0,
        f"max |combined - factored| = {report.max_abs_diff:.3e} over "
        f"{report.trials} trials in {elapsed:.2f}s",
    )


def test_criterion_2_gradient_fidelity():
    start = time.perf_counter()
    results = []
    for mode in ("scalar", "vector"):
        cfg = TrainConfig(epochs=1, batch_size=4, seed=7, k=2, dash_mode=mode)
        rep = grad_check(cfg, tolerance=1e-4, seed=7, dim=8, num_video_proxies=3)
        results.append(rep)
    elapsed = time.perf_counter() - start
    expected_counts = {"scalar": 2 * 3 * 64 + 2, "vector": 2 * 3 * 64 + 24 + 1}
    ok = all(r.passed for r in results) and elapsed < 30.0
    ok = ok and all(r.n_scalars == expected_counts[r.dash_mode] for r in results)
    detail = "; ".join(
        f"{r.dash_mode}: max rel err {r.max_rel_err:.2e} over {r.n_scalars} scalars"
        for r in results
    )
    _report("2 gradient fidelity", ok, f"{detail}; {elapsed:.1f}s")


def test_criterion_3_geometric_invariants():
    rng = np.random.default_rng(17)
    worst_disp = 0.0
    worst_align = 1.0
    for _ in range(1000):
        t_q, videos, params = _random_instance(rng, 8, 3, "scalar")
        grid = proxy_grid(t_q[None], videos[None], params)
        t_p = grid.values[0, 0]
        disp = t_p - t_q
        from textproxy.generator import compute_director, leader_path, scalar_dash

        director = compute_director(
            t_q, leader_path(t_q, videos, params), params.delta, params.eta
        )
        dash = scalar_dash(t_q, videos, params.theta)
        assert dash > 0.0
        worst_disp = max(worst_disp, abs(np.linalg.norm(disp) - dash))
        worst_align = min(
            worst_align,
            disp @ director / (np.linalg.norm(disp) * np.linalg.norm(director)),
        )
    sign_ok = True
    for _ in range(1000):
        t_q, videos, params = _random_instance(rng, 8, 3, "vector")
        from textproxy.generator import compute_director, leader_path, vector_dash

        t_p = proxy_grid(t_q[None], videos[None], params).values[0, 0]
        director = compute_director(
            t_q, leader_path(t_q, videos, params), params.delta, params.eta
        )
        dash_vec = vector_dash(t_q, videos, params.w_dash)
        assert (dash_vec > 0.0).all()
        disp = t_p - t_q
        mask = np.abs(director) / np.linalg.norm(director) > 1e-9
        sign_ok = sign_ok and bool(
            (np.sign(disp[mask]) == np.sign(director[mask])).all()
        )
    ok = worst_disp <= 1e-9 and worst_align >= 1.0 - 1e-12 and sign_ok
    _report(
        "3 geometric invariants",
        ok,
        f"max | |t_p-t_q| - D_s | = {worst_disp:.2e}, "
        f"min direction cosine = {1.0 - worst_align:.2e} below 1, "
        f"vector sign agreement = {sign_ok}",
    )


def test_criterion_4_infonce_closed_forms():
    checks = []
    for b in (2, 4, 8):
        loss = infonce_bidirectional(np.full((b, b), 0.3), 1.0)
        checks.append(abs(loss - math.log(b)) <= 1e-12)
    ident = infonce_bidirectional(np.eye(2), 1.0)
    checks.append(abs(ident - math.log(1 + math.exp(-1))) <= 1e-9)
    rng = np.random.default_rng(4)
    for _ in range(50):
        b = int(rng.integers(2, 7))
        grids = ScoreGrids(
            r=rng.uniform(-1, 1, (b, b)),
            g=rng.uniform(-1, 1, (b, b)),
            h=rng.uniform(-1, 1, (b, b)),
            pipeline_calls=b * b,
        )
        alpha, beta = rng.uniform(0, 2, 2)
        breakdown = loss_total(grids, float(rng.uniform(0.05, 2)), alpha, beta)
        checks.append(
            abs(
                breakdown.total
                - (breakdown.l_r + alpha * breakdown.l_p + beta * breakdown.l_pos)
            )
            <= 1e-12
        )
    _report(
        "4 InfoNCE closed forms",
        all(checks),
        f"ln B at B in (2,4,8), identity grid = {ident:.6f}, linearity x50",
    )


def test_criterion_5_complexity_accounting():
    rng = np.random.default_rng(5)
    ok = True
    details = []
    for b in (2, 4, 8):
        texts = rng.standard_normal((b, 8))
        texts /= np.linalg.norm(texts, axis=1, keepdims=True)
        videos = rng.standard_normal((b, 3, 8))
        videos /= np.linalg.norm(videos, axis=2, keepdims=True)
        params = init_params(8, 3, k=2, delta=1.0, eta=1.0, seed=rng)
        grids = build_grids(texts, videos, params)
        scores = combined_scores(texts, videos, params, 0.3)
        ok = ok and grids.pipeline_calls == b * b == scores.pipeline_calls
        details.append(f"B={b}: {grids.pipeline_calls}")
    # non-square evaluation counts B_t x B_v
    texts = rng.standard_normal((3, 8))
    videos = rng.standard_normal((5, 3, 8))
    videos /= np.linalg.norm(videos, axis=2, keepdims=True)
    params = init_params(8, 3, k=2, delta=1.0, eta=1.0, seed=rng)
    scores = combined_scores(texts, videos, params, 0.3)
    ok = ok and scores.pipeline_calls == 15
    _report(
        "5 complexity accounting", ok, ", ".join(details) + f", 3x5 eval: {scores.pipeline_calls}"
    )


@pytest.mark.slow
def test_criterion_6_planted_task_improvement():
    improved = 0
    not_worse = 0
    lines = []
    for seed in range(1, 6):
        ds = generate_synthetic(SynthConfig(seed=seed, **PLANTED))
        start = time.perf_counter()
        result = train(
            ds,
            TrainConfig(epochs=20, batch_size=32, seed=seed),
            AdamWConfig(lr=1e-3),
        )
        train_time = time.perf_counter() - start
        assert train_time < 120.0, f"training exceeded 2 minutes ({train_time:.0f}s)"

        gt = ds.ground_truth()
        base = evaluate(
            text_only_scores(ds.text_queries, ds.video_proxies), gt
        ).recall_at_1
        r = text_only_scores(ds.text_queries, ds.video_proxies).values
        grid = proxy_grid(ds.text_queries, ds.video_proxies, result.params)
        p1 = ds.video_proxies[:, 0, :]
        proxy_part = np.empty_like(r)
        for i in range(ds.n_pairs):
            for j in range(ds.n_pairs):
                proxy_part[i, j] = cosine_sim(grid.values[i, j], p1[j])
        best = max(
            evaluate(r + g * proxy_part, gt).recall_at_1 for g in GAMMAS
        )
        improved += best > base
        not_worse += best >= base
        lines.append(f"seed {seed}: {base:.2f} -> {best:.2f} ({train_time:.0f}s)")
    _report(
        "6 planted-task improvement",
        not_worse == 5 and improved >= 4,
        f">= in {not_worse}/5, > in {improved}/5 [{'; '.join(lines)}]",
    )


def test_criterion_7_no_cheating_guard():
    rng = np.random.default_rng(7)
    ds = generate_synthetic(SynthConfig(n_pairs=12, dim=8, num_video_proxies=3,
                                        sigma_text=0.3, sigma_video=0.2,
                                        sigma_corrupt=0.5, seed=3))
    params = init_params(8, 3, k=2, delta=1.0, eta=1.0, seed=11)
    before = combined_scores(ds.text_queries, ds.video_proxies, params, 0.5)
    ok = True
    for i in (0, 5, 11):
        corrupted = ds.video_proxies.copy()
        noise = rng.standard_normal(corrupted[i].shape)
        corrupted[i] = noise / np.linalg.norm(noise, axis=1, keepdims=True)
        after = combined_scores(ds.text_queries, corrupted, params, 0.5)
        others = [j for j in range(12) if j != i]
        ok = ok and np.array_equal(
            before.values[:, others], after.values[:, others]
        )
        ok = ok and not np.array_equal(before.values[:, i], after.values[:, i])
    _report(
        "7 no-cheating guard",
        ok,
        "scores (i, j != i) invariant to replacing video i with noise",
    )


@pytest.mark.slow
def test_criterion_8_determinism(tmp_path):
    cfg = {
        "n_pairs": 16, "dim": 8, "num_video_proxies": 2,
        "batch_size": 4, "epochs": 2, "seed": 9,
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    outputs = []
    for run in ("one", "two"):
        data = tmp_path / run / "data"
        ckpt = tmp_path / run / "run"
        rep = tmp_path / run / "report"
        assert cli_main(["synth", "--config", str(cfg_path), "--out", str(data)]) == 0
        assert cli_main(
            ["train", "--config", str(cfg_path), "--data", str(data),
             "--out", str(ckpt), "--workers", "1"]
        ) == 0
        assert cli_main(
            ["eval", "--config", str(cfg_path), "--data", str(data),
             "--params", str(ckpt / "checkpoint"), "--gamma", "0.4",
             "--report", str(rep), "--workers", "1"]
        ) == 0
        files = {}
        for p in sorted((tmp_path / run).rglob("*")):
            if p.is_file():
                files[str(p.relative_to(tmp_path / run))] = p.read_bytes()
        outputs.append(files)
    identical = outputs[0].keys() == outputs[1].keys() and all(
        outputs[0][k] == outputs[1][k] for k in outputs[0]
    )
    _report(
        "8 determinism",
        identical,
        f"{len(outputs[0])} files bit-identical across two runs",
    )
