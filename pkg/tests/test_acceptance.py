"""Acceptance gate: the eight end-to-end properties this package promises.

Each criterion is one test with its stated tolerance and runtime budget.
Every test writes one `acceptance N PASS/FAIL` line to the real stdout so
the gate stays auditable in captured pytest output.
"""

import functools
import json
import time

import numpy as np
import pytest
import torch

from ceseg.ce_block import (
    brute_force_matching,
    ce_forward,
    distance_from_squared,
    neighbor_indices,
    neighboring_matching,
)
from ceseg.checkpoint import save_checkpoint
from ceseg.cli import main
from ceseg.config import ModelConfig, RunConfig
from ceseg.data import generate_dataset
from ceseg.metrics import assd, dice_loss, extract_surface, hd95, surface_distances
from ceseg.training import build_model, count_parameters, evaluate, train


_CAPTURE = None


@pytest.fixture(autouse=True)
def _audit_stream(request):
    # Audit lines must reach the terminal even though pytest captures at the
    # file-descriptor level for passing tests.
    global _CAPTURE
    _CAPTURE = request.config.pluginmanager.getplugin("capturemanager")
    yield


def _line(text: str) -> None:
    if _CAPTURE is not None:
        with _CAPTURE.global_and_fixture_disabled():
            print(text, flush=True)
    else:
        print(text, flush=True)


def criterion(label: str):
    """Print one pass/fail audit line; the test body returns the PASS detail."""

    def wrap(fn):
        @functools.wraps(fn)
        def inner(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                _line(f"{label} FAIL: {type(exc).__name__}: {exc}")
                raise
            _line(f"{label} PASS: {detail}")

        return inner

    return wrap


# ---------------------------------------------------------------------------
# 1. distance identity stability


@criterion("acceptance 1")
def test_criterion_1_distance_identity_stability():
    tic = time.perf_counter()
    rng = np.random.default_rng(0)
    s = torch.from_numpy(rng.uniform(0.0, 100.0, size=10_000))
    naive = 1.0 - 2.0 / (1.0 + torch.exp(s))
    stable = distance_from_squared(s)
    assert torch.isfinite(naive).all(), "naive form overflowed"
    assert torch.isfinite(stable).all()
    worst = float((naive - stable).abs().max())
    assert worst < 1e-12, f"identity violated: max |naive - stable| = {worst:.3e}"
    elapsed = time.perf_counter() - tic
    assert elapsed < 1.0, f"took {elapsed:.2f}s, budget 1s"
    return f"max |naive - tanh(s/2)| = {worst:.3e} over 1e4 samples, {elapsed:.2f}s"


# ---------------------------------------------------------------------------
# 2. matching oracle equivalence


@criterion("acceptance 2")
def test_criterion_2_matching_oracle_equivalence():
    tic = time.perf_counter()
    rng = np.random.default_rng(1)
    for i in range(200):
        h = int(rng.integers(3, 17))
        w = int(rng.integers(3, 17))
        c = int(rng.integers(1, 5))
        k = int(rng.integers(0, 4))
        n = int(rng.integers(1, 3))
        e_cur = torch.from_numpy(rng.normal(size=(n, c, h, w))).float()
        e_nb = torch.from_numpy(rng.normal(size=(n, c, h, w))).float()
        prob = torch.from_numpy(rng.random(size=(n, 1, h, w))).float()
        if i % 3 == 0:  # exercise the unbatched path too
            e_cur, e_nb, prob = e_cur[0], e_nb[0], prob[0]
        fast = neighboring_matching(e_cur, e_nb, prob, radius=k)
        slow = brute_force_matching(e_cur, e_nb, prob, radius=k)
        assert torch.equal(fast, slow), f"instance {i} (h={h} w={w} c={c} k={k})"
    elapsed = time.perf_counter() - tic
    assert elapsed < 30.0, f"took {elapsed:.1f}s, budget 30s"
    return f"200 random instances element-exact, {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# 3. end-to-end gradient check
#
# The analytic gradient is checked against central finite differences on a
# frozen 2-slice 16x16 instance, per parameter group, along the gradient
# direction and along a fixed random direction. Two step sizes: at 1e-3 the
# truncation term dominates and 1e-2 is the honest bound; at 1e-5 truncation
# is small enough for the double-precision 1e-4 bound to be meaningful.
# Normalization in eval mode: batch statistics make the loss surface depend
# on the probe step itself, which breaks the finite-difference model without
# indicating any gradient defect.


def _flat_grad(params):
    return torch.cat([p.grad.reshape(-1) for p in params])


def _add_scaled(params, vec, alpha):
    with torch.no_grad():
        offset = 0
        for p in params:
            n = p.numel()
            p.add_(alpha * vec[offset : offset + n].reshape(p.shape))
            offset += n


@criterion("acceptance 3")
def test_criterion_3_gradient_check():
    tic = time.perf_counter()
    cfg = ModelConfig()
    backbone, block = build_model(cfg, seed=4, variant="ce")
    backbone.double().eval()
    block.double().eval()

    gen = torch.Generator().manual_seed(2)
    x = 3.0 * torch.randn(2, cfg.in_channels, 16, 16, dtype=torch.float64, generator=gen)
    target = (torch.rand(2, 1, 16, 16, generator=gen) > 0.5).double()

    # Pin the organ threshold to the widest gap in the decoder probabilities
    # so no candidate flips in or out of the matching window under the probe.
    with torch.no_grad():
        probs = ce_forward(backbone, block, x).prob_decoder.reshape(-1)
        vals = torch.sort(probs[(probs >= 0.25) & (probs <= 0.75)]).values
        gaps = vals[1:] - vals[:-1]
        j = int(torch.argmax(gaps))
        thr = float((vals[j] + vals[j + 1]) / 2)
        gap = float(gaps[j])
    assert gap > 2e-3, f"no stable threshold gap (widest {gap:.2e})"

    def loss_at():
        out = ce_forward(backbone, block, x, fg_threshold=thr)
        return dice_loss(out.prob_final, target)

    def loss_value():
        with torch.no_grad():
            return float(loss_at())

    groups = [
        ("backbone", list(backbone.parameters())),
        ("embed_head", [p for n, p in block.named_parameters() if n.startswith("embed_head")]),
        (
            "seg_convs",
            [
                p
                for n, p in block.named_parameters()
                if n.split(".")[0] in ("refine_convs", "refine_head", "merge_convs", "merge_head")
            ],
        ),
        ("attention_fcs", [p for n, p in block.named_parameters() if n.startswith("gate_fc")]),
    ]
    n_grouped = sum(p.numel() for _, ps in groups[1:] for p in ps)
    assert n_grouped == sum(p.numel() for p in block.parameters()), "group partition leaks"

    all_params = [p for _, ps in groups for p in ps]
    for p in all_params:
        p.grad = None
    loss_at().backward()

    gen_dir = torch.Generator().manual_seed(7)
    worst = {1e-3: 0.0, 1e-5: 0.0}
    for name, params in groups:
        g = _flat_grad(params)
        gnorm = float(g.norm())
        assert gnorm > 0, f"group {name} has zero gradient"
        grad_dir = g / g.norm()
        rand_dir = torch.randn(g.numel(), dtype=torch.float64, generator=gen_dir)
        rand_dir = rand_dir / rand_dir.norm()
        probes = [(grad_dir, gnorm), (rand_dir, float(g @ rand_dir))]
        for step, tol in ((1e-3, 1e-2), (1e-5, 1e-4)):
            for direction, analytic in probes:
                _add_scaled(params, direction, step)
                plus = loss_value()
                _add_scaled(params, direction, -2.0 * step)
                minus = loss_value()
                _add_scaled(params, direction, step)
                fd = (plus - minus) / (2.0 * step)
                err = abs(fd - analytic) / gnorm
                worst[step] = max(worst[step], err)
                assert err < tol, (
                    f"group {name}, step {step:g}: rel err {err:.3e} >= {tol:g} "
                    f"(fd {fd:.6e}, analytic {analytic:.6e}, |g| {gnorm:.3e})"
                )
    elapsed = time.perf_counter() - tic
    assert elapsed < 120.0, f"took {elapsed:.1f}s, budget 2min"
    return (
        f"all groups: rel err {worst[1e-3]:.2e} < 1e-2 at step 1e-3, "
        f"{worst[1e-5]:.2e} < 1e-4 at step 1e-5 (double), {elapsed:.1f}s"
    )


# ---------------------------------------------------------------------------
# 4. surface-metric oracle


def _allpairs_pool(a, b, spacing):
    sa, sb = extract_surface(a), extract_surface(b)
    sp = np.asarray(spacing, dtype=np.float64)
    d2 = (((sa[:, None, :] - sb[None, :, :]) * sp) ** 2).sum(axis=-1)
    fwd = np.sqrt(d2.min(axis=1))
    bwd = np.sqrt(d2.min(axis=0))
    return np.concatenate([fwd, bwd])


@criterion("acceptance 4")
def test_criterion_4_surface_metric_oracle():
    tic = time.perf_counter()
    rng = np.random.default_rng(3)
    for i in range(50):
        shape = tuple(int(rng.integers(4, 17)) for _ in range(3))
        a = rng.random(shape) < float(rng.uniform(0.2, 0.8))
        b = rng.random(shape) < float(rng.uniform(0.2, 0.8))
        if not a.any():
            a[tuple(int(rng.integers(0, s)) for s in shape)] = True
        if not b.any():
            b[tuple(int(rng.integers(0, s)) for s in shape)] = True
        spacing = tuple(float(rng.uniform(0.5, 3.0)) for _ in range(3))

        pool = surface_distances(a, b, spacing)
        oracle = _allpairs_pool(a, b, spacing)
        assert pool.shape == oracle.shape
        assert np.array_equal(pool, oracle), f"pair {i}: pooled multisets differ"
        assert assd(a, b, spacing) == float(np.mean(oracle)), f"pair {i}: assd"
        assert hd95(a, b, spacing) == float(np.percentile(oracle, 95)), f"pair {i}: hd95"

        # Doubling the spacing must scale both metrics exactly (power of two,
        # so every intermediate doubles without rounding).
        double_sp = tuple(2.0 * s for s in spacing)
        assert assd(a, b, double_sp) == 2.0 * assd(a, b, spacing), f"pair {i}: assd scaling"
        assert hd95(a, b, double_sp) == 2.0 * hd95(a, b, spacing), f"pair {i}: hd95 scaling"
    elapsed = time.perf_counter() - tic
    assert elapsed < 60.0, f"took {elapsed:.1f}s, budget 1min"
    return f"50 pairs equal all-pairs oracle exactly, spacing scaling exact, {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# 5. desk-scale A/B experiment


@criterion("acceptance 5")
def test_criterion_5_desk_scale_ab(tmp_path):
    tic = time.perf_counter()
    base_cfg = RunConfig().with_profile("desk_scale")
    assert base_cfg.phantom.n_cases == 30
    assert base_cfg.phantom.shape == (32, 64, 64)

    means = {"ce": {"dsc": [], "hd95": []}, "baseline": {"dsc": [], "hd95": []}}
    for seed in (0, 1, 2):
        cfg = base_cfg.with_seed(seed)
        seed_dir = tmp_path / f"seed{seed}"
        manifest = generate_dataset(cfg.phantom, seed_dir / "data")
        for variant in ("ce", "baseline"):
            result = train(cfg, manifest, seed_dir / variant, variant=variant)
            report = evaluate(
                result.checkpoint_best, manifest, split="test", out_dir=seed_dir / variant / "eval"
            )
            agg = report.aggregate
            means[variant]["dsc"].append(agg["dsc_pct"]["mean"])
            means[variant]["hd95"].append(agg["hd95_mm"]["mean"])
            _line(
                f"  seed {seed} {variant:9s} DSC {agg['dsc_pct']['mean']:.3f} "
                f"hd95 {agg['hd95_mm']['mean']:.3f}"
            )

    ce_dsc = float(np.mean(means["ce"]["dsc"]))
    base_dsc = float(np.mean(means["baseline"]["dsc"]))
    ce_hd = float(np.mean(means["ce"]["hd95"]))
    base_hd = float(np.mean(means["baseline"]["hd95"]))
    elapsed = time.perf_counter() - tic

    assert ce_dsc >= base_dsc + 0.5, (
        f"mean test DSC: ce {ce_dsc:.3f} vs baseline {base_dsc:.3f} "
        f"(gap {ce_dsc - base_dsc:+.3f} < 0.5)"
    )
    assert ce_hd <= 1.05 * base_hd, (
        f"mean 95HD: ce {ce_hd:.3f}mm vs baseline {base_hd:.3f}mm (worse by >5%)"
    )
    assert elapsed < 45 * 60, f"took {elapsed / 60:.1f}min, budget 45min"
    return (
        f"3 seeds: DSC ce {ce_dsc:.2f} vs baseline {base_dsc:.2f} "
        f"(gap {ce_dsc - base_dsc:+.2f}), 95HD {ce_hd:.2f} vs {base_hd:.2f}mm, "
        f"{elapsed / 60:.1f}min"
    )


# ---------------------------------------------------------------------------
# 6. parameter overhead


@criterion("acceptance 6")
def test_criterion_6_parameter_overhead(tmp_path):
    cfg = RunConfig()
    backbone, block = build_model(cfg.model, seed=0, variant="ce")
    path = tmp_path / "audit.zip"
    save_checkpoint(path, cfg, "ce", 0, backbone, block)
    counts = count_parameters(path)
    assert counts["total"] == counts["backbone"] + counts["ce_block"]
    ratio = counts["ce_block"] / counts["backbone"]
    assert ratio < 0.05, f"context block is {ratio:.2%} of the backbone"
    return (
        f"backbone {counts['backbone']:,} params, context block {counts['ce_block']:,} "
        f"({ratio:.2%} < 5%)"
    )


# ---------------------------------------------------------------------------
# 7. edge rule for the first slices


@criterion("acceptance 7")
def test_criterion_7_neighbor_edge_rule():
    idx = neighbor_indices(6, 1)
    assert idx[0] == 1
    assert all(idx[i] == i - 1 for i in range(1, 6))

    cfg = ModelConfig()
    backbone, block = build_model(cfg, seed=0, variant="ce")
    backbone.eval()
    block.eval()
    stack = torch.randn(6, cfg.in_channels, 16, 16, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        out = ce_forward(backbone, block, stack, interval=1)
    assert out.neighbor_index == [1, 0, 1, 2, 3, 4]
    return f"6-slice stack, interval 1: context slices {out.neighbor_index}"


# ---------------------------------------------------------------------------
# 8. bit-for-bit training determinism


def _log_without_wall_time(path):
    records = []
    for line in path.read_text().splitlines():
        record = json.loads(line)
        record.pop("wall_s", None)
        records.append(record)
    return records


@criterion("acceptance 8")
def test_criterion_8_training_determinism(tmp_path, tiny_dataset, tiny_config_file):
    outs = []
    for run in ("run_a", "run_b"):
        out_dir = tmp_path / run
        rc = main(
            [
                "train",
                "--config", str(tiny_config_file),
                "--data", str(tiny_dataset),
                "--out", str(out_dir),
                "--variant", "ce",
            ]
        )
        assert rc == 0
        outs.append(out_dir)

    a, b = outs
    for name in ("checkpoint_best.zip", "checkpoint_last.zip"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), f"{name} differs"
    log_a = _log_without_wall_time(a / "train_log.jsonl")
    log_b = _log_without_wall_time(b / "train_log.jsonl")
    assert log_a == log_b, "training logs differ beyond wall time"
    return "two runs byte-identical (checkpoints exact, logs equal modulo wall time)"
