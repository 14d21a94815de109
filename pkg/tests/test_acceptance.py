"""Acceptance suite: one PASS/FAIL line per criterion.

The lines are collected in ``REPORT`` and printed in the terminal summary
(see ``conftest.py``). Run this file directly to print them without pytest.

The two variant-comparison criteria train three detectors for each of five
seeds and dominate the runtime (roughly 10-12 minutes per seed on one
core). Set ``STDET_ACCEPT_SEEDS`` to a comma-separated list to run fewer.
"""

import math
import os
import time

import numpy as np
import pytest

import eval_oracle
from conftest import t64
from test_evaluation import random_scene
from test_geometry import nms_reference
from stdet import numkit as nk
from stdet.attention import CbamParams, cbam, init_cbam
from stdet.cli import main
from stdet.data import VideoRecord, window_starts
from stdet.detector import ModelConfig, assign_targets, build_model, detection_loss, forward
from stdet.evaluation import COLUMNS, IOU_THRESHOLDS, emit_table, map_range
from stdet.experiments import Protocol, run_seed
from stdet.geometry import NormBox, PixelBox, iou, nms, norm_to_pixel, pixel_to_norm
from stdet.temporal import GATES, ConvLstmParams, ConvLstmState, convlstm_cell, convlstm_rollout, init_convlstm

REPORT: list[str] = []
SEEDS = [int(s) for s in os.environ.get("STDET_ACCEPT_SEEDS", "0,1,2,3,4").split(",")]
INSTANCES = 20


def report(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    REPORT.append(line)
    print(line)
    assert ok, line


# -- gradient suite ---------------------------------------------------------------------


def _lstm(ps):
    return ConvLstmParams(dict(zip(GATES, ps[0:4])), dict(zip(GATES, ps[4:8])), dict(zip(GATES, ps[8:12])))


def _grad_cases():
    """name -> (tolerance, builder(rng) -> (fn, inputs, kwargs))."""
    def conv(rng):
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        x, w, b = t64(rng.standard_normal((2, 3, 6, 6))), t64(rng.standard_normal((4, 3, 3, 3))), t64(rng.standard_normal(4))
        return (lambda x, w, b: nk.conv2d(x, w, b, stride, pad)), [x, w, b], {}

    def pool(mode):
        def build(rng):
            x = t64(rng.standard_normal((2, 3, 6, 6)))
            return (lambda x: nk.pool2d(x, mode, 2)), [x], {}
        return build

    def act(kind):
        def build(rng):
            x = t64(rng.standard_normal((3, 5)) * 2)
            return (lambda x: nk.activation(x, kind)), [x], {}
        return build

    def linear(rng):
        x, w, b = t64(rng.standard_normal((4, 5))), t64(rng.standard_normal((3, 5))), t64(rng.standard_normal(3))
        return nk.linear, [x, w, b], {}

    def group_norm(rng):
        x = t64(rng.standard_normal((2, 4, 3, 3)) * 2 + 1)
        w, b = t64(rng.standard_normal(4)), t64(rng.standard_normal(4))
        return (lambda x, w, b: nk.mul(nk.group_norm(x, w, b, 2), t64(np.arange(72.0).reshape(2, 4, 3, 3) / 72))), \
            [x, w, b], {}

    def cbam_case(rng):
        p = init_cbam(4, rng, reduction=2, kernel_size=3, dtype=np.float64)
        F = t64(rng.standard_normal((2, 4, 5, 5)))
        return (lambda F, a, b, c: cbam(F, CbamParams(a, b, c, 2))), [F, *p.parameters()], {}

    def cell(rng):
        p = init_convlstm(2, 2, rng, dtype=np.float64)
        for q in p.parameters():
            q.data[...] = rng.standard_normal(q.shape) * 0.5
        x, h, c = (t64(rng.standard_normal((1, 2, 4, 4))) for _ in range(3))
        return (lambda x, h, c, *ps: convlstm_cell(x, ConvLstmState(h, c), _lstm(ps)).h), [x, h, c, *p.parameters()], {}

    def rollout(rng):
        p = init_convlstm(2, 2, rng, dtype=np.float64)
        seq = [t64(rng.standard_normal((1, 2, 3, 3))) for _ in range(3)]
        return (lambda a, b, c, *ps: convlstm_rollout([a, b, c], _lstm(ps))[-1].h), [*seq, *p.parameters()], {}

    def loss(rng):
        cfg = ModelConfig(width=4, num_classes=3, image_size=32)
        labels = [[NormBox(*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.2, 0.6, 2), int(rng.integers(3)))] for _ in range(2)]
        tg = assign_targets(labels, cfg)
        raw = [t64(rng.standard_normal((2, 24, 32 // s, 32 // s))) for s in cfg.strides]
        return (lambda *r: detection_loss(list(r), tg, cfg)[0]), raw, {}

    def micro(rng):
        cfg = ModelConfig(variant="temporal_cbam", width=4, num_classes=2, image_size=64, window=3)
        m = build_model(cfg, rng, dtype=np.float64)
        x = rng.random((1, 3, 3, 64, 64))
        tg = assign_targets([[NormBox(*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.15, 0.5, 2), int(rng.integers(2)))]], cfg)
        return (lambda *ps: detection_loss(forward(m, x), tg, cfg)[0]), m.parameters(), \
            {"max_elements": 24, "rng": np.random.default_rng(int(rng.integers(2**31)))}

    prim = 1e-6
    return {
        "conv2d": (prim, conv),
        "pool2d max": (prim, pool("max")),
        "pool2d avg": (prim, pool("avg")),
        **{f"activation {k}": (prim, act(k)) for k in ("relu", "silu", "sigmoid", "tanh", "leaky_relu")},
        "linear": (prim, linear),
        "group norm": (prim, group_norm),
        "CBAM": (1e-4, cbam_case),
        "ConvLSTM cell": (1e-4, cell),
        "ConvLSTM 3-step roll-out": (1e-4, rollout),
        "detection loss": (1e-4, loss),
        "temporal_cbam micro-model": (1e-4, micro),
    }


def test_gradient_suite():
    t0 = time.perf_counter()
    worst, failures = {}, []
    for name, (tol, build) in _grad_cases().items():
        rng = np.random.default_rng(sum(map(ord, name)))
        errs = []
        for _ in range(INSTANCES):
            fn, inputs, kw = build(rng)
            errs.append(nk.grad_check(fn, inputs, **kw))
        worst[name] = max(errs)
        if worst[name] >= tol:
            failures.append(f"{name} {worst[name]:.1e} >= {tol:.0e}")
    secs = time.perf_counter() - t0
    ok = not failures and secs < 300
    detail = f"{len(worst)} ops x {INSTANCES} instances, worst {max(worst.values()):.1e}, {secs:.0f}s"
    report("gradient suite", ok, detail + ("; " + ", ".join(failures) if failures else ""))


# -- analytic fixtures ------------------------------------------------------------------


def test_analytic_fixtures():
    rng = np.random.default_rng(0)
    checks = {}
    p = init_cbam(8, rng, reduction=4, dtype=np.float64)
    for q in p.parameters():
        q.data[...] = 0
    F = rng.standard_normal((2, 8, 6, 6))
    checks["CBAM zero params = 0.25 F"] = np.array_equal(cbam(t64(F), p).data, 0.25 * F)

    lp = init_convlstm(3, 3, rng, dtype=np.float64)
    for q in lp.parameters():
        q.data[...] = 0
    z = t64(np.zeros((1, 3, 4, 4)))
    s = convlstm_cell(z, ConvLstmState(t64(np.zeros((1, 3, 4, 4))), t64(np.zeros((1, 3, 4, 4)))), lp)
    checks["ConvLSTM zero fixed point"] = not s.h.data.any() and not s.c.data.any()

    lp.b["i"].data[...] = 10.0
    lp.b["c"].data[...] = 10.0
    s = convlstm_cell(t64(rng.standard_normal((1, 3, 4, 4))), ConvLstmState(t64(np.zeros((1, 3, 4, 4))), t64(np.zeros((1, 3, 4, 4)))), lp)
    checks["saturated ConvLSTM = 0.3808"] = bool(np.all(np.abs(s.h.data - 0.3808) < 1e-4))

    checks["sigmoid(0) = 0.5"] = float(nk.sigmoid(t64(np.zeros(1))).data[0]) == 0.5

    counts = [(n, t, len(window_starts(n, t))) for n in range(0, 30) for t in range(1, 6)]
    checks["window count N-T+1"] = all(c == max(n - t + 1, 0) for n, t, c in counts)
    bad = [k for k, v in checks.items() if not v]
    report("analytic fixtures", not bad, f"{len(checks) - len(bad)}/{len(checks)} hold" + (f"; failed {bad}" if bad else ""))


# -- evaluator oracle ---------------------------------------------------------------------


def test_evaluator_oracle():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(200):
        dets, gts = random_scene(rng, max_boxes=5)
        res = map_range(dets, gts)
        m50, m5095 = eval_oracle.evaluate(dets, gts, IOU_THRESHOLDS)
        worst = max(worst, abs(res.map50 - m50), abs(res.map50_95 - m5095))
    _, gts = random_scene(np.random.default_rng(1))
    perfect = {k: [PixelBox(b.x1, b.y1, b.x2, b.y2, b.class_id, 0.9) for b in v] for k, v in gts.items()}
    pr = map_range(perfect, gts)
    ok = worst < 1e-9 and pr.map50 == 1.0 and pr.map50_95 == 1.0 and len(IOU_THRESHOLDS) == 10
    report("evaluator oracle", ok, f"200 scenes, max |diff| {worst:.1e}; perfect scene {pr.map50}/{pr.map50_95}; "
                                   f"{len(IOU_THRESHOLDS)} thresholds")


# -- geometry oracles ---------------------------------------------------------------------


def test_geometry_oracles():
    a = PixelBox(0, 0, 2, 2)
    hand = iou(a, a) == 1.0 and iou(a, PixelBox(5, 5, 6, 6)) == 0.0 and abs(iou(a, PixelBox(1, 0, 3, 2)) - 1 / 3) < 1e-15
    nms_ok = True
    for seed in range(50):
        rng = np.random.default_rng(seed)
        xy, wh = rng.uniform(0, 100, (50, 2)), rng.uniform(5, 40, (50, 2))
        conf = rng.permutation(50) / 50 + 0.01
        dets = [PixelBox(x, y, x + w, y + h, int(c), float(s)) for (x, y), (w, h), c, s in zip(xy, wh, rng.integers(0, 3, 50), conf)]
        nms_ok &= nms(dets, 0.45, 0.25) == nms_reference(dets, 0.45, 0.25)
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        b = NormBox(*rng.uniform(0.05, 0.95, 2), *rng.uniform(0.01, 0.1, 2), 1)
        w, h = int(rng.integers(16, 2000)), int(rng.integers(16, 2000))
        back = pixel_to_norm(norm_to_pixel(b, w, h), w, h)
        worst = max(worst, abs(back.cx - b.cx), abs(back.cy - b.cy), abs(back.w - b.w), abs(back.h - b.h))
    report("geometry oracles", hand and nms_ok and worst < 1e-9,
           f"IoU hand cases {'ok' if hand else 'wrong'}; NMS = reference on 50 sets: {nms_ok}; round trip {worst:.1e}")


# -- determinism --------------------------------------------------------------------------


def _tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_determinism(tmp_path):
    (tmp_path / "synth.yaml").write_text("synth:\n  n_videos: 3\n  frames: 12\n  size: 64\n")
    (tmp_path / "train.yaml").write_text("model:\n  width: 4\n  image_size: 64\n  variant: temporal_cbam\n"
                                         "train:\n  epochs: 2\n  steps_per_epoch: 2\n  batch_size: 2\n")
    same = {}
    for cmd in ("synth", "train", "eval", "analyze"):
        outs = []
        for k in range(2):
            out = tmp_path / f"{cmd}{k}"
            data = tmp_path / "synth0"
            args = {
                "synth": ["synth", "--config", str(tmp_path / "synth.yaml"), "--seed", "5"],
                "train": ["train", "--config", str(tmp_path / "train.yaml"), "--data", str(data), "--seed", "5"],
                "eval": ["eval", "--checkpoint", str(tmp_path / "train0" / "last.ckpt"), "--data", str(data)],
                "analyze": ["analyze", "--checkpoint", str(tmp_path / "train0" / "last.ckpt"), "--data", str(data),
                            "--video", "video_001", "--frames", "0-4", "--conf", "0.01"],
            }[cmd]
            assert main(args + ["--out", str(out)]) == 0
            outs.append(_tree(out))
        same[cmd] = outs[0] == outs[1] and bool(outs[0])
    report("determinism", all(same.values()), ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))


# -- table fidelity ---------------------------------------------------------------------


def test_table_fidelity(tmp_path):
    from pathlib import Path

    golden = (Path(__file__).parent / "fixtures" / "table_golden.csv").read_text()
    from test_evaluation import GOLDEN_INPUT

    rendered = emit_table(GOLDEN_INPUT).to_csv()
    # the eval command itself, on a tiny dataset
    (tmp_path / "s.yaml").write_text("synth:\n  n_videos: 3\n  frames: 6\n  size: 64\n")
    assert main(["synth", "--config", str(tmp_path / "s.yaml"), "--out", str(tmp_path / "d")]) == 0
    from stdet.detector import save_checkpoint

    save_checkpoint(tmp_path / "m.ckpt", build_model(ModelConfig(width=4, image_size=64, num_classes=3), 0))
    assert main(["eval", "--checkpoint", str(tmp_path / "m.ckpt"), "--data", str(tmp_path / "d"), "--out", str(tmp_path / "e")]) == 0
    lines = (tmp_path / "e" / "metrics.csv").read_text().splitlines()
    ok = rendered == golden and tuple(lines[0].split(",")) == COLUMNS and lines[1].startswith("all,")
    report("table fidelity", ok, f"golden CSV {'matches' if rendered == golden else 'DIFFERS'}; eval header {lines[0]}")


# -- variant comparisons ------------------------------------------------------------------


@pytest.fixture(scope="module")
def sweep():
    results = {}
    for seed in SEEDS:
        results[seed] = run_seed(seed, Protocol(), log=lambda r: print(
            f"  seed {r.seed} {r.variant:<13} mAP50 {r.map50:.3f} mAP50-95 {r.map50_95:.3f} "
            f"occluded conf {r.occluded_confidence:.3f} ({r.steps} steps, {r.seconds:.0f}s)", flush=True))
    return results


def _needed() -> int:
    return math.ceil(0.8 * len(SEEDS))


def test_h1_temporal_beats_baseline(sweep):
    pairs = [(s, r["temporal"].map50_95, r["baseline"].map50_95) for s, r in sweep.items()]
    wins = sum(t > b for _, t, b in pairs)
    slow = max(r[v].seconds for r in sweep.values() for v in r)
    need = _needed()
    detail = f"temporal > baseline mAP50-95 in {wins}/{len(pairs)} seeds (need {need}); " + \
        ", ".join(f"s{s}: {t:.3f} vs {b:.3f}" for s, t, b in pairs) + f"; slowest run {slow:.0f}s"
    report("H1 temporal vs baseline", wins >= need and slow <= 600, detail)


def test_h2_occlusion_confidence(sweep):
    pairs = [(s, r["temporal_cbam"].occluded_confidence, r["baseline"].occluded_confidence) for s, r in sweep.items()]
    wins = sum(t > b for _, t, b in pairs)
    need = _needed()
    detail = f"temporal_cbam > baseline occluded confidence in {wins}/{len(pairs)} seeds (need {need}); " + \
        ", ".join(f"s{s}: {t:.3f} vs {b:.3f}" for s, t, b in pairs)
    report("H2 occlusion confidence", wins >= need, detail)


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
