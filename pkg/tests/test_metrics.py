import json

import numpy as np
import pytest
from PIL import Image

from jointsod.core import DataError
from jointsod.metrics import (
    MetricReport,
    combine_s,
    e_measure,
    evaluate_dirs,
    f_measure,
    f_score,
    mae,
    s_measure,
    s_measure_parts,
)


def _mae_loop(p, g):
    total = 0.0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            total += abs(g[i, j] - p[i, j])
    return total / p.size


def _f_loop(p, g):
    """Confusion counts by explicit pixel loops at every threshold k/255."""
    scores = []
    for k in range(1, 256):
        t = k / 255
        tp = fp = fn = 0
        for pv, gv in zip(p.ravel(), g.ravel()):
            hit = pv >= t
            if hit and gv:
                tp += 1
            elif hit:
                fp += 1
            elif gv:
                fn += 1
        denom = tp + 0.5 * (fp + fn)
        scores.append(1.0 if denom == 0 else tp / denom)
    return sum(scores) / len(scores)


def _instances(n=100, size=16, seed=0):
    g = np.random.default_rng(seed)
    for _ in range(n):
        y = (g.random((size, size)) < g.uniform(0.1, 0.9)).astype(float)
        # mixture of continuous maps and quantised 8-bit ones to exercise threshold edges
        p = g.random((size, size))
        if g.random() < 0.5:
            p = np.round(p * 255) / 255
        yield p, y


def test_mae_and_f_match_brute_force():
    for p, y in _instances():
        assert mae(p, y) == pytest.approx(_mae_loop(p, y), abs=1e-12)
        assert f_measure(p, y) == pytest.approx(_f_loop(p, y), abs=1e-9)


def test_mae_examples():
    y = (np.arange(16).reshape(4, 4) % 3 == 0).astype(float)
    assert mae(y, y) == 0.0
    assert mae(1 - y, y) == 1.0
    with pytest.raises(ValueError):
        mae(np.zeros((2, 2)), np.zeros((2, 3)))


def test_mae_complement_symmetry(rng):
    p, y = rng.random((9, 7)), (rng.random((9, 7)) > 0.5).astype(float)
    assert mae(p, y) == mae(1 - p, 1 - y)


def test_f_examples():
    assert f_score(2, 1, 1) == pytest.approx(2 / 3)
    assert f_score(0, 0, 0) == 1.0
    y = np.zeros((8, 8))
    y[2:5, 3:7] = 1
    assert f_measure(y, y) == 1.0
    assert f_measure(np.zeros_like(y), y) == 0.0
    assert f_measure(np.zeros_like(y), np.zeros_like(y)) == 1.0


def test_mae_and_f_permutation_equivariant(rng):
    for p, y in _instances(10, seed=5):
        perm = rng.permutation(p.size)
        ps, ys = p.ravel()[perm].reshape(p.shape), y.ravel()[perm].reshape(y.shape)
        assert mae(ps, ys) == pytest.approx(mae(p, y), abs=1e-15)
        assert f_measure(ps, ys) == f_measure(p, y)


def test_e_measure_hand_case_and_degenerate_rules():
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    # threshold min(2 * 0.5, 1) = 1 keeps the map; centred maps are +-0.5,
    # alignment 2 * 0.25 / 0.5 = 1, enhanced (1 + 1)^2 / 4 = 1
    assert e_measure(y, y) == pytest.approx(1.0, abs=1e-12)
    z = np.zeros((4, 4))
    assert e_measure(z, z) == 1.0
    assert e_measure(np.ones((4, 4)), z) == 0.0
    assert e_measure(np.ones((4, 4)), np.ones((4, 4))) == 1.0
    assert e_measure(z, np.ones((4, 4))) == 0.0


def _s_region_hand(p, g):
    """Quadrant split at the 1-based rounded centroid, weights by area."""
    ys, xs = np.nonzero(g)
    cx, cy = int(np.round(xs.mean())) + 1, int(np.round(ys.mean())) + 1
    h, w = g.shape
    cx, cy = min(cx, w), min(cy, h)
    total = 0.0
    for rs, cs in [(slice(0, cy), slice(0, cx)), (slice(0, cy), slice(cx, w)), (slice(cy, h), slice(0, cx)), (slice(cy, h), slice(cx, w))]:
        a, b = p[rs, cs].ravel(), g[rs, cs].ravel()
        if a.size == 0:
            continue
        n = a.size
        x, yv = a.mean(), b.mean()
        sx = ((a - x) ** 2).sum() / max(n - 1, 1)
        sy = ((b - yv) ** 2).sum() / max(n - 1, 1)
        sxy = ((a - x) * (b - yv)).sum() / max(n - 1, 1)
        num, den = 4 * x * yv * sxy, (x * x + yv * yv) * (sx + sy)
        ssim = num / (den + np.finfo(float).eps) if num != 0 else (1.0 if den == 0 else 0.0)
        total += a.size / g.size * ssim
    return total


def test_s_measure_perfect_prediction():
    g = np.random.default_rng(11)
    for size in (4, 16):
        for _ in range(25):
            y = (g.random((size, size)) > 0.5).astype(float)
            if 0 < y.sum() < y.size:
                assert s_measure(y, y) == pytest.approx(1.0, abs=1e-6)
                assert e_measure(y, y) == pytest.approx(1.0, abs=1e-6)


def test_s_measure_region_part_matches_hand_oracle(rng):
    for _ in range(20):
        y = (rng.random((6, 5)) > 0.5).astype(float)
        if not 0 < y.sum() < y.size:
            continue
        p = rng.random((6, 5))
        assert s_measure_parts(p, y)[1] == pytest.approx(_s_region_hand(p, y), abs=1e-12)


def test_s_measure_degenerate_and_weighting():
    z = np.zeros((5, 5))
    assert s_measure(z, z) == 1.0
    assert s_measure(np.ones((5, 5)), z) == 0.0
    assert s_measure(np.ones((5, 5)), np.ones((5, 5))) == 1.0
    assert combine_s(1.0, 0.0) == 0.5
    assert combine_s(-1.0, -0.5) == 0.0


def test_all_metrics_bounded(rng):
    for p, y in _instances(30, seed=9):
        for fn in (mae, f_measure, e_measure, s_measure):
            v = fn(p, y)
            assert np.isfinite(v) and 0.0 <= v <= 1.0


def _save(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="L").save(path)


def test_evaluate_dirs_identity_and_table(tmp_path, rng):
    for i in range(3):
        y = np.zeros((16, 16))
        y[i : i + 6, 3:12] = 255
        _save(tmp_path / "gt" / f"im{i}.png", y)
    rep = evaluate_dirs(tmp_path / "gt", tmp_path / "gt")
    agg = rep.aggregate
    assert agg["s_alpha"] == pytest.approx(1.0, abs=1e-6)
    assert agg["f_beta"] == 1.0 and agg["e_xi"] == pytest.approx(1.0) and agg["mae"] == 0.0
    lines = rep.table().splitlines()
    assert lines[0].split() == ["id", "S_alpha", "F_beta", "E_xi", "M"]
    assert [l.split()[0] for l in lines[1:]] == ["im0", "im1", "im2", "mean"]


def test_evaluate_dirs_names_missing_ids(tmp_path):
    y = np.zeros((8, 8))
    for stem in ("a", "b"):
        _save(tmp_path / "gt" / f"{stem}.png", y)
    _save(tmp_path / "pred" / "a.png", y)
    with pytest.raises(DataError, match="'b'"):
        evaluate_dirs(tmp_path / "pred", tmp_path / "gt")


def test_report_jsonl_roundtrip(tmp_path, rng):
    rep = MetricReport()
    for i in range(3):
        rep.add(f"x{i}", rng.random((8, 8)), (rng.random((8, 8)) > 0.5).astype(float))
    rep.write(tmp_path / "m.jsonl")
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    assert len(lines) == 4 and "aggregate" in json.loads(lines[-1])
    back = MetricReport.read(tmp_path / "m.jsonl")
    assert back.per_image == rep.per_image and back.aggregate == rep.aggregate
