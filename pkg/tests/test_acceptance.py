"""End-to-end acceptance checks, one test per criterion.

Each test carries a ``criterion`` marker; the session summary prints a
PASS/FAIL line for every criterion (see conftest.py). The granularity
ablation trains 24 regressors at full size and takes most of the runtime.
"""
import csv
import filecmp
import json
import math
import time

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from densereg.atlas import TemplateMesh, classical_mds, patch_mds_coordinates
from densereg.cli import run
from densereg.codec import (
    LossConfig,
    decode_hard,
    decode_soft,
    encode,
    loss_classification,
    loss_residual,
)
from densereg.evaluation import best_detections, ced_auc, ced_metrics, extract_landmarks, iou, pck
from densereg.raster import rasterize
from densereg.regressor import (
    CascadeModel,
    TinyFCN,
    TrainConfig,
    heatmap_loss,
    make_batch,
    oracle_heads,
    stage2_probe,
    train,
)
from densereg.regressor.model import dense_loss
from densereg.supervision import tps_apply, tps_fit
from densereg.synth import SynthParams, synth_dataset

from test_atlas import plane_grid, procrustes_residual
from test_codec import TIE_GAP, soft_oracle
from test_evaluation import riemann_auc
from test_raster import _cramer_bary, brute_force, random_scene
from test_regressor import check_grads, random_targets, small_model

criterion = pytest.mark.criterion


def ok(argv):
    status, out, err = run(argv)
    assert status == 0, err
    return out


@criterion("codec exactness")
def test_codec_exactness():
    grid = np.linspace(0.0, 1.0, 10001)
    start = time.perf_counter()
    for K in (1, 2, 4, 8, 10, 40):
        q, r = encode(grid, K)
        bank = np.zeros((len(grid), K))
        np.put_along_axis(bank, q[:, None], r[:, None], axis=1)
        assert np.max(np.abs(decode_hard(q, bank, K) - grid)) <= 1e-12
    assert time.perf_counter() - start < 1.0


@criterion("soft decoding equivalence")
def test_soft_decoding_equivalence():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        K = int(rng.integers(1, 41))
        logits = rng.normal(0, 3, K)
        bank = rng.uniform(-0.1, 0.2, K)
        got = decode_soft(logits[None], bank[None], K)[0]
        assert abs(got - soft_oracle(list(logits), list(bank), K)) < 1e-12
    checked = 0
    for _ in range(1000):
        K = int(rng.integers(2, 41))
        logits = rng.normal(0, 1, K)
        top2 = np.sort(logits)[-2:]
        if top2[1] - top2[0] < TIE_GAP:
            continue
        bank = rng.uniform(0, 1.0 / K, K)
        hard = decode_hard(np.array([logits.argmax()]), bank[None], K)[0]
        assert abs(decode_soft(100.0 * logits[None], bank[None], K)[0] - hard) < 1e-8
        checked += 1
    assert checked > 300


@criterion("gradient suite")
def test_gradient_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    K = 4
    logits = rng.normal(size=(2, 8, 8, K))
    bins = rng.integers(0, K, (2, 8, 8))
    mask = rng.random((2, 8, 8)) < 0.7
    _, g = loss_classification(logits, bins, mask)
    check_grads(lambda: loss_classification(logits, bins, mask)[0], {"logits": logits}, {"logits": g})

    bank = rng.normal(0, 0.5, (2, 8, 8, K))
    res = rng.uniform(0, 1.0 / K, (2, 8, 8))
    _, g = loss_residual(bank, res, bins, mask, 40.0)
    check_grads(lambda: loss_residual(bank, res, bins, mask, 40.0)[0], {"bank": bank}, {"bank": g})
    responsible = np.zeros(bank.shape, dtype=bool)
    np.put_along_axis(responsible, bins[..., None], True, axis=-1)
    assert np.all(g[~(responsible & mask[..., None])] == 0.0)

    pred = rng.normal(size=(2, 8, 8, 3))
    target = rng.random((2, 8, 8, 3))
    _, g = heatmap_loss(pred, target)
    check_grads(lambda: heatmap_loss(pred, target)[0], {"pred": pred}, {"pred": g})

    m = small_model(K=2)
    x = rng.random((1, 8, 8, 3))
    t = random_targets(rng, 1, 8, 8, 2)
    cfg = LossConfig()
    _, out, cache = m.forward(x)
    _, _, gh = dense_loss(out, t, 2, cfg)
    check_grads(lambda: dense_loss(m.forward(x)[1], t, 2, cfg)[0], m.params, m.backward(cache, gh))
    assert time.perf_counter() - start < 120.0


@criterion("rasterizer oracle")
def test_rasterizer_oracle():
    for seed in range(50):
        pts, faces, W, H = random_scene(seed)
        uv = np.random.default_rng(seed).random((len(pts), 2))
        buf = rasterize(pts, faces, W, H)
        f_ref, d_ref = brute_force(pts, faces, W, H)
        assert np.array_equal(buf.mask, f_ref >= 0) and np.array_equal(buf.depth, d_ref)
        for r, c in zip(*np.nonzero(buf.mask)):
            tri = faces[buf.face[r, c]]
            ref = _cramer_bary(pts[tri], c + 0.5, r + 0.5) @ uv[tri]
            assert np.max(np.abs(buf.bary[r, c] @ uv[tri] - ref)) < 1e-9


@criterion("MDS flattening")
def test_mds_flattening():
    pts2, faces = plane_grid()
    for seed in range(5):
        R = Rotation.random(random_state=seed).as_matrix()
        verts = np.column_stack([pts2, np.zeros(len(pts2))]) @ R.T + seed
        mesh = TemplateMesh(verts, faces, np.zeros(len(verts), dtype=int))
        assert procrustes_residual(patch_mds_coordinates(mesh, np.arange(len(verts))), pts2) < 1e-8
    d = np.linalg.norm(pts2[:, None] - pts2[None], axis=-1)
    assert procrustes_residual(classical_mds(d)[0], pts2) < 1e-8


@criterion("thin-plate spline")
def test_thin_plate_spline():
    rng = np.random.default_rng(5)
    for _ in range(20):
        src = rng.uniform(0, 1, (int(rng.integers(3, 40)), 2))
        dst = rng.uniform(0, 1, src.shape)
        assert np.abs(tps_apply(tps_fit(src, dst), src) - dst).max() < 1e-9
        A = rng.normal(size=(2, 2)) + 2 * np.eye(2)
        assert np.abs(tps_fit(src, src @ A.T + rng.normal(size=2)).weights).max() < 1e-9


@criterion("landmark extraction")
def test_landmark_extraction():
    from test_evaluation import TestExtraction

    from densereg.synth import head_landmarks

    lms = head_landmarks()
    checked = 0
    for seed in range(4):
        for s in synth_dataset(100 + seed, 16, SynthParams(noise=0.0)):
            pos, found = best_detections(extract_landmarks(s.field, lms))
            for i in np.flatnonzero(s.visible):
                assert found[i] and math.hypot(*(pos[i] - s.landmarks[i])) <= 1.0
                checked += 1
    assert checked > 200
    TestExtraction().test_occluded_uv_not_found()


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    out = tmp_path_factory.mktemp("ablation") / "sweep.csv"
    start = time.perf_counter()
    ok(["sweep", "--k", "1,2,4,8", "--seeds", "3", "--train-count", "256", "--test-count", "64", "--size", "64",
        "--quiet", "--out", str(out)])
    rows = list(csv.DictReader(open(out)))
    return rows, time.perf_counter() - start


def _median(rows, K, branch):
    return float(np.median([float(r["auc"]) for r in rows if int(r["K"]) == K and r["branch"] == branch]))


@criterion("central granularity ablation")
def test_central_ablation(ablation):
    rows, elapsed = ablation
    assert len(rows) == 24 and len({r["seed"] for r in rows}) == 3
    table = {(K, b): _median(rows, K, b) for K in (1, 2, 4, 8) for b in ("q", "q+r")}
    print("median AUC", {f"K={k} {b}": round(v, 4) for (k, b), v in table.items()}, f"{elapsed:.0f}s")
    assert table[8, "q+r"] > table[1, "q+r"]
    assert all(table[K, "q+r"] >= table[K, "q"] for K in (1, 2, 4, 8))
    assert elapsed < 30 * 60


def _probe_data(seed):
    data = make_batch(synth_dataset(seed, 32, SynthParams()), 8, with_heatmaps=True)
    stage1 = TinyFCN(8).init(np.random.default_rng(seed))
    cascade = CascadeModel(stage1, data["heatmap"].shape[-1])
    return data, cascade


@criterion("cascade privileged information")
def test_cascade_privileged_information():
    wins = 0
    for seed in range(3):
        data, cascade = _probe_data(seed)
        gt = oracle_heads(data, 8, 1, margin=1.0).stack()
        rng = np.random.default_rng(1000 + seed)
        mu = gt.mean(axis=(0, 1, 2))
        sd = gt.std(axis=(0, 1, 2))
        noise = mu + sd * rng.standard_normal(gt.shape)
        cfg = TrainConfig(seed=seed)
        with_gt = stage2_probe(cascade, data["image"], gt, data["heatmap"], cfg)[0]
        with_noise = stage2_probe(cascade, data["image"], noise, data["heatmap"], cfg)[0]
        print(f"seed {seed}: gt {with_gt:.5f} noise {with_noise:.5f}")
        wins += with_gt < with_noise
    assert wins == 3


@criterion("cascade joint training converges")
def test_cascade_joint_training_converges():
    data, cascade = _probe_data(0)
    _, log = train(cascade, data, TrainConfig(epochs=8, seed=0))
    for which in ("dense", "heat"):
        med = log.epoch_medians(which)
        print(which, [round(m, 5) for m in med])
        assert all(b < a for a, b in zip(med, med[1:])), (which, med)


@criterion("metric unit checks")
def test_metric_unit_checks():
    assert ced_metrics([0.05, 0.15])[2] == 50.0
    assert ced_auc([0.05]) == 0.5 and ced_auc([0.2, 0.3]) == 0.0
    per, _ = iou(np.array([1, 1, 0, 0]), np.array([0, 1, 1, 0]), [1])
    assert per[1] == 1 / 3
    r = pck(np.array([[[0.6, 0.0], [0.5, 0.0]]]), np.zeros((1, 2, 2)), [1.0], threshold=0.5)
    assert r.per_joint.tolist() == [0.0, 100.0] and r.overall == 50.0
    rng = np.random.default_rng(0)
    for _ in range(20):
        e = rng.exponential(0.05, int(rng.integers(1, 300)))
        assert abs(ced_auc(e) - riemann_auc(e)) < 1e-6


def _same_tree(a, b):
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    data = [n for n in names if not n.endswith("manifest.json")]
    _, mismatch, errors = filecmp.cmpfiles(a, b, data, shallow=False)
    return not mismatch and not errors


def _manifest_config(path):
    man = json.loads(path.read_text())
    man["config"].pop("out")
    return man


@criterion("determinism")
def test_determinism(tmp_path):
    for name in ("a", "b"):
        d = tmp_path / name
        ok(["synth", "--seed", "3", "--count", "6", "--out", str(d / "data")])
        ok(["train", "--data", str(d / "data"), "--epochs", "2", "--out", str(d / "model" / "m.drm")])
    a, b = tmp_path / "a", tmp_path / "b"
    assert _same_tree(a / "data", b / "data") and _same_tree(a / "model", b / "model")
    assert _manifest_config(a / "data" / "manifest.json") == _manifest_config(b / "data" / "manifest.json")
