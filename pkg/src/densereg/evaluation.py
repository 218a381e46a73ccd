"""Landmark extraction, CED/AUC, IoU, PCK and the quantization-granularity sweep."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .codec import decode_quantized_only
from .fields import CorrespondenceField
from .supervision import LandmarkSet

__all__ = [
    "Detection",
    "extract_landmarks",
    "best_detections",
    "CEDCurve",
    "ced_metrics",
    "ced_auc",
    "iou",
    "pck",
    "PCKResult",
    "uv_errors",
    "granularity_sweep",
    "SweepResult",
    "write_ced_csv",
    "write_sweep_csv",
    "AUC_MAX",
]

AUC_MAX = 0.1
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class Detection:
    """One component's detection: refined position ``(x, y)``, winning pixel, UV distance."""

    x: float
    y: float
    distance: float
    row: int = -1
    col: int = -1


def _refine(field, valid, r, c, target):
    """Sub-pixel position from an affine fit of (u, v) over the chart's pixels in a 3x3 window.

    Returns the pixel centre when fewer than three non-collinear neighbours
    exist or the solved offset leaves the window's outer pixel edges.
    """
    r0, r1 = max(r - 1, 0), min(r + 2, field.height)
    c0, c1 = max(c - 1, 0), min(c + 2, field.width)
    rr, cc = np.nonzero(valid[r0:r1, c0:c1])
    rr, cc = rr + r0, cc + c0
    centre = (c + 0.5, r + 0.5)
    if len(rr) < 3:
        return centre
    A = np.column_stack([np.ones(len(rr)), cc - c, rr - r])
    if np.linalg.matrix_rank(A) < 3:
        return centre
    B = np.column_stack([field.u[rr, cc], field.v[rr, cc]])
    coef, *_ = np.linalg.lstsq(A, B, rcond=None)
    J = coef[1:].T  # d(u, v) / d(x, y)
    if abs(np.linalg.det(J)) < 1e-12:
        return centre
    dx, dy = np.linalg.solve(J, np.asarray(target) - coef[0])
    if not (abs(dx) <= 1.5 and abs(dy) <= 1.5):
        return centre
    return c + 0.5 + dx, r + 0.5 + dy


def extract_landmarks(field: CorrespondenceField, landmarks: LandmarkSet, tau=0.04, refine=True):
    """Detect template landmarks in a dense field.

    For each landmark, pixels of the same chart whose (u, v) lies within
    ``tau`` of the landmark's coordinates are grouped into 8-connected
    components; each component yields one detection at its closest pixel
    (first in row-major order on ties). Returns one list of
    :class:`Detection` per landmark, empty when nothing passes ``tau``.
    ``row``/``col`` give the winning pixel; with ``refine`` the position is
    moved off its centre to where a local affine model of the chart's
    (u, v) hits the landmark, otherwise it is the pixel centre.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    out = []
    for lm in landmarks:
        dist = np.hypot(field.u - lm.u, field.v - lm.v)
        valid = field.mask & (field.patch == lm.patch)
        dist = np.where(valid, dist, np.inf)
        near = dist <= tau
        dets = []
        if near.any():
            labels, n = ndimage.label(near, structure=EIGHT_CONNECTED)
            for c in range(1, n + 1):
                comp = np.where(labels == c, dist, np.inf)
                k = int(np.argmin(comp))
                r, col = divmod(k, field.width)
                x, y = _refine(field, valid, r, col, (lm.u, lm.v)) if refine else (col + 0.5, r + 0.5)
                dets.append(Detection(float(x), float(y), float(comp.flat[k]), r, col))
        out.append(dets)
    return out


def best_detections(detections):
    """Closest detection per landmark: ``(positions (L, 2), found (L,))``."""
    pos = np.full((len(detections), 2), np.nan)
    found = np.zeros(len(detections), dtype=bool)
    for i, dets in enumerate(detections):
        if dets:
            d = min(dets, key=lambda t: t.distance)
            pos[i] = d.x, d.y
            found[i] = True
    return pos, found


@dataclass(frozen=True)
class CEDCurve:
    errors: np.ndarray  # sorted
    thresholds: np.ndarray
    fractions: np.ndarray


def ced_auc(errors, max_error=AUC_MAX):
    """Exact area under the step CED over ``[0, max_error]``, divided by ``max_error``.

    Integrated by the trapezoid rule over the staircase vertices (each
    sorted error contributes a vertical step), with endpoints 0 and
    ``max_error``.
    """
    e = np.sort(np.asarray(errors, dtype=np.float64))
    n = len(e)
    inside = e[e <= max_error]
    xs = [0.0]
    ys = [float(np.sum(e <= 0.0)) / n]
    for i, x in enumerate(inside):
        if x <= 0.0:
            continue
        xs += [x, x]
        ys += [ys[-1], (np.searchsorted(e, x, side="right")) / n]
    xs.append(max_error)
    ys.append(ys[-1])
    return float(np.trapezoid(ys, xs) / max_error)


def ced_metrics(errors, thresholds=None, max_error=AUC_MAX):
    """CED curve, AUC over ``[0, max_error]`` and failure rate in percent.

    ``errors`` are per-sample normalized errors (already divided by the
    caller's normalizer, e.g. interocular distance). Failure means an error
    strictly above ``max_error``.
    """
    e = np.asarray(errors, dtype=np.float64).reshape(-1)
    if e.size == 0:
        raise ValueError("no errors to evaluate")
    if np.any(e < 0) or np.any(np.isnan(e)):
        raise ValueError("errors must be non-negative")
    if thresholds is None:
        thresholds = np.linspace(0.0, max_error, 101)
    thr = np.asarray(thresholds, dtype=np.float64)
    es = np.sort(e)
    frac = np.searchsorted(es, thr, side="right") / len(es)
    auc = ced_auc(es, max_error)
    failure = 100.0 * float(np.mean(e > max_error))
    return CEDCurve(es, thr, frac), auc, failure


def iou(pred, gt, classes):
    """Per-class intersection-over-union and their mean.

    Classes absent from both images are reported as NaN and left out of the
    mean.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    per = {}
    for c in classes:
        a, b = pred == c, gt == c
        union = np.sum(a | b)
        per[c] = float(np.sum(a & b) / union) if union else float("nan")
    vals = [v for v in per.values() if not np.isnan(v)]
    return per, (float(np.mean(vals)) if vals else float("nan"))


@dataclass(frozen=True)
class PCKResult:
    per_joint: np.ndarray  # percent, NaN where a joint is never evaluable
    overall: float
    missing: int


def pck(pred, gt, scale, threshold=0.5, visible=None):
    """Percentage of correct keypoints: ``|pred - gt| <= threshold * scale``.

    ``pred``/``gt`` are ``(N, J, 2)``; ``scale`` is ``(N,)`` (head-segment
    length for PCKh). Joints with NaN coordinates or ``visible == False``
    are excluded and counted in ``missing``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt shapes differ")
    if np.any(scale <= 0):
        raise ValueError("scale must be positive")
    valid = np.all(np.isfinite(pred), axis=-1) & np.all(np.isfinite(gt), axis=-1)
    if visible is not None:
        valid &= np.asarray(visible, dtype=bool)
    d = np.linalg.norm(np.nan_to_num(pred - gt), axis=-1)
    correct = (d <= threshold * scale[:, None]) & valid
    nvalid = valid.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        per = 100.0 * correct.sum(axis=0) / nvalid
    overall = 100.0 * correct.sum() / valid.sum() if valid.any() else float("nan")
    return PCKResult(per, float(overall), int((~valid).sum()))


def uv_errors(pred: CorrespondenceField, gt: CorrespondenceField):
    """Per-pixel Euclidean UV error on ground-truth foreground pixels.

    Pixels the prediction marks as background, or assigns to the wrong
    chart, count with an infinite error.
    """
    m = gt.mask
    e = np.hypot(pred.u - gt.u, pred.v - gt.v)
    e = np.where(pred.mask & (pred.patch == gt.patch), e, np.inf)
    return e[m]


def write_ced_csv(fp, curve: CEDCurve):
    w = csv.writer(fp, lineterminator="\n")
    w.writerow(["threshold", "fraction"])
    for t, f in zip(curve.thresholds, curve.fractions):
        w.writerow([f"{t:.9g}", f"{f:.9g}"])


@dataclass
class SweepResult:
    rows: list  # dicts: K, branch, seed, auc
    max_error: float = AUC_MAX

    def median(self, K, branch):
        vals = [r["auc"] for r in self.rows if r["K"] == K and r["branch"] == branch]
        return float(np.median(vals))

    def table(self):
        ks = sorted({r["K"] for r in self.rows})
        return {(k, b): self.median(k, b) for k in ks for b in ("q", "q+r")}


def write_sweep_csv(fp, result: SweepResult):
    w = csv.writer(fp, lineterminator="\n")
    w.writerow(["K", "branch", "seed", "auc"])
    for r in result.rows:
        w.writerow([r["K"], r["branch"], r["seed"], f"{r['auc']:.9g}"])


def _branch_errors(heads, data, K):
    """UV errors on ground-truth foreground for the q-only and q+r decodings."""
    from .codec import decode_hard

    m = data["mask"]
    u = data["qh"] * (1.0 / K) + data["rh"]
    v = data["qv"] * (1.0 / K) + data["rv"]
    qh = np.argmax(heads.logits_h, axis=-1)
    qv = np.argmax(heads.logits_v, axis=-1)
    uq, vq = decode_quantized_only(qh, K), decode_quantized_only(qv, K)
    ur = np.clip(decode_hard(qh, heads.res_h, K), 0.0, 1.0)
    vr = np.clip(decode_hard(qv, heads.res_v, K), 0.0, 1.0)
    return np.hypot(uq - u, vq - v)[m], np.hypot(ur - u, vr - v)[m]


def granularity_sweep(train_samples, test_samples, ks, config, seeds, model_kwargs=None,
                      max_error=AUC_MAX, progress=None):
    """Train one regressor per (K, seed) and score both decoding branches.

    The score is the AUC of the per-pixel UV-error CED over ``[0,
    max_error]`` on the test set's foreground pixels, for bin-centre decoding
    (``q``) and bin plus residual decoding (``q+r``). Every run shares the
    trunk shape, data and budget; only K and the seed vary.
    """
    from dataclasses import replace

    from .regressor import TinyFCN, forward, make_batch, train

    if 1 not in ks:
        raise ValueError("the sweep must include K=1 (plain regression)")
    model_kwargs = dict(model_kwargs or {})
    rows = []
    for K in ks:
        tr = make_batch(train_samples, K)
        te = make_batch(test_samples, K)
        for seed in seeds:
            model = TinyFCN(K, **model_kwargs)
            model, _ = train(model, tr, replace(config, seed=seed))
            heads = forward(model, te["image"])
            eq, eqr = _branch_errors(heads, te, K)
            for branch, e in (("q", eq), ("q+r", eqr)):
                rows.append({"K": K, "branch": branch, "seed": seed, "auc": ced_auc(e, max_error)})
            if progress:
                progress(K, seed, rows[-2:])
    return SweepResult(rows, max_error)
