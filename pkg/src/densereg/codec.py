"""Quantized regression codec.

A coordinate ``u`` in ``[0, 1]`` is split into a bin index ``q`` (one of ``K``
uniform bins of width ``d = 1/K``) and a residual ``r = u - q*d``. The network
predicts ``q`` with a K-way classifier and ``r`` with a bank of K residual
regressors, one per bin; only the regressor of the ground-truth bin is
penalized during training.

All functions operate on numpy arrays with arbitrary leading dimensions; the
last axis of logits/banks has length ``K``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "QuantizerConfig",
    "LossConfig",
    "QuantizedTarget",
    "EmptyMaskWarning",
    "encode",
    "decode_hard",
    "decode_soft",
    "decode_quantized_only",
    "softmax",
    "log_softmax",
    "smooth_l1",
    "loss_classification",
    "loss_residual",
    "encode_field",
]


class EmptyMaskWarning(UserWarning):
    """A loss was evaluated over an empty mask; the loss is reported as 0."""


@dataclass(frozen=True)
class QuantizerConfig:
    K: int
    P: int = 1

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"K must be a positive integer, got {self.K!r}")
        if int(self.P) != self.P or self.P < 1:
            raise ValueError(f"P must be a positive integer, got {self.P!r}")

    @property
    def d(self) -> float:
        return 1.0 / self.K


@dataclass(frozen=True)
class LossConfig:
    """Loss weights. ``w_res=None`` selects 40 for K>1 and 70 for K=1."""

    w_cls: float = 1.0
    w_res: float | None = None
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        if self.w_cls <= 0 or (self.w_res is not None and self.w_res <= 0):
            raise ValueError("loss weights must be positive")
        if self.smooth_l1_beta <= 0:
            raise ValueError("smooth-L1 threshold must be positive")

    def residual_weight(self, K: int) -> float:
        if self.w_res is not None:
            return float(self.w_res)
        return 70.0 if K == 1 else 40.0


def _check_K(K) -> int:
    if int(K) != K or K < 1:
        raise ValueError(f"K must be a positive integer, got {K!r}")
    return int(K)


def encode(u, K):
    """Split ``u`` into ``(q, r)`` with ``q = min(floor(u/d), K-1)``, ``r = u - q*d``.

    Scalars in, scalars out; arrays in, arrays out. ``u = 1`` falls in bin
    ``K-1`` with residual ``d``.
    """
    K = _check_K(K)
    arr = np.asarray(u, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError("u must lie in [0, 1]")
    d = 1.0 / K
    q = np.minimum(np.floor(arr * K), K - 1).astype(np.int64)
    # u*K can round across a bin edge; keep q*d <= u < (q+1)*d exactly
    q = np.where(q * d > arr, q - 1, q)
    q = np.where((q < K - 1) & ((q + 1) * d <= arr), q + 1, q)
    r = arr - q * d
    if arr.ndim == 0:
        return int(q), float(r)
    return q, r


def _check_bins(q, K):
    q = np.asarray(q)
    if not np.issubdtype(q.dtype, np.integer):
        if not np.all(np.equal(np.mod(q, 1), 0)):
            raise ValueError("bin indices must be integers")
        q = q.astype(np.int64)
    if np.any(q < 0) or np.any(q >= K):
        raise ValueError(f"bin index out of range [0, {K - 1}]")
    return q


def decode_hard(q, bank, K):
    """Reconstruct ``u = q*d + bank[q]``: the residual expert of the chosen bin."""
    K = _check_K(K)
    bank = np.asarray(bank, dtype=np.float64)
    if bank.shape[-1] != K:
        raise ValueError(f"residual bank must have length K={K}, got {bank.shape[-1]}")
    q = _check_bins(q, K)
    r = np.take_along_axis(bank, q[..., None], axis=-1)[..., 0]
    u = q * (1.0 / K) + r
    return float(u) if u.ndim == 0 else u


def softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def decode_soft(logits, bank, K):
    """Mixture-of-experts reconstruction ``sum_i softmax(logits)_i * (i*d + bank_i)``."""
    K = _check_K(K)
    logits = np.asarray(logits, dtype=np.float64)
    bank = np.asarray(bank, dtype=np.float64)
    if logits.shape[-1] != K or bank.shape[-1] != K:
        raise ValueError(f"logits and bank must have length K={K}")
    if not (np.all(np.isfinite(logits)) and np.all(np.isfinite(bank))):
        raise ValueError("non-finite logits or residuals")
    experts = np.arange(K) * (1.0 / K) + bank
    u = np.sum(softmax(logits) * experts, axis=-1)
    return float(u) if u.ndim == 0 else u


def decode_quantized_only(q, K):
    """Bin centre ``(q + 0.5) * d``; ignores the residual branch."""
    K = _check_K(K)
    q = _check_bins(q, K)
    u = (q + 0.5) * (1.0 / K)
    return float(u) if np.ndim(u) == 0 else u


def smooth_l1(x, beta=1.0):
    """Elementwise smooth-L1 and its derivative."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    quad = ax < beta
    val = np.where(quad, 0.5 * x * x / beta, ax - 0.5 * beta)
    grad = np.where(quad, x / beta, np.sign(x))
    return val, grad


def _mask_or_all(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ValueError(f"mask shape {mask.shape} does not match {shape}")
    return mask


def loss_classification(logits, targets, mask=None):
    """Masked mean softmax cross-entropy.

    Returns ``(loss, grad)`` where ``grad`` has the shape of ``logits``. Pixels
    outside ``mask`` contribute neither loss nor gradient. An empty mask gives
    loss 0 with an :class:`EmptyMaskWarning`.
    """
    logits = np.asarray(logits, dtype=np.float64)
    K = logits.shape[-1]
    mask = _mask_or_all(mask, logits.shape[:-1])
    grad = np.zeros_like(logits)
    n = int(mask.sum())
    if n == 0:
        warnings.warn("classification loss over an empty mask", EmptyMaskWarning, stacklevel=2)
        return 0.0, grad
    z = logits[mask]
    t = np.asarray(targets)[mask].astype(np.int64)
    if np.any(t < 0) or np.any(t >= K):
        raise ValueError(f"class target out of range [0, {K - 1}]")
    logp = log_softmax(z)
    rows = np.arange(n)
    loss = -float(np.sum(logp[rows, t])) / n
    g = np.exp(logp)
    g[rows, t] -= 1.0
    grad[mask] = g / n
    return loss, grad


def loss_residual(bank, targets, bins, mask=None, weight=1.0, beta=1.0):
    """Weighted, pixel-normalized smooth-L1 on the responsible residual expert.

    ``loss = weight * sum_masked smoothL1(bank[q] - r) / n_masked``. Only the
    entry ``bank[..., q]`` receives gradient.
    """
    bank = np.asarray(bank, dtype=np.float64)
    K = bank.shape[-1]
    mask = _mask_or_all(mask, bank.shape[:-1])
    grad = np.zeros_like(bank)
    n = int(mask.sum())
    if n == 0:
        warnings.warn("residual loss over an empty mask", EmptyMaskWarning, stacklevel=2)
        return 0.0, grad
    q = np.asarray(bins)[mask].astype(np.int64)
    if np.any(q < 0) or np.any(q >= K):
        raise ValueError(f"bin index out of range [0, {K - 1}]")
    rows = np.arange(n)
    pred = bank[mask][rows, q]
    val, dval = smooth_l1(pred - np.asarray(targets, dtype=np.float64)[mask], beta)
    loss = weight * float(np.sum(val)) / n
    g = np.zeros((n, K))
    g[rows, q] = weight * dval / n
    grad[mask] = g
    return loss, grad


@dataclass
class QuantizedTarget:
    """Per-pixel quantized regression targets for one image.

    ``patch`` is the chart index of every foreground pixel; ``qh/qv`` and
    ``rh/rv`` are the bin and residual of the horizontal/vertical coordinate.
    Background pixels hold zeros and are excluded by ``mask``.
    """

    K: int
    P: int
    mask: np.ndarray
    patch: np.ndarray
    qh: np.ndarray
    qv: np.ndarray
    rh: np.ndarray
    rv: np.ndarray

    @property
    def d(self) -> float:
        return 1.0 / self.K

    def decode(self):
        """Exact reconstruction of ``(u, v)`` from the targets."""
        return self.qh * self.d + self.rh, self.qv * self.d + self.rv

    def channel_layout(self) -> np.ndarray:
        """Stack the targets into ``P`` groups of (tessellation, U, V) channels.

        Returns an array of shape ``(3*P, H, W)``; 75 channels for a 25-chart
        body, 3 for a single-chart face. In group ``p`` the tessellation
        channel holds ``1 + qv*K + qh`` on pixels of chart ``p`` and 0
        elsewhere; U and V hold the coordinates there and 0 elsewhere.
        """
        H, W = self.mask.shape
        out = np.zeros((3 * self.P, H, W))
        u, v = self.decode()
        for p in range(self.P):
            sel = self.mask & (self.patch == p)
            out[3 * p][sel] = 1 + self.qv[sel] * self.K + self.qh[sel]
            out[3 * p + 1][sel] = u[sel]
            out[3 * p + 2][sel] = v[sel]
        return out

    def to_channels(self) -> dict:
        """DRF1 planes: ``MASK``, ``PTCH``, ``QH__``, ``QV__``, ``RH__``, ``RV__``."""
        return {
            "MASK": self.mask.astype(np.float64),
            "PTCH": self.patch.astype(np.float64),
            "QH__": self.qh.astype(np.float64),
            "QV__": self.qv.astype(np.float64),
            "RH__": self.rh,
            "RV__": self.rv,
        }

    @classmethod
    def from_channels(cls, ch: dict, K: int, P: int = 1) -> QuantizedTarget:
        # residuals go through float32 in the container; bins are exact
        mask = ch["MASK"] > 0.5
        as_int = lambda a: np.rint(a).astype(np.int64)  # noqa: E731
        return cls(K, P, mask, as_int(ch["PTCH"]), as_int(ch["QH__"]), as_int(ch["QV__"]),
                   np.asarray(ch["RH__"], dtype=np.float64), np.asarray(ch["RV__"], dtype=np.float64))


def encode_field(field, config: QuantizerConfig) -> QuantizedTarget:
    """Quantize a correspondence field into per-pixel classification/residual targets."""
    mask = np.asarray(field.mask, dtype=bool)
    u = np.where(mask, field.u, 0.0)
    v = np.where(mask, field.v, 0.0)
    patch = np.where(mask, field.patch, 0).astype(np.int64)
    if np.any(patch < 0) or np.any(patch >= config.P):
        raise ValueError(f"patch index out of range [0, {config.P - 1}]")
    try:
        qh, rh = encode(u, config.K)
        qv, rv = encode(v, config.K)
    except ValueError as exc:
        raise ValueError(f"field coordinates outside [0, 1]: {exc}") from None
    zero = ~mask
    qh[zero] = 0
    qv[zero] = 0
    rh[zero] = 0.0
    rv[zero] = 0.0
    return QuantizedTarget(config.K, config.P, mask, patch, qh, qv, rh, rv)

