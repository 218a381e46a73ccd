"""Tiny fully-convolutional quantized regressor."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..codec import LossConfig, decode_hard, loss_classification, loss_residual
from ..fields import CorrespondenceField
from .layers import Conv2d, activation, activation_grad

__all__ = ["HeadOutputs", "TinyFCN", "forward", "dense_loss", "predict_field", "oracle_heads"]


@dataclass
class HeadOutputs:
    """Per-pixel head outputs, shapes ``(..., H, W, n)``.

    ``patch_logits`` has ``P + 1`` entries: background first, then one per
    chart.
    """

    logits_h: np.ndarray
    logits_v: np.ndarray
    res_h: np.ndarray
    res_v: np.ndarray
    patch_logits: np.ndarray

    @property
    def K(self):
        return self.logits_h.shape[-1]

    def stack(self):
        return np.concatenate([self.logits_h, self.logits_v, self.res_h, self.res_v, self.patch_logits], axis=-1)

    @classmethod
    def split(cls, arr, K):
        s = np.split(arr, [K, 2 * K, 3 * K, 4 * K], axis=-1)
        return cls(*s)

    def __getitem__(self, i):
        return HeadOutputs(self.logits_h[i], self.logits_v[i], self.res_h[i], self.res_v[i], self.patch_logits[i])


class TinyFCN:
    """Stack of same-size 3x3 convolutions followed by 1x1 quantized-regression heads.

    Heads per pixel: two K-way logit sets, two K-entry residual banks and
    ``P + 1`` chart logits (background + charts); ``4K + P + 1`` channels.
    """

    def __init__(self, K, P=1, channels=(16, 16, 16, 16), kernel=3, act="tanh", in_channels=3, padding="zero"):
        if K < 1 or P < 1:
            raise ValueError("K and P must be positive")
        self.K, self.P = int(K), int(P)
        self.act = act
        self.in_channels = in_channels
        self.channels = tuple(int(c) for c in channels)
        self.kernel = int(kernel)
        self.padding = padding
        cin = in_channels
        self.trunk = []
        for c in self.channels:
            self.trunk.append(Conv2d(cin, c, kernel, padding))
            cin = c
        self.head = Conv2d(cin, self.n_head_channels, 1)
        self.params = {}

    @property
    def n_features(self):
        return self.channels[-1] if self.channels else self.in_channels

    @property
    def n_head_channels(self):
        return 4 * self.K + self.P + 1

    def layers(self):
        names = [f"conv{i}" for i in range(len(self.trunk))] + ["head"]
        return list(zip(names, self.trunk + [self.head]))

    def spec(self):
        return {
            "model": "TinyFCN",
            "K": self.K,
            "P": self.P,
            "act": self.act,
            "in_channels": self.in_channels,
            "channels": list(self.channels),
            "kernel": self.kernel,
            "padding": self.padding,
            "layers": [layer.spec() for _, layer in self.layers()],
        }

    @classmethod
    def from_spec(cls, spec):
        return cls(spec["K"], spec["P"], spec["channels"], spec["kernel"], spec["act"],
                   spec["in_channels"], spec["padding"])

    def param_names(self):
        """Flat parameter names in declaration order."""
        return [f"{n}.{p}" for n, layer in self.layers() for p in layer.param_shapes()]

    def init(self, rng):
        gain = 1.0 if self.act in ("tanh", "softplus") else np.sqrt(2.0)
        self.params = {}
        for name, layer in self.layers():
            p = layer.init_params(rng, gain if name != "head" else 1.0)
            for k, v in p.items():
                self.params[f"{name}.{k}"] = v
        # residual experts start at the middle of their bin
        d = 1.0 / self.K
        b = self.params["head.b"]
        b[2 * self.K:4 * self.K] = 0.5 * d
        return self

    def layer_params(self, name):
        return {"w": self.params[f"{name}.w"], "b": self.params[f"{name}.b"]}

    def forward(self, x):
        """``x``: ``(N, H, W, C)``. Returns ``(features, head_array, cache)``."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[-1] != self.in_channels:
            raise ValueError(f"expected input (N, H, W, {self.in_channels}), got {x.shape}")
        cache = []
        h = x - 0.5
        for i, conv in enumerate(self.trunk):
            z, c = conv.forward(self.layer_params(f"conv{i}"), h)
            h = activation(self.act, z)
            cache.append((c, z, h))
        out, c = self.head.forward(self.layer_params("head"), h)
        cache.append(c)
        return h, out, cache

    def backward(self, cache, d_out, d_features=None):
        """Gradients of all parameters given d(loss)/d(head array) (and optionally d/d(features))."""
        grads = {}
        dh, g = self.head.backward(self.layer_params("head"), cache[-1], d_out)
        grads["head.w"], grads["head.b"] = g["w"], g["b"]
        if d_features is not None:
            dh = dh + d_features
        for i in range(len(self.trunk) - 1, -1, -1):
            c, z, h = cache[i]
            dz = dh * activation_grad(self.act, z, h)
            dh, g = self.trunk[i].backward(self.layer_params(f"conv{i}"), c, dz)
            grads[f"conv{i}.w"], grads[f"conv{i}.b"] = g["w"], g["b"]
        return grads

    def copy(self):
        m = TinyFCN.from_spec(self.spec())
        m.params = {k: v.copy() for k, v in self.params.items()}
        return m


def forward(model: TinyFCN, image) -> HeadOutputs:
    """Head outputs for one ``(H, W, 3)`` image or a batch ``(N, H, W, 3)``."""
    x = np.asarray(image, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if not np.all(np.isfinite(x)):
        raise ValueError("image contains non-finite values")
    _, out, _ = model.forward(x)
    heads = HeadOutputs.split(out, model.K)
    return heads[0] if single else heads


def dense_loss(heads_arr, targets, K, loss_cfg: LossConfig):
    """Total dense loss and its gradient w.r.t. the stacked head array.

    ``targets`` is a dict of batched arrays: ``mask``, ``patch``, ``qh``,
    ``qv``, ``rh``, ``rv``. Returns ``(total, parts, grad)`` where parts holds
    ``cls`` (bins + chart) and ``res`` components.
    """
    heads = HeadOutputs.split(heads_arr, K)
    mask = targets["mask"]
    w_res = loss_cfg.residual_weight(K)
    beta = loss_cfg.smooth_l1_beta
    l_qh, g_qh = loss_classification(heads.logits_h, targets["qh"], mask)
    l_qv, g_qv = loss_classification(heads.logits_v, targets["qv"], mask)
    l_rh, g_rh = loss_residual(heads.res_h, targets["rh"], targets["qh"], mask, w_res, beta)
    l_rv, g_rv = loss_residual(heads.res_v, targets["rv"], targets["qv"], mask, w_res, beta)
    # chart classifier sees every pixel: 0 = background, 1 + p = chart p
    ptarget = np.where(mask, targets["patch"] + 1, 0)
    l_p, g_p = loss_classification(heads.patch_logits, ptarget, None)
    w = loss_cfg.w_cls
    cls = w * (l_qh + l_qv + l_p)
    res = l_rh + l_rv
    grad = np.concatenate([w * g_qh, w * g_qv, g_rh, g_rv, w * g_p], axis=-1)
    return cls + res, {"cls": cls, "res": res}, grad


def predict_field(model_or_heads, image=None, K=None) -> CorrespondenceField:
    """Decode head outputs into a correspondence field.

    Bins come from the argmax of each axis' logits and are reconstructed with
    their own residual expert; the chart (or background) from the argmax of
    the chart logits. Coordinates are clipped to [0, 1].
    """
    if isinstance(model_or_heads, HeadOutputs):
        heads = model_or_heads
    else:
        heads = forward(model_or_heads, image)
    K = heads.K
    qh = np.argmax(heads.logits_h, axis=-1)
    qv = np.argmax(heads.logits_v, axis=-1)
    u = np.clip(decode_hard(qh, heads.res_h, K), 0.0, 1.0)
    v = np.clip(decode_hard(qv, heads.res_v, K), 0.0, 1.0)
    cls = np.argmax(heads.patch_logits, axis=-1)
    mask = cls > 0
    return CorrespondenceField(
        mask, np.where(mask, cls - 1, 0), np.where(mask, u, 0.0), np.where(mask, v, 0.0)
    )


def oracle_heads(targets, K, P, margin=50.0) -> HeadOutputs:
    """Head outputs that decode exactly to the given quantized targets."""
    mask = targets["mask"]
    shape = mask.shape
    eye = np.eye(K)
    lh = margin * eye[targets["qh"]]
    lv = margin * eye[targets["qv"]]
    rh = np.zeros(shape + (K,))
    rv = np.zeros(shape + (K,))
    np.put_along_axis(rh, targets["qh"][..., None], targets["rh"][..., None], axis=-1)
    np.put_along_axis(rv, targets["qv"][..., None], targets["rv"][..., None], axis=-1)
    pl = margin * np.eye(P + 1)[np.where(mask, targets["patch"] + 1, 0)]
    return HeadOutputs(lh, lv, rh, rv, pl)
