"""Two-stage cascade: dense quantized regression feeding a landmark heatmap stage."""
from __future__ import annotations

import numpy as np

from .layers import Conv2d, activation, activation_grad
from .model import HeadOutputs, TinyFCN

__all__ = ["CascadeModel", "render_heatmap_targets", "heatmap_loss", "forward_cascade", "stage2_probe"]


def render_heatmap_targets(positions, visible, width, height, sigma=2.0):
    """Gaussian landmark heatmaps, ``(height, width, L)``.

    Channel ``l`` is ``exp(-|p - p_l|^2 / (2 sigma^2))`` evaluated at pixel
    centres, with positions given in the same continuous pixel frame. The
    peak is normalized to exactly 1 at the nearest pixel. Invisible or
    off-frame landmarks get an all-zero channel.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    vis = np.asarray(visible, dtype=bool).reshape(-1)
    out = np.zeros((height, width, len(pos)))
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    for i, ((x, y), v) in enumerate(zip(pos, vis)):
        if not v or not (0 <= x < width and 0 <= y < height):
            continue
        g = np.exp(-((ys[:, None] - y) ** 2 + (xs[None, :] - x) ** 2) / (2 * sigma**2))
        out[..., i] = g / g.max()
    return out


def heatmap_loss(pred, target):
    """Mean squared error over pixels and channels; returns ``(loss, grad)``."""
    diff = pred - target
    n = diff.size
    return float(np.sum(diff * diff)) / n, 2.0 * diff / n


class CascadeModel:
    """Stage 1 is a :class:`TinyFCN`; stage 2 reads its features and raw head outputs.

    Stage 2 input channels = stage-1 feature channels + stage-1 head channels.
    """

    def __init__(self, stage1: TinyFCN, n_landmarks, channels=(16,), kernel=3,
                 dense_weight=1.0, heatmap_weight=1.0):
        self.stage1 = stage1
        self.n_landmarks = int(n_landmarks)
        self.channels = tuple(int(c) for c in channels)
        self.kernel = int(kernel)
        self.dense_weight = float(dense_weight)
        self.heatmap_weight = float(heatmap_weight)
        cin = self.stage2_in_channels
        self.stage2 = []
        for c in self.channels:
            self.stage2.append(Conv2d(cin, c, kernel, stage1.padding))
            cin = c
        self.out = Conv2d(cin, self.n_landmarks, kernel, stage1.padding)
        self.params = {}

    @property
    def stage2_in_channels(self):
        return self.stage1.n_features + self.stage1.n_head_channels

    @property
    def act(self):
        return self.stage1.act

    def layers(self):
        names = [f"s2conv{i}" for i in range(len(self.stage2))] + ["s2out"]
        return list(zip(names, self.stage2 + [self.out]))

    def spec(self):
        return {
            "model": "CascadeModel",
            "stage1": self.stage1.spec(),
            "n_landmarks": self.n_landmarks,
            "channels": list(self.channels),
            "kernel": self.kernel,
            "dense_weight": self.dense_weight,
            "heatmap_weight": self.heatmap_weight,
            "layers": [layer.spec() for _, layer in self.layers()],
        }

    @classmethod
    def from_spec(cls, spec):
        return cls(TinyFCN.from_spec(spec["stage1"]), spec["n_landmarks"], spec["channels"],
                   spec["kernel"], spec["dense_weight"], spec["heatmap_weight"])

    def param_names(self):
        return [f"stage1.{n}" for n in self.stage1.param_names()] + [
            f"{n}.{p}" for n, layer in self.layers() for p in layer.param_shapes()
        ]

    def all_params(self):
        d = {f"stage1.{k}": v for k, v in self.stage1.params.items()}
        d.update(self.params)
        return d

    def set_params(self, flat):
        for k, v in flat.items():
            if k.startswith("stage1."):
                self.stage1.params[k[7:]] = v
            else:
                self.params[k] = v

    def init(self, rng, init_stage1=True):
        if init_stage1:
            self.stage1.init(rng)
        gain = 1.0 if self.act in ("tanh", "softplus") else np.sqrt(2.0)
        self.params = {}
        for name, layer in self.layers():
            for k, v in layer.init_params(rng, gain if name != "s2out" else 1.0).items():
                self.params[f"{name}.{k}"] = v
        return self

    def _lp(self, name):
        return {"w": self.params[f"{name}.w"], "b": self.params[f"{name}.b"]}

    def stage2_forward(self, s2_in):
        cache = []
        h = s2_in
        for i, conv in enumerate(self.stage2):
            z, c = conv.forward(self._lp(f"s2conv{i}"), h)
            h = activation(self.act, z)
            cache.append((c, z, h))
        y, c = self.out.forward(self._lp("s2out"), h)
        cache.append(c)
        return y, cache

    def stage2_backward(self, cache, dy):
        grads = {}
        dh, g = self.out.backward(self._lp("s2out"), cache[-1], dy)
        grads["s2out.w"], grads["s2out.b"] = g["w"], g["b"]
        for i in range(len(self.stage2) - 1, -1, -1):
            c, z, h = cache[i]
            dh, g = self.stage2[i].backward(self._lp(f"s2conv{i}"), c, dh * activation_grad(self.act, z, h))
            grads[f"s2conv{i}.w"], grads[f"s2conv{i}.b"] = g["w"], g["b"]
        return dh, grads

    def forward(self, x, dense_override=None):
        """Run both stages on a batch. ``dense_override`` replaces stage-1 head outputs as stage-2 input."""
        feats, dense, c1 = self.stage1.forward(x)
        s2_dense = dense if dense_override is None else dense_override
        if s2_dense.shape[-1] != self.stage1.n_head_channels:
            raise ValueError("dense channel count does not match the stage-1 heads")
        s2_in = np.concatenate([feats, s2_dense], axis=-1)
        if s2_in.shape[-1] != self.stage2_in_channels:
            raise ValueError("stage-2 input channel mismatch")
        heat, c2 = self.stage2_forward(s2_in)
        return feats, dense, heat, (c1, c2, dense_override is None)

    def backward(self, cache, d_dense, d_heat):
        """Gradients of every parameter (stage-1 names prefixed ``stage1.``)."""
        c1, c2, dense_used = cache
        d_in, grads = self.stage2_backward(c2, d_heat)
        nf = self.stage1.n_features
        d_feats = d_in[..., :nf]
        d_dense_total = d_dense + (d_in[..., nf:] if dense_used else 0.0)
        g1 = self.stage1.backward(c1, d_dense_total, d_feats)
        grads.update({f"stage1.{k}": v for k, v in g1.items()})
        return grads


def forward_cascade(cascade: CascadeModel, image):
    """``(HeadOutputs, heatmaps)`` for one image or a batch."""
    x = np.asarray(image, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    _, dense, heat, _ = cascade.forward(x)
    heads = HeadOutputs.split(dense, cascade.stage1.K)
    return (heads[0], heat[0]) if single else (heads, heat)


def stage2_probe(cascade: CascadeModel, images, dense, heatmaps, config, epochs=1):
    """Fit stage 2 alone on frozen stage-1 features plus the given dense channels.

    Stage 2 is re-initialized from ``config.seed`` and trained with the
    config's SGD settings; stage 1 is left untouched. Returns the mean
    heatmap loss of each epoch, each batch measured before its update, so
    equal seeds give paired runs that differ only in ``dense``.
    """
    rng = np.random.default_rng(config.seed)
    cascade.init(rng, init_stage1=False)
    feats, _, _ = cascade.stage1.forward(images)
    s2_in = np.concatenate([feats, np.asarray(dense, dtype=np.float64)], axis=-1)
    if s2_in.shape[-1] != cascade.stage2_in_channels:
        raise ValueError("dense channel count does not match the stage-1 heads")
    n = len(s2_in)
    velocity = {k: np.zeros_like(v) for k, v in cascade.params.items()}
    n_batches = (n + config.batch_size - 1) // config.batch_size
    total_iters, it = epochs * n_batches, 0
    means = []
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for b in range(n_batches):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            y, cache = cascade.stage2_forward(s2_in[idx])
            loss, dy = heatmap_loss(y, heatmaps[idx])
            losses.append(loss)
            _, grads = cascade.stage2_backward(cache, dy)
            if config.clip_norm:
                gnorm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if gnorm > config.clip_norm:
                    grads = {k: g * (config.clip_norm / gnorm) for k, g in grads.items()}
            lr = config.lr * (1.0 - it / total_iters) ** config.decay_power
            for k, g in grads.items():
                velocity[k] = config.momentum * velocity[k] - lr * g
                cascade.params[k] += velocity[k]
            it += 1
        means.append(float(np.mean(losses)))
    return means
