"""Convolution and activation layers with hand-written backward passes.

Tensors are channel-last ``(N, H, W, C)`` float64. A k x k "same" convolution
is evaluated as k*k matrix products over contiguous row slices of the
flattened padded batch: output position ``s`` of the padded grid gathers
input rows ``s + i*Wp + j``. Rows that land in padding are computed and then
discarded, which costs a few percent extra work but avoids im2col copies.
"""
from __future__ import annotations

import numpy as np

__all__ = ["Conv2d", "ACTIVATIONS", "activation", "activation_grad"]


class Conv2d:
    """Stride-1 convolution preserving spatial size (zero or wrap padding)."""

    def __init__(self, cin, cout, k=3, padding="zero"):
        if k % 2 != 1:
            raise ValueError("kernel size must be odd")
        if padding not in ("zero", "wrap"):
            raise ValueError(f"unknown padding {padding!r}")
        self.cin, self.cout, self.k, self.padding = int(cin), int(cout), int(k), padding

    def spec(self):
        return {"type": "conv", "cin": self.cin, "cout": self.cout, "k": self.k, "padding": self.padding}

    def param_shapes(self):
        return {"w": (self.k, self.k, self.cin, self.cout), "b": (self.cout,)}

    def init_params(self, rng, gain=1.0):
        fan_in = self.k * self.k * self.cin
        return {
            "w": rng.standard_normal(self.param_shapes()["w"]) * (gain / np.sqrt(fan_in)),
            "b": np.zeros(self.cout),
        }

    def _pad(self, x):
        p = self.k // 2
        if p == 0:
            return x
        mode = "constant" if self.padding == "zero" else "wrap"
        return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), mode=mode)

    def forward(self, params, x):
        """Returns ``(y, cache)``."""
        N, H, W, C = x.shape
        if C != self.cin:
            raise ValueError(f"conv expects {self.cin} input channels, got {C}")
        w, b = params["w"], params["b"]
        k = self.k
        if k == 1:
            X = x.reshape(-1, C)
            y = (X @ w[0, 0] + b).reshape(N, H, W, self.cout)
            return y, (x.shape, X)
        xp = self._pad(x)
        Hp, Wp = xp.shape[1], xp.shape[2]
        X = np.ascontiguousarray(xp).reshape(-1, C)
        M = X.shape[0] - (k - 1) * Wp - (k - 1)
        out = np.zeros((N * Hp * Wp, self.cout))
        acc = out[:M]
        for i in range(k):
            for j in range(k):
                off = i * Wp + j
                acc += X[off:off + M] @ w[i, j]
        y = out.reshape(N, Hp, Wp, self.cout)[:, :H, :W, :] + b
        return np.ascontiguousarray(y), (x.shape, X, Hp, Wp, M)

    def backward(self, params, cache, dy):
        """Returns ``(dx, grads)``."""
        w = params["w"]
        k = self.k
        if k == 1:
            shape, X = cache
            D = dy.reshape(-1, self.cout)
            grads = {"w": (X.T @ D)[None, None], "b": D.sum(axis=0)}
            return (D @ w[0, 0].T).reshape(shape), grads
        (N, H, W, C), X, Hp, Wp, M = cache
        dfull = np.zeros((N, Hp, Wp, self.cout))
        dfull[:, :H, :W, :] = dy
        D = dfull.reshape(-1, self.cout)[:M]
        dX = np.zeros_like(X)
        gw = np.empty_like(w)
        for i in range(k):
            for j in range(k):
                off = i * Wp + j
                gw[i, j] = X[off:off + M].T @ D
                dX[off:off + M] += D @ w[i, j].T
        grads = {"w": gw, "b": dy.reshape(-1, self.cout).sum(axis=0)}
        dxp = dX.reshape(N, Hp, Wp, C)
        p = k // 2
        if self.padding == "wrap":
            dxp = dxp.copy()
            dxp[:, p:2 * p, :, :] += dxp[:, Hp - p:, :, :]
            dxp[:, H:H + p, :, :] += dxp[:, :p, :, :]
            dxp[:, :, p:2 * p, :] += dxp[:, :, Wp - p:, :]
            dxp[:, :, W:W + p, :] += dxp[:, :, :p, :]
        return np.ascontiguousarray(dxp[:, p:p + H, p:p + W, :]), grads


def _tanh(x):
    return np.tanh(x)


def _tanh_grad(x, y):
    return 1.0 - y * y


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_grad(x, y):
    return (x > 0).astype(x.dtype)


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_grad(x, y):
    return np.where(x > 0, 1.0, y + 1.0)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_grad(x, y):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


ACTIVATIONS = {
    "tanh": (_tanh, _tanh_grad),
    "relu": (_relu, _relu_grad),
    "elu": (_elu, _elu_grad),
    "softplus": (_softplus, _softplus_grad),
}


def activation(name, x):
    return ACTIVATIONS[name][0](x)


def activation_grad(name, x, y):
    """Derivative of the activation at pre-activation ``x`` (output ``y``)."""
    return ACTIVATIONS[name][1](x, y)
