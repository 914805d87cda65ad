"""Small neural-network stack whose weighted layers run on crossbar arrays.

Conventions
-----------
* Weight matrices are stored inputs x outputs, matching the crossbar
  orientation, so a dense layer computes ``z = W^T [x; 1]``.
* The bias is a constant-1 input appended to every layer input.
* ``delta`` denotes the *negative* gradient of the loss with respect to a
  pre-activation, so ``W += eta * outer(x, delta)`` is a descent step.
* Losses return ``(value, grad)`` where ``grad`` is the gradient of the value
  being minimised.  The two GAN losses are the negations of the quantities
  the generator and discriminator maximise.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .crossbar import CrossbarArray, quantize


class NNError(ValueError):
    pass


def _finite(v, what="input"):
    v = np.asarray(v, dtype=float)
    if not np.isfinite(v).all():
        raise NNError(f"non-finite {what}")
    return v


# -- activations ------------------------------------------------------------

MAXOUT_K = 5
_ONE = np.ones(1)


def sigmoid(v):
    return expit(np.asarray(v, dtype=float))


def softmax(v):
    v = np.asarray(v, dtype=float)
    if v.shape[-1] < 1:
        raise NNError("softmax needs at least one entry")
    e = np.exp(v - np.max(v, axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _maxout(v):
    if v.shape[-1] % MAXOUT_K:
        raise NNError(f"maxout input length {v.shape[-1]} is not divisible by {MAXOUT_K}")
    return v.reshape(v.shape[:-1] + (-1, MAXOUT_K)).max(axis=-1)


ACTIVATIONS = ("sigmoid", "tanh", "relu", "softmax", "maxout-5", "identity")


def activation(name: str, v) -> np.ndarray:
    v = _finite(v)
    if name == "sigmoid":
        return sigmoid(v)
    if name == "tanh":
        return np.tanh(v)
    if name == "relu":
        return np.maximum(v, 0.0)
    if name == "softmax":
        return softmax(v)
    if name == "maxout-5":
        return _maxout(v)
    if name == "identity":
        return v.copy()
    raise NNError(f"unknown activation {name!r}")


def derivative(name: str, v) -> np.ndarray:
    """Derivative of ``activation(name, .)`` at pre-activation ``v``.

    Elementwise activations return a vector.  ``softmax`` returns its Jacobian
    ``J[a, b] = d s_a / d v_b`` and ``maxout-5`` returns the 0/1 selection mask
    (one winner per group, lowest index on ties) of the input's shape.
    """
    v = _finite(v)
    if name == "sigmoid":
        s = sigmoid(v)
        return s * (1.0 - s)
    if name == "tanh":
        return 1.0 - np.tanh(v) ** 2
    if name == "relu":
        return (v > 0).astype(float)
    if name == "softmax":
        s = softmax(v)
        return np.diag(s) - np.outer(s, s)
    if name == "maxout-5":
        g = v.reshape(-1, MAXOUT_K) if v.size % MAXOUT_K == 0 else _maxout(v)
        mask = np.zeros_like(g)
        mask[np.arange(g.shape[0]), np.argmax(g, axis=1)] = 1.0
        return mask.reshape(v.shape)
    if name == "identity":
        return np.ones_like(v)
    raise NNError(f"unknown activation {name!r}")


def backprop_activation(name: str, v, upstream) -> np.ndarray:
    """Chain ``upstream`` (gradient w.r.t. the activation output) back to ``v``."""
    d = derivative(name, v)
    upstream = np.asarray(upstream, dtype=float)
    if name == "softmax":
        return d.T @ upstream
    if name == "maxout-5":
        return d * np.repeat(upstream, MAXOUT_K)
    return d * upstream


# -- losses -----------------------------------------------------------------

LOSSES = ("mse", "cross-entropy", "gan-generator", "gan-discriminator")


def _checked_log(p, what, index=None):
    bad = np.flatnonzero(~(p > 0))
    if bad.size:
        i = int(bad[0] if index is None else index[bad[0]])
        raise NNError(f"log of non-positive {what} at index {i}")
    return np.log(p)


def loss(name: str, predictions, targets) -> tuple[float, np.ndarray]:
    """Scalar loss and its gradient with respect to ``predictions``.

    mse: ``0.5 * sum (p - t)^2``.
    cross-entropy: ``-sum t log p``.
    gan-generator: predictions are ``D(G(z))``; minimises ``-sum log D(G(z))``.
    gan-discriminator: predictions are ``D(.)`` and targets are 1 for real
    samples, 0 for generated ones; minimises
    ``-sum [t log D + (1 - t) log(1 - D)]``.
    """
    p = _finite(predictions, "predictions").ravel()
    t = None if targets is None else _finite(targets, "targets").ravel()
    if t is None and name != "gan-generator":
        raise NNError(f"loss {name!r} needs targets")
    if t is not None and t.shape != p.shape:
        raise NNError(f"predictions shape {p.shape} != targets shape {t.shape}")
    if name == "mse":
        r = p - t
        return 0.5 * float(r @ r), r
    if name == "cross-entropy":
        idx = np.flatnonzero(t)
        grad = np.zeros_like(p)
        logp = _checked_log(p[idx], "prediction", idx)
        grad[idx] = -t[idx] / p[idx]
        return -float(t[idx] @ logp), grad
    if name == "gan-generator":
        logd = _checked_log(p, "discriminator output")
        return -float(logd.sum()), -1.0 / p
    if name == "gan-discriminator":
        l1 = _checked_log(p, "discriminator output")
        l0 = _checked_log(1.0 - p, "1 - discriminator output")
        value = -float(t @ l1 + (1.0 - t) @ l0)
        return value, -t / p + (1.0 - t) / (1.0 - p)
    raise NNError(f"unknown loss {name!r}")


def softmax_cross_entropy(logits, targets) -> tuple[float, np.ndarray]:
    """Fused softmax + cross-entropy; gradient w.r.t. the logits is ``p - t``."""
    z = _finite(logits, "logits")
    t = _finite(targets, "targets")
    if z.shape != t.shape:
        raise NNError(f"logits shape {z.shape} != targets shape {t.shape}")
    shifted = z - z.max()
    lse = np.log(np.exp(shifted).sum())
    return float(-(t @ (shifted - lse))), softmax(z) - t


# -- convolution via im2col -------------------------------------------------


def im2col(image, k: int, pad: bool = True) -> np.ndarray:
    """Patch matrix of shape ``(d*k*k, n*n)`` for an ``n x n x d`` image.

    Row ``(a*k + b)*d + c`` holds channel ``c`` at kernel offset ``(a, b)``;
    column ``r*n + s`` is the receptive field of output pixel ``(r, s)``.
    Stride is 1 and the border is zero padded so the output keeps size n.
    """
    img = np.asarray(image, dtype=float)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[0] != img.shape[1]:
        raise NNError(f"image must be n x n x d, got shape {img.shape}")
    if k < 1 or k % 2 == 0:
        raise NNError("kernel size must be odd")
    if not pad:
        raise NNError("only same-size (zero padded) convolution is supported")
    n, _, d = img.shape
    h = k // 2
    padded = np.zeros((n + 2 * h, n + 2 * h, d))
    padded[h:h + n, h:h + n] = img
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(0, 1))  # n, n, d, k, k
    return win.transpose(3, 4, 2, 0, 1).reshape(k * k * d, n * n)


def filters_to_matrix(filters) -> np.ndarray:
    """``(k, k, d, m)`` filter bank to the ``(d*k*k, m)`` array layout."""
    f = np.asarray(filters, dtype=float)
    if f.ndim != 4:
        raise NNError("filters must have shape (k, k, d, m)")
    return f.reshape(-1, f.shape[3])


def conv_as_matmul(weights, patches, t_now: float = 0.0) -> np.ndarray:
    """``m x n^2`` convolution output, one matvec per patch column.

    ``weights`` is a ``(d*k*k, m)`` matrix or any backend with ``matvec_forward``.
    """
    patches = np.asarray(patches, dtype=float)
    if isinstance(weights, np.ndarray):
        if weights.shape[0] != patches.shape[0]:
            raise NNError(f"weight rows {weights.shape[0]} != patch rows {patches.shape[0]}")
        return weights.T @ patches
    if weights.rows != patches.shape[0]:
        raise NNError(f"array rows {weights.rows} != patch rows {patches.shape[0]}")
    return np.stack([weights.matvec_forward(patches[:, q], t_now) for q in range(patches.shape[1])],
                    axis=1)


def conv_weight_update(patches, deltas, eta: float) -> np.ndarray:
    """Average over output pixels of ``eta * outer(patch_q, delta_q)``."""
    patches = np.asarray(patches, dtype=float)
    deltas = np.asarray(deltas, dtype=float)
    if patches.shape[1] != deltas.shape[1]:
        raise NNError("patches and deltas disagree on the number of output pixels")
    return eta * (patches @ deltas.T) / patches.shape[1]


# -- LSTM -------------------------------------------------------------------


@dataclass
class LstmCellParams:
    """Stacked gate weights ``W`` (4n x (m+n)) and bias ``b`` (4n), blocks (i, f, o, g)."""

    W: np.ndarray
    b: np.ndarray
    n: int
    m: int

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.W.shape != (4 * self.n, self.m + self.n):
            raise NNError(f"W has shape {self.W.shape}, expected {(4 * self.n, self.m + self.n)}")
        if self.b.shape != (4 * self.n,):
            raise NNError(f"b has shape {self.b.shape}, expected {(4 * self.n,)}")


def lstm_cell(params: LstmCellParams, x, h_prev, c_prev, backend=None, t_now: float = 0.0):
    """One LSTM step; returns ``(h, c)``.

    With a ``backend`` (array of shape (m+n) x 4n holding ``W^T``) the gate
    pre-activations come from its forward matvec plus ``b``.
    """
    n = params.n
    x = np.asarray(x, dtype=float)
    h_prev = np.asarray(h_prev, dtype=float)
    c_prev = np.asarray(c_prev, dtype=float)
    if x.shape != (params.m,) or h_prev.shape != (n,) or c_prev.shape != (n,):
        raise NNError("lstm input or state has the wrong length")
    u = np.concatenate([x, h_prev])
    z = (params.W @ u if backend is None else backend.matvec_forward(u, t_now)) + params.b
    i, f, o = sigmoid(z[:n]), sigmoid(z[n:2 * n]), sigmoid(z[2 * n:3 * n])
    g = np.tanh(z[3 * n:])
    c = f * c_prev + i * g
    return o * np.tanh(c), c


# -- dense layers -----------------------------------------------------------


class ExactWeights:
    """Real-valued weight matrix with the same interface as ``CrossbarArray``."""

    def __init__(self, W, dac_bits: int | None = None, adc_bits: int | None = None):
        self.W = np.array(W, dtype=float)
        self.rows, self.cols = self.W.shape
        self.dac_bits, self.adc_bits = dac_bits, adc_bits

    def matvec_forward(self, x, t_now: float = 0.0) -> np.ndarray:
        x = quantize(x, self.dac_bits)
        if x.shape != (self.rows,):
            raise NNError(f"input has length {x.shape}, expected {self.rows}")
        return quantize(x @ self.W, self.adc_bits)

    def matvec_backward(self, d, t_now: float = 0.0) -> np.ndarray:
        d = quantize(d, self.dac_bits)
        if d.shape != (self.cols,):
            raise NNError(f"error has length {d.shape}, expected {self.cols}")
        return quantize(self.W @ d, self.adc_bits)

    def cached_weights(self) -> np.ndarray:
        return self.W

    def apply_update(self, upd):
        self.W += upd


@dataclass
class DenseLayer:
    backend: object  # ExactWeights | CrossbarArray
    activation: str = "sigmoid"
    bias: bool = True

    @property
    def n_in(self) -> int:
        return self.backend.rows - int(self.bias)

    @property
    def n_out(self) -> int:
        return self.backend.cols


@dataclass
class ForwardBackward:
    loss: float
    xs: list = field(default_factory=list)      # per-layer input including bias
    deltas: list = field(default_factory=list)  # per-layer negative pre-activation gradient
    output: np.ndarray | None = None


def mlp_forward_backward(layers: list[DenseLayer], x, target, loss_name: str = "mse",
                         t_now: float = 0.0, backward: bool = True) -> ForwardBackward:
    """Forward pass, loss, and backward pass through a chain of dense layers.

    The first layer's backward product is skipped since nothing consumes it.
    """
    a = _finite(x)
    xs, zs = [], []
    for k, layer in enumerate(layers):
        if a.shape != (layer.n_in,):
            raise NNError(f"layer {k} expects {layer.n_in} inputs, got {a.shape}")
        xin = np.concatenate((a, _ONE)) if layer.bias else a
        z = layer.backend.matvec_forward(xin, t_now)
        xs.append(xin)
        zs.append(z)
        a = activation(layer.activation, z)
    last = layers[-1].activation
    if last == "softmax" and loss_name == "cross-entropy":
        value, g = softmax_cross_entropy(zs[-1], target)
        fused = True
    else:
        value, g = loss(loss_name, a, target)
        fused = False
    out = ForwardBackward(value, xs, [], a)
    if not backward:
        return out
    grad_z = g if fused else backprop_activation(last, zs[-1], g)
    deltas = [None] * len(layers)
    deltas[-1] = -grad_z
    for k in range(len(layers) - 1, 0, -1):
        e = layers[k].backend.matvec_backward(deltas[k], t_now)
        if layers[k].bias:
            e = e[:-1]
        deltas[k - 1] = backprop_activation(layers[k - 1].activation, zs[k - 1], e)
    out.deltas = deltas
    return out


def count_weights(sizes: list[int], bias: bool = True) -> int:
    """Number of synapses of a dense chain such as ``[784, 250, 10]``."""
    return sum((a + int(bias)) * b for a, b in zip(sizes[:-1], sizes[1:]))
