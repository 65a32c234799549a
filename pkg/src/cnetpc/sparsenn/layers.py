"""Differentiable sparse layers with explicit forward/backward.

Every ``forward`` returns ``(output, cache)`` and leaves the layer itself
untouched, so a model may serve concurrent inference calls. ``backward``
takes the cache back, accumulates parameter gradients and returns the
input gradient.
"""

from __future__ import annotations

import math

import numpy as np

from .kernelmap import KernelMap, kept_offsets, mask_offsets

LN2 = math.log(2.0)


class Param:
    """A trainable array with its accumulated gradient."""

    def __init__(self, value: np.ndarray, name: str = ""):
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name
        self.frozen: np.ndarray | None = None  # boolean mask of entries pinned to zero

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def enforce_mask(self) -> None:
        if self.frozen is not None:
            self.value[self.frozen] = 0.0

    def __repr__(self):
        return f"Param({self.name}, shape={self.value.shape})"


class Layer:
    def params(self) -> list[Param]:
        return []


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class SparseConv(Layer):
    """Sparse 3D convolution with an optional causal mask.

    Masked offsets are zero in ``weight`` and skipped entirely when
    computing, so they contribute nothing, not even a signed zero.
    """

    def __init__(self, cin, cout, k, mask=None, rng=None, zero_init=False, name="conv"):
        self.cin, self.cout, self.k, self.mask = cin, cout, k, mask
        self.kept = kept_offsets(k, mask)
        shape = (k ** 3, cin, cout)
        if zero_init or rng is None:
            w = np.zeros(shape)
            b = np.zeros(cout)
        else:
            fan_in = len(self.kept) * cin
            w = _uniform(rng, shape, fan_in)
            b = _uniform(rng, cout, fan_in)
        self.weight = Param(w, name + ".weight")
        self.bias = Param(b, name + ".bias")
        zeroed = sorted(mask_offsets(k, mask))
        if zeroed:
            frozen = np.zeros(shape, dtype=bool)
            frozen[zeroed] = True
            self.weight.frozen = frozen
            self.weight.enforce_mask()

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray, kmap: KernelMap):
        if x.shape[1] != self.cin:
            raise ValueError(f"expected {self.cin} input channels, got {x.shape[1]}")
        if kmap.n_in != x.shape[0]:
            raise ValueError("kernel map does not match input rows")
        if kmap.k != self.k:
            raise ValueError(f"kernel map built for k={kmap.k}, layer has k={self.k}")
        m = kmap.n_out
        nk = len(self.kept)
        if nk == 0:
            return np.broadcast_to(self.bias.value, (m, self.cout)).copy(), (kmap, None, x.shape[0])
        idx = kmap.gather_index(self.kept)
        xpad = np.vstack([x, np.zeros((1, self.cin))])
        cols = xpad[idx].reshape(m, nk * self.cin)
        wk = self.weight.value[self.kept].reshape(nk * self.cin, self.cout)
        y = cols @ wk
        y += self.bias.value
        return y, (kmap, cols, x.shape[0])

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        kmap, cols, n_in = cache
        self.bias.grad += dy.sum(axis=0)
        if cols is None:
            return np.zeros((n_in, self.cin))
        nk = len(self.kept)
        self.weight.grad[self.kept] += (cols.T @ dy).reshape(nk, self.cin, self.cout)
        wk = self.weight.value[self.kept].reshape(nk * self.cin, self.cout)
        dcols = (dy @ wk.T).reshape(kmap.n_out * nk, self.cin)
        return np.asarray(kmap.scatter_matrix(self.kept) @ dcols)


class Linear(Layer):
    """Per-row dense map; a kernel-size-1 convolution on a dense grid."""

    def __init__(self, cin, cout, rng=None, zero_init=False, name="linear"):
        self.cin, self.cout = cin, cout
        if zero_init or rng is None:
            w, b = np.zeros((cin, cout)), np.zeros(cout)
        else:
            w, b = _uniform(rng, (cin, cout), cin), _uniform(rng, cout, cin)
        self.weight = Param(w, name + ".weight")
        self.bias = Param(b, name + ".bias")

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        y = x @ self.weight.value
        y += self.bias.value
        return y, x

    def backward(self, dy, x):
        self.weight.grad += x.T @ dy
        self.bias.grad += dy.sum(axis=0)
        return dy @ self.weight.value.T


def elu(x):
    y = np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))
    return y, (x > 0, y)


def elu_backward(dy, cache):
    pos, y = cache
    return np.where(pos, dy, dy * (y + 1.0))


class ResidualBlock(Layer):
    """k=1 conv, k=3 conv, k=1 conv (ELU after each) added to the input."""

    def __init__(self, channels, mask="B", rng=None, name="res"):
        self.a = SparseConv(channels, channels, 1, mask, rng, name=name + ".a")
        self.b = SparseConv(channels, channels, 3, mask, rng, name=name + ".b")
        self.c = SparseConv(channels, channels, 1, mask, rng, name=name + ".c")

    def params(self):
        return self.a.params() + self.b.params() + self.c.params()

    def forward(self, x, kmaps):
        h, ca = self.a.forward(x, kmaps[1])
        h, ea = elu(h)
        h, cb = self.b.forward(h, kmaps[3])
        h, eb = elu(h)
        h, cc = self.c.forward(h, kmaps[1])
        h, ec = elu(h)
        return x + h, (ca, ea, cb, eb, cc, ec)

    def backward(self, dy, cache):
        ca, ea, cb, eb, cc, ec = cache
        g = self.c.backward(elu_backward(dy, ec), cc)
        g = self.b.backward(elu_backward(g, eb), cb)
        g = self.a.backward(elu_backward(g, ea), ca)
        return dy + g


def sparse_to_dense(x: np.ndarray, rows: np.ndarray, size: int) -> np.ndarray:
    """Scatter sparse rows into a zero-filled ``(size, C)`` grid."""
    rows = np.asarray(rows, dtype=np.int64)
    if len(rows) and (rows.min() < 0 or rows.max() >= size):
        raise IndexError("sparse row outside the dense grid")
    out = np.zeros((size, x.shape[1]))
    out[rows] = x
    return out


def sparse_to_dense_backward(ddense: np.ndarray, rows: np.ndarray) -> np.ndarray:
    return ddense[np.asarray(rows, dtype=np.int64)]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_ce(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy in bits. Returns ``(loss, probs, cache)``."""
    targets = np.asarray(targets, dtype=np.int64)
    k = logits.shape[1]
    if len(targets) and (targets.min() < 0 or targets.max() >= k):
        raise IndexError(f"target outside alphabet of size {k}")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(targets))
    nll = (logsum - z[rows, targets]) / LN2
    probs = np.exp(z - logsum[:, None])
    loss = float(nll.mean()) if len(targets) else 0.0
    return loss, probs, (probs, targets)


def softmax_ce_backward(cache, scale: float = 1.0) -> np.ndarray:
    probs, targets = cache
    g = probs.copy()
    g[np.arange(len(targets)), targets] -= 1.0
    return g * (scale / (max(len(targets), 1) * LN2))
