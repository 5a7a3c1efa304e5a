"""Minimal reverse-mode differentiation over dense float64 matrices.

Operations execute eagerly on numpy arrays and, when a Tape is active,
record a backward closure.  Without an active tape the same functions run
as plain numerics, so evaluation and training share one code path.  Only
row-vector bias addition broadcasts; every other shape coercion is spelled
out by the caller.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Tensor2:
    """2-D, row-major, float64 tensor. ``trainable`` marks gradient leaves."""

    __slots__ = ("data", "trainable")

    def __init__(self, data, trainable: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"Tensor2 requires 2-D data, got shape {arr.shape}")
        self.data = arr
        self.trainable = trainable

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def __repr__(self):
        return f"Tensor2({self.rows}x{self.cols}, trainable={self.trainable})"


def const(data) -> Tensor2:
    return Tensor2(data)


def scalar(value: float) -> Tensor2:
    return Tensor2(np.array([[float(value)]]))


_ACTIVE: list["Tape"] = []


class Tape:
    """Records primitive ops for one backward pass.  Use as a context manager."""

    def __init__(self):
        self._ops: list[tuple[tuple[Tensor2, ...], Tensor2, object]] = []
        self._leaves: dict[int, Tensor2] = {}

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False

    def _record(self, inputs: tuple[Tensor2, ...], output: Tensor2, backward) -> None:
        self._ops.append((inputs, output, backward))
        for t in inputs:
            if t.trainable:
                self._leaves.setdefault(id(t), t)

    def backward(self, loss: Tensor2) -> dict[Tensor2, np.ndarray]:
        """Gradients of a scalar loss for every trainable leaf on the tape.

        Leaves that do not reach the loss get zero gradients.
        """
        if loss.shape != (1, 1):
            raise ShapeError(f"loss must be 1x1, got {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
        for inputs, output, bwd in reversed(self._ops):
            g_out = grads.get(id(output))
            if g_out is None:
                continue
            for tensor, g in zip(inputs, bwd(g_out)):
                if g is None:
                    continue
                prev = grads.get(id(tensor))
                # "+" rather than "+=": first assignment may alias g_out
                grads[id(tensor)] = g if prev is None else prev + g
        return {
            leaf: grads.get(key, np.zeros(leaf.shape))
            for key, leaf in self._leaves.items()
        }


def _tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _emit(inputs, out_data, backward) -> Tensor2:
    out = Tensor2(out_data)
    t = _tape()
    if t is not None:
        t._record(inputs, out, backward)
    return out


def matmul(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.cols != b.rows:
        raise ShapeError(f"matmul {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _emit((a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def add(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.shape == b.shape:
        return _emit((a, b), a.data + b.data, lambda g: (g, g))
    if b.rows == 1 and b.cols == a.cols:  # row-vector bias
        return _emit((a, b), a.data + b.data, lambda g: (g, g.sum(axis=0, keepdims=True)))
    raise ShapeError(f"add {a.shape} + {b.shape}")


def sub(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.shape != b.shape:
        raise ShapeError(f"sub {a.shape} - {b.shape}")
    return _emit((a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.shape != b.shape:
        raise ShapeError(f"mul {a.shape} * {b.shape}")
    ad, bd = a.data, b.data
    return _emit((a, b), ad * bd, lambda g: (g * bd, g * ad))


def smul(a: Tensor2, s: Tensor2) -> Tensor2:
    """Multiply a tensor by a 1x1 scalar tensor."""
    if s.shape != (1, 1):
        raise ShapeError(f"smul scalar must be 1x1, got {s.shape}")
    ad, sv = a.data, s.data[0, 0]
    return _emit((a, s), ad * sv, lambda g: (g * sv, np.array([[float((g * ad).sum())]])))


def scale(a: Tensor2, k: float) -> Tensor2:
    k = float(k)
    return _emit((a,), a.data * k, lambda g: (g * k,))


def shift(a: Tensor2, k: float) -> Tensor2:
    return _emit((a,), a.data + float(k), lambda g: (g,))


def neg(a: Tensor2) -> Tensor2:
    return scale(a, -1.0)


def sum_all(a: Tensor2) -> Tensor2:
    shape = a.shape
    return _emit((a,), np.array([[float(a.data.sum())]]),
                 lambda g: (np.full(shape, g[0, 0]),))


def rowsum(a: Tensor2) -> Tensor2:
    cols = a.cols
    return _emit((a,), a.data.sum(axis=1, keepdims=True),
                 lambda g: (np.repeat(g, cols, axis=1),))


def log(a: Tensor2) -> Tensor2:
    ad = a.data
    if not np.all(ad > 0.0):
        raise DomainError("log of non-positive value")
    return _emit((a,), np.log(ad), lambda g: (g / ad,))


def exp(a: Tensor2) -> Tensor2:
    out_data = np.exp(a.data)
    return _emit((a,), out_data, lambda g: (g * out_data,))


def apply(a: Tensor2, fn, dfn) -> Tensor2:
    """Elementwise fn with derivative dfn, both vectorized over arrays."""
    ad = a.data
    return _emit((a,), fn(ad), lambda g: (g * dfn(ad),))


def concat_cols(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.rows != b.rows:
        raise ShapeError(f"concat_cols {a.shape} | {b.shape}")
    k = a.cols
    return _emit((a, b), np.hstack([a.data, b.data]),
                 lambda g: (g[:, :k], g[:, k:]))


def concat_rows(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.cols != b.cols:
        raise ShapeError(f"concat_rows {a.shape} / {b.shape}")
    k = a.rows
    return _emit((a, b), np.vstack([a.data, b.data]),
                 lambda g: (g[:k, :], g[k:, :]))


def slice_cols(a: Tensor2, j0: int, j1: int) -> Tensor2:
    if not (0 <= j0 <= j1 <= a.cols):
        raise ShapeError(f"slice_cols [{j0}:{j1}] of {a.shape}")
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape)
        full[:, j0:j1] = g
        return (full,)

    return _emit((a,), a.data[:, j0:j1].copy(), bwd)


def slice_rows(a: Tensor2, i0: int, i1: int) -> Tensor2:
    if not (0 <= i0 <= i1 <= a.rows):
        raise ShapeError(f"slice_rows [{i0}:{i1}] of {a.shape}")
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape)
        full[i0:i1, :] = g
        return (full,)

    return _emit((a,), a.data[i0:i1, :].copy(), bwd)


def transpose(a: Tensor2) -> Tensor2:
    return _emit((a,), a.data.T.copy(), lambda g: (g.T,))


def diagonal(a: Tensor2) -> Tensor2:
    """Main diagonal of a square tensor as a 1 x n row."""
    if a.rows != a.cols:
        raise ShapeError(f"diagonal of non-square {a.shape}")
    n = a.rows

    def bwd(g):
        full = np.zeros((n, n))
        np.fill_diagonal(full, g[0])
        return (full,)

    return _emit((a,), np.diag(a.data).reshape(1, n).copy(), bwd)


def logsumexp_rows(a: Tensor2) -> Tensor2:
    """Numerically stable log(sum(exp(row))) as an (n, 1) column."""
    ad = a.data
    m = ad.max(axis=1, keepdims=True)
    out_data = m + np.log(np.exp(ad - m).sum(axis=1, keepdims=True))
    softmax = np.exp(ad - out_data)
    return _emit((a,), out_data, lambda g: (g * softmax,))
