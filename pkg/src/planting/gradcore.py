"""Minimal reverse-mode autodiff over dense float64 arrays.

Only the handful of operations the plantable CNNs need are provided:
``conv2d`` (3x3, stride 1, zero padding 1), ``maxpool2x2``, ``relu``,
``flatten``, ``linear`` and the two softmax losses used for training
(cross-entropy and the teacher/student KL term, see :mod:`planting.distill`).

Operations executed while a :class:`GradTape` is active are recorded on it;
``tape.backward(loss)`` replays them in reverse and accumulates gradients into
the ``grad`` field of every leaf tensor that has ``requires_grad`` set.
Outside a tape the same functions run forward-only.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "GradTape",
    "NonFiniteError",
    "Tensor",
    "conv2d",
    "flatten",
    "linear",
    "log_softmax",
    "maxpool2x2",
    "relu",
    "softmax",
    "softmax_cross_entropy",
    "tensor_sum",
]


class NonFiniteError(FloatingPointError):
    """An operation produced (or was handed) NaN or infinite values."""


class Tensor:
    """A float64 array, optionally tracked for gradients.

    Image activations are rank-4 ``(batch, channels, height, width)`` in
    row-major order; logits are ``(batch, classes)`` and losses are rank-0.
    """

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def item(self) -> float:
        return self.value.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


_BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_active_tapes: list["GradTape"] = []


class GradTape:
    """Records executed operations so the chain rule can be replayed.

    Use as a context manager::

        with GradTape() as tape:
            loss = softmax_cross_entropy(forward(net, x), y)
        tape.backward(loss)
    """

    def __init__(self) -> None:
        self._records: list[tuple[Tensor, tuple[Tensor, ...], _BackwardFn]] = []

    def __enter__(self) -> "GradTape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: _BackwardFn) -> None:
        self._records.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf.

        Gradients accumulate: call ``zero_grad`` on the parameters between
        independent backward passes.
        """
        if not self._records:
            raise RuntimeError("backward() called on a tape with no recorded forward pass")
        if loss.value.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        produced = {id(out) for out, _, _ in self._records}
        if id(loss) not in produced:
            raise RuntimeError("loss was not produced by an operation recorded on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, backward_fn in reversed(self._records):
            g_out = grads.pop(id(out), None)
            if g_out is None:
                continue
            for inp, g in zip(inputs, backward_fn(g_out)):
                if g is None:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if key not in produced and inp.requires_grad:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads[key]
            if leaf.grad is None:
                leaf.grad = g.copy()
            else:
                leaf.grad += g


def _emit(value: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: _BackwardFn, op: str) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(value)
    if _active_tapes:
        _active_tapes[-1].record(out, inputs, backward_fn)
    return out


def _check_finite(t: Tensor, op: str) -> None:
    if not np.all(np.isfinite(t.value)):
        raise NonFiniteError(f"{op} received non-finite input")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _spans(blocks: Optional[Sequence[int]], total: int, what: str) -> list[slice]:
    if blocks is None:
        return [slice(0, total)]
    if sum(blocks) != total or min(blocks) < 1:
        raise ValueError(f"{what} blocks {tuple(blocks)} do not partition {total} channels")
    edges = np.cumsum([0, *blocks])
    return [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor,
           in_blocks: Optional[Sequence[int]] = None,
           out_blocks: Optional[Sequence[int]] = None) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1 (spatial size preserved).

    ``out[b,o,y,x] = bias[o] + sum_{i,dy,dx} x[b,i,y+dy-1,x+dx-1] * weight[o,i,dy,dx]``

    ``in_blocks`` / ``out_blocks`` split the channel axes into contiguous
    blocks. Each (out block, in block) pair is a separate GEMM, accumulated
    in block order, so appending a block never changes the floating-point
    path taken for the blocks that were already there.
    """
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if (kh, kw) != (3, 3):
        raise ValueError(f"conv2d expects a 3x3 kernel, got {kh}x{kw}")
    if c != c_in:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernel expects {c_in}")
    if bias.shape != (c_out,):
        raise ValueError(f"conv2d bias shape {bias.shape} != ({c_out},)")
    rows = _spans(out_blocks, c_out, "output")
    cols = _spans(in_blocks, c_in, "input")
    _check_finite(x, "conv2d")

    # channel-major padded input (c, n, h+2, w+2); weights tap-major (3, 3, c_out, c_in)
    xpad = np.pad(x.value.transpose(1, 0, 2, 3), ((0, 0), (0, 0), (1, 1), (1, 1)))
    wt = np.ascontiguousarray(weight.value.transpose(2, 3, 0, 1))
    m = n * h * w

    def tap(dy: int, dx: int, span: slice = slice(None)) -> np.ndarray:
        return np.ascontiguousarray(xpad[span, :, dy:dy + h, dx:dx + w]).reshape(-1, m)

    acc = np.zeros((c_out, m))
    for dy in range(3):
        for dx in range(3):
            taps = [tap(dy, dx, cs) for cs in cols]
            for rs in rows:
                for cs, t in zip(cols, taps):
                    acc[rs] += np.ascontiguousarray(wt[dy, dx, rs, cs]) @ t
    acc += bias.value[:, None]
    out = acc.reshape(c_out, n, h, w).transpose(1, 0, 2, 3)

    def backward(g: np.ndarray):
        g_t = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(c_out, m)
        g_w = np.empty((3, 3, c_out, c_in))
        g_pad = np.zeros_like(xpad)
        for dy in range(3):
            for dx in range(3):
                g_w[dy, dx] = g_t @ tap(dy, dx).T
                g_pad[:, :, dy:dy + h, dx:dx + w] += (wt[dy, dx].T @ g_t).reshape(c_in, n, h, w)
        g_x = g_pad[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3)
        return g_x, g_w.transpose(2, 3, 0, 1), g_t.sum(axis=1)

    return _emit(np.ascontiguousarray(out), (x, weight, bias), backward, "conv2d")


def maxpool2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling.

    The gradient goes to the arg-max of each window; ties resolve to the
    first element in (y, x) scan order.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    _check_finite(x, "maxpool2x2")
    ho, wo = h // 2, w // 2
    windows = x.value.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray):
        g_win = np.zeros((n, c, ho, wo, 4))
        np.put_along_axis(g_win, idx[..., None], g[..., None], axis=-1)
        g_x = g_win.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (g_x,)

    return _emit(out, (x,), backward, "maxpool2x2")


def relu(x: Tensor) -> Tensor:
    _check_finite(x, "relu")
    mask = x.value > 0
    return _emit(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,), "relu")


def flatten(x: Tensor) -> Tensor:
    """Row-major flatten of everything but the batch axis."""
    shape = x.shape
    out = x.value.reshape(shape[0], -1)
    return _emit(out, (x,), lambda g: (g.reshape(shape),), "flatten")


def linear(x: Tensor, weight: Tensor, bias: Tensor, in_blocks: Optional[Sequence[int]] = None) -> Tensor:
    """``out[b,o] = bias[o] + sum_i x[b,i] * weight[o,i]``.

    ``in_blocks`` splits the input features into blocks accumulated one GEMM
    at a time, as in :func:`conv2d`.
    """
    if x.value.ndim != 2:
        raise ValueError(f"linear expects a (batch, features) input, got shape {x.shape}")
    w_out, w_in = weight.shape
    if x.shape[1] != w_in:
        raise ValueError(f"linear length mismatch: input has {x.shape[1]} features, weight expects {w_in}")
    if bias.shape != (w_out,):
        raise ValueError(f"linear bias shape {bias.shape} != ({w_out},)")
    cols = _spans(in_blocks, w_in, "input")
    _check_finite(x, "linear")
    out = np.zeros((x.shape[0], w_out))
    for cs in cols:
        out += np.ascontiguousarray(x.value[:, cs]) @ np.ascontiguousarray(weight.value[:, cs].T)
    out += bias.value

    def backward(g: np.ndarray):
        return g @ weight.value, g.T @ x.value, g.sum(axis=0)

    return _emit(out, (x, weight, bias), backward, "linear")


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit(np.asarray(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


# ---------------------------------------------------------------------------
# softmax losses
# ---------------------------------------------------------------------------

def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_targets(targets: np.ndarray, batch: int, classes: int) -> np.ndarray:
    targets = np.asarray(targets)
    if targets.shape != (batch,):
        raise ValueError(f"expected {batch} targets, got shape {targets.shape}")
    if not np.issubdtype(targets.dtype, np.integer):
        raise TypeError("targets must be integer class indices")
    if targets.size and (targets.min() < 0 or targets.max() >= classes):
        raise ValueError(f"target out of range [0, {classes})")
    return targets


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[target]``."""
    if logits.value.ndim != 2:
        raise ValueError(f"logits must be (batch, classes), got {logits.shape}")
    batch, classes = logits.shape
    targets = _check_targets(targets, batch, classes)
    _check_finite(logits, "softmax_cross_entropy")
    logp = log_softmax(logits.value)
    rows = np.arange(batch)
    value = -logp[rows, targets].mean()

    def backward(g: np.ndarray):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        return (d * (g / batch),)

    return _emit(np.asarray(value), (logits,), backward, "softmax_cross_entropy")
