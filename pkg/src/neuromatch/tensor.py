"""Dense float64 tensors with a reverse-mode autodiff tape.

Shapes are restricted to what the encoder and objective stacks need:
scalars, vectors, and 2-D matrices. Broadcasting is supported only
between a matrix and a row vector, a column vector, or a scalar.

Every op computes its value eagerly and, when a tape is active, records
a node carrying the op kind, its input node ids, and a closure over
whatever the backward pass needs. Saved-for-backward follows a
store-outputs-where-cheaper policy: softmax, sigmoid, exp, and
l2-normalize keep their outputs instead of their inputs.

Fixed numeric conventions (tests depend on these):
  * layer_norm epsilon is 1e-5 with biased (1/N) variance,
  * gelu uses the tanh approximation,
  * relu's subgradient at exactly 0 is 0.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5

_GELU_C0 = math.sqrt(2.0 / math.pi)
_GELU_C1 = 0.044715

# Row norms below this are treated as zero rows (an error) by l2_normalize_rows.
_ZERO_ROW_TOL = 1e-30


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """A float64 array plus an optional handle into the active tape.

    ``data`` is always a C-contiguous float64 ndarray; ``node_id`` is set
    when the tensor was produced by (or watched on) the tape identified
    by ``_token``. Tensors created outside a tape act as constants.
    """

    __slots__ = ("data", "node_id", "_token")

    def __init__(self, data, node_id: int | None = None, _token: int | None = None):
        # note: ascontiguousarray would promote 0-d scalars to 1-d
        arr = np.asarray(data, dtype=np.float64, order="C")
        self.data = arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)
        self.node_id = node_id
        self._token = _token

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}{tag})"


def constant(data) -> Tensor:
    """A tensor that is never recorded on any tape."""
    return Tensor(data)


@dataclass
class Node:
    kind: str
    inputs: tuple[int | None, ...]
    shape: tuple[int, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None


_ACTIVE: "Tape | None" = None
_TOKENS = itertools.count(1)


class Tape:
    """Append-only record of ops; node ids are topologically ordered.

    One tape per training step / analysis pass; activate with ``with``.
    ``grads`` is populated by :func:`backprop`.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.grads: dict[int, Tensor] = {}
        self.token = next(_TOKENS)
        self._outer: Tape | None = None

    def __enter__(self) -> "Tape":
        global _ACTIVE
        self._outer = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE
        _ACTIVE = self._outer
        self._outer = None

    def watch(self, t: Tensor) -> Tensor:
        """Register ``t`` as a leaf so gradients w.r.t. it are tracked."""
        if t._token == self.token and t.node_id is not None:
            return t
        nid = len(self.nodes)
        self.nodes.append(Node("leaf", (), t.shape, None))
        t.node_id = nid
        t._token = self.token
        return t

    def _record(self, kind: str, out: Tensor, inputs: Sequence[Tensor], backward) -> None:
        ids = tuple(
            x.node_id if (x._token == self.token and x.node_id is not None) else None
            for x in inputs
        )
        nid = len(self.nodes)
        self.nodes.append(Node(kind, ids, out.shape, backward))
        out.node_id = nid
        out._token = self.token


def _on_tape(t: Tensor) -> bool:
    return _ACTIVE is not None and t._token == _ACTIVE.token and t.node_id is not None


def _maybe_record(kind: str, out: Tensor, inputs: Sequence[Tensor], backward) -> None:
    if _ACTIVE is not None and any(_on_tape(x) for x in inputs):
        _ACTIVE._record(kind, out, inputs, backward)


def backprop(tape: Tape, root: Tensor, wanted: set[int] | None = None) -> dict[int, Tensor]:
    """Reverse sweep from a scalar root; returns node id -> gradient Tensor.

    With ``wanted=None`` (the contract case) the map covers every node on
    the tape, zeros for nodes unreachable from the root, and is also
    stored on ``tape.grads``. Passing a set of node ids restricts the
    result to those ids and lets intermediate gradients be freed as the
    sweep passes them; training uses this to bound memory.
    """
    if root._token != tape.token or root.node_id is None:
        raise TapeError("root is not on this tape")
    if root.data.ndim != 0:
        raise TapeError("root must be a scalar")

    acc: dict[int, np.ndarray] = {root.node_id: np.ones((), dtype=np.float64)}
    for nid in range(root.node_id, -1, -1):
        g = acc.get(nid)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.backward is not None:
            for iid, ig in zip(node.inputs, node.backward(g)):
                if iid is None or ig is None:
                    continue
                prev = acc.get(iid)
                acc[iid] = ig if prev is None else prev + ig
        if wanted is not None and nid not in wanted:
            del acc[nid]

    if wanted is None:
        out = {
            nid: Tensor(acc[nid]) if nid in acc else Tensor(np.zeros(node.shape))
            for nid, node in enumerate(tape.nodes)
        }
        tape.grads = out
        return out
    return {
        nid: Tensor(acc[nid]) if nid in acc else Tensor(np.zeros(tape.nodes[nid].shape))
        for nid in wanted
    }


# ---------------------------------------------------------------------------
# broadcasting helpers (matrix vs row / column / scalar only)


def _broadcast_ok(sa: tuple, sb: tuple) -> bool:
    if sa == sb:
        return True
    if sa == () or sb == ():
        return True
    if len(sa) == 2 and len(sb) == 2:
        if sa[0] == 1 and sa[1] == sb[1]:
            return True
        if sb[0] == 1 and sb[1] == sa[1]:
            return True
        if sa[1] == 1 and sa[0] == sb[0]:
            return True
        if sb[1] == 1 and sb[0] == sa[0]:
            return True
    if len(sa) == 1 and len(sb) == 2 and sb[1] == sa[0]:
        return True
    if len(sb) == 1 and len(sa) == 2 and sa[1] == sb[0]:
        return True
    return False


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    if len(shape) == 1:
        return g.sum(axis=0) if g.ndim == 2 else g.reshape(shape)
    if shape[0] == 1:
        return g.sum(axis=0, keepdims=True)
    if shape[1] == 1:
        return g.sum(axis=1, keepdims=True)
    raise ShapeError(f"cannot reduce gradient {g.shape} to {shape}")


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data + b.data)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    _maybe_record("add", out, (a, b), backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data * b.data)
    ad, bd, sa, sb = a.data, b.data, a.shape, b.shape

    def backward(g):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    _maybe_record("mul", out, (a, b), backward)
    return out


def scale(a: Tensor, factor: float) -> Tensor:
    c = float(factor)
    out = Tensor(a.data * c)
    _maybe_record("scale", out, (a,), lambda g: (g * c,))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects two 2-D tensors")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    _maybe_record("matmul", out, (a, b), backward)
    return out


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose2d expects a 2-D tensor")
    out = Tensor(a.data.T)
    _maybe_record("transpose2d", out, (a,), lambda g: (g.T,))
    return out


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis ("rows" of a matrix; also valid in 3-D)."""
    if a.data.ndim == 0:
        raise ShapeError("softmax_rows needs at least one axis")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    y = z
    out = Tensor(y)

    def backward(g):
        gy = g * y
        gy -= y * gy.sum(axis=-1, keepdims=True)
        return (gy,)

    _maybe_record("softmax_rows", out, (a,), backward)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim not in (1, 2):
        raise ShapeError("layer_norm expects a 1-D or 2-D tensor")
    d = x.shape[-1]
    for p in (gain, bias):
        if p.shape not in ((d,), (1, d)):
            raise ShapeError(f"layer_norm gain/bias must have last dim {d}, got {p.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)
    gd, gshape, bshape = gain.data, gain.shape, bias.shape

    def backward(g):
        gx_hat = g * gd
        m1 = gx_hat.mean(axis=-1, keepdims=True)
        m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (gx_hat - m1 - xhat * m2)
        dgain = _unbroadcast(g * xhat, gshape)
        dbias = _unbroadcast(g, bshape)
        return dx, dgain, dbias

    _maybe_record("layer_norm", out, (x, gain, bias), backward)
    return out


def gelu(a: Tensor) -> Tensor:
    x = a.data
    t = np.tanh(_GELU_C0 * (x + _GELU_C1 * (x * x * x)))
    out = Tensor(0.5 * x * (1.0 + t))

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    _maybe_record("gelu", out, (a,), backward)
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0.0))
    _maybe_record("relu", out, (a,), lambda g: (g * mask,))
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(y)
    _maybe_record("sigmoid", out, (a,), lambda g: (g * y * (1.0 - y),))
    return out


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y)
    _maybe_record("exp", out, (a,), lambda g: (g * y,))
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    x = a.data
    out = Tensor(np.log(x))
    _maybe_record("log", out, (a,), lambda g: (g / x,))
    return out


def mean_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.mean())
    shape, n = a.shape, a.data.size

    def backward(g):
        return (np.full(shape, float(g) / n),)

    _maybe_record("mean_all", out, (a,), backward)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    shape = a.shape
    _maybe_record("sum_all", out, (a,), lambda g: (np.full(shape, float(g)),))
    return out


def l2_normalize_rows(a: Tensor) -> Tensor:
    if a.data.ndim not in (1, 2):
        raise ShapeError("l2_normalize_rows expects a 1-D or 2-D tensor")
    norms = np.sqrt((a.data**2).sum(axis=-1, keepdims=True))
    if np.any(norms < _ZERO_ROW_TOL):
        raise DomainError("l2_normalize_rows: zero row")
    y = a.data / norms
    out = Tensor(y)

    def backward(g):
        gy = (g * y).sum(axis=-1, keepdims=True)
        return ((g - y * gy) / norms,)

    _maybe_record("l2_normalize_rows", out, (a,), backward)
    return out


def concat_last_dim(tensors: Sequence[Tensor]) -> Tensor:
    if len(tensors) == 0:
        raise ShapeError("concat_last_dim of an empty list")
    nd = tensors[0].data.ndim
    if nd not in (1, 2) or any(t.data.ndim != nd for t in tensors):
        raise ShapeError("concat_last_dim expects tensors of equal rank (1-D or 2-D)")
    if nd == 2 and any(t.shape[0] != tensors[0].shape[0] for t in tensors):
        raise ShapeError("concat_last_dim: leading dimensions differ")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=-1))
    widths = [t.shape[-1] for t in tensors]

    def backward(g):
        pieces, start = [], 0
        for w in widths:
            pieces.append(g[..., start : start + w])
            start += w
        return pieces

    _maybe_record("concat_last_dim", out, tuple(tensors), backward)
    return out


def slice_(a: Tensor, bounds: tuple[int, ...]) -> Tensor:
    """Contiguous sub-block; bounds are (i0, i1) in 1-D or (r0, r1, c0, c1) in 2-D."""
    if a.data.ndim == 1:
        if len(bounds) != 2:
            raise ShapeError("1-D slice needs (i0, i1)")
        i0, i1 = bounds
        if not (0 <= i0 < i1 <= a.shape[0]):
            raise ShapeError(f"slice bounds {bounds} invalid for shape {a.shape}")
        out = Tensor(a.data[i0:i1])
        shape = a.shape

        def backward(g):
            z = np.zeros(shape)
            z[i0:i1] = g
            return (z,)

    elif a.data.ndim == 2:
        if len(bounds) != 4:
            raise ShapeError("2-D slice needs (r0, r1, c0, c1)")
        r0, r1, c0, c1 = bounds
        if not (0 <= r0 < r1 <= a.shape[0] and 0 <= c0 < c1 <= a.shape[1]):
            raise ShapeError(f"slice bounds {bounds} invalid for shape {a.shape}")
        out = Tensor(a.data[r0:r1, c0:c1])
        shape = a.shape

        def backward(g):
            z = np.zeros(shape)
            z[r0:r1, c0:c1] = g
            return (z,)

    else:
        raise ShapeError("slice expects a 1-D or 2-D tensor")

    _maybe_record("slice", out, (a,), backward)
    return out


# Structural ops beyond the core primitive kinds: pure data movement the
# encoder needs (patch extraction, stacking). Linear, exactly differentiable,
# and covered by the same finite-difference sweeps as the primitives.


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"reshape {a.shape} -> {shape}: size mismatch")
    out = Tensor(a.data.reshape(shape))
    old = a.shape
    _maybe_record("reshape", out, (a,), lambda g: (g.reshape(old),))
    return out


def gather(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[k] = a[idx[k]] for 1-D ``a``; backward scatter-adds."""
    if a.data.ndim != 1:
        raise ShapeError("gather expects a 1-D tensor")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError("gather index out of range")
    out = Tensor(a.data[idx])
    shape = a.shape

    def backward(g):
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return (z,)

    _maybe_record("gather", out, (a,), backward)
    return out


def permute_axes(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    """np.transpose with an explicit axis order; backward inverts it."""
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"axes {axes} is not a permutation of rank {a.data.ndim}")
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    inverse = tuple(int(i) for i in np.argsort(axes))
    _maybe_record("permute_axes", out, (a,), lambda g: (g.transpose(inverse),))
    return out


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over stacks of matrices: (B, n, k) @ (B, k, m)."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError("bmm expects two 3-D tensors")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

    _maybe_record("bmm", out, (a, b), backward)
    return out


# ---------------------------------------------------------------------------
# dispatch + gradient checking

_PRIMITIVES: dict[str, Callable] = {
    "matmul": lambda ins, kw: matmul(*ins),
    "add": lambda ins, kw: add(*ins),
    "mul": lambda ins, kw: mul(*ins),
    "scale": lambda ins, kw: scale(ins[0], kw["factor"]),
    "transpose2d": lambda ins, kw: transpose2d(*ins),
    "softmax_rows": lambda ins, kw: softmax_rows(*ins),
    "layer_norm": lambda ins, kw: layer_norm(*ins),
    "gelu": lambda ins, kw: gelu(*ins),
    "relu": lambda ins, kw: relu(*ins),
    "sigmoid": lambda ins, kw: sigmoid(*ins),
    "exp": lambda ins, kw: exp(*ins),
    "log": lambda ins, kw: log(*ins),
    "mean_all": lambda ins, kw: mean_all(*ins),
    "sum_all": lambda ins, kw: sum_all(*ins),
    "l2_normalize_rows": lambda ins, kw: l2_normalize_rows(*ins),
    "concat_last_dim": lambda ins, kw: concat_last_dim(ins),
    "slice": lambda ins, kw: slice_(ins[0], kw["bounds"]),
}


def apply_primitive(kind: str, inputs: Sequence[Tensor], **params) -> Tensor:
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind {kind!r}") from None
    return fn(list(inputs), params)


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError("eps must be in (0, 1e-2]")
    with Tape() as tape:
        p = tape.watch(Tensor(point.data.copy()))
        out = f(p)
        if out.data.ndim != 0:
            raise ValueError("f must return a scalar")
        if out._token == tape.token and out.node_id is not None:
            analytic = backprop(tape, out, wanted={p.node_id})[p.node_id].data
        else:
            # f never touched the tape: a constant function, gradient zero
            analytic = np.zeros_like(p.data)

    base = point.data.copy()
    numeric = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    while not it.finished:
        ix = it.multi_index
        for sgn in (+1.0, -1.0):
            pert = base.copy()
            pert[ix] += sgn * eps
            val = f(Tensor(pert))
            if val.data.ndim != 0:
                raise ValueError("f must return a scalar")
            numeric[ix] += sgn * float(val.data)
        numeric[ix] /= 2.0 * eps
        it.iternext()

    denom = np.maximum(1.0, np.abs(analytic))
    return float((np.abs(analytic - numeric) / denom).max())
