"""Minimal reverse-mode autodiff over numpy arrays.

Operations record onto the innermost active :class:`Graph` whenever one of
their inputs requires a gradient.  With no active graph nothing is recorded,
which is how evaluation code runs without building a tape.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Graph() as g:
    ...     loss = sum_all(mul(w, w))
    >>> backward(g, loss)
    >>> w.grad
    array([2., 4.])

Only first-order gradients are supported: backward rules operate on raw
arrays and are never themselves recorded.
"""
from __future__ import annotations

import json
from collections import OrderedDict
from collections.abc import Iterable, Iterator, Mapping, Sequence
from pathlib import Path

import numpy as np

DTYPE = np.float64

_ACTIVE: list["Graph"] = []


def set_default_dtype(dtype) -> None:
    """Switch the global float precision used for new tensors."""
    global DTYPE
    DTYPE = np.dtype(dtype).type


class ShapeError(ValueError):
    pass


class Tensor:
    """Dense float array with an optional gradient accumulator.

    ``grad`` is only written for leaf tensors (those not produced by a
    recorded operation).
    """

    __slots__ = ("data", "grad", "requires_grad", "_graph")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._graph: Graph | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._graph is None

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self, requires_grad: bool = False) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=requires_grad)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class _Node:
    __slots__ = ("kind", "inputs", "out", "backward")

    def __init__(self, kind, inputs, out, backward):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Graph:
    """Tape of recorded operations, in construction order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._index: dict[int, int] = {}

    def __enter__(self) -> "Graph":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def owns(self, t: Tensor) -> bool:
        return t._graph is self

    def _record(self, kind, inputs, out, rule) -> None:
        self._index[id(out)] = len(self.nodes)
        self.nodes.append(_Node(kind, inputs, out, rule))
        out._graph = self


def active_graph() -> Graph | None:
    return _ACTIVE[-1] if _ACTIVE else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive rules: each returns (output array, backward(g) -> tuple of grads)


def _p_add(a, b):
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _p_sub(a, b):
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _p_mul(a, b):
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _p_scale(a, *, c: float):
    return a * c, lambda g: (g * c,)


def _p_matmul(a, b):
    if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    out = np.matmul(a2, b2)

    def rule(g):
        g2 = g
        if a.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if b.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        ga = _unbroadcast(ga, a2.shape).reshape(a.shape)
        gb = _unbroadcast(gb, b2.shape).reshape(b.shape)
        return ga, gb

    if a.ndim == 1:
        out = out.squeeze(-2)
    if b.ndim == 1:
        out = out.squeeze(-1)
    return out, rule


def _p_concat(*xs, axis: int = -1):
    ref = xs[0]
    ax = axis % ref.ndim
    for x in xs[1:]:
        if x.ndim != ref.ndim or any(
            x.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise ShapeError(
                f"concat: shapes disagree off the concat axis, {ref.shape} vs {x.shape}"
            )
    out = np.concatenate(xs, axis=ax)
    cuts = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return out, lambda g: tuple(np.split(g, cuts, axis=ax))


def _p_stack(*xs, axis: int = 0):
    for x in xs[1:]:
        if x.shape != xs[0].shape:
            raise ShapeError(f"stack: shapes differ, {xs[0].shape} vs {x.shape}")
    out = np.stack(xs, axis=axis)
    n = len(xs)
    return out, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n))


def _p_slice(a, *, start: int, stop: int, axis: int = -1):
    if not (0 <= start < stop <= a.shape[axis]):
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis of shape {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = a[idx].copy()

    def rule(g):
        full = np.zeros_like(a)
        full[idx] = g
        return (full,)

    return out, rule


def _p_take(a, *, index: int, axis: int):
    out = np.take(a, index, axis=axis)

    def rule(g):
        full = np.zeros_like(a)
        idx = [slice(None)] * a.ndim
        idx[axis] = index
        full[tuple(idx)] = g
        return (full,)

    return out, rule


def _p_transpose(a):
    return np.swapaxes(a, -1, -2).copy(), lambda g: (np.swapaxes(g, -1, -2),)


def _p_reshape(a, *, shape):
    out = a.reshape(shape)
    if out.size != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return out.copy(), lambda g: (g.reshape(a.shape),)


def _p_tanh(a):
    out = np.tanh(a)
    return out, lambda g: (g * (1.0 - out * out),)


def _p_sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a))
    return out, lambda g: (g * out * (1.0 - out),)


def _p_exp(a):
    out = np.exp(a)
    return out, lambda g: (g * out,)


def _p_log(a):
    return np.log(a), lambda g: (g / a,)


def _p_softmax(a):
    z = np.exp(a - a.max(axis=-1, keepdims=True))
    out = z / z.sum(axis=-1, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return out, rule


def _p_log_softmax(a):
    shifted = a - a.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def rule(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return out, rule


def _p_embedding(table, *, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]})")
    out = table[ids]

    def rule(g):
        full = np.zeros_like(table)
        np.add.at(full, ids, g)
        return (full,)

    return out, rule


def _p_sum(a):
    return np.asarray(a.sum()), lambda g: (np.broadcast_to(g, a.shape).copy(),)


def _p_nll(logp, *, targets, mask):
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=logp.dtype)
    if targets.shape != logp.shape[:-1] or mask.shape != targets.shape:
        raise ShapeError(
            f"cross_entropy: log_probs {logp.shape} vs targets {targets.shape} / mask {mask.shape}"
        )
    total = mask.sum()
    if total <= 0:
        raise ValueError("cross_entropy: mask has no active positions")
    live = mask > 0
    if np.any(targets[live] < 0) or np.any(targets[live] >= logp.shape[-1]):
        raise ValueError(f"cross_entropy: target id outside vocabulary of size {logp.shape[-1]}")
    safe = np.where(live, targets, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    out = np.asarray(-(picked * mask).sum() / total)

    def rule(g):
        full = np.zeros_like(logp)
        np.put_along_axis(full, safe[..., None], (-g * mask / total)[..., None], axis=-1)
        return (full,)

    return out, rule


def _sig(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _p_lstm(x, hc, W, b, *, mask=None):
    """LSTM cell on a packed state ``hc = [h | c]``; padded rows keep their state."""
    H = hc.shape[-1] // 2
    if x.ndim != 2 or hc.ndim != 2 or W.shape != (x.shape[1] + H, 4 * H) or b.shape != (4 * H,):
        raise ShapeError(f"lstm: x {x.shape}, hc {hc.shape}, W {W.shape}, b {b.shape}")
    h, c = hc[:, :H], hc[:, H:]
    xh = np.concatenate([x, h], axis=1)
    z = xh @ W + b
    i, f, o = _sig(z[:, :H]), _sig(z[:, H : 2 * H]), _sig(z[:, 2 * H : 3 * H])
    g = np.tanh(z[:, 3 * H :])
    c2 = f * c + i * g
    tc = np.tanh(c2)
    h2 = o * tc
    m = None
    if mask is not None:
        m = np.asarray(mask, dtype=x.dtype)[:, None]
        h2 = m * h2 + (1.0 - m) * h
        c2 = m * c2 + (1.0 - m) * c
    out = np.concatenate([h2, c2], axis=1)

    def rule(G):
        gh, gc = G[:, :H], G[:, H:]
        if m is not None:
            keep_h, keep_c = (1.0 - m) * gh, (1.0 - m) * gc
            gh, gc = m * gh, m * gc
        do = gh * tc
        dc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [dc * g * i * (1.0 - i), dc * c * f * (1.0 - f), do * o * (1.0 - o), dc * i * (1.0 - g * g)],
            axis=1,
        )
        dW = xh.T @ dz
        dxh = dz @ W.T
        dh = dxh[:, x.shape[1] :]
        dc_prev = dc * f
        if m is not None:
            dh, dc_prev = dh + keep_h, dc_prev + keep_c
        return dxh[:, : x.shape[1]], np.concatenate([dh, dc_prev], axis=1), dW, dz.sum(axis=0)

    return out, rule


_PRIMITIVES = {
    "lstm": _p_lstm,
    "add": _p_add,
    "sub": _p_sub,
    "mul": _p_mul,
    "scale": _p_scale,
    "matmul": _p_matmul,
    "concat": _p_concat,
    "stack": _p_stack,
    "slice": _p_slice,
    "take": _p_take,
    "transpose": _p_transpose,
    "reshape": _p_reshape,
    "tanh": _p_tanh,
    "sigmoid": _p_sigmoid,
    "exp": _p_exp,
    "log": _p_log,
    "softmax": _p_softmax,
    "log_softmax": _p_log_softmax,
    "embedding": _p_embedding,
    "sum": _p_sum,
    "nll": _p_nll,
}

PRIMITIVES = tuple(_PRIMITIVES)


def apply_primitive(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Run primitive ``kind`` forward and record it if any input needs a gradient."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    ts = tuple(as_tensor(x) for x in inputs)
    try:
        data, rule = fn(*(t.data for t in ts), **attrs)
    except ValueError as err:
        if isinstance(err, ShapeError) or "shape" in str(err):
            shapes = ", ".join(str(t.shape) for t in ts)
            raise ShapeError(f"{kind}: incompatible shapes {shapes} ({err})") from None
        raise
    out = Tensor(data)
    graph = active_graph()
    if graph is not None and any(t.requires_grad for t in ts):
        out.requires_grad = True
        graph._record(kind, ts, out, rule)
    return out


def add(a, b):
    return apply_primitive("add", (a, b))


def sub(a, b):
    return apply_primitive("sub", (a, b))


def mul(a, b):
    return apply_primitive("mul", (a, b))


def scale(a, c: float):
    return apply_primitive("scale", (a,), c=float(c))


def matmul(a, b):
    return apply_primitive("matmul", (a, b))


def concat(xs, axis: int = -1):
    return apply_primitive("concat", tuple(xs), axis=axis)


def stack(xs, axis: int = 0):
    return apply_primitive("stack", tuple(xs), axis=axis)


def slice_(a, start: int, stop: int, axis: int = -1):
    return apply_primitive("slice", (a,), start=start, stop=stop, axis=axis)


def take(a, index: int, axis: int = 0):
    """Select position ``index`` along ``axis`` (the axis is dropped)."""
    return apply_primitive("take", (a,), index=int(index), axis=axis)


def transpose(a):
    """Swap the last two axes."""
    return apply_primitive("transpose", (a,))


def reshape(a, shape):
    return apply_primitive("reshape", (a,), shape=tuple(shape))


def tanh(a):
    return apply_primitive("tanh", (a,))


def sigmoid(a):
    return apply_primitive("sigmoid", (a,))


def exp(a):
    return apply_primitive("exp", (a,))


def log(a):
    return apply_primitive("log", (a,))


def softmax(a):
    return apply_primitive("softmax", (a,))


def log_softmax(a):
    return apply_primitive("log_softmax", (a,))


def embedding(table, ids):
    return apply_primitive("embedding", (table,), ids=ids)


def sum_all(a):
    return apply_primitive("sum", (a,))


def lstm(x, hc, W, b, mask=None):
    """Fused LSTM step; gate columns of ``W`` are ordered input, forget, output, candidate."""
    return apply_primitive("lstm", (x, hc, W, b), mask=mask)


def cross_entropy(log_probs, targets, mask) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over positions where ``mask`` is 1.

    ``log_probs`` has shape ``[..., vocab]``; ``targets`` and ``mask`` match the
    leading dimensions.
    """
    return apply_primitive("nll", (log_probs,), targets=targets, mask=mask)


def dropout(x, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: zero with probability ``p`` and rescale survivors."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(DTYPE) / (1.0 - p)
    return mul(x, Tensor(keep))


def backward(graph: Graph, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients add onto whatever is already stored; call ``zero_grad`` on the
    leaves (or :meth:`ParamStore.zero_grad`) to reset.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._graph is not graph:
        raise ValueError("loss was not produced on this graph")
    stop = graph._index[id(loss)]
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes[: stop + 1]):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if not inp.requires_grad:
                continue
            if inp._graph is graph:
                key = id(inp)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi
            else:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi


class no_grad:
    """Suspend recording: ops inside run without any active graph."""

    def __enter__(self):
        self._saved = list(_ACTIVE)
        _ACTIVE.clear()

    def __exit__(self, *exc):
        _ACTIVE[:] = self._saved


# ---------------------------------------------------------------------------
# parameter collections


class ParamStore(Mapping):
    """Ordered name -> Tensor map with whole-model arithmetic."""

    def __init__(self, entries: Iterable[tuple[str, Tensor]] | Mapping | None = None):
        self._entries: OrderedDict[str, Tensor] = OrderedDict()
        if entries is not None:
            items = entries.items() if isinstance(entries, Mapping) else entries
            for name, t in items:
                self[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __setitem__(self, name: str, t) -> None:
        self._entries[name] = as_tensor(t)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}: {tuple(v.shape)}" for k, v in self._entries.items())
        return f"ParamStore({inner})"

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, tuple(v.shape)) for k, v in self._entries.items()]

    def congruent(self, other: Mapping) -> bool:
        return [(k, tuple(as_tensor(v).shape)) for k, v in other.items()] == self.shapes()

    def _check(self, other: Mapping) -> None:
        if not self.congruent(other):
            raise ValueError("parameter stores are not congruent (names or shapes differ)")

    def subset(self, names: Iterable[str]) -> "ParamStore":
        return ParamStore((n, self._entries[n]) for n in names)

    def merged(self, overrides: Mapping) -> "ParamStore":
        """Copy of this store with some entries swapped out (no data copy)."""
        out = ParamStore(self._entries)
        for k, v in overrides.items():
            if k not in self._entries:
                raise KeyError(k)
            out[k] = v
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._entries.items()}

    def restore(self, snap: Mapping[str, np.ndarray]) -> None:
        if list(snap) != list(self._entries):
            raise ValueError("snapshot names do not match store")
        for k, arr in snap.items():
            t = self._entries[k]
            if arr.shape != t.shape:
                raise ValueError(f"snapshot shape mismatch for {k}")
            t.data = arr.copy()

    def copy(self, requires_grad: bool | None = None) -> "ParamStore":
        """Fresh leaves holding copies of the data."""
        return ParamStore(
            (k, Tensor(v.data.copy(), v.requires_grad if requires_grad is None else requires_grad))
            for k, v in self._entries.items()
        )

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def grads(self) -> "ParamStore":
        """Gradients as a congruent store (zeros where none accumulated)."""
        return ParamStore(
            (k, Tensor(np.zeros_like(t.data) if t.grad is None else t.grad.copy()))
            for k, t in self._entries.items()
        )

    def size(self) -> int:
        return int(sum(t.data.size for t in self._entries.values()))

    def flatten(self) -> np.ndarray:
        if not self._entries:
            return np.zeros(0, dtype=DTYPE)
        return np.concatenate([t.data.reshape(-1) for t in self._entries.values()])

    def unflatten(self, flat: np.ndarray) -> "ParamStore":
        flat = np.asarray(flat, dtype=DTYPE)
        if flat.size != self.size():
            raise ValueError(f"flat vector has {flat.size} values, store needs {self.size()}")
        out, pos = ParamStore(), 0
        for k, t in self._entries.items():
            n = t.data.size
            out[k] = Tensor(flat[pos : pos + n].reshape(t.shape).copy())
            pos += n
        return out

    def axpy(self, a: float, other: Mapping) -> "ParamStore":
        """Return ``self + a * other`` as fresh leaves."""
        self._check(other)
        return ParamStore(
            (k, Tensor(t.data + a * as_tensor(other[k]).data, t.requires_grad))
            for k, t in self._entries.items()
        )

    def allclose(self, other: Mapping, atol: float = 0.0, rtol: float = 0.0) -> bool:
        self._check(other)
        return all(
            np.allclose(t.data, as_tensor(other[k]).data, atol=atol, rtol=rtol)
            for k, t in self._entries.items()
        )

    def save(self, path) -> None:
        """Write a JSON manifest line followed by raw little-endian values."""
        manifest = {
            "format": "paramstore-v1",
            "entries": [
                {"name": k, "shape": list(t.shape), "dtype": t.data.dtype.newbyteorder("<").str}
                for k, t in self._entries.items()
            ],
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(manifest).encode() + b"\n")
            for t in self._entries.values():
                fh.write(t.data.astype(t.data.dtype.newbyteorder("<"), copy=False).tobytes())

    @classmethod
    def load(cls, path, requires_grad: bool = True) -> "ParamStore":
        raw = Path(path).read_bytes()
        head, _, body = raw.partition(b"\n")
        manifest = json.loads(head)
        if manifest.get("format") != "paramstore-v1":
            raise ValueError(f"{path}: not a parameter checkpoint")
        out, pos = cls(), 0
        for e in manifest["entries"]:
            dt = np.dtype(e["dtype"])
            n = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
            arr = np.frombuffer(body[pos : pos + n], dtype=dt).reshape(e["shape"])
            t = Tensor(np.zeros(0))
            t.data = arr.astype(dt.newbyteorder("="), copy=True)
            t.requires_grad = requires_grad
            out[e["name"]] = t
            pos += n
        if pos != len(body):
            raise ValueError(f"{path}: trailing bytes after last entry")
        return out


def sgd_step(params: ParamStore, grads: Mapping, lr: float) -> None:
    """In-place ``p <- p - lr * g`` for every entry."""
    if not np.isfinite(lr):
        raise ValueError(f"learning rate must be finite, got {lr}")
    params._check(grads)
    for k, t in params.items():
        t.data = t.data - lr * as_tensor(grads[k]).data


def global_norm(grads: Mapping) -> float:
    return float(np.sqrt(sum(float(np.sum(as_tensor(g).data ** 2)) for g in grads.values())))


def clip_grad_norm(grads: Mapping, max_norm: float) -> float:
    """Rescale ``grads`` in place to global L2 norm ``max_norm``; return the norm before clipping."""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    norm = global_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g.data = g.data * factor
    return norm
